//! Greedy, temperature/top-p, and beam decoding over a frozen model.
//!
//! Inference runs through [`IncrementalDecoder`], which keeps per-layer K/V
//! caches so each new token costs one attention row instead of a full
//! re-forward. Beams clone the decoder state on expansion.

use rand::Rng;

use super::model::PolicyModel;
use super::tokenizer::EOS;
use super::{DecodeConfig, TinylmError};

/// Single-sequence decoder state with per-layer K/V caches.
///
/// `push` consumes one token and exposes the logits, final hidden state, and
/// value at that position.
#[derive(Clone)]
pub struct IncrementalDecoder<'m> {
    model: &'m PolicyModel,
    pos: usize,
    k_cache: Vec<Vec<f64>>, // per layer, pos × d_model
    v_cache: Vec<Vec<f64>>,
    logits: Vec<f64>,
    hidden: Vec<f64>,
    value: f64,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m PolicyModel) -> Self {
        Self {
            model,
            pos: 0,
            k_cache: vec![Vec::new(); model.config.n_layers],
            v_cache: vec![Vec::new(); model.config.n_layers],
            logits: Vec::new(),
            hidden: Vec::new(),
            value: 0.0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Logits of the most recently pushed position.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn push_all(&mut self, ids: &[u32]) -> Result<(), TinylmError> {
        for &id in ids {
            self.push(id)?;
        }
        Ok(())
    }

    /// Consume one token at the current position.
    pub fn push(&mut self, id: u32) -> Result<(), TinylmError> {
        let cfg = &self.model.config;
        if self.pos >= cfg.context_len {
            return Err(TinylmError::ContextOverflow {
                len: self.pos + 1,
                context: cfg.context_len,
            });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.model.params;
        let t = self.pos;

        let tok = id as usize;
        let mut x: Vec<f64> = (0..d)
            .map(|i| p.tok_emb[tok * d + i] + p.pos_emb[t * d + i])
            .collect();

        for (l, b) in p.blocks.iter().enumerate() {
            let a_in = layer_norm_row(&x, &b.ln1_g, &b.ln1_b);
            let q = affine(&a_in, &b.wq, &b.bq, d, d);
            let k = affine(&a_in, &b.wk, &b.bk, d, d);
            let v = affine(&a_in, &b.wv, &b.bv, d, d);
            self.k_cache[l].extend_from_slice(&k);
            self.v_cache[l].extend_from_slice(&v);

            let kc = &self.k_cache[l];
            let vc = &self.v_cache[l];
            let mut ctx = vec![0.0; d];
            for h in 0..heads {
                let off = h * hd;
                let qrow = &q[off..off + hd];
                let mut scores = vec![0.0; t + 1];
                let mut maxv = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let krow = &kc[j * d + off..j * d + off + hd];
                    *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    maxv = maxv.max(*s);
                }
                let mut sum = 0.0;
                for s in &mut scores {
                    *s = (*s - maxv).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let a = s / sum;
                    let vrow = &vc[j * d + off..j * d + off + hd];
                    for (c, &vv) in ctx[off..off + hd].iter_mut().zip(vrow) {
                        *c += a * vv;
                    }
                }
            }
            let att_out = affine(&ctx, &b.wo, &b.bo, d, d);
            for (xi, ai) in x.iter_mut().zip(&att_out) {
                *xi += ai;
            }

            let f_in = layer_norm_row(&x, &b.ln2_g, &b.ln2_b);
            let fdim = 4 * d;
            let mut pre = affine(&f_in, &b.fc1, &b.b1, d, fdim);
            for z in &mut pre {
                *z = gelu(*z);
            }
            let ffn_out = affine(&pre, &b.fc2, &b.b2, fdim, d);
            for (xi, fi) in x.iter_mut().zip(&ffn_out) {
                *xi += fi;
            }
        }

        let h_f = layer_norm_row(&x, &p.ln_f_g, &p.ln_f_b);
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; vocab];
        for (v, lrow) in logits.iter_mut().zip(p.lm_head.chunks(d)) {
            *v = h_f.iter().zip(lrow).map(|(a, b)| a * b).sum();
        }
        self.value = h_f
            .iter()
            .zip(&p.value_w)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + p.value_b[0];
        self.logits = logits;
        self.hidden = h_f;
        self.pos += 1;
        Ok(())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    (0..d).map(|i| g[i] * (x[i] - mean) * rstd + b[i]).collect()
}

fn affine(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; dout];
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = x
            .iter()
            .zip(&w[o * din..(o + 1) * din])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + b[o];
    }
    y
}

pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let scaled: Vec<f64> = logits.iter().map(|&z| z / t).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = scaled
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    scaled.iter().map(|&z| z - log_sum).collect()
}

fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Log-probability of `token` under `softmax(logits / temperature)`.
pub fn token_logprob(logits: &[f64], temperature: f64, token: u32) -> f64 {
    log_softmax(logits, temperature)[token as usize]
}

/// Sample a token and return it with its log-probability. The probability is
/// taken from the untruncated distribution even when `top_p < 1`.
pub fn sample_with_logprob<R: Rng>(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> (u32, f64) {
    let token = sample_token(logits, temperature, top_p, rng);
    (token, token_logprob(logits, temperature, token))
}

/// Temperature + top-p sampling from one logits row.
pub(crate) fn sample_token<R: Rng>(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> u32 {
    let lp = log_softmax(logits, temperature);
    let mut probs: Vec<(usize, f64)> = lp.iter().map(|&l| l.exp()).enumerate().collect();
    // descending by probability, ties by id for determinism
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut kept = 0usize;
    let mut mass = 0.0;
    for (i, (_, p)) in probs.iter().enumerate() {
        mass += p;
        kept = i + 1;
        if mass >= top_p {
            break;
        }
    }
    let kept = kept.max(1);
    let norm: f64 = probs[..kept].iter().map(|(_, p)| p).sum();
    let mut dart = rng.gen::<f64>() * norm;
    for (id, p) in &probs[..kept] {
        dart -= p;
        if dart <= 0.0 {
            return *id as u32;
        }
    }
    probs[kept - 1].0 as u32
}

/// Decode continuation ids for `prompt_ids` (the generated span only,
/// including the terminating EOS when one is produced).
///
/// - `temperature == 0` → greedy argmax, deterministic, beam size ignored.
/// - `beam_size == 1`, `temperature > 0` → temperature/top-p sampling.
/// - `beam_size > 1`, `temperature > 0` → deterministic beam search over
///   cumulative log-probabilities of `softmax(logits / temperature)`.
pub fn generate<R: Rng>(
    model: &PolicyModel,
    prompt_ids: &[u32],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<u32>, TinylmError> {
    cfg.validate().map_err(|reason| TinylmError::BadCheckpoint {
        path: "decode-config".into(),
        reason,
    })?;
    let context = model.config.context_len;
    if prompt_ids.is_empty() || prompt_ids.len() >= context {
        return Err(TinylmError::ContextOverflow {
            len: prompt_ids.len(),
            context,
        });
    }
    let allowed = cfg.max_new_tokens.min(context - prompt_ids.len());

    let mut decoder = IncrementalDecoder::new(model);
    decoder.push_all(prompt_ids)?;

    if cfg.temperature == 0.0 {
        let mut out = Vec::new();
        for _ in 0..allowed {
            let token = argmax(decoder.logits());
            out.push(token);
            if token == EOS {
                break;
            }
            decoder.push(token)?;
        }
        return Ok(out);
    }

    if cfg.beam_size == 1 {
        let mut out = Vec::new();
        for _ in 0..allowed {
            let token = sample_token(decoder.logits(), cfg.temperature, cfg.top_p, rng);
            out.push(token);
            if token == EOS {
                break;
            }
            decoder.push(token)?;
        }
        return Ok(out);
    }

    beam_search(model, decoder, cfg, allowed)
}

struct Beam<'m> {
    gen: Vec<u32>,
    score: f64,
    decoder: IncrementalDecoder<'m>,
}

fn beam_search<'m>(
    _model: &'m PolicyModel,
    root: IncrementalDecoder<'m>,
    cfg: &DecodeConfig,
    allowed: usize,
) -> Result<Vec<u32>, TinylmError> {
    let mut live = vec![Beam {
        gen: Vec::new(),
        score: 0.0,
        decoder: root,
    }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _ in 0..allowed {
        if live.is_empty() {
            break;
        }
        // candidate continuations of every live beam
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            let lp = log_softmax(beam.decoder.logits(), cfg.temperature);
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((bi, tok as u32, beam.score + l));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then_with(|| {
                    let sa = &live[a.0].gen;
                    let sb = &live[b.0].gen;
                    sa.cmp(sb).then(a.1.cmp(&b.1))
                })
        });
        candidates.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cfg.beam_size);
        for (bi, tok, score) in candidates {
            let mut gen = live[bi].gen.clone();
            gen.push(tok);
            if tok == EOS {
                finished.push((gen, score));
                continue;
            }
            let mut decoder = live[bi].decoder.clone();
            decoder.push(tok)?;
            next.push(Beam {
                gen,
                score,
                decoder,
            });
        }
        live = next;
    }
    // beams still alive at the length limit count as finished
    for beam in live {
        finished.push((beam.gen, beam.score));
    }

    finished.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.0.len().cmp(&b.0.len()))
            .then(a.0.cmp(&b.0))
    });
    Ok(finished
        .into_iter()
        .next()
        .map(|(gen, _)| gen)
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> PolicyModel {
        PolicyModel::new(ModelConfig::tiny(1, 16, 2, 48), seed)
    }

    #[test]
    fn incremental_matches_full_forward() {
        let model = tiny_model(0);
        let ids = vec![10, 65, 66, 7, 200];
        let (full, _) = model.forward(&ids).unwrap();
        let mut dec = IncrementalDecoder::new(&model);
        for (t, &id) in ids.iter().enumerate() {
            dec.push(id).unwrap();
            let v = model.config.vocab_size;
            let full_row = full.logits_at(t, v);
            for (a, b) in dec.logits().iter().zip(full_row) {
                assert!((a - b).abs() < 1e-9, "mismatch at {t}");
            }
            assert!((dec.value() - full.values[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let model = tiny_model(1);
        let cfg = DecodeConfig::greedy(12);
        let prompt = vec![10, 20, 30];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = generate(&model, &prompt, &cfg, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let b = generate(&model, &prompt, &cfg, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beam_one_at_zero_temperature_is_greedy() {
        let model = tiny_model(2);
        let prompt = vec![4, 5];
        let greedy = generate(
            &model,
            &prompt,
            &DecodeConfig::greedy(10),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let beam1 = generate(
            &model,
            &prompt,
            &DecodeConfig {
                temperature: 0.0,
                top_p: 1.0,
                beam_size: 1,
                max_new_tokens: 10,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(greedy, beam1);
    }

    #[test]
    fn sampling_respects_seed() {
        let model = tiny_model(3);
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_p: 0.9,
            beam_size: 1,
            max_new_tokens: 16,
        };
        let prompt = vec![1, 2, 3];
        let a = generate(&model, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate(&model, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    /// Oracle: enumerate every token sequence of the allowed length and
    /// score it with full forward passes.
    fn exhaustive_best(
        model: &PolicyModel,
        prompt: &[u32],
        temperature: f64,
        length: usize,
    ) -> (Vec<u32>, f64) {
        let vocab = model.config.vocab_size as u32;
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut seq = vec![0u32; length];
        loop {
            // score this assignment (skip sequences with EOS before the end;
            // sequences ending early at EOS are scored at their EOS prefix)
            let mut ids = prompt.to_vec();
            let mut score = 0.0;
            let mut gen = Vec::new();
            for (step, &tok) in seq.iter().enumerate() {
                let (out, _) = model.forward(&ids).unwrap();
                let lp = log_softmax(
                    out.logits_at(ids.len() - 1, model.config.vocab_size),
                    temperature,
                );
                score += lp[tok as usize];
                gen.push(tok);
                if tok == EOS {
                    break;
                }
                ids.push(tok);
                let _ = step;
            }
            let candidate = (gen, score);
            best = match best {
                None => Some(candidate),
                Some(cur) => {
                    let better = candidate.1 > cur.1
                        || (candidate.1 == cur.1 && candidate.0.len() < cur.0.len())
                        || (candidate.1 == cur.1
                            && candidate.0.len() == cur.0.len()
                            && candidate.0 < cur.0);
                    Some(if better { candidate } else { cur })
                }
            };
            // odometer increment
            let mut i = 0;
            loop {
                if i == length {
                    return best.unwrap();
                }
                seq[i] += 1;
                if seq[i] < vocab {
                    break;
                }
                seq[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn wide_beam_reproduces_exhaustive_argmax_on_toy_vocab() {
        // 3-token vocabulary: beam 27 covers every sequence of length <= 3
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            vocab_size: 3,
        };
        let model = PolicyModel::new(config, 21);
        let prompt = vec![0, 1];
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_p: 1.0,
            beam_size: 27,
            max_new_tokens: 3,
        };
        let beam = generate(&model, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (oracle, _) = exhaustive_best(&model, &prompt, 1.0, 3);
        assert_eq!(beam, oracle);
    }

    #[test]
    fn beam_two_matches_exhaustive_on_peaked_toy_model() {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            vocab_size: 3,
        };
        let model = PolicyModel::new(config, 33);
        let prompt = vec![2];
        let cfg = DecodeConfig {
            temperature: 0.5,
            top_p: 1.0,
            beam_size: 2,
            max_new_tokens: 3,
        };
        let beam = generate(&model, &prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (oracle, _) = exhaustive_best(&model, &prompt, 0.5, 3);
        assert_eq!(beam, oracle);
    }

    #[test]
    fn generation_stops_at_context_boundary() {
        let model = tiny_model(4);
        let context = model.config.context_len;
        let prompt = vec![1u32; context - 3];
        let out = generate(
            &model,
            &prompt,
            &DecodeConfig::greedy(100),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(out.len() <= 3);
    }
}
