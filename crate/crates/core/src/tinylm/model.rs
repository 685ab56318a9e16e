//! The decoder network: parameters, forward pass with activation cache,
//! hand-written backward pass, and the Adam optimizer.
//!
//! Layout: token + learned position embeddings, `n_layers` pre-norm blocks
//! (causal multi-head attention, then a GELU feed-forward), a final
//! layer-norm, an untied output projection, and a scalar value head read
//! from the final hidden states. An optional scalar reward head shares the
//! same trunk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TinylmError, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;

/// Model hyperparameters. The defaults are the desk-scale configuration;
/// tests shrink them further.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context_len: 256,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn tiny(n_layers: usize, d_model: usize, n_heads: usize, context_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            context_len,
            vocab_size: VOCAB_SIZE,
        }
    }

    fn head_dim(&self) -> usize {
        debug_assert_eq!(self.d_model % self.n_heads.max(1), 0);
        self.d_model / self.n_heads
    }

    fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub fc1: Vec<f64>,
    pub b1: Vec<f64>,
    pub fc2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// All trainable tensors. Also used as the gradient accumulator, so the
/// optimizer can walk parameters and gradients in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub ln_f_g: Vec<f64>,
    pub ln_f_b: Vec<f64>,
    pub lm_head: Vec<f64>,
    pub value_w: Vec<f64>,
    pub value_b: Vec<f64>,
    pub reward_w: Option<Vec<f64>>,
    pub reward_b: Option<Vec<f64>>,
}

/// Gradient buffer with the same shape as [`Params`].
pub type Gradients = Params;

impl Params {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * normal_sample(rng)).collect()
        };
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: gauss(d * d, 0.02),
                bq: vec![0.0; d],
                wk: gauss(d * d, 0.02),
                bk: vec![0.0; d],
                wv: gauss(d * d, 0.02),
                bv: vec![0.0; d],
                wo: gauss(d * d, 0.02),
                bo: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                fc1: gauss(f * d, 0.02),
                b1: vec![0.0; f],
                fc2: gauss(d * f, 0.02),
                b2: vec![0.0; d],
            })
            .collect();
        Self {
            tok_emb: gauss(cfg.vocab_size * d, 0.02),
            pos_emb: gauss(cfg.context_len * d, 0.02),
            blocks,
            ln_f_g: vec![1.0; d],
            ln_f_b: vec![0.0; d],
            lm_head: gauss(cfg.vocab_size * d, 0.02),
            value_w: vec![0.0; d],
            value_b: vec![0.0; 1],
            reward_w: None,
            reward_b: None,
        }
    }

    fn zeros_like(&self) -> Self {
        let zero_block = |b: &BlockParams| BlockParams {
            ln1_g: vec![0.0; b.ln1_g.len()],
            ln1_b: vec![0.0; b.ln1_b.len()],
            wq: vec![0.0; b.wq.len()],
            bq: vec![0.0; b.bq.len()],
            wk: vec![0.0; b.wk.len()],
            bk: vec![0.0; b.bk.len()],
            wv: vec![0.0; b.wv.len()],
            bv: vec![0.0; b.bv.len()],
            wo: vec![0.0; b.wo.len()],
            bo: vec![0.0; b.bo.len()],
            ln2_g: vec![0.0; b.ln2_g.len()],
            ln2_b: vec![0.0; b.ln2_b.len()],
            fc1: vec![0.0; b.fc1.len()],
            b1: vec![0.0; b.b1.len()],
            fc2: vec![0.0; b.fc2.len()],
            b2: vec![0.0; b.b2.len()],
        };
        Self {
            tok_emb: vec![0.0; self.tok_emb.len()],
            pos_emb: vec![0.0; self.pos_emb.len()],
            blocks: self.blocks.iter().map(zero_block).collect(),
            ln_f_g: vec![0.0; self.ln_f_g.len()],
            ln_f_b: vec![0.0; self.ln_f_b.len()],
            lm_head: vec![0.0; self.lm_head.len()],
            value_w: vec![0.0; self.value_w.len()],
            value_b: vec![0.0; self.value_b.len()],
            reward_w: self.reward_w.as_ref().map(|w| vec![0.0; w.len()]),
            reward_b: self.reward_b.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    /// Tensors in canonical order (the checkpoint and optimizer order).
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, tensor) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("fc1", &b.fc1),
                ("b1", &b.b1),
                ("fc2", &b.fc2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{i}.{suffix}"), tensor));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out.push(("lm_head".into(), &self.lm_head));
        out.push(("value_w".into(), &self.value_w));
        out.push(("value_b".into(), &self.value_b));
        if let Some(w) = &self.reward_w {
            out.push(("reward_w".into(), w));
        }
        if let Some(b) = &self.reward_b {
            out.push(("reward_b".into(), b));
        }
        out
    }

    /// Mutable view of the tensors in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, tensor) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("bq", &mut b.bq),
                ("wk", &mut b.wk),
                ("bk", &mut b.bk),
                ("wv", &mut b.wv),
                ("bv", &mut b.bv),
                ("wo", &mut b.wo),
                ("bo", &mut b.bo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("fc1", &mut b.fc1),
                ("b1", &mut b.b1),
                ("fc2", &mut b.fc2),
                ("b2", &mut b.b2),
            ] {
                out.push((format!("block{i}.{suffix}"), tensor));
            }
        }
        out.push(("ln_f_g".into(), &mut self.ln_f_g));
        out.push(("ln_f_b".into(), &mut self.ln_f_b));
        out.push(("lm_head".into(), &mut self.lm_head));
        out.push(("value_w".into(), &mut self.value_w));
        out.push(("value_b".into(), &mut self.value_b));
        if let Some(w) = self.reward_w.as_mut() {
            out.push(("reward_w".into(), w));
        }
        if let Some(b) = self.reward_b.as_mut() {
            out.push(("reward_b".into(), b));
        }
        out
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// The policy network θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: ModelConfig,
    pub params: Params,
}

/// Per-position outputs of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `len × vocab` unnormalized logits, row-major.
    pub logits: Vec<f64>,
    /// `len × d_model` final hidden states (after the last layer norm).
    pub hidden: Vec<f64>,
    /// Scalar value per position.
    pub values: Vec<f64>,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize, vocab: usize) -> &[f64] {
        &self.logits[pos * vocab..(pos + 1) * vocab]
    }

    pub fn hidden_at(&self, pos: usize, d: usize) -> &[f64] {
        &self.hidden[pos * d..(pos + 1) * d]
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>, // n_heads × len × len
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct LayerNormCache {
    /// g ⊙ x̂ + b — the input to the following linear layer.
    out: Vec<f64>,
    /// x̂ — the pre-gain normalized values.
    normed: Vec<f64>,
    rstd: Vec<f64>,
}

/// Activations saved by [`PolicyModel::forward`] for the backward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
}

impl PolicyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        Self { config, params }
    }

    /// Enable the scalar reward head (zero-initialized).
    pub fn with_reward_head(mut self) -> Self {
        if self.params.reward_w.is_none() {
            self.params.reward_w = Some(vec![0.0; self.config.d_model]);
            self.params.reward_b = Some(vec![0.0; 1]);
        }
        self
    }

    pub fn has_reward_head(&self) -> bool {
        self.params.reward_w.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Reward-head score at `pos`: `r_w · hidden[pos] + r_b`.
    pub fn reward_score(&self, output: &ForwardOutput, pos: usize) -> Option<f64> {
        let w = self.params.reward_w.as_ref()?;
        let b = self.params.reward_b.as_ref()?;
        let d = self.config.d_model;
        let h = output.hidden_at(pos, d);
        Some(dot(w, h) + b[0])
    }

    /// Full causal forward pass over `ids`, returning per-position logits,
    /// final hidden states, values, and the activation cache.
    pub fn forward(&self, ids: &[u32]) -> Result<(ForwardOutput, ForwardCache), TinylmError> {
        let cfg = &self.config;
        let len = ids.len();
        if len == 0 || len > cfg.context_len {
            return Err(TinylmError::ContextOverflow {
                len,
                context: cfg.context_len,
            });
        }
        let d = cfg.d_model;
        let fdim = cfg.ffn_dim();
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;

        // embeddings
        let mut x = vec![0.0; len * d];
        for t in 0..len {
            let tok = ids[t] as usize;
            debug_assert!(tok < cfg.vocab_size);
            for i in 0..d {
                x[t * d + i] = p.tok_emb[tok * d + i] + p.pos_emb[t * d + i];
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &p.blocks {
            // attention
            let ln1 = layer_norm(&x, &b.ln1_g, &b.ln1_b, len, d);
            let q = linear(&ln1.out, &b.wq, Some(&b.bq), len, d, d);
            let k = linear(&ln1.out, &b.wk, Some(&b.bk), len, d, d);
            let v = linear(&ln1.out, &b.wv, Some(&b.bv), len, d, d);

            let mut att = vec![0.0; heads * len * len];
            let mut ctx = vec![0.0; len * d];
            for h in 0..heads {
                let off = h * hd;
                for t in 0..len {
                    let qrow = &q[t * d + off..t * d + off + hd];
                    let arow = &mut att[h * len * len + t * len..h * len * len + t * len + t + 1];
                    let mut maxv = f64::NEG_INFINITY;
                    for (j, a) in arow.iter_mut().enumerate() {
                        let krow = &k[j * d + off..j * d + off + hd];
                        *a = dot(qrow, krow) * scale;
                        maxv = maxv.max(*a);
                    }
                    let mut sum = 0.0;
                    for a in arow.iter_mut() {
                        *a = (*a - maxv).exp();
                        sum += *a;
                    }
                    for a in arow.iter_mut() {
                        *a /= sum;
                    }
                    let crow = &mut ctx[t * d + off..t * d + off + hd];
                    for (j, &a) in arow.iter().enumerate() {
                        let vrow = &v[j * d + off..j * d + off + hd];
                        for (c, &vv) in crow.iter_mut().zip(vrow) {
                            *c += a * vv;
                        }
                    }
                }
            }
            let att_out = linear(&ctx, &b.wo, Some(&b.bo), len, d, d);
            for (xi, ai) in x.iter_mut().zip(&att_out) {
                *xi += ai;
            }

            // feed-forward
            let ln2 = layer_norm(&x, &b.ln2_g, &b.ln2_b, len, d);
            let pre = linear(&ln2.out, &b.fc1, Some(&b.b1), len, d, fdim);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let ffn_out = linear(&act, &b.fc2, Some(&b.b2), len, fdim, d);
            for (xi, fi) in x.iter_mut().zip(&ffn_out) {
                *xi += fi;
            }

            blocks.push(BlockCache {
                ln1,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                pre,
                act,
            });
        }

        let ln_f = layer_norm(&x, &p.ln_f_g, &p.ln_f_b, len, d);
        let hidden = ln_f.out.clone();
        let logits = linear(&hidden, &p.lm_head, None, len, d, cfg.vocab_size);
        let values: Vec<f64> = (0..len)
            .map(|t| dot(&p.value_w, &hidden[t * d..(t + 1) * d]) + p.value_b[0])
            .collect();

        Ok((
            ForwardOutput {
                logits,
                hidden,
                values,
            },
            ForwardCache {
                ids: ids.to_vec(),
                blocks,
                ln_f,
            },
        ))
    }

    /// Backward pass: accumulate parameter gradients into `grads` given the
    /// upstream gradients of the logits (`len × vocab`) and values (`len`).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        dvalues: &[f64],
        grads: &mut Gradients,
    ) {
        let cfg = &self.config;
        let len = cache.ids.len();
        let d = cfg.d_model;
        let fdim = cfg.ffn_dim();
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        debug_assert_eq!(dlogits.len(), len * cfg.vocab_size);
        debug_assert_eq!(dvalues.len(), len);

        // heads into final hidden
        let mut dhidden = vec![0.0; len * d];
        linear_backward(
            dlogits,
            &cache.ln_f.out,
            &p.lm_head,
            &mut dhidden,
            &mut grads.lm_head,
            None,
            len,
            d,
            cfg.vocab_size,
        );
        for t in 0..len {
            let dv = dvalues[t];
            if dv != 0.0 {
                let h = &cache.ln_f.out[t * d..(t + 1) * d];
                for i in 0..d {
                    grads.value_w[i] += dv * h[i];
                    dhidden[t * d + i] += dv * p.value_w[i];
                }
                grads.value_b[0] += dv;
            }
        }

        // final layer norm
        let mut dx = layer_norm_backward(
            &dhidden,
            &cache.ln_f.normed,
            &cache.ln_f.rstd,
            &p.ln_f_g,
            &mut grads.ln_f_g,
            &mut grads.ln_f_b,
            len,
            d,
        );

        for (bi, bc) in cache.blocks.iter().enumerate().rev() {
            let bp = &p.blocks[bi];
            let bg = &mut grads.blocks[bi];

            // feed-forward: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
            let mut dact = vec![0.0; len * fdim];
            linear_backward(
                &dx, &bc.act, &bp.fc2, &mut dact, &mut bg.fc2, Some(&mut bg.b2), len, fdim, d,
            );
            let mut dpre = vec![0.0; len * fdim];
            for i in 0..len * fdim {
                dpre[i] = dact[i] * gelu_grad(bc.pre[i]);
            }
            let mut dln2 = vec![0.0; len * d];
            linear_backward(
                &dpre, &bc.ln2.out, &bp.fc1, &mut dln2, &mut bg.fc1, Some(&mut bg.b1), len, d,
                fdim,
            );
            let dmid_extra = layer_norm_backward(
                &dln2,
                &bc.ln2.normed,
                &bc.ln2.rstd,
                &bp.ln2_g,
                &mut bg.ln2_g,
                &mut bg.ln2_b,
                len,
                d,
            );
            for i in 0..len * d {
                dx[i] += dmid_extra[i];
            }

            // attention: x_mid = x_in + wo(ctx(softmax(qk)v))
            let mut dctx = vec![0.0; len * d];
            linear_backward(
                &dx, &bc.ctx, &bp.wo, &mut dctx, &mut bg.wo, Some(&mut bg.bo), len, d, d,
            );
            let mut dq = vec![0.0; len * d];
            let mut dk = vec![0.0; len * d];
            let mut dv = vec![0.0; len * d];
            for h in 0..heads {
                let off = h * hd;
                for t in 0..len {
                    let arow = &bc.att[h * len * len + t * len..h * len * len + t * len + t + 1];
                    let dcrow = &dctx[t * d + off..t * d + off + hd];
                    // datt_j = dctx · v_j ; dv_j += att_j * dctx
                    let mut datt = vec![0.0; t + 1];
                    for j in 0..=t {
                        let vrow = &bc.v[j * d + off..j * d + off + hd];
                        datt[j] = dot(dcrow, vrow);
                        let dvrow = &mut dv[j * d + off..j * d + off + hd];
                        for (dvi, &dci) in dvrow.iter_mut().zip(dcrow) {
                            *dvi += arow[j] * dci;
                        }
                    }
                    // softmax backward
                    let dot_ad: f64 = arow.iter().zip(&datt).map(|(&a, &g)| a * g).sum();
                    let qrow = &bc.q[t * d + off..t * d + off + hd];
                    let dqrow_base = t * d + off;
                    for j in 0..=t {
                        let ds = arow[j] * (datt[j] - dot_ad) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &bc.k[j * d + off..j * d + off + hd];
                        for i in 0..hd {
                            dq[dqrow_base + i] += ds * krow[i];
                            dk[j * d + off + i] += ds * qrow[i];
                        }
                    }
                }
            }
            let mut dln1 = vec![0.0; len * d];
            linear_backward(
                &dq, &bc.ln1.out, &bp.wq, &mut dln1, &mut bg.wq, Some(&mut bg.bq), len, d, d,
            );
            linear_backward(
                &dk, &bc.ln1.out, &bp.wk, &mut dln1, &mut bg.wk, Some(&mut bg.bk), len, d, d,
            );
            linear_backward(
                &dv, &bc.ln1.out, &bp.wv, &mut dln1, &mut bg.wv, Some(&mut bg.bv), len, d, d,
            );
            let din_extra = layer_norm_backward(
                &dln1,
                &bc.ln1.normed,
                &bc.ln1.rstd,
                &bp.ln1_g,
                &mut bg.ln1_g,
                &mut bg.ln1_b,
                len,
                d,
            );
            for i in 0..len * d {
                dx[i] += din_extra[i];
            }
        }

        // embeddings
        for t in 0..len {
            let tok = cache.ids[t] as usize;
            for i in 0..d {
                grads.tok_emb[tok * d + i] += dx[t * d + i];
                grads.pos_emb[t * d + i] += dx[t * d + i];
            }
        }
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.zeros_like()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = x Wᵀ + b` with `x: len×din`, `w: dout×din`, `y: len×dout`.
fn linear(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    len: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; len * dout];
    for t in 0..len {
        let xrow = &x[t * din..(t + 1) * din];
        let yrow = &mut y[t * dout..(t + 1) * dout];
        for (o, yo) in yrow.iter_mut().enumerate() {
            *yo = dot(&w[o * din..(o + 1) * din], xrow);
        }
        if let Some(bias) = b {
            for (yo, bo) in yrow.iter_mut().zip(bias) {
                *yo += bo;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dx`, `dw`, and optionally `db`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut Vec<f64>>,
    len: usize,
    din: usize,
    dout: usize,
) {
    for t in 0..len {
        let dyrow = &dy[t * dout..(t + 1) * dout];
        let xrow = &x[t * din..(t + 1) * din];
        let dxrow = &mut dx[t * din..(t + 1) * din];
        for (o, &g) in dyrow.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wrow = &w[o * din..(o + 1) * din];
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dxrow[i] += g * wrow[i];
                dwrow[i] += g * xrow[i];
            }
        }
    }
    if let Some(db) = db {
        for t in 0..len {
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo += dy[t * dout + o];
            }
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], len: usize, d: usize) -> LayerNormCache {
    let mut out = vec![0.0; len * d];
    let mut normed = vec![0.0; len * d];
    let mut rstd = vec![0.0; len];
    for t in 0..len {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let n = (row[i] - mean) * r;
            normed[t * d + i] = n;
            out[t * d + i] = g[i] * n + b[i];
        }
    }
    LayerNormCache { out, normed, rstd }
}

/// Backward through `y = g ⊙ x̂ + b`. `dy` arrives w.r.t. `y`; `normed`
/// holds x̂. Accumulates `dg`/`db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    normed: &[f64],
    rstd: &[f64],
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    len: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; len * d];
    for t in 0..len {
        let dyrow = &dy[t * d..(t + 1) * d];
        let nrow = &normed[t * d..(t + 1) * d];
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for i in 0..d {
            dg[i] += dyrow[i] * nrow[i];
            db[i] += dyrow[i];
            let dnormed = dyrow[i] * g[i];
            sum_dn += dnormed;
            sum_dn_n += dnormed * nrow[i];
        }
        let inv_d = 1.0 / d as f64;
        for i in 0..d {
            let dnormed = dyrow[i] * g[i];
            dx[t * d + i] = rstd[t] * (dnormed - inv_d * sum_dn - nrow[i] * inv_d * sum_dn_n);
        }
    }
    dx
}

/// Adam with bias correction; moment buffers follow the canonical tensor
/// order of [`Params::tensors`].
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let gtensors = grads.tensors();
        for (idx, (_, tensor)) in params.tensors_mut().into_iter().enumerate() {
            let g = gtensors[idx].1;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..tensor.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
