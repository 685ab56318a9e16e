//! Supervised fine-tuning and numerical gradient verification.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Adam, PolicyModel};
use super::tokenizer::{build_training_sequence, TokenSequence, Tokenizer};
use super::TinylmError;
use crate::instructions::InstructionRecord;

/// Which token positions contribute to the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Supervise only the output span (tokens after SEP, including EOS).
    OutputOnly,
    /// Supervise every next-token prediction in the sequence.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_mask: LossMask,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            epochs: 3,
            loss_mask: LossMask::OutputOnly,
            seed: 0,
        }
    }
}

/// One point of the training curve; `split` is `train` or `validation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SftReport {
    pub loss_curve: Vec<LossPoint>,
    /// Records rejected at sequence building, as `(id, reason)`.
    pub rejected: Vec<(String, String)>,
    pub steps: usize,
}

/// First prediction position that is supervised under `mask`.
fn mask_start(seq: &TokenSequence, mask: LossMask) -> usize {
    match mask {
        // position sep_index predicts ids[sep_index + 1], the first output token
        LossMask::OutputOnly => seq.sep_index,
        LossMask::All => 0,
    }
}

pub(crate) fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Token-level cross entropy of one sequence: returns `(summed loss,
/// dlogits, supervised token count)`. `dlogits` holds `softmax − onehot`
/// per supervised position, unscaled; callers normalize.
fn sequence_ce(
    model: &PolicyModel,
    seq: &TokenSequence,
    mask: LossMask,
) -> Result<(f64, Vec<f64>, usize, super::model::ForwardCache), TinylmError> {
    let vocab = model.config.vocab_size;
    let (out, cache) = model.forward(&seq.ids)?;
    let len = seq.ids.len();
    let mut dlogits = vec![0.0; len * vocab];
    let start = mask_start(seq, mask);
    let mut loss = 0.0;
    let mut count = 0;
    for k in start..len.saturating_sub(1) {
        let target = seq.ids[k + 1] as usize;
        let probs = softmax_row(out.logits_at(k, vocab));
        loss -= probs[target].max(1e-300).ln();
        let drow = &mut dlogits[k * vocab..(k + 1) * vocab];
        for (j, &p) in probs.iter().enumerate() {
            drow[j] = p;
        }
        drow[target] -= 1.0;
        count += 1;
    }
    Ok((loss, dlogits, count, cache))
}

/// Mean cross entropy (nats per supervised token) over `seqs`.
pub fn evaluate_loss(
    model: &PolicyModel,
    seqs: &[TokenSequence],
    mask: LossMask,
) -> Result<f64, TinylmError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for seq in seqs {
        let (loss, _, count, _) = sequence_ce(model, seq, mask)?;
        total += loss;
        tokens += count;
    }
    if tokens == 0 {
        return Ok(0.0);
    }
    Ok(total / tokens as f64)
}

/// Build training sequences from records, dropping over-long outputs into a
/// rejection report.
pub fn build_sequences(
    records: &[InstructionRecord],
    tokenizer: &Tokenizer,
    context_len: usize,
) -> (Vec<TokenSequence>, Vec<(String, String)>) {
    let mut seqs = Vec::with_capacity(records.len());
    let mut rejected = Vec::new();
    for record in records {
        match build_training_sequence(record, tokenizer, context_len) {
            Ok(seq) => seqs.push(seq),
            Err(err) => rejected.push((record.id.clone(), err.to_string())),
        }
    }
    (seqs, rejected)
}

/// Minimize token-level cross entropy with Adam. Deterministic for a fixed
/// seed: shuffles, batching, and updates all follow one seeded PRNG.
pub fn sft_train(
    model: &mut PolicyModel,
    records: &[InstructionRecord],
    tokenizer: &Tokenizer,
    cfg: &SftConfig,
) -> Result<SftReport, TinylmError> {
    let (seqs, rejected) = build_sequences(records, tokenizer, model.config.context_len);
    if seqs.is_empty() {
        return Err(TinylmError::EmptyTrainingSet);
    }
    let mut report = SftReport {
        rejected,
        ..Default::default()
    };

    let mut optimizer = Adam::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grads = model.zero_grads();
            let mut pending = Vec::with_capacity(batch.len());
            let mut batch_tokens = 0usize;
            let mut batch_loss = 0.0;
            for &i in batch {
                let seq = &seqs[i];
                let (loss, dlogits, count, cache) = sequence_ce(model, seq, cfg.loss_mask)?;
                batch_loss += loss;
                batch_tokens += count;
                pending.push((i, dlogits, cache));
            }
            if batch_tokens == 0 {
                continue;
            }
            if !batch_loss.is_finite() {
                return Err(TinylmError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    last_loss,
                });
            }
            let scale = 1.0 / batch_tokens as f64;
            for (i, mut dlogits, cache) in pending {
                for g in &mut dlogits {
                    *g *= scale;
                }
                let dvalues = vec![0.0; seqs[i].ids.len()];
                model.backward(&cache, &dlogits, &dvalues, &mut grads);
            }
            optimizer.step(&mut model.params, &grads);
            report.steps += 1;
            epoch_loss += batch_loss;
            epoch_tokens += batch_tokens;
            last_loss = batch_loss / batch_tokens as f64;
        }
        let mean = if epoch_tokens == 0 {
            0.0
        } else {
            epoch_loss / epoch_tokens as f64
        };
        report.loss_curve.push(LossPoint {
            epoch,
            split: "train".into(),
            loss: mean,
        });
    }
    Ok(report)
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of the SFT loss against central finite
/// differences over `n_samples` randomly chosen parameters.
pub fn grad_check(
    model: &mut PolicyModel,
    seq: &TokenSequence,
    mask: LossMask,
    n_samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, TinylmError> {
    // analytic gradients, loss normalized per supervised token
    let (_, dlogits, count, cache) = sequence_ce(model, seq, mask)?;
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let mut grads = model.zero_grads();
    let scaled: Vec<f64> = dlogits.iter().map(|g| g * scale).collect();
    let dvalues = vec![0.0; seq.ids.len()];
    model.backward(&cache, &scaled, &dvalues, &mut grads);

    let loss_of = |m: &PolicyModel| -> Result<f64, TinylmError> {
        let (loss, _, c, _) = sequence_ce(m, seq, mask)?;
        Ok(if c == 0 { 0.0 } else { loss / c as f64 })
    };

    let shapes: Vec<(String, usize)> = model
        .params
        .tensors()
        .iter()
        .map(|(name, t)| (name.clone(), t.len()))
        .collect();
    let total: usize = shapes.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for _ in 0..n_samples.min(total) {
        let tensor_idx = rng.gen_range(0..shapes.len());
        let elem_idx = rng.gen_range(0..shapes[tensor_idx].1.max(1));

        let analytic = grads.tensors()[tensor_idx].1[elem_idx];

        model.params.tensors_mut()[tensor_idx].1[elem_idx] += step;
        let loss_plus = loss_of(model)?;
        model.params.tensors_mut()[tensor_idx].1[elem_idx] -= 2.0 * step;
        let loss_minus = loss_of(model)?;
        model.params.tensors_mut()[tensor_idx].1[elem_idx] += step;

        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_tensor = shapes[tensor_idx].0.clone();
            report.worst_index = elem_idx;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
