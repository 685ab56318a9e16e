//! PPO fine-tuning of the policy against a terminal reward.
//!
//! The recipe is the standard text-generation loop: sample rollouts from the
//! acting policy, shape per-token rewards with a KL penalty against the
//! frozen reference, estimate advantages with GAE, and optimize the clipped
//! surrogate objective plus a value loss for a few epochs per batch. Every
//! constant lives in [`PpoConfig`]; runs are deterministic under a fixed
//! seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tinylm::{
    sample_with_logprob, Adam, DecodeConfig, IncrementalDecoder, PolicyModel, TinylmError, EOS,
};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid PPO config: {0}")]
    BadConfig(String),
    #[error("rollouts require sampling decode (temperature > 0, beam_size == 1), got {0}")]
    BadDecode(String),
    #[error("reward collapsed to a non-finite value at iteration {iteration}; last good checkpoint retained")]
    RewardCollapse { iteration: usize },
    #[error("no prompts to roll out")]
    NoPrompts,
    #[error(transparent)]
    Model(#[from] TinylmError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    /// Clip ε of the surrogate objective.
    pub clip_eps: f64,
    /// KL-penalty coefficient β on per-token divergence from the reference.
    pub kl_beta: f64,
    /// Discount γ.
    pub gamma: f64,
    /// GAE λ.
    pub lambda: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub lr: f64,
    pub iterations: usize,
    /// Weight of the value loss in the combined objective.
    pub value_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.02,
            gamma: 1.0,
            lambda: 0.95,
            epochs_per_batch: 4,
            minibatch_size: 8,
            lr: 1e-4,
            iterations: 50,
            value_coef: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(RlError::BadConfig(format!(
                "clip_eps {} outside (0, 1)",
                self.clip_eps
            )));
        }
        if self.kl_beta < 0.0 {
            return Err(RlError::BadConfig(format!(
                "kl_beta {} must be >= 0",
                self.kl_beta
            )));
        }
        Ok(())
    }
}

/// One sampled trajectory.
#[derive(Debug, Clone)]
pub struct RolloutSample {
    pub prompt_ids: Vec<u32>,
    /// Generated tokens w_1..w_k (EOS included when emitted); k >= 1.
    pub gen_ids: Vec<u32>,
    /// Log-probability of each generated token under the acting policy.
    pub logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    /// Value estimate at each generating position.
    pub values: Vec<f64>,
    /// Per-token KL: log π(w) − log π_ref(w).
    pub kl: Vec<f64>,
    /// Terminal reward for the whole generation.
    pub reward: f64,
}

impl RolloutSample {
    /// Per-token shaped rewards: −β·KL everywhere, terminal reward added at
    /// the final generated token.
    pub fn shaped_rewards(&self, kl_beta: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self.kl.iter().map(|&k| -kl_beta * k).collect();
        if let Some(last) = out.last_mut() {
            *last += self.reward;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub samples: Vec<RolloutSample>,
    pub temperature: f64,
}

impl RolloutBatch {
    pub fn mean_reward(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.reward).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_kl(&self) -> f64 {
        let (sum, n) = self
            .samples
            .iter()
            .flat_map(|s| s.kl.iter())
            .fold((0.0, 0usize), |(acc, n), &k| (acc + k, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Sample one generation per prompt from `policy`, recording log-probs,
/// values, and per-token KL against `reference`.
///
/// Rollouts must use sampling decode: `temperature > 0`, `beam_size == 1`.
/// Ratios in [`ppo_step`] are computed on the untruncated distribution, so
/// `top_p` should stay 1.0 during RL.
pub fn rollout<R: Rng>(
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompts: &[Vec<u32>],
    decode_cfg: &DecodeConfig,
    reward_fn: &mut dyn FnMut(&[u32], &[u32]) -> f64,
    rng: &mut R,
) -> Result<RolloutBatch, RlError> {
    if prompts.is_empty() {
        return Err(RlError::NoPrompts);
    }
    if decode_cfg.beam_size != 1 || decode_cfg.temperature <= 0.0 {
        return Err(RlError::BadDecode(format!(
            "temperature {}, beam_size {}",
            decode_cfg.temperature, decode_cfg.beam_size
        )));
    }
    let temperature = decode_cfg.temperature;

    let mut samples = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let context = policy.config.context_len;
        if prompt.is_empty() || prompt.len() >= context {
            return Err(RlError::Model(TinylmError::ContextOverflow {
                len: prompt.len(),
                context,
            }));
        }
        let allowed = decode_cfg.max_new_tokens.min(context - prompt.len()).max(1);

        let mut dec = IncrementalDecoder::new(policy);
        dec.push_all(prompt).map_err(RlError::Model)?;
        let mut ref_dec = IncrementalDecoder::new(reference);
        ref_dec.push_all(prompt).map_err(RlError::Model)?;

        let mut gen_ids = Vec::new();
        let mut logprobs = Vec::new();
        let mut ref_logprobs = Vec::new();
        let mut values = Vec::new();
        for _ in 0..allowed {
            let (token, lp) =
                sample_with_logprob(dec.logits(), temperature, decode_cfg.top_p, rng);
            let ref_lp = crate::tinylm::token_logprob(ref_dec.logits(), temperature, token);
            values.push(dec.value());
            logprobs.push(lp);
            ref_logprobs.push(ref_lp);
            gen_ids.push(token);
            if token == EOS {
                break;
            }
            dec.push(token).map_err(RlError::Model)?;
            ref_dec.push(token).map_err(RlError::Model)?;
        }
        let kl: Vec<f64> = logprobs
            .iter()
            .zip(&ref_logprobs)
            .map(|(a, b)| a - b)
            .collect();
        let reward = reward_fn(prompt, &gen_ids);
        samples.push(RolloutSample {
            prompt_ids: prompt.clone(),
            gen_ids,
            logprobs,
            ref_logprobs,
            values,
            kl,
            reward,
        });
    }
    Ok(RolloutBatch {
        samples,
        temperature,
    })
}

/// GAE advantages and value targets for a rollout batch.
#[derive(Debug, Clone)]
pub struct AdvantageSet {
    /// Whitened advantages, one vector per sample.
    pub advantages: Vec<Vec<f64>>,
    /// Raw returns (advantage + value before whitening), the value targets.
    pub returns: Vec<Vec<f64>>,
    /// True when batch whitening was skipped (fewer than two tokens or zero
    /// variance).
    pub whitening_skipped: bool,
}

/// GAE recursion `A_t = δ_t + γλ A_{t+1}`, `δ_t = r_t + γ V_{t+1} − V_t`,
/// with `V` past the final token defined as 0, followed by batch whitening
/// of the advantages (mean 0, variance 1).
pub fn compute_advantages(batch: &RolloutBatch, gamma: f64, lambda: f64, kl_beta: f64) -> AdvantageSet {
    let mut advantages = Vec::with_capacity(batch.samples.len());
    let mut returns = Vec::with_capacity(batch.samples.len());
    for sample in &batch.samples {
        let rewards = sample.shaped_rewards(kl_beta);
        let k = rewards.len();
        let mut adv = vec![0.0; k];
        let mut next_adv = 0.0;
        for t in (0..k).rev() {
            let next_value = if t + 1 < k { sample.values[t + 1] } else { 0.0 };
            let delta = rewards[t] + gamma * next_value - sample.values[t];
            next_adv = delta + gamma * lambda * next_adv;
            adv[t] = next_adv;
        }
        let ret: Vec<f64> = adv
            .iter()
            .zip(&sample.values)
            .map(|(a, v)| a + v)
            .collect();
        advantages.push(adv);
        returns.push(ret);
    }

    let flat: Vec<f64> = advantages.iter().flatten().copied().collect();
    let n = flat.len();
    let mut whitening_skipped = true;
    if n >= 2 {
        let mean = flat.iter().sum::<f64>() / n as f64;
        let var = flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        if var > 1e-12 {
            let std = var.sqrt();
            for adv in &mut advantages {
                for a in adv.iter_mut() {
                    *a = (*a - mean) / std;
                }
            }
            whitening_skipped = false;
        }
    }
    AdvantageSet {
        advantages,
        returns,
        whitening_skipped,
    }
}

/// Per-token clipped surrogate: `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_objective(rho: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (rho * advantage).min(clipped * advantage)
}

/// Metrics of one [`ppo_step`] epoch, aggregated over its minibatches and
/// measured before each minibatch update.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Mean (log π_new − log π_ref) over generated tokens.
    pub kl: f64,
    /// Fraction of tokens with |ρ − 1| > ε.
    pub clip_fraction: f64,
    pub dropped_samples: usize,
}

/// One optimization epoch over the batch: one Adam step per minibatch of
/// samples. Policy loss is `−mean min(ρA, clip(ρ)A)`; value loss is the mean
/// squared error to the returns.
#[allow(clippy::too_many_arguments)]
pub fn ppo_step<R: Rng>(
    policy: &mut PolicyModel,
    optimizer: &mut Adam,
    batch: &RolloutBatch,
    adv: &AdvantageSet,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats, RlError> {
    cfg.validate()?;
    let vocab = policy.config.vocab_size;
    let tau = batch.temperature;

    let mut order: Vec<usize> = (0..batch.samples.len()).collect();
    order.shuffle(rng);

    let mut stats = PpoStats::default();
    let mut total_tokens = 0usize;
    let mut clipped_tokens = 0usize;

    for minibatch in order.chunks(cfg.minibatch_size.max(1)) {
        let mut grads = policy.zero_grads();
        let mut mb_tokens = 0usize;
        let mut pending = Vec::new();

        // first pass: token counts (for mean normalization) and ratio checks
        for &si in minibatch {
            let sample = &batch.samples[si];
            let full: Vec<u32> = sample
                .prompt_ids
                .iter()
                .chain(&sample.gen_ids)
                .copied()
                .collect();
            let (out, cache) = policy.forward(&full).map_err(RlError::Model)?;
            let p = sample.prompt_ids.len();
            let k = sample.gen_ids.len();

            let mut finite = true;
            let mut token_data = Vec::with_capacity(k);
            for i in 0..k {
                let row = out.logits_at(p + i - 1, vocab);
                let new_lp = crate::tinylm::token_logprob(row, tau, sample.gen_ids[i]);
                let rho = (new_lp - sample.logprobs[i]).exp();
                if !rho.is_finite() {
                    finite = false;
                    break;
                }
                token_data.push((new_lp, rho));
            }
            if !finite {
                stats.dropped_samples += 1;
                continue;
            }
            mb_tokens += k;
            pending.push((si, out, cache, token_data));
        }
        if mb_tokens == 0 {
            continue;
        }

        for (si, out, cache, token_data) in pending {
            let sample = &batch.samples[si];
            let p = sample.prompt_ids.len();
            let k = sample.gen_ids.len();
            let full_len = p + k;
            let mut dlogits = vec![0.0; full_len * vocab];
            let mut dvalues = vec![0.0; full_len];

            for (i, &(new_lp, rho)) in token_data.iter().enumerate() {
                let a = adv.advantages[si][i];
                let unclipped = rho * a;
                let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
                let objective = unclipped.min(clipped);
                stats.policy_loss -= objective;
                stats.kl += new_lp - sample.ref_logprobs[i];
                if (rho - 1.0).abs() > cfg.clip_eps {
                    clipped_tokens += 1;
                }

                // gradient flows only through the unclipped branch when it
                // is the active minimum
                let dobj_dlp = if unclipped <= clipped { rho * a } else { 0.0 };
                let dl_dlp = -dobj_dlp / mb_tokens as f64;
                if dl_dlp != 0.0 {
                    let pos = p + i - 1;
                    let row = out.logits_at(pos, vocab);
                    let probs = softmax_scaled(row, tau);
                    let target = sample.gen_ids[i] as usize;
                    let drow = &mut dlogits[pos * vocab..(pos + 1) * vocab];
                    // d log softmax(z/τ)[a] / dz_j = (δ_aj − p_j) / τ
                    for (j, &pj) in probs.iter().enumerate() {
                        drow[j] += dl_dlp * (-pj) / tau;
                    }
                    drow[target] += dl_dlp / tau;
                }

                // value loss on the same position
                let pos = p + i - 1;
                let v_pred = out.values[pos];
                let v_target = adv.returns[si][i];
                let err = v_pred - v_target;
                stats.value_loss += err * err;
                dvalues[pos] += cfg.value_coef * 2.0 * err / mb_tokens as f64;
            }
            policy.backward(&cache, &dlogits, &dvalues, &mut grads);
        }
        optimizer.step(&mut policy.params, &grads);
        total_tokens += mb_tokens;
    }

    if total_tokens > 0 {
        stats.policy_loss /= total_tokens as f64;
        stats.value_loss /= total_tokens as f64;
        stats.kl /= total_tokens as f64;
        stats.clip_fraction = clipped_tokens as f64 / total_tokens as f64;
    }
    Ok(stats)
}

fn softmax_scaled(logits: &[f64], tau: f64) -> Vec<f64> {
    let t = if tau > 0.0 { tau } else { 1.0 };
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
    let mut out: Vec<f64> = logits.iter().map(|&z| (z / t - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// One row of the reward-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlCurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RlReport {
    pub curve: Vec<RlCurvePoint>,
}

/// Iterate rollout → advantages → PPO epochs. The reward curve records the
/// mean terminal reward, mean rollout KL, and the clip fraction of the last
/// PPO epoch per iteration. On reward collapse the policy is restored to the
/// last finite iteration and an error is returned.
pub fn train_rl(
    policy: &mut PolicyModel,
    reference: &PolicyModel,
    prompts: &[Vec<u32>],
    reward_fn: &mut dyn FnMut(&[u32], &[u32]) -> f64,
    cfg: &PpoConfig,
    decode_cfg: &DecodeConfig,
    seed: u64,
) -> Result<RlReport, RlError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = Adam::new(&policy.params, cfg.lr);
    let mut report = RlReport::default();
    let mut last_good = policy.params.clone();

    for iteration in 0..cfg.iterations {
        let batch = rollout(policy, reference, prompts, decode_cfg, reward_fn, &mut rng)?;
        let mean_reward = batch.mean_reward();
        if !mean_reward.is_finite() {
            policy.params = last_good;
            return Err(RlError::RewardCollapse { iteration });
        }
        let adv = compute_advantages(&batch, cfg.gamma, cfg.lambda, cfg.kl_beta);

        let mut last_stats = PpoStats::default();
        for _ in 0..cfg.epochs_per_batch {
            last_stats = ppo_step(policy, &mut optimizer, &batch, &adv, cfg, &mut rng)?;
        }
        report.curve.push(RlCurvePoint {
            iteration,
            mean_reward,
            mean_kl: batch.mean_kl(),
            clip_fraction: last_stats.clip_fraction,
        });
        last_good = policy.params.clone();
    }
    Ok(report)
}

/// Render the reward curve as CSV with a header row.
pub fn curve_to_csv(report: &RlReport) -> String {
    let mut out = String::from("iteration,mean_reward,mean_kl,clip_fraction\n");
    for p in &report.curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.iteration, p.mean_reward, p.mean_kl, p.clip_fraction
        ));
    }
    out
}
