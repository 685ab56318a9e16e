//! Semantic reward and the learned pairwise reward model.
//!
//! The semantic reward embeds both token sequences with a frozen provider,
//! greedily matches each token to its best cosine partner on the other side,
//! and aggregates precision/recall into an F1. The learned reward model
//! scores `[f_vul, SEP, candidate]` with a scalar head over frozen backbone
//! features and trains on pairwise preferences: the ground-truth repair must
//! outscore a sampled generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tinylm::{PolicyModel, TinylmError, SEP};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds provider context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("stub provider has no vector for token {0}")]
    UnknownToken(u32),
    #[error("zero-norm embedding (degenerate provider)")]
    ZeroNorm,
    #[error("stub file {path} line {line}: {reason}")]
    BadStubFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("no training triples")]
    NoTriples,
    #[error(transparent)]
    Model(#[from] TinylmError),
}

/// Produces one unit-L2 vector per token.
pub trait EmbeddingProvider {
    fn embed(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, RewardError>;
}

/// Contextual embeddings from a frozen policy checkpoint: the final hidden
/// state of each position, L2-normalized.
pub struct PolicyEmbeddingProvider {
    model: PolicyModel,
}

impl PolicyEmbeddingProvider {
    pub fn new(model: PolicyModel) -> Self {
        Self { model }
    }
}

fn l2_normalize(v: &mut [f64]) -> Result<(), RewardError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RewardError::ZeroNorm);
    }
    for x in v {
        *x /= norm;
    }
    Ok(())
}

impl EmbeddingProvider for PolicyEmbeddingProvider {
    fn embed(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, RewardError> {
        if ids.is_empty() {
            return Err(RewardError::EmptySequence);
        }
        if ids.len() > self.model.config.context_len {
            return Err(RewardError::ContextOverflow {
                len: ids.len(),
                context: self.model.config.context_len,
            });
        }
        let d = self.model.config.d_model;
        let (out, _) = self.model.forward(ids)?;
        let mut vectors = Vec::with_capacity(ids.len());
        for t in 0..ids.len() {
            let mut v = out.hidden_at(t, d).to_vec();
            l2_normalize(&mut v)?;
            vectors.push(v);
        }
        Ok(vectors)
    }
}

/// Context-free embeddings from a `(token-id, vector)` table, for oracle
/// tests. Vectors are L2-normalized on load.
#[derive(Debug, Clone, Default)]
pub struct StubEmbeddingProvider {
    table: BTreeMap<u32, Vec<f64>>,
}

impl StubEmbeddingProvider {
    pub fn new(entries: impl IntoIterator<Item = (u32, Vec<f64>)>) -> Result<Self, RewardError> {
        let mut table = BTreeMap::new();
        for (id, mut v) in entries {
            l2_normalize(&mut v)?;
            table.insert(id, v);
        }
        Ok(Self { table })
    }

    /// Parse lines of `token_id v1 v2 ...`.
    pub fn from_file(path: &Path) -> Result<Self, RewardError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| RewardError::BadStubFile {
            path: display.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| RewardError::BadStubFile {
                path: display.clone(),
                line: idx + 1,
                reason,
            };
            let mut parts = line.split_whitespace();
            let id: u32 = parts
                .next()
                .ok_or_else(|| bad("empty line".into()))?
                .parse()
                .map_err(|e| bad(format!("bad token id: {e}")))?;
            let vector: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vector = vector.map_err(|e| bad(format!("bad component: {e}")))?;
            if vector.is_empty() {
                return Err(bad("vector has no components".into()));
            }
            entries.push((id, vector));
        }
        Self::new(entries)
    }
}

impl EmbeddingProvider for StubEmbeddingProvider {
    fn embed(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, RewardError> {
        if ids.is_empty() {
            return Err(RewardError::EmptySequence);
        }
        ids.iter()
            .map(|id| {
                self.table
                    .get(id)
                    .cloned()
                    .ok_or(RewardError::UnknownToken(*id))
            })
            .collect()
    }
}

/// Wraps a provider so every component is non-negative (absolute value,
/// renormalized); cosines then land in [0, 1].
pub struct NonNegativeProvider<P>(pub P);

impl<P: EmbeddingProvider> EmbeddingProvider for NonNegativeProvider<P> {
    fn embed(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, RewardError> {
        let mut vectors = self.0.embed(ids)?;
        for v in &mut vectors {
            for x in v.iter_mut() {
                *x = x.abs();
            }
            l2_normalize(v)?;
        }
        Ok(vectors)
    }
}

/// Greedy-match precision/recall/F1 over token embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Which aggregate the semantic reward reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// Harmonic mean of greedy precision and recall (the default).
    F1,
    /// The literal mean-over-reference-tokens form.
    Recall,
}

impl SimilarityScores {
    pub fn aggregate(&self, form: RewardForm) -> f64 {
        match form {
            RewardForm::F1 => self.f1,
            RewardForm::Recall => self.recall,
        }
    }
}

/// Greedy max-cosine matching: recall averages each reference token's best
/// match among candidate tokens, precision is symmetric, and
/// `f1 = 2PR/(P+R)` (0 when `P+R <= 0`).
pub fn semantic_reward<P: EmbeddingProvider>(
    candidate_ids: &[u32],
    reference_ids: &[u32],
    provider: &P,
) -> Result<SimilarityScores, RewardError> {
    if candidate_ids.is_empty() || reference_ids.is_empty() {
        return Err(RewardError::EmptySequence);
    }
    let cand = provider.embed(candidate_ids)?;
    let refv = provider.embed(reference_ids)?;

    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for v in from {
            let mut best = f64::NEG_INFINITY;
            for w in to {
                let cos: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
                best = best.max(cos);
            }
            total += best;
        }
        total / from.len() as f64
    };

    let precision = best(&cand, &refv);
    let recall = best(&refv, &cand);
    let f1 = if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SimilarityScores {
        precision,
        recall,
        f1,
    })
}

/// Maps a token sequence to the feature vector read by the reward head.
pub trait FeatureBackbone {
    fn dim(&self) -> usize;
    fn features(&self, ids: &[u32]) -> Result<Vec<f64>, RewardError>;
}

/// Frozen policy trunk: features are the final hidden state at the last
/// non-PAD position.
pub struct PolicyBackbone {
    model: PolicyModel,
}

impl PolicyBackbone {
    pub fn new(model: PolicyModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }
}

impl FeatureBackbone for PolicyBackbone {
    fn dim(&self) -> usize {
        self.model.config.d_model
    }

    fn features(&self, ids: &[u32]) -> Result<Vec<f64>, RewardError> {
        if ids.is_empty() {
            return Err(RewardError::EmptySequence);
        }
        if ids.len() > self.model.config.context_len {
            return Err(RewardError::ContextOverflow {
                len: ids.len(),
                context: self.model.config.context_len,
            });
        }
        let last = ids
            .iter()
            .rposition(|&id| id != crate::tinylm::PAD)
            .ok_or(RewardError::EmptySequence)?;
        let (out, _) = self.model.forward(ids)?;
        Ok(out.hidden_at(last, self.model.config.d_model).to_vec())
    }
}

/// Scalar reward head `r(x) = w · φ(x) + b` over a frozen backbone.
/// Zero-initialized, so an untrained model scores everything 0.
pub struct RewardModel<B: FeatureBackbone> {
    pub backbone: B,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl RewardModel<PolicyBackbone> {
    /// Rebuild a reward model from a checkpoint that carries a reward head
    /// (as written by the training pipeline). Returns `None` when the
    /// checkpoint has no head.
    pub fn from_policy_checkpoint(model: PolicyModel) -> Option<Self> {
        let head_w = model.params.reward_w.clone()?;
        let head_b = model.params.reward_b.clone()?[0];
        Some(Self {
            backbone: PolicyBackbone::new(model),
            head_w,
            head_b,
        })
    }
}

impl<B: FeatureBackbone> RewardModel<B> {
    pub fn new(backbone: B) -> Self {
        let dim = backbone.dim();
        Self {
            backbone,
            head_w: vec![0.0; dim],
            head_b: 0.0,
        }
    }

    fn score_features(&self, phi: &[f64]) -> f64 {
        self.head_w.iter().zip(phi).map(|(w, x)| w * x).sum::<f64>() + self.head_b
    }

    /// Score a candidate repair for `f_vul`: the backbone reads
    /// `[f_vul, SEP, candidate]` and the head fires at the final position.
    pub fn score(&self, f_vul_ids: &[u32], candidate_ids: &[u32]) -> Result<f64, RewardError> {
        let combined = combine(f_vul_ids, candidate_ids);
        let phi = self.backbone.features(&combined)?;
        Ok(self.score_features(&phi))
    }
}

fn combine(f_vul_ids: &[u32], candidate_ids: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(f_vul_ids.len() + candidate_ids.len() + 1);
    out.extend_from_slice(f_vul_ids);
    out.push(SEP);
    out.extend_from_slice(candidate_ids);
    out
}

/// Pairwise preference objective: `log σ(score_ref − score_gen)`.
/// Training maximizes this (implemented as minimizing its negation).
pub fn reward_model_loss(score_ref: f64, score_gen: f64) -> f64 {
    log_sigmoid(score_ref - score_gen)
}

fn log_sigmoid(x: f64) -> f64 {
    // stable: log σ(x) = min(x, 0) − ln(1 + e^{−|x|})
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// One preference triple: the vulnerable input, the ground-truth repair, and
/// a sampled generation that must score lower.
#[derive(Debug, Clone)]
pub struct PreferenceTriple {
    pub f_vul_ids: Vec<u32>,
    pub f_rep_ids: Vec<u32>,
    pub f_gen_ids: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RewardTrainReport {
    /// Mean pairwise accuracy (`score_ref > score_gen`) per epoch.
    pub accuracy_per_epoch: Vec<f64>,
    pub final_mean_loss: f64,
}

/// Train the scalar head on preference triples with the backbone frozen.
/// Deterministic per seed.
pub fn train_reward_model<B: FeatureBackbone>(
    rm: &mut RewardModel<B>,
    triples: &[PreferenceTriple],
    cfg: &RewardTrainConfig,
) -> Result<RewardTrainReport, RewardError> {
    if triples.is_empty() {
        return Err(RewardError::NoTriples);
    }
    // frozen backbone: cache the feature differences once
    let mut deltas = Vec::with_capacity(triples.len());
    for triple in triples {
        let phi_ref = rm
            .backbone
            .features(&combine(&triple.f_vul_ids, &triple.f_rep_ids))?;
        let phi_gen = rm
            .backbone
            .features(&combine(&triple.f_vul_ids, &triple.f_gen_ids))?;
        let delta: Vec<f64> = phi_ref.iter().zip(&phi_gen).map(|(a, b)| a - b).collect();
        deltas.push(delta);
    }

    let mut report = RewardTrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..deltas.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let delta = &deltas[i];
            let margin: f64 = rm.head_w.iter().zip(delta).map(|(w, d)| w * d).sum();
            loss_sum += -log_sigmoid(margin);
            // d(−log σ(m))/dw = −(1 − σ(m)) Δφ
            let coeff = 1.0 - sigmoid(margin);
            for (w, d) in rm.head_w.iter_mut().zip(delta) {
                *w += cfg.lr * coeff * d;
            }
        }
        let correct = deltas
            .iter()
            .filter(|delta| {
                let margin: f64 = rm.head_w.iter().zip(*delta).map(|(w, d)| w * d).sum();
                margin > 0.0
            })
            .count();
        report
            .accuracy_per_epoch
            .push(correct as f64 / deltas.len() as f64);
        report.final_mean_loss = loss_sum / deltas.len() as f64;
    }
    Ok(report)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted mix of the semantic reward and the learned score:
/// `w_s · semantic_f1 + w_r · tanh(rm_score)`. The defaults `(1, 0)` keep
/// the reward purely semantic.
pub fn combined_reward(semantic_f1: f64, rm_score: f64, w_s: f64, w_r: f64) -> f64 {
    w_s * semantic_f1 + w_r * rm_score.tanh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_stub() -> StubEmbeddingProvider {
        // orthogonal basis vectors for ids 0..4
        StubEmbeddingProvider::new([
            (0u32, vec![1.0, 0.0, 0.0, 0.0]),
            (1, vec![0.0, 1.0, 0.0, 0.0]),
            (2, vec![0.0, 0.0, 1.0, 0.0]),
            (3, vec![0.0, 0.0, 0.0, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn self_match_is_one_with_stub() {
        let s = semantic_reward(&[0, 1, 2], &[0, 1, 2], &unit_stub()).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-9);
        assert!((s.recall - 1.0).abs() < 1e-9);
        assert!((s.f1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn self_match_is_one_with_policy_provider() {
        let provider =
            PolicyEmbeddingProvider::new(PolicyModel::new(ModelConfig::tiny(1, 16, 2, 32), 0));
        let ids = vec![10, 20, 30, 40];
        let s = semantic_reward(&ids, &ids, &provider).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-6);
        let vectors = provider.embed(&ids).unwrap();
        for v in vectors {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_embeddings_score_zero() {
        let s = semantic_reward(&[0, 1], &[2, 3], &unit_stub()).unwrap();
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn matches_exhaustive_cosine_oracle() {
        let stub = StubEmbeddingProvider::new([
            (0u32, vec![1.0, 0.0]),
            (1, vec![0.6, 0.8]),
            (2, vec![0.0, 1.0]),
            (3, vec![-1.0, 0.0]),
        ])
        .unwrap();
        let cand = [0u32, 1, 3];
        let refr = [2u32, 1];
        let s = semantic_reward(&cand, &refr, &stub).unwrap();

        // oracle: full pairwise cosine table, row/column maxima
        let cv = stub.embed(&cand).unwrap();
        let rv = stub.embed(&refr).unwrap();
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut p = 0.0;
        for c in &cv {
            p += rv.iter().map(|r| cos(c, r)).fold(f64::NEG_INFINITY, f64::max);
        }
        p /= cv.len() as f64;
        let mut r = 0.0;
        for rr in &rv {
            r += cv.iter().map(|c| cos(c, rr)).fold(f64::NEG_INFINITY, f64::max);
        }
        r /= rv.len() as f64;
        assert!((s.precision - p).abs() < 1e-12);
        assert!((s.recall - r).abs() < 1e-12);
        let f1 = 2.0 * p * r / (p + r);
        assert!((s.f1 - f1).abs() < 1e-12);
    }

    #[test]
    fn swap_exchanges_precision_and_recall() {
        let stub = unit_stub();
        let a = semantic_reward(&[0, 1, 2], &[1, 3], &stub).unwrap();
        let b = semantic_reward(&[1, 3], &[0, 1, 2], &stub).unwrap();
        assert_eq!(a.precision, b.recall);
        assert_eq!(a.recall, b.precision);
        assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn empty_sequence_is_error() {
        assert!(matches!(
            semantic_reward(&[], &[0], &unit_stub()),
            Err(RewardError::EmptySequence)
        ));
    }

    #[test]
    fn non_negative_provider_bounds() {
        let provider = NonNegativeProvider(PolicyEmbeddingProvider::new(PolicyModel::new(
            ModelConfig::tiny(1, 8, 1, 32),
            3,
        )));
        let s = semantic_reward(&[5, 6, 7], &[8, 9], &provider).unwrap();
        assert!(s.precision >= 0.0 && s.precision <= 1.0 + 1e-9);
        assert!(s.recall >= 0.0 && s.recall <= 1.0 + 1e-9);
    }

    #[test]
    fn stub_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stub.txt");
        std::fs::write(&path, "# id vx vy\n0 1 0\n1 3 4\n").unwrap();
        let stub = StubEmbeddingProvider::from_file(&path).unwrap();
        let v = stub.embed(&[1]).unwrap();
        assert!((v[0][0] - 0.6).abs() < 1e-12);
        assert!((v[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::approx_constant)] // frozen oracle value, not a ln(2) stand-in
    fn loss_at_equal_scores() {
        let loss = reward_model_loss(1.5, 1.5);
        assert!((loss - (-0.693_147_180_559_945_3)).abs() < 1e-6);
    }

    #[test]
    fn loss_at_margin_two() {
        let loss = reward_model_loss(3.0, 1.0);
        assert!((loss - (-0.126_928_011_042_972_6)).abs() < 1e-5);
    }

    #[test]
    fn loss_tends_to_zero_for_large_margin() {
        let loss = reward_model_loss(30.0, 0.0);
        assert!(loss < 0.0 && loss > -1e-9);
        // at float scale the limit is reached exactly
        assert_eq!(reward_model_loss(1e6, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn sigmoid_complement_identity(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let total = reward_model_loss(a, b).exp() + reward_model_loss(b, a).exp();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    struct MeanOneHotBackbone {
        dim: usize,
    }

    impl FeatureBackbone for MeanOneHotBackbone {
        fn dim(&self) -> usize {
            self.dim
        }
        fn features(&self, ids: &[u32]) -> Result<Vec<f64>, RewardError> {
            let mut phi = vec![0.0; self.dim];
            for &id in ids {
                phi[(id as usize) % self.dim] += 1.0;
            }
            for x in &mut phi {
                *x /= ids.len() as f64;
            }
            Ok(phi)
        }
    }

    #[test]
    fn zero_initialized_head_scores_zero() {
        let rm = RewardModel::new(MeanOneHotBackbone { dim: 8 });
        assert_eq!(rm.score(&[1, 2], &[3, 4]).unwrap(), 0.0);
    }

    #[test]
    fn reward_model_round_trips_through_checkpoint() {
        let mut model = PolicyModel::new(ModelConfig::tiny(1, 8, 1, 32), 4).with_reward_head();
        model.params.reward_w = Some((0..8).map(|i| i as f64 * 0.1).collect());
        model.params.reward_b = Some(vec![0.25]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rm.ckpt");
        crate::tinylm::save_checkpoint(&model, &path).unwrap();
        let loaded = crate::tinylm::load_checkpoint(&path).unwrap();
        let rm = RewardModel::from_policy_checkpoint(loaded).unwrap();
        let direct = RewardModel {
            backbone: PolicyBackbone::new(model.clone()),
            head_w: model.params.reward_w.clone().unwrap(),
            head_b: 0.25,
        };
        let a = rm.score(&[1, 2, 3], &[4, 5]).unwrap();
        let b = direct.score(&[1, 2, 3], &[4, 5]).unwrap();
        assert!((a - b).abs() < 1e-6);
        assert!(RewardModel::from_policy_checkpoint(PolicyModel::new(
            ModelConfig::tiny(1, 8, 1, 32),
            0
        ))
        .is_none());
    }

    #[test]
    fn scores_are_deterministic_on_frozen_weights() {
        let model = PolicyModel::new(ModelConfig::tiny(1, 16, 2, 64), 9);
        let mut rm = RewardModel::new(PolicyBackbone::new(model));
        rm.head_w
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = (i as f64) * 0.01);
        let a = rm.score(&[10, 11, 12], &[13, 14]).unwrap();
        let b = rm.score(&[10, 11, 12], &[13, 14]).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    fn separable_triples() -> Vec<PreferenceTriple> {
        // repairs contain token 1, generations token 2: linearly separable
        (0..4)
            .map(|i| PreferenceTriple {
                f_vul_ids: vec![4 + i],
                f_rep_ids: vec![1, 1],
                f_gen_ids: vec![2, 2],
            })
            .collect()
    }

    #[test]
    fn separable_triples_reach_full_accuracy() {
        let mut rm = RewardModel::new(MeanOneHotBackbone { dim: 8 });
        let report =
            train_reward_model(&mut rm, &separable_triples(), &RewardTrainConfig::default())
                .unwrap();
        assert_eq!(*report.accuracy_per_epoch.last().unwrap(), 1.0);
        let s_ref = rm.score(&[4], &[1, 1]).unwrap();
        let s_gen = rm.score(&[4], &[2, 2]).unwrap();
        assert!(s_ref > s_gen);
    }

    #[test]
    fn zero_epochs_leaves_head_unchanged() {
        let mut rm = RewardModel::new(MeanOneHotBackbone { dim: 8 });
        let cfg = RewardTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_reward_model(&mut rm, &separable_triples(), &cfg).unwrap();
        assert!(rm.head_w.iter().all(|&w| w == 0.0));
        assert_eq!(rm.head_b, 0.0);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = RewardTrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let mut rm1 = RewardModel::new(MeanOneHotBackbone { dim: 8 });
        let r1 = train_reward_model(&mut rm1, &separable_triples(), &cfg).unwrap();
        let mut rm2 = RewardModel::new(MeanOneHotBackbone { dim: 8 });
        let r2 = train_reward_model(&mut rm2, &separable_triples(), &cfg).unwrap();
        assert_eq!(rm1.head_w, rm2.head_w);
        assert_eq!(r1.accuracy_per_epoch, r2.accuracy_per_epoch);
    }

    #[test]
    fn combined_reward_weightings() {
        assert_eq!(combined_reward(0.7, 5.0, 1.0, 0.0), 0.7);
        assert_eq!(combined_reward(0.7, 5.0, 0.0, 0.0), 0.0);
        assert!((combined_reward(1.0, 0.0, 1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policy_backbone_ignores_trailing_pad() {
        let model = PolicyModel::new(ModelConfig::tiny(1, 8, 1, 32), 2);
        let backbone = PolicyBackbone::new(model);
        let a = backbone.features(&[5, 6, 7]).unwrap();
        // causality: trailing PAD cannot change the hidden state at the last
        // non-PAD position
        let b = backbone
            .features(&[5, 6, 7, crate::tinylm::PAD, crate::tinylm::PAD])
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn random_self_match_is_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.gen_range(1..12usize);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256)).collect();
            let provider = PolicyEmbeddingProvider::new(
                PolicyModel::new(ModelConfig::tiny(1, 8, 1, 32), 1),
            );
            let s = semantic_reward(&ids, &ids, &provider).unwrap();
            prop_assert!((s.f1 - 1.0).abs() < 1e-6);
            prop_assert!((s.precision - s.recall).abs() < 1e-9);
        }
    }
}
