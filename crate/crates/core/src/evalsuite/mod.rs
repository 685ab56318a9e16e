//! Evaluation metrics: BLEU, ROUGE-L, pooled-cosine similarity, greedy-match
//! F1, exact match, classification metrics, and compile tallies.
//!
//! Metric tokenization for code is a fixed whitespace-and-punctuation split:
//! runs of `[A-Za-z0-9_]` are word tokens, every other non-whitespace
//! character is its own token. BLEU is per-sample (averaged by the caller
//! over a set), not corpus-level.

mod report;

pub use report::{
    render_generation_table, render_identification_table, GenerationRow, MetricReport,
    SampleScore,
};

use std::collections::HashMap;
use std::io::Write as _;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codeprep;
use crate::corpus::LanguageTag;
use crate::reward::{semantic_reward, EmbeddingProvider, RewardError, SimilarityScores};
use crate::tinylm::Tokenizer;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty {0} input")]
    EmptyInput(&'static str),
    #[error("predictions ({0}) and labels ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("pooled embedding has zero norm (degenerate provider)")]
    ZeroNormPooled,
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Whitespace-and-punctuation tokenizer used by BLEU and ROUGE-L.
pub fn tokenize_for_metrics(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
    }
    counts
}

/// Per-sample BLEU: geometric mean of modified n-gram precisions (n = 1..=`max_n`)
/// times the brevity penalty `exp(1 − r/c)` when `c < r`.
///
/// Without smoothing, any zero n-gram precision zeroes the score. With
/// add-one smoothing every precision becomes `(m + 1)/(h + 1)`.
pub fn bleu(
    candidate: &[String],
    reference: &[String],
    max_n: usize,
    smoothing: bool,
) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyInput("reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_grams = ngram_counts(candidate, n);
        let ref_grams = ngram_counts(reference, n);
        let hits: usize = cand_grams
            .iter()
            .map(|(gram, &count)| count.min(ref_grams.get(gram).copied().unwrap_or(0)))
            .sum();
        let total: usize = cand_grams.values().sum();
        let precision = if smoothing {
            (hits + 1) as f64 / (total + 1) as f64
        } else {
            if hits == 0 {
                return Ok(0.0);
            }
            hits as f64 / total as f64
        };
        log_sum += precision.ln();
    }
    let mean = (log_sum / max_n as f64).exp();
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(mean * bp)
}

/// Precision/recall/F of ROUGE-L.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L via longest common subsequence. `beta` weights recall in the
/// F-measure; 1.0 is the balanced default.
pub fn rouge_l(
    candidate: &[String],
    reference: &[String],
    beta: f64,
) -> Result<PrfScores, EvalError> {
    if candidate.is_empty() {
        return Err(EvalError::EmptyInput("candidate"));
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyInput("reference"));
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let b2 = beta * beta;
    let f = if lcs == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (recall + b2 * precision)
    };
    Ok(PrfScores {
        precision,
        recall,
        f,
    })
}

/// Mean-pool the token embeddings of each text and return the normalized
/// inner product of the pooled vectors.
pub fn cosine_similarity<P: EmbeddingProvider>(
    candidate_text: &str,
    reference_text: &str,
    provider: &P,
) -> Result<f64, EvalError> {
    let tok = Tokenizer;
    let cand_ids = tok.encode(candidate_text);
    let ref_ids = tok.encode(reference_text);
    if cand_ids.is_empty() {
        return Err(EvalError::EmptyInput("candidate"));
    }
    if ref_ids.is_empty() {
        return Err(EvalError::EmptyInput("reference"));
    }
    let pool = |vectors: Vec<Vec<f64>>| -> Vec<f64> {
        let dim = vectors[0].len();
        let mut out = vec![0.0; dim];
        for v in &vectors {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= vectors.len() as f64;
        }
        out
    };
    let c = pool(provider.embed(&cand_ids)?);
    let r = pool(provider.embed(&ref_ids)?);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nc, nr) = (norm(&c), norm(&r));
    if nc == 0.0 || nr == 0.0 {
        return Err(EvalError::ZeroNormPooled);
    }
    let dot: f64 = c.iter().zip(&r).map(|(a, b)| a * b).sum();
    Ok(dot / (nc * nr))
}

/// Greedy max-cosine token matching, shared with the training reward and
/// surfaced here as an evaluation metric.
pub fn greedy_match_score<P: EmbeddingProvider>(
    candidate_ids: &[u32],
    reference_ids: &[u32],
    provider: &P,
) -> Result<SimilarityScores, EvalError> {
    Ok(semantic_reward(candidate_ids, reference_ids, provider)?)
}

/// Byte equality after trailing-whitespace normalization: every line loses
/// its trailing whitespace and trailing newlines are dropped.
pub fn exact_match(candidate_text: &str, reference_text: &str) -> bool {
    fn normalize(text: &str) -> String {
        let mut out: String = text
            .lines()
            .map(str::trim_end)
            .collect::<Vec<_>>()
            .join("\n");
        while out.ends_with('\n') {
            out.pop();
        }
        out
    }
    normalize(candidate_text) == normalize(reference_text)
}

/// Binary label of the identification task; YES marks the vulnerable class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn parse(s: &str) -> Option<YesNo> {
        match s {
            "YES" => Some(YesNo::Yes),
            "NO" => Some(YesNo::No),
            _ => None,
        }
    }
}

/// Confusion-matrix metrics plus the class-restricted accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Accuracy over vulnerable-labeled samples (recall of YES).
    pub acc_vul: f64,
    /// Accuracy over benign-labeled samples (specificity).
    pub acc_ben: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Score raw model outputs against YES/NO labels. A prediction other than
/// the exact strings `YES`/`NO` counts as NO in the confusion matrix and as
/// wrong for both restricted accuracies.
pub fn classification_metrics(
    predictions: &[String],
    labels: &[YesNo],
) -> Result<ClassificationMetrics, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let (mut vul_total, mut vul_right) = (0usize, 0usize);
    let (mut ben_total, mut ben_right) = (0usize, 0usize);
    for (pred, &label) in predictions.iter().zip(labels) {
        let parsed = YesNo::parse(pred);
        let effective = parsed.unwrap_or(YesNo::No);
        match (label, effective) {
            (YesNo::Yes, YesNo::Yes) => tp += 1,
            (YesNo::Yes, YesNo::No) => fn_ += 1,
            (YesNo::No, YesNo::Yes) => fp += 1,
            (YesNo::No, YesNo::No) => tn += 1,
        }
        match label {
            YesNo::Yes => {
                vul_total += 1;
                if parsed == Some(YesNo::Yes) {
                    vul_right += 1;
                }
            }
            YesNo::No => {
                ben_total += 1;
                if parsed == Some(YesNo::No) {
                    ben_right += 1;
                }
            }
        }
    }
    let total = predictions.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, total),
        precision,
        recall,
        f1,
        acc_vul: ratio(vul_right, vul_total),
        acc_ben: ratio(ben_right, ben_total),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// How generated programs are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckerMode {
    /// Pass iff the parse tree contains zero error-kind nodes.
    ParseOnly,
    /// Pass iff the configured compiler exits 0 on a syntax-only invocation.
    ExternalCompiler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleDiagnostic {
    pub index: usize,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of [`compile_tally`], rendered as `n/N`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompileTally {
    pub total: usize,
    pub passed: usize,
    pub mode: CheckerMode,
    pub diagnostics: Vec<SampleDiagnostic>,
    pub warnings: Vec<String>,
}

impl CompileTally {
    pub fn render(&self) -> String {
        format!("{}/{}", self.passed, self.total)
    }
}

fn compiler_available(cmd: &str) -> bool {
    Command::new(cmd)
        .arg("--version")
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

/// Count how many sources pass a syntax check.
///
/// `parse_only` consults the bundled parser; `external_compiler` runs
/// `<compiler_cmd> -fsyntax-only <file>` and expects exit 0. A missing
/// compiler downgrades the whole tally to `parse_only` with a warning in
/// the report.
pub fn compile_tally(
    sources: &[(String, LanguageTag)],
    mode: CheckerMode,
    compiler_cmd: Option<&str>,
) -> CompileTally {
    let mut warnings = Vec::new();
    let mut effective_mode = mode;
    let mut compiler: Vec<String> = Vec::new();
    if mode == CheckerMode::ExternalCompiler {
        let cmd = compiler_cmd.unwrap_or("gcc");
        compiler = cmd.split_whitespace().map(str::to_string).collect();
        if compiler.is_empty() || !compiler_available(&compiler[0]) {
            warnings.push(format!(
                "compiler {cmd:?} not resolvable; downgraded to parse_only"
            ));
            effective_mode = CheckerMode::ParseOnly;
        }
    }

    let mut passed = 0usize;
    let mut diagnostics = Vec::with_capacity(sources.len());
    for (index, (source, lang)) in sources.iter().enumerate() {
        let (ok, detail) = match effective_mode {
            CheckerMode::ParseOnly => {
                let tree = codeprep::parse(source, *lang);
                let errors = tree.error_node_count();
                (errors == 0, format!("{errors} error nodes"))
            }
            CheckerMode::ExternalCompiler => {
                match run_syntax_only(&compiler, source, *lang, index) {
                    Ok(status) => (status, "compiler exit status".to_string()),
                    Err(e) => (false, format!("compiler invocation failed: {e}")),
                }
            }
        };
        if ok {
            passed += 1;
        }
        diagnostics.push(SampleDiagnostic {
            index,
            passed: ok,
            detail,
        });
    }
    CompileTally {
        total: sources.len(),
        passed,
        mode: effective_mode,
        diagnostics,
        warnings,
    }
}

fn run_syntax_only(
    compiler: &[String],
    source: &str,
    lang: LanguageTag,
    index: usize,
) -> std::io::Result<bool> {
    let ext = match lang {
        LanguageTag::C => "c",
        LanguageTag::Cpp => "cpp",
    };
    let path = std::env::temp_dir().join(format!(
        "vulnrepair-tally-{}-{index}.{ext}",
        std::process::id()
    ));
    {
        let mut file = std::fs::File::create(&path)?;
        file.write_all(source.as_bytes())?;
    }
    let status = Command::new(&compiler[0])
        .args(&compiler[1..])
        .arg("-fsyntax-only")
        .arg(&path)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status();
    let _ = std::fs::remove_file(&path);
    Ok(status?.success())
}
