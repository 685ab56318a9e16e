//! Corpus ingestion, deterministic splits, and CWE statistics.
//!
//! A corpus is a list of vulnerable/repaired function pairs loaded from a
//! directory of `<id>_vuln.<ext>` / `<id>_fixed.<ext>` files plus a
//! comma-delimited `id,CWE-XXX` label file. Ingestion is tolerant of missing
//! counterparts (skipped and reported) but strict about malformed labels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("label file {path} line {line}: {reason}")]
    BadLabel {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("ingestion produced an empty corpus from {0}")]
    EmptyCorpus(PathBuf),
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),
    #[error("cannot split an empty corpus")]
    SplitEmptyCorpus,
}

/// Source language of a function pair, derived from the file extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageTag {
    C,
    Cpp,
}

impl LanguageTag {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "c" => Some(LanguageTag::C),
            "cpp" | "cc" | "cxx" => Some(LanguageTag::Cpp),
            _ => None,
        }
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LanguageTag::C => write!(f, "c"),
            LanguageTag::Cpp => write!(f, "cpp"),
        }
    }
}

/// A vulnerable function, its repaired counterpart, and the CWE label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionPair {
    pub id: String,
    pub vulnerable_source: String,
    pub repaired_source: String,
    /// Of the form `CWE-<digits>`.
    pub cwe: String,
    pub language_tag: LanguageTag,
}

/// Where a corpus came from. The timestamp stays in memory; it is never
/// serialized into artifacts, so reruns hash identically.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub source_path: PathBuf,
    pub ingested_at: SystemTime,
}

/// An ordered collection of function pairs. Ordering is lexicographic by id
/// and stable across runs for identical input files.
#[derive(Debug, Clone)]
pub struct Corpus {
    pairs: Vec<FunctionPair>,
    provenance: Provenance,
}

impl Corpus {
    pub fn from_pairs(pairs: Vec<FunctionPair>, source_path: PathBuf) -> Self {
        Self {
            pairs,
            provenance: Provenance {
                source_path,
                ingested_at: SystemTime::now(),
            },
        }
    }

    pub fn pairs(&self) -> &[FunctionPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FunctionPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.id.clone()).collect()
    }
}

/// A pair that was dropped during ingestion, with the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipReport {
    pub id: String,
    pub reason: String,
}

/// Result of ingestion: the corpus plus any skipped ids.
#[derive(Debug)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub skips: Vec<SkipReport>,
}

/// Disjoint train/validation/test id lists produced by [`split`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

fn split_stem(stem: &str) -> Option<(&str, &str)> {
    if let Some(id) = stem.strip_suffix("_vuln") {
        Some((id, "vuln"))
    } else {
        stem.strip_suffix("_fixed").map(|id| (id, "fixed"))
    }
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut labels = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, cwe)) = line.split_once(',') else {
            return Err(CorpusError::BadLabel {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected `id,CWE-XXX`, got {line:?}"),
            });
        };
        let id = id.trim();
        let cwe = cwe.trim();
        if id.is_empty() {
            return Err(CorpusError::BadLabel {
                path: path.to_path_buf(),
                line: line_no,
                reason: "empty id".into(),
            });
        }
        if !is_valid_cwe(cwe) {
            return Err(CorpusError::BadLabel {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("{cwe:?} does not match CWE-[0-9]+"),
            });
        }
        labels.insert(id.to_string(), cwe.to_string());
    }
    Ok(labels)
}

pub fn is_valid_cwe(cwe: &str) -> bool {
    cwe.strip_prefix("CWE-")
        .map(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .unwrap_or(false)
}

/// Ingest `<id>_vuln.<ext>` / `<id>_fixed.<ext>` pairs from `root_dir`,
/// labeled by the comma-delimited `labels` file.
///
/// Ids missing either file form or a label are skipped; a `SKIP <id> <reason>`
/// line goes to standard error for each. A malformed label line or an empty
/// result is a hard error.
pub fn ingest_pairs(root_dir: &Path, labels: &Path) -> Result<IngestOutcome, CorpusError> {
    let label_map = read_labels(labels)?;

    // id -> (vuln path, fixed path); first path lexicographically wins per slot
    let mut files: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    let entries = std::fs::read_dir(root_dir).map_err(|source| CorpusError::Io {
        path: root_dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Some(ext) = path.extension().and_then(|s| s.to_str()) else {
            continue;
        };
        if LanguageTag::from_extension(ext).is_none() {
            continue;
        }
        let Some((id, role)) = split_stem(stem) else {
            continue;
        };
        let slot = files.entry(id.to_string()).or_default();
        match role {
            "vuln" => slot.0.get_or_insert(path),
            _ => slot.1.get_or_insert(path),
        };
    }

    let mut pairs = Vec::new();
    let mut skips = Vec::new();
    let skip = |id: &str, reason: String, skips: &mut Vec<SkipReport>| {
        eprintln!("SKIP {id} {reason}");
        skips.push(SkipReport {
            id: id.to_string(),
            reason,
        });
    };

    for (id, (vuln, fixed)) in &files {
        let (Some(vuln_path), Some(fixed_path)) = (vuln, fixed) else {
            let missing = if vuln.is_none() { "vuln" } else { "fixed" };
            skip(id, format!("missing {missing} counterpart"), &mut skips);
            continue;
        };
        let Some(cwe) = label_map.get(id) else {
            skip(id, "missing label".into(), &mut skips);
            continue;
        };
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| CorpusError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        let vulnerable_source = read(vuln_path)?;
        let repaired_source = read(fixed_path)?;
        if vulnerable_source == repaired_source {
            skip(id, "vulnerable and repaired sources are identical".into(), &mut skips);
            continue;
        }
        let ext = vuln_path.extension().and_then(|s| s.to_str()).unwrap_or("c");
        let language_tag = LanguageTag::from_extension(ext).unwrap_or(LanguageTag::C);
        pairs.push(FunctionPair {
            id: id.clone(),
            vulnerable_source,
            repaired_source,
            cwe: cwe.clone(),
            language_tag,
        });
    }

    // ids not present on disk at all still count as skipped label entries
    for id in label_map.keys() {
        if !files.contains_key(id) {
            skip(id, "no source files".into(), &mut skips);
        }
    }

    // a 0-pair corpus with skip reports is valid; finding nothing at all is not
    if pairs.is_empty() && skips.is_empty() {
        return Err(CorpusError::EmptyCorpus(root_dir.to_path_buf()));
    }

    Ok(IngestOutcome {
        corpus: Corpus::from_pairs(pairs, root_dir.to_path_buf()),
        skips,
    })
}

/// Shuffle corpus ids with a seeded PRNG and partition them by `ratios`.
///
/// `floor(n * r_train)` ids go to train, `floor(n * r_val)` to validation,
/// and the remainder to test. Pure function of (id set, ratios, seed).
pub fn split(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitSet, CorpusError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(CorpusError::BadRatios(ratios));
    }
    if corpus.is_empty() {
        return Err(CorpusError::SplitEmptyCorpus);
    }

    let mut ids = corpus.ids();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_train = (n as f64 * ratios[0]).floor() as usize;
    let n_val = (n as f64 * ratios[1]).floor() as usize;

    let train = ids[..n_train].to_vec();
    let validation = ids[n_train..n_train + n_val].to_vec();
    let test = ids[n_train + n_val..].to_vec();

    Ok(SplitSet {
        train,
        validation,
        test,
        seed,
        ratios,
    })
}

/// Count pairs per CWE, sorted by descending count with ties broken by
/// ascending CWE string.
pub fn cwe_histogram(corpus: &Corpus) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for pair in corpus.pairs() {
        *counts.entry(&pair.cwe).or_default() += 1;
    }
    let mut rows: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(cwe, n)| (cwe.to_string(), n))
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows
}
