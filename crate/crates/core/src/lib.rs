//! vulnrepair: a desk-scale vulnerability repair lab.
//!
//! The crate covers the full pipeline for training and evaluating a tiny
//! instruction-following causal language model on paired vulnerable/repaired
//! C and C++ functions:
//!
//! 1. **corpus** — ingestion of vulnerable/repaired function pairs with CWE
//!    labels, deterministic splits, corpus statistics.
//! 2. **codeprep** — tree-sitter parsing, function-name obfuscation via
//!    S-expression queries, comment extraction and removal.
//! 3. **instructions** — instruction-record assembly for the identify /
//!    describe / repair tasks, with seed templates and optional external
//!    augmentation.
//! 4. **tinylm** — byte-level tokenizer, from-scratch causal decoder,
//!    supervised fine-tuning, temperature/top-p/beam decoding.
//! 5. **reward** — contextual token embeddings, greedy-match semantic reward,
//!    and a learned pairwise reward model.
//! 6. **rlloop** — PPO fine-tuning of the policy against a reward function.
//! 7. **evalsuite** — BLEU, ROUGE-L, cosine, greedy-match, classification
//!    metrics, and compile tallies.
//! 8. **harness** — configuration, CLI orchestration, and ablation sweeps.
//!
//! Everything is CPU-only, dependency-light, and deterministic under a fixed
//! seed.

pub mod codeprep;
pub mod corpus;
pub mod evalsuite;
pub mod harness;
pub mod instructions;
pub mod reward;
pub mod rlloop;
pub mod tinylm;

pub use corpus::{Corpus, FunctionPair, LanguageTag, SplitSet};

/// Paths to the fixtures bundled with the crate.
pub mod fixtures {
    use std::path::PathBuf;

    fn data_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
    }

    /// Directory of the bundled 24-pair micro-corpus.
    pub fn microcorpus_dir() -> PathBuf {
        data_dir().join("microcorpus")
    }

    /// Label file of the bundled micro-corpus.
    pub fn microcorpus_labels() -> PathBuf {
        microcorpus_dir().join("labels.csv")
    }

    /// The bundled seed-instruction file (20 seeds per task).
    pub fn seed_instructions() -> PathBuf {
        data_dir().join("seed_instructions.tsv")
    }

    /// Directory of the 10-sample compile-tally fixture.
    pub fn tally_dir() -> PathBuf {
        data_dir().join("tally10")
    }
}
