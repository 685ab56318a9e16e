//! Ablation sweeps over the decoding temperature and the beam width.

use std::time::Instant;

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalsuite;
use crate::instructions::InstructionRecord;
use crate::tinylm::{build_prompt, generate, DecodeConfig, PolicyModel, Tokenizer};

/// Which decoding knob the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Temperature,
    Beam,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "temperature" => Some(SweepAxis::Temperature),
            "beam" => Some(SweepAxis::Beam),
            _ => None,
        }
    }

    /// The published ablation grids.
    pub fn default_grid(&self) -> Vec<f64> {
        match self {
            SweepAxis::Temperature => vec![0.0, 0.25, 0.50, 0.75, 1.0],
            SweepAxis::Beam => vec![1.0, 2.0, 4.0, 6.0, 8.0],
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Temperature => write!(f, "temperature"),
            SweepAxis::Beam => write!(f, "beam"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub wall_seconds: f64,
    pub normalized_time: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// Decode the eval set once per grid value, scoring BLEU and ROUGE-L against
/// the reference outputs and timing each value's decode wall clock.
///
/// For the beam axis, `normalized_time = (t − min t)/(max t − min t)`; a
/// degenerate all-equal grid maps to 0. A decode failure marks its row
/// `failed` and the sweep continues.
pub fn run_sweep(
    axis: SweepAxis,
    grid: &[f64],
    model: &PolicyModel,
    eval_records: &[InstructionRecord],
    base_decode: &DecodeConfig,
    seed: u64,
) -> Result<SweepResult> {
    let tok = Tokenizer;
    let mut rows = Vec::with_capacity(grid.len());

    for (vi, &value) in grid.iter().enumerate() {
        let decode = match axis {
            SweepAxis::Temperature => DecodeConfig {
                temperature: value,
                ..base_decode.clone()
            },
            SweepAxis::Beam => DecodeConfig {
                beam_size: value.max(1.0) as usize,
                // beam search only engages at a positive temperature; hold
                // it at the 0.5 operating point when the base config decodes
                // greedily
                temperature: if base_decode.temperature > 0.0 {
                    base_decode.temperature
                } else {
                    0.5
                },
                ..base_decode.clone()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(vi as u64));
        let started = Instant::now();
        let mut bleu_sum = 0.0;
        let mut rouge_sum = 0.0;
        let mut scored = 0usize;
        let mut failed = false;
        for record in eval_records {
            let reserve = decode.max_new_tokens;
            let prompt = build_prompt(record, &tok, model.config.context_len, reserve);
            let gen = match generate(model, &prompt, &decode, &mut rng) {
                Ok(ids) => ids,
                Err(err) => {
                    eprintln!("sweep {axis}={value}: decode failed: {err}");
                    failed = true;
                    break;
                }
            };
            let text = tok.decode(&gen);
            let cand = evalsuite::tokenize_for_metrics(&text);
            let reference = evalsuite::tokenize_for_metrics(&record.output);
            if cand.is_empty() || reference.is_empty() {
                scored += 1;
                continue;
            }
            bleu_sum += evalsuite::bleu(&cand, &reference, 4, true)?;
            rouge_sum += evalsuite::rouge_l(&cand, &reference, 1.0)?.f;
            scored += 1;
        }
        let wall_seconds = started.elapsed().as_secs_f64();
        let denom = scored.max(1) as f64;
        rows.push(SweepRow {
            value,
            bleu: if failed { 0.0 } else { bleu_sum / denom },
            rouge_l: if failed { 0.0 } else { rouge_sum / denom },
            wall_seconds,
            normalized_time: None,
            failed,
        });
    }

    if axis == SweepAxis::Beam {
        let times: Vec<f64> = rows.iter().filter(|r| !r.failed).map(|r| r.wall_seconds).collect();
        if !times.is_empty() {
            let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min;
            for row in rows.iter_mut().filter(|r| !r.failed) {
                row.normalized_time = Some(if span > 0.0 {
                    (row.wall_seconds - min) / span
                } else {
                    0.0
                });
            }
        }
    }

    Ok(SweepResult { axis, rows })
}

/// CSV with columns `value,bleu,rouge_l,wall_seconds[,normalized_time]`.
/// Failed rows keep their value and leave the metric cells empty.
pub fn sweep_to_csv(result: &SweepResult) -> String {
    let normalized = result.axis == SweepAxis::Beam;
    let mut out = String::from("value,bleu,rouge_l,wall_seconds");
    if normalized {
        out.push_str(",normalized_time");
    }
    out.push('\n');
    for row in &result.rows {
        if row.failed {
            out.push_str(&format!("{},,,{}", row.value, row.wall_seconds));
            if normalized {
                out.push(',');
            }
        } else {
            out.push_str(&format!(
                "{},{},{},{}",
                row.value, row.bleu, row.rouge_l, row.wall_seconds
            ));
            if normalized {
                out.push_str(&format!(
                    ",{}",
                    row.normalized_time.map(|t| t.to_string()).unwrap_or_default()
                ));
            }
        }
        out.push('\n');
    }
    out
}
