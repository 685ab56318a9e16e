//! Stage orchestration: ingest → obfuscate → dataset → split → SFT →
//! (reward model) → RL → evaluate, with a manifest of every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sha256_hex, RunConfig};
use crate::codeprep;
use crate::corpus::{self, Corpus, FunctionPair, SplitSet};
use crate::evalsuite::{
    self, classification_metrics, render_generation_table, render_identification_table,
    CompileTally, GenerationRow, MetricReport, SampleScore, YesNo,
};
use crate::instructions::{self, InstructionRecord, Task, TextCompletionClient};
use crate::reward::{
    combined_reward, semantic_reward, PolicyBackbone, PolicyEmbeddingProvider, PreferenceTriple,
    RewardModel, RewardTrainConfig,
};
use crate::rlloop::{self, RlReport};
use crate::tinylm::{
    build_prompt, generate, load_checkpoint, save_checkpoint, sft_train, DecodeConfig,
    PolicyModel, SftReport, Tokenizer,
};

/// Run manifest: the config hash, the seed, and the SHA-256 of every file
/// the run wrote (paths relative to the output directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, String>,
}

/// Everything `end_to_end` leaves behind, for tests and the CLI summary.
#[derive(Debug)]
pub struct EndToEndArtifacts {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub identify_report: MetricReport,
    pub repair_report: MetricReport,
    pub describe_report: MetricReport,
    pub tally: CompileTally,
    pub rl_report: RlReport,
}

/// Tracks written files so the manifest can hash them all.
pub(crate) struct ArtifactSink {
    out_dir: PathBuf,
    written: Vec<String>,
}

impl ArtifactSink {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path_for(rel)?;
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Register an artifact and return its absolute path; the caller writes
    /// the bytes itself.
    pub fn path_for(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
        Ok(path)
    }

    pub fn manifest(&self, config_hash: String, seed: u64) -> Result<Manifest> {
        let mut artifacts = BTreeMap::new();
        for rel in &self.written {
            let bytes = std::fs::read(self.out_dir.join(rel))?;
            artifacts.insert(rel.clone(), sha256_hex(&bytes));
        }
        Ok(Manifest {
            config_hash,
            seed,
            artifacts,
        })
    }
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("stage {name} failed"))
}

/// Ingest the configured corpus directory.
pub fn stage_ingest(cfg: &RunConfig) -> Result<Corpus> {
    stage("ingest", || {
        let outcome = corpus::ingest_pairs(&cfg.corpus_dir, &cfg.labels_file)?;
        Ok(outcome.corpus)
    })
}

/// Rewrite every pair with the shared-map obfuscation pass.
pub fn stage_obfuscate(cfg: &RunConfig, corpus_in: Corpus) -> Result<Corpus> {
    stage("obfuscate", || {
        if !cfg.obfuscate {
            return Ok(corpus_in);
        }
        let mut pairs = Vec::with_capacity(corpus_in.len());
        for pair in corpus_in.pairs() {
            let pair_seed = cfg.seed ^ fxhash(&pair.id);
            let (vuln, fixed, _) = codeprep::obfuscate_pair(
                &pair.vulnerable_source,
                &pair.repaired_source,
                pair.language_tag,
                pair_seed,
                cfg.rename_variables,
            )?;
            pairs.push(FunctionPair {
                id: pair.id.clone(),
                vulnerable_source: vuln,
                repaired_source: fixed,
                cwe: pair.cwe.clone(),
                language_tag: pair.language_tag,
            });
        }
        Ok(Corpus::from_pairs(pairs, cfg.corpus_dir.clone()))
    })
}

// deterministic 64-bit string hash for per-pair obfuscation seeds
fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Assemble the instruction records and write the dataset JSONL files.
pub fn stage_build_dataset(
    cfg: &RunConfig,
    corpus: &Corpus,
    sink: &mut ArtifactSink,
) -> Result<(Vec<InstructionRecord>, SplitSet)> {
    stage("build-dataset", || {
        let seeds = instructions::load_seeds(&cfg.seeds_file)?;
        let client = TextCompletionClient::new(instructions::AugmentationConfig {
            endpoint: cfg.augment_endpoint.clone(),
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let records = instructions::assemble_corpus(
            corpus,
            &seeds.seeds,
            |pair| client.generate_description(pair),
            &mut rng,
        )?;
        for record in &records {
            record.validate()?;
        }

        let split = corpus::split(corpus, cfg.split_ratios, cfg.seed)?;
        let by_split = |ids: &[String]| -> Vec<InstructionRecord> {
            records
                .iter()
                .filter(|r| ids.contains(&r.source_pair_id))
                .cloned()
                .collect()
        };
        let train = by_split(&split.train);
        let validation = by_split(&split.validation);
        let test = by_split(&split.test);

        write_jsonl(sink, "dataset/records.jsonl", &records)?;
        write_jsonl(sink, "dataset/train.jsonl", &train)?;
        write_jsonl(sink, "dataset/validation.jsonl", &validation)?;
        write_jsonl(sink, "dataset/test.jsonl", &test)?;
        sink.write("split.json", serde_json::to_string_pretty(&split)?.as_bytes())?;
        Ok((records, split))
    })
}

fn write_jsonl(
    sink: &mut ArtifactSink,
    rel: &str,
    records: &[InstructionRecord],
) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    sink.write(rel, out.as_bytes())?;
    Ok(())
}

fn records_for(records: &[InstructionRecord], ids: &[String]) -> Vec<InstructionRecord> {
    records
        .iter()
        .filter(|r| ids.contains(&r.source_pair_id))
        .cloned()
        .collect()
}

/// Supervised fine-tuning over the train split.
pub fn stage_train_sft(
    cfg: &RunConfig,
    train_records: &[InstructionRecord],
    sink: &mut ArtifactSink,
) -> Result<(PolicyModel, SftReport)> {
    stage("train-sft", || {
        let mut model = PolicyModel::new(cfg.model.clone(), cfg.seed);
        eprintln!(
            "model: {} layers, width {}, {} heads, context {}, {} parameters",
            cfg.model.n_layers,
            cfg.model.d_model,
            cfg.model.n_heads,
            cfg.model.context_len,
            model.param_count()
        );
        let report = sft_train(&mut model, train_records, &Tokenizer, &cfg.sft)?;
        for (id, reason) in &report.rejected {
            eprintln!("REJECT {id} {reason}");
        }
        let path = sink.path_for("checkpoints/sft.ckpt")?;
        save_checkpoint(&model, &path)?;
        let mut csv = String::from("epoch,split,loss\n");
        for point in &report.loss_curve {
            csv.push_str(&format!("{},{},{}\n", point.epoch, point.split, point.loss));
        }
        sink.write("logs/sft_loss.csv", csv.as_bytes())?;
        Ok((model, report))
    })
}

fn repair_prompt_reserve(cfg: &RunConfig) -> usize {
    cfg.decode.max_new_tokens.min(cfg.model.context_len / 2)
}

fn strip_specials(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t < 256).collect()
}

/// Train the pairwise reward model on the train-split repair records, with
/// negatives sampled from the SFT policy.
pub fn stage_train_reward(
    cfg: &RunConfig,
    sft_model: &PolicyModel,
    train_records: &[InstructionRecord],
    sink: &mut ArtifactSink,
) -> Result<RewardModel<PolicyBackbone>> {
    stage("train-reward", || {
        let tok = Tokenizer;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let sample_cfg = DecodeConfig {
            temperature: 1.0,
            top_p: 1.0,
            beam_size: 1,
            max_new_tokens: repair_prompt_reserve(cfg),
        };
        let budget = cfg.model.context_len / 2 - 2;
        let mut triples = Vec::new();
        for record in train_records.iter().filter(|r| r.task == Task::Repair) {
            let prompt = build_prompt(record, &tok, cfg.model.context_len, sample_cfg.max_new_tokens);
            let gen = generate(sft_model, &prompt, &sample_cfg, &mut rng)?;
            let clip = |mut ids: Vec<u32>| {
                if ids.len() > budget {
                    ids.truncate(budget);
                }
                ids
            };
            let f_gen = clip(strip_specials(&gen));
            if f_gen.is_empty() {
                continue;
            }
            triples.push(PreferenceTriple {
                f_vul_ids: clip(tok.encode(&record.input)),
                f_rep_ids: clip(tok.encode(&record.output)),
                f_gen_ids: f_gen,
            });
        }
        let mut rm = RewardModel::new(PolicyBackbone::new(sft_model.clone()));
        let report = crate::reward::train_reward_model(
            &mut rm,
            &triples,
            &RewardTrainConfig {
                seed: cfg.seed,
                ..Default::default()
            },
        )?;
        eprintln!(
            "reward model pairwise accuracy: {:?}",
            report.accuracy_per_epoch.last()
        );

        // persist as a policy checkpoint with the trained head attached
        let mut with_head = sft_model.clone().with_reward_head();
        with_head.params.reward_w = Some(rm.head_w.clone());
        with_head.params.reward_b = Some(vec![rm.head_b]);
        let path = sink.path_for("checkpoints/reward.ckpt")?;
        save_checkpoint(&with_head, &path)?;
        Ok(rm)
    })
}

/// PPO fine-tuning of the policy against the configured reward.
pub fn stage_train_rl(
    cfg: &RunConfig,
    sft_model: &PolicyModel,
    train_records: &[InstructionRecord],
    reward_model: Option<&RewardModel<PolicyBackbone>>,
    sink: &mut ArtifactSink,
) -> Result<(PolicyModel, RlReport)> {
    stage("train-rl", || {
        let tok = Tokenizer;
        let reserve = repair_prompt_reserve(cfg);
        let mut prompts = Vec::new();
        let mut references: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
        for record in train_records.iter().filter(|r| r.task == Task::Repair) {
            let prompt = build_prompt(record, &tok, cfg.model.context_len, reserve);
            references.insert(prompt.clone(), tok.encode(&record.output));
            prompts.push(prompt);
        }
        if prompts.is_empty() {
            return Err(anyhow!("no repair records in the train split"));
        }

        let provider = PolicyEmbeddingProvider::new(sft_model.clone());
        let form = cfg.reward_form;
        let (ws, wr) = (cfg.reward_ws, cfg.reward_wr);
        let context_len = cfg.model.context_len;
        let mut reward_fn = |prompt: &[u32], gen: &[u32]| -> f64 {
            let reference = references.get(prompt).cloned().unwrap_or_default();
            let candidate = strip_specials(gen);
            let semantic = if candidate.is_empty() || reference.is_empty() {
                0.0
            } else {
                // clip to the provider context
                let c: Vec<u32> = candidate.iter().copied().take(context_len).collect();
                let r: Vec<u32> = reference.iter().copied().take(context_len).collect();
                semantic_reward(&c, &r, &provider)
                    .map(|s| s.aggregate(form))
                    .unwrap_or(0.0)
            };
            let rm_score = match (wr != 0.0, reward_model) {
                (true, Some(rm)) => {
                    let budget = context_len / 2 - 2;
                    let vul: Vec<u32> = prompt.iter().copied().filter(|&t| t < 256).take(budget).collect();
                    let cand: Vec<u32> = candidate.iter().copied().take(budget).collect();
                    if vul.is_empty() || cand.is_empty() {
                        0.0
                    } else {
                        rm.score(&vul, &cand).unwrap_or(0.0)
                    }
                }
                _ => 0.0,
            };
            combined_reward(semantic, rm_score, ws, wr)
        };

        let mut policy = sft_model.clone();
        let rl_decode = DecodeConfig {
            temperature: 1.0,
            top_p: 1.0,
            beam_size: 1,
            max_new_tokens: reserve,
        };
        let report = rlloop::train_rl(
            &mut policy,
            sft_model,
            &prompts,
            &mut reward_fn,
            &cfg.ppo,
            &rl_decode,
            cfg.seed,
        )?;

        let path = sink.path_for("checkpoints/rl.ckpt")?;
        save_checkpoint(&policy, &path)?;
        sink.write("logs/reward_curve.csv", rlloop::curve_to_csv(&report).as_bytes())?;
        Ok((policy, report))
    })
}

/// Evaluate a checkpoint on the test-split records, writing reports, the
/// aligned tables, and the compile tally.
pub fn stage_evaluate(
    cfg: &RunConfig,
    model: &PolicyModel,
    test_records: &[InstructionRecord],
    model_name: &str,
    sink: &mut ArtifactSink,
) -> Result<(MetricReport, MetricReport, MetricReport, CompileTally)> {
    stage("evaluate", || {
        let tok = Tokenizer;
        let provider = PolicyEmbeddingProvider::new(model.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

        // identification: greedy decode, exact YES/NO matching
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        for record in test_records.iter().filter(|r| r.task == Task::Identify) {
            let prompt = build_prompt(record, &tok, cfg.model.context_len, 6);
            let gen = generate(model, &prompt, &DecodeConfig::greedy(6), &mut rng)?;
            predictions.push(tok.decode(&gen).trim().to_string());
            labels.push(YesNo::parse(&record.output).expect("identify labels are YES/NO"));
        }
        let classification = if labels.is_empty() {
            None
        } else {
            Some(classification_metrics(&predictions, &labels)?)
        };
        let identify_report = MetricReport::new(Task::Identify, Vec::new(), classification);

        // generation tasks
        let mut score_generation = |task: Task| -> Result<(MetricReport, Vec<String>)> {
            let mut samples = Vec::new();
            let mut outputs = Vec::new();
            for record in test_records.iter().filter(|r| r.task == task) {
                let reserve = cfg.decode.max_new_tokens;
                let prompt = build_prompt(record, &tok, cfg.model.context_len, reserve);
                let gen = generate(model, &prompt, &cfg.decode, &mut rng)?;
                let text = tok.decode(&gen);
                let cand_tokens = evalsuite::tokenize_for_metrics(&text);
                let ref_tokens = evalsuite::tokenize_for_metrics(&record.output);
                let gen_ids = strip_specials(&gen);
                let ref_ids = tok.encode(&record.output);
                let degenerate = cand_tokens.is_empty()
                    || ref_tokens.is_empty()
                    || gen_ids.is_empty()
                    || ref_ids.is_empty();
                let (bleu, rouge, cosine, greedy) = if degenerate {
                    (0.0, 0.0, 0.0, 0.0)
                } else {
                    let clip = cfg.model.context_len;
                    let g: Vec<u32> = gen_ids.iter().copied().take(clip).collect();
                    let r: Vec<u32> = ref_ids.iter().copied().take(clip).collect();
                    (
                        evalsuite::bleu(&cand_tokens, &ref_tokens, 4, true)?,
                        evalsuite::rouge_l(&cand_tokens, &ref_tokens, 1.0)?.f,
                        evalsuite::cosine_similarity(&text, &record.output, &provider)
                            .unwrap_or(0.0),
                        semantic_reward(&g, &r, &provider).map(|s| s.f1).unwrap_or(0.0),
                    )
                };
                samples.push(SampleScore {
                    id: record.id.clone(),
                    bleu,
                    rouge_l: rouge,
                    cosine,
                    greedy_f1: greedy,
                    exact_match: if evalsuite::exact_match(&text, &record.output) {
                        1.0
                    } else {
                        0.0
                    },
                });
                outputs.push(text);
            }
            Ok((MetricReport::new(task, samples, None), outputs))
        };
        let (repair_report, repair_outputs) = score_generation(Task::Repair)?;
        let (describe_report, _) = score_generation(Task::Describe)?;

        // compile tally over the generated repairs; C++ grammar covers both
        // fixture dialects
        let sources: Vec<(String, crate::corpus::LanguageTag)> = repair_outputs
            .into_iter()
            .map(|text| (text, crate::corpus::LanguageTag::Cpp))
            .collect();
        let tally = evalsuite::compile_tally(
            &sources,
            cfg.checker_mode,
            cfg.compiler_cmd.as_deref(),
        );

        sink.write("eval/report_identify.json", identify_report.to_json().as_bytes())?;
        sink.write("eval/report_repair.json", repair_report.to_json().as_bytes())?;
        sink.write("eval/report_describe.json", describe_report.to_json().as_bytes())?;

        let mut tables = String::new();
        if let Some(m) = &identify_report.classification {
            tables.push_str(&render_identification_table(&[(model_name.to_string(), *m)]));
            tables.push('\n');
        }
        let row = |name: &str, r: &MetricReport| GenerationRow {
            model: name.to_string(),
            bleu: r.aggregates.get("bleu").copied().unwrap_or(0.0),
            rouge_l: r.aggregates.get("rouge_l").copied().unwrap_or(0.0),
            cosine: r.aggregates.get("cosine").copied().unwrap_or(0.0),
            greedy_f1: r.aggregates.get("greedy_f1").copied().unwrap_or(0.0),
            exact_match: r.aggregates.get("exact_match").copied().unwrap_or(0.0),
        };
        tables.push_str(&render_generation_table(&[
            row(&format!("{model_name}-repair"), &repair_report),
            row(&format!("{model_name}-describe"), &describe_report),
        ]));
        tables.push('\n');
        tables.push_str(&format!("compile tally: {}\n", tally.render()));
        sink.write("eval/tables.txt", tables.as_bytes())?;
        sink.write("eval/tally.txt", format!("{}\n", tally.render()).as_bytes())?;
        sink.write(
            "eval/tally.json",
            serde_json::to_string_pretty(&tally)?.as_bytes(),
        )?;

        Ok((identify_report, repair_report, describe_report, tally))
    })
}

/// The full pipeline on one config. Every stage failure carries the stage
/// name; partially written artifacts stay on disk.
pub fn end_to_end(cfg: &RunConfig) -> Result<EndToEndArtifacts> {
    let mut sink = ArtifactSink::new(&cfg.out_dir);

    let corpus = stage_ingest(cfg)?;
    let corpus = stage_obfuscate(cfg, corpus)?;
    let (records, split) = stage_build_dataset(cfg, &corpus, &mut sink)?;
    let train_records = records_for(&records, &split.train);
    let test_records = records_for(&records, &split.test);

    let (sft_model, _) = stage_train_sft(cfg, &train_records, &mut sink)?;

    let want_reward_model = cfg.train_reward_model || cfg.reward_wr > 0.0;
    let reward_model = if want_reward_model {
        Some(stage_train_reward(cfg, &sft_model, &train_records, &mut sink)?)
    } else {
        None
    };

    let (rl_model, rl_report) = stage_train_rl(
        cfg,
        &sft_model,
        &train_records,
        reward_model.as_ref(),
        &mut sink,
    )?;

    let (identify_report, repair_report, describe_report, tally) =
        stage_evaluate(cfg, &rl_model, &test_records, "tinylm-rl", &mut sink)?;

    let manifest = sink.manifest(cfg.hash(), cfg.seed)?;
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(cfg.out_dir.join("manifest.json"), manifest_json)?;

    Ok(EndToEndArtifacts {
        out_dir: cfg.out_dir.clone(),
        manifest,
        identify_report,
        repair_report,
        describe_report,
        tally,
        rl_report,
    })
}

/// Load a checkpoint path, defaulting to the RL then the SFT checkpoint of
/// the configured output directory.
pub fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PolicyModel> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let rl = cfg.out_dir.join("checkpoints/rl.ckpt");
            if rl.is_file() {
                rl
            } else {
                cfg.out_dir.join("checkpoints/sft.ckpt")
            }
        }
    };
    Ok(load_checkpoint(&path)?)
}
