//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pipeline::{self, ArtifactSink};
use super::{run_sweep, sweep_to_csv, RunConfig, SweepAxis};
use crate::corpus::{self, LanguageTag};
use crate::evalsuite::render_identification_table;
use crate::instructions::InstructionRecord;
use crate::tinylm::{generate, load_checkpoint, Tokenizer};

#[derive(Parser, Debug)]
#[command(
    name = "vulnrepair",
    about = "Vulnerability identify/describe/repair lab: dataset preparation, tiny-LM training, and evaluation",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest the corpus and print its CWE histogram.
    Ingest(CommonArgs),
    /// Obfuscate one source file.
    Obfuscate(ObfuscateArgs),
    /// Assemble the instruction dataset and split files.
    BuildDataset(CommonArgs),
    /// Supervised fine-tuning on the train split.
    TrainSft(CommonArgs),
    /// Train the pairwise reward model from an SFT checkpoint.
    TrainReward(TrainFromCheckpointArgs),
    /// PPO fine-tuning from an SFT checkpoint.
    TrainRl(TrainFromCheckpointArgs),
    /// Decode a prompt file with a checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Temperature or beam ablation sweep.
    Sweep(SweepArgs),
    /// Render the tables of a stored evaluation report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ObfuscateArgs {
    /// Source file to rewrite.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the obfuscated source (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "c")]
    lang: String,
    /// Also rename declarator identifiers (variables, parameters).
    #[arg(long)]
    rename_variables: bool,
}

#[derive(Args, Debug)]
struct TrainFromCheckpointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// SFT checkpoint to start from (defaults to the one under the output
    /// directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// File holding the raw prompt text (instruction + input).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_new: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// parse_only | external_compiler
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    compiler_cmd: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// temperature | beam
    #[arg(long)]
    axis: String,
    /// Comma-separated grid override (defaults to the published grid).
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// A report_identify.json produced by `evaluate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tinylm")]
    model_name: String,
}

/// Entry point used by `main` and the CLI tests.
pub fn cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    0
                }
                _ => {
                    eprint!("{err}");
                    1
                }
            };
        }
    };
    match dispatch(parsed.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Obfuscate(args) => cmd_obfuscate(args),
        Command::BuildDataset(args) => cmd_build_dataset(args),
        Command::TrainSft(args) => cmd_train_sft(args),
        Command::TrainReward(args) => cmd_train_reward(args),
        Command::TrainRl(args) => cmd_train_rl(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn prepared_dataset(
    cfg: &RunConfig,
    sink: &mut ArtifactSink,
) -> Result<(Vec<InstructionRecord>, Vec<InstructionRecord>, Vec<InstructionRecord>)> {
    let corpus = pipeline::stage_ingest(cfg)?;
    let corpus = pipeline::stage_obfuscate(cfg, corpus)?;
    let (records, split) = pipeline::stage_build_dataset(cfg, &corpus, sink)?;
    let pick = |ids: &[String]| -> Vec<InstructionRecord> {
        records
            .iter()
            .filter(|r| ids.contains(&r.source_pair_id))
            .cloned()
            .collect()
    };
    Ok((pick(&split.train), pick(&split.validation), pick(&split.test)))
}

fn cmd_ingest(args: CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    let outcome = corpus::ingest_pairs(&cfg.corpus_dir, &cfg.labels_file)?;
    println!("ingested {} pairs from {}", outcome.corpus.len(), cfg.corpus_dir.display());
    for (cwe, count) in corpus::cwe_histogram(&outcome.corpus) {
        println!("{cwe}\t{count}");
    }
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let summary: Vec<serde_json::Value> = outcome
        .corpus
        .pairs()
        .iter()
        .map(|p| {
            serde_json::json!({
                "id": p.id,
                "cwe": p.cwe,
                "language": p.language_tag.to_string(),
            })
        })
        .collect();
    sink.write(
        "corpus_summary.json",
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(())
}

fn cmd_obfuscate(args: ObfuscateArgs) -> Result<()> {
    let source = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let lang = match args.lang.as_str() {
        "c" => LanguageTag::C,
        "cpp" => LanguageTag::Cpp,
        other => return Err(anyhow!("unknown language {other:?} (expected c|cpp)")),
    };
    let (rewritten, map) =
        crate::codeprep::obfuscate(&source, lang, args.seed, args.rename_variables)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &rewritten)?;
            println!("{}", serde_json::to_string_pretty(&map.entries())?);
        }
        None => print!("{rewritten}"),
    }
    Ok(())
}

fn cmd_build_dataset(args: CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let (train, validation, test) = prepared_dataset(&cfg, &mut sink)?;
    println!(
        "dataset written to {}: {} train / {} validation / {} test records",
        cfg.out_dir.display(),
        train.len(),
        validation.len(),
        test.len()
    );
    Ok(())
}

fn cmd_train_sft(args: CommonArgs) -> Result<()> {
    let cfg = args.load()?;
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let (train, _, _) = prepared_dataset(&cfg, &mut sink)?;
    let (_, report) = pipeline::stage_train_sft(&cfg, &train, &mut sink)?;
    if let Some(last) = report.loss_curve.last() {
        println!("final train loss: {:.4} nats/token", last.loss);
    }
    println!("checkpoint: {}", cfg.out_dir.join("checkpoints/sft.ckpt").display());
    Ok(())
}

fn cmd_train_reward(args: TrainFromCheckpointArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let (train, _, _) = prepared_dataset(&cfg, &mut sink)?;
    let sft = load_sft(&cfg, args.checkpoint.as_deref())?;
    pipeline::stage_train_reward(&cfg, &sft, &train, &mut sink)?;
    println!("checkpoint: {}", cfg.out_dir.join("checkpoints/reward.ckpt").display());
    Ok(())
}

fn cmd_train_rl(args: TrainFromCheckpointArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let (train, _, _) = prepared_dataset(&cfg, &mut sink)?;
    let sft = load_sft(&cfg, args.checkpoint.as_deref())?;
    let reward_model = if cfg.train_reward_model || cfg.reward_wr > 0.0 {
        Some(pipeline::stage_train_reward(&cfg, &sft, &train, &mut sink)?)
    } else {
        None
    };
    let (_, report) =
        pipeline::stage_train_rl(&cfg, &sft, &train, reward_model.as_ref(), &mut sink)?;
    if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
        println!(
            "mean reward: {:.4} -> {:.4} over {} iterations",
            first.mean_reward,
            last.mean_reward,
            report.curve.len()
        );
    }
    println!("checkpoint: {}", cfg.out_dir.join("checkpoints/rl.ckpt").display());
    Ok(())
}

fn load_sft(cfg: &RunConfig, explicit: Option<&std::path::Path>) -> Result<crate::tinylm::PolicyModel> {
    let path = explicit
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| cfg.out_dir.join("checkpoints/sft.ckpt"));
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let model = pipeline::resolve_checkpoint(&cfg, args.checkpoint.as_deref())?;
    let mut decode = cfg.decode.clone();
    if let Some(t) = args.temperature {
        decode.temperature = t;
    }
    if let Some(p) = args.top_p {
        decode.top_p = p;
    }
    if let Some(b) = args.beam {
        decode.beam_size = b;
    }
    if let Some(m) = args.max_new {
        decode.max_new_tokens = m;
    }
    let prompt_text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let tok = Tokenizer;
    let mut ids = vec![crate::tinylm::BOS];
    let mut encoded = tok.encode(&prompt_text);
    let budget = model
        .config
        .context_len
        .saturating_sub(decode.max_new_tokens + 2)
        .max(1);
    if encoded.len() > budget {
        encoded.drain(..encoded.len() - budget);
    }
    ids.extend(encoded);
    ids.push(crate::tinylm::SEP);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen = generate(&model, &ids, &decode, &mut rng)?;
    println!("{}", tok.decode(&gen));
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(mode) = &args.mode {
        cfg.apply("eval.mode", mode)?;
    }
    if let Some(cmd) = &args.compiler_cmd {
        cfg.apply("eval.compiler_cmd", cmd)?;
    }
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let (_, _, test) = prepared_dataset(&cfg, &mut sink)?;
    let model = pipeline::resolve_checkpoint(&cfg, args.checkpoint.as_deref())?;
    let (identify, repair, describe, tally) =
        pipeline::stage_evaluate(&cfg, &model, &test, "tinylm", &mut sink)?;
    if let Some(m) = &identify.classification {
        print!("{}", render_identification_table(&[("tinylm".to_string(), *m)]));
    }
    println!(
        "repair: bleu {:.3} rouge_l {:.3}; describe: bleu {:.3} rouge_l {:.3}",
        repair.aggregates.get("bleu").unwrap_or(&0.0),
        repair.aggregates.get("rouge_l").unwrap_or(&0.0),
        describe.aggregates.get("bleu").unwrap_or(&0.0),
        describe.aggregates.get("rouge_l").unwrap_or(&0.0),
    );
    println!("compile tally: {}", tally.render());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let axis = SweepAxis::parse(&args.axis)
        .ok_or_else(|| anyhow!("unknown sweep axis {:?} (expected temperature|beam)", args.axis))?;
    let grid = match &args.grid {
        Some(spec) => spec
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("bad grid value {v:?}: {e}")))
            .collect::<Result<Vec<f64>>>()?,
        None => axis.default_grid(),
    };
    let mut sink = ArtifactSink::new(&cfg.out_dir);
    let (_, _, test) = prepared_dataset(&cfg, &mut sink)?;
    let model = pipeline::resolve_checkpoint(&cfg, args.checkpoint.as_deref())?;
    let eval_records: Vec<InstructionRecord> = test
        .into_iter()
        .filter(|r| r.task == crate::instructions::Task::Repair)
        .collect();
    let result = run_sweep(axis, &grid, &model, &eval_records, &cfg.decode, cfg.seed)?;
    let csv = sweep_to_csv(&result);
    sink.write(&format!("sweeps/{axis}.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let report: crate::evalsuite::MetricReport = serde_json::from_str(&text)?;
    if let Some(m) = &report.classification {
        print!("{}", render_identification_table(&[(args.model_name.clone(), *m)]));
    }
    if !report.aggregates.is_empty() {
        let row = crate::evalsuite::GenerationRow {
            model: args.model_name,
            bleu: report.aggregates.get("bleu").copied().unwrap_or(0.0),
            rouge_l: report.aggregates.get("rouge_l").copied().unwrap_or(0.0),
            cosine: report.aggregates.get("cosine").copied().unwrap_or(0.0),
            greedy_f1: report.aggregates.get("greedy_f1").copied().unwrap_or(0.0),
            exact_match: report.aggregates.get("exact_match").copied().unwrap_or(0.0),
        };
        print!("{}", crate::evalsuite::render_generation_table(&[row]));
    }
    Ok(())
}
