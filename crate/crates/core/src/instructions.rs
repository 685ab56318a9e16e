//! Instruction-record assembly for the identify / describe / repair tasks.
//!
//! Records follow the `(instruction, input, output)` shape and serialize as
//! JSON lines. Seed instructions come from a tab-separated fixture (20 per
//! task); an optional chat-completion endpoint can multiply them, with a
//! deterministic offline fallback so the pipeline never needs a network.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, FunctionPair};

#[derive(Debug, Error)]
pub enum InstructionError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("seed file {path} line {line}: {reason}")]
    BadSeed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("seed file {path} has no {task} seeds")]
    MissingTask { path: String, task: Task },
    #[error("no {0} seeds available")]
    NoSeedForTask(Task),
    #[error("description must start with CWE-<digits>, got {0:?}")]
    BadDescriptionPrefix(String),
    #[error("record {id} failed validation: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("jsonl line {line}: {source}")]
    BadJsonl {
        line: usize,
        source: serde_json::Error,
    },
}

/// The three instruction-tuning tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Identify,
    Describe,
    Repair,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Identify, Task::Describe, Task::Repair];

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "identify" => Some(Task::Identify),
            "describe" => Some(Task::Describe),
            "repair" => Some(Task::Repair),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Identify => write!(f, "identify"),
            Task::Describe => write!(f, "describe"),
            Task::Repair => write!(f, "repair"),
        }
    }
}

/// Where a seed instruction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedOrigin {
    Handwritten,
    Augmented,
}

/// A natural-language instruction template for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInstruction {
    pub task: Task,
    pub text: String,
    pub origin: SeedOrigin,
}

/// One training/evaluation record: instruction, context input, expected
/// output. Serialized as JSONL with exactly these fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub task: Task,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub cwe: Option<String>,
    pub source_pair_id: String,
}

impl InstructionRecord {
    /// Check the task-specific output invariants.
    pub fn validate(&self) -> Result<(), InstructionError> {
        let fail = |reason: &str| {
            Err(InstructionError::InvalidRecord {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.instruction.is_empty() {
            return fail("empty instruction");
        }
        match self.task {
            Task::Identify => {
                if self.output != "YES" && self.output != "NO" {
                    return fail("identify output must be YES or NO");
                }
            }
            Task::Describe => {
                if !description_has_cwe_prefix(&self.output) {
                    return fail("describe output must start with CWE-<digits>");
                }
            }
            Task::Repair => {
                if self.output.is_empty() {
                    return fail("repair output must be non-empty");
                }
            }
        }
        Ok(())
    }
}

fn description_has_cwe_prefix(text: &str) -> bool {
    let Some(rest) = text.strip_prefix("CWE-") else {
        return false;
    };
    rest.chars().next().is_some_and(|c| c.is_ascii_digit())
}

/// Outcome of [`load_seeds`]: the seeds plus any duplicate-text warnings.
#[derive(Debug)]
pub struct LoadedSeeds {
    pub seeds: Vec<SeedInstruction>,
    pub duplicate_warnings: Vec<String>,
}

impl LoadedSeeds {
    pub fn for_task(&self, task: Task) -> Vec<&SeedInstruction> {
        self.seeds.iter().filter(|s| s.task == task).collect()
    }
}

/// Load tab-separated `task<TAB>text` seed instructions.
///
/// Every task needs at least one seed; unknown task tags are hard errors
/// with the line number. Duplicate seed texts are accepted and flagged.
pub fn load_seeds(path: &Path) -> Result<LoadedSeeds, InstructionError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| InstructionError::Io {
        path: display.clone(),
        source,
    })?;

    let mut seeds = Vec::new();
    let mut seen: BTreeMap<(Task, String), usize> = BTreeMap::new();
    let mut duplicate_warnings = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| InstructionError::BadSeed {
            path: display.clone(),
            line: line_no,
            reason,
        };
        let Some((tag, body)) = line.split_once('\t') else {
            return Err(bad("expected `task<TAB>text`".into()));
        };
        let Some(task) = Task::parse(tag.trim()) else {
            return Err(bad(format!("unknown task tag {:?}", tag.trim())));
        };
        let body = body.trim();
        if body.is_empty() {
            return Err(bad("empty seed text".into()));
        }
        match task {
            Task::Identify if !(body.contains("YES") && body.contains("NO")) => {
                return Err(bad("identify seeds must demand a YES/NO answer".into()));
            }
            Task::Describe if !body.contains("CWE-") => {
                return Err(bad("describe seeds must demand a CWE-XXX prefix".into()));
            }
            _ => {}
        }
        if let Some(first) = seen.get(&(task, body.to_string())) {
            let warning =
                format!("duplicate {task} seed at line {line_no} (first at line {first})");
            eprintln!("warning: {warning}");
            duplicate_warnings.push(warning);
        } else {
            seen.insert((task, body.to_string()), line_no);
        }
        seeds.push(SeedInstruction {
            task,
            text: body.to_string(),
            origin: SeedOrigin::Handwritten,
        });
    }

    for task in Task::ALL {
        if !seeds.iter().any(|s| s.task == task) {
            return Err(InstructionError::MissingTask {
                path: display,
                task,
            });
        }
    }

    Ok(LoadedSeeds {
        seeds,
        duplicate_warnings,
    })
}

fn pick_seed<'a, R: Rng>(
    seeds: &'a [SeedInstruction],
    task: Task,
    rng: &mut R,
) -> Result<&'a SeedInstruction, InstructionError> {
    let pool: Vec<&SeedInstruction> = seeds.iter().filter(|s| s.task == task).collect();
    pool.choose(rng)
        .copied()
        .ok_or(InstructionError::NoSeedForTask(task))
}

/// Build the two identification records for one pair: the vulnerable source
/// labeled `YES` and the repaired source labeled `NO`.
pub fn assemble_identification<R: Rng>(
    pair: &FunctionPair,
    seeds: &[SeedInstruction],
    rng: &mut R,
) -> Result<[InstructionRecord; 2], InstructionError> {
    let make =
        |suffix: &str, seed: &SeedInstruction, input: &str, output: &str| InstructionRecord {
            id: format!("{}:identify:{suffix}", pair.id),
            task: Task::Identify,
            instruction: seed.text.clone(),
            input: input.to_string(),
            output: output.to_string(),
            cwe: Some(pair.cwe.clone()),
            source_pair_id: pair.id.clone(),
        };
    let vuln_seed = pick_seed(seeds, Task::Identify, rng)?;
    let vuln = make("vuln", vuln_seed, &pair.vulnerable_source, "YES");
    let benign_seed = pick_seed(seeds, Task::Identify, rng)?;
    let benign = make("benign", benign_seed, &pair.repaired_source, "NO");
    Ok([vuln, benign])
}

/// Build the repair record for one pair: vulnerable source in, repaired
/// source out.
pub fn assemble_repair<R: Rng>(
    pair: &FunctionPair,
    seeds: &[SeedInstruction],
    rng: &mut R,
) -> Result<InstructionRecord, InstructionError> {
    let seed = pick_seed(seeds, Task::Repair, rng)?;
    Ok(InstructionRecord {
        id: format!("{}:repair", pair.id),
        task: Task::Repair,
        instruction: seed.text.clone(),
        input: pair.vulnerable_source.clone(),
        output: pair.repaired_source.clone(),
        cwe: Some(pair.cwe.clone()),
        source_pair_id: pair.id.clone(),
    })
}

/// Build the description record for one pair. `description_text` must start
/// with `CWE-<digits>`.
pub fn assemble_description<R: Rng>(
    pair: &FunctionPair,
    description_text: &str,
    seeds: &[SeedInstruction],
    rng: &mut R,
) -> Result<InstructionRecord, InstructionError> {
    if !description_has_cwe_prefix(description_text) {
        return Err(InstructionError::BadDescriptionPrefix(
            description_text.chars().take(32).collect(),
        ));
    }
    let seed = pick_seed(seeds, Task::Describe, rng)?;
    Ok(InstructionRecord {
        id: format!("{}:describe", pair.id),
        task: Task::Describe,
        instruction: seed.text.clone(),
        input: pair.vulnerable_source.clone(),
        output: description_text.to_string(),
        cwe: Some(pair.cwe.clone()),
        source_pair_id: pair.id.clone(),
    })
}

/// Assemble the full record set for a corpus: two identification records,
/// one repair record, and one description record per pair.
///
/// `describe` maps a pair to its description text (offline fallback or an
/// external service; see [`TextCompletionClient`]).
pub fn assemble_corpus<R: Rng>(
    corpus: &Corpus,
    seeds: &[SeedInstruction],
    describe: impl Fn(&FunctionPair) -> String,
    rng: &mut R,
) -> Result<Vec<InstructionRecord>, InstructionError> {
    let mut records = Vec::with_capacity(corpus.len() * 4);
    for pair in corpus.pairs() {
        let [vuln, benign] = assemble_identification(pair, seeds, rng)?;
        records.push(vuln);
        records.push(benign);
        records.push(assemble_repair(pair, seeds, rng)?);
        records.push(assemble_description(pair, &describe(pair), seeds, rng)?);
    }
    Ok(records)
}

/// Deterministic offline description for a pair: CWE prefix, the function
/// names involved, and the excised comment text.
pub fn offline_description(pair: &FunctionPair) -> String {
    let tree = crate::codeprep::parse(&pair.vulnerable_source, pair.language_tag);
    let names: Vec<String> = crate::codeprep::extract_identifiers(&tree)
        .into_iter()
        .collect();
    let comments = crate::codeprep::extract_comments(&pair.vulnerable_source, pair.language_tag);
    let mut text = format!("{} weakness", pair.cwe);
    if let Some(name) = names.first() {
        text.push_str(&format!(" in function {name}"));
    }
    text.push_str(": the vulnerable version must be rewritten as in the repaired version.");
    for comment in comments.texts() {
        let body = comment
            .trim_start_matches('/')
            .trim_start_matches('*')
            .trim_end_matches('/')
            .trim_end_matches('*')
            .trim();
        if !body.is_empty() {
            text.push_str(&format!(" Note: {body}."));
        }
    }
    text
}

/// Settings for the external text-completion service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// `http://host:port/path`; `None` selects the offline stub generator.
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_variants: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "gpt-4".into(),
            timeout: Duration::from_secs(10),
            max_variants: 20,
        }
    }
}

/// Client for seed augmentation and description generation. Falls back to
/// deterministic offline output whenever the endpoint is absent or
/// unreachable.
#[derive(Debug, Clone, Default)]
pub struct TextCompletionClient {
    pub cfg: AugmentationConfig,
}

impl TextCompletionClient {
    pub fn new(cfg: AugmentationConfig) -> Self {
        Self { cfg }
    }

    /// Produce up to `max_variants` paraphrases of `seed`, tagged
    /// `origin=augmented`.
    pub fn augment_seeds(&self, seed: &SeedInstruction) -> Vec<SeedInstruction> {
        let Some(endpoint) = &self.cfg.endpoint else {
            return self.offline_stubs(seed);
        };
        let prompt = variant_prompt(seed, self.cfg.max_variants);
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        match http_post_json(endpoint, &body, self.cfg.timeout) {
            Ok(payload) => self.parse_variants(seed, &payload),
            Err(HttpError::Unreachable(reason)) => {
                eprintln!(
                    "warning: augmentation endpoint unreachable ({reason}); using offline stubs"
                );
                self.offline_stubs(seed)
            }
            Err(HttpError::Timeout) => {
                eprintln!("warning: augmentation request timed out; 0 variants produced");
                Vec::new()
            }
            Err(HttpError::Malformed(reason)) => {
                eprintln!("warning: augmentation response malformed ({reason}); variants dropped");
                Vec::new()
            }
        }
    }

    /// Description text for a pair. The CWE prefix is enforced so the record
    /// validates regardless of what the endpoint returned.
    pub fn generate_description(&self, pair: &FunctionPair) -> String {
        let Some(endpoint) = &self.cfg.endpoint else {
            return offline_description(pair);
        };
        let stripped = crate::codeprep::strip_comments(&pair.vulnerable_source, pair.language_tag);
        let comments =
            crate::codeprep::extract_comments(&pair.vulnerable_source, pair.language_tag);
        let prompt = description_prompt(&pair.cwe, &stripped, &comments.texts());
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        match http_post_json(endpoint, &body, self.cfg.timeout) {
            Ok(payload) => match first_text_payload(&payload) {
                Some(text) if description_has_cwe_prefix(text.trim()) => text.trim().to_string(),
                Some(text) => format!("{} {}", pair.cwe, text.trim()),
                None => {
                    eprintln!("warning: description response malformed; using offline text");
                    offline_description(pair)
                }
            },
            Err(err) => {
                eprintln!("warning: description request failed ({err:?}); using offline text");
                offline_description(pair)
            }
        }
    }

    fn offline_stubs(&self, seed: &SeedInstruction) -> Vec<SeedInstruction> {
        (1..=self.cfg.max_variants)
            .map(|i| SeedInstruction {
                task: seed.task,
                text: format!("({} variant {i}) {}", seed.task, seed.text),
                origin: SeedOrigin::Augmented,
            })
            .collect()
    }

    fn parse_variants(&self, seed: &SeedInstruction, payload: &str) -> Vec<SeedInstruction> {
        let Some(content) = first_text_payload(payload) else {
            eprintln!("warning: augmentation response malformed; variants dropped");
            return Vec::new();
        };
        content
            .lines()
            .map(|line| {
                line.trim()
                    .trim_start_matches(|c: char| c.is_ascii_digit())
                    .trim_start_matches(['.', ')', '-'])
                    .trim()
            })
            .filter(|line| !line.is_empty())
            .take(self.cfg.max_variants)
            .map(|text| SeedInstruction {
                task: seed.task,
                text: text.to_string(),
                origin: SeedOrigin::Augmented,
            })
            .collect()
    }
}

fn variant_prompt(seed: &SeedInstruction, n: usize) -> String {
    let constraint = match seed.task {
        Task::Identify => "Each variant must force a bare YES/NO answer with no extra output.",
        Task::Describe => {
            "Each variant must force the answer to start with the CWE number in CWE-XXX form."
        }
        Task::Repair => "Each variant must force the answer to contain only the repaired code.",
    };
    format!(
        "You are a code security specialist. Write {n} rephrased variants of the \
         following {} instruction, one per line, with no numbering or commentary. {constraint}\n\
         Instruction: {}",
        seed.task, seed.text
    )
}

fn description_prompt(cwe: &str, stripped: &str, comments: &[&str]) -> String {
    format!(
        "You are a code security specialist. Using the code and the reviewer comments \
         below, write one clear description of the vulnerability. Start the answer with \
         \"{cwe}\" and add nothing before it.\nCode:\n{stripped}\nComments:\n{}",
        comments.join("\n")
    )
}

/// Pull the first text payload out of a chat-completion style response.
fn first_text_payload(payload: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(payload).ok()?;
    let choice = value.get("choices")?.get(0)?;
    let text = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))?;
    text.as_str().map(str::to_string)
}

#[derive(Debug)]
enum HttpError {
    Unreachable(String),
    Timeout,
    Malformed(String),
}

/// Minimal HTTP/1.1 POST for plain-http endpoints. One call site, no TLS.
fn http_post_json(
    url: &str,
    body: &serde_json::Value,
    timeout: Duration,
) -> Result<String, HttpError> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| HttpError::Malformed(format!("unsupported url {url:?}")))?;
    let (authority, path) = match rest.split_once('/') {
        Some((a, p)) => (a, format!("/{p}")),
        None => (rest, "/".to_string()),
    };
    let addr = if authority.contains(':') {
        authority.to_string()
    } else {
        format!("{authority}:80")
    };

    let mut stream =
        TcpStream::connect(&addr).map_err(|e| HttpError::Unreachable(e.to_string()))?;
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| HttpError::Unreachable(e.to_string()))?;
    stream
        .set_write_timeout(Some(timeout))
        .map_err(|e| HttpError::Unreachable(e.to_string()))?;

    let payload = body.to_string();
    let request = format!(
        "POST {path} HTTP/1.1\r\nHost: {authority}\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream
        .write_all(request.as_bytes())
        .map_err(|e| HttpError::Unreachable(e.to_string()))?;

    let mut response = Vec::new();
    match stream.read_to_end(&mut response) {
        Ok(_) => {}
        Err(e)
            if e.kind() == std::io::ErrorKind::WouldBlock
                || e.kind() == std::io::ErrorKind::TimedOut =>
        {
            return Err(HttpError::Timeout);
        }
        Err(e) => return Err(HttpError::Unreachable(e.to_string())),
    }
    if response.is_empty() {
        return Err(HttpError::Timeout);
    }

    let text = String::from_utf8_lossy(&response);
    let Some((head, body)) = text.split_once("\r\n\r\n") else {
        return Err(HttpError::Malformed("no header/body separator".into()));
    };
    let status = head.lines().next().unwrap_or_default();
    if !status.contains(" 200") {
        return Err(HttpError::Malformed(format!("status {status:?}")));
    }
    Ok(body.to_string())
}

/// Write records as JSON lines.
pub fn write_records_jsonl(
    path: &Path,
    records: &[InstructionRecord],
) -> Result<(), InstructionError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| InstructionError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read records from JSON lines.
pub fn read_records_jsonl(path: &Path) -> Result<Vec<InstructionRecord>, InstructionError> {
    let text = std::fs::read_to_string(path).map_err(|source| InstructionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|source| InstructionError::BadJsonl {
                line: idx + 1,
                source,
            })
        })
        .collect()
}
