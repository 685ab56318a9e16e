//! Metric reports: per-sample scores with aggregate means, plus the aligned
//! text tables and `n/N` tallies used by the CLI output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ClassificationMetrics;
use crate::instructions::Task;

/// Scores of one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub cosine: f64,
    pub greedy_f1: f64,
    pub exact_match: f64,
}

/// Per-task evaluation report. Aggregates are means of the per-sample
/// scores, computed at construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub samples: Vec<SampleScore>,
    pub aggregates: BTreeMap<String, f64>,
    pub classification: Option<ClassificationMetrics>,
}

impl MetricReport {
    pub fn new(
        task: Task,
        samples: Vec<SampleScore>,
        classification: Option<ClassificationMetrics>,
    ) -> Self {
        let mut aggregates = BTreeMap::new();
        let n = samples.len() as f64;
        if n > 0.0 {
            let mean = |f: fn(&SampleScore) -> f64| samples.iter().map(f).sum::<f64>() / n;
            aggregates.insert("bleu".into(), mean(|s| s.bleu));
            aggregates.insert("rouge_l".into(), mean(|s| s.rouge_l));
            aggregates.insert("cosine".into(), mean(|s| s.cosine));
            aggregates.insert("greedy_f1".into(), mean(|s| s.greedy_f1));
            aggregates.insert("exact_match".into(), mean(|s| s.exact_match));
        }
        Self {
            task,
            samples,
            aggregates,
            classification,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One row of the generation-metrics table.
#[derive(Debug, Clone)]
pub struct GenerationRow {
    pub model: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub cosine: f64,
    pub greedy_f1: f64,
    pub exact_match: f64,
}

/// Identification table with the published column set:
/// Acc, Pre, Rec, F1, Acc(Vul.), Acc(Ben).
pub fn render_identification_table(rows: &[(String, ClassificationMetrics)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16}{:>6}{:>7}{:>7}{:>7}{:>11}{:>10}\n",
        "Model", "Acc", "Pre", "Rec", "F1", "Acc(Vul.)", "Acc(Ben)"
    ));
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<16}{:>6.2}{:>7.2}{:>7.2}{:>7.2}{:>11.2}{:>10.2}\n",
            name, m.accuracy, m.precision, m.recall, m.f1, m.acc_vul, m.acc_ben
        ));
    }
    out
}

/// Generation table with BLEU / Rouge-L / Cosine / GreedyF1 / Exact columns.
pub fn render_generation_table(rows: &[GenerationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16}{:>7}{:>9}{:>9}{:>10}{:>7}\n",
        "Model", "BLEU", "Rouge-L", "Cosine", "GreedyF1", "Exact"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<16}{:>7.2}{:>9.2}{:>9.2}{:>10.2}{:>7.2}\n",
            r.model, r.bleu, r.rouge_l, r.cosine, r.greedy_f1, r.exact_match
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(i: usize, v: f64) -> SampleScore {
        SampleScore {
            id: format!("s{i}"),
            bleu: v,
            rouge_l: v / 2.0,
            cosine: v - 0.5,
            greedy_f1: v / 3.0,
            exact_match: if v > 0.5 { 1.0 } else { 0.0 },
        }
    }

    #[test]
    fn aggregates_are_means() {
        let samples = vec![sample(0, 0.2), sample(1, 0.8)];
        let report = MetricReport::new(Task::Repair, samples, None);
        assert!((report.aggregates["bleu"] - 0.5).abs() < 1e-9);
        assert!((report.aggregates["rouge_l"] - 0.25).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn aggregates_match_means_on_random_samples(values in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let samples: Vec<SampleScore> =
                values.iter().enumerate().map(|(i, &v)| sample(i, v)).collect();
            let report = MetricReport::new(Task::Describe, samples.clone(), None);
            for (key, f) in [
                ("bleu", (|s: &SampleScore| s.bleu) as fn(&SampleScore) -> f64),
                ("rouge_l", |s| s.rouge_l),
                ("cosine", |s| s.cosine),
                ("greedy_f1", |s| s.greedy_f1),
                ("exact_match", |s| s.exact_match),
            ] {
                let mean = samples.iter().map(f).sum::<f64>() / samples.len() as f64;
                prop_assert!((report.aggregates[key] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn report_round_trips_as_json() {
        let report = MetricReport::new(Task::Repair, vec![sample(0, 0.4)], None);
        let json = report.to_json();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.samples, report.samples);
    }

    #[test]
    fn identification_table_layout() {
        let m = ClassificationMetrics {
            accuracy: 0.75,
            precision: 1.0,
            recall: 0.5,
            f1: 2.0 / 3.0,
            acc_vul: 0.5,
            acc_ben: 1.0,
            tp: 1,
            fp: 0,
            tn: 2,
            fn_: 1,
        };
        let table = render_identification_table(&[("tinylm-sft".into(), m)]);
        let mut lines = table.lines();
        let header = lines.next().unwrap();
        for col in ["Model", "Acc", "Pre", "Rec", "F1", "Acc(Vul.)", "Acc(Ben)"] {
            assert!(header.contains(col), "missing column {col}");
        }
        let row = lines.next().unwrap();
        assert!(row.starts_with("tinylm-sft"));
        assert!(row.contains("0.75"));
        assert!(row.contains("0.67"));
    }
}
