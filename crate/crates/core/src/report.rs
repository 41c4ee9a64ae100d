//! Export of metrics series and comparison of several runs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{read_metrics, MetricsRecord, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Jsonl,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!("unknown format {other:?} (expected csv or jsonl)"))),
        }
    }
}

/// One row of the exported series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub iteration: u64,
    pub stage: Stage,
    pub pool_size: usize,
    pub mean_reward: Option<f64>,
    pub retained_fraction: Option<f64>,
    pub loss: Option<f64>,
    pub mean_kl: Option<f64>,
    pub correction_rate: Option<f64>,
    pub mean_mask_size: Option<f64>,
    pub eval_greedy: Option<f64>,
    pub eval_avg_at_k: Option<f64>,
}

impl From<&MetricsRecord> for SeriesRow {
    fn from(r: &MetricsRecord) -> Self {
        SeriesRow {
            iteration: r.iteration,
            stage: r.stage,
            pool_size: r.pool_size,
            mean_reward: r.mean_reward,
            retained_fraction: r.retained_fraction,
            loss: r.loss,
            mean_kl: r.mean_kl,
            correction_rate: r.correction_rate,
            mean_mask_size: r.mean_mask_size,
            eval_greedy: r.eval_greedy,
            eval_avg_at_k: r.eval_avg_at_k,
        }
    }
}

/// Writes one row per metrics record. Returns the number of data rows.
pub fn export<W: Write>(records: &[MetricsRecord], format: Format, out: W) -> Result<usize> {
    let rows: Vec<SeriesRow> = records.iter().map(SeriesRow::from).collect();
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record([
                "iteration",
                "stage",
                "pool_size",
                "mean_reward",
                "retained_fraction",
                "loss",
                "mean_kl",
                "correction_rate",
                "mean_mask_size",
                "eval_greedy",
                "eval_avg_at_k",
            ])
            .map_err(csv_err)?;
            for r in &rows {
                w.serialize(r).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            let mut out = out;
            for r in &rows {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(rows.len())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Summary of one run for the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub iterations: u64,
    pub evals: usize,
    pub final_avg_at_k: Option<f64>,
    pub mean_avg_at_k: Option<f64>,
    pub final_greedy: Option<f64>,
}

pub fn summarize(label: &str, records: &[MetricsRecord]) -> RunSummary {
    let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.stage == Stage::Eval).collect();
    let avg: Vec<f64> = evals.iter().filter_map(|r| r.eval_avg_at_k).collect();
    RunSummary {
        label: label.to_string(),
        iterations: records.iter().map(|r| r.iteration).max().unwrap_or(0),
        evals: evals.len(),
        final_avg_at_k: avg.last().copied(),
        mean_avg_at_k: (!avg.is_empty()).then(|| avg.iter().sum::<f64>() / avg.len() as f64),
        final_greedy: evals.last().and_then(|r| r.eval_greedy),
    }
}

/// Loads each `(label, metrics file)` pair. Empty files produce a warning
/// and an empty summary rather than an error.
pub fn load_summaries(inputs: &[(String, &Path)]) -> Result<(Vec<RunSummary>, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut out = Vec::new();
    for (label, path) in inputs {
        let records = read_metrics(path)?;
        if records.is_empty() {
            warnings.push(format!("{} has no metrics records", path.display()));
        }
        out.push(summarize(label, &records));
    }
    Ok((out, warnings))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x))
}

/// Markdown table with one row per run.
pub fn comparison_table(runs: &[RunSummary]) -> String {
    let mut s = String::from("| run | iterations | evals | final avg@k | mean avg@k | final greedy |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in runs {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.label,
            r.iterations,
            r.evals,
            cell(r.final_avg_at_k),
            cell(r.mean_avg_at_k),
            cell(r.final_greedy)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        let mut a = MetricsRecord::new(1, Stage::Grpo, 3);
        a.loss = Some(-0.25);
        a.mean_reward = Some(0.5);
        let mut e = MetricsRecord::new(1, Stage::Eval, 3);
        e.eval_avg_at_k = Some(0.25);
        e.eval_greedy = Some(0.5);
        let mut e2 = MetricsRecord::new(2, Stage::Eval, 4);
        e2.eval_avg_at_k = Some(0.75);
        vec![a, e, e2]
    }

    #[test]
    fn csv_has_header_plus_rows() {
        let mut buf = Vec::new();
        assert_eq!(export(&sample(), Format::Csv, &mut buf).unwrap(), 3);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("iteration,stage,pool_size"));
        assert_eq!(lines[1], "1,grpo,3,0.5,,-0.25,,,,,");
    }

    #[test]
    fn jsonl_has_one_line_per_row() {
        let mut buf = Vec::new();
        export(&sample(), Format::Jsonl, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn summary_and_table() {
        let s = summarize("scrpo", &sample());
        assert_eq!(s.evals, 2);
        assert_eq!(s.final_avg_at_k, Some(0.75));
        assert_eq!(s.mean_avg_at_k, Some(0.5));
        let empty = summarize("none", &[]);
        let table = comparison_table(&[s, empty]);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("| scrpo | 2 | 2 | 0.7500 | 0.5000 | - |"));
        assert!(table.contains("| none | 0 | 0 | - | - | - |"));
    }

    #[test]
    fn empty_file_warns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        let (runs, warnings) = load_summaries(&[("x".into(), p.as_path())]).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn malformed_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"iteration\":1,\"stage\":\"grpo\",\"pool_size\":0}\nnot json\n").unwrap();
        match load_summaries(&[("x".into(), p.as_path())]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
