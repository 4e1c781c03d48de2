use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Setting;
use crate::classifier::MetricsReport;
use crate::error::{Error, IoContext, Result};

pub const EVAL_CSV_HEADER: &str = "setting,generator,seed,accuracy,precision,recall,f1,roc_auc,wall_time_s";

/// One scored cell of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub generator: String,
    pub setting: Setting,
    pub repeat: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub generator: String,
    pub setting: Setting,
    pub repeat: usize,
    pub error: String,
}

/// Mean of the repeats of one (generator, setting) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub generator: String,
    pub setting: Setting,
    pub repeats: usize,
    pub mean: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_repeats: usize,
    pub rows: Vec<EvalRow>,
    pub failures: Vec<CellFailure>,
}

pub(crate) fn mean_of(ms: &[MetricsReport]) -> MetricsReport {
    let n = ms.len().max(1) as f64;
    let sum = |f: fn(&MetricsReport) -> f64| ms.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        accuracy: sum(|m| m.accuracy),
        precision: sum(|m| m.precision),
        recall: sum(|m| m.recall),
        f1: sum(|m| m.f1),
        roc_auc: sum(|m| m.roc_auc),
        wall_time_s: sum(|m| m.wall_time_s),
    }
}

impl EvalReport {
    pub fn new(n_repeats: usize) -> Self {
        Self {
            n_repeats,
            ..Self::default()
        }
    }

    /// Any cell failed.
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Orders rows and failures by (generator, setting, repeat).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| (&a.generator, a.setting, a.repeat).cmp(&(&b.generator, b.setting, b.repeat)));
        self.failures
            .sort_by(|a, b| (&a.generator, a.setting, a.repeat).cmp(&(&b.generator, b.setting, b.repeat)));
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(String, Setting), Vec<MetricsReport>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.generator.clone(), r.setting)).or_default().push(r.metrics);
        }
        groups
            .into_iter()
            .map(|((generator, setting), ms)| AggregateRow {
                generator,
                setting,
                repeats: ms.len(),
                mean: mean_of(&ms),
            })
            .collect()
    }

    pub fn aggregate(&self, generator: &str, setting: Setting) -> Option<MetricsReport> {
        self.aggregates()
            .into_iter()
            .find(|a| a.generator == generator && a.setting == setting)
            .map(|a| a.mean)
    }

    /// Per-cell CSV. With `timing` false the wall-time column is written as
    /// 0 so that reruns compare byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&csv_line(r.setting, &r.generator, &r.seed.to_string(), &r.metrics, timing));
        }
        out
    }

    /// Aggregate CSV; the seed column holds the repeat count as `n=<k>`.
    pub fn aggregates_csv(&self, timing: bool) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        for a in self.aggregates() {
            out.push_str(&csv_line(a.setting, &a.generator, &format!("n={}", a.repeats), &a.mean, timing));
        }
        out
    }

    /// Parses a per-cell CSV written by [`EvalReport::to_csv`]. Repeats are
    /// numbered in order of appearance within each (generator, setting).
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == EVAL_CSV_HEADER => {}
            _ => return Err(parse_err(1, format!("expected header `{EVAL_CSV_HEADER}`"))),
        }
        let mut report = Self::default();
        let mut counts: BTreeMap<(String, Setting), usize> = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(parse_err(i + 1, format!("expected 9 fields, found {}", f.len())));
            }
            let setting: Setting = f[0].parse().map_err(|e: Error| parse_err(i + 1, e.to_string()))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| parse_err(i + 1, format!("not a number: {s:?}")));
            let seed = f[2].trim().parse::<u64>().map_err(|_| parse_err(i + 1, format!("bad seed {:?}", f[2])))?;
            let key = (f[1].to_string(), setting);
            let repeat = *counts.get(&key).unwrap_or(&0);
            counts.insert(key, repeat + 1);
            report.rows.push(EvalRow {
                generator: f[1].to_string(),
                setting,
                repeat,
                seed,
                train_size: 0,
                test_size: 0,
                metrics: MetricsReport {
                    accuracy: num(f[3])?,
                    precision: num(f[4])?,
                    recall: num(f[5])?,
                    f1: num(f[6])?,
                    roc_auc: num(f[7])?,
                    wall_time_s: num(f[8])?,
                },
            });
        }
        report.n_repeats = counts.values().copied().max().unwrap_or(0);
        Ok(report)
    }
}

fn csv_line(setting: Setting, generator: &str, seed: &str, m: &MetricsReport, timing: bool) -> String {
    let wall = if timing { m.wall_time_s } else { 0.0 };
    format!(
        "{setting},{generator},{seed},{},{},{},{},{},{wall}\n",
        m.accuracy, m.precision, m.recall, m.f1, m.roc_auc
    )
}

/// Aligned text table of the aggregate metrics, one row per (setting,
/// generator), headed by `title`.
pub fn render_tables(title: &str, report: &EvalReport) -> String {
    let header = ["Setting", "Generator", "Accuracy", "Precision", "Recall", "f1-score", "ROC AUC", "Time (s)"];
    let mut aggs = report.aggregates();
    aggs.sort_by(|a, b| (a.setting, &a.generator).cmp(&(b.setting, &b.generator)));
    let body: Vec<Vec<String>> = aggs
        .iter()
        .map(|a| {
            let mut row = vec![a.setting.to_string(), a.generator.clone()];
            row.extend(a.mean.values().iter().map(|v| format!("{v:.4}")));
            row.push(format!("{:.1}", a.mean.wall_time_s));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = format!("{title}\n");
    out.push_str(&fmt_row(header.to_vec()));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &body {
        out.push_str(&fmt_row(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    if report.partial() {
        out.push_str(&format!("({} cells failed)\n", report.failures.len()));
    }
    out
}

/// What a command ran with and what it produced, enough to rerun it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub dataset: String,
    pub seed: u64,
    /// Resolved configuration echo.
    pub config: serde_json::Value,
    pub config_sha256: String,
    /// Checkpoint name → SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    /// Output file → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: BTreeMap<String, f64>,
    pub partial: bool,
    pub failures: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, dataset: &str, seed: u64, config: serde_json::Value) -> Self {
        let text = serde_json::to_string(&config).expect("serializable");
        Self {
            command: command.to_string(),
            dataset: dataset.to_string(),
            seed,
            config_sha256: crate::nn::checkpoint_hash(text.as_bytes()),
            config,
            ..Self::default()
        }
    }

    /// Writes `name` under `dir` and records its hash.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).io_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), crate::nn::checkpoint_hash(bytes));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(&path, text + "\n").io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).io_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }
}
