use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{RealSplits, SynthSource};
use crate::classifier::{evaluate, fine_tune_head, train_classifier, Classifier, ClassifierConfig, MetricsReport};
use crate::error::{Error, Result};
use crate::record::stratified_subsample;
use crate::rng;

/// Fractions of real training data added by fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub fractions: Vec<f64>,
    pub n_repeats: usize,
    /// Fine-tune learning rate as a multiple of the base rate.
    pub lr_factor: f64,
}

impl Default for TransferPlan {
    fn default() -> Self {
        Self {
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            n_repeats: 3,
            lr_factor: 0.1,
        }
    }
}

impl TransferPlan {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.fractions.is_empty() {
            bad.push("fractions must not be empty".to_string());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            bad.push(format!("fraction {f} outside (0, 1]"));
        }
        if self.fractions.windows(2).any(|w| w[1] <= w[0]) {
            bad.push("fractions must be strictly ascending".to_string());
        }
        if self.n_repeats == 0 {
            bad.push("n_repeats must be >= 1".to_string());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            bad.push(format!("lr_factor {} must be positive", self.lr_factor));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Fine-tuned and from-scratch scores at one fraction and repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub fraction: f64,
    pub repeat: usize,
    pub seed: u64,
    pub train_size: usize,
    pub fine_tune: MetricsReport,
    pub baseline: MetricsReport,
    /// Every frozen parameter equals the pretrained value bit for bit.
    pub frozen_intact: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

pub const TRANSFER_CSV_HEADER: &str = "fraction,repeat,seed,train_size,mode,accuracy,precision,recall,f1,roc_auc,wall_time_s";

impl TransferReport {
    pub fn frozen_intact(&self) -> bool {
        self.rows.iter().all(|r| r.frozen_intact)
    }

    /// Mean (fine-tune, baseline) metrics per fraction.
    pub fn aggregates(&self) -> Vec<(f64, MetricsReport, MetricsReport)> {
        let mut groups: BTreeMap<u64, (f64, Vec<MetricsReport>, Vec<MetricsReport>)> = BTreeMap::new();
        for r in &self.rows {
            let g = groups.entry(r.fraction.to_bits()).or_insert((r.fraction, Vec::new(), Vec::new()));
            g.1.push(r.fine_tune);
            g.2.push(r.baseline);
        }
        let mut out: Vec<_> = groups
            .into_values()
            .map(|(f, a, b)| (f, super::report_mean(&a), super::report_mean(&b)))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = format!("{TRANSFER_CSV_HEADER}\n");
        for r in &self.rows {
            for (mode, m) in [("fine_tune", &r.fine_tune), ("baseline", &r.baseline)] {
                let wall = if timing { m.wall_time_s } else { 0.0 };
                out.push_str(&format!(
                    "{},{},{},{},{mode},{},{},{},{},{},{wall}\n",
                    r.fraction, r.repeat, r.seed, r.train_size, m.accuracy, m.precision, m.recall, m.f1, m.roc_auc
                ));
            }
        }
        out
    }

    /// Aligned table of mean metrics and execution time per fraction.
    pub fn render(&self, title: &str) -> String {
        let mut out = format!("{title}\n");
        out.push_str(&format!(
            "{:<9} {:<10} {:>8} {:>9} {:>8} {:>8} {:>8} {:>8}\n",
            "Fraction", "Mode", "Accuracy", "Precision", "Recall", "f1-score", "ROC AUC", "Time (s)"
        ));
        for (f, ft, base) in self.aggregates() {
            for (mode, m) in [("fine-tune", ft), ("baseline", base)] {
                out.push_str(&format!(
                    "{:<9} {:<10} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>8.4} {:>8.2}\n",
                    format!("{:.0}%", f * 100.0),
                    mode,
                    m.accuracy,
                    m.precision,
                    m.recall,
                    m.f1,
                    m.roc_auc,
                    m.wall_time_s
                ));
            }
        }
        out
    }
}

/// Trains a classifier on a synthetic source only.
pub fn pretrain_on_source(source: &SynthSource, cfg: &ClassifierConfig, seed: u64) -> Result<Classifier<f32>> {
    let leads = source.all.leads().ok_or_else(|| Error::Source(format!("synthetic source {} is empty", source.name)))?;
    let length = source
        .all
        .uniform_length()
        .ok_or_else(|| Error::InvalidArgument("synthetic records must have one length".into()))?;
    let mut model = Classifier::<f32>::new(cfg, leads, length, seed)?;
    train_classifier(&mut model, &source.train, &source.val, seed)?;
    Ok(model)
}

fn frozen_match(pretrained: &Classifier<f32>, tuned: &Classifier<f32>) -> bool {
    pretrained
        .store
        .iter()
        .zip(tuned.store.iter())
        .filter(|(_, t)| t.frozen)
        .all(|(p, t)| p.value.data().iter().map(|v| v.to_bits()).eq(t.value.data().iter().map(|v| v.to_bits())))
}

/// For each fraction and repeat: fine-tunes the head of a copy of
/// `pretrained` on a stratified subsample of the real training data, and
/// trains a fresh classifier on the same subsample. Both are scored on the
/// real test split; wall time covers training plus evaluation.
pub fn run_transfer(pretrained: &Classifier<f32>, real: &RealSplits, plan: &TransferPlan, seed: u64) -> Result<TransferReport> {
    plan.validate()?;
    let length = real.length()?;
    if pretrained.leads != real.leads() || pretrained.length != length {
        return Err(Error::shape("pretrained classifier input", [real.leads(), length], [pretrained.leads, pretrained.length]));
    }
    let lr = pretrained.config.lr * plan.lr_factor;
    let mut report = TransferReport::default();
    for &fraction in &plan.fractions {
        for repeat in 0..plan.n_repeats {
            let cell_seed = rng::mix(seed, (fraction.to_bits() >> 20) ^ repeat as u64);
            let subset = stratified_subsample(&real.train, fraction, cell_seed)?;

            let start = Instant::now();
            let mut tuned = pretrained.clone();
            fine_tune_head(&mut tuned, &subset, &real.val, lr, cell_seed)?;
            let mut fine_tune = evaluate(&tuned, &real.test)?;
            fine_tune.wall_time_s = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let mut fresh = Classifier::<f32>::new(&pretrained.config, pretrained.leads, pretrained.length, cell_seed)?;
            train_classifier(&mut fresh, &subset, &real.val, cell_seed)?;
            let mut baseline = evaluate(&fresh, &real.test)?;
            baseline.wall_time_s = start.elapsed().as_secs_f64();

            log::info!(
                "transfer {:.0}% repeat {repeat}: fine-tune {:.3} ({:.1}s), baseline {:.3} ({:.1}s)",
                fraction * 100.0,
                fine_tune.accuracy,
                fine_tune.wall_time_s,
                baseline.accuracy,
                baseline.wall_time_s
            );
            report.rows.push(TransferRow {
                fraction,
                repeat,
                seed: cell_seed,
                train_size: subset.len(),
                fine_tune,
                baseline,
                frozen_intact: frozen_match(pretrained, &tuned),
            });
        }
    }
    Ok(report)
}
