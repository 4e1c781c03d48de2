//! The train/test matrix over real and synthetic data, the transfer
//! fraction sweep, and their reports.

mod report;
mod transfer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use report::{render_tables, AggregateRow, EvalReport, EvalRow, CellFailure, RunManifest, EVAL_CSV_HEADER};
pub use transfer::{pretrain_on_source, run_transfer, TransferPlan, TransferReport, TransferRow, TRANSFER_CSV_HEADER};
pub(crate) use report::mean_of as report_mean;

use crate::classifier::{evaluate, train_classifier, Classifier, ClassifierConfig, MetricsReport};
use crate::error::{Error, Result};
use crate::record::{stratified_split, Dataset, EcgRecord, SplitSpec, Source};
use crate::rng;
use crate::synth::{sample_dataset, Generator};

/// One cell family of the matrix: which data trains and which tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Setting {
    TrRTeR,
    TrSTeS,
    TrSTeR,
    TrRTeS,
    TrRSTeR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainSource {
    Real,
    Synth,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSource {
    Real,
    Synth,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::TrRTeR, Setting::TrSTeS, Setting::TrSTeR, Setting::TrRTeS, Setting::TrRSTeR];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::TrRTeR => "TrRTeR",
            Setting::TrSTeS => "TrSTeS",
            Setting::TrSTeR => "TrSTeR",
            Setting::TrRTeS => "TrRTeS",
            Setting::TrRSTeR => "TrRSTeR",
        }
    }

    pub fn train_source(self) -> TrainSource {
        match self {
            Setting::TrRTeR | Setting::TrRTeS => TrainSource::Real,
            Setting::TrSTeS | Setting::TrSTeR => TrainSource::Synth,
            Setting::TrRSTeR => TrainSource::Mixed,
        }
    }

    pub fn test_source(self) -> TestSource {
        match self {
            Setting::TrSTeS | Setting::TrRTeS => TestSource::Synth,
            _ => TestSource::Real,
        }
    }

    pub fn needs_synth(self) -> bool {
        self != Setting::TrRTeR
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|t| t.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown setting {s:?}")))
    }
}

/// Fixed train/validation/test partition of the real data.
#[derive(Debug, Clone)]
pub struct RealSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RealSplits {
    pub fn new(ds: &Dataset, spec: &SplitSpec) -> Result<Self> {
        let (train, val, test) = stratified_split(ds, spec)?;
        Ok(Self { train, val, test })
    }

    pub fn leads(&self) -> usize {
        self.train.leads().unwrap_or(0)
    }

    pub fn length(&self) -> Result<usize> {
        let all = self.train.concat(&self.val)?.concat(&self.test)?;
        all.uniform_length()
            .ok_or_else(|| Error::InvalidArgument("real data must have one record length".into()))
    }
}

/// A named synthetic dataset split the same way as the real data.
#[derive(Debug, Clone)]
pub struct SynthSource {
    pub name: String,
    pub all: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SynthSource {
    /// Records are re-tagged as synthetic with ids prefixed by `name`, so
    /// ids never collide with real records.
    pub fn new(name: &str, ds: &Dataset, spec: &SplitSpec) -> Result<Self> {
        let records = ds
            .records()
            .iter()
            .map(|r| {
                let id = if r.record_id.starts_with(&format!("{name}-")) {
                    r.record_id.clone()
                } else {
                    format!("{name}-{}", r.record_id)
                };
                EcgRecord::new(r.signal.clone(), r.fs, r.label, id, Source::Synthetic)
            })
            .collect::<Result<Vec<_>>>()?;
        let all = Dataset::new(records)?;
        let (train, val, test) = stratified_split(&all, spec)?;
        Ok(Self {
            name: name.to_string(),
            all,
            train,
            val,
            test,
        })
    }

    /// Union of several sources under the name `name`.
    pub fn merge(name: &str, sources: &[SynthSource], spec: &SplitSpec) -> Result<Self> {
        let mut records = Vec::new();
        for s in sources {
            records.extend(s.all.records().iter().cloned());
        }
        Self::new(name, &Dataset::new(records)?, spec)
    }
}

/// Train, validation and test data of one setting.
#[derive(Debug, Clone)]
pub struct SettingData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn train_data(source: TrainSource, real: &RealSplits, synth: Option<&SynthSource>) -> Result<(Dataset, Dataset)> {
    let need = || Error::Source("setting needs synthetic data but none was provided".into());
    Ok(match source {
        TrainSource::Real => (real.train.clone(), real.val.clone()),
        TrainSource::Synth => {
            let s = synth.ok_or_else(need)?;
            (s.train.clone(), s.val.clone())
        }
        TrainSource::Mixed => {
            let s = synth.ok_or_else(need)?;
            (real.train.concat(&s.all)?, real.val.clone())
        }
    })
}

/// Data of `setting`. TrRSTeR trains on the real training split plus every
/// synthetic record.
pub fn setting_data(setting: Setting, real: &RealSplits, synth: Option<&SynthSource>) -> Result<SettingData> {
    let (train, val) = train_data(setting.train_source(), real, synth)?;
    let test = match setting.test_source() {
        TestSource::Real => real.test.clone(),
        TestSource::Synth => synth
            .ok_or_else(|| Error::Source("setting needs synthetic data but none was provided".into()))?
            .test
            .clone(),
    };
    Ok(SettingData { train, val, test })
}

/// Record ids shared by the training (or validation) data and the test set.
pub fn overlapping_ids(data: &SettingData) -> BTreeSet<String> {
    let test: BTreeSet<&str> = data.test.records().iter().map(|r| r.record_id.as_str()).collect();
    data.train
        .records()
        .iter()
        .chain(data.val.records())
        .filter(|r| test.contains(r.record_id.as_str()))
        .map(|r| r.record_id.clone())
        .collect()
}

fn check_disjoint(setting: Setting, data: &SettingData) -> Result<()> {
    let shared = overlapping_ids(data);
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::State(format!(
            "{setting}: {} test records also used for training, e.g. {}",
            shared.len(),
            shared.iter().next().map(String::as_str).unwrap_or_default()
        )))
    }
}

fn fit(cfg: &ClassifierConfig, data: &SettingData, leads: usize, length: usize, seed: u64) -> Result<(Classifier<f32>, f64)> {
    let start = Instant::now();
    let mut model = Classifier::<f32>::new(cfg, leads, length, seed)?;
    train_classifier(&mut model, &data.train, &data.val, seed)?;
    Ok((model, start.elapsed().as_secs_f64()))
}

/// Trains a fresh classifier on the setting's training source and scores
/// it on its test source. Wall time covers training and evaluation.
pub fn run_setting(
    setting: Setting,
    real: &RealSplits,
    synth: Option<&SynthSource>,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let data = setting_data(setting, real, synth)?;
    check_disjoint(setting, &data)?;
    let (model, train_time) = fit(cfg, &data, real.leads(), real.length()?, seed)?;
    let start = Instant::now();
    let mut m = evaluate(&model, &data.test)?;
    m.wall_time_s = train_time + start.elapsed().as_secs_f64();
    Ok(m)
}

/// Matrix-wide options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub classifier: ClassifierConfig,
    pub n_repeats: usize,
    pub seed: u64,
    pub settings: Vec<Setting>,
    /// Add the merged source named `all`.
    pub include_all: bool,
    /// Draw fresh synthetic data for every repeat instead of once.
    pub resample: bool,
    /// Split proportions applied to each synthetic source.
    pub synth_split: (f64, f64, f64),
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::desk(),
            n_repeats: 3,
            seed: 0,
            settings: Setting::ALL.to_vec(),
            include_all: true,
            resample: false,
            synth_split: (0.8, 0.1, 0.1),
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_repeats == 0 {
            bad.push("n_repeats must be >= 1".to_string());
        }
        if self.settings.is_empty() {
            bad.push("settings must not be empty".to_string());
        }
        let (a, b, c) = self.synth_split;
        if let Err(e) = SplitSpec::new(a, b, c, 0) {
            bad.push(e.to_string());
        }
        if let Err(Error::Config(v)) = self.classifier.validate() {
            bad.extend(v.into_iter().map(|m| format!("classifier: {m}")));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    fn split_spec(&self, salt: u64) -> SplitSpec {
        let (train_frac, val_frac, test_frac) = self.synth_split;
        SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed: rng::mix(self.seed, salt),
        }
    }
}

/// Seed of repeat `r`.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    rng::mix(seed, 0xE7A1_0000 + repeat as u64)
}

/// Stable 64-bit salt of a source name.
fn name_salt(name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Classifier seed for a training source within a repeat. Models trained
/// on real data alone are shared by every generator of the repeat.
fn model_seed(repeat_seed: u64, source: TrainSource, name: &str) -> u64 {
    match source {
        TrainSource::Real => rng::mix(repeat_seed, 1),
        TrainSource::Synth => rng::mix(repeat_seed, name_salt(name) ^ 2),
        TrainSource::Mixed => rng::mix(repeat_seed, name_salt(name) ^ 3),
    }
}

type Trained = Result<(Classifier<f32>, f64), String>;

/// Runs one repeat over fixed sources. Each model is trained at most once
/// and shared by the settings that use the same training data.
fn run_repeat(
    repeat: usize,
    sources: &[SynthSource],
    real: &RealSplits,
    cfg: &MatrixConfig,
    report: &mut EvalReport,
) -> Result<()> {
    let seed = repeat_seed(cfg.seed, repeat);
    let (leads, length) = (real.leads(), real.length()?);
    let mut real_model: Option<Trained> = None;
    for source in sources {
        let mut models: BTreeMap<TrainSource, Trained> = BTreeMap::new();
        if let Some(Ok(m)) = &real_model {
            models.insert(TrainSource::Real, Ok(m.clone()));
        }
        for &setting in &cfg.settings {
            let cell = (|| -> Result<(MetricsReport, usize, usize)> {
                let data = setting_data(setting, real, Some(source))?;
                check_disjoint(setting, &data)?;
                let ts = setting.train_source();
                if !models.contains_key(&ts) {
                    let trained = fit(&cfg.classifier, &data, leads, length, model_seed(seed, ts, &source.name))
                        .map_err(|e| e.to_string());
                    if ts == TrainSource::Real {
                        real_model = Some(trained.clone());
                    }
                    models.insert(ts, trained);
                }
                let (model, train_time) = models[&ts].clone().map_err(Error::State)?;
                let start = Instant::now();
                let mut m = evaluate(&model, &data.test)?;
                m.wall_time_s = train_time + start.elapsed().as_secs_f64();
                Ok((m, data.train.len(), data.test.len()))
            })();
            match cell {
                Ok((metrics, train_size, test_size)) => {
                    log::info!("{} {setting} repeat {repeat}: accuracy {:.3}", source.name, metrics.accuracy);
                    report.rows.push(EvalRow {
                        generator: source.name.clone(),
                        setting,
                        repeat,
                        seed,
                        train_size,
                        test_size,
                        metrics,
                    });
                }
                Err(e) => {
                    log::warn!("{} {setting} repeat {repeat} failed: {e}", source.name);
                    report.failures.push(CellFailure {
                        generator: source.name.clone(),
                        setting,
                        repeat,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn with_merged(sources: Vec<SynthSource>, cfg: &MatrixConfig) -> Result<Vec<SynthSource>> {
    let mut sources = sources;
    if cfg.include_all && !sources.is_empty() {
        let all = SynthSource::merge("all", &sources, &cfg.split_spec(name_salt("all")))?;
        sources.push(all);
    }
    Ok(sources)
}

/// The matrix over already-sampled synthetic datasets (plus their merge
/// when `include_all`). Cell failures are recorded and the run continues.
pub fn run_matrix_on(sources: &[(String, Dataset)], real: &RealSplits, cfg: &MatrixConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if sources.is_empty() && cfg.settings.iter().any(|s| s.needs_synth()) {
        return Err(Error::Source("no synthetic data source for the synthetic settings".into()));
    }
    let split = |name: &str, ds: &Dataset| SynthSource::new(name, ds, &cfg.split_spec(name_salt(name)));
    let built = sources.iter().map(|(n, d)| split(n, d)).collect::<Result<Vec<_>>>()?;
    let sources = with_merged(built, cfg)?;
    let mut report = EvalReport::new(cfg.n_repeats);
    for repeat in 0..cfg.n_repeats {
        run_repeat(repeat, &sources, real, cfg, &mut report)?;
    }
    report.sort();
    Ok(report)
}

/// Samples each generator with the real training split's class counts and
/// runs the matrix. With `resample`, every repeat draws fresh data.
pub fn run_matrix(generators: &[&dyn Generator], real: &RealSplits, cfg: &MatrixConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if generators.is_empty() && cfg.settings.iter().any(|s| s.needs_synth()) {
        return Err(Error::Source("no trained generator for the synthetic settings".into()));
    }
    let names: BTreeSet<&str> = generators.iter().map(|g| g.name()).collect();
    if names.len() != generators.len() || names.contains("all") {
        return Err(Error::InvalidArgument("generator names must be unique and not `all`".into()));
    }
    let fs = real.train.fs().ok_or_else(|| Error::Source("empty real training split".into()))?;
    let budget = real.train.class_counts().clone();
    let sample = |draw: u64| -> Result<Vec<SynthSource>> {
        let built = generators
            .iter()
            .map(|g| {
                let ds = sample_dataset(*g, &budget, fs, rng::mix(draw, name_salt(g.name())))?;
                SynthSource::new(g.name(), &ds, &cfg.split_spec(name_salt(g.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        with_merged(built, cfg)
    };
    let mut report = EvalReport::new(cfg.n_repeats);
    let mut sources = sample(cfg.seed)?;
    for repeat in 0..cfg.n_repeats {
        if cfg.resample && repeat > 0 {
            sources = sample(repeat_seed(cfg.seed, repeat))?;
        }
        run_repeat(repeat, &sources, real, cfg, &mut report)?;
    }
    report.sort();
    Ok(report)
}
