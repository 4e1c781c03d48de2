use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use ecgsyn::classifier::{evaluate, train_classifier, Classifier, ClassifierConfig};
use ecgsyn::config::{DataSource, RunConfig};
use ecgsyn::eval::{
    pretrain_on_source, render_tables, run_matrix, run_transfer, EvalReport, EvalRow, RealSplits, RunManifest, Setting, SynthSource,
    TransferReport,
};
use ecgsyn::generators::{load_generator, train_generator};
use ecgsyn::nn::checkpoint_hash;
use ecgsyn::record::store::{load_dataset, load_with_manifest, save_dataset};
use ecgsyn::record::{generate_fixture_dataset, harmonize_merge, resample_dataset, Dataset, FixtureSpec, RhythmClass, SplitSpec};
use ecgsyn::similarity::{export_embeddings, mmd_rbf, two_sample_score, EmbeddingMode};
use ecgsyn::synth::{sample_dataset, Generator};
use ecgsyn::{Error, Result};

#[derive(Parser)]
#[command(name = "ecgsyn", version, about = "Train ECG signal generators and evaluate the synthetic data they produce")]
struct Cli {
    /// Root for relative output paths.
    #[arg(long, env = "ECGSYN_OUT_ROOT", global = true)]
    out_root: Option<PathBuf>,
    /// Log only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read WFDB records listed in label manifests into a dataset directory.
    Ingest {
        /// labels.csv with columns record_id,class_code,source. Repeat to merge datasets.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Directory holding the WFDB files of each manifest (default: the manifest's directory).
        #[arg(long)]
        wfdb_dir: Vec<PathBuf>,
        /// Resample every record to this rate (required when merging datasets with different rates).
        #[arg(long)]
        fs: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic fixture dataset with known rhythm structure.
    Fixture {
        /// Comma-separated class codes (default: all seven).
        #[arg(long)]
        classes: Option<String>,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 100.0)]
        fs: f64,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 2)]
        leads: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generators listed in the config on the real training split.
    TrainGen {
        #[arg(long)]
        config: PathBuf,
        /// Train only this generator kind.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw labeled synthetic records from a generator checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Records per class.
        #[arg(long, conflicts_with = "budget_from")]
        per_class: Option<usize>,
        /// Comma-separated class codes used with --per-class (default: all seven).
        #[arg(long, requires = "per_class")]
        classes: Option<String>,
        /// Match the class counts of this dataset directory.
        #[arg(long)]
        budget_from: Option<PathBuf>,
        /// Sampling rate recorded on the output (default: the budget dataset's, else 100).
        #[arg(long)]
        fs: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the rhythm classifier.
    TrainClf {
        #[arg(long)]
        config: PathBuf,
        /// Train on this synthetic dataset directory instead of the real training split.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the five-setting train/test matrix over trained generators.
    EvalMatrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a synthetic-data classifier on growing fractions of real data.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MMD, two-sample classifier accuracy and embedding export for a real/synthetic pair.
    Metrics {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        seed: u64,
        /// RBF kernel width (default: median pairwise distance).
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Export PCA coordinates with this many components instead of raw signals.
        #[arg(long)]
        pca: Option<usize>,
        /// Skip the two-sample classifier.
        #[arg(long)]
        skip_two_sample: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render matrix and transfer results of run directories as text tables.
    Report {
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        /// Also write the tables to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_out(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        context: format!("creating {}", dir.display()),
        source,
    })
}

fn config_out(root: &Option<PathBuf>, flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let p = flag
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out or set [run] out".into()))?;
    let p = resolve_out(root, &p);
    make_dir(&p)?;
    Ok(p)
}

fn classes_arg(raw: &Option<String>) -> Result<Vec<RhythmClass>> {
    match raw {
        Some(s) => RhythmClass::parse_list(s),
        None => Ok(RhythmClass::ALL.to_vec()),
    }
}

fn load_real(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Dir(dir) => load_dataset(dir),
        DataSource::Fixture(spec) => generate_fixture_dataset(spec),
    }
}

fn real_splits(cfg: &RunConfig) -> Result<RealSplits> {
    RealSplits::new(&load_real(cfg)?, &cfg.split_spec())
}

fn write_json(manifest: &mut RunManifest, dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    manifest.write_output(dir, name, text.as_bytes())
}

fn ingest(root: &Option<PathBuf>, manifests: &[PathBuf], dirs: &[PathBuf], fs: Option<f64>, out: &Path) -> Result<()> {
    if !dirs.is_empty() && dirs.len() != manifests.len() {
        return Err(Error::InvalidArgument(format!("{} manifests but {} --wfdb-dir values", manifests.len(), dirs.len())));
    }
    let mut merged: Option<Dataset> = None;
    for (i, m) in manifests.iter().enumerate() {
        let dir = dirs.get(i).cloned().unwrap_or_else(|| m.parent().unwrap_or(Path::new(".")).to_path_buf());
        let ds = load_with_manifest(m, &dir)?;
        log::info!("read {} records from {}", ds.len(), m.display());
        merged = Some(match merged {
            None => ds,
            Some(prev) => {
                let target = fs.ok_or_else(|| Error::InvalidArgument("--fs is required when merging datasets".into()))?;
                harmonize_merge(&prev, &ds, target)?
            }
        });
    }
    let mut ds = merged.unwrap_or_default();
    if let Some(target) = fs {
        ds = resample_dataset(&ds, target)?;
    }
    let out = resolve_out(root, out);
    save_dataset(&ds, &out)?;
    let args = json!({ "manifests": manifests, "wfdb_dirs": dirs, "fs": fs });
    let mut manifest = RunManifest::new("ingest", "ingested", 0, args);
    manifest.outputs.insert("labels.csv".into(), checkpoint_hash(&std::fs::read(out.join("labels.csv")).unwrap_or_default()));
    manifest.save(&out)?;
    log::info!("wrote {} records to {}", ds.len(), out.display());
    Ok(())
}

fn fixture(root: &Option<PathBuf>, spec: FixtureSpec, out: &Path) -> Result<()> {
    let ds = generate_fixture_dataset(&spec)?;
    let out = resolve_out(root, out);
    save_dataset(&ds, &out)?;
    let mut manifest = RunManifest::new("fixture", "fixture", spec.seed, serde_json::to_value(&spec).expect("serializable"));
    manifest.outputs.insert("labels.csv".into(), checkpoint_hash(&std::fs::read(out.join("labels.csv")).unwrap_or_default()));
    manifest.save(&out)?;
    log::info!("wrote {} fixture records to {}", ds.len(), out.display());
    Ok(())
}

fn train_gen(root: &Option<PathBuf>, cfg: &RunConfig, only: &Option<String>, out: &Option<PathBuf>) -> Result<()> {
    let specs: Vec<_> = cfg
        .generators
        .iter()
        .filter(|s| only.as_deref().is_none_or(|k| s.name() == k || format!("ddpm-{k}") == s.name()))
        .collect();
    if specs.is_empty() {
        return Err(Error::Source(match only {
            Some(k) => format!("generator {k:?} is not listed in [generators] kinds"),
            None => "no generator listed in [generators] kinds".into(),
        }));
    }
    let dir = config_out(root, out, cfg)?;
    let real = real_splits(cfg)?;
    let mut manifest = RunManifest::new("train-gen", &cfg.dataset, cfg.seed, cfg.to_json());
    for spec in specs {
        let name = spec.name();
        log::info!("training {name} on {} records", real.train.len());
        let (model, wall) = train_generator(spec, &real.train, cfg.seed)?;
        let bytes = model.to_bytes();
        manifest.checkpoints.insert(name.clone(), checkpoint_hash(&bytes));
        manifest.write_output(&dir, &format!("{name}.ckpt"), &bytes)?;
        manifest.wall_time_s.insert(name.clone(), wall);
        log::info!("{name} trained in {wall:.1}s");
    }
    manifest.save(&dir)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    root: &Option<PathBuf>,
    checkpoint: &Path,
    seed: u64,
    per_class: Option<usize>,
    classes: &Option<String>,
    budget_from: &Option<PathBuf>,
    fs: Option<f64>,
    out: &Path,
) -> Result<()> {
    let gen = load_generator(checkpoint)?;
    let (budget, fs) = match (per_class, budget_from) {
        (Some(n), _) => (classes_arg(classes)?.into_iter().map(|c| (c, n)).collect::<BTreeMap<_, _>>(), fs.unwrap_or(100.0)),
        (None, Some(dir)) => {
            let ds = load_dataset(dir)?;
            (ds.class_counts().clone(), fs.or(ds.fs()).unwrap_or(100.0))
        }
        (None, None) => return Err(Error::InvalidArgument("pass --per-class or --budget-from".into())),
    };
    let ds = sample_dataset(gen.as_ref(), &budget, fs, seed)?;
    let out = resolve_out(root, out);
    save_dataset(&ds, &out)?;
    let hash = checkpoint_hash(&gen.to_bytes());
    let mut csv = String::from("record_id,generator,class_code,seed,checkpoint_sha256\n");
    for r in ds.records() {
        csv.push_str(&format!("{},{},{},{seed},{hash}\n", r.record_id, gen.name(), r.label.code()));
    }
    let args = json!({ "checkpoint": checkpoint, "budget": budget.iter().map(|(c, n)| (c.code(), n)).collect::<BTreeMap<_, _>>(), "fs": fs });
    let mut manifest = RunManifest::new("sample", gen.name(), seed, args);
    manifest.checkpoints.insert(gen.name().to_string(), hash);
    manifest.write_output(&out, "synthetic.csv", csv.as_bytes())?;
    manifest.save(&out)?;
    log::info!("wrote {} {} samples to {}", ds.len(), gen.name(), out.display());
    Ok(())
}

fn train_clf(root: &Option<PathBuf>, cfg: &RunConfig, synth: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let dir = config_out(root, out, cfg)?;
    let real = real_splits(cfg)?;
    let (train, val, setting, name) = match synth {
        None => (real.train.clone(), real.val.clone(), Setting::TrRTeR, "real".to_string()),
        Some(path) => {
            let ds = load_dataset(path)?;
            let s = SynthSource::new("synth", &ds, &SplitSpec { seed: cfg.split_seed, ..cfg.split_spec() })?;
            (s.train, s.val, Setting::TrSTeR, "synth".to_string())
        }
    };
    let start = Instant::now();
    let mut model = Classifier::<f32>::new(&cfg.classifier, real.leads(), real.length()?, cfg.seed)?;
    let history = train_classifier(&mut model, &train, &val, cfg.seed)?;
    let mut metrics = evaluate(&model, &real.test)?;
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    let mut report = EvalReport::new(1);
    report.rows.push(EvalRow {
        generator: name,
        setting,
        repeat: 0,
        seed: cfg.seed,
        train_size: train.len(),
        test_size: real.test.len(),
        metrics,
    });
    let mut manifest = RunManifest::new("train-clf", &cfg.dataset, cfg.seed, cfg.to_json());
    let bytes = model.to_bytes();
    manifest.checkpoints.insert("classifier".into(), checkpoint_hash(&bytes));
    manifest.write_output(&dir, "classifier.ckpt", &bytes)?;
    write_json(&mut manifest, &dir, "history.json", &history)?;
    manifest.write_output(&dir, "report.csv", report.to_csv(true).as_bytes())?;
    manifest.wall_time_s.insert("train+evaluate".into(), metrics.wall_time_s);
    manifest.save(&dir)?;
    log::info!("test accuracy {:.4}, ROC AUC {:.4}", metrics.accuracy, metrics.roc_auc);
    Ok(())
}

fn load_generators(cfg: &RunConfig) -> Result<Vec<Box<dyn Generator>>> {
    if cfg.checkpoints.is_empty() {
        return Err(Error::Source("no trained generator: list checkpoints in [generators] checkpoints".into()));
    }
    cfg.checkpoints.iter().map(|p| load_generator(p)).collect()
}

/// Returns whether every cell succeeded.
fn eval_matrix(root: &Option<PathBuf>, cfg: &RunConfig, out: &Option<PathBuf>) -> Result<bool> {
    let gens = load_generators(cfg)?;
    let dir = config_out(root, out, cfg)?;
    let real = real_splits(cfg)?;
    let refs: Vec<&dyn Generator> = gens.iter().map(|g| g.as_ref()).collect();
    let start = Instant::now();
    let report = run_matrix(&refs, &real, &cfg.matrix)?;
    let mut manifest = RunManifest::new("eval-matrix", &cfg.dataset, cfg.seed, cfg.to_json());
    for g in &gens {
        manifest.checkpoints.insert(g.name().to_string(), checkpoint_hash(&g.to_bytes()));
    }
    manifest.write_output(&dir, "report.csv", report.to_csv(true).as_bytes())?;
    manifest.write_output(&dir, "aggregates.csv", report.aggregates_csv(true).as_bytes())?;
    for r in &report.rows {
        manifest
            .wall_time_s
            .insert(format!("{}/{}/{}", r.generator, r.setting, r.repeat), r.metrics.wall_time_s);
    }
    manifest.wall_time_s.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.partial = report.partial();
    manifest.failures = report
        .failures
        .iter()
        .map(|f| format!("{}/{}/{}: {}", f.generator, f.setting, f.repeat, f.error))
        .collect();
    manifest.save(&dir)?;
    eprint!("{}", render_tables(&cfg.dataset, &report));
    Ok(!report.partial())
}

fn transfer(root: &Option<PathBuf>, cfg: &RunConfig, out: &Option<PathBuf>) -> Result<()> {
    let real = real_splits(cfg)?;
    let mut manifest = RunManifest::new("transfer", &cfg.dataset, cfg.seed, cfg.to_json());
    let pretrained = match (&cfg.pretrained, &cfg.transfer_source) {
        (Some(p), _) => Classifier::<f32>::load(p)?,
        (None, Some(src)) => {
            let gen = load_generator(src)?;
            manifest.checkpoints.insert(gen.name().to_string(), checkpoint_hash(&gen.to_bytes()));
            let fs = real.train.fs().unwrap_or(100.0);
            let ds = sample_dataset(gen.as_ref(), real.train.class_counts(), fs, cfg.seed)?;
            let source = SynthSource::new(gen.name(), &ds, &cfg.split_spec())?;
            log::info!("pretraining on {} {} samples", source.train.len(), gen.name());
            pretrain_on_source(&source, &cfg.classifier, cfg.seed)?
        }
        (None, None) => {
            return Err(Error::Source("transfer needs [transfer] pretrained or [transfer] source".into()));
        }
    };
    let dir = config_out(root, out, cfg)?;
    let report = run_transfer(&pretrained, &real, &cfg.transfer, cfg.seed)?;
    let bytes = pretrained.to_bytes();
    manifest.checkpoints.insert("pretrained".into(), checkpoint_hash(&bytes));
    manifest.write_output(&dir, "pretrained.ckpt", &bytes)?;
    manifest.write_output(&dir, "transfer.csv", report.to_csv(true).as_bytes())?;
    write_json(&mut manifest, &dir, "transfer.json", &report)?;
    for r in &report.rows {
        manifest.wall_time_s.insert(format!("fine_tune/{}/{}", r.fraction, r.repeat), r.fine_tune.wall_time_s);
        manifest.wall_time_s.insert(format!("baseline/{}/{}", r.fraction, r.repeat), r.baseline.wall_time_s);
    }
    if !report.frozen_intact() {
        manifest.failures.push("frozen parameters changed during fine-tuning".into());
    }
    manifest.save(&dir)?;
    eprint!("{}", report.render(&cfg.dataset));
    if report.frozen_intact() {
        Ok(())
    } else {
        Err(Error::State("frozen parameters changed during fine-tuning".into()))
    }
}

#[allow(clippy::too_many_arguments)]
fn metrics(
    root: &Option<PathBuf>,
    real_dir: &Path,
    synth_dir: &Path,
    seed: u64,
    bandwidth: Option<f64>,
    pca: Option<usize>,
    skip_two_sample: bool,
    out: &Path,
) -> Result<()> {
    let real = load_dataset(real_dir)?;
    let synth = load_dataset(synth_dir)?;
    let out = resolve_out(root, out);
    make_dir(&out)?;
    let mmd = mmd_rbf(&real, &synth, bandwidth)?;
    let two = if skip_two_sample {
        None
    } else {
        Some(two_sample_score(&real, &synth, &ClassifierConfig::two_sample(), seed)?)
    };
    let mut csv = String::from("mmd,bandwidth,n,m,degenerate,two_sample_accuracy\n");
    csv.push_str(&format!(
        "{},{},{},{},{},{}\n",
        mmd.value,
        mmd.bandwidth,
        mmd.n,
        mmd.m,
        mmd.degenerate,
        two.map(|t| t.accuracy.to_string()).unwrap_or_default()
    ));
    let args = json!({ "real": real_dir, "synth": synth_dir, "bandwidth": bandwidth, "pca": pca, "two_sample": !skip_two_sample });
    let mut manifest = RunManifest::new("metrics", "similarity", seed, args);
    manifest.write_output(&out, "similarity.csv", csv.as_bytes())?;
    let mode = pca.map_or(EmbeddingMode::Raw, EmbeddingMode::Pca);
    let emb = out.join("embeddings.csv");
    export_embeddings(&real, &synth, mode, &emb)?;
    manifest.outputs.insert("embeddings.csv".into(), checkpoint_hash(&std::fs::read(&emb).unwrap_or_default()));
    manifest.save(&out)?;
    log::info!("MMD² {:.6} (σ = {:.4})", mmd.value, mmd.bandwidth);
    Ok(())
}

fn report(runs: &[PathBuf], out: &Option<PathBuf>) -> Result<()> {
    let mut text = String::new();
    for dir in runs {
        let title = RunManifest::load(dir).map(|m| m.dataset).unwrap_or_else(|_| dir.display().to_string());
        let mut found = false;
        let csv = dir.join("report.csv");
        if csv.exists() {
            let body = std::fs::read_to_string(&csv).map_err(|source| Error::Io {
                context: format!("reading {}", csv.display()),
                source,
            })?;
            text.push_str(&render_tables(&title, &EvalReport::from_csv(&body, &csv)?));
            text.push('\n');
            found = true;
        }
        let tj = dir.join("transfer.json");
        if tj.exists() {
            let body = std::fs::read_to_string(&tj).map_err(|source| Error::Io {
                context: format!("reading {}", tj.display()),
                source,
            })?;
            let rep: TransferReport = serde_json::from_str(&body).map_err(|e| Error::Parse {
                path: tj.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            text.push_str(&rep.render(&format!("{title} (transfer)")));
            text.push('\n');
            found = true;
        }
        if !found {
            return Err(Error::Source(format!("{} has no report.csv or transfer.json", dir.display())));
        }
    }
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(|source| Error::Io {
            context: format!("writing {}", path.display()),
            source,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.out_root;
    match cli.command {
        Command::Ingest {
            manifest,
            wfdb_dir,
            fs,
            out,
        } => ingest(&root, &manifest, &wfdb_dir, fs, &out)?,
        Command::Fixture {
            classes,
            per_class,
            fs,
            seconds,
            leads,
            seed,
            out,
        } => {
            let spec = FixtureSpec {
                classes: classes_arg(&classes)?,
                per_class,
                fs,
                seconds,
                leads,
                seed,
            };
            fixture(&root, spec, &out)?
        }
        Command::TrainGen { config, generator, out } => train_gen(&root, &RunConfig::load(&config)?, &generator, &out)?,
        Command::Sample {
            checkpoint,
            seed,
            per_class,
            classes,
            budget_from,
            fs,
            out,
        } => sample(&root, &checkpoint, seed, per_class, &classes, &budget_from, fs, &out)?,
        Command::TrainClf { config, synth, out } => train_clf(&root, &RunConfig::load(&config)?, &synth, &out)?,
        Command::EvalMatrix { config, out } => return eval_matrix(&root, &RunConfig::load(&config)?, &out),
        Command::Transfer { config, out } => transfer(&root, &RunConfig::load(&config)?, &out)?,
        Command::Metrics {
            real,
            synth,
            seed,
            bandwidth,
            pca,
            skip_two_sample,
            out,
        } => metrics(&root, &real, &synth, seed, bandwidth, pca, skip_two_sample, &out)?,
        Command::Report { run, out } => report(&run, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("some cells failed; see manifest.json");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
