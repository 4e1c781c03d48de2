//! Sectioned key=value run configuration. Every key is checked against the
//! known fields; all problems are reported together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ini::Ini;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::ClassifierConfig;
use crate::ddpm::{BackboneKind, DdpmConfig};
use crate::error::{Error, IoContext, Result};
use crate::eval::{MatrixConfig, TransferPlan};
use crate::flow::FlowConfig;
use crate::generators::GeneratorSpec;
use crate::record::{FixtureSpec, RhythmClass, SplitSpec};
use crate::vqvae::VqvaeConfig;

/// Where the real data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// A dataset directory (labels.csv plus WFDB files).
    Dir(PathBuf),
    Fixture(FixtureSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: String,
    pub data: DataSource,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub generators: Vec<GeneratorSpec>,
    pub checkpoints: Vec<PathBuf>,
    pub classifier: ClassifierConfig,
    pub matrix: MatrixConfig,
    pub transfer: TransferPlan,
    /// Classifier checkpoint trained on synthetic data only.
    pub pretrained: Option<PathBuf>,
    /// Generator checkpoint whose samples pretrain the transfer classifier.
    pub transfer_source: Option<PathBuf>,
}

type Section = Vec<(String, String)>;

const SECTIONS: [&str; 9] = ["run", "data", "generators", "ddpm", "vqvae", "flow", "classifier", "matrix", "transfer"];

/// Parses `raw` into a JSON value shaped like `like`.
fn convert(raw: &str, like: &Value) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got {raw:?}")),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got {raw:?}")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a number, got {raw:?}")),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::String(String::new()));
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| convert(s, &elem))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        _ => Err("this key cannot be set from a config file".into()),
    }
}

/// `base` with the fields named in `section` replaced. Keys in `skip` are
/// handled by the caller.
fn override_fields<T: Serialize + DeserializeOwned>(base: &T, name: &str, section: &Section, skip: &[&str], errors: &mut Vec<String>) -> T {
    let mut value = serde_json::to_value(base).expect("serializable");
    let before = errors.len();
    if let Value::Object(map) = &mut value {
        for (k, raw) in section {
            if skip.contains(&k.as_str()) {
                continue;
            }
            match map.get(k.as_str()) {
                None => errors.push(format!("[{name}] unknown key `{k}`")),
                Some(like) => match convert(raw, like) {
                    Ok(v) => {
                        map.insert(k.clone(), v);
                    }
                    Err(e) => errors.push(format!("[{name}] {k}: {e}")),
                },
            }
        }
    }
    if errors.len() > before {
        return serde_json::from_value(serde_json::to_value(base).expect("serializable")).expect("round trip");
    }
    match serde_json::from_value(value) {
        Ok(v) => v,
        Err(e) => {
            errors.push(format!("[{name}] {e}"));
            serde_json::from_value(serde_json::to_value(base).expect("serializable")).expect("round trip")
        }
    }
}

fn take(section: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
    section.remove(key).map(|v| v.trim().to_string())
}

fn parse_num<T: std::str::FromStr>(name: &str, key: &str, raw: Option<String>, errors: &mut Vec<String>) -> Option<T> {
    let raw = raw?;
    match raw.parse::<T>() {
        Ok(v) => Some(v),
        Err(_) => {
            errors.push(format!("[{name}] {key}: cannot parse {raw:?}"));
            None
        }
    }
}

fn list(raw: &str) -> Vec<String> {
    raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            line: e.line,
            message: e.msg.to_string(),
        })?;
        let mut errors = Vec::new();
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let entries: Section = props.iter().map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect();
            match name {
                None if entries.is_empty() => {}
                None => errors.extend(entries.iter().map(|(k, _)| format!("key `{k}` outside any section"))),
                Some(n) if SECTIONS.contains(&n) => sections.entry(n.to_string()).or_default().extend(entries),
                Some(n) => errors.push(format!("unknown section [{n}]")),
            }
        }
        let get = |n: &str| -> BTreeMap<String, String> { sections.get(n).map(|s| s.iter().cloned().collect()).unwrap_or_default() };
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base_dir.join(p) }
        };
        let mut leftovers: Vec<(String, BTreeMap<String, String>)> = Vec::new();

        let mut run = get("run");
        let seed = match take(&mut run, "seed") {
            None => {
                errors.push("[run] seed is required".into());
                0
            }
            Some(s) => parse_num("run", "seed", Some(s), &mut errors).unwrap_or(0),
        };
        let out = take(&mut run, "out").map(|p| resolve(&p));
        let dataset = take(&mut run, "dataset").unwrap_or_else(|| "dataset".into());
        leftovers.push(("run".into(), run));

        let mut data = get("data");
        let split = match take(&mut data, "split") {
            None => (0.8, 0.1, 0.1),
            Some(raw) => {
                let parts: Vec<Option<f64>> = list(&raw).iter().map(|s| s.parse().ok()).collect();
                match parts.as_slice() {
                    [Some(a), Some(b), Some(c)] => (*a, *b, *c),
                    _ => {
                        errors.push(format!("[data] split: expected three fractions, got {raw:?}"));
                        (0.8, 0.1, 0.1)
                    }
                }
            }
        };
        if let Err(e) = SplitSpec::new(split.0, split.1, split.2, 0) {
            errors.push(format!("[data] split: {e}"));
        }
        let split_seed = parse_num("data", "split_seed", take(&mut data, "split_seed"), &mut errors).unwrap_or(seed);
        let source = match take(&mut data, "dir") {
            Some(dir) => DataSource::Dir(resolve(&dir)),
            None => {
                let mut spec = FixtureSpec {
                    seed,
                    ..FixtureSpec::default()
                };
                if let Some(raw) = take(&mut data, "classes") {
                    match RhythmClass::parse_list(&raw) {
                        Ok(c) => spec.classes = c,
                        Err(e) => errors.push(format!("[data] classes: {e}")),
                    }
                }
                spec.per_class = parse_num("data", "per_class", take(&mut data, "per_class"), &mut errors).unwrap_or(spec.per_class);
                spec.fs = parse_num("data", "fs", take(&mut data, "fs"), &mut errors).unwrap_or(spec.fs);
                spec.seconds = parse_num("data", "seconds", take(&mut data, "seconds"), &mut errors).unwrap_or(spec.seconds);
                spec.leads = parse_num("data", "leads", take(&mut data, "leads"), &mut errors).unwrap_or(spec.leads);
                spec.seed = parse_num("data", "fixture_seed", take(&mut data, "fixture_seed"), &mut errors).unwrap_or(spec.seed);
                DataSource::Fixture(spec)
            }
        };
        leftovers.push(("data".into(), data));

        let mut gens = get("generators");
        let quick = parse_num("generators", "quick", take(&mut gens, "quick"), &mut errors).unwrap_or(false);
        let kinds = take(&mut gens, "kinds").map(|s| list(&s)).unwrap_or_default();
        let checkpoints = take(&mut gens, "checkpoints")
            .map(|s| list(&s).iter().map(|p| resolve(p)).collect())
            .unwrap_or_default();
        leftovers.push(("generators".into(), gens));
        let mut generators = Vec::new();
        for kind in &kinds {
            match GeneratorSpec::from_kind(kind, quick) {
                Ok(spec) => generators.push(spec),
                Err(e) => errors.push(format!("[generators] kinds: {e}")),
            }
        }
        for family in ["ddpm", "vqvae", "flow"] {
            let section: Section = sections.get(family).cloned().unwrap_or_default();
            if section.is_empty() {
                continue;
            }
            let mut matched = false;
            for spec in generators.iter_mut() {
                match spec {
                    GeneratorSpec::Ddpm(c) if family == "ddpm" => {
                        *c = override_fields(c, family, &section, &["backbone"], &mut errors);
                        matched = true;
                    }
                    GeneratorSpec::Vqvae(c) if family == "vqvae" => {
                        *c = override_fields(c, family, &section, &[], &mut errors);
                        matched = true;
                    }
                    GeneratorSpec::Flow(c) if family == "flow" => {
                        *c = override_fields(c, family, &section, &[], &mut errors);
                        matched = true;
                    }
                    _ => {}
                }
            }
            if !matched {
                // Still reject unknown keys for families that are not trained.
                match family {
                    "ddpm" => drop(override_fields(&DdpmConfig::quick(BackboneKind::Unet), family, &section, &["backbone"], &mut errors)),
                    "vqvae" => drop(override_fields(&VqvaeConfig::quick(), family, &section, &[], &mut errors)),
                    _ => drop(override_fields(&FlowConfig::default(), family, &section, &[], &mut errors)),
                }
            }
        }

        let mut cls = get("classifier");
        let base = match take(&mut cls, "preset").as_deref() {
            None | Some("desk") => ClassifierConfig::desk(),
            Some("ptbxl") => ClassifierConfig::ptbxl(),
            Some("chapman") => ClassifierConfig::chapman(),
            Some("two_sample") => ClassifierConfig::two_sample(),
            Some(other) => {
                errors.push(format!("[classifier] preset: unknown preset {other:?}"));
                ClassifierConfig::desk()
            }
        };
        let cls_section: Section = cls.into_iter().collect();
        let classifier = override_fields(&base, "classifier", &cls_section, &[], &mut errors);
        if let Err(Error::Config(v)) = classifier.validate() {
            errors.extend(v.into_iter().map(|m| format!("[classifier] {m}")));
        }

        let matrix_section: Section = get("matrix").into_iter().collect();
        let mut matrix = override_fields(&MatrixConfig::default(), "matrix", &matrix_section, &["classifier", "seed"], &mut errors);
        for (k, _) in &matrix_section {
            if k == "classifier" || k == "seed" {
                errors.push(format!("[matrix] unknown key `{k}`"));
            }
        }
        matrix.classifier = classifier.clone();
        matrix.seed = seed;

        let mut tr = get("transfer");
        let pretrained = take(&mut tr, "pretrained").map(|p| resolve(&p));
        let transfer_source = take(&mut tr, "source").map(|p| resolve(&p));
        let tr_section: Section = tr.into_iter().collect();
        let transfer = override_fields(&TransferPlan::default(), "transfer", &tr_section, &[], &mut errors);
        if let Err(Error::Config(v)) = transfer.validate() {
            errors.extend(v.into_iter().map(|m| format!("[transfer] {m}")));
        }
        if let Err(Error::Config(v)) = matrix.validate() {
            errors.extend(v.into_iter().filter(|m| !m.starts_with("classifier:")).map(|m| format!("[matrix] {m}")));
        }
        for spec in &generators {
            if let Err(Error::Config(v)) = spec.validate() {
                errors.extend(v.into_iter().map(|m| format!("[{}] {m}", spec.name())));
            }
        }

        for (name, rest) in leftovers {
            errors.extend(rest.keys().map(|k| format!("[{name}] unknown key `{k}`")));
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(Self {
            seed,
            out,
            dataset,
            data: source,
            split,
            split_seed,
            generators,
            checkpoints,
            classifier,
            matrix,
            transfer,
            pretrained,
            transfer_source,
        })
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.split.0,
            val_frac: self.split.1,
            test_frac: self.split.2,
            seed: self.split_seed,
        }
    }

    /// Resolved configuration as JSON, for manifests.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("serializable")
    }
}
