//! Training and loading of the generator families behind one interface.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ddpm::{train_ddpm, BackboneKind, Ddpm, DdpmConfig};
use crate::error::{Error, IoContext, Result};
use crate::flow::{train_flow, FlowConfig, FourierFlow};
use crate::nn::Checkpoint;
use crate::record::Dataset;
use crate::synth::Generator;
use crate::vqvae::{train_vqvae, Vqvae, VqvaeConfig};

/// Which model to train, with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum GeneratorSpec {
    Ddpm(DdpmConfig),
    Vqvae(VqvaeConfig),
    Flow(FlowConfig),
}

pub const GENERATOR_KINDS: [&str; 5] = ["ddpm-dilated", "ddpm-unet", "ddpm-decomposition", "vqvae", "fourier-flow"];

impl GeneratorSpec {
    /// Default spec for a kind from [`GENERATOR_KINDS`]; `quick` selects
    /// the reduced desk-scale configurations.
    pub fn from_kind(kind: &str, quick: bool) -> Result<Self> {
        let kind = kind.trim().to_ascii_lowercase();
        if let Some(b) = kind.strip_prefix("ddpm-") {
            let b = BackboneKind::parse(b)?;
            return Ok(GeneratorSpec::Ddpm(if quick { DdpmConfig::quick(b) } else { DdpmConfig::standard(b) }));
        }
        match kind.as_str() {
            "vqvae" => Ok(GeneratorSpec::Vqvae(if quick { VqvaeConfig::quick() } else { VqvaeConfig::standard() })),
            "fourier-flow" | "flow" => Ok(GeneratorSpec::Flow(FlowConfig::default())),
            _ => Err(Error::InvalidArgument(format!(
                "unknown generator {kind:?}; expected one of {}",
                GENERATOR_KINDS.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            GeneratorSpec::Ddpm(c) => format!("ddpm-{}", c.backbone.tag()),
            GeneratorSpec::Vqvae(_) => "vqvae".into(),
            GeneratorSpec::Flow(_) => "fourier-flow".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorSpec::Ddpm(c) => c.validate(),
            GeneratorSpec::Vqvae(c) => c.validate(),
            GeneratorSpec::Flow(c) => c.validate(),
        }
    }
}

/// Trains the model described by `spec`; returns it with its wall time.
pub fn train_generator(spec: &GeneratorSpec, ds: &Dataset, seed: u64) -> Result<(Box<dyn Generator>, f64)> {
    Ok(match spec {
        GeneratorSpec::Ddpm(c) => {
            let (m, log) = train_ddpm(ds, c, seed)?;
            (Box::new(m), log.wall_time_s)
        }
        GeneratorSpec::Vqvae(c) => {
            let (m, log) = train_vqvae(ds, c, seed)?;
            (Box::new(m), log.wall_time_s)
        }
        GeneratorSpec::Flow(c) => {
            let (m, log) = train_flow(ds, c, seed)?;
            (Box::new(m), log.wall_time_s)
        }
    })
}

/// Restores any generator checkpoint by its descriptor.
pub fn generator_from_bytes(bytes: &[u8]) -> Result<Box<dyn Generator>> {
    let ck: Checkpoint<f32> = Checkpoint::from_bytes(bytes)?;
    let family = ck.descriptor.split('/').next().unwrap_or_default();
    Ok(match family {
        "ecgsyn.ddpm" => Box::new(Ddpm::<f32>::from_bytes(bytes)?),
        "ecgsyn.vqvae" => Box::new(Vqvae::<f32>::from_bytes(bytes)?),
        "ecgsyn.flow" => Box::new(FourierFlow::<f32>::from_bytes(bytes)?),
        _ => return Err(Error::Version(format!("not a generator checkpoint: `{family}`"))),
    })
}

pub fn load_generator(path: &Path) -> Result<Box<dyn Generator>> {
    let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
    generator_from_bytes(&bytes)
}
