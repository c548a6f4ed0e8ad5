//! Scenario registry, run configuration, metrics and run-directory artifacts.

mod build;
mod export;
mod metrics;
mod run;

pub use build::*;
pub use export::*;
pub use metrics::*;
pub use run::*;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::networks::OutputTransform;
use crate::trainopt::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    /// 2D constant coefficients, pointwise sensors.
    A1,
    /// 2D constant coefficients, window-averaged sensors.
    A2,
    /// 2D time-dependent velocity, space-dependent diffusion.
    B,
    /// 3D height-dependent wind and diffusion with settling.
    C,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [ScenarioId::A1, ScenarioId::A2, ScenarioId::B, ScenarioId::C];

    pub fn spatial_dims(self) -> usize {
        if self == ScenarioId::C {
            3
        } else {
            2
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ScenarioId {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(ScenarioId::A1),
            "A2" => Ok(ScenarioId::A2),
            "B" => Ok(ScenarioId::B),
            "C" => Ok(ScenarioId::C),
            _ => Err(config(format!("unknown scenario {s:?} (expected A1, A2, B or C)"))),
        }
    }
}

/// How observations are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Pointwise,
    Accumulative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sensors: usize,
    /// Noise level as a fraction of each sensor's RMS.
    pub noise: f64,
    pub kind: SensorKind,
    /// Pointwise readings every this many solver steps.
    pub sample_every: usize,
    /// Accumulative window length in solver steps.
    pub window: usize,
    /// Boundary data fraction in thousandths.
    pub beta: f64,
    /// Velocity readings every this many solver steps (scenarios with velocity data).
    pub velocity_every: usize,
    /// Truth grid cells per axis.
    pub grid_n: usize,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworksConfig {
    pub u: NetConfig,
    pub f: NetConfig,
    pub v: NetConfig,
    pub d: NetConfig,
    pub source_transform: OutputTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub grid_2d: usize,
    pub grid_3d: usize,
    /// Time samples for time-dependent coefficient metrics.
    pub time_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_2d: 101,
            grid_3d: 51,
            time_samples: 201,
        }
    }
}

/// Complete description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub paper_scale: bool,
    pub data: DataConfig,
    pub networks: NetworksConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn net(hidden: usize, depth: usize) -> NetConfig {
    NetConfig { hidden, depth }
}

impl RunConfig {
    /// Scenario defaults at desk scale, or at the published sizes when `paper_scale`.
    pub fn preset(id: ScenarioId, paper_scale: bool) -> Self {
        let dims = id.spatial_dims();
        let data = DataConfig {
            sensors: match id {
                ScenarioId::A1 | ScenarioId::A2 => 15,
                ScenarioId::B | ScenarioId::C => 30,
            },
            noise: 0.01,
            kind: if id == ScenarioId::A2 {
                SensorKind::Accumulative
            } else {
                SensorKind::Pointwise
            },
            sample_every: 1,
            window: 30,
            beta: if matches!(id, ScenarioId::A1 | ScenarioId::A2) { 11.0 } else { 1.0 },
            velocity_every: 10,
            grid_n: match (dims, paper_scale) {
                (2, false) => 64,
                (2, true) => 128,
                (_, false) => 32,
                (_, true) => 48,
            },
            n_steps: match (dims, paper_scale) {
                (2, false) => 200,
                (2, true) => 400,
                (_, false) => 100,
                (_, true) => 150,
            },
        };
        let networks = if paper_scale {
            match id {
                ScenarioId::A1 | ScenarioId::A2 => NetworksConfig {
                    u: net(80, 3),
                    f: net(100, 3),
                    v: net(80, 3),
                    d: net(80, 3),
                    source_transform: OutputTransform::Softplus,
                },
                ScenarioId::B => NetworksConfig {
                    u: net(80, 3),
                    f: net(100, 3),
                    v: net(80, 3),
                    d: net(80, 3),
                    source_transform: OutputTransform::Softplus,
                },
                ScenarioId::C => NetworksConfig {
                    u: net(80, 5),
                    f: net(100, 3),
                    v: net(80, 3),
                    d: net(80, 5),
                    source_transform: OutputTransform::Softplus,
                },
            }
        } else {
            NetworksConfig {
                u: net(40, 3),
                f: net(40, 3),
                v: net(20, 2),
                d: net(20, 2),
                source_transform: OutputTransform::Softplus,
            }
        };
        let base = TrainConfig::default();
        let train = match (id, paper_scale) {
            (ScenarioId::A1 | ScenarioId::A2, false) => TrainConfig {
                adam_steps: 5000,
                adam_lr: 5e-3,
                lbfgs_steps: 5000,
                ..base
            },
            (ScenarioId::A1 | ScenarioId::A2, true) => TrainConfig {
                adam_steps: 15000,
                lbfgs_steps: 20000,
                lbfgs_lr: 0.1,
                n_residual: 4096,
                n_boundary: 512,
                ..base
            },
            (ScenarioId::B, false) => TrainConfig {
                adam_steps: 5000,
                adam_lr: 5e-3,
                lbfgs_steps: 5000,
                ..base
            },
            (ScenarioId::B, true) => TrainConfig {
                adam_steps: 20000,
                lbfgs_steps: 30000,
                lbfgs_lr: 0.1,
                n_residual: 4096,
                n_boundary: 512,
                ..base
            },
            (ScenarioId::C, false) => TrainConfig {
                pretrain_steps: 500,
                adam_steps: 1500,
                lbfgs_steps: 1000,
                n_residual: 1024,
                n_boundary: 384,
                ..base
            },
            (ScenarioId::C, true) => TrainConfig {
                pretrain_steps: 10000,
                adam_steps: 20000,
                lbfgs_steps: 30000,
                lbfgs_lr: 0.1,
                n_residual: 8192,
                n_boundary: 1536,
                ..base
            },
        };
        Self {
            scenario: id,
            seed: 0,
            paper_scale,
            data,
            networks,
            train,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.noise >= 0.0) {
            return Err(config("noise must be non-negative"));
        }
        if d.sensors == 0 {
            return Err(config("at least one sensor is required"));
        }
        if d.sample_every == 0 || d.window == 0 || d.velocity_every == 0 {
            return Err(config("sampling cadences must be positive"));
        }
        if !(d.beta > 0.0) {
            return Err(config("beta must be positive"));
        }
        if d.kind == SensorKind::Accumulative && d.window > d.n_steps {
            return Err(config("accumulation window exceeds the time horizon"));
        }
        for (name, n) in [
            ("u", &self.networks.u),
            ("f", &self.networks.f),
            ("v", &self.networks.v),
            ("d", &self.networks.d),
        ] {
            if n.hidden == 0 {
                return Err(config(format!("network {name} needs a positive hidden width")));
            }
        }
        if self.eval.grid_2d < 2 || self.eval.grid_3d < 2 || self.eval.time_samples < 2 {
            return Err(config("evaluation grids need at least two nodes per axis"));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `dotted.key=value` overrides; every key must already exist in the config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| config(format!("unknown config key {key:?}")))?;
            }
            if slot.is_table() {
                return Err(config(format!("config key {key:?} names a section")));
            }
            // keep floats floating when written as integers
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the effective config.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Per-purpose seeds derived from the master seed.
    pub fn seeds(&self) -> Seeds {
        let s = self.seed;
        Seeds {
            sensors: s.wrapping_mul(7919).wrapping_add(1),
            noise: s.wrapping_mul(7919).wrapping_add(2),
            boundary: s.wrapping_mul(7919).wrapping_add(3),
            collocation: s.wrapping_mul(7919).wrapping_add(4),
            init: s.wrapping_mul(7919).wrapping_add(5),
            train: s.wrapping_mul(7919).wrapping_add(6),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sensors: u64,
    pub noise: u64,
    pub boundary: u64,
    pub collocation: u64,
    pub init: u64,
    pub train: u64,
}
