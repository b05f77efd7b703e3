//! Experiment configuration files.
//!
//! Every section is optional and every key has a default; unknown keys are
//! rejected so typos surface as errors instead of silently using defaults.

use std::path::Path;

use anyhow::Context;
use fluxfno::data::DatasetSpec;
use fluxfno::train::TrainConfig;
use fluxfno::{Equation, FnoConfig, Stencil};
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| Usage(format!("{e:#}")))?;
        serde_json::from_str(&text)
            .map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub equation: Equation,
    pub n_funcs: usize,
    pub nx: usize,
    pub dt: f64,
    /// Either `t_end` or `n_steps`; `t_end` must be a whole number of steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    pub scale: f64,
    pub seed: u64,
    pub advection_speed: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            equation: Equation::Advection,
            n_funcs: 100,
            nx: 256,
            dt: 1.0 / 256.0,
            t_end: None,
            n_steps: None,
            scale: 0.1,
            seed: 0,
            advection_speed: 1.0,
        }
    }
}

impl DataSection {
    pub fn resolve_steps(&self) -> anyhow::Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Usage(format!("dt must be positive, got {}", self.dt)).into());
        }
        let from_t_end = match self.t_end {
            None => None,
            Some(t) if !(t >= 0.0 && t.is_finite()) => {
                return Err(Usage(format!("t_end must be non-negative, got {t}")).into())
            }
            Some(t) => {
                let steps = (t / self.dt).round();
                if (steps * self.dt - t).abs() > 1e-9 * self.dt.max(t) {
                    return Err(Usage(format!(
                        "t_end {t} is not a whole number of steps of {}",
                        self.dt
                    ))
                    .into());
                }
                Some(steps as usize)
            }
        };
        match (from_t_end, self.n_steps) {
            (Some(a), Some(b)) if a != b => {
                Err(Usage(format!("t_end gives {a} steps but n_steps is {b}")).into())
            }
            (Some(a), _) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => Ok((1.0 / self.dt).round() as usize),
        }
    }

    pub fn spec(&self) -> anyhow::Result<DatasetSpec> {
        if self.nx < 8 {
            return Err(Usage(format!("nx must be at least 8, got {}", self.nx)).into());
        }
        if self.n_funcs == 0 {
            return Err(Usage("n_funcs must be positive".into()).into());
        }
        Ok(DatasetSpec {
            equation: self.equation,
            n_funcs: self.n_funcs,
            nx: self.nx,
            dt: self.dt,
            n_steps: self.resolve_steps()?,
            scale: self.scale,
            seed: self.seed,
            advection_speed: self.advection_speed,
        })
    }
}

/// Architecture of the learned flux. The input width follows from the
/// stencil offsets `p` and `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub kmax: usize,
    pub conv_kernel: usize,
    pub lift_layers: usize,
    pub proj_layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proj_hidden: Option<usize>,
    pub p: usize,
    pub q: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = FnoConfig::standard(2);
        Self {
            width: c.width,
            depth: c.depth,
            kmax: c.kmax,
            conv_kernel: c.conv_kernel,
            lift_layers: c.lift_layers,
            proj_layers: c.proj_layers,
            proj_hidden: None,
            p: 0,
            q: 1,
        }
    }
}

impl ModelSection {
    pub fn stencil(&self) -> Stencil {
        Stencil::new(self.p, self.q)
    }

    pub fn fno_config(&self) -> FnoConfig {
        FnoConfig {
            conv_kernel: self.conv_kernel,
            lift_layers: self.lift_layers,
            proj_layers: self.proj_layers,
            proj_hidden: self.proj_hidden.unwrap_or(self.width),
            ..FnoConfig::new(self.stencil().channels(), self.width, self.depth, self.kmax)
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Test,
    Ood,
    Resolution,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Test => "test",
            Suite::Ood => "ood",
            Suite::Resolution => "resolution",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub times: Vec<f64>,
    pub suites: Vec<Suite>,
    pub grf_scale: f64,
    pub resolutions: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            times: vec![0.4, 1.0],
            suites: vec![Suite::Test],
            grf_scale: 0.03,
            resolutions: vec![128, 256, 512],
            samples: 1,
            seed: 0,
        }
    }
}
