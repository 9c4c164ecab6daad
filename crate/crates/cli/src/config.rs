//! Experiment configuration and its JSON schema.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use lasdi::fom::{FomConfig, Grid2D, ParameterPoint, TimeMode};
use lasdi::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Evenly spaced values `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| if i + 1 == self.count { self.max } else { self.min + step * i as f64 })
            .collect()
    }
}

/// Tensor grid over `(ν, ω)`. Index `i = i_ν · n_ω + i_ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterGrid {
    pub nu: Axis,
    pub omega: Axis,
}

impl ParameterGrid {
    pub fn len(&self) -> usize {
        self.nu.count * self.omega.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<ParameterPoint> {
        let om = self.omega.values();
        self.nu
            .values()
            .into_iter()
            .flat_map(|nu| om.iter().map(move |&w| ParameterPoint { nu, omega: w }))
            .collect()
    }

    pub fn corners(&self) -> Vec<usize> {
        let (n, m) = (self.nu.count, self.omega.count);
        vec![0, m - 1, (n - 1) * m, n * m - 1]
    }

    pub fn contains(&self, theta: &ParameterPoint) -> bool {
        let inside = |a: &Axis, v: f64| v >= a.min.min(a.max) && v <= a.max.max(a.min);
        inside(&self.nu, theta.nu) && inside(&self.omega, theta.omega)
    }

    /// Grid index of `theta` if it coincides with a node.
    pub fn index_of(&self, theta: &ParameterPoint) -> Option<usize> {
        self.points().iter().position(|p| p == theta)
    }
}

/// Autoencoder architecture; the input width is the number of grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_widths: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default = "default_frequency")]
    pub init_frequency: f64,
}

fn default_frequency() -> f64 {
    lasdi::rom::DEFAULT_FREQUENCY
}

impl NetworkConfig {
    pub fn encoder_widths(&self, n_u: usize) -> Vec<usize> {
        let mut w = vec![n_u];
        w.extend(&self.hidden_widths);
        w.push(self.latent_dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fom: FomConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub grid: ParameterGrid,
    /// Grid indices of the initial training set; the four corners when unset.
    #[serde(default)]
    pub initial_indices: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub rollout: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Small grid and short training for runs on one core.
    pub fn desk() -> Self {
        Self {
            fom: FomConfig {
                grid: Grid2D::square(21),
                n_t: 100,
                ..FomConfig::default()
            },
            train: TrainConfig {
                epochs: 2000,
                greedy_every: 500,
                ..TrainConfig::default()
            },
            network: NetworkConfig {
                hidden_widths: vec![40],
                latent_dim: 3,
                init_frequency: default_frequency(),
            },
            grid: ParameterGrid {
                nu: Axis { min: 0.05, max: 0.25, count: 3 },
                omega: Axis { min: 0.5, max: 1.5, count: 3 },
            },
            initial_indices: Some(vec![0, 8]),
            rollout: true,
            seed: 0,
        }
    }

    /// Full-size setup: 51×51 nodes, 500 steps, 11×11 parameters.
    pub fn paper() -> Self {
        Self {
            fom: FomConfig::default(),
            train: TrainConfig::default(),
            network: NetworkConfig {
                hidden_widths: vec![1000, 200, 50],
                latent_dim: 5,
                init_frequency: default_frequency(),
            },
            grid: ParameterGrid {
                nu: Axis { min: 0.05, max: 0.25, count: 11 },
                omega: Axis { min: 0.5, max: 1.5, count: 11 },
            },
            initial_indices: None,
            rollout: true,
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn initial(&self) -> Vec<usize> {
        self.initial_indices.clone().unwrap_or_else(|| self.grid.corners())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.fom.validate()?;
        self.train.validate()?;
        for (name, a) in [("nu", &self.grid.nu), ("omega", &self.grid.omega)] {
            if a.count < 2 {
                return Err(CliError::Config(format!("{name} axis needs at least 2 values")));
            }
            if !(a.min.is_finite() && a.max.is_finite() && a.max > a.min) {
                return Err(CliError::Config(format!("{name} axis needs finite min < max")));
            }
        }
        if !(self.grid.nu.min > 0.0) {
            return Err(CliError::Config("viscosity values must be positive".into()));
        }
        let init = self.initial();
        if init.is_empty() {
            return Err(CliError::Config("initial training set is empty".into()));
        }
        for (k, &i) in init.iter().enumerate() {
            if i >= self.grid.len() {
                return Err(CliError::Config(format!(
                    "initial index {i} is off the {}-point grid",
                    self.grid.len()
                )));
            }
            if init[..k].contains(&i) {
                return Err(CliError::Config(format!("initial index {i} listed twice")));
            }
        }
        if self.network.latent_dim == 0 || self.network.hidden_widths.contains(&0) {
            return Err(CliError::Config("network widths must be positive".into()));
        }
        if !(self.network.init_frequency > 0.0) {
            return Err(CliError::Config("init_frequency must be positive".into()));
        }
        Ok(())
    }

    /// Settings after applying the top-level seed and the rollout switch.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.fom.seed = self.seed;
        c.train.seed = self.seed;
        if !self.rollout {
            c.train.eta3 = 0.0;
        }
        c.initial_indices = Some(self.initial());
        c
    }

    /// Hash of everything except the ablation switches (rollout weight and
    /// time mode), so arms of one study can be checked for consistency.
    pub fn shared_hash(&self) -> u64 {
        let mut c = self.resolved();
        c.rollout = true;
        c.train.eta3 = 0.0;
        c.fom.time_mode = TimeMode::Fixed;
        let text = serde_json::to_string(&c).expect("config serializes");
        let mut h = DefaultHasher::new();
        text.hash(&mut h);
        h.finish()
    }
}
