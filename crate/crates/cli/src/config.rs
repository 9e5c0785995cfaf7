//! Experiment configuration: a single JSON file whose keys can each be
//! overridden by the kebab-case command-line flag of the same path
//! (for example `train.eta` becomes `--train-eta`). The environment
//! variable `LAB_SEED` overrides `train.seed` last.

use anyhow::{bail, Context};
use dqlab_core::env::PlantConfig;
use dqlab_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceConfig {
    pub state_feature_dim: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub width: usize,
    pub depth: usize,
    pub gamma: f64,
    pub deterministic: bool,
    pub plant_seed: u64,
    /// Retry budget for planting an instance whose optimal-policy support
    /// identifies every weight coordinate (single-hidden-layer only).
    pub plant_attempts: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            state_feature_dim: 4,
            num_states: 96,
            num_actions: 2,
            width: 3,
            depth: 1,
            gamma: 0.5,
            deterministic: false,
            plant_seed: 1,
            plant_attempts: 256,
        }
    }
}

impl InstanceConfig {
    pub fn plant_config(&self) -> PlantConfig {
        PlantConfig {
            state_feature_dim: self.state_feature_dim,
            num_states: self.num_states,
            num_actions: self.num_actions,
            width: self.width,
            depth: self.depth,
            gamma: self.gamma,
            deterministic: self.deterministic,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bail!("instance.gamma {} outside (0,1)", self.gamma);
        }
        if self.num_states == 0
            || self.num_actions == 0
            || self.width == 0
            || self.depth == 0
            || self.state_feature_dim == 0
        {
            bail!("instance sizes must all be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub buffer_sizes: Vec<usize>,
    pub c_eps_values: Vec<f64>,
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Bisection probe for the largest recoverable perturbation radius,
    /// one probe per c_eps value.
    pub radius_probe: bool,
    pub probe_seeds: usize,
    pub probe_bisection_steps: usize,
    /// Upper end of the probe interval, as a multiple of ||W*||_F.
    pub probe_delta_max_factor: f64,
    /// A probe point converges when e_T drops below this fraction of e_0
    /// in at least 7 of probe_seeds runs.
    pub probe_converged_ratio: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            buffer_sizes: vec![512, 2048, 8192],
            c_eps_values: vec![0.05, 0.25],
            gammas: vec![0.5],
            deltas: vec![0.4],
            seeds: vec![1, 2, 3, 4, 5],
            radius_probe: false,
            probe_seeds: 10,
            probe_bisection_steps: 8,
            probe_delta_max_factor: 1.5,
            probe_converged_ratio: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub instance: InstanceConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub output_dir: Option<String>,
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Ok(seed) = std::env::var("LAB_SEED") {
            cfg.train.seed = seed
                .parse()
                .with_context(|| format!("LAB_SEED must be a 64-bit integer, got {seed:?}"))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.instance.validate()?;
        self.train.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        if self.sweep.buffer_sizes.is_empty()
            || self.sweep.c_eps_values.is_empty()
            || self.sweep.gammas.is_empty()
            || self.sweep.deltas.is_empty()
            || self.sweep.seeds.is_empty()
        {
            bail!("sweep axes must be nonempty");
        }
        Ok(())
    }

    /// Canonical JSON used for the configuration hash embedded in every
    /// output file. serde preserves field order, so these bytes are stable
    /// for a given configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
