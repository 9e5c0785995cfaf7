//! Planting with support screening, and reading/writing the instance and
//! ground-truth files.

use crate::config::InstanceConfig;
use crate::jsonio::{self, JsonObject};
use anyhow::{bail, Context};
use dqlab_core::analysis::support_rank;
use dqlab_core::env::{self, MdpSpec};
use dqlab_core::numerics::RngState;
use dqlab_core::qnet::NetworkWeights;
use std::path::Path;

pub struct PlantedArtifacts {
    pub spec: MdpSpec,
    pub wstar: NetworkWeights,
    /// Seed that produced the accepted instance.
    pub plant_seed: u64,
    /// Number of seeds tried before acceptance.
    pub attempts: usize,
    pub support_rank: (usize, usize),
    pub mu_star_mixing_floor: bool,
}

/// Plants an instance. Single-hidden-layer instances are retried on
/// derived seeds until the optimal-policy support identifies every weight
/// coordinate (full gradient rank); deeper networks carry structural null
/// directions, so they are accepted as drawn.
pub fn plant_screened(cfg: &InstanceConfig) -> anyhow::Result<PlantedArtifacts> {
    let plant_cfg = cfg.plant_config();
    let mut attempts = 0;
    let mut last_rank = (0, 0);
    while attempts < cfg.plant_attempts.max(1) {
        let seed = if attempts == 0 {
            cfg.plant_seed
        } else {
            RngState::derive_seed(cfg.plant_seed, &[0x706c_616e_74, attempts as u64])
        };
        let mut rng = RngState::seed_from_u64(seed);
        let (spec, wstar) = dqlab_core::env::plant(&plant_cfg, &mut rng)
            .map_err(|e| anyhow::anyhow!("planting failed: {e}"))?;
        let rank = support_rank(&spec, &wstar).map_err(|e| anyhow::anyhow!("{e}"))?;
        last_rank = rank;
        attempts += 1;
        if cfg.depth > 1 || rank.0 == rank.1 {
            let (_, dist) = env::mu_star(&spec, &wstar).map_err(|e| anyhow::anyhow!("{e}"))?;
            return Ok(PlantedArtifacts {
                spec,
                wstar,
                plant_seed: seed,
                attempts,
                support_rank: rank,
                mu_star_mixing_floor: dist.mixing_floor_applied,
            });
        }
    }
    bail!(
        "no identifiable instance within {} attempts (last support rank {}/{}); \
         raise num_states or plant_attempts",
        cfg.plant_attempts,
        last_rank.0,
        last_rank.1
    )
}

pub fn write_wstar(path: &Path, art: &PlantedArtifacts, hash: &str) -> anyhow::Result<()> {
    let meta = jsonio::meta_object(
        hash,
        &[("plant_seed", art.plant_seed.to_string()), ("plant_attempts", art.attempts.to_string())],
    );
    let body = JsonObject::new().raw("meta", &meta).raw("weights", &art.wstar.to_json()).finish();
    jsonio::write_file(path, &body)
}

pub fn write_instance(
    path: &Path,
    art: &PlantedArtifacts,
    hash: &str,
    wstar_file: &str,
) -> anyhow::Result<()> {
    let meta = jsonio::meta_object(
        hash,
        &[
            ("plant_seed", art.plant_seed.to_string()),
            ("plant_attempts", art.attempts.to_string()),
            ("wstar_file", jsonio::escape(wstar_file)),
            ("support_rank", format!("[{},{}]", art.support_rank.0, art.support_rank.1)),
            ("mu_star_mixing_floor", art.mu_star_mixing_floor.to_string()),
        ],
    );
    let body = JsonObject::new().raw("meta", &meta).raw("mdp", &art.spec.to_json(&[])).finish();
    jsonio::write_file(path, &body)
}

pub fn read_instance(path: &Path) -> anyhow::Result<MdpSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mdp = value
        .get("mdp")
        .ok_or_else(|| anyhow::anyhow!("{}: missing \"mdp\" object", path.display()))?;
    MdpSpec::from_json(&serde_json::to_string(mdp)?)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn read_wstar(path: &Path) -> anyhow::Result<NetworkWeights> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let weights = value
        .get("weights")
        .ok_or_else(|| anyhow::anyhow!("{}: missing \"weights\" object", path.display()))?;
    NetworkWeights::from_json(&serde_json::to_string(weights)?)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
