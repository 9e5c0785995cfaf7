//! `gen`: plant an instance and write instance.json + wstar.json.

use crate::artifacts;
use crate::config::ExperimentConfig;
use crate::jsonio;
use std::path::Path;

pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    let hash = jsonio::config_hash(&cfg.canonical_json());
    let art = artifacts::plant_screened(&cfg.instance)?;
    std::fs::create_dir_all(out_dir)?;
    artifacts::write_wstar(&out_dir.join("wstar.json"), &art, &hash)?;
    artifacts::write_instance(&out_dir.join("instance.json"), &art, &hash, "wstar.json")?;
    eprintln!(
        "planted instance: {} states, {} actions, depth {}, plant seed {} ({} attempt(s)), support rank {}/{}",
        art.spec.num_states(),
        art.spec.num_actions(),
        art.wstar.depth(),
        art.plant_seed,
        art.attempts,
        art.support_rank.0,
        art.support_rank.1,
    );
    Ok(())
}
