//! On-disk cache of converged crystals keyed by the crystal part of the configuration.

use std::path::{Path, PathBuf};

use polaron_core::crystal::scf_solve;
use polaron_core::CrystalState;

use crate::config::ExperimentConfig;
use crate::LabError;

pub const CACHE_ENV: &str = "POLARON_LAB_CACHE";

pub fn root() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".polaron-lab-cache"))
}

/// Loads the crystal for `cfg` from the cache or solves and stores it. Returns whether it was a hit.
pub fn crystal(cfg: &ExperimentConfig, root: &Path, no_cache: bool) -> Result<(CrystalState, bool), LabError> {
    let hash = cfg.crystal_hash();
    let dir = root.join(&hash);
    if !no_cache && dir.exists() {
        if let Ok(c) = CrystalState::load(&dir, &hash) {
            return Ok((c, true));
        }
    }
    let c = scf_solve(&cfg.nuclei, &cfg.lattice, cfg.mass, &cfg.scf)?;
    if !no_cache {
        c.save(&dir, &hash)?;
    }
    Ok((c, false))
}
