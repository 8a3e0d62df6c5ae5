//! `synth`: simulate semi-synthetic worlds and write them as dumps.

use std::path::{Path, PathBuf};

use super::config::{DatasetSpec, ExperimentConfig};
use super::data::simulate;
use super::run::CONFIG_FILE;
use crate::datasets::{write_dump, Manifest, SynthConfig};
use crate::error::{Error, Result};

/// Writes one dump per requested ρ and returns the directories. A single ρ
/// is written into `out` itself, several into `out/rho-<ρ>`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let DatasetSpec::SemiSynthetic { ratings, format, synth, .. } = &cfg.dataset else {
        return Err(Error::validation("synth needs a semi_synthetic dataset"));
    };
    let hash = cfg.hash();
    let rhos = if cfg.synth.rhos.is_empty() { vec![synth.rho] } else { cfg.synth.rhos.clone() };
    let mut dirs = Vec::new();
    for &rho in &rhos {
        let world_cfg = SynthConfig { rho, ..synth.clone() };
        world_cfg.validate()?;
        let (world, dataset) = simulate(ratings, *format, &world_cfg)?;
        let dir = if cfg.synth.rhos.is_empty() { out.to_path_buf() } else { out.join(format!("rho-{rho}")) };
        let manifest = Manifest {
            mean_p_ctr: Some(world.p_ctr.mean()),
            mean_p_cvr: Some(world.p_cvr.mean()),
            ..Manifest::describe(&dataset, world_cfg.seed, hash.clone())
        };
        write_dump(&dir, &dataset, &manifest)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_pretty_json()).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
        log::info!("rho {rho}: {} clicks written to {}", dataset.num_clicked(), dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}
