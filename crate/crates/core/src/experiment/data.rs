//! Building the dataset of a run from its [`DatasetSpec`].

use std::path::Path;

use super::config::{resolve_data_path, DatasetSpec};
use crate::datasets::{
    binarize_mnar, fit_logistic_mf, fit_rating_mf, generate_semisynthetic, load_explicit_ratings, load_rating_pair,
    mar_test_pairs, read_dump, restrict_test_users, GroundTruthWorld, InteractionDataset, RatingFormat, SynthConfig,
};
use crate::error::{Error, Result};

pub struct LoadedDataset {
    pub name: String,
    pub dataset: InteractionDataset,
    /// Known click and conversion probabilities of a simulated world.
    pub world: Option<GroundTruthWorld>,
}

fn existing(path: &Path) -> Result<std::path::PathBuf> {
    let resolved = resolve_data_path(path);
    if resolved.exists() {
        Ok(resolved)
    } else {
        Err(Error::MissingFile(resolved))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Fits both matrix factorisations and samples a world.
pub fn simulate(
    ratings: &Path,
    format: RatingFormat,
    cfg: &SynthConfig,
) -> Result<(GroundTruthWorld, InteractionDataset)> {
    let table = load_explicit_ratings(&existing(ratings)?, format)?;
    let observed: Vec<(usize, usize)> = table.ratings.iter().map(|r| (r.user, r.item)).collect();
    let r_hat = fit_rating_mf(&table, &cfg.rating_mf(), cfg.seed)?.matrix;
    let o_hat = fit_logistic_mf(table.num_users, table.num_items, &observed, &cfg.logistic_mf(), cfg.seed)?.matrix;
    generate_semisynthetic(&r_hat, &o_hat, cfg)
}

/// The dataset used by run `seed`.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<LoadedDataset> {
    match spec {
        DatasetSpec::SemiSynthetic { ratings, format, synth, resample_per_seed } => {
            let cfg = SynthConfig { seed: if *resample_per_seed { seed } else { synth.seed }, ..synth.clone() };
            let (world, dataset) = simulate(ratings, *format, &cfg)?;
            Ok(LoadedDataset {
                name: format!("semi_synthetic:{}:rho={}", file_name(ratings), cfg.rho),
                dataset,
                world: Some(world),
            })
        }
        DatasetSpec::Real { train, test, format, split_seed } => {
            let (train_table, test_table) = load_rating_pair(&existing(train)?, &existing(test)?, *format)?;
            let dataset = binarize_mnar(&train_table, *split_seed)?.with_test(mar_test_pairs(&test_table))?;
            Ok(LoadedDataset {
                name: format!("real:{}", file_name(train)),
                dataset: restrict_test_users(dataset),
                world: None,
            })
        }
        DatasetSpec::Dump { dir } => {
            let (_, dataset) = read_dump(&existing(dir)?)?;
            Ok(LoadedDataset { name: format!("dump:{}", file_name(dir)), dataset, world: None })
        }
    }
}
