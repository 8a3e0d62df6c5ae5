#![allow(dead_code)]

use std::path::PathBuf;

/// `DRCVR_DATA_ROOT`, falling back to `<workspace>/data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("DRCVR_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn ml100k() -> Option<PathBuf> {
    let path = data_root().join("ml-100k/u.data");
    if path.exists() {
        Some(path)
    } else {
        eprintln!("skipping: {} not found", path.display());
        None
    }
}

/// Writes a deterministic `user item rating` file: 40 users, 120 items,
/// roughly a third of the pairs rated.
pub fn write_toy_ratings(dir: &std::path::Path) -> PathBuf {
    let path = dir.join("toy.data");
    let mut out = String::new();
    for u in 1..=40u64 {
        for i in 1..=120u64 {
            let h = (u * 2_654_435_761 + i * 40_503) % 97;
            if h % 3 == 0 {
                let rating = 1 + (h + u + i / 7) % 5;
                out.push_str(&format!("{u}\t{i}\t{rating}\t0\n"));
            }
        }
    }
    std::fs::write(&path, out).expect("write toy ratings");
    path
}

/// A small semi-synthetic experiment config over [`write_toy_ratings`].
pub fn toy_config(ratings: &std::path::Path) -> drcvr::experiment::ExperimentConfig {
    let text = serde_json::json!({
        "dataset": {
            "kind": "semi_synthetic",
            "ratings": ratings,
            "synth": { "rho": 1.0, "epsilon": 2.0, "mf_epochs": 10, "test_items_per_user": 20, "logistic_epochs": 5 }
        },
        "train": {
            "rank": 4, "init_std": 0.1, "learning_rate": 0.01, "batch_size": 64, "max_epochs": 3,
            "propensity": { "epochs": 2, "batch_size": 256 },
            "meta": { "batch_size": 64 }
        },
        "seeds": [1, 2, 3]
    });
    drcvr::experiment::ExperimentConfig::from_value(text).expect("toy config")
}
