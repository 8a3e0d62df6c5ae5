//! `sweep`: Cartesian grid over config keys with validation-based winner
//! selection and one curve table per swept key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{set_path, ExperimentConfig};
use super::run::{evaluate_model, train_seed, write_json, CONFIG_FILE};
use crate::error::{Error, Result};
use crate::evaluation::Aggregate;

pub const SWEEP_FILE: &str = "sweep.json";
pub const WINNER_FILE: &str = "winner.json";

pub type Assignment = BTreeMap<String, serde_json::Value>;

/// Every combination of the grid, ordered with the last key varying
/// fastest.
pub fn grid_points(grid: &BTreeMap<String, Vec<serde_json::Value>>) -> Result<Vec<Assignment>> {
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Err(Error::validation("sweep grid is empty"));
    }
    let mut points = vec![Assignment::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut next = p.clone();
                    next.insert(key.clone(), v.clone());
                    next
                })
            })
            .collect();
    }
    Ok(points)
}

pub fn apply(cfg: &ExperimentConfig, point: &Assignment) -> Result<ExperimentConfig> {
    let mut value = cfg.to_value();
    for (k, v) in point {
        set_path(&mut value, k, v.clone())?;
    }
    ExperimentConfig::from_value(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub assignment: Assignment,
    pub config_hash: String,
    /// Best validation score per seed.
    pub validation: Option<Aggregate>,
    pub test: BTreeMap<String, Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
    pub winner: Option<usize>,
}

fn canonical(a: &Assignment) -> String {
    serde_json::to_string(a).expect("assignment serialises")
}

/// Index of the point with the highest mean validation score; ties go to
/// the lexicographically smallest assignment.
pub fn select_winner(points: &[SweepPoint]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, p) in points.iter().enumerate() {
        let Some(score) = p.validation.as_ref().map(|v| v.mean).filter(|m| m.is_finite()) else { continue };
        best = match best {
            None => Some((idx, score)),
            Some((b, s))
                if score > s || (score == s && canonical(&p.assignment) < canonical(&points[b].assignment)) =>
            {
                Some((idx, score))
            }
            keep => keep,
        };
    }
    best.map(|(i, _)| i)
}

fn run_point(cfg: &ExperimentConfig) -> Result<(Option<Aggregate>, BTreeMap<String, Aggregate>)> {
    let mut validation = Vec::new();
    let mut test: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let (loaded, outcome) = train_seed(cfg, seed)?;
        validation.push(outcome.best_validation);
        for (k, v) in evaluate_model(&loaded.dataset, &outcome.models.cvr, &cfg.eval)? {
            test.entry(k).or_default().push(v);
        }
    }
    let validation = validation.into_iter().collect::<Option<Vec<f64>>>().map(Aggregate::from_values);
    Ok((validation, test.into_iter().map(|(k, v)| (k, Aggregate::from_values(v))).collect()))
}

/// Tab-separated curve for one key: for each value, the best point among
/// those sharing it.
pub fn curve_table(points: &[SweepPoint], key: &str) -> String {
    let metrics: Vec<String> = points
        .iter()
        .flat_map(|p| p.test.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = format!("{key}\tvalidation_mean");
    for m in &metrics {
        write!(out, "\t{m}_mean\t{m}_std").expect("string write");
    }
    out.push('\n');
    let mut groups: Vec<(String, Vec<&SweepPoint>)> = Vec::new();
    for p in points {
        let label = p.assignment.get(key).map(|v| v.to_string()).unwrap_or_default();
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, g)) => g.push(p),
            None => groups.push((label, vec![p])),
        }
    }
    for (label, group) in groups {
        let owned: Vec<SweepPoint> = group.into_iter().cloned().collect();
        let Some(best) = select_winner(&owned).map(|i| &owned[i]) else {
            writeln!(out, "{label}\tNA").expect("string write");
            continue;
        };
        write!(out, "{label}\t{}", best.validation.as_ref().map_or(f64::NAN, |v| v.mean)).expect("string write");
        for m in &metrics {
            match best.test.get(m) {
                Some(a) => write!(out, "\t{}\t{}", a.mean, a.std),
                None => write!(out, "\tNA\tNA"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Runs every grid point over the configured seeds, in parallel, and writes
/// `sweep.json`, the winning resolved config and one curve per key.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    let points = grid_points(&cfg.sweep.grid)?;
    let configs: Vec<ExperimentConfig> = points.iter().map(|p| apply(cfg, p)).collect::<Result<_>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_pretty_json()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;
    let results: Vec<SweepPoint> = points
        .into_par_iter()
        .zip(configs.par_iter())
        .map(|(assignment, point_cfg)| {
            let config_hash = point_cfg.hash();
            match run_point(point_cfg) {
                Ok((validation, test)) => SweepPoint { assignment, config_hash, validation, test, error: None },
                Err(e) => {
                    log::error!("sweep point {} failed: {e}", canonical(&assignment));
                    SweepPoint {
                        assignment,
                        config_hash,
                        validation: None,
                        test: BTreeMap::new(),
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let winner = select_winner(&results);
    let report = SweepReport { config_hash: cfg.hash(), points: results, winner };
    write_json(&out.join(SWEEP_FILE), &report)?;
    if let Some(w) = winner {
        std::fs::write(out.join(WINNER_FILE), configs[w].to_pretty_json())
            .map_err(|e| Error::io(out.join(WINNER_FILE), e))?;
    }
    for key in cfg.sweep.grid.keys() {
        let path = out.join(format!("curve_{}.tsv", key.replace('.', "_")));
        let table = format!("# config_hash={}\n{}", report.config_hash, curve_table(&report.points, key));
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn point(pairs: &[(&str, serde_json::Value)], validation: Option<f64>) -> SweepPoint {
        SweepPoint {
            assignment: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            config_hash: String::new(),
            validation: validation.map(|v| Aggregate::from_values(vec![v])),
            test: BTreeMap::new(),
            error: None,
        }
    }

    #[test]
    fn cartesian_product_in_key_order() {
        let mut grid = BTreeMap::new();
        grid.insert("a".to_string(), vec![json!(1), json!(2)]);
        grid.insert("b".to_string(), vec![json!("x"), json!("y"), json!("z")]);
        let points = grid_points(&grid).unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!(points[1]["b"], json!("y"));
        assert_eq!(points[3]["a"], json!(2));
        assert!(grid_points(&BTreeMap::new()).is_err());
        grid.insert("c".to_string(), vec![]);
        assert!(grid_points(&grid).is_err());
    }

    #[test]
    fn winner_ties_break_lexicographically() {
        let points = vec![
            point(&[("train.l2", json!(0.01))], Some(0.7)),
            point(&[("train.l2", json!(0.001))], Some(0.7)),
            point(&[("train.l2", json!(0.1))], Some(0.6)),
            point(&[("train.l2", json!(0.0))], None),
        ];
        assert_eq!(select_winner(&points), Some(1));
        let reversed: Vec<SweepPoint> = points.iter().rev().cloned().collect();
        assert_eq!(reversed[select_winner(&reversed).unwrap()].assignment, points[1].assignment);
        assert_eq!(select_winner(&points[3..]), None);
    }

    #[test]
    fn apply_validates_each_point() {
        let cfg = ExperimentConfig::default();
        let mut p = Assignment::new();
        p.insert("train.lambda.fixed".into(), json!(0.3));
        assert_eq!(apply(&cfg, &p).unwrap().train.lambda.fixed, 0.3);
        p.insert("train.sample_ratio".into(), json!(5));
        assert!(apply(&cfg, &p).is_err());
    }

    #[test]
    fn curve_keeps_value_order() {
        let points = vec![
            point(&[("k", json!(0.1)), ("m", json!(1))], Some(0.5)),
            point(&[("k", json!(0.1)), ("m", json!(2))], Some(0.6)),
            point(&[("k", json!(0.9)), ("m", json!(1))], Some(0.4)),
        ];
        let table = curve_table(&points, "k");
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "k\tvalidation_mean");
        assert_eq!(lines[1], "0.1\t0.6");
        assert_eq!(lines[2], "0.9\t0.4");
    }
}
