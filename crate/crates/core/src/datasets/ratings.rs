//! Explicit rating files and their conversion into click/conversion events.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_clicks, DatasetKind, Event, InteractionDataset, LabeledPair};
use crate::error::{Error, Result};

/// Ratings at or above this value count as conversions.
pub const CONVERSION_THRESHOLD: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    /// Whitespace-separated matrix, one user per row, 0 meaning unrated.
    Dense,
    /// `user item rating [timestamp]` rows, tab or space separated.
    Triples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

/// Ratings with contiguous 0-based ids. `user_ids[k]` is the original id of
/// user index `k` (row number for dense files).
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTable {
    pub num_users: usize,
    pub num_items: usize,
    pub ratings: Vec<Rating>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

struct RawRating {
    user: u64,
    item: u64,
    rating: u8,
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn parse_rating(path: &Path, line: usize, field: &str) -> Result<u8> {
    let value: f64 = field.parse().map_err(|_| parse_error(path, line, format!("rating `{field}` is not a number")))?;
    if value.fract() != 0.0 || !(1.0..=5.0).contains(&value) {
        return Err(Error::validation(format!("{}:{line}: rating {value} outside 1..5", path.display())));
    }
    Ok(value as u8)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_dense(path: &Path) -> Result<(Vec<RawRating>, u64, u64)> {
    let text = read(path)?;
    let mut out = Vec::new();
    let mut rows = 0u64;
    let mut width: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(parse_error(path, line_no, format!("expected {w} columns, found {}", fields.len())));
            }
            _ => {}
        }
        for (col, field) in fields.iter().enumerate() {
            let value: f64 =
                field.parse().map_err(|_| parse_error(path, line_no, format!("cell `{field}` is not a number")))?;
            if value == 0.0 {
                continue;
            }
            out.push(RawRating { user: rows, item: col as u64, rating: parse_rating(path, line_no, field)? });
        }
        rows += 1;
    }
    Ok((out, rows, width.unwrap_or(0) as u64))
}

fn parse_triples(path: &Path) -> Result<Vec<RawRating>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_error(path, line_no, format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        let id = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| parse_error(path, line_no, format!("{what} id `{s}` is not a non-negative integer")))
        };
        out.push(RawRating {
            user: id(fields[0], "user")?,
            item: id(fields[1], "item")?,
            rating: parse_rating(path, line_no, fields[2])?,
        });
    }
    Ok(out)
}

fn index_map(ids: impl Iterator<Item = u64>) -> BTreeMap<u64, usize> {
    let mut map: BTreeMap<u64, usize> = ids.map(|id| (id, 0)).collect();
    for (k, v) in map.values_mut().enumerate() {
        *v = k;
    }
    map
}

fn build_tables(parts: Vec<Vec<RawRating>>, dense_shape: Option<(u64, u64)>) -> Vec<RatingTable> {
    let (users, items) = match dense_shape {
        Some((rows, cols)) => (index_map(0..rows), index_map(0..cols)),
        None => (index_map(parts.iter().flatten().map(|r| r.user)), index_map(parts.iter().flatten().map(|r| r.item))),
    };
    parts
        .into_iter()
        .map(|raw| RatingTable {
            num_users: users.len(),
            num_items: items.len(),
            ratings: raw
                .into_iter()
                .map(|r| Rating { user: users[&r.user], item: items[&r.item], rating: r.rating })
                .collect(),
            user_ids: users.keys().copied().collect(),
            item_ids: items.keys().copied().collect(),
        })
        .collect()
}

/// Reads a rating file. Triple ids are reindexed in ascending order of the
/// original id.
pub fn load_explicit_ratings(path: &Path, format: RatingFormat) -> Result<RatingTable> {
    let tables = match format {
        RatingFormat::Dense => {
            let (raw, rows, cols) = parse_dense(path)?;
            build_tables(vec![raw], Some((rows, cols)))
        }
        RatingFormat::Triples => build_tables(vec![parse_triples(path)?], None),
    };
    Ok(tables.into_iter().next().expect("one table"))
}

/// Reads an MNAR training file and its MAR test file with a shared id space.
pub fn load_rating_pair(train: &Path, test: &Path, format: RatingFormat) -> Result<(RatingTable, RatingTable)> {
    let mut tables = match format {
        RatingFormat::Dense => {
            let (a, rows_a, cols_a) = parse_dense(train)?;
            let (b, rows_b, cols_b) = parse_dense(test)?;
            if (rows_a, cols_a) != (rows_b, cols_b) {
                return Err(Error::validation(format!(
                    "train matrix is {rows_a}x{cols_a} but test matrix is {rows_b}x{cols_b}"
                )));
            }
            build_tables(vec![a, b], Some((rows_a, cols_a)))
        }
        RatingFormat::Triples => build_tables(vec![parse_triples(train)?, parse_triples(test)?], None),
    };
    let test_table = tables.pop().expect("two tables");
    let train_table = tables.pop().expect("two tables");
    Ok((train_table, test_table))
}

/// Every rated pair becomes a clicked event converted iff rating ≥ 4;
/// clicked events are split 90/10 into train/validation.
pub fn binarize_mnar(table: &RatingTable, split_seed: u64) -> Result<InteractionDataset> {
    if table.ratings.is_empty() {
        return Err(Error::validation("cannot binarize an empty rating table"));
    }
    let events = table
        .ratings
        .iter()
        .map(|r| Event { user: r.user, item: r.item, converted: r.rating >= CONVERSION_THRESHOLD })
        .collect();
    let (train, validation) = split_clicks(events, split_seed);
    InteractionDataset::new(DatasetKind::Real, table.num_users, table.num_items, train, validation, Vec::new())
}

/// MAR ratings as relevance-labelled test pairs, sorted by (user, item).
pub fn mar_test_pairs(table: &RatingTable) -> Vec<LabeledPair> {
    let mut pairs: Vec<LabeledPair> = table
        .ratings
        .iter()
        .map(|r| LabeledPair { user: r.user, item: r.item, label: r.rating >= CONVERSION_THRESHOLD })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Keeps only test users with at least one positive label.
pub fn restrict_test_users(dataset: InteractionDataset) -> InteractionDataset {
    let positive: std::collections::HashSet<usize> =
        dataset.test().iter().filter(|p| p.label).map(|p| p.user).collect();
    let test: Vec<LabeledPair> = dataset.test().iter().copied().filter(|p| positive.contains(&p.user)).collect();
    if test.is_empty() {
        log::warn!("no test user has a positive label; the test split is empty");
    }
    dataset.with_test(test).expect("subset of a valid test split")
}
