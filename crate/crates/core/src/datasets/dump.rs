//! Canonical on-disk form of an interaction dataset.
//!
//! A dump directory holds `clicks.tsv` (every clicked event, sorted by
//! user then item), `test.tsv` and `manifest.json`. The train/validation
//! split is not stored; it is re-derived from the split seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_clicks, DatasetKind, Event, InteractionDataset, LabeledPair};
use crate::error::{Error, Result};

pub const CLICKS_FILE: &str = "clicks.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub num_users: usize,
    pub num_items: usize,
    pub num_clicks: usize,
    pub num_conversions: usize,
    pub num_train: usize,
    pub num_validation: usize,
    pub num_test: usize,
    pub num_test_positive: usize,
    pub split_seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_p_ctr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_p_cvr: Option<f64>,
}

impl Manifest {
    pub fn describe(dataset: &InteractionDataset, split_seed: u64, config_hash: impl Into<String>) -> Self {
        Manifest {
            kind: dataset.kind(),
            num_users: dataset.num_users(),
            num_items: dataset.num_items(),
            num_clicks: dataset.num_clicked(),
            num_conversions: dataset.clicked_events().filter(|e| e.converted).count(),
            num_train: dataset.train().len(),
            num_validation: dataset.validation().len(),
            num_test: dataset.test().len(),
            num_test_positive: dataset.test().iter().filter(|p| p.label).count(),
            split_seed,
            config_hash: config_hash.into(),
            mean_p_ctr: None,
            mean_p_cvr: None,
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_dump(dir: &Path, dataset: &InteractionDataset, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut events: Vec<Event> = dataset.clicked_events().copied().collect();
    events.sort_unstable();
    let mut clicks = String::from("user\titem\tconverted\n");
    for e in &events {
        writeln!(clicks, "{}\t{}\t{}", e.user, e.item, u8::from(e.converted)).expect("string write");
    }
    let mut test = String::from("user\titem\tlabel\n");
    for p in dataset.test() {
        writeln!(test, "{}\t{}\t{}", p.user, p.item, u8::from(p.label)).expect("string write");
    }
    write(&dir.join(CLICKS_FILE), &clicks)?;
    write(&dir.join(TEST_FILE), &test)?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    write(&dir.join(MANIFEST_FILE), &json)
}

fn read_rows(path: &Path) -> Result<Vec<(usize, usize, bool)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err =
        |line: usize, msg: &str| Error::Parse { path: path.display().to_string(), line, msg: msg.to_string() };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(idx + 1, "expected 3 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(idx + 1, "expected an integer"));
        let flag = match fields[2] {
            "0" => false,
            "1" => true,
            _ => return Err(parse_err(idx + 1, "label must be 0 or 1")),
        };
        rows.push((num(fields[0])?, num(fields[1])?, flag));
    }
    Ok(rows)
}

pub fn read_dump(dir: &Path) -> Result<(Manifest, InteractionDataset)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let events: Vec<Event> = read_rows(&dir.join(CLICKS_FILE))?
        .into_iter()
        .map(|(user, item, converted)| Event { user, item, converted })
        .collect();
    let test: Vec<LabeledPair> = read_rows(&dir.join(TEST_FILE))?
        .into_iter()
        .map(|(user, item, label)| LabeledPair { user, item, label })
        .collect();
    if events.len() != manifest.num_clicks || test.len() != manifest.num_test {
        return Err(Error::validation(format!("{}: row counts do not match the manifest", dir.display())));
    }
    let (train, validation) = split_clicks(events, manifest.split_seed);
    let dataset =
        InteractionDataset::new(manifest.kind, manifest.num_users, manifest.num_items, train, validation, test)?;
    Ok((manifest, dataset))
}
