//! Single-file checkpoints: magic, header length, JSON header, f64 blob.
//!
//! Layout: `DRCVRCK1` | u64 LE header length | UTF-8 JSON header |
//! little-endian f64 parameters of every block in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::fm::FactorizationMachine;
use crate::models::lambda::{LambdaNetwork, LambdaShape};

const MAGIC: &[u8; 8] = b"DRCVRCK1";

/// The trained models of one run. Only the CVR model is always present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub cvr: FactorizationMachine,
    pub ctr: Option<FactorizationMachine>,
    pub imputation: Option<FactorizationMachine>,
    pub lambda: Option<LambdaNetwork>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BlockShape {
    Fm { num_features: usize, rank: usize },
    Lambda(LambdaShape),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    name: String,
    shape: BlockShape,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    seed: u64,
    hyperparameters: serde_json::Value,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub models: ModelBundle,
}

fn fm_block(name: &str, fm: &FactorizationMachine) -> Block {
    Block {
        name: name.to_string(),
        shape: BlockShape::Fm { num_features: fm.num_features(), rank: fm.rank() },
        len: fm.params().len(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.models;
        let mut blocks = vec![fm_block("cvr", &m.cvr)];
        let mut blob: Vec<&[f64]> = vec![m.cvr.params()];
        for (name, fm) in [("ctr", &m.ctr), ("imputation", &m.imputation)] {
            if let Some(fm) = fm {
                blocks.push(fm_block(name, fm));
                blob.push(fm.params());
            }
        }
        if let Some(net) = &m.lambda {
            blocks.push(Block {
                name: "lambda".into(),
                shape: BlockShape::Lambda(net.shape().clone()),
                len: net.num_params(),
            });
            blob.push(net.params());
        }
        let header =
            serde_json::to_vec(&Header { seed: self.seed, hyperparameters: self.hyperparameters.clone(), blocks })?;
        let total: usize = blob.iter().map(|b| b.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for value in blob.into_iter().flatten() {
            out.extend_from_slice(&value.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start =
            16usize.checked_add(header_len).filter(|&end| end <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        let body = &bytes[body_start..];
        let total: usize = header.blocks.iter().map(|b| b.len).sum();
        if body.len() != 8 * total {
            return Err(Error::Checkpoint(format!("expected {} parameter bytes, found {}", 8 * total, body.len())));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut cvr = None;
        let mut ctr = None;
        let mut imputation = None;
        let mut lambda = None;
        for block in header.blocks {
            let params: Vec<f64> = values.by_ref().take(block.len).collect();
            match (block.name.as_str(), block.shape) {
                (name, BlockShape::Fm { num_features, rank }) => {
                    let fm = FactorizationMachine::from_params(num_features, rank, params)?;
                    let slot = match name {
                        "cvr" => &mut cvr,
                        "ctr" => &mut ctr,
                        "imputation" => &mut imputation,
                        other => return Err(Error::Checkpoint(format!("unknown block `{other}`"))),
                    };
                    *slot = Some(fm);
                }
                ("lambda", BlockShape::Lambda(shape)) => {
                    lambda = Some(LambdaNetwork::from_params(shape, params)?);
                }
                (other, _) => return Err(Error::Checkpoint(format!("unexpected block `{other}`"))),
            }
        }
        Ok(Checkpoint {
            seed: header.seed,
            hyperparameters: header.hyperparameters,
            models: ModelBundle {
                cvr: cvr.ok_or_else(|| bad("checkpoint has no cvr block"))?,
                ctr,
                imputation,
                lambda,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn sample() -> Checkpoint {
        let mut rng = stream_rng(9, Stream::CvrInit);
        let mut cvr = FactorizationMachine::init(10, 3, 0.1, &mut rng);
        cvr.params_mut()[0] = f64::MIN_POSITIVE / 3.0;
        cvr.params_mut()[1] = -0.0;
        let imputation = FactorizationMachine::init(10, 2, 0.1, &mut rng);
        let lambda = LambdaNetwork::init(LambdaShape::new(4, 6), 0.01, 0.5, &mut rng).unwrap();
        Checkpoint {
            seed: 9,
            hyperparameters: serde_json::json!({"rank": 3, "lr": 0.001}),
            models: ModelBundle { cvr, ctr: None, imputation: Some(imputation), lambda: Some(lambda) },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let a = ck.models.cvr.params().iter().map(|x| x.to_bits());
        let b = back.models.cvr.params().iter().map(|x| x.to_bits());
        assert!(a.eq(b));
        assert_eq!(back, ck);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ck.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/ck.bin")), Err(Error::MissingFile(_))));
    }
}
