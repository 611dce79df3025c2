//! Single-file checkpoint container.
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 4     | magic `EGCK`                                         |
//! | 8     | manifest length `L`, `u64` little-endian             |
//! | L     | UTF-8 JSON manifest                                  |
//! | rest  | concatenated `EGT1` records                          |
//!
//! The manifest lists every tensor as `{name, offset, shape}` with `offset`
//! counted from the first record, plus the model configuration, seed, step,
//! generator state and any extra training metadata. Tensors named
//! `adam.m.<param>` / `adam.v.<param>` hold optimizer moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{egt, ParamSet, RngState};

pub const MAGIC: &[u8; 4] = b"EGCK";
const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Opaque training settings, kept for exact resumption.
    pub train: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub rng: Option<RngState>,
    pub focal_alpha: Option<Vec<f64>>,
    pub params: ParamSet,
    pub adam_m: Option<ParamSet>,
    pub adam_v: Option<ParamSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    model: ModelConfig,
    train: serde_json::Value,
    seed: u64,
    step: u64,
    rng: Option<RngState>,
    focal_alpha: Option<Vec<f64>>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// A checkpoint holding only parameters.
    pub fn from_params(model: ModelConfig, params: ParamSet, seed: u64) -> Self {
        Checkpoint {
            model,
            train: serde_json::Value::Null,
            seed,
            step: 0,
            rng: None,
            focal_alpha: None,
            params,
            adam_m: None,
            adam_v: None,
        }
    }

    fn named_tensors(&self) -> Vec<(String, &crate::numerics::Tensor)> {
        let mut out: Vec<_> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        for (prefix, set) in [(MOMENT_M, &self.adam_m), (MOMENT_V, &self.adam_v)] {
            if let Some(set) = set {
                out.extend(set.iter().map(|(k, t)| (format!("{prefix}{k}"), t)));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            entries.push(TensorEntry {
                name,
                offset: records.len() as u64,
                shape: t.shape().to_vec(),
            });
            egt::write_tensor(&mut records, t).expect("writing to a Vec cannot fail");
        }
        let manifest = Manifest {
            format: "EGCK1".into(),
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            step: self.step,
            rng: self.rng.clone(),
            focal_alpha: self.focal_alpha.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + records.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&records);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: String| Error::Checkpoint(why);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing EGCK header".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(12..12usize.saturating_add(len))
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != "EGCK1" {
            return Err(bad(format!("unknown format {:?}", manifest.format)));
        }
        let data = &bytes[12 + len..];
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        let mut expected_offset = 0usize;
        for entry in &manifest.tensors {
            let off = entry.offset as usize;
            if off != expected_offset {
                return Err(bad(format!("tensor {} at unexpected offset {off}", entry.name)));
            }
            let end = off + egt::record_len(&entry.shape);
            let record = data
                .get(off..end)
                .ok_or_else(|| bad(format!("tensor {} runs past the end", entry.name)))?;
            let t = egt::from_bytes(record)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(bad(format!("tensor {} shape disagrees with manifest", entry.name)));
            }
            expected_offset = end;
            if let Some(rest) = entry.name.strip_prefix(MOMENT_M) {
                m.insert(rest, t);
            } else if let Some(rest) = entry.name.strip_prefix(MOMENT_V) {
                v.insert(rest, t);
            } else {
                params.insert(entry.name.clone(), t);
            }
        }
        if expected_offset != data.len() {
            return Err(bad(format!("{} trailing bytes", data.len() - expected_offset)));
        }
        Ok(Checkpoint {
            model: manifest.model,
            train: manifest.train,
            seed: manifest.seed,
            step: manifest.step,
            rng: manifest.rng,
            focal_alpha: manifest.focal_alpha,
            params,
            adam_m: (!m.is_empty()).then_some(m),
            adam_v: (!v.is_empty()).then_some(v),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(why) => Error::Checkpoint(format!("{}: {why}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::Rng;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = ModelConfig {
            shallow_channels: 4,
            heads: 2,
            ..Default::default()
        };
        let mut rng = Rng::seed_from_u64(3);
        let params = init_params(&cfg, &mut rng);
        let mut m = params.zeros_like();
        m.add_scaled(&params, 0.5).unwrap();
        m.round_to_f32();
        let ck = Checkpoint {
            train: serde_json::json!({"lr": 1e-4, "batch": 4}),
            step: 17,
            rng: Some(rng.state()),
            focal_alpha: Some(vec![0.25; 9]),
            adam_m: Some(m.clone()),
            adam_v: Some(m),
            ..Checkpoint::from_params(cfg, params, 3)
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let cfg = ModelConfig {
            shallow_channels: 2,
            heads: 1,
            ..Default::default()
        };
        let ck = Checkpoint::from_params(cfg.clone(), init_params(&cfg, &mut Rng::seed_from_u64(1)), 1);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"EGCKxxxx").is_err());
    }
}
