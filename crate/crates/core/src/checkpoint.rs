//! Self-describing checkpoint file.
//!
//! Layout: one ASCII line `crowd-count-checkpoint <version> <header bytes>`,
//! a TOML header of that many bytes (configs, label statistics, epoch,
//! history, scalar type and every tensor's name and shape), then the raw
//! little-endian parameter values in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::heads::LossConfig;
use crate::model::{CrowdCounter, LabelStats, ModelConfig};
use crate::params::ParamStore;
use crate::train::{EpochLog, TrainConfig};

pub const MAGIC: &str = "crowd-count-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub stats: LabelStats,
    /// 1-based epoch the parameters come from; 0 for an untrained model.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub params: ParamStore<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scalar: String,
    epoch: usize,
    stats: LabelStats,
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    tensors: Vec<TensorEntry>,
    history: Vec<EpochLog>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Real> Checkpoint<T> {
    /// Untrained model initialized from `train.seed`.
    pub fn fresh(model: &ModelConfig, train: &TrainConfig, loss: &LossConfig, stats: LabelStats) -> Result<Self> {
        let (_, params) = CrowdCounter::init::<T>(model, train.seed)?;
        Ok(Self {
            model: model.clone(),
            train: train.clone(),
            loss: loss.clone(),
            stats,
            epoch: 0,
            history: Vec::new(),
            params,
        })
    }

    pub fn counter(&self) -> Result<CrowdCounter> {
        CrowdCounter::for_params(&self.model, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            scalar: T::NAME.to_string(),
            epoch: self.epoch,
            stats: self.stats,
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            history: self.history.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| bad(format!("header serialization: {e}")))?;
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint of either precision, converting values to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing preamble line"))?;
        let preamble = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("preamble is not UTF-8"))?;
        let parts: Vec<&str> = preamble.split(' ').collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(bad("not a crowd-count checkpoint"));
        }
        let version: u32 = parts[1].parse().map_err(|_| bad("bad version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen: usize = parts[2].parse().map_err(|_| bad("bad header length"))?;
        let body_start = nl + 1 + hlen;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[nl + 1..body_start]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
        let width = match header.scalar.as_str() {
            "f32" => 4,
            "f64" => 8,
            s => return Err(bad(format!("unknown scalar type {s:?}"))),
        };
        let numel: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let body = &bytes[body_start..];
        if body.len() != numel * width {
            return Err(bad(format!(
                "body has {} bytes, header describes {} scalars of {width} bytes",
                body.len(),
                numel
            )));
        }
        let mut params = ParamStore::new();
        let mut chunks = body.chunks_exact(width);
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let data: Vec<T> = chunks
                .by_ref()
                .take(n)
                .map(|c| match width {
                    4 => T::c(f32::read_le(c) as f64),
                    _ => T::c(f64::read_le(c)),
                })
                .collect();
            params.add(entry.name.clone(), Tensor::new(&entry.shape, data)?);
        }
        let ckpt = Self {
            model: header.model,
            train: header.train,
            loss: header.loss,
            stats: header.stats,
            epoch: header.epoch,
            history: header.history,
            params,
        };
        ckpt.counter()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Scalar type name stored in a checkpoint file, without decoding it.
    pub fn scalar_of(bytes: &[u8]) -> Result<String> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing preamble line"))?;
        let preamble = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("preamble is not UTF-8"))?;
        let hlen: usize = preamble
            .rsplit(' ')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad preamble"))?;
        let end = (nl + 1 + hlen).min(bytes.len());
        let text = std::str::from_utf8(&bytes[nl + 1..end]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(format!("header: {e}")))?;
        Ok(header.scalar)
    }

    /// Number of scalars in the body.
    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: [32, 32],
                channels: [4, 8, 8, 8],
                blocks_per_stage: [1, 1, 1, 1],
                attention_heads: [2, 2],
                window: 2,
                mlp_ratio: 2,
                expand_ratio: 2,
            },
            ..ModelConfig::default()
        }
    }

    fn sample<T: Real>() -> Checkpoint<T> {
        let stats = LabelStats::from_counts(&[1.0, 5.0, 9.0]).unwrap();
        let mut c = Checkpoint::fresh(&tiny(), &TrainConfig::default(), &LossConfig::default(), stats).unwrap();
        c.history.push(EpochLog {
            epoch: 1,
            l_reg: 0.1 + 0.2,
            l_cls: 10f64.ln(),
            l_total: 1.0 / 3.0,
            val_mae: 4.5,
            val_rmse: 5.25,
            lr: 5e-5,
        });
        c.epoch = 1;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        for bytes in [sample::<f32>().to_bytes().unwrap(), sample::<f64>().to_bytes().unwrap()] {
            let again = if Checkpoint::<f32>::scalar_of(&bytes).unwrap() == "f32" {
                Checkpoint::<f32>::from_bytes(&bytes).unwrap().to_bytes().unwrap()
            } else {
                Checkpoint::<f64>::from_bytes(&bytes).unwrap().to_bytes().unwrap()
            };
            assert_eq!(bytes, again);
        }
        let c = Checkpoint::<f64>::from_bytes(&sample::<f64>().to_bytes().unwrap()).unwrap();
        assert_eq!(c.history[0].l_reg, 0.1 + 0.2);
        assert_eq!(c.params, sample::<f64>().params);
    }

    #[test]
    fn body_size_matches_scalar_count() {
        let c = sample::<f32>();
        let bytes = c.to_bytes().unwrap();
        let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
            panic!()
        };
        let hlen: usize = std::str::from_utf8(&bytes[..nl])
            .unwrap()
            .rsplit(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!((bytes.len() - nl - 1 - hlen) / 4, c.scalar_count());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample::<f32>().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"hello\n").is_err());
        let mut wrong = bytes.clone();
        wrong[MAGIC.len() + 1] = b'9';
        assert!(Checkpoint::<f32>::from_bytes(&wrong).is_err());
    }
}
