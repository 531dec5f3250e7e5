//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDGCN-CKPT"  u32 version
//! u64 config length, config JSON
//! u64 epoch  u64 adam step
//! u64 record count, then per record:
//!   u32 name length, name, u32 rank, u64 extents[rank], f64 values
//! ```
//!
//! Record names are prefixed `param:`, `buffer:`, `adam_m:` or `adam_v:`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::training::{Adam, AdamConfig, TrainConfig};

pub const MAGIC: &[u8; 10] = b"DDGCN-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    adam: Option<AdamConfig>,
}

/// A model snapshot with optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub epoch: u64,
    pub adam: Option<Adam>,
}

const PREFIXES: [&str; 4] = ["param:", "buffer:", "adam_m:", "adam_v:"];

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            train: self.train.clone(),
            adam: self.adam.as_ref().map(|a| a.config.clone()),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.adam.as_ref().map_or(0, |a| a.step).to_le_bytes());

        let mut sets: Vec<(&str, &ParamSet)> = vec![
            (PREFIXES[0], &self.model.params),
            (PREFIXES[1], &self.model.buffers),
        ];
        if let Some(a) = &self.adam {
            sets.push((PREFIXES[2], &a.m));
            sets.push((PREFIXES[3], &a.v));
        }
        let count: usize = sets.iter().map(|(_, s)| s.len()).sum();
        out.extend((count as u64).to_le_bytes());
        for (prefix, set) in sets {
            for (name, t) in set.iter() {
                write_record(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a DDGCN-CKPT file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.len()?;
        let mut sets: [ParamSet; 4] = Default::default();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` extents overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (k, rest) = PREFIXES
                .iter()
                .enumerate()
                .find_map(|(k, p)| name.strip_prefix(p).map(|rest| (k, rest)))
                .ok_or_else(|| Error::Checkpoint(format!("unknown record `{name}`")))?;
            sets[k].insert(rest, Tensor::new(&shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let [params, buffers, m, v] = sets;
        let model = Model::from_parts(&header.model, params, buffers)?;
        let adam = match header.adam {
            Some(config) => {
                let mut adam = Adam::new(&model.params, config);
                for (name, t) in m.iter() {
                    adam.m.set(name, t.clone())?;
                }
                for (name, t) in v.iter() {
                    adam.v.set(name, t.clone())?;
                }
                adam.step = step;
                Some(adam)
            }
            None => None,
        };
        Ok(Self {
            model,
            train: header.train,
            epoch,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SkeletonKind, WeightInit};
    use crate::rng::SeededRng;

    fn model() -> Model {
        let cfg = ModelConfig {
            t_history: 2,
            t_future: 2,
            joints: 3,
            input_dim: 3,
            d_hidden: 4,
            blocks: 1,
            level_joint_counts: vec![3, 2],
            skeleton: SkeletonKind::Chain,
            weight_init: WeightInit::Binary,
            seed: 5,
            ..ModelConfig::default()
        };
        Model::init(&cfg).unwrap()
    }

    #[test]
    fn roundtrip_reproduces_forward_bitwise() {
        let mut m = model();
        let mut rng = SeededRng::new(1);
        for (_, t) in m.buffers.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.uniform(0.0, 1.0));
        }
        let mut adam = Adam::new(&m.params, AdamConfig::default());
        adam.step = 7;
        let ck = Checkpoint {
            model: m.clone(),
            train: Some(TrainConfig::default()),
            epoch: 3,
            adam: Some(adam.clone()),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.adam.as_ref(), Some(&adam));
        assert_eq!(back.model.params, m.params);
        assert_eq!(back.model.buffers, m.buffers);
        let x = rng.uniform_tensor(&[2, 2, 3, 3], -1.0, 1.0);
        assert_eq!(back.model.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn rejects_damage() {
        let ck = Checkpoint {
            model: model(),
            train: None,
            epoch: 0,
            adam: None,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
