//! Binary checkpoint container.
//!
//! Layout (little endian): magic `HSCK`, `u32` version, `u64` length of a
//! UTF-8 `key=value` text block, the block, `u32` parameter count, then per
//! parameter: `u32` name length, name, `u8` trainable flag, `u32` rank,
//! `u64` dims, `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::{Model, ModelConfig, TaskKeys};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HSCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Config echo and any caller metadata, in insertion order.
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_map(&self) -> BTreeMap<String, String> {
        self.meta.iter().cloned().collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry `{k}` not representable")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let text_len = r.u64()? as usize;
        let text =
            std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta = text
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let id = params.add(name, tensor);
            params.set_trainable(id, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn format_directions(dirs: &[TaskKeys]) -> String {
    dirs.iter()
        .map(|d| format!("{}:{}", d.encoder, d.decoder))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_directions(text: &str) -> Result<Vec<TaskKeys>> {
    text.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("bad adapter direction `{p}`")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad adapter direction `{p}`")))
            };
            Ok(TaskKeys {
                encoder: parse(a)?,
                decoder: parse(b)?,
            })
        })
        .collect()
}

impl Model {
    /// Snapshot of the model with its config echo plus `extra` metadata.
    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut meta = self.config.to_pairs();
        if let Some(dirs) = self.adapter_directions() {
            meta.push(("adapter_directions".into(), format_directions(dirs)));
        }
        meta.extend(extra.iter().cloned());
        Checkpoint {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        self.to_checkpoint(extra).write(path)
    }

    /// Rebuilds a model from a checkpoint, restoring values and trainable
    /// flags exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut config = ModelConfig::from_pairs(&ckpt.meta_map())?;
        let adapter_dim = config.adapter_dim.take();
        let mut model = Model::new(config, 0)?;
        if let Some(dirs) = ckpt.get("adapter_directions") {
            let dim = adapter_dim.ok_or_else(|| Error::Checkpoint("adapter directions without adapter_dim".into()))?;
            model.adapter_mode(dim, &parse_directions(dirs)?, 0)?;
        }
        model.params.load_values(&ckpt.params)?;
        for (id, p) in ckpt.params.ids().zip(ckpt.params.iter()) {
            model.params.set_trainable(id, p.trainable);
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::Strategy;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            ffn: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            candidates: 4,
            strategy: Strategy::Subset,
            vocab_src: 10,
            vocab_tgt: 10,
            task_keys: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::new(small(), 5).unwrap();
        m.mark_seen(1).unwrap();
        let id = m.selection_param_ids()[0];
        m.params_mut().tensor_mut(id).data_mut()[3] = f64::MIN_POSITIVE / 3.0;
        let bytes = m.to_checkpoint(&[("step".into(), "7".into())]).to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.get("step"), Some("7"));
        let back = Model::from_checkpoint(&ck).unwrap();
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(
            back.to_checkpoint(&[("step".into(), "7".into())]).to_bytes().unwrap(),
            bytes
        );
    }

    #[test]
    fn adapters_survive_round_trip() {
        let mut m = Model::new(small(), 1).unwrap();
        let dirs = [TaskKeys { encoder: 0, decoder: 1 }, TaskKeys { encoder: 1, decoder: 1 }];
        m.adapter_mode(4, &dirs, 9).unwrap();
        let back = Model::from_checkpoint(&m.to_checkpoint(&[])).unwrap();
        assert_eq!(back.adapter_directions().unwrap(), &dirs);
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = Model::new(small(), 1).unwrap();
        let bytes = m.to_checkpoint(&[]).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
