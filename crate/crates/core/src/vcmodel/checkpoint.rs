//! Versioned checkpoint container, little-endian throughout.
//!
//! | field            | encoding                                          |
//! |------------------|---------------------------------------------------|
//! | magic            | 5 bytes `CDTCK`                                   |
//! | version          | u32 (currently 1)                                 |
//! | config           | u32 byte length, then UTF-8 TOML run config       |
//! | train_speakers   | u32 count, then per speaker u32 length + UTF-8    |
//! | step             | u64                                               |
//! | rng_seed         | u64                                               |
//! | best_valid_loss  | f64                                               |
//! | patience         | u32 validations without improvement               |
//! | tensors          | u32 count, then per tensor: u32 name length, name |
//! |                  | (UTF-8), u32 rows, u32 cols, rows*cols f64        |
//!
//! Model tensors are stored under `model.`, optimizer moments under
//! `adam.m.` and `adam.v.`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CdtError, Result};
use crate::nn::Tensors;

const MAGIC: &[u8; 5] = b"CDTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub train_speakers: Vec<String>,
    pub step: u64,
    pub rng_seed: u64,
    pub best_valid_loss: f64,
    pub patience: u32,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CdtError::Format("checkpoint truncated".into())),
        }
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CdtError::Format("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_toml);
        out.extend_from_slice(&(self.train_speakers.len() as u32).to_le_bytes());
        for s in &self.train_speakers {
            put_str(&mut out, s);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.best_valid_loss.to_le_bytes());
        out.extend_from_slice(&self.patience.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CdtError::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CdtError::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config_toml = r.string()?;
        let n_spk = r.u32()? as usize;
        let train_speakers = (0..n_spk).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let step = r.u64()?;
        let rng_seed = r.u64()?;
        let best_valid_loss = r.f64()?;
        let patience = r.u32()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CdtError::Format(format!("tensor `{name}` size overflows")))?;
            let data = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Array2::from_shape_vec((rows, cols), data).expect("length checked"));
        }
        if r.pos != buf.len() {
            return Err(CdtError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_toml,
            train_speakers,
            step,
            rng_seed,
            best_valid_loss,
            patience,
            tensors,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| CdtError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CdtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| CdtError::io(path, e))?;
        Self::decode(&buf)
    }

    pub fn store<T: Tensors>(&mut self, prefix: &str, t: &T) {
        for (name, v) in t.named() {
            self.tensors.insert(format!("{prefix}.{name}"), v.clone());
        }
    }

    /// Fills every tensor of `t` from entries under `prefix`, checking names and shapes.
    pub fn restore<T: Tensors>(&self, prefix: &str, t: &mut T) -> Result<()> {
        for (name, v) in t.named_mut() {
            let key = format!("{prefix}.{name}");
            let stored = self
                .tensors
                .get(&key)
                .ok_or_else(|| CdtError::Validation(format!("checkpoint lacks tensor `{key}`")))?;
            if stored.dim() != v.dim() {
                return Err(CdtError::Validation(format!(
                    "tensor `{key}` has shape {:?} in checkpoint, model expects {:?}",
                    stored.dim(),
                    v.dim()
                )));
            }
            v.assign(stored);
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            config_toml: "[model]\nd_model = 16\n".into(),
            train_speakers: vec!["spk00".into(), "spk01".into()],
            step: 42,
            rng_seed: 7,
            best_valid_loss: 0.125,
            patience: 3,
            tensors: BTreeMap::new(),
        };
        c.store("model", &Linear::init(3, "lin", 4, 2));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.config_toml, c.config_toml);
        assert_eq!(back.train_speakers, c.train_speakers);
        assert_eq!((back.step, back.rng_seed, back.patience), (42, 7, 3));
        for (k, v) in &c.tensors {
            let b = &back.tensors[k];
            assert_eq!(v, b);
        }
        let mut lin = Linear::zeros(4, 2);
        back.restore("model", &mut lin).unwrap();
        assert!(lin.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_shape_mismatch_and_corruption() {
        let c = sample();
        let mut wrong = Linear::zeros(5, 2);
        assert!(matches!(c.restore("model", &mut wrong), Err(CdtError::Validation(_))));
        let bytes = c.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(CdtError::Format(_))));
    }
}
