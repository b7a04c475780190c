//! Binary checkpoint format.
//!
//! ```text
//! "MDCK" | u32 version | u64 len | metadata JSON (UTF-8)
//!        | 5 × (u64 count | count × f32)   params, ema, adam_m, adam_v, w
//!        | u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Arrays are stored as f32, so a
//! loaded checkpoint holds f32-representable values and saving it again
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusVocab;
use crate::error::{CheckpointError, Error, Result};
use crate::forward::{ForwardKernel, Masking, Vocabulary};
use crate::predictor::{AnyPredictor, Architecture};
use crate::schedule::{Schedule, VectorSchedule};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Scalar schedule; unused when `w` is non-empty.
    pub schedule: String,
    pub m: usize,
    /// Character for each id when trained on text.
    pub symbols: Option<String>,
    pub unk: bool,
    pub architecture: Architecture,
    pub loss: String,
    /// Completed optimizer steps.
    pub step: u64,
    pub adam_step: u64,
    /// Every random stream is derived from `(seed, label, step)`, so the seed
    /// and step counter are the complete generator state.
    pub seed: u64,
    pub t_min: f64,
    /// Resolved training configuration text.
    pub config: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// GenMD4 exponents; empty for scalar schedules.
    pub w: Vec<f64>,
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.meta.m)
    }

    pub fn corpus_vocab(&self) -> Result<Option<CorpusVocab>> {
        self.meta
            .symbols
            .as_ref()
            .map(|s| CorpusVocab::from_symbols(s.chars().collect(), self.meta.unk))
            .transpose()
    }

    pub fn kernel(&self) -> Result<ForwardKernel> {
        let masking = if self.w.is_empty() {
            Masking::Scalar(self.meta.schedule.parse::<Schedule>()?)
        } else {
            Masking::Vector(VectorSchedule::new(self.w.clone())?)
        };
        ForwardKernel::new(masking, self.vocabulary()?)
    }

    /// Predictor with the EMA parameters (`ema = true`) or the raw ones.
    pub fn predictor(&self, ema: bool) -> Result<AnyPredictor> {
        let p = if ema { &self.ema } else { &self.params };
        self.meta.architecture.build(Some(p.clone()), self.meta.seed)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let floats = self.params.len() + self.ema.len() + self.adam_m.len() + self.adam_v.len() + self.w.len();
        let mut out = Vec::with_capacity(4 + 4 + 8 + meta.len() + 5 * 8 + 4 * floats + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for a in [&self.params, &self.ema, &self.adam_m, &self.adam_v, &self.w] {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for &v in a.iter() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::Numeric(format!("cannot store non-finite value {v}")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let meta_len = r.len("metadata length", 1)?;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let arrays: Vec<Vec<f64>> = ["params", "ema", "adam_m", "adam_v", "w"]
            .iter()
            .map(|name| r.array(name))
            .collect::<Result<_>>()?;
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Metadata(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let [params, ema, adam_m, adam_v, w]: [Vec<f64>; 5] = arrays.try_into().expect("five arrays");
        Ok(Self {
            meta,
            params,
            ema,
            adam_m,
            adam_v,
            w,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    /// Element count that must fit in the remaining bytes at `width` bytes each.
    fn len(&mut self, what: &'static str, width: usize) -> Result<usize> {
        let n = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        let left = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(width as u64).is_none_or(|b| b > left) {
            return Err(CheckpointError::Truncated(what).into());
        }
        Ok(n as usize)
    }

    fn array(&mut self, what: &'static str) -> Result<Vec<f64>> {
        let n = self.len(what, 4)?;
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::Context;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                schedule: "cosine@0.0001".into(),
                m: 3,
                symbols: Some("ab c".chars().take(3).collect()),
                unk: false,
                architecture: Architecture::Tabular {
                    m: 3,
                    context: Context::Shared,
                },
                loss: "ce".into(),
                step: 12,
                adam_step: 12,
                seed: 5,
                t_min: 1e-5,
                config: "lr = 0.1\n".into(),
            },
            params: vec![0.1, -0.2, 0.3],
            ema: vec![0.05, -0.1, 0.15],
            adam_m: vec![1e-3, 2e-3, 3e-3],
            adam_v: vec![1e-6, 2e-6, 3e-6],
            w: vec![],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = sample().to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), a);
        assert_eq!(loaded.meta, sample().meta);
        assert_eq!(loaded.params[0], 0.1f32 as f64);
    }

    #[test]
    fn distinct_load_errors() {
        let good = sample().to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 2, .. }))
        ));

        let bad = &good[..good.len() - 7];
        assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Checkpoint(CheckpointError::Truncated(_)))));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 1] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::Checksum { .. }))));

        let mut bad = good.clone();
        let n = bad.len();
        // last byte of the adam_v payload, before the empty w array and the CRC
        bad[n - 13] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::Checksum { .. }))));

        assert!(matches!(Checkpoint::from_bytes(b"MD"), Err(Error::Checkpoint(CheckpointError::Truncated(_)))));
    }

    #[test]
    fn kernel_and_predictor_rebuild() {
        let mut c = sample();
        assert!(matches!(c.kernel().unwrap().masking(), Masking::Scalar(_)));
        c.w = vec![1.0, 2.0, 0.5];
        assert!(matches!(c.kernel().unwrap().masking(), Masking::Vector(_)));
        let p = c.predictor(true).unwrap();
        use crate::predictor::Predictor;
        assert_eq!(p.params(), c.ema.as_slice());
        assert_eq!(c.corpus_vocab().unwrap().unwrap().symbols(), &['a', 'b', ' ']);
    }
}
