//! Trainer checkpoints (`FHCK`), little-endian:
//!
//! ```text
//! "FHCK" | version u32 = 1 | epochs_done u32 | step u64 | rng [u64; 4]
//! | n_tensors u32 | n_tensors x (rows u32 | cols u32 | [f32; rows*cols])   parameters
//! | n_tensors x (rows u32 | cols u32 | [f32; rows*cols])                   velocities
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"FHCK";

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub epochs_done: u32,
    pub step: u64,
    pub rng: [u64; 4],
    pub params: Vec<Matrix>,
    pub velocity: Vec<Matrix>,
}

impl TrainerState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&self.epochs_done.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        for w in self.rng {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for m in self.params.iter().chain(&self.velocity) {
            b.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(at..at + n).ok_or(Error::Format {
                offset: at as u64,
                msg: "truncated checkpoint".into(),
            })?;
            at += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"FHCK\"".into(),
            });
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        if u32_at(take(4)?) != 1 {
            return Err(Error::Format {
                offset: 4,
                msg: "unsupported checkpoint version".into(),
            });
        }
        let epochs_done = u32_at(take(4)?);
        let step = u64_at(take(8)?);
        let mut rng = [0u64; 4];
        for w in &mut rng {
            *w = u64_at(take(8)?);
        }
        let n = u32_at(take(4)?) as usize;
        let mut tensors = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let rows = u32_at(take(4)?) as usize;
            let cols = u32_at(take(4)?) as usize;
            let raw = take(4 * rows * cols)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Matrix::new(rows, cols, data)?);
        }
        if at != bytes.len() {
            return Err(Error::Format {
                offset: at as u64,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        let velocity = tensors.split_off(n);
        Ok(TrainerState {
            epochs_done,
            step,
            rng,
            params: tensors,
            velocity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::storage(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::from_bytes(&bytes)
    }
}
