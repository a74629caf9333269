//! The `FHST` archive: per-epoch train/val features and the linear head.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header: "FHST" | version u32 = 1 | n_train u32 | n_val u32 | d u32 | c u32
//!         | y_train [u32; n_train] | y_val [u32; n_val]
//! block:  epoch u32 | raw_val_accuracy f32 | h_train [f32; n_train*d]
//!         | h_val [f32; n_val*d] | cls_weight [f32; c*d] | cls_bias [f32; c]
//! ```
//!
//! Blocks repeat until end of file. Matrices are row-major. Feature-extractor
//! weights are not stored; the estimator only reads features and the head.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numkit::{accuracy, softmax, Matrix};

pub const MAGIC: &[u8; 4] = b"FHST";
pub const VERSION: u32 = 1;

/// One epoch's snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub h_train: Matrix,
    pub h_val: Matrix,
    pub cls_weight: Matrix,
    pub cls_bias: Matrix,
    /// Accuracy of the saved head on `h_val`, stored as written to disk.
    pub raw_val_accuracy: f32,
}

impl EpochRecord {
    /// Recomputes the saved head's top-1 accuracy on this epoch's val features.
    pub fn recompute_val_accuracy(&self, y_val: &[u32]) -> Result<f64> {
        let mut logits = self.h_val.matmul_t(&self.cls_weight)?;
        logits.add_row(self.cls_bias.data())?;
        accuracy(&softmax(&logits)?, y_val)
    }
}

/// Shape and label metadata shared by every block of a history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryMeta {
    pub n_train: usize,
    pub n_val: usize,
    pub d: usize,
    pub c: usize,
    pub y_train: Vec<u32>,
    pub y_val: Vec<u32>,
}

impl HistoryMeta {
    pub fn validate(&self) -> Result<()> {
        if self.y_train.len() != self.n_train || self.y_val.len() != self.n_val {
            return Err(Error::invalid(format!(
                "label counts ({}, {}) do not match n_train={} n_val={}",
                self.y_train.len(),
                self.y_val.len(),
                self.n_train,
                self.n_val
            )));
        }
        if let Some(&y) = self
            .y_train
            .iter()
            .chain(&self.y_val)
            .find(|&&y| y as usize >= self.c)
        {
            return Err(Error::invalid(format!(
                "label {y} out of range for {} classes",
                self.c
            )));
        }
        Ok(())
    }

    pub fn header_len(&self) -> u64 {
        24 + 4 * (self.n_train + self.n_val) as u64
    }

    pub fn block_len(&self) -> u64 {
        let floats = (self.n_train + self.n_val + self.c) * self.d + self.c;
        8 + 4 * floats as u64
    }

    /// Checks that a record conforms to this history's shapes.
    pub fn check_record(&self, rec: &EpochRecord) -> Result<()> {
        let e = rec.epoch;
        rec.h_train
            .ensure_shape(self.n_train, self.d, &format!("epoch {e} h_train"))?;
        rec.h_val
            .ensure_shape(self.n_val, self.d, &format!("epoch {e} h_val"))?;
        rec.cls_weight
            .ensure_shape(self.c, self.d, &format!("epoch {e} cls_weight"))?;
        rec.cls_bias
            .ensure_shape(1, self.c, &format!("epoch {e} cls_bias"))?;
        if !(0.0..=1.0).contains(&rec.raw_val_accuracy) {
            return Err(Error::invalid(format!(
                "epoch {e} raw accuracy {} outside [0, 1]",
                rec.raw_val_accuracy
            )));
        }
        Ok(())
    }
}

/// Epoch-indexed archive of features and saved heads for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHistory {
    pub meta: HistoryMeta,
    pub epochs: Vec<EpochRecord>,
}

impl FeatureHistory {
    pub fn new(meta: HistoryMeta) -> Result<Self> {
        meta.validate()?;
        Ok(FeatureHistory {
            meta,
            epochs: Vec::new(),
        })
    }

    /// Appends a record, enforcing shapes and strictly increasing epochs
    /// starting at 1.
    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        self.meta.check_record(&rec)?;
        let expected_min = self.epochs.last().map_or(1, |r| r.epoch + 1);
        if self.epochs.is_empty() && rec.epoch != 1 || rec.epoch < expected_min {
            return Err(Error::invalid(format!(
                "epoch {} cannot follow {:?}",
                rec.epoch,
                self.epochs.last().map(|r| r.epoch)
            )));
        }
        self.epochs.push(rec);
        Ok(())
    }

    pub fn last_epoch(&self) -> Option<u32> {
        self.epochs.last().map(|r| r.epoch)
    }

    pub fn record(&self, epoch: u32) -> Option<&EpochRecord> {
        self.epochs
            .binary_search_by_key(&epoch, |r| r.epoch)
            .ok()
            .map(|i| &self.epochs[i])
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let mut prev = 0;
        for rec in &self.epochs {
            self.meta.check_record(rec)?;
            if rec.epoch <= prev || (prev == 0 && rec.epoch != 1) {
                return Err(Error::invalid(format!(
                    "epoch {} breaks strictly increasing order after {prev}",
                    rec.epoch
                )));
            }
            prev = rec.epoch;
        }
        Ok(())
    }

    pub fn file_len(&self) -> u64 {
        self.meta.header_len() + self.epochs.len() as u64 * self.meta.block_len()
    }
}

/// Records with epochs in `[end_epoch - k + 1, end_epoch]`, clipped at the
/// start of the history.
pub fn window(history: &FeatureHistory, end_epoch: u32, k: usize) -> Result<&[EpochRecord]> {
    if k == 0 {
        return Err(Error::invalid("window size must be at least 1"));
    }
    let end = history
        .epochs
        .binary_search_by_key(&end_epoch, |r| r.epoch)
        .map_err(|_| Error::invalid(format!("epoch {end_epoch} is not in the history")))?;
    let first = end_epoch.saturating_sub(k as u32 - 1).max(1);
    let start = history.epochs[..=end].partition_point(|r| r.epoch < first);
    Ok(&history.epochs[start..=end])
}

fn put_u32s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = u32>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_header(meta: &HistoryMeta) -> Vec<u8> {
    let mut buf = Vec::with_capacity(meta.header_len() as usize);
    buf.extend_from_slice(MAGIC);
    put_u32s(
        &mut buf,
        [
            VERSION,
            meta.n_train as u32,
            meta.n_val as u32,
            meta.d as u32,
            meta.c as u32,
        ],
    );
    put_u32s(&mut buf, meta.y_train.iter().copied());
    put_u32s(&mut buf, meta.y_val.iter().copied());
    buf
}

fn encode_block(meta: &HistoryMeta, rec: &EpochRecord, buf: &mut Vec<u8>) {
    buf.clear();
    buf.reserve(meta.block_len() as usize);
    put_u32s(buf, [rec.epoch]);
    put_f32s(buf, &[rec.raw_val_accuracy]);
    put_f32s(buf, rec.h_train.data());
    put_f32s(buf, rec.h_val.data());
    put_f32s(buf, rec.cls_weight.data());
    put_f32s(buf, rec.cls_bias.data());
}

/// Streaming writer; each appended record becomes one block.
pub struct HistoryWriter {
    path: PathBuf,
    meta: HistoryMeta,
    out: BufWriter<File>,
    last_epoch: Option<u32>,
    scratch: Vec<u8>,
}

impl HistoryWriter {
    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: impl AsRef<Path>, meta: &HistoryMeta) -> Result<Self> {
        meta.validate()?;
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::storage(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&encode_header(meta))
            .map_err(|e| Error::storage(&path, e))?;
        Ok(HistoryWriter {
            path,
            meta: meta.clone(),
            out,
            last_epoch: None,
            scratch: Vec::new(),
        })
    }

    /// Reopens an existing archive for appending after validating it fully.
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let history = read_history(&path)?;
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::storage(&path, e))?;
        Ok(HistoryWriter {
            path,
            last_epoch: history.last_epoch(),
            meta: history.meta,
            out: BufWriter::new(file),
            scratch: Vec::new(),
        })
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        self.meta.check_record(rec)?;
        let ok = match self.last_epoch {
            None => rec.epoch == 1,
            Some(prev) => rec.epoch > prev,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "epoch {} cannot follow {:?} in {}",
                rec.epoch,
                self.last_epoch,
                self.path.display()
            )));
        }
        encode_block(&self.meta, rec, &mut self.scratch);
        self.out
            .write_all(&self.scratch)
            .map_err(|e| Error::storage(&self.path, e))?;
        self.last_epoch = Some(rec.epoch);
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::storage(&self.path, e))
    }
}

/// Writes the whole history; identical histories give identical bytes.
pub fn write_history(path: impl AsRef<Path>, history: &FeatureHistory) -> Result<()> {
    history.validate()?;
    let mut w = HistoryWriter::create(path, &history.meta)?;
    for rec in &history.epochs {
        w.append(rec)?;
    }
    w.finish()
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + filled as u64,
                        msg: format!("truncated while reading {what} ({filled} of {n} bytes)"),
                    })
                }
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::storage(&self.path, e)),
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let b = self.bytes(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let start = self.offset;
        let b = self.bytes(4 * rows * cols, what)?;
        let data: Vec<f32> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: start + 4 * i as u64,
                msg: format!("non-finite value in {what}"),
            });
        }
        Matrix::new(rows, cols, data)
    }

    /// True when no bytes remain.
    fn at_end(&mut self) -> Result<bool>
    where
        R: std::io::BufRead,
    {
        let buf = self
            .inner
            .fill_buf()
            .map_err(|e| Error::storage(&self.path, e))?;
        Ok(buf.is_empty())
    }
}

/// Reads and validates an archive.
pub fn read_history(path: impl AsRef<Path>) -> Result<FeatureHistory> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut cur = Cursor {
        inner: BufReader::with_capacity(1 << 20, file),
        offset: 0,
        path: path.to_path_buf(),
    };
    let magic = cur.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"FHST\""),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n_train = cur.u32("n_train")? as usize;
    let n_val = cur.u32("n_val")? as usize;
    let d = cur.u32("d")? as usize;
    let c = cur.u32("c")? as usize;
    let labels_at = cur.offset;
    let y_train = cur.u32s(n_train, "y_train")?;
    let y_val = cur.u32s(n_val, "y_val")?;
    let meta = HistoryMeta {
        n_train,
        n_val,
        d,
        c,
        y_train,
        y_val,
    };
    meta.validate().map_err(|e| Error::Format {
        offset: labels_at,
        msg: e.to_string(),
    })?;

    let mut history = FeatureHistory {
        meta,
        epochs: Vec::new(),
    };
    while !cur.at_end()? {
        let block_at = cur.offset;
        let epoch = cur.u32("epoch")?;
        let raw = f32::from_le_bytes(cur.bytes(4, "raw_val_accuracy")?.try_into().unwrap());
        let h_train = cur.matrix(n_train, d, "h_train")?;
        let h_val = cur.matrix(n_val, d, "h_val")?;
        let cls_weight = cur.matrix(c, d, "cls_weight")?;
        let cls_bias = cur.matrix(1, c, "cls_bias")?;
        let rec = EpochRecord {
            epoch,
            h_train,
            h_val,
            cls_weight,
            cls_bias,
            raw_val_accuracy: raw,
        };
        history.push(rec).map_err(|e| Error::Format {
            offset: block_at,
            msg: e.to_string(),
        })?;
    }
    Ok(history)
}

/// Byte length of the archive on disk, without parsing it.
pub fn file_len(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::storage(path, e))?;
    f.seek(SeekFrom::End(0))
        .map_err(|e| Error::storage(path, e))
}
