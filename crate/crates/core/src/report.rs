//! CSV outputs. Every report is a plain header row followed by records.

use std::fs::File;
use std::io::Write;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::EpochLog;

/// Typed CSV writer over a file.
pub struct CsvSink<T> {
    path: PathBuf,
    inner: csv::Writer<File>,
    _row: PhantomData<T>,
}

impl<T: Serialize> CsvSink<T> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::storage(&path, e))?;
        Ok(CsvSink {
            path,
            inner: csv::Writer::from_writer(file),
            _row: PhantomData,
        })
    }

    pub fn write(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner
            .flush()
            .map_err(|e| Error::storage(&self.path, e))
    }
}

pub type EpochLogWriter = CsvSink<EpochLog>;

/// Writes all rows to `path` in one go.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut sink = CsvSink::create(path)?;
    for r in rows {
        sink.write(r)?;
    }
    sink.finish()
}

/// Serialises rows, header included, to a string.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One estimate, as emitted by the `estimate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub trial_id: String,
    pub end_epoch: u32,
    pub raw_acc: f64,
    pub proxy_acc: f64,
    pub wall_ms_overhead: f64,
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::storage(&tmp, e))?;
    f.sync_all().map_err(|e| Error::storage(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_row_csv_layout() {
        let s = csv_string(&[EstimateRow {
            trial_id: "t,1".into(),
            end_epoch: 15,
            raw_acc: 0.5,
            proxy_acc: 0.75,
            wall_ms_overhead: 12.0,
        }])
        .unwrap();
        assert_eq!(
            s,
            "trial_id,end_epoch,raw_acc,proxy_acc,wall_ms_overhead\n\"t,1\",15,0.5,0.75,12.0\n"
        );
    }
}
