use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

use fhproxy::report::write_atomic;

/// Record of one command invocation, kept next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    /// Settings decided at run time, such as the worker count after FH_THREADS.
    pub resolved: BTreeMap<String, serde_json::Value>,
    /// Seconds per phase; empty until the command finishes.
    pub timings: BTreeMap<String, f64>,
    pub complete: bool,
}

pub struct ManifestGuard {
    path: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl ManifestGuard {
    /// Writes the initial manifest to `path`.
    pub fn start(
        path: impl AsRef<Path>,
        command: &str,
        flags: &impl Serialize,
        seed: u64,
        outputs: Vec<PathBuf>,
    ) -> Result<Self> {
        let guard = ManifestGuard {
            path: path.as_ref().to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                flags: serde_json::to_value(flags)?,
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                outputs,
                resolved: BTreeMap::new(),
                timings: BTreeMap::new(),
                complete: false,
            },
            started: Instant::now(),
        };
        guard.write()?;
        Ok(guard)
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) -> Result<()> {
        self.manifest.resolved.insert(key.to_string(), value.into());
        self.write()
    }

    pub fn time(&mut self, phase: &str, secs: f64) {
        self.manifest.timings.insert(phase.to_string(), secs);
    }

    pub fn finish(mut self) -> Result<()> {
        let total = self.started.elapsed().as_secs_f64();
        self.manifest.timings.insert("total".into(), total);
        self.manifest.complete = true;
        self.write()
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.path, text.as_bytes())?;
        Ok(())
    }
}

/// `<output>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
