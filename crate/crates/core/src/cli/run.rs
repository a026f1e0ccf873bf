//! Work directory layout and per-stage run directories.
//!
//! ```text
//! <work>/data/            gen-data
//! <work>/base/            pretrain
//! <work>/source-<m>/      train-source m
//! <work>/selection/       select-sources
//! <work>/xcross/          train-xcross
//! <work>/ablate-<v>/      ablate v
//! <work>/eval-<stage>-<domain>-<split>/
//! <work>/sweep-<kind>/
//! ```
//!
//! Every run directory holds `config.toml` (effective configuration),
//! `seed`, `log.txt` and the stage's outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use xcross::evalharness::ExperimentConfig;
use xcross::{Error, Result};

use super::config::to_toml;

pub const CHECKPOINT: &str = "checkpoint.json";

pub struct Run {
    pub dir: PathBuf,
    log: fs::File,
}

impl Run {
    /// Creates `work/name`. An existing directory is an error unless
    /// `overwrite` is set, in which case it is replaced.
    pub fn create(work: &Path, name: &str, cfg: &ExperimentConfig, overwrite: bool) -> Result<Self> {
        let dir = work.join(name);
        if dir.exists() {
            if !overwrite {
                return Err(Error::Usage(format!(
                    "{} already exists; pass --overwrite to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), to_toml(cfg)?)?;
        fs::write(dir.join("seed"), format!("{}\n", cfg.seed))?;
        let log = fs::File::create(dir.join("log.txt"))?;
        Ok(Self { dir, log })
    }

    pub fn log(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        eprintln!("{msg}");
        // Losing a log line is not worth failing the run over.
        let _ = writeln!(self.log, "{msg}");
    }

    /// Like [`Run::log`] but prints to stdout: results rather than progress.
    pub fn show(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        println!("{msg}");
        let _ = writeln!(self.log, "{msg}");
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(self.path(file), bytes)?;
        Ok(())
    }

    pub fn write_text(&self, file: &str, text: &str) -> Result<()> {
        fs::write(self.path(file), text)?;
        Ok(())
    }
}

/// Path of a prerequisite stage output, or a missing-input error naming
/// the subcommand that produces it.
pub fn require(work: &Path, stage: &str, file: &str, producer: &str) -> Result<PathBuf> {
    let path = work.join(stage).join(file);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Missing(format!(
            "{} not found; run `xcross {producer}` first",
            path.display()
        )))
    }
}

pub fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}
