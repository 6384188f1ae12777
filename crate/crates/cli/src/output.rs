//! Output files and the per-command run manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};
use xxcascade::table::{Record, Table};

use crate::CliError;

pub struct Run {
    command: &'static str,
    dir: PathBuf,
    outputs: Vec<String>,
    started: Instant,
    config_digest: String,
    seed: u64,
}

impl Run {
    pub fn new(command: &'static str, dir: &Path, config_digest: String, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Run {
            command,
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
            started: Instant::now(),
            config_digest,
            seed,
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(BufWriter::new(file))
    }

    pub fn write_with(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut BufWriter<File>) -> xxcascade::Result<()>,
    ) -> Result<(), CliError> {
        let mut out = self.create(name)?;
        write(&mut out).map_err(|e| CliError::Io(format!("{name}: {e}")))
    }

    pub fn table(&mut self, name: &str, t: &Table) -> Result<(), CliError> {
        self.write_with(name, |w| t.write_to(w))
    }

    pub fn record(&mut self, name: &str, r: &Record) -> Result<(), CliError> {
        self.write_with(name, |w| r.write_to(w))
    }

    /// Writes `<command>_manifest.txt`. Data files never contain the
    /// wall-clock time; only the manifest does.
    pub fn finish(self, status: &Result<(), CliError>) -> Result<(), CliError> {
        let mut r = Record::new();
        r.set("command", self.command)
            .set("config_digest", &self.config_digest)
            .set("seed", self.seed)
            .set("tool_version", env!("CARGO_PKG_VERSION"))
            .set(
                "status",
                match status {
                    Ok(()) => "ok".to_string(),
                    Err(e) => format!("failed: {e}"),
                },
            )
            .set("outputs", self.outputs.join(","));
        for name in &self.outputs {
            let bytes = fs::read(self.dir.join(name))?;
            r.set(format!("sha256.{name}"), hex::encode(Sha256::digest(&bytes)));
        }
        r.set("wall_clock_s", format!("{:.3}", self.started.elapsed().as_secs_f64()));
        let path = self.dir.join(format!("{}_manifest.txt", self.command));
        let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        r.write_to(BufWriter::new(file))?;
        Ok(())
    }
}
