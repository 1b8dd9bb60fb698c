//! Output directory handling: result files, digests and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mfl_core::experiments::ResultRow;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct Stage {
    name: String,
    seconds: f64,
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    bytes: u64,
    sha256: String,
}

/// Collects outputs of one command; [`Run::finish`] writes the manifest last.
pub struct Run {
    dir: PathBuf,
    command: String,
    config: serde_json::Value,
    seed: u64,
    threads: usize,
    started: f64,
    stage_start: Instant,
    stages: Vec<Stage>,
    files: Vec<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Run {
    pub fn start(dir: &Path, command: String, config: serde_json::Value, seed: u64) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            config,
            seed,
            threads: rayon::current_num_threads(),
            started: unix_now(),
            stage_start: Instant::now(),
            stages: Vec::new(),
            files: Vec::new(),
        })
    }

    /// Closes the current stage under `name`.
    pub fn stage(&mut self, name: &str) {
        self.stages.push(Stage {
            name: name.into(),
            seconds: self.stage_start.elapsed().as_secs_f64(),
        });
        self.stage_start = Instant::now();
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.into());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_results(&mut self, rows: &[ResultRow]) -> std::io::Result<()> {
        self.write("results.csv", results_csv(rows).as_bytes())
    }

    /// Writes `manifest.json` through a temporary file and a rename.
    pub fn finish(self) -> std::io::Result<PathBuf> {
        let mut files = Vec::new();
        for name in &self.files {
            let bytes = fs::read(self.dir.join(name))?;
            files.push(FileEntry {
                name: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let manifest = serde_json::json!({
            "tool": "mfl",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "replica_streams": "particle i of replica r is drawn from ChaCha8(seed), stream r, word offset i * 2^40",
            "threads": self.threads,
            "started_unix": self.started,
            "finished_unix": unix_now(),
            "stages": self.stages,
            "files": files,
        });
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?.as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Long-format table `study,N,replica,t,metric,value`; absent fields are empty.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("study,N,replica,t,metric,value\n");
    for r in rows {
        let replica = r.replica.map(|x| x.to_string()).unwrap_or_default();
        let t = r.t.map(|x| format!("{x:?}")).unwrap_or_default();
        out.push_str(&format!("{},{},{replica},{t},{},{:?}\n", r.study, r.n, r.metric, r.value));
    }
    out
}
