use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
}

impl Provenance {
    pub fn for_seed(&self, seed: u64) -> Provenance {
        Provenance {
            seeds: vec![seed],
            ..self.clone()
        }
    }

    fn comment(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "# {} {} config={} config_sha256={} seeds={}\n",
            self.tool,
            self.version,
            self.config,
            self.config_sha256,
            seeds.join(";")
        )
    }
}

/// Writes a CSV file whose first line is a `#` provenance comment.
pub fn write_csv(path: &Path, prov: &Provenance, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = prov.comment();
    text.push_str(header);
    text.push('\n');
    for r in rows {
        let _ = writeln!(text, "{r}");
    }
    write_file(path, text.as_bytes())
}

/// Pretty JSON with a top-level `provenance` object.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        provenance: &'a Provenance,
        #[serde(flatten)]
        body: &'a T,
    }
    let text = serde_json::to_string_pretty(&Doc { provenance: prov, body })
        .map_err(|e| CliError::Other(format!("serialising {}: {e}", path.display())))?;
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Appends a timestamped line to `run.log`; the only place wall-clock time is recorded.
pub fn log_line(out: &Path, msg: &str) {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    eprintln!("{msg}");
    if fs::create_dir_all(out).is_err() {
        return;
    }
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(out.join("run.log")) {
        let _ = writeln!(f, "{secs} {msg}");
    }
}

pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}
