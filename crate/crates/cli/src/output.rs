//! Atomic file output with config-hash provenance.
//!
//! Every data file embeds the config hash (CSV: leading comment line, JSON:
//! top-level field). Timestamps live only in `run_meta.json`, so reruns with
//! the same config produce byte-identical data files.

use std::fs;
use std::path::Path;
use std::path::PathBuf;

use crate::CliError;

pub struct OutputDir {
    dir: PathBuf,
    hash: String,
}

impl OutputDir {
    pub fn create(dir: &Path, hash: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
        })
    }

    /// Write-temp-rename; partial files never appear under the final name.
    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!("{name}.tmp~"));
        fs::write(&tmp, bytes)
            .map_err(|e| CliError::Io(format!("write {}: {e}", tmp.display())))?;
        fs::rename(&tmp, &target)
            .map_err(|e| CliError::Io(format!("rename to {}: {e}", target.display())))?;
        Ok(())
    }

    pub fn write_csv(&self, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<(), CliError> {
        let mut s = format!("# config_hash={}\n{header}\n", self.hash);
        for row in rows {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(',');
                }
                s.push_str(&format_sig17(*v));
                first = false;
            }
            s.push('\n');
        }
        self.write_atomic(name, s.as_bytes())
    }

    pub fn write_json(&self, name: &str, value: serde_json::Value) -> Result<(), CliError> {
        let mut value = value;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert(
                "config_hash".to_string(),
                serde_json::Value::String(self.hash.clone()),
            );
        }
        let body = serde_json::to_string_pretty(&value)
            .map_err(|e| CliError::Io(format!("json encode: {e}")))?;
        self.write_atomic(name, body.as_bytes())
    }

    /// The one file that may carry a timestamp.
    pub fn write_run_meta(&self, command: &str) -> Result<(), CliError> {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "command": command,
            "config_hash": self.hash,
            "timestamp_unix": ts,
        });
        let body = serde_json::to_string_pretty(&meta)
            .map_err(|e| CliError::Io(format!("json encode: {e}")))?;
        self.write_atomic("run_meta.json", body.as_bytes())
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_sig17(v: f64) -> String {
    format!("{v:.16e}")
}
