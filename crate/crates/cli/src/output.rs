//! CSV serialization and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nbafl_core::orchestrator::RunResult;

use crate::error::{CliError, CliResult};

pub const TRACE_HEADER: &str = "round,train_loss,test_loss,test_acc,sigma_uplink,sigma_downlink,sigma_aggregate,scheduled_k,seed";

/// 17 significant digits, enough to recover every `f64` exactly.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

/// One row per round under [`TRACE_HEADER`].
pub fn trace_csv(result: &RunResult) -> String {
    let mut out = String::with_capacity(64 * (result.traces.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for t in &result.traces {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            t.round,
            real(t.train_loss),
            real(t.test_loss),
            real(t.test_acc),
            real(t.sigma_uplink),
            real(t.sigma_downlink),
            real(t.sigma_aggregate),
            t.scheduled.len(),
            result.config.master_seed,
        ));
    }
    out
}

pub fn trace_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("run_{seed}.csv"))
}

/// Writes `contents` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(format!("writing {}", path.display()), e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for x in [0.1, 1.0 / 3.0, 8.631976278033998e-5, 0.0, 123456.789, f64::MIN_POSITIVE] {
            let s = real(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(real(1.0), "1.0000000000000000e0");
    }
}
