//! Experiment runner: configuration, artifact layout, and the subcommands behind
//! the `gradleak` binary.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

mod config;
mod render;
mod run;

pub use config::{
    AttackBlock, Architecture, DataConfig, DataSource, ExperimentConfig, ModelConfig, OneOrMany, Overrides, SplitName,
};
pub use render::{encode_grid, parse_ppm, render_grid, Ppm};
pub use run::{
    fed_train_cmd, load_data, model_params, read_images_csv, render_cmd, run_attack_cmd, score_outcome, AttackRun,
    CellSummary, Data, FedSummary, ScoredBatch,
};

/// Process exit status for a failed command: 2 for configuration, IO and dataset
/// errors, 3 for divergence, 1 for anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io { .. } | Error::Idx { .. } => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
