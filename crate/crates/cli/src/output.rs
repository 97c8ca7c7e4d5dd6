use std::io::Write;
use std::path::Path;

use latecut::data;
use latecut::scheduler::Sample;
use latecut::{checkpoint, ResidualNetwork, Tensor};
use serde::Serialize;

use crate::{CliError, CliResult};

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = crate::output_dir(path);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::at(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::at(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::at(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::at(path, e))?;
    tmp.persist(path).map_err(|e| CliError::at(path, e.error))?;
    log::debug!("wrote {}", path.display());
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_checkpoint(path: &Path, net: &ResidualNetwork) -> CliResult<()> {
    write_atomic(path, &checkpoint::encode(net))
}

/// Records the fully resolved invocation as `<name>.config.json` in `dir`.
pub fn log_resolved(dir: &Path, name: &str, config: &impl Serialize) -> CliResult<()> {
    let path = dir.join(format!("{name}.config.json"));
    write_json(&path, config)?;
    log::info!("resolved config logged to {}", path.display());
    Ok(())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::at(path, e))
}

pub fn load_checkpoint(path: &Path) -> CliResult<ResidualNetwork> {
    checkpoint::load(path).map_err(|e| with_path(path, e))
}

pub fn load_samples(path: &Path) -> CliResult<Vec<Sample>> {
    data::load_samples(path).map_err(|e| with_path(path, e))
}

/// Inputs of a sample file as a `[N x input_dim]` matrix; labels are ignored.
pub fn load_inputs(path: &Path) -> CliResult<Tensor> {
    let samples = load_samples(path)?;
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    Tensor::from_rows(&rows).map_err(|e| with_path(path, e))
}

/// Library error annotated with the file it came from, keeping its kind.
pub fn with_path(path: &Path, err: latecut::Error) -> CliError {
    let mut e = CliError::from(err);
    e.message = format!("{}: {}", path.display(), e.message);
    e
}
