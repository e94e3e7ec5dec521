pub mod detect;
pub mod eval;
pub mod forecast;
pub mod gradcheck;
pub mod train;

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use mrf_core::data::Standardizer;
use mrf_core::model::MultiResFormer;
use mrf_core::tensor::load_checkpoint;

use crate::failure::Failure;
use crate::manifest::{RunManifest, CHECKPOINT_FILE, SCALER_FILE};

/// 64-bit FNV-1a, used only to name default run directories.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Writes to stdout, treating a closed pipe (`mrf … | head`) as success.
pub(crate) fn emit(bytes: &[u8]) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    match out.write_all(bytes).and_then(|()| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Failure::io("stdout", e)),
        _ => Ok(()),
    }
}

pub(crate) fn emit_line(text: &str) -> Result<(), Failure> {
    emit(format!("{text}\n").as_bytes())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path.display(), e))
}

/// Rebuilds the model a run trained, with the checkpoint's weights.
pub(crate) fn load_model(
    run: &Path,
    manifest: &RunManifest,
    checkpoint: Option<&Path>,
) -> Result<MultiResFormer, Failure> {
    let path = checkpoint.map_or_else(|| run.join(CHECKPOINT_FILE), Path::to_path_buf);
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "checkpoint `{}` not found",
            path.display()
        )));
    }
    let store = load_checkpoint(&path)?;
    let mut model = MultiResFormer::new(manifest.config.model.clone(), manifest.seed)?;
    model.params.store.copy_values_from(&store)?;
    Ok(model)
}

pub(crate) fn load_scaler(run: &Path) -> Result<Standardizer, Failure> {
    let path = run.join(SCALER_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::usage(format!("cannot read `{}`: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::corrupt(format!("`{}` is corrupt: {e}", path.display())))
}
