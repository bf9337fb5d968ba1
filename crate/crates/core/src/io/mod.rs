//! File formats: datasets, configuration, checkpoints and result tables.
//!
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename, so readers never see a half-written file.

mod checkpoint;
mod config;
mod dataset;
mod output;

pub use checkpoint::{
    load_checkpoint, load_vgp_checkpoint, read_checkpoint_header, save_checkpoint, save_vgp_checkpoint,
    Checkpoint, CheckpointHeader, ModelKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    BetaSpec, EvaluationSection, InducingSection, InferenceSection, KernelSection, MetricsSection, ModelSection,
    RunConfig, VgpSection, WorldSection,
};
pub use dataset::{read_dataset, read_locations, write_dataset, write_locations, Dataset};
pub use output::{
    read_predictions, write_community_map, write_metrics, write_phi, write_predictions, write_theta,
    PredictionTable,
};

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes through `f` into a temporary sibling of `path`, then renames it into place.
pub(crate) fn write_atomic<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        f(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Fixed 17-significant-digit scientific notation used for probabilities.
pub(crate) fn fmt_prob(v: f64) -> String {
    format!("{v:.16e}")
}
