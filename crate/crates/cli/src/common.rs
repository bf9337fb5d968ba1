use std::path::{Path, PathBuf};

use sgdrf_core::io::{read_dataset, Dataset};
use sgdrf_core::{make_grid, Error, IterationReport, PredictMode, RegularGrid, Result, RunConfig};

use crate::PredictChoice;

pub(crate) fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    log::debug!("config {} hash {}", path.display(), cfg.hash());
    Ok(cfg)
}

/// Reads a dataset and checks its dimensionality and category count against the config.
pub(crate) fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    if ds.d != cfg.world.d {
        return Err(Error::DimensionMismatch {
            what: format!("coordinates in {}", path.display()),
            expected: cfg.world.d,
            found: ds.d,
        });
    }
    if ds.w != cfg.model.w {
        return Err(Error::DimensionMismatch {
            what: format!("categories in {}", path.display()),
            expected: cfg.model.w,
            found: ds.w,
        });
    }
    let bounds = cfg.world_bounds()?;
    for r in &ds.records {
        bounds.check(r.location())?;
    }
    Ok(ds)
}

pub fn checkpoint_file_name(t: usize) -> String {
    format!("checkpoint-t{t:06}.sgdrf")
}

/// `t` from a `checkpoint-t<t>.sgdrf` file name.
pub fn parse_checkpoint_name(name: &str) -> Option<usize> {
    name.strip_prefix("checkpoint-t")?.strip_suffix(".sgdrf")?.parse().ok()
}

/// Checkpoints in `dir`, sorted by `t`.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        if let Some(t) = entry.file_name().to_str().and_then(parse_checkpoint_name) {
            out.push((t, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn not_found(path: &Path, what: &str) -> Error {
    io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, what.to_string()))
}

pub(crate) fn grid(cfg: &RunConfig, counts: Option<&[usize]>) -> Result<RegularGrid> {
    let counts = counts.unwrap_or(&cfg.inducing.counts);
    make_grid(&cfg.world_bounds()?, counts)
}

/// `<dir>/<stem><suffix>` next to `path`.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

pub(crate) fn predict_mode(choice: PredictChoice, samples: usize, seed: u64) -> PredictMode {
    match choice {
        PredictChoice::PlugIn => PredictMode::PlugIn,
        PredictChoice::MonteCarlo => PredictMode::MonteCarlo { samples, seed },
    }
}

pub(crate) fn log_iteration(report: &IterationReport, every: u64) {
    if every > 0 && report.iteration % every == 0 {
        eprintln!("t={} iter={} elbo={:.6}", report.t, report.iteration, report.elbo);
    }
}

/// Writes `text` to a sibling temporary file, then renames it over `path`.
pub(crate) fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = PathBuf::from(format!("{}.partial", path.display()));
    std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
