use std::path::Path;
use std::sync::Arc;

use sgdrf_core::io::{save_checkpoint, save_vgp_checkpoint};
use sgdrf_core::{vgp_fit, Error, GdrfModel, Result, StreamingEngine};

use crate::common::{checkpoint_file_name, ensure_dir, load_config, load_dataset, log_iteration};

pub(crate) fn run(
    config: &Path,
    data: &Path,
    checkpoint_out: &Path,
    checkpoint_every: Option<usize>,
    log_every: u64,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let every = checkpoint_every.unwrap_or(cfg.evaluation.checkpoint_stride);
    if every == 0 {
        return Err(Error::InvalidArgument("--checkpoint-every must be positive".into()));
    }
    let ds = load_dataset(data, &cfg)?;
    let model = Arc::new(GdrfModel::new(cfg.model_hyper()?)?);
    let mut engine = StreamingEngine::new(model, cfg.engine_config(), seed.unwrap_or(cfg.inference.seed))?;
    ensure_dir(checkpoint_out)?;
    let hash = cfg.hash();
    let n = ds.records.len();
    let mut callback = |_: &StreamingEngine, r: &sgdrf_core::IterationReport| log_iteration(r, log_every);
    for record in ds.records {
        engine.ingest(record, &mut callback)?;
        let t = engine.t();
        if t % every == 0 || t == n {
            let path = checkpoint_out.join(checkpoint_file_name(t));
            save_checkpoint(&path, engine.state(), Some(engine.optimizer()), &hash)?;
        }
    }
    log::info!("streamed {n} records, {} iterations", engine.state().step_count);
    Ok(())
}

pub(crate) fn run_vgp(config: &Path, data: &Path, out: &Path, upto: Option<usize>) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data, &cfg)?;
    let t = upto.unwrap_or(ds.records.len());
    if t == 0 || t > ds.records.len() {
        return Err(Error::InvalidArgument(format!(
            "--upto must be in 1..={}, got {t}",
            ds.records.len()
        )));
    }
    let state = vgp_fit(&ds.records[..t], &cfg.model_hyper()?, &cfg.vgp_config())?;
    save_vgp_checkpoint(out, &state, &cfg.hash())
}
