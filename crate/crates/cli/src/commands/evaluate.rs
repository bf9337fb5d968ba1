use std::path::Path;

use sgdrf_core::io::write_metrics;
use sgdrf_core::{coverage_fraction, pkl_checkpoint, vgp_fit, vgp_predict, Error, Location, PklSummary, Result};

use crate::commands::predict::load_any;
use crate::common::{list_checkpoints, load_config, load_dataset, not_found};
use crate::{ModelChoice, PredictChoice};

pub(crate) fn run(
    config: &Path,
    data: &Path,
    checkpoints_dir: Option<&Path>,
    model: ModelChoice,
    out: &Path,
    mode: PredictChoice,
    samples: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data, &cfg)?;
    let n = ds.records.len();
    let checkpoints = match checkpoints_dir {
        Some(dir) => {
            let found = list_checkpoints(dir)?;
            if found.is_empty() {
                return Err(not_found(dir, "no checkpoint-t*.sgdrf files"));
            }
            found
        }
        None if model == ModelChoice::Vgp => {
            let stride = cfg.evaluation.checkpoint_stride;
            (1..=n / stride).map(|i| (i * stride, Default::default())).collect()
        }
        None => {
            return Err(Error::InvalidArgument(
                "--checkpoints-dir is required for --model sgdrf".into(),
            ))
        }
    };
    let locations: Vec<Location> = ds.records.iter().map(|r| r.location().clone()).collect();
    let lengthscales = &cfg.kernel.lengthscales;
    let epsilon = cfg.metrics.epsilon;
    let hyper = cfg.model_hyper()?;
    let vgp_cfg = cfg.vgp_config();
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (t, path) in checkpoints {
        if t > n {
            return Err(Error::InvalidArgument(format!(
                "checkpoint t = {t} is beyond the {n} records in {}",
                data.display()
            )));
        }
        if t == n {
            log::warn!("skipping checkpoint t = {t}: no future records to evaluate against");
            continue;
        }
        let future = &ds.records[t..];
        let queries = &locations[t..];
        let pred = match model {
            ModelChoice::Sgdrf => {
                let (loaded, header) = load_any(&path, &cfg)?;
                if header.kind != sgdrf_core::io::ModelKind::Sgdrf {
                    return Err(Error::InvalidArgument(format!("{} is not an S-GDRF checkpoint", path.display())));
                }
                loaded.predict(queries, mode, samples, cfg.inference.seed)?
            }
            ModelChoice::Vgp => {
                if t == 0 {
                    return Err(Error::InvalidArgument("the VGP baseline needs at least one training record".into()));
                }
                let state = vgp_fit(&ds.records[..t], &hyper, &vgp_cfg)?;
                vgp_predict(&state, queries)?
            }
        };
        let stats = pkl_checkpoint(&pred, future, epsilon)?;
        let coverage = coverage_fraction(&locations[..t], queries, lengthscales)?;
        log::info!("t={t} coverage={coverage:.3} median_pkl={:.4}", stats.median);
        rows.push(PklSummary {
            checkpoint_t: t,
            coverage_fraction: coverage,
            stats,
        });
    }
    let name = match model {
        ModelChoice::Sgdrf => "sgdrf",
        ModelChoice::Vgp => "vgp",
    };
    write_metrics(out, name, epsilon, &rows, Some(&cfg.hash()))
}
