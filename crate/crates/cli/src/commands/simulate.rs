use std::path::Path;
use std::sync::Arc;

use sgdrf_core::io::{save_checkpoint, write_community_map};
use sgdrf_core::{
    lawnmower_order, make_grid, ml_community_map, predict, Error, GdrfModel, IterationReport,
    ObservationRecord, PredictMode, RegularGrid, Result, StreamingEngine,
};

use crate::common::{load_config, load_dataset, log_iteration};

/// Distinct values along each axis, merged when closer than `tol`.
fn distinct_axis_counts(records: &[ObservationRecord], d: usize, tol: f64) -> Vec<usize> {
    (0..d)
        .map(|axis| {
            let mut v: Vec<f64> = records.iter().map(|r| r.location().coords()[axis]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= tol);
            v.len()
        })
        .collect()
}

/// For every grid cell, the index of the record observed there.
pub(crate) fn match_records_to_grid(records: &[ObservationRecord], grid: &RegularGrid) -> Result<Vec<usize>> {
    if records.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "{} records cannot cover a grid of {} cells exactly once",
            records.len(),
            grid.len()
        )));
    }
    let spacing = grid.spacing();
    let lower = grid.bounds().lower();
    let mut owner = vec![usize::MAX; grid.len()];
    for (i, r) in records.iter().enumerate() {
        let c = r.location().coords();
        let idx: Vec<usize> = c
            .iter()
            .zip(&spacing)
            .zip(lower)
            .map(|((&x, &s), &lo)| if s > 0.0 { ((x - lo) / s).round().max(0.0) as usize } else { 0 })
            .collect();
        let off_grid = || {
            Error::InvalidArgument(format!("record {} at {c:?} is not a point of the {:?} grid", i + 1, grid.counts()))
        };
        if idx.iter().zip(grid.counts()).any(|(&j, &n)| j >= n) {
            return Err(off_grid());
        }
        let cell = grid.flat_index(&idx);
        let p = grid.points()[cell].coords();
        let tol = 1e-6 * spacing.iter().cloned().fold(1.0, f64::max);
        if p.iter().zip(c).any(|(a, b)| (a - b).abs() > tol) {
            return Err(off_grid());
        }
        if owner[cell] != usize::MAX {
            return Err(Error::InvalidArgument(format!(
                "records {} and {} both sit at grid point {p:?}",
                owner[cell] + 1,
                i + 1
            )));
        }
        owner[cell] = i;
    }
    Ok(owner)
}

pub(crate) fn run(
    config: &Path,
    features: &Path,
    out_map: &Path,
    out_checkpoint: &Path,
    grid_counts: Option<&[usize]>,
    log_every: u64,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    if cfg.world.d != 2 {
        return Err(Error::InvalidArgument("lawnmower simulation needs a 2-D world".into()));
    }
    let ds = load_dataset(features, &cfg)?;
    let bounds = cfg.world_bounds()?;
    let counts = match grid_counts {
        Some(c) => c.to_vec(),
        None => {
            let span = bounds.upper().iter().zip(bounds.lower()).map(|(u, l)| u - l).fold(0.0, f64::max);
            distinct_axis_counts(&ds.records, 2, 1e-9 * span)
        }
    };
    let grid = make_grid(&bounds, &counts)?;
    let owner = match_records_to_grid(&ds.records, &grid)?;
    let stream: Vec<ObservationRecord> = lawnmower_order(&grid)?
        .into_iter()
        .map(|cell| ds.records[owner[cell]].clone())
        .collect();
    let model = Arc::new(GdrfModel::new(cfg.model_hyper()?)?);
    let seed = seed.unwrap_or(cfg.inference.seed);
    let mut engine = StreamingEngine::new(model.clone(), cfg.engine_config(), seed)?;
    let mut callback = |_: &StreamingEngine, r: &IterationReport| log_iteration(r, log_every);
    for record in stream {
        engine.ingest(record, &mut callback)?;
    }
    let hash = cfg.hash();
    save_checkpoint(out_checkpoint, engine.state(), Some(engine.optimizer()), &hash)?;
    let state = engine.into_state();
    let pred = predict(&state, grid.points(), &model, PredictMode::PlugIn)?;
    let map = ml_community_map(&pred, &grid)?;
    write_community_map(out_map, &map, Some(&hash))
}
