//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use sgdrf_core::gp::KernelParams;
use sgdrf_core::{
    make_grid, EngineConfig, GdrfModel, Location, ModelHyperparams, ObservationRecord, StreamingEngine, SubsamplerConfig,
    WorldBounds,
};

/// 2-D model over `[0, 31]²` with `K` communities, `W` categories and an `g×g` inducing grid.
pub fn model(k: usize, w: usize, g: usize) -> Arc<GdrfModel> {
    let bounds = WorldBounds::new(vec![0.0, 0.0], vec![31.0, 31.0]).expect("bounds");
    Arc::new(
        GdrfModel::new(ModelHyperparams {
            k,
            w,
            beta: vec![0.1; w],
            gp_mean: 0.0,
            kernel: KernelParams::new(4.0, vec![5.0, 5.0]).expect("kernel"),
            inducing: make_grid(&bounds, &[g, g]).expect("grid"),
        })
        .expect("model"),
    )
}

/// `n` records on a scrambled walk through the world, 100 counts over a few categories each.
pub fn records(n: usize, w: usize) -> Vec<ObservationRecord> {
    (0..n)
        .map(|i| {
            let x = (i * 7919 % 3100) as f64 / 100.0;
            let y = (i * 104_729 % 3100) as f64 / 100.0;
            let entries = (0..5).map(|j| ((i * 31 + j * 17) % w, 20));
            ObservationRecord::from_sparse(Location::xy(x, y), w, entries).expect("record")
        })
        .collect()
}

/// An engine with `t` buffered records and minibatch size `n_s`.
pub fn engine(k: usize, w: usize, g: usize, t: usize, n_s: usize) -> StreamingEngine {
    let cfg = EngineConfig {
        subsampler: SubsamplerConfig { n_s, ..Default::default() },
        ..Default::default()
    };
    let mut e = StreamingEngine::new(model(k, w, g), cfg, 1).expect("engine");
    e.observe_all(records(t, w)).expect("records in bounds");
    e
}
