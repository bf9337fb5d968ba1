use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgdrf_core::{Error, GdrfModel, Location, ObservationRecord, Result, StreamingEngine, WorldBounds};

use crate::common::{load_config, write_text_atomic};

pub(crate) struct Args<'a> {
    pub config: &'a Path,
    pub sizes: &'a [usize],
    pub n_s: Option<&'a [usize]>,
    pub iterations: usize,
    pub warmup: usize,
    pub count_per_location: u64,
    pub out: &'a Path,
}

/// Timing of one (n_s, buffer size) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n_s: usize,
    pub t: usize,
    pub iterations: usize,
    pub mean_seconds: f64,
    pub engine_heap_bytes: usize,
}

/// Uniform locations in `bounds`, each with `count` draws spread uniformly over `w` categories.
pub fn random_records(bounds: &WorldBounds, w: usize, n: usize, count: u64, seed: u64) -> Result<Vec<ObservationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let coords = bounds
                .lower()
                .iter()
                .zip(bounds.upper())
                .map(|(&lo, &hi)| rng.random_range(lo..=hi))
                .collect();
            let entries: Vec<(usize, u64)> = (0..count).map(|_| (rng.random_range(0..w), 1)).collect();
            ObservationRecord::from_sparse(Location::new(coords)?, w, entries)
        })
        .collect()
}

pub(crate) fn run(args: &Args<'_>) -> Result<Vec<BenchRow>> {
    let cfg = load_config(args.config)?;
    if args.sizes.is_empty() || args.sizes.contains(&0) {
        return Err(Error::InvalidArgument("--sizes must list positive buffer sizes".into()));
    }
    if args.iterations == 0 {
        return Err(Error::InvalidArgument("--iterations must be positive".into()));
    }
    let default_ns = [cfg.inference.n_s];
    let n_s_list = args.n_s.unwrap_or(&default_ns);
    let model = Arc::new(GdrfModel::new(cfg.model_hyper()?)?);
    let bounds = cfg.world_bounds()?;
    let largest = *args.sizes.iter().max().expect("nonempty");
    let records = random_records(&bounds, cfg.model.w, largest, args.count_per_location, cfg.inference.seed)?;

    let mut rows = Vec::new();
    for &n_s in n_s_list {
        let mut ecfg = cfg.engine_config();
        ecfg.subsampler.n_s = n_s;
        for &t in args.sizes {
            let mut engine = StreamingEngine::new(model.clone(), ecfg, cfg.inference.seed)?;
            engine.observe_all(records[..t].iter().cloned())?;
            for _ in 0..args.warmup {
                engine.train_iteration()?;
            }
            let start = Instant::now();
            for _ in 0..args.iterations {
                engine.train_iteration()?;
            }
            let mean_seconds = start.elapsed().as_secs_f64() / args.iterations as f64;
            log::info!("n_s={n_s} t={t}: {:.3} ms per iteration", 1e3 * mean_seconds);
            rows.push(BenchRow {
                n_s,
                t,
                iterations: args.iterations,
                mean_seconds,
                engine_heap_bytes: engine.heap_bytes(),
            });
        }
    }

    let mut text = format!("# config_hash={}\n", cfg.hash());
    text.push_str("n_s,t,iterations,mean_seconds,iterations_per_second,engine_heap_bytes\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{},{:.9e},{:.6},{}",
            r.n_s,
            r.t,
            r.iterations,
            r.mean_seconds,
            1.0 / r.mean_seconds,
            r.engine_heap_bytes
        );
    }
    write_text_atomic(args.out, &text)?;
    Ok(rows)
}
