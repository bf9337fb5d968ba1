//! Streaming trainer: observation buffer, recency-biased subsampling,
//! stochastic ELBO gradients and Adam updates interleaved with data arrival.
//!
//! Per-iteration work depends on `n_s`, `m`, `K`, `W` and the sample count,
//! never on how many records have been buffered: projection rows are cached
//! once per record on arrival and minibatches are drawn in O(n_s).

mod estimator;
mod optimizer;
mod subsample;

pub use estimator::{bbvi_gradient, elbo_estimate, Batch, DrawScheme, EstimatorConfig, GradientEstimate};
pub use optimizer::{optimizer_step, AdamConfig, OptimizerState, StepOutcome};
pub use subsample::{batch_weights, subsample_indices, subsample_probability, Subsample, SubsamplerConfig};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_len, Error, Result};
use crate::gp::ConditionalWeights;
use crate::model::GdrfModel;
use crate::observation::ObservationRecord;
use crate::variational::VariationalState;

/// Append-only record store with one cached projection row per record.
#[derive(Debug, Clone, Default)]
pub struct ObservationBuffer {
    records: Vec<ObservationRecord>,
    rows: Vec<f64>,
    m: usize,
}

impl ObservationBuffer {
    pub fn new(m: usize) -> Self {
        ObservationBuffer {
            records: Vec::new(),
            rows: Vec::new(),
            m,
        }
    }

    pub fn push(&mut self, record: ObservationRecord, row: &[f64]) -> Result<()> {
        ensure_len("projection row", self.m, row.len())?;
        self.records.push(record);
        self.rows.extend_from_slice(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    /// Gathers a weighted batch from buffer indices.
    pub fn batch(&self, indices: &[usize], weights: &[f64]) -> Result<Batch<'_>> {
        ensure_len("batch weights", indices.len(), weights.len())?;
        let mut data = Vec::with_capacity(indices.len() * self.m);
        let mut records = Vec::with_capacity(indices.len());
        for (&i, &w) in indices.iter().zip(weights) {
            data.extend_from_slice(self.row(i));
            records.push((&self.records[i], w));
        }
        Batch::new(records, ConditionalWeights::from_row_major(indices.len(), self.m, data)?)
    }

    /// Every buffered record with unit weight.
    pub fn full_batch(&self) -> Result<Batch<'_>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, &vec![1.0; idx.len()])
    }

    /// Heap bytes held by records and cached rows.
    pub fn heap_bytes(&self) -> usize {
        self.records.capacity() * std::mem::size_of::<ObservationRecord>()
            + self.records.iter().map(|r| r.heap_bytes()).sum::<usize>()
            + self.rows.capacity() * std::mem::size_of::<f64>()
    }
}

/// Knobs of the streaming loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub subsampler: SubsamplerConfig,
    pub estimator: EstimatorConfig,
    pub iters_per_obs: usize,
    pub adam: AdamConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            subsampler: SubsamplerConfig::default(),
            estimator: EstimatorConfig::default(),
            iters_per_obs: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.subsampler.validate()?;
        self.adam.validate()?;
        if self.estimator.samples == 0 {
            return Err(Error::InvalidArgument("samples must be positive".into()));
        }
        if self.estimator.control_variates && self.estimator.samples < 2 {
            return Err(Error::InvalidArgument(
                "control variates need samples ≥ 2".into(),
            ));
        }
        Ok(())
    }
}

/// What one training iteration reports to callbacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    /// Records observed so far.
    pub t: usize,
    /// Global iteration counter (1-based).
    pub iteration: u64,
    pub elbo: f64,
    pub outcome: StepOutcome,
}

/// Single-writer owner of the variational state, buffer and optimizer.
#[derive(Debug, Clone)]
pub struct StreamingEngine {
    model: Arc<GdrfModel>,
    cfg: EngineConfig,
    state: VariationalState,
    buffer: ObservationBuffer,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    /// Scratch copy of the flat parameters, reused across iterations.
    flat: Vec<f64>,
}

impl StreamingEngine {
    pub fn new(model: Arc<GdrfModel>, cfg: EngineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let state = VariationalState::init(model.k(), model.m(), &model.hyper().beta);
        let opt = OptimizerState::new(state.num_params(), cfg.adam);
        Ok(StreamingEngine {
            buffer: ObservationBuffer::new(model.m()),
            model,
            cfg,
            state,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            flat: Vec::new(),
        })
    }

    pub fn model(&self) -> &GdrfModel {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn buffer(&self) -> &ObservationBuffer {
        &self.buffer
    }

    pub fn t(&self) -> usize {
        self.buffer.len()
    }

    /// Appends a record after checking it against the world and category count.
    pub fn observe(&mut self, record: ObservationRecord) -> Result<()> {
        ensure_len("record categories", self.model.w(), record.num_categories())?;
        self.model.hyper().inducing.bounds().check(record.location())?;
        let row = self.model.projection(std::slice::from_ref(record.location()))?;
        self.buffer.push(record, row.row(0))
    }

    /// Appends many records; used to prefill buffers for benchmarks.
    pub fn observe_all(&mut self, records: impl IntoIterator<Item = ObservationRecord>) -> Result<()> {
        records.into_iter().try_for_each(|r| self.observe(r))
    }

    /// One BBVI step on a fresh subsample of the buffer.
    pub fn train_iteration(&mut self) -> Result<IterationReport> {
        let t = self.buffer.len();
        if t == 0 {
            return Err(Error::InvalidArgument("no observations to train on".into()));
        }
        let drawn = subsample_indices(t, &self.cfg.subsampler, &mut self.rng)?;
        let weights = batch_weights(&drawn, t, &self.cfg.subsampler)?;
        let batch = self.buffer.batch(&drawn.indices, &weights)?;
        let est = bbvi_gradient(&self.state, &batch, &self.cfg.estimator, &mut self.rng, &self.model)?;
        self.state.write_flat_into(&mut self.flat);
        let outcome = self.opt.step(&mut self.flat, &est.gradient)?;
        if outcome == StepOutcome::Applied {
            self.state.set_flat(&self.flat)?;
        }
        self.state.step_count += 1;
        Ok(IterationReport {
            t,
            iteration: self.state.step_count,
            elbo: est.elbo,
            outcome,
        })
    }

    /// Observes `record` then runs `iters_per_obs` iterations, reporting each.
    pub fn ingest<F>(&mut self, record: ObservationRecord, callback: &mut F) -> Result<()>
    where
        F: FnMut(&StreamingEngine, &IterationReport),
    {
        self.observe(record)?;
        for _ in 0..self.cfg.iters_per_obs {
            let report = self.train_iteration()?;
            callback(self, &report);
        }
        Ok(())
    }

    /// Replaces state and optimizer, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, state: VariationalState, opt: OptimizerState) -> Result<()> {
        state.check_dims(self.model.k(), self.model.m(), self.model.w())?;
        ensure_len("optimizer moments", state.num_params(), opt.len())?;
        self.state = state;
        self.opt = opt;
        Ok(())
    }

    /// Heap bytes owned by the engine: buffer plus parameter-sized vectors.
    pub fn heap_bytes(&self) -> usize {
        self.buffer.heap_bytes() + 3 * self.state.num_params() * std::mem::size_of::<f64>()
    }

    pub fn into_state(self) -> VariationalState {
        self.state
    }
}

/// Streams `source` through a fresh engine, calling `callback` after every iteration.
pub fn streaming_fit<I, F>(
    source: I,
    model: Arc<GdrfModel>,
    cfg: EngineConfig,
    seed: u64,
    mut callback: F,
) -> Result<VariationalState>
where
    I: IntoIterator<Item = ObservationRecord>,
    F: FnMut(&StreamingEngine, &IterationReport),
{
    let mut engine = StreamingEngine::new(model, cfg, seed)?;
    for record in source {
        engine.ingest(record, &mut callback)?;
    }
    Ok(engine.into_state())
}
