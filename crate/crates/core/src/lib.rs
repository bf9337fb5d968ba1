//! Streaming Gaussian Dirichlet random fields.
//!
//! A spatial topic model for count observations: `K` latent Gaussian processes
//! pass through a softmax to give community proportions at every location, and
//! each community is a categorical distribution over `W` observation classes.
//! The posterior is tracked online with black-box variational inference on a
//! recency-weighted subsample of everything seen so far.
//!
//! The crate also carries a per-category sparse-GP regression baseline, the
//! predictive-KL evaluation metrics, and the file formats used by the CLI.

pub mod engine;
pub mod error;
pub mod geometry;
pub mod gp;
pub mod io;
pub mod metrics;
pub mod model;
pub mod observation;
pub mod variational;
pub mod vgp;

pub use engine::{
    streaming_fit, EngineConfig, EstimatorConfig, IterationReport, ObservationBuffer, StreamingEngine,
    SubsamplerConfig,
};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{lawnmower_order, lawnmower_trajectory, make_grid, Location, RegularGrid, WorldBounds};
pub use gp::{KernelParams, SparseGp};
pub use io::RunConfig;
pub use metrics::{coverage_fraction, kl_divergence, pkl_checkpoint, PklStats, PklSummary};
pub use model::{
    generate_synthetic, ml_community_map, predict, CommunityMap, GdrfModel, ModelHyperparams, PhiMatrix,
    PredictMode, PredictiveDistribution, SyntheticData,
};
pub use observation::ObservationRecord;
pub use variational::VariationalState;
pub use vgp::{vgp_fit, vgp_predict, VgpConfig, VgpState};
