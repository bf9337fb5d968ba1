use std::path::Path;

use sgdrf_core::io::{
    load_checkpoint, load_vgp_checkpoint, read_checkpoint_header, read_locations, write_community_map, write_phi,
    write_predictions, write_theta, CheckpointHeader, ModelKind,
};
use sgdrf_core::{
    ml_community_map, predict, vgp_predict, Error, GdrfModel, Location, PredictiveDistribution, Result, RunConfig,
    VariationalState,
};

use crate::common::{grid, load_config, predict_mode};
use crate::PredictChoice;

pub(crate) struct Args<'a> {
    pub config: &'a Path,
    pub checkpoint: &'a Path,
    pub locations: Option<&'a Path>,
    pub grid_counts: Option<&'a [usize]>,
    pub out: &'a Path,
    pub theta_out: Option<&'a Path>,
    pub phi_out: Option<&'a Path>,
    pub map_out: Option<&'a Path>,
    pub mode: PredictChoice,
    pub samples: usize,
    pub seed: Option<u64>,
}

/// A checkpoint of either kind, ready to predict.
pub(crate) enum Loaded {
    Sgdrf(Box<VariationalState>, Box<GdrfModel>),
    Vgp(Box<sgdrf_core::VgpState>),
}

pub(crate) fn load_any(path: &Path, cfg: &RunConfig) -> Result<(Loaded, CheckpointHeader)> {
    let hyper = cfg.model_hyper()?;
    let header = read_checkpoint_header(path)?;
    if header.config_hash != cfg.hash() {
        log::warn!(
            "{} was written under config {}, predicting with {}",
            path.display(),
            header.config_hash,
            cfg.hash()
        );
    }
    match header.kind {
        ModelKind::Sgdrf => {
            header.check_dims(&hyper)?;
            let ck = load_checkpoint(path)?;
            Ok((Loaded::Sgdrf(Box::new(ck.state), Box::new(GdrfModel::new(hyper)?)), header))
        }
        ModelKind::Vgp => {
            let (state, header) = load_vgp_checkpoint(path, &hyper)?;
            Ok((Loaded::Vgp(Box::new(state)), header))
        }
    }
}

impl Loaded {
    pub(crate) fn predict(&self, queries: &[Location], mode: PredictChoice, samples: usize, seed: u64) -> Result<PredictiveDistribution> {
        match self {
            Loaded::Sgdrf(state, model) => predict(state, queries, model, predict_mode(mode, samples, seed)),
            Loaded::Vgp(state) => {
                if mode == PredictChoice::MonteCarlo {
                    log::warn!("the VGP baseline predicts in closed form; ignoring --mode monte-carlo");
                }
                vgp_predict(state, queries)
            }
        }
    }
}

pub(crate) fn run(args: &Args<'_>) -> Result<()> {
    let cfg = load_config(args.config)?;
    let (loaded, _) = load_any(args.checkpoint, &cfg)?;
    let is_vgp = matches!(loaded, Loaded::Vgp(_));
    if is_vgp && (args.theta_out.is_some() || args.phi_out.is_some() || args.map_out.is_some()) {
        return Err(Error::InvalidArgument(
            "VGP checkpoints have no communities: --theta-out, --phi-out and --map-out need an S-GDRF checkpoint".into(),
        ));
    }
    let bounds = cfg.world_bounds()?;
    let (queries, g) = match (args.locations, args.grid_counts) {
        (Some(path), None) => (read_locations(path)?, None),
        (None, counts) => {
            let g = grid(&cfg, counts)?;
            (g.points().to_vec(), Some(g))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --locations with --grid-counts"),
    };
    for q in &queries {
        bounds.check(q)?;
    }
    let pred = loaded.predict(&queries, args.mode, args.samples, args.seed.unwrap_or(cfg.inference.seed))?;
    let hash = cfg.hash();
    let h = Some(hash.as_str());
    write_predictions(args.out, &pred, h)?;
    if let Some(p) = args.theta_out {
        write_theta(p, &pred, h)?;
    }
    if let (Some(p), Loaded::Sgdrf(state, _)) = (args.phi_out, &loaded) {
        write_phi(p, &state.phi_mean(), h)?;
    }
    if let (Some(p), Some(g)) = (args.map_out, &g) {
        write_community_map(p, &ml_community_map(&pred, g)?, h)?;
    }
    Ok(())
}
