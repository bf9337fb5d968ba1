use std::path::Path;

use sgdrf_core::io::{read_locations, write_dataset, write_phi, write_predictions, write_theta};
use sgdrf_core::{generate_synthetic, Result};

use crate::common::{grid, load_config, sibling};

pub(crate) struct Args<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub truth_out: &'a Path,
    pub theta_out: Option<&'a Path>,
    pub phi_out: Option<&'a Path>,
    pub locations: &'a str,
    pub grid_counts: Option<&'a [usize]>,
    pub count_per_location: u64,
    pub seed: Option<u64>,
}

pub(crate) fn run(args: &Args<'_>) -> Result<()> {
    let cfg = load_config(args.config)?;
    let hyper = cfg.model_hyper()?;
    let locations = if args.locations == "grid" {
        grid(&cfg, args.grid_counts)?.points().to_vec()
    } else {
        read_locations(Path::new(args.locations))?
    };
    let seed = args.seed.unwrap_or(cfg.inference.seed);
    let data = generate_synthetic(&hyper, &locations, args.count_per_location, seed)?;
    let hash = cfg.hash();
    let h = Some(hash.as_str());
    write_dataset(args.out, cfg.world.d, cfg.model.w, &data.dataset, h)?;
    write_predictions(args.truth_out, &data.truth, h)?;
    let theta_out = args.theta_out.map_or_else(|| sibling(args.truth_out, "_theta.csv"), Path::to_path_buf);
    write_theta(&theta_out, &data.truth, h)?;
    let phi_out = args.phi_out.map_or_else(|| sibling(args.truth_out, "_phi.csv"), Path::to_path_buf);
    write_phi(&phi_out, &data.phi_true, h)?;
    log::info!("wrote {} records to {}", data.dataset.len(), args.out.display());
    Ok(())
}
