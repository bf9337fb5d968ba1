use std::io::Write;
use std::path::Path;

use crate::error::{ensure_len, Error, Result};
use crate::geometry::Location;
use crate::io::dataset::{write_coords, write_hash_comment};
use crate::io::{fmt_prob, write_atomic};
use crate::metrics::PklSummary;
use crate::model::{CommunityMap, PhiMatrix, PredictiveDistribution};

fn coord_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

fn write_rows(
    path: &Path,
    locations: &[Location],
    prefix: &str,
    width: usize,
    values: &[f64],
    config_hash: Option<&str>,
) -> Result<()> {
    let d = locations.first().map_or(1, |l| l.dim());
    write_atomic(path, |out| {
        write_hash_comment(out, config_hash)?;
        let mut header = coord_names(d);
        header.extend((0..width).map(|c| format!("{prefix}{c}")));
        writeln!(out, "{}", header.join(","))?;
        for (i, loc) in locations.iter().enumerate() {
            write_coords(out, loc)?;
            for v in &values[i * width..(i + 1) * width] {
                write!(out, ",{}", fmt_prob(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    })
}

/// Observation distributions per location: header `x1[,x2],p0,…`.
pub fn write_predictions(path: &Path, pred: &PredictiveDistribution, config_hash: Option<&str>) -> Result<()> {
    write_rows(path, &pred.locations, "p", pred.w, &pred.p_obs, config_hash)
}

/// Community weights per location: header `x1[,x2],theta0,…`.
pub fn write_theta(path: &Path, pred: &PredictiveDistribution, config_hash: Option<&str>) -> Result<()> {
    if pred.k == 0 {
        return Err(Error::InvalidArgument("prediction carries no community weights".into()));
    }
    write_rows(path, &pred.locations, "theta", pred.k, &pred.theta, config_hash)
}

/// Predictions read back from a `write_predictions` file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub locations: Vec<Location>,
    pub w: usize,
    pub p_obs: Vec<f64>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let bad = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let w = header.len() - d;
    if d == 0 || w == 0 {
        return Err(bad(1, "expected `x1[,x2],p0,…` columns".into()));
    }
    let mut locations = Vec::new();
    let mut p_obs = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let nums: std::result::Result<Vec<f64>, _> = row.iter().map(str::parse::<f64>).collect();
        let nums = nums.map_err(|e| bad(line, e.to_string()))?;
        locations.push(Location::new(nums[..d].to_vec()).map_err(|e| bad(line, e.to_string()))?);
        p_obs.extend_from_slice(&nums[d..]);
    }
    Ok(PredictionTable { locations, w, p_obs })
}

/// Topic-word matrix, one row per community: header `community,w0,…`.
pub fn write_phi(path: &Path, phi: &PhiMatrix, config_hash: Option<&str>) -> Result<()> {
    write_atomic(path, |out| {
        write_hash_comment(out, config_hash)?;
        let header: Vec<String> = (0..phi.w()).map(|c| format!("w{c}")).collect();
        writeln!(out, "community,{}", header.join(","))?;
        for k in 0..phi.k() {
            write!(out, "{k}")?;
            for v in phi.row(k) {
                write!(out, ",{}", fmt_prob(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    })
}

/// PKL-versus-training-size table.
pub fn write_metrics(
    path: &Path,
    model_name: &str,
    epsilon: f64,
    rows: &[PklSummary],
    config_hash: Option<&str>,
) -> Result<()> {
    write_atomic(path, |out| {
        writeln!(out, "# model={model_name}")?;
        writeln!(out, "# epsilon={epsilon}")?;
        write_hash_comment(out, config_hash)?;
        writeln!(out, "checkpoint_t,coverage_fraction,q25,median,q75")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.checkpoint_t,
                fmt_prob(r.coverage_fraction),
                fmt_prob(r.stats.q25),
                fmt_prob(r.stats.median),
                fmt_prob(r.stats.q75)
            )?;
        }
        Ok(())
    })
}

/// Writes the label grid as CSV (one line per row of the second axis) and
/// as a plain PGM image next to it.
pub fn write_community_map(path: &Path, map: &CommunityMap, config_hash: Option<&str>) -> Result<()> {
    let width = map.counts.first().copied().unwrap_or(0);
    let height = map.counts.get(1).copied().unwrap_or(1);
    ensure_len("community map cells", width * height, map.labels.len())?;
    write_atomic(path, |out| {
        write_hash_comment(out, config_hash)?;
        for r in 0..height {
            let line: Vec<String> = map.labels[r * width..(r + 1) * width].iter().map(|l| l.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    })?;
    let maxval = map.labels.iter().copied().max().unwrap_or(0).max(1);
    write_atomic(&path.with_extension("pgm"), |out| {
        writeln!(out, "P2")?;
        write_hash_comment(out, config_hash)?;
        writeln!(out, "{width} {height}\n{maxval}")?;
        for r in 0..height {
            let line: Vec<String> = map.labels[r * width..(r + 1) * width].iter().map(|l| l.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    })
}
