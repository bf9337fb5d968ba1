//! Locations, world bounds, regular grids and survey trajectories.
//!
//! Worlds are one-dimensional (a time axis) or two-dimensional (a plane).
//! Grids are stored row-major with dimension 0 varying fastest, and every
//! file written by this crate follows the same ordering.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// A point in a 1-D or 2-D world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location(Vec<f64>);

impl Location {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "locations must have 1 or 2 coordinates, got {}",
                coords.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite coordinate {c}"
            )));
        }
        Ok(Location(coords))
    }

    pub fn x(x: f64) -> Self {
        Location::new(vec![x]).expect("finite 1-D coordinate")
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Location::new(vec![x, y]).expect("finite 2-D coordinate")
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Axis-aligned extent of the world, fixed for the lifetime of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl WorldBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        ensure_len("world bounds", lower.len(), upper.len())?;
        if lower.is_empty() || lower.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "worlds must be 1-D or 2-D, got {} dimensions",
                lower.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "inverted or non-finite bounds in dimension {i}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(WorldBounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, loc: &Location) -> bool {
        loc.dim() == self.dim()
            && loc
                .coords()
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(c, (lo, hi))| *lo <= *c && *c <= *hi)
    }

    /// Errors unless `loc` has the right dimension and lies inside the bounds.
    pub fn check(&self, loc: &Location) -> Result<()> {
        ensure_len("location dimension", self.dim(), loc.dim())?;
        if self.contains(loc) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                coords: loc.coords().to_vec(),
                lower: self.lower.clone(),
                upper: self.upper.clone(),
            })
        }
    }
}

/// Evenly spaced points covering a [`WorldBounds`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegularGrid {
    bounds: WorldBounds,
    counts: Vec<usize>,
    points: Vec<Location>,
}

impl RegularGrid {
    pub fn bounds(&self) -> &WorldBounds {
        &self.bounds
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn points(&self) -> &[Location] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    /// Flat index of the cell with per-dimension indices `idx`.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0;
        let mut stride = 1;
        for (i, n) in idx.iter().zip(&self.counts) {
            flat += i * stride;
            stride *= n;
        }
        flat
    }

    /// Per-dimension spacing; zero for single-point axes.
    pub fn spacing(&self) -> Vec<f64> {
        axis_values_iter(&self.bounds, &self.counts)
            .map(|axis| if axis.len() > 1 { axis[1] - axis[0] } else { 0.0 })
            .collect()
    }
}

fn axis_values(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect()
}

fn axis_values_iter<'a>(
    bounds: &'a WorldBounds,
    counts: &'a [usize],
) -> impl Iterator<Item = Vec<f64>> + 'a {
    counts
        .iter()
        .enumerate()
        .map(move |(d, &n)| axis_values(bounds.lower[d], bounds.upper[d], n))
}

/// Builds an evenly spaced grid with endpoints included; a single-point axis
/// sits at the midpoint.
pub fn make_grid(bounds: &WorldBounds, counts: &[usize]) -> Result<RegularGrid> {
    ensure_len("grid counts", bounds.dim(), counts.len())?;
    if let Some(d) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "grid count in dimension {d} must be positive"
        )));
    }
    let axes: Vec<Vec<f64>> = axis_values_iter(bounds, counts).collect();
    let points = match axes.as_slice() {
        [xs] => xs.iter().map(|&x| Location::x(x)).collect(),
        [xs, ys] => ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| Location::xy(x, y)))
            .collect(),
        _ => unreachable!("bounds are 1-D or 2-D"),
    };
    Ok(RegularGrid {
        bounds: bounds.clone(),
        counts: counts.to_vec(),
        points,
    })
}

/// Boustrophedon sweep over a 2-D grid: rows of constant dimension-1 index,
/// alternating direction, starting at the origin corner.
pub fn lawnmower_trajectory(grid: &RegularGrid) -> Result<Vec<Location>> {
    Ok(lawnmower_order(grid)?
        .into_iter()
        .map(|i| grid.points[i].clone())
        .collect())
}

/// Same sweep as [`lawnmower_trajectory`], returned as flat grid indices.
pub fn lawnmower_order(grid: &RegularGrid) -> Result<Vec<usize>> {
    if grid.dim() != 2 {
        return Err(Error::InvalidArgument(
            "lawnmower trajectories need a 2-D grid; a 1-D grid is already a sweep".into(),
        ));
    }
    let (nx, ny) = (grid.counts[0], grid.counts[1]);
    let mut order = Vec::with_capacity(nx * ny);
    for row in 0..ny {
        if row % 2 == 0 {
            order.extend((0..nx).map(|col| row * nx + col));
        } else {
            order.extend((0..nx).rev().map(|col| row * nx + col));
        }
    }
    Ok(order)
}

/// Euclidean distance after dividing each axis by its lengthscale.
pub fn scaled_distance(a: &Location, b: &Location, lengthscales: &[f64]) -> Result<f64> {
    ensure_len("location dimension", a.dim(), b.dim())?;
    ensure_len("lengthscales", a.dim(), lengthscales.len())?;
    if lengthscales.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidArgument(
            "lengthscales must be strictly positive".into(),
        ));
    }
    Ok(scaled_sq_dist(a.coords(), b.coords(), lengthscales).sqrt())
}

#[inline]
pub(crate) fn scaled_sq_dist(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum()
}
