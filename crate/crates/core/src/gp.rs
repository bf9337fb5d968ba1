//! Kernel evaluation, Gram matrices, jittered Cholesky factors and sparse
//! inducing-point conditional weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::geometry::{scaled_sq_dist, Location, RegularGrid};

/// Default relative jitter added to Gram diagonals before factorization.
pub const BASE_JITTER: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

/// Anisotropic squared-exponential kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let k = KernelParams {
            variance,
            lengthscales,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if self.lengthscales.is_empty()
            || self
                .lengthscales
                .iter()
                .any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscales must be positive, got {:?}",
                self.lengthscales
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.variance * (-0.5 * scaled_sq_dist(a, b, &self.lengthscales)).exp()
    }
}

/// `σ² · exp(−d²/2)` with `d` the lengthscale-scaled distance.
pub fn rbf_kernel(a: &Location, b: &Location, params: &KernelParams) -> Result<f64> {
    ensure_len("location dimension", a.dim(), b.dim())?;
    ensure_len("kernel lengthscales", params.dim(), a.dim())?;
    Ok(params.eval(a.coords(), b.coords()))
}

/// Cross-covariance matrix with entry `(i, j) = k(a_i, b_j)`.
pub fn gram(points_a: &[Location], points_b: &[Location], params: &KernelParams) -> Result<DMatrix<f64>> {
    if points_a.is_empty() || points_b.is_empty() {
        return Err(Error::InvalidArgument("gram matrix of an empty point set".into()));
    }
    for p in points_a.iter().chain(points_b) {
        ensure_len("kernel lengthscales", params.dim(), p.dim())?;
    }
    Ok(DMatrix::from_fn(points_a.len(), points_b.len(), |i, j| {
        params.eval(points_a[i].coords(), points_b[j].coords())
    }))
}

/// Lower Cholesky factor of a jittered symmetric matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Relative jitter (multiple of the mean diagonal) that made the factor succeed.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L x = b` in place for every column of `b`.
    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        let ok = self.l.solve_lower_triangular_mut(b);
        debug_assert!(ok, "factor has a positive diagonal");
    }

    /// Solves `Lᵀ x = b` in place for every column of `b`.
    pub fn solve_upper_mut(&self, b: &mut DMatrix<f64>) {
        let ok = self.l.tr_solve_lower_triangular_mut(b);
        debug_assert!(ok, "factor has a positive diagonal");
    }
}

/// Factorizes `mat + jitter·mean(diag)·I`, raising the jitter tenfold from
/// `base_jitter` until it succeeds or passes [`MAX_JITTER`].
pub fn cholesky_jittered(mat: &DMatrix<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = mat.nrows();
    if n == 0 || mat.ncols() != n {
        return Err(Error::dims("Cholesky input columns", n, mat.ncols()));
    }
    if !(base_jitter > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "base jitter must be positive, got {base_jitter}"
        )));
    }
    let scale = mat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (mat[(i, j)] - mat[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mean_diag = mat.diagonal().mean();
    let mut attempted = Vec::new();
    let mut jitter = base_jitter;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        attempted.push(jitter);
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += jitter * mean_diag;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(CholeskyFactor {
                l: ch.unpack(),
                jitter_used: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::IllConditioned { attempted })
}

/// A `q×m` matrix mapping inducing values to query-point means, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalWeights {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ConditionalWeights {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("conditional weight entries", rows * cols, data.len())?;
        Ok(ConditionalWeights { rows, cols, data })
    }

    fn from_transposed(mt: &DMatrix<f64>) -> Self {
        // column-major storage of the m×q transpose is row-major storage of q×m
        ConditionalWeights {
            rows: mt.ncols(),
            cols: mt.nrows(),
            data: mt.as_slice().to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Gathers the given rows into a new weight matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        ConditionalWeights {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

fn check_factor(inducing: &RegularGrid, chol_zz: &CholeskyFactor) -> Result<()> {
    ensure_len("inducing factor size", inducing.len(), chol_zz.dim())
}

/// `A = K_XZ·K_ZZ⁻¹` via two triangular solves against the inducing factor.
pub fn conditional_weights(
    queries: &[Location],
    inducing: &RegularGrid,
    params: &KernelParams,
    chol_zz: &CholeskyFactor,
) -> Result<ConditionalWeights> {
    check_factor(inducing, chol_zz)?;
    let mut kzx = gram(inducing.points(), queries, params)?;
    chol_zz.solve_lower_mut(&mut kzx);
    chol_zz.solve_upper_mut(&mut kzx);
    Ok(ConditionalWeights::from_transposed(&kzx))
}

/// `K_XZ·L⁻ᵀ`, the projection from whitened inducing values `v` (with
/// `u = L·v`) to query means. Equal to `conditional_weights(..)·L`.
pub fn whitened_weights(
    queries: &[Location],
    inducing: &RegularGrid,
    params: &KernelParams,
    chol_zz: &CholeskyFactor,
) -> Result<ConditionalWeights> {
    check_factor(inducing, chol_zz)?;
    let mut kzx = gram(inducing.points(), queries, params)?;
    chol_zz.solve_lower_mut(&mut kzx);
    Ok(ConditionalWeights::from_transposed(&kzx))
}

/// `mean_const + A·u` for every query row.
pub fn gp_conditional_mean(weights: &ConditionalWeights, u: &[f64], mean_const: f64) -> Result<Vec<f64>> {
    ensure_len("inducing values", weights.ncols(), u.len())?;
    Ok(weights.rows().map(|r| mean_const + dot(r, u)).collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A GP prior over a fixed inducing grid, with the grid's Gram factor computed once.
#[derive(Debug, Clone)]
pub struct SparseGp {
    kernel: KernelParams,
    inducing: RegularGrid,
    chol: CholeskyFactor,
}

impl SparseGp {
    pub fn new(kernel: KernelParams, inducing: RegularGrid) -> Result<Self> {
        kernel.validate()?;
        ensure_len("kernel lengthscales", inducing.dim(), kernel.dim())?;
        let kzz = gram(inducing.points(), inducing.points(), &kernel)?;
        let chol = cholesky_jittered(&kzz, BASE_JITTER)?;
        Ok(SparseGp {
            kernel,
            inducing,
            chol,
        })
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn inducing(&self) -> &RegularGrid {
        &self.inducing
    }

    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    /// Whitened projection rows for `queries`; see [`whitened_weights`].
    pub fn projection(&self, queries: &[Location]) -> Result<ConditionalWeights> {
        whitened_weights(queries, &self.inducing, &self.kernel, &self.chol)
    }
}
