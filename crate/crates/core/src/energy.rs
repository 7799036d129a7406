//! Gaussian kernels, pair coefficients and the expanded registration
//! objective with its analytic gradient.
//!
//! The objective for a frozen coefficient matrix `C` is
//!
//! ```text
//! L(R, t) = Σᵢⱼ Cᵢⱼ · (yⱼ − xᵢ)ᵀ (Σₓᵢ⁻¹ + Σ_yⱼ⁻¹) (yⱼ − xᵢ),
//! yⱼ = R·y⁰ⱼ + t,   Σ_yⱼ⁻¹ = R·(Σ⁰_yⱼ)⁻¹·Rᵀ
//! ```
//!
//! The [`oracle`] submodule holds slow direct evaluations used to check the
//! fast path in tests.

use nalgebra::Cholesky;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, rodrigues_derivatives, Mat3, PointCloud, PoseParams, RigidTransform, Vec3,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Moving points per parallel work unit. Fixed so that reductions happen in
/// the same order on every run.
const CHUNK: usize = 32;

/// Inverse and log-determinant of a covariance, from its Cholesky factor.
#[derive(Debug, Clone, Copy)]
pub struct Precision {
    pub inverse: Mat3,
    pub log_det: f64,
}

impl Precision {
    pub fn new(cov: &Mat3) -> Result<Self> {
        let chol = Cholesky::new(*cov).ok_or(Error::Singular)?;
        let l = chol.l_dirty();
        let log_det = 2.0 * (0..3).map(|k| l[(k, k)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Singular);
        }
        let inv = chol.inverse();
        Ok(Self {
            inverse: (inv + inv.transpose()) * 0.5,
            log_det,
        })
    }

    #[inline]
    fn quad(&self, d: &Vec3) -> f64 {
        d.dot(&(self.inverse * d))
    }
}

fn precisions(cloud: &PointCloud) -> Result<Vec<Precision>> {
    cloud.covariances().iter().map(Precision::new).collect()
}

/// Normalized Gaussian density `N(τ; point, cov)` in `dim` dimensions.
pub fn gaussian_kernel(dim: usize, tau: &Vec3, point: &Vec3, cov: &Mat3) -> Result<f64> {
    let p = Precision::new(cov)?;
    let d = tau - point;
    Ok((-0.5 * (dim as f64 * LN_2PI + p.log_det) - 0.5 * p.quad(&d)).exp())
}

/// Unnormalized weight `exp(−½ (c − τ)ᵀ Σ⁻¹ (c − τ))`, equal to 1 at `c == τ`.
pub fn proximity_weight(tau: &Vec3, candidate: &Vec3, cov: &Mat3) -> Result<f64> {
    let p = Precision::new(cov)?;
    Ok((-0.5 * p.quad(&(candidate - tau))).exp())
}

/// Dense `N × M` matrix of pair weights from the previous iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCoefficients {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub computed_at: usize,
}

impl PairCoefficients {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid coefficient {v}")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            computed_at: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }
}

#[inline]
fn flush(v: f64) -> f64 {
    if v < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// Pair weights
/// `Cᵢⱼ = (2π)^{-D} |Σₓᵢ|^{-½} |Σ_yⱼ|^{-½} (e^{-½ dᵀΣₓᵢ⁻¹d} + e^{-½ dᵀΣ_yⱼ⁻¹d})`
/// with `d = yⱼ − xᵢ`, evaluated at the given (current) positions and
/// covariances. No normalization across rows or columns.
pub fn pair_coefficients(fixed: &PointCloud, moving: &PointCloud) -> Result<PairCoefficients> {
    if fixed.dim() != moving.dim() {
        return Err(Error::DimensionMismatch {
            expected: fixed.dim(),
            actual: moving.dim(),
        });
    }
    let px = precisions(fixed)?;
    let py = precisions(moving)?;
    let dim = fixed.dim() as f64;
    let (n, m) = (fixed.len(), moving.len());
    let mut values = vec![0.0; n * m];
    if m > 0 {
        values
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, row)| {
                let xi = fixed.points()[i];
                let pxi = &px[i];
                for (j, out) in row.iter_mut().enumerate() {
                    let d = moving.points()[j] - xi;
                    let pyj = &py[j];
                    // The normalizer is folded into the exponent so that
                    // tiny determinants cannot overflow on their own.
                    let log_norm = -dim * LN_2PI - 0.5 * (pxi.log_det + pyj.log_det);
                    let a = (log_norm - 0.5 * pxi.quad(&d)).exp();
                    let b = (log_norm - 0.5 * pyj.quad(&d)).exp();
                    *out = flush(a + b);
                }
            });
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite pair coefficient {bad}")));
    }
    Ok(PairCoefficients {
        rows: n,
        cols: m,
        values,
        computed_at: 0,
    })
}

/// Frozen per-iteration state of the M-step.
///
/// `moving_base` holds the moving cloud with its covariances already scaled
/// for this iteration; pose parameters act on it. `coeff_pose` is the pose
/// at which `coeffs` were computed (identity when `moving_base` is the
/// current cloud itself).
#[derive(Debug, Clone)]
pub struct EnergyContext {
    fixed: PointCloud,
    moving_base: PointCloud,
    coeffs: PairCoefficients,
    coeff_pose: PoseParams,
    moving_inv: Vec<Mat3>,
    stats: Vec<PairMoments>,
    active: usize,
}

/// Coefficient-weighted moments of the fixed points seen from one moving
/// point, with `x̃ᵢ = xᵢ − y⁰ⱼ` and `Aᵢ = Σₓᵢ⁻¹`. They make the objective
/// cost O(M) per evaluation instead of O(N·M).
#[derive(Debug, Clone, Copy, Default)]
struct PairMoments {
    /// Σᵢ Cᵢⱼ
    mass: f64,
    /// Σᵢ Cᵢⱼ x̃ᵢ
    first: Vec3,
    /// Σᵢ Cᵢⱼ x̃ᵢ x̃ᵢᵀ
    second: Mat3,
    /// Σᵢ Cᵢⱼ Aᵢ
    weighted: Mat3,
    /// Σᵢ Cᵢⱼ Aᵢ x̃ᵢ
    weighted_first: Vec3,
    /// Σᵢ Cᵢⱼ x̃ᵢᵀ Aᵢ x̃ᵢ
    quad: f64,
}

impl EnergyContext {
    pub fn new(fixed: PointCloud, moving_base: PointCloud, coeffs: PairCoefficients) -> Result<Self> {
        Self::with_cutoff(fixed, moving_base, coeffs, 0.0)
    }

    /// Like [`EnergyContext::new`], but drops pairs whose coefficient is
    /// below `relative_cutoff × max C`. A cutoff of 0 keeps every nonzero
    /// pair, making the objective exact.
    pub fn with_cutoff(
        fixed: PointCloud,
        moving_base: PointCloud,
        coeffs: PairCoefficients,
        relative_cutoff: f64,
    ) -> Result<Self> {
        if fixed.dim() != moving_base.dim() {
            return Err(Error::DimensionMismatch {
                expected: fixed.dim(),
                actual: moving_base.dim(),
            });
        }
        if coeffs.rows != fixed.len() || coeffs.cols != moving_base.len() {
            return Err(Error::InvalidArgument(format!(
                "coefficients are {}x{} but clouds have {} and {} points",
                coeffs.rows,
                coeffs.cols,
                fixed.len(),
                moving_base.len()
            )));
        }
        if !(relative_cutoff >= 0.0 && relative_cutoff < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "relative cutoff must be in [0, 1), got {relative_cutoff}"
            )));
        }
        let fixed_inv: Vec<Mat3> = precisions(&fixed)?.into_iter().map(|p| p.inverse).collect();
        let moving_inv = precisions(&moving_base)?.into_iter().map(|p| p.inverse).collect();
        let threshold = relative_cutoff * coeffs.max();
        let m = coeffs.cols;
        let (stats, counts): (Vec<PairMoments>, Vec<usize>) = (0..m)
            .into_par_iter()
            .map(|j| {
                let y = moving_base.points()[j];
                let mut st = PairMoments::default();
                let mut count = 0;
                for (i, x) in fixed.points().iter().enumerate() {
                    let c = coeffs.values[i * m + j];
                    if !(c > 0.0 && c >= threshold) {
                        continue;
                    }
                    count += 1;
                    let xt = x - y;
                    let ax = fixed_inv[i] * xt;
                    st.mass += c;
                    st.first += xt * c;
                    st.second += (xt * c) * xt.transpose();
                    st.weighted += fixed_inv[i] * c;
                    st.weighted_first += ax * c;
                    st.quad += c * xt.dot(&ax);
                }
                (st, count)
            })
            .unzip();
        let dim = fixed.dim();
        Ok(Self {
            fixed,
            moving_base,
            coeffs,
            coeff_pose: PoseParams::identity(dim),
            moving_inv,
            active: counts.iter().sum(),
            stats,
        })
    }

    /// Records the pose at which the coefficients were evaluated.
    pub fn at_pose(mut self, pose: PoseParams) -> Self {
        self.coeff_pose = pose;
        self
    }

    pub fn dim(&self) -> usize {
        self.fixed.dim()
    }

    pub fn fixed(&self) -> &PointCloud {
        &self.fixed
    }

    pub fn moving_base(&self) -> &PointCloud {
        &self.moving_base
    }

    pub fn coeffs(&self) -> &PairCoefficients {
        &self.coeffs
    }

    pub fn coeff_pose(&self) -> &PoseParams {
        &self.coeff_pose
    }

    /// Number of pairs the fast path visits.
    pub fn active_pairs(&self) -> usize {
        self.active
    }
}

#[derive(Default, Clone, Copy)]
struct Partial {
    value: f64,
    grad_t: Vec3,
    // Σⱼ vⱼ·y⁰ⱼᵀ
    grad_r_points: Mat3,
    // Σⱼ Oⱼ·Bⱼ, right-multiplied by R at the end
    grad_r_cov: Mat3,
}

impl Partial {
    fn add(mut self, o: &Partial) -> Self {
        self.value += o.value;
        self.grad_t += o.grad_t;
        self.grad_r_points += o.grad_r_points;
        self.grad_r_cov += o.grad_r_cov;
        self
    }
}

fn evaluate(params: &PoseParams, ctx: &EnergyContext, with_grad: bool) -> (f64, Option<Vec<f64>>) {
    let r = params.rotation_matrix();
    let rt = r.transpose();
    let t = if ctx.dim() == 2 {
        Vec3::new(params.translation.x, params.translation.y, 0.0)
    } else {
        params.translation
    };
    let m = ctx.moving_base.len();
    let base = ctx.moving_base.points();

    let partials: Vec<Partial> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = Partial::default();
            for j in chunk * CHUNK..((chunk + 1) * CHUNK).min(m) {
                let st = &ctx.stats[j];
                if st.mass == 0.0 {
                    continue;
                }
                // Displacement of point j from where the coefficients were
                // taken; all pair differences are yⱼ − xᵢ = δ − x̃ᵢ.
                let delta = r * base[j] + t - base[j];
                let b = r * ctx.moving_inv[j] * rt;
                let sum_d = delta * st.mass - st.first;
                let outer = delta * delta.transpose() * st.mass - delta * st.first.transpose()
                    - st.first * delta.transpose()
                    + st.second;
                let wd = st.weighted * delta;
                acc.value += st.quad - 2.0 * st.weighted_first.dot(&delta) + delta.dot(&wd) + (b * outer).trace();
                if with_grad {
                    let v = wd - st.weighted_first + b * sum_d;
                    acc.grad_t += v * 2.0;
                    acc.grad_r_points += (v * 2.0) * base[j].transpose();
                    acc.grad_r_cov += outer * b * 2.0;
                }
            }
            acc
        })
        .collect();

    let total = partials.iter().fold(Partial::default(), |a, p| a.add(p));
    if !with_grad {
        return (total.value, None);
    }
    let grad_r = total.grad_r_points + total.grad_r_cov * r;
    let grad = if ctx.dim() == 2 {
        let (s, c) = params.rotation.z.sin_cos();
        let dr = Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0);
        vec![grad_r.dot(&dr), total.grad_t.x, total.grad_t.y]
    } else {
        let dr = rodrigues_derivatives(&params.rotation);
        vec![
            grad_r.dot(&dr[0]),
            grad_r.dot(&dr[1]),
            grad_r.dot(&dr[2]),
            total.grad_t.x,
            total.grad_t.y,
            total.grad_t.z,
        ]
    };
    (total.value, Some(grad))
}

/// The expanded objective at `params`, with the coefficients held fixed.
pub fn objective(params: &PoseParams, ctx: &EnergyContext) -> f64 {
    evaluate(params, ctx, false).0
}

/// Analytic gradient of [`objective`] with respect to the flat parameter
/// vector (`[ω, t]` in 3D, `[θ, tx, ty]` in 2D).
pub fn objective_gradient(params: &PoseParams, ctx: &EnergyContext) -> Vec<f64> {
    evaluate(params, ctx, true).1.expect("gradient requested")
}

/// Value and gradient in one pass.
pub fn objective_with_gradient(params: &PoseParams, ctx: &EnergyContext) -> (f64, Vec<f64>) {
    let (f, g) = evaluate(params, ctx, true);
    (f, g.expect("gradient requested"))
}

/// Slow direct evaluations kept as independent references for the fast path.
pub mod oracle {
    use super::*;

    /// The data-point approximation of the expected loss: for each pair, the
    /// joint density `g_x(τ)·g_y(τ)` at the previous positions times
    /// `½(τ−xᵢ)ᵀA(τ−xᵢ) + ½(τ−yⱼ)ᵀA(τ−yⱼ)` at the new positions, with
    /// `A = Σₓᵢ⁻¹ + Σ_yⱼ⁻¹`, summed over `τ ∈ {xᵢ, yⱼ}`.
    ///
    /// Expanding the sum gives exactly half of [`objective`]: both nodes
    /// contribute the same quadratic form and the ½ factors are kept here.
    /// Does not read the context's coefficient matrix.
    pub fn expected_loss(params: &PoseParams, ctx: &EnergyContext) -> Result<f64> {
        let dim = ctx.dim();
        let old = apply_transform(&RigidTransform::from_params(ctx.coeff_pose()), ctx.moving_base())?;
        let new = apply_transform(&RigidTransform::from_params(params), ctx.moving_base())?;
        let fixed = ctx.fixed();
        let mut total = 0.0;
        for i in 0..fixed.len() {
            let xi = fixed.points()[i];
            let sx = fixed.covariances()[i];
            let sx_inv = sx.try_inverse().ok_or(Error::Singular)?;
            for j in 0..new.len() {
                let (yo, syo) = (old.points()[j], old.covariances()[j]);
                let (yn, syn) = (new.points()[j], new.covariances()[j]);
                let a = sx_inv + syn.try_inverse().ok_or(Error::Singular)?;
                let mah = |tau: &Vec3| {
                    let u = tau - xi;
                    let w = tau - yn;
                    0.5 * u.dot(&(a * u)) + 0.5 * w.dot(&(a * w))
                };
                let p_at_x = gaussian_kernel(dim, &xi, &xi, &sx)? * gaussian_kernel(dim, &xi, &yo, &syo)?;
                let p_at_y = gaussian_kernel(dim, &yo, &xi, &sx)? * gaussian_kernel(dim, &yo, &yo, &syo)?;
                total += p_at_x * mah(&xi) + p_at_y * mah(&yn);
            }
        }
        Ok(total)
    }

    /// Axis-aligned evaluation grid with `steps` nodes per axis (cell
    /// centers) spanning `[lo, hi]` on the first `dim` axes.
    #[derive(Debug, Clone)]
    pub struct GridSpec {
        pub lo: Vec3,
        pub hi: Vec3,
        pub steps: usize,
    }

    fn grid_nodes(dim: usize, grid: &GridSpec) -> Result<(Vec<Vec3>, f64)> {
        if grid.steps == 0 || (0..dim).any(|k| !(grid.hi[k] > grid.lo[k])) {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        let h: Vec<f64> = (0..dim)
            .map(|k| (grid.hi[k] - grid.lo[k]) / grid.steps as f64)
            .collect();
        let cell: f64 = h.iter().product();
        let s = grid.steps;
        let total = s.pow(dim as u32);
        let nodes = (0..total)
            .map(|mut idx| {
                let mut p = Vec3::zeros();
                for k in 0..dim {
                    p[k] = grid.lo[k] + (idx % s) as f64 * h[k] + 0.5 * h[k];
                    idx /= s;
                }
                p
            })
            .collect();
        Ok((nodes, cell))
    }

    /// Riemann sum of a `dim`-dimensional function over `grid`.
    pub fn integrate(dim: usize, grid: &GridSpec, f: impl Fn(&Vec3) -> f64) -> Result<f64> {
        let (nodes, cell) = grid_nodes(dim, grid)?;
        Ok(nodes.iter().map(f).sum::<f64>() * cell)
    }

    fn log_sum_exp(terms: &[f64]) -> f64 {
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Grid approximation of `E = ∫ P(τ) log[G_X(τ)·G_Y(τ)] dτ`.
    ///
    /// `P(τ) = Σᵢⱼ g_xᵢ(τ) g_yⱼ(τ)` is normalized to unit mass over the grid.
    /// Each mixture component is weighted by its proximity to the nearest
    /// point of the other cloud.
    pub fn energy_grid(fixed: &PointCloud, moving: &PointCloud, grid: &GridSpec) -> Result<f64> {
        let dim = fixed.dim();
        if moving.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: moving.dim(),
            });
        }
        if fixed.is_empty() || moving.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let (nodes, _) = grid_nodes(dim, grid)?;
        let nearest = |p: &Vec3, other: &PointCloud| -> Vec3 {
            *other
                .points()
                .iter()
                .min_by(|a, b| (*a - p).norm_squared().total_cmp(&(*b - p).norm_squared()))
                .expect("non-empty")
        };
        let px = precisions(fixed)?;
        let py = precisions(moving)?;
        let cp_x: Vec<Vec3> = fixed.points().iter().map(|p| nearest(p, moving)).collect();
        let cp_y: Vec<Vec3> = moving.points().iter().map(|p| nearest(p, fixed)).collect();
        let log_g = |tau: &Vec3, mu: &Vec3, prec: &Precision| {
            -0.5 * (dim as f64 * LN_2PI + prec.log_det) - 0.5 * prec.quad(&(tau - mu))
        };
        let log_mixture = |tau: &Vec3, cloud: &PointCloud, prec: &[Precision], cps: &[Vec3]| {
            let terms: Vec<f64> = (0..cloud.len())
                .map(|n| {
                    -0.5 * prec[n].quad(&(cps[n] - tau)) + log_g(tau, &cloud.points()[n], &prec[n])
                })
                .collect();
            log_sum_exp(&terms)
        };
        let mut mass = 0.0;
        let mut weighted = 0.0;
        for tau in &nodes {
            let mut p = 0.0;
            for i in 0..fixed.len() {
                let gx = log_g(tau, &fixed.points()[i], &px[i]).exp();
                for j in 0..moving.len() {
                    p += gx * log_g(tau, &moving.points()[j], &py[j]).exp();
                }
            }
            if p > 0.0 {
                let lg = log_mixture(tau, fixed, &px, &cp_x) + log_mixture(tau, moving, &py, &cp_y);
                mass += p;
                weighted += p * lg;
            }
        }
        if mass == 0.0 {
            return Err(Error::Degenerate("joint density vanishes on the grid".into()));
        }
        Ok(weighted / mass)
    }
}
