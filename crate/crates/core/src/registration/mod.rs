//! The EM-like registration loop.
//!
//! Each iteration refreshes the moving cloud at the current pose, rescales
//! its covariances by the mean nearest-neighbor distance `σ`, recomputes the
//! pair coefficients (E-step), then minimizes the expanded objective over a
//! pose increment with those coefficients frozen (M-step).

pub mod kdtree;

use serde::{Deserialize, Serialize};

use crate::energy::{objective_with_gradient, pair_coefficients, EnergyContext, PairCoefficients};
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, Mat3, PointCloud, PoseParams, RigidTransform, Vec3};
use crate::solver::{minimize_fg, SolverOptions, SolverStatus};
use kdtree::KdTree;

/// Below this many fixed points the nearest-neighbor search is brute force.
const BRUTE_FORCE_LIMIT: usize = 2000;

/// How the moving covariances are rescaled at every E-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceScaling {
    /// `Σ_y = σ · R Σ⁰_y Rᵀ` from the original covariances each iteration.
    #[default]
    Recomputed,
    /// `Σ_y ← σ · ΔR Σ_y ΔRᵀ` applied to the previous iteration's values, so
    /// the scale factors multiply across iterations.
    Compounded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub max_em_iters: usize,
    /// Relative change of the M-step objective between EM iterations.
    pub em_objective_tol: f64,
    /// Rotation angle (radians) plus translation norm over the fixed-cloud
    /// radius of the last pose increment.
    pub em_step_tol: f64,
    pub solver: SolverOptions,
    pub scale_covariances: bool,
    pub scaling: CovarianceScaling,
    /// `σ` never drops below this fraction of the fixed-cloud radius.
    pub sigma_floor: f64,
    /// Pairs with `C < cutoff × max C` are skipped in the M-step.
    pub coefficient_cutoff: f64,
    /// Box the rotation parameters to `[−π, π]` during the M-step.
    pub bound_rotation: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 100,
            em_objective_tol: 1e-6,
            em_step_tol: 1e-5,
            solver: SolverOptions {
                max_inner_iters: 50,
                ..SolverOptions::default()
            },
            scale_covariances: true,
            scaling: CovarianceScaling::Recomputed,
            sigma_floor: 1e-3,
            coefficient_cutoff: 1e-12,
            bound_rotation: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters == 0 {
            return Err(Error::InvalidArgument("max_em_iters must be at least 1".into()));
        }
        if !(self.em_objective_tol > 0.0 && self.em_step_tol > 0.0 && self.sigma_floor > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.coefficient_cutoff) {
            return Err(Error::InvalidArgument("coefficient_cutoff must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one EM iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sigma: f64,
    /// M-step objective at the warm start (zero increment).
    pub objective_start: f64,
    /// M-step objective after the solve.
    pub objective: f64,
    pub rotation_step: f64,
    pub translation_step: f64,
    pub solver_status: String,
    pub solver_evaluations: usize,
    pub active_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps the original moving cloud into the fixed frame.
    pub transform: RigidTransform,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

/// Mean distance from each moving point to its nearest fixed point.
pub fn mean_min_distance(moving: &PointCloud, fixed: &PointCloud) -> Result<f64> {
    if moving.is_empty() || fixed.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let total: f64 = if fixed.len() < BRUTE_FORCE_LIMIT {
        moving
            .points()
            .iter()
            .map(|y| {
                fixed
                    .points()
                    .iter()
                    .map(|x| (x - y).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum()
    } else {
        let tree = KdTree::build(fixed.points());
        moving
            .points()
            .iter()
            .map(|y| tree.nearest(y).expect("non-empty").1.sqrt())
            .sum()
    };
    Ok(total / moving.len() as f64)
}

fn translation(dim: usize, t: Vec3) -> RigidTransform {
    RigidTransform::from_parts_unchecked(dim, Mat3::identity(), t)
}

/// Mutable state of one registration run.
#[derive(Debug, Clone)]
pub struct EmState {
    fixed: PointCloud,
    moving: PointCloud,
    config: RegistrationConfig,
    radius: f64,
    /// Cumulative pose mapping the original moving cloud into the fixed frame.
    pub transform: RigidTransform,
    last_increment: RigidTransform,
    /// Moving cloud at the current pose with scaled covariances.
    pub current: PointCloud,
    pub sigma: f64,
    pub coeffs: PairCoefficients,
    pub iteration: usize,
}

impl EmState {
    pub fn new(fixed: &PointCloud, moving: &PointCloud, config: &RegistrationConfig) -> Result<Self> {
        config.validate()?;
        if fixed.dim() != moving.dim() {
            return Err(Error::DimensionMismatch {
                expected: fixed.dim(),
                actual: moving.dim(),
            });
        }
        if fixed.is_empty() || moving.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let radius = fixed.radius();
        if !(radius > 0.0) || !(moving.radius() > 0.0) {
            return Err(Error::Degenerate("all points of a cloud coincide".into()));
        }
        let dim = fixed.dim();
        Ok(Self {
            fixed: fixed.clone(),
            moving: moving.clone(),
            config: config.clone(),
            radius,
            transform: RigidTransform::identity(dim),
            last_increment: RigidTransform::identity(dim),
            current: moving.clone(),
            sigma: 0.0,
            coeffs: PairCoefficients::from_values(0, 0, Vec::new())?,
            iteration: 0,
        })
    }

    pub fn fixed(&self) -> &PointCloud {
        &self.fixed
    }

    /// Refreshes positions, `σ`, scaled covariances and pair coefficients.
    pub fn e_step(&mut self) -> Result<()> {
        let posed = self.transform.apply(&self.moving)?;
        let sigma = mean_min_distance(&posed, &self.fixed)?.max(self.config.sigma_floor * self.radius);
        let current = if !self.config.scale_covariances {
            posed
        } else {
            match self.config.scaling {
                CovarianceScaling::Recomputed => posed.scale_covariances(sigma)?,
                CovarianceScaling::Compounded => {
                    let base = if self.iteration == 0 {
                        self.moving.clone()
                    } else {
                        self.current.clone()
                    };
                    let rotated = RigidTransform::from_parts_unchecked(
                        base.dim(),
                        *self.last_increment.rotation(),
                        Vec3::zeros(),
                    )
                    .apply(&base)?;
                    let covs = rotated
                        .covariances()
                        .iter()
                        .map(|c| {
                            let mut s = c * sigma;
                            if base.dim() == 2 {
                                s[(2, 2)] = 1.0;
                            }
                            s
                        })
                        .collect();
                    PointCloud::from_parts_unchecked(base.dim(), posed.points().to_vec(), covs)
                }
            }
        };
        let mut coeffs = pair_coefficients(&self.fixed, &current)?;
        coeffs.computed_at = self.iteration;
        self.sigma = sigma;
        self.current = current;
        self.coeffs = coeffs;
        Ok(())
    }

    /// Minimizes the objective over a pose increment about the centroid of
    /// the current moving cloud, then folds the increment into the pose.
    pub fn m_step(&mut self) -> Result<IterationRecord> {
        let dim = self.fixed.dim();
        let center = self.current.centroid();
        let shift = translation(dim, -center);
        let ctx = EnergyContext::with_cutoff(
            shift.apply(&self.fixed)?,
            shift.apply(&self.current)?,
            self.coeffs.clone(),
            self.config.coefficient_cutoff,
        )?;
        let mut opts = self.config.solver.clone();
        if self.config.bound_rotation {
            let pi = std::f64::consts::PI;
            let rot = if dim == 2 { 1 } else { 3 };
            opts.param_bounds = Some(
                (0..PoseParams::len_for(dim))
                    .map(|k| if k < rot { (-pi, pi) } else { (f64::NEG_INFINITY, f64::INFINITY) })
                    .collect(),
            );
        }
        let x0 = PoseParams::identity(dim).to_vec();
        let min = minimize_fg(
            |x| {
                let p = PoseParams::from_slice(dim, x).expect("length checked");
                objective_with_gradient(&p, &ctx)
            },
            &x0,
            &opts,
        )?;
        let p = PoseParams::from_slice(dim, &min.x)?;
        let r = p.rotation_matrix();
        let t = center - r * center + if dim == 2 { Vec3::new(p.translation.x, p.translation.y, 0.0) } else { p.translation };
        let increment = RigidTransform::from_parts_unchecked(dim, r, t);
        self.transform = increment.compose(&self.transform);
        self.last_increment = increment;
        let record = IterationRecord {
            iteration: self.iteration,
            sigma: self.sigma,
            objective_start: min.history[0],
            objective: min.value,
            rotation_step: rotation_angle(&r),
            translation_step: t.norm(),
            solver_status: match min.status {
                SolverStatus::ConvergedGrad => "converged_grad",
                SolverStatus::ConvergedStep => "converged_step",
                SolverStatus::MaxIters => "max_iters",
            }
            .to_string(),
            solver_evaluations: min.evaluations,
            active_pairs: ctx.active_pairs(),
        };
        self.iteration += 1;
        Ok(record)
    }
}

/// Registers `moving` onto `fixed`, starting from the identity pose.
pub fn register(fixed: &PointCloud, moving: &PointCloud, config: &RegistrationConfig) -> Result<RegistrationResult> {
    let mut state = EmState::new(fixed, moving, config)?;
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut converged = false;
    while state.iteration < config.max_em_iters {
        let iteration = state.iteration;
        let step = state.e_step().and_then(|_| state.m_step());
        let record = match step {
            Ok(r) => r,
            Err(e) => {
                return Err(Error::Registration {
                    iteration,
                    trace,
                    source: Box::new(e),
                })
            }
        };
        let increment = record.rotation_step + record.translation_step / state.radius;
        let objective_settled = trace.last().is_some_and(|prev| {
            let scale = prev.objective.abs().max(f64::MIN_POSITIVE);
            (prev.objective - record.objective).abs() / scale < config.em_objective_tol
        });
        trace.push(record);
        if objective_settled && increment < config.em_step_tol {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        transform: state.transform,
        iterations: trace.len(),
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error, translation_error};
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::with_identity_covariances(3, points.iter().map(|p| Vec3::from(*p)).collect()).unwrap()
    }

    fn spiral(n: usize) -> PointCloud {
        let pts: Vec<Vec3> = (0..n)
            .map(|k| {
                let s = k as f64 / n as f64;
                let a = 9.0 * s;
                Vec3::new((1.0 + s) * a.cos(), (1.0 + 0.5 * s) * a.sin(), 1.5 * s * s - 0.3 * a.sin())
            })
            .collect();
        let cov = Mat3::identity() * 0.03;
        PointCloud::new(3, pts, vec![cov; n]).unwrap()
    }

    #[test]
    fn mean_min_distance_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0]]);
        assert_eq!(mean_min_distance(&a, &a).unwrap(), 0.0);
        let b = cloud(&[[1.0, 0.0, 0.0], [6.0, 0.0, 0.0], [1.0, 5.0, 0.0]]);
        assert_relative_eq!(mean_min_distance(&b, &a).unwrap(), 1.0);
        let m = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let f = cloud(&[[0.0, 1.0, 0.0]]);
        assert_relative_eq!(mean_min_distance(&m, &f).unwrap(), (1.0 + 101f64.sqrt()) / 2.0, epsilon = 1e-14);
        assert_relative_eq!(mean_min_distance(&m, &f).unwrap(), 5.525, epsilon = 1e-3);
        let empty = PointCloud::with_identity_covariances(3, vec![]).unwrap();
        assert!(matches!(mean_min_distance(&empty, &f), Err(Error::EmptyCloud)));
    }

    #[test]
    fn kd_and_brute_paths_agree() {
        let big = spiral(2500);
        let probe = spiral(300);
        let shifted = translation(3, Vec3::new(0.01, 0.02, -0.03)).apply(&probe).unwrap();
        let fast = mean_min_distance(&shifted, &big).unwrap();
        let slow: f64 = shifted
            .points()
            .iter()
            .map(|y| big.points().iter().map(|x| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / shifted.len() as f64;
        assert_relative_eq!(fast, slow, max_relative = 1e-12);
    }

    #[test]
    fn first_e_step_scales_base_covariances() {
        let fixed = spiral(200);
        let moving = translation(3, Vec3::new(0.05, 0.0, 0.0)).apply(&fixed).unwrap();
        let mut state = EmState::new(&fixed, &moving, &RegistrationConfig::default()).unwrap();
        state.e_step().unwrap();
        assert_eq!(state.current.points(), moving.points());
        let expect = moving.covariances()[0] * state.sigma;
        assert_relative_eq!(state.current.covariances()[0], expect, epsilon = 1e-18);
    }

    #[test]
    fn identical_clouds_floor_sigma() {
        let fixed = spiral(200);
        let mut state = EmState::new(&fixed, &fixed, &RegistrationConfig::default()).unwrap();
        state.e_step().unwrap();
        assert_relative_eq!(state.sigma, 1e-3 * fixed.radius());
        let c = &state.coeffs;
        for i in [0, 50, 199] {
            let diag = c.get(i, i);
            for j in 0..c.cols() {
                if j != i {
                    assert!(c.get(i, j) < diag);
                }
            }
        }
    }

    #[test]
    fn e_step_rotates_covariances_with_pose() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::new(0.0, 0.0, 3.0)];
        let cov = Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        let moving = PointCloud::new(3, pts.clone(), vec![cov; 3]).unwrap();
        let fixed = PointCloud::new(3, pts, vec![Mat3::identity(); 3]).unwrap();
        let config = RegistrationConfig {
            scale_covariances: false,
            ..Default::default()
        };
        let mut state = EmState::new(&fixed, &moving, &config).unwrap();
        state.transform = RigidTransform::from_axis_angle(&Vec3::z(), FRAC_PI_2, Vec3::zeros());
        state.e_step().unwrap();
        assert_relative_eq!(
            state.current.covariances()[0],
            Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn recovers_small_motion() {
        let fixed = spiral(300);
        let truth = RigidTransform::from_axis_angle(&Vec3::new(0.3, -0.5, 1.0), 0.25, Vec3::new(0.05, -0.04, 0.03));
        let moving = truth.inverse().apply(&fixed).unwrap();
        let res = register(&fixed, &moving, &RegistrationConfig::default()).unwrap();
        assert!(rotation_error(truth.rotation(), res.transform.rotation()) < 2e-3);
        assert!(translation_error(truth.translation(), res.transform.translation()) < 5e-4);
        assert_eq!(res.trace.len(), res.iterations);
        for r in &res.trace {
            assert!(r.objective <= r.objective_start);
        }
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let same = cloud(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        let ok = spiral(50);
        assert!(matches!(register(&same, &ok, &RegistrationConfig::default()), Err(Error::Degenerate(_))));
        let flat = PointCloud::with_identity_covariances(2, vec![Vec3::zeros(), Vec3::x()]).unwrap();
        assert!(matches!(
            register(&flat, &ok, &RegistrationConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
