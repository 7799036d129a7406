//! Synthetic registration pairs: occlusion, resampling, anisotropic noise,
//! outliers and an initial pose, applied in that order.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, RigidTransform, Vec3};
use crate::uncertainty::covariance_from_noise_std;

/// Concrete perturbation levels for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFactors {
    /// Per-axis initial rotation magnitude in degrees.
    pub rotation_deg: f64,
    pub outliers: usize,
    /// Upper bound of the per-axis noise std, as a fraction of the radius.
    pub noise_std_frac: f64,
    pub occlusion_frac: f64,
    pub sample_rate_fixed: f64,
    pub sample_rate_moving: f64,
    /// Translation components are drawn from `±translation_frac × radius`.
    pub translation_frac: f64,
    /// Outliers are uniform in the bounding box inflated by this factor.
    pub outlier_box_scale: f64,
    /// Lower bound of the per-axis std recorded in covariances, as a
    /// fraction of the radius. With zero noise no perturbation is applied but
    /// covariances still carry this level.
    pub noise_floor_frac: f64,
}

impl TrialFactors {
    /// No perturbation at all: full sampling, no noise, identity pose.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            outliers: 0,
            noise_std_frac: 0.0,
            occlusion_frac: 0.0,
            sample_rate_fixed: 1.0,
            sample_rate_moving: 1.0,
            translation_frac: 0.0,
            outlier_box_scale: 1.2,
            noise_floor_frac: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        let fracs = [
            self.noise_std_frac,
            self.occlusion_frac,
            self.sample_rate_fixed,
            self.sample_rate_moving,
            self.translation_frac,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument("trial fractions must lie in [0, 1]".into()));
        }
        if !(self.noise_floor_frac > 0.0 && self.outlier_box_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "noise floor and outlier box scale must be positive".into(),
            ));
        }
        if self.occlusion_frac > 0.9 {
            return Err(Error::InvalidArgument(format!(
                "occlusion of {} would remove more than 90% of the points",
                self.occlusion_frac
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub fixed: PointCloud,
    pub moving: PointCloud,
    /// Maps the moving cloud back into the fixed frame: the pose a perfect
    /// registration returns.
    pub truth: RigidTransform,
    /// Moving points after steps 1–3, before noise, outliers and the pose.
    pub moving_clean: Vec<Vec3>,
}

/// Removes the `round(frac·n)` points lying furthest along a random
/// direction, i.e. everything beyond a half-space cut.
fn occlude(points: &[Vec3], frac: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    let remove = (frac * points.len() as f64).round() as usize;
    if remove == 0 {
        return points.to_vec();
    }
    let normal = loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|a, b| {
        points[*b]
            .dot(&normal)
            .total_cmp(&points[*a].dot(&normal))
            .then(a.cmp(b))
    });
    let mut keep: Vec<usize> = order[remove..].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| points[i]).collect()
}

fn subsample(points: &[Vec3], rate: f64, rng: &mut impl Rng) -> Vec<Vec3> {
    let keep = (rate * points.len() as f64).round() as usize;
    if keep >= points.len() {
        return points.to_vec();
    }
    let mut idx = sample(rng, points.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

fn draw_stds(f: &TrialFactors, radius: f64, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let floor = f.noise_floor_frac * radius;
    let hi = f.noise_std_frac * radius;
    (0..dim)
        .map(|_| {
            let s = if hi > 0.0 { rng.random_range(0.0..hi) } else { 0.0 };
            s.max(floor)
        })
        .collect()
}

/// Adds zero-mean anisotropic noise and records its variances.
fn add_noise(points: &[Vec3], f: &TrialFactors, radius: f64, rng: &mut impl Rng) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
    let mut out = Vec::with_capacity(points.len());
    let mut covs = Vec::with_capacity(points.len());
    for p in points {
        let stds = draw_stds(f, radius, 3, rng);
        let mut q = *p;
        if f.noise_std_frac > 0.0 {
            for (k, s) in stds.iter().enumerate() {
                q[k] += Normal::new(0.0, *s).expect("positive std").sample(rng);
            }
        }
        out.push(q);
        covs.push(covariance_from_noise_std(&stds)?);
    }
    Ok((out, covs))
}

fn outliers(
    count: usize,
    lo: &Vec3,
    hi: &Vec3,
    f: &TrialFactors,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
    let center = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.5 * f.outlier_box_scale;
    let mut pts = Vec::with_capacity(count);
    let mut covs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = center;
        for k in 0..3 {
            if half[k] > 0.0 {
                p[k] += rng.random_range(-half[k]..half[k]);
            }
        }
        pts.push(p);
        covs.push(covariance_from_noise_std(&draw_stds(f, radius, 3, rng))?);
    }
    Ok((pts, covs))
}

/// Per-axis rotation: each axis independently gets `angle` or 0 with equal
/// probability, with at least one axis forced nonzero.
pub fn random_axis_rotation(angle_deg: f64, rng: &mut impl Rng) -> Mat3 {
    let mut on = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    if !on.iter().any(|b| *b) {
        on[rng.random_range(0..3)] = true;
    }
    let a = angle_deg.to_radians();
    let axis_rot = |axis: Vec3, enabled: bool| {
        if enabled {
            crate::geometry::rodrigues(&(axis * a))
        } else {
            Mat3::identity()
        }
    };
    axis_rot(Vec3::z(), on[2]) * axis_rot(Vec3::y(), on[1]) * axis_rot(Vec3::x(), on[0])
}

/// Builds a fixed/moving pair from a 3D model.
pub fn synthesize_pair(model: &PointCloud, f: &TrialFactors, rng: &mut impl Rng) -> Result<SyntheticPair> {
    if model.dim() != 3 {
        return Err(Error::UnsupportedDimension(model.dim()));
    }
    if model.len() < 50 {
        return Err(Error::InvalidArgument(format!(
            "model needs at least 50 points, has {}",
            model.len()
        )));
    }
    f.validate()?;
    let radius = model.radius();
    let (lo, hi) = model.bounding_box();

    // (1)-(2) two copies, each occluded independently
    let fixed_pts = occlude(model.points(), f.occlusion_frac, rng);
    let moving_pts = occlude(model.points(), f.occlusion_frac, rng);
    // (3) different sampling
    let fixed_pts = subsample(&fixed_pts, f.sample_rate_fixed, rng);
    let moving_pts = subsample(&moving_pts, f.sample_rate_moving, rng);
    let moving_clean = moving_pts.clone();
    // (4) noise with recorded variances
    let (mut fixed_pts, mut fixed_cov) = add_noise(&fixed_pts, f, radius, rng)?;
    let (mut moving_pts, mut moving_cov) = add_noise(&moving_pts, f, radius, rng)?;
    // (5) outliers in both
    let (p, c) = outliers(f.outliers, &lo, &hi, f, radius, rng)?;
    fixed_pts.extend(p);
    fixed_cov.extend(c);
    let (p, c) = outliers(f.outliers, &lo, &hi, f, radius, rng)?;
    moving_pts.extend(p);
    moving_cov.extend(c);
    // (6) initial pose on the moving copy
    let rotation = random_axis_rotation(f.rotation_deg, rng);
    let span = f.translation_frac * radius;
    let mut t = Vec3::zeros();
    if span > 0.0 {
        for k in 0..3 {
            t[k] = rng.random_range(-span..span);
        }
    }
    let perturb = RigidTransform::new(3, rotation, t)?;

    let fixed = PointCloud::new(3, fixed_pts, fixed_cov)?;
    let moving = perturb.apply(&PointCloud::new(3, moving_pts, moving_cov)?)?;
    Ok(SyntheticPair {
        fixed,
        moving,
        truth: perturb.inverse(),
        moving_clean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::shapes::{model, ShapeKind};
    use crate::geometry::{rotation_error, translation_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn null_pipeline_copies_the_model() {
        let m = model(ShapeKind::Chair, 1, 300).unwrap();
        let pair = synthesize_pair(&m, &TrialFactors::none(), &mut rng(4)).unwrap();
        assert_eq!(pair.fixed.points(), m.points());
        assert_eq!(pair.moving.points(), m.points());
        assert_eq!(rotation_error(pair.truth.rotation(), &Mat3::identity()), 0.0);
        assert_eq!(translation_error(pair.truth.translation(), &Vec3::zeros()), 0.0);
    }

    #[test]
    fn point_counts_follow_occlusion_and_sampling() {
        let m = model(ShapeKind::Critter, 1, 1000).unwrap();
        let n = m.len() as f64;
        let f = TrialFactors {
            occlusion_frac: 0.10,
            sample_rate_fixed: 0.90,
            sample_rate_moving: 0.85,
            ..TrialFactors::none()
        };
        let pair = synthesize_pair(&m, &f, &mut rng(2)).unwrap();
        let after_occ = n - (0.1 * n).round();
        assert_eq!(pair.moving.len() as f64, (0.85 * after_occ).round());
        assert_eq!(pair.fixed.len() as f64, (0.90 * after_occ).round());
        assert!((pair.moving.len() as f64 - (0.85 * 0.90 * n).ceil()).abs() <= 2.0);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let m = model(ShapeKind::Drill, 1, 400).unwrap();
        let f = TrialFactors {
            rotation_deg: 20.0,
            outliers: 50,
            noise_std_frac: 0.1,
            occlusion_frac: 0.1,
            sample_rate_fixed: 0.9,
            sample_rate_moving: 0.85,
            translation_frac: 0.1,
            ..TrialFactors::none()
        };
        let a = synthesize_pair(&m, &f, &mut rng(9)).unwrap();
        let b = synthesize_pair(&m, &f, &mut rng(9)).unwrap();
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn truth_undoes_the_initial_pose() {
        let m = model(ShapeKind::Knot, 1, 400).unwrap();
        let f = TrialFactors {
            rotation_deg: 30.0,
            noise_std_frac: 0.05,
            translation_frac: 0.1,
            ..TrialFactors::none()
        };
        let pair = synthesize_pair(&m, &f, &mut rng(3)).unwrap();
        let back = pair.truth.apply(&pair.moving).unwrap();
        let bound = 6.0 * 0.05 * m.radius() * 3f64.sqrt();
        for (p, q) in back.points().iter().zip(&pair.moving_clean) {
            assert!((p - q).norm() < bound);
        }
    }

    #[test]
    fn excessive_occlusion_is_rejected() {
        let m = model(ShapeKind::Chair, 1, 200).unwrap();
        let f = TrialFactors {
            occlusion_frac: 0.95,
            ..TrialFactors::none()
        };
        assert!(synthesize_pair(&m, &f, &mut rng(1)).is_err());
    }

    #[test]
    fn rotation_axes_use_the_factor_value() {
        let mut r = rng(5);
        for _ in 0..20 {
            let m = random_axis_rotation(30.0, &mut r);
            let angle = crate::geometry::rotation_angle(&m);
            assert!(angle > 29.9f64.to_radians());
        }
    }
}
