//! Point clouds with per-point covariances, rigid transforms and the
//! axis-angle pose parameterization.
//!
//! Everything is stored in fixed-size 3D types. A 2D cloud is embedded in the
//! `z = 0` plane with covariances padded to `diag(Σ₂, 1)`; 2D rotations are
//! rotations about the z axis. Under that embedding every quadratic form,
//! determinant and Frobenius norm used by the crate evaluates to exactly the
//! 2D value, and `dim` only selects normalizing constants, parameter counts
//! and I/O layout.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const SYMMETRY_TOL: f64 = 1e-12;
const ORTHO_TOL: f64 = 1e-10;
const EIGEN_FLOOR: f64 = 1e-12;

pub(crate) fn check_dim(dim: usize) -> Result<()> {
    match dim {
        2 | 3 => Ok(()),
        d => Err(Error::UnsupportedDimension(d)),
    }
}

/// Pads the leading 2×2 block of `cov` into the embedded 3×3 form.
fn embed_cov2(cov: &Mat3) -> Mat3 {
    let mut out = Mat3::identity();
    out.fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&cov.fixed_view::<2, 2>(0, 0));
    out
}

/// Checks the leading `dim × dim` block of `cov` for symmetry and positive
/// definiteness. The eigenvalue floor is relative to the mean eigenvalue.
pub fn validate_spd(cov: &Mat3, dim: usize) -> std::result::Result<(), String> {
    let scale = cov.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for r in 0..dim {
        for c in 0..dim {
            let v = cov[(r, c)];
            if !v.is_finite() {
                return Err(format!("entry ({r},{c}) is not finite"));
            }
            if (v - cov[(c, r)]).abs() > SYMMETRY_TOL * scale {
                return Err(format!("asymmetric at ({r},{c})"));
            }
        }
    }
    let eig = if dim == 3 {
        cov.symmetric_eigenvalues().as_slice().to_vec()
    } else {
        cov.fixed_view::<2, 2>(0, 0)
            .into_owned()
            .symmetric_eigenvalues()
            .as_slice()
            .to_vec()
    };
    let trace: f64 = eig.iter().sum();
    let floor = EIGEN_FLOOR * trace / dim as f64;
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0 && min > floor) {
        return Err(format!("minimum eigenvalue {min:e} below floor {floor:e}"));
    }
    Ok(())
}

/// Ordered set of points, each carrying its own covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    points: Vec<Vec3>,
    covariances: Vec<Mat3>,
}

impl PointCloud {
    /// Builds a validated cloud. For `dim == 2` only the x/y coordinates and
    /// the leading 2×2 covariance block are read.
    pub fn new(dim: usize, points: Vec<Vec3>, covariances: Vec<Mat3>) -> Result<Self> {
        check_dim(dim)?;
        if points.len() != covariances.len() {
            return Err(Error::InvalidArgument(format!(
                "{} points but {} covariances",
                points.len(),
                covariances.len()
            )));
        }
        let mut cloud = Self {
            dim,
            points,
            covariances,
        };
        if dim == 2 {
            for p in &mut cloud.points {
                p.z = 0.0;
            }
            for c in &mut cloud.covariances {
                *c = embed_cov2(c);
            }
        }
        for (index, p) in cloud.points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("point {index} is not finite")));
            }
        }
        for (index, c) in cloud.covariances.iter().enumerate() {
            validate_spd(c, dim).map_err(|reason| Error::NotPositiveDefinite { index, reason })?;
        }
        Ok(cloud)
    }

    pub fn with_identity_covariances(dim: usize, points: Vec<Vec3>) -> Result<Self> {
        let n = points.len();
        Self::new(dim, points, vec![Mat3::identity(); n])
    }

    /// Internal constructor for values produced by operations that preserve
    /// the invariants (rigid motion, positive rescaling).
    pub(crate) fn from_parts_unchecked(dim: usize, points: Vec<Vec3>, covariances: Vec<Mat3>) -> Self {
        debug_assert_eq!(points.len(), covariances.len());
        Self {
            dim,
            points,
            covariances,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn covariances(&self) -> &[Mat3] {
        &self.covariances
    }

    /// Coordinates of point `i` truncated to the cloud dimension.
    pub fn coords(&self, i: usize) -> &[f64] {
        &self.points[i].as_slice()[..self.dim]
    }

    pub fn centroid(&self) -> Vec3 {
        if self.is_empty() {
            return Vec3::zeros();
        }
        self.points.iter().sum::<Vec3>() / self.len() as f64
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Half the bounding-box diagonal.
    pub fn radius(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bounding_box();
        0.5 * (hi - lo).norm()
    }

    /// Same points, every covariance multiplied by `factor`.
    pub fn scale_covariances(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "covariance scale must be positive, got {factor}"
            )));
        }
        let covs = self
            .covariances
            .iter()
            .map(|c| {
                let mut s = c * factor;
                if self.dim == 2 {
                    s[(2, 2)] = 1.0;
                }
                s
            })
            .collect();
        Ok(Self::from_parts_unchecked(self.dim, self.points.clone(), covs))
    }

    /// Same points with all covariances replaced by the identity.
    pub fn with_unit_covariances(&self) -> Self {
        Self::from_parts_unchecked(self.dim, self.points.clone(), vec![Mat3::identity(); self.len()])
    }

    /// Sub-cloud made of the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self::from_parts_unchecked(
            self.dim,
            indices.iter().map(|&i| self.points[i]).collect(),
            indices.iter().map(|&i| self.covariances[i]).collect(),
        )
    }

    /// Appends the points of `other` (same dimension).
    pub fn extend(&mut self, other: &PointCloud) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        self.points.extend_from_slice(&other.points);
        self.covariances.extend_from_slice(&other.covariances);
        Ok(())
    }
}

/// Exponential map from an axis-angle vector to a rotation matrix.
pub fn rodrigues(v: &Vec3) -> Mat3 {
    let theta2 = v.norm_squared();
    let k = v.cross_matrix();
    let (a, b) = if theta2 < 1e-12 {
        // Taylor expansions of sinθ/θ and (1-cosθ)/θ².
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Partial derivatives `∂R/∂vₖ` of [`rodrigues`] for k = 0, 1, 2.
pub fn rodrigues_derivatives(v: &Vec3) -> [Mat3; 3] {
    let theta2 = v.norm_squared();
    if theta2 < 1e-16 {
        return [
            Vec3::x().cross_matrix(),
            Vec3::y().cross_matrix(),
            Vec3::z().cross_matrix(),
        ];
    }
    let r = rodrigues(v);
    let vx = v.cross_matrix();
    let i_minus_r = Mat3::identity() - r;
    let mut out = [Mat3::zeros(); 3];
    for (k, d) in out.iter_mut().enumerate() {
        let e = Vec3::ith(k, 1.0);
        let w = v.cross(&(i_minus_r * e));
        *d = (vx * v[k] + w.cross_matrix()) * r / theta2;
    }
    out
}

/// Rotation angle of a proper rotation matrix, in `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

fn planar_rotation(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation and translation parameters of a rigid pose.
///
/// For `dim == 3` the rotation is an axis-angle vector; for `dim == 2` only
/// `rotation.z` (the planar angle) is used and the flat parameter vector is
/// `[θ, tx, ty]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub dim: usize,
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl PoseParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            rotation: Vec3::zeros(),
            translation: Vec3::zeros(),
        }
    }

    /// Number of free parameters: 6 in 3D, 3 in 2D.
    pub fn len_for(dim: usize) -> usize {
        if dim == 2 {
            3
        } else {
            6
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        if self.dim == 2 {
            vec![self.rotation.z, self.translation.x, self.translation.y]
        } else {
            let mut v = self.rotation.as_slice().to_vec();
            v.extend_from_slice(self.translation.as_slice());
            v
        }
    }

    pub fn from_slice(dim: usize, x: &[f64]) -> Result<Self> {
        check_dim(dim)?;
        if x.len() != Self::len_for(dim) {
            return Err(Error::DimensionMismatch {
                expected: Self::len_for(dim),
                actual: x.len(),
            });
        }
        Ok(if dim == 2 {
            Self {
                dim,
                rotation: Vec3::new(0.0, 0.0, x[0]),
                translation: Vec3::new(x[1], x[2], 0.0),
            }
        } else {
            Self {
                dim,
                rotation: Vec3::new(x[0], x[1], x[2]),
                translation: Vec3::new(x[3], x[4], x[5]),
            }
        })
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        rotation_from_params(self.dim, &self.rotation)
    }
}

/// Rotation matrix for the given parameters (axis-angle in 3D, the angle
/// `rot.z` in 2D).
pub fn rotation_from_params(dim: usize, rot: &Vec3) -> Mat3 {
    if dim == 2 {
        planar_rotation(rot.z)
    } else {
        rodrigues(rot)
    }
}

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    dim: usize,
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates `rotation` as proper orthogonal (and, in 2D, as a rotation
    /// about the z axis).
    pub fn new(dim: usize, rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_dim(dim)?;
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ORTHO_TOL && (det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::InvalidArgument(format!(
                "not a proper rotation (orthogonality error {ortho:e}, det {det})"
            )));
        }
        if dim == 2 {
            let off = rotation[(0, 2)]
                .abs()
                .max(rotation[(1, 2)].abs())
                .max(rotation[(2, 0)].abs())
                .max(rotation[(2, 1)].abs());
            if off > ORTHO_TOL || translation.z != 0.0 {
                return Err(Error::InvalidArgument(
                    "2D transform must rotate about z and keep z = 0".into(),
                ));
            }
        }
        Ok(Self {
            dim,
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts_unchecked(dim: usize, rotation: Mat3, translation: Vec3) -> Self {
        Self {
            dim,
            rotation,
            translation,
        }
    }

    pub fn from_params(p: &PoseParams) -> Self {
        let mut translation = p.translation;
        if p.dim == 2 {
            translation.z = 0.0;
        }
        Self {
            dim: p.dim,
            rotation: p.rotation_matrix(),
            translation,
        }
    }

    /// Inverse of [`rotation_from_params`]; the rotation vector has norm ≤ π.
    pub fn to_params(&self) -> PoseParams {
        let rotation = if self.dim == 2 {
            Vec3::new(0.0, 0.0, self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]))
        } else {
            Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
        };
        PoseParams {
            dim: self.dim,
            rotation,
            translation: self.translation,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        Self {
            dim: 3,
            rotation: *q.to_rotation_matrix().matrix(),
            translation,
        }
    }

    pub fn planar(angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            dim: 2,
            rotation: planar_rotation(angle),
            translation: Vec3::new(tx, ty, 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            dim: self.dim,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            dim: self.dim,
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Maps every point by `R·p + t` and every covariance by `R·Σ·Rᵀ`.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        apply_transform(self, cloud)
    }
}

pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> Result<PointCloud> {
    if t.dim != cloud.dim {
        return Err(Error::DimensionMismatch {
            expected: cloud.dim,
            actual: t.dim,
        });
    }
    let r = t.rotation;
    let rt = r.transpose();
    let points = cloud.points.iter().map(|p| t.apply_point(p)).collect();
    let covs = cloud
        .covariances
        .iter()
        .map(|c| {
            let s = r * c * rt;
            // exact symmetry is cheaper to restore than to prove
            (s + s.transpose()) * 0.5
        })
        .collect();
    Ok(PointCloud::from_parts_unchecked(cloud.dim, points, covs))
}

/// `‖I − R_gt·R_est⁻¹‖_F`.
pub fn rotation_error(r_gt: &Mat3, r_est: &Mat3) -> f64 {
    (Mat3::identity() - r_gt * r_est.transpose()).norm()
}

/// `‖t_gt − t_est‖`.
pub fn translation_error(t_gt: &Vec3, t_est: &Vec3) -> f64 {
    (t_gt - t_est).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rz(angle: f64) -> Mat3 {
        planar_rotation(angle)
    }

    #[test]
    fn identity_transform_leaves_cloud_unchanged() {
        let cloud = PointCloud::new(
            3,
            vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)],
            vec![Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 2.0)), Mat3::identity()],
        )
        .unwrap();
        let out = RigidTransform::identity(3).apply(&cloud).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::new(3, rz(FRAC_PI_2), Vec3::zeros()).unwrap();
        let cloud = PointCloud::new(
            3,
            vec![Vec3::new(1.0, 0.0, 0.0)],
            vec![Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))],
        )
        .unwrap();
        let out = t.apply(&cloud).unwrap();
        assert_relative_eq!(out.points()[0], Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(
            out.covariances()[0],
            Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cloud = PointCloud::with_identity_covariances(2, vec![Vec3::zeros()]).unwrap();
        assert!(matches!(
            RigidTransform::identity(3).apply(&cloud),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rodrigues_special_cases() {
        assert_eq!(rodrigues(&Vec3::zeros()), Mat3::identity());
        assert_relative_eq!(rodrigues(&Vec3::new(0.0, 0.0, FRAC_PI_2)), rz(FRAC_PI_2), epsilon = 1e-15);
        let v = Vec3::new(0.3, 0.0, 0.0);
        let q = UnitQuaternion::from_scaled_axis(v);
        assert_relative_eq!(rodrigues(&v), *q.to_rotation_matrix().matrix(), epsilon = 1e-15);
    }

    #[test]
    fn rodrigues_derivatives_match_finite_differences() {
        for v in [
            Vec3::new(0.3, -0.2, 0.7),
            Vec3::new(1e-9, 0.0, 0.0),
            Vec3::new(2.0, 1.0, -1.5),
        ] {
            let analytic = rodrigues_derivatives(&v);
            for (k, d) in analytic.iter().enumerate() {
                let h = 1e-6;
                let e = Vec3::ith(k, h);
                let fd = (rodrigues(&(v + e)) - rodrigues(&(v - e))) / (2.0 * h);
                assert_relative_eq!(*d, fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let p = PoseParams {
            dim: 3,
            rotation: Vec3::new(0.4, -1.1, 2.0),
            translation: Vec3::new(1.0, 2.0, 3.0),
        };
        let t = RigidTransform::from_params(&p);
        let back = RigidTransform::from_params(&t.to_params());
        assert_relative_eq!(*back.rotation(), *t.rotation(), epsilon = 1e-10);

        let p2 = PoseParams::from_slice(2, &[2.5, 1.0, -1.0]).unwrap();
        let t2 = RigidTransform::from_params(&p2);
        assert_relative_eq!(t2.to_params().rotation.z, 2.5, epsilon = 1e-14);
    }

    #[test]
    fn rotation_error_closed_form() {
        let e10 = rotation_error(&rz(10f64.to_radians()), &Mat3::identity());
        assert_relative_eq!(e10, 2.0 * 2f64.sqrt() * (5f64.to_radians()).sin(), epsilon = 1e-12);
        assert_relative_eq!(e10, 0.2465, epsilon = 1e-4);
        let e180 = rotation_error(&rz(PI), &Mat3::identity());
        assert_relative_eq!(e180, 2.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(rotation_error(&rz(0.7), &rz(0.7)), 0.0);
    }

    #[test]
    fn translation_error_examples() {
        assert_eq!(translation_error(&Vec3::zeros(), &Vec3::zeros()), 0.0);
        assert_eq!(translation_error(&Vec3::x(), &Vec3::zeros()), 1.0);
        assert_eq!(translation_error(&Vec3::new(1.0, 2.0, 2.0), &Vec3::zeros()), 3.0);
    }

    #[test]
    fn rejects_bad_covariances() {
        let neg = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        assert!(matches!(
            PointCloud::new(3, vec![Vec3::zeros()], vec![neg]),
            Err(Error::NotPositiveDefinite { index: 0, .. })
        ));
        let mut asym = Mat3::identity();
        asym[(0, 1)] = 0.1;
        assert!(PointCloud::new(3, vec![Vec3::zeros()], vec![asym]).is_err());
        let tiny = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 1e-14));
        assert!(PointCloud::new(3, vec![Vec3::zeros()], vec![tiny]).is_err());
        assert!(PointCloud::new(4, vec![], vec![]).is_err());
    }

    #[test]
    fn planar_cloud_is_embedded() {
        let mut c = Mat3::from_element(7.0);
        c.fixed_view_mut::<2, 2>(0, 0).copy_from(&nalgebra::Matrix2::new(2.0, 0.5, 0.5, 1.0));
        let cloud = PointCloud::new(2, vec![Vec3::new(1.0, 2.0, 9.0)], vec![c]).unwrap();
        assert_eq!(cloud.points()[0].z, 0.0);
        assert_eq!(cloud.covariances()[0][(2, 2)], 1.0);
        assert_eq!(cloud.covariances()[0][(0, 2)], 0.0);
        assert_eq!(cloud.coords(0), &[1.0, 2.0]);
    }

    #[test]
    fn radius_is_half_diagonal() {
        let cloud = PointCloud::with_identity_covariances(
            3,
            vec![Vec3::zeros(), Vec3::new(2.0, 2.0, 1.0)],
        )
        .unwrap();
        assert_relative_eq!(cloud.radius(), 1.5);
    }
}
