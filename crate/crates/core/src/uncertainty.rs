//! Per-point covariance construction: a depth-sensor uncertainty model and
//! diagonal covariances from known noise levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_dim, Mat3, Vec3};

/// Weights of `U(α, d) = exp[w₁(1 − cos α) + w₂·d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModelParams {
    pub w1: f64,
    /// Per meter of depth.
    pub w2: f64,
}

impl Default for SensorModelParams {
    fn default() -> Self {
        Self {
            w1: 1.6658,
            w2: 0.2776,
        }
    }
}

impl SensorModelParams {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sensor weights must be finite and non-negative, got w1={w1}, w2={w2}"
            )));
        }
        Ok(Self { w1, w2 })
    }

    /// Weights for which a 60° incidence at zero depth and a head-on view at
    /// 3 m both give uncertainty `value`.
    pub fn from_calibration(value: f64) -> Result<Self> {
        if !(value >= 1.0 && value.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "calibration value must be at least 1, got {value}"
            )));
        }
        let l = value.ln();
        Self::new(2.0 * l, l / 3.0)
    }
}

/// Uncertainty of a depth sample seen at incidence angle `alpha` (radians,
/// between surface normal and viewing ray) and depth `depth` (meters).
pub fn sensor_uncertainty(alpha: f64, depth: f64, params: &SensorModelParams) -> Result<f64> {
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "incidence angle must be in [0, π/2), got {alpha}"
        )));
    }
    if !(depth >= 0.0 && depth.is_finite()) {
        return Err(Error::InvalidArgument(format!("depth must be non-negative, got {depth}")));
    }
    Ok((params.w1 * (1.0 - alpha.cos()) + params.w2 * depth).exp())
}

/// Isotropic covariance `U·I` (embedded 3×3 form for `dim == 2`).
pub fn covariance_from_uncertainty(u: f64, dim: usize) -> Result<Mat3> {
    check_dim(dim)?;
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::InvalidArgument(format!("uncertainty must be positive, got {u}")));
    }
    let mut c = Mat3::identity() * u;
    if dim == 2 {
        c[(2, 2)] = 1.0;
    }
    Ok(c)
}

/// `diag(s₁², …, s_D²)` from per-axis standard deviations.
pub fn covariance_from_noise_std(stds: &[f64]) -> Result<Mat3> {
    check_dim(stds.len())?;
    if let Some(s) = stds.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("noise std must be positive, got {s}")));
    }
    let mut d = Vec3::repeat(1.0);
    for (k, s) in stds.iter().enumerate() {
        d[k] = s * s;
    }
    Ok(Mat3::from_diagonal(&d))
}
