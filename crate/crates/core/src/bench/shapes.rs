//! Procedural model shapes for the synthetic benchmark, plus the voxel-grid
//! downsampler used to bring any model to a target point count.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Seat, backrest and four legs made of boxes.
    Chair,
    /// Four-legged animal: body, neck, head, legs and tail.
    Critter,
    /// Cylinder with a handle block and a conical tip.
    Drill,
    /// Height-field patch with a wall along one edge.
    Terrain,
    /// Trefoil knot tube.
    Knot,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Chair,
        ShapeKind::Critter,
        ShapeKind::Drill,
        ShapeKind::Terrain,
        ShapeKind::Knot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Chair => "chair",
            ShapeKind::Critter => "critter",
            ShapeKind::Drill => "drill",
            ShapeKind::Terrain => "terrain",
            ShapeKind::Knot => "knot",
        }
    }
}

fn unit_sphere_dir(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..TAU);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn ellipsoid(rng: &mut impl Rng, center: Vec3, axes: Vec3, n: usize, out: &mut Vec<Vec3>) {
    for _ in 0..n {
        let d = unit_sphere_dir(rng);
        out.push(center + d.component_mul(&axes));
    }
}

fn box_surface(rng: &mut impl Rng, center: Vec3, half: Vec3, n: usize, out: &mut Vec<Vec3>) {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut axis = 0;
        while axis < 2 && pick >= areas[axis] {
            pick -= areas[axis];
            axis += 1;
        }
        let mut p = Vec3::new(
            rng.random_range(-half.x..half.x),
            rng.random_range(-half.y..half.y),
            rng.random_range(-half.z..half.z),
        );
        p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
        out.push(center + p);
    }
}

fn raw_points(kind: ShapeKind, rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(n);
    match kind {
        ShapeKind::Chair => {
            let lean = rng.random_range(0.05..0.2);
            let seat = n * 3 / 10;
            box_surface(rng, Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.5, 0.45, 0.05), seat, &mut pts);
            box_surface(rng, Vec3::new(-0.45 - lean, 0.0, 0.55), Vec3::new(0.05, 0.45, 0.5), n * 3 / 10, &mut pts);
            for (x, y) in [(0.42, 0.38), (0.42, -0.38), (-0.42, 0.38), (-0.42, -0.38)] {
                box_surface(rng, Vec3::new(x, y, -0.45), Vec3::new(0.05, 0.05, 0.4), n / 10, &mut pts);
            }
        }
        ShapeKind::Critter => {
            let neck = rng.random_range(0.3..0.5);
            ellipsoid(rng, Vec3::zeros(), Vec3::new(0.8, 0.35, 0.35), n * 4 / 10, &mut pts);
            ellipsoid(rng, Vec3::new(0.75, 0.0, 0.25 + neck / 2.0), Vec3::new(0.12, 0.12, neck / 2.0 + 0.1), n / 10, &mut pts);
            ellipsoid(rng, Vec3::new(0.95, 0.0, 0.35 + neck), Vec3::new(0.3, 0.15, 0.15), n / 10, &mut pts);
            for (x, y) in [(0.55, 0.2), (0.55, -0.2), (-0.55, 0.2), (-0.55, -0.2)] {
                ellipsoid(rng, Vec3::new(x, y, -0.55), Vec3::new(0.07, 0.07, 0.3), n / 20, &mut pts);
            }
            ellipsoid(rng, Vec3::new(-0.95, 0.0, 0.2), Vec3::new(0.3, 0.05, 0.05), n / 10, &mut pts);
        }
        ShapeKind::Drill => {
            let body = n * 5 / 10;
            let length = rng.random_range(1.6..2.0);
            for _ in 0..body {
                let a: f64 = rng.random_range(0.0..TAU);
                let x = rng.random_range(-length / 2.0..length / 2.0);
                pts.push(Vec3::new(x, 0.3 * a.cos(), 0.3 * a.sin()));
            }
            box_surface(rng, Vec3::new(-0.3, 0.0, -0.75), Vec3::new(0.15, 0.12, 0.45), n * 3 / 10, &mut pts);
            for _ in 0..n * 2 / 10 {
                let a: f64 = rng.random_range(0.0..TAU);
                let s: f64 = rng.random_range(0.0f64..1.0).sqrt();
                let r = 0.3 * (1.0 - s) + 0.05 * s;
                pts.push(Vec3::new(length / 2.0 + 0.5 * s, r * a.cos(), r * a.sin()));
            }
        }
        ShapeKind::Terrain => {
            let bumps: Vec<(f64, f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.15..0.4),
                        rng.random_range(-0.35..0.45),
                    )
                })
                .collect();
            let height = |x: f64, y: f64| {
                bumps
                    .iter()
                    .map(|(cx, cy, w, h)| h * (-((x - cx).powi(2) + (y - cy).powi(2)) / (w * w)).exp())
                    .sum::<f64>()
                    + 0.1 * x
            };
            for _ in 0..n * 8 / 10 {
                let x = rng.random_range(-1.0..1.0);
                let y = rng.random_range(-0.8..0.8);
                pts.push(Vec3::new(x, y, height(x, y)));
            }
            for _ in 0..n * 2 / 10 {
                let y = rng.random_range(-0.8..0.8);
                let top = height(-1.0, y);
                let z = rng.random_range(top..top + 0.6);
                pts.push(Vec3::new(-1.0, y, z));
            }
        }
        ShapeKind::Knot => {
            let tube = rng.random_range(0.15..0.22);
            for _ in 0..n {
                let t: f64 = rng.random_range(0.0..TAU);
                let a: f64 = rng.random_range(0.0..TAU);
                let c = |t: f64| {
                    Vec3::new(
                        t.sin() + 2.0 * (2.0 * t).sin(),
                        t.cos() - 2.0 * (2.0 * t).cos(),
                        -(3.0 * t).sin() * 1.3,
                    )
                };
                let p = c(t);
                let tangent = (c(t + 1e-4) - c(t - 1e-4)).normalize();
                let helper = if tangent.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
                let u = tangent.cross(&helper).normalize();
                let v = tangent.cross(&u);
                // Thicker on one lobe so the knot has no rotational symmetry.
                let r = tube * (1.0 + 0.5 * (t.cos() * 0.5 + 0.5));
                pts.push(p * 0.4 + (u * a.cos() + v * a.sin()) * r);
            }
        }
    }
    pts
}

/// Centers on the bounding-box center and scales to unit radius (half the
/// bounding-box diagonal).
pub fn normalize(points: &mut [Vec3]) {
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for p in points.iter() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let radius = 0.5 * (hi - lo).norm();
    for p in points.iter_mut() {
        *p = (*p - center) / radius;
    }
}

fn voxel_centroids(points: &[Vec3], size: f64) -> Vec<Vec3> {
    let mut cells: HashMap<(i64, i64, i64), (Vec3, usize, usize)> = HashMap::new();
    for (order, p) in points.iter().enumerate() {
        let key = (
            (p.x / size).floor() as i64,
            (p.y / size).floor() as i64,
            (p.z / size).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0, order));
        e.0 += p;
        e.1 += 1;
    }
    let mut out: Vec<(usize, Vec3)> = cells
        .into_values()
        .map(|(sum, count, first)| (first, sum / count as f64))
        .collect();
    out.sort_by_key(|(first, _)| *first);
    out.into_iter().map(|(_, p)| p).collect()
}

/// Replaces the points by voxel centroids, searching the voxel size so that
/// the result has `target` points within ±10%. Returns the input unchanged
/// when it already has at most `target` points.
pub fn voxel_downsample(points: &[Vec3], target: usize) -> Result<Vec<Vec3>> {
    if target == 0 {
        return Err(Error::InvalidArgument("target point count must be positive".into()));
    }
    if points.len() <= target {
        return Ok(points.to_vec());
    }
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max().max(f64::MIN_POSITIVE);
    let (mut small, mut large) = (extent * 1e-6, extent);
    let mut best = points.to_vec();
    for _ in 0..60 {
        let size = (small * large).sqrt();
        let out = voxel_centroids(points, size);
        let n = out.len();
        if (n as f64 - target as f64).abs() <= 0.1 * target as f64 {
            return Ok(out);
        }
        if n > target {
            small = size;
        } else {
            large = size;
        }
        best = out;
    }
    Ok(best)
}

/// A normalized model of about `target` points with identity covariances.
pub fn model(kind: ShapeKind, seed: u64, target: usize) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ kind as u64);
    let mut pts = raw_points(kind, &mut rng, target * 6);
    normalize(&mut pts);
    let mut pts = voxel_downsample(&pts, target)?;
    normalize(&mut pts);
    PointCloud::with_identity_covariances(3, pts)
}

/// The default benchmark model set: one instance of each shape kind.
pub fn default_models(seed: u64, target: usize) -> Result<Vec<PointCloud>> {
    ShapeKind::ALL.iter().map(|k| model(*k, seed, target)).collect()
}
