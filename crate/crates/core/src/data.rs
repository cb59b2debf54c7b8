//! Seeded synthetic shape dataset: analytic surfaces, unit-sphere scaling,
//! Gaussian jitter and random rotation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Shape {
    Sphere,
    Box,
    Torus,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Rotation {
    None,
    /// Uniform about the z axis.
    Z,
    /// Uniform over SO(3).
    So3,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticSpec {
    pub classes: Vec<Shape>,
    pub points: usize,
    pub per_class: usize,
    pub noise: f64,
    pub rotation: Rotation,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: alloc::vec![Shape::Sphere, Shape::Box, Shape::Torus, Shape::Cylinder],
            points: 1024,
            per_class: 125,
            noise: 0.01,
            rotation: Rotation::So3,
            seed: 0,
        }
    }
}

pub struct Split {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

fn surface_point<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Point {
    use core::f64::consts::TAU;
    match shape {
        Shape::Sphere => {
            let v: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
            let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).max(1e-12);
            [v[0] / n, v[1] / n, v[2] / n]
        }
        Shape::Box => {
            // 2 × 1.2 × 0.6 box, faces chosen by area
            let half = [1.0, 0.6, 0.3];
            let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let mut p: Point = core::array::from_fn(|i| rng.random_range(-half[i]..half[i]));
            p[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
            p
        }
        Shape::Torus => {
            let (big, small) = (1.0, 0.35);
            // rejection keeps the sample uniform in area
            loop {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                let w = rng.random_range(0.0..big + small);
                if w <= big + small * libm::cos(v) {
                    let r = big + small * libm::cos(v);
                    return [r * libm::cos(u), r * libm::sin(u), small * libm::sin(v)];
                }
            }
        }
        Shape::Cylinder => {
            let (r, h) = (0.5, 1.0);
            let side = TAU * r * 2.0 * h;
            let cap = core::f64::consts::PI * r * r;
            let pick = rng.random_range(0.0..side + 2.0 * cap);
            if pick < side {
                let a = rng.random_range(0.0..TAU);
                [r * libm::cos(a), r * libm::sin(a), rng.random_range(-h..h)]
            } else {
                let a = rng.random_range(0.0..TAU);
                let rr = r * libm::sqrt(rng.random::<f64>());
                let z = if pick < side + cap { h } else { -h };
                [rr * libm::cos(a), rr * libm::sin(a), z]
            }
        }
    }
}

/// Uniform random rotation from a normalized Gaussian quaternion.
fn rotation_matrix<R: Rng + ?Sized>(kind: Rotation, rng: &mut R) -> [[f64; 3]; 3] {
    match kind {
        Rotation::None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        Rotation::Z => {
            let a = rng.random_range(0.0..core::f64::consts::TAU);
            let (s, c) = (libm::sin(a), libm::cos(a));
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        }
        Rotation::So3 => {
            let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(rng));
            let n = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            let [w, x, y, z] = q.map(|v| v / n);
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ]
        }
    }
}

/// One cloud: surface samples (already centered at the origin) scaled so
/// the farthest point sits at radius 1, then jitter, then rotation.
pub fn sample_shape<R: Rng + ?Sized>(
    shape: Shape,
    points: usize,
    noise: f64,
    rotation: Rotation,
    rng: &mut R,
) -> Result<PointCloud> {
    let mut pts: Vec<Point> = (0..points).map(|_| surface_point(shape, rng)).collect();
    let max_r = pts
        .iter()
        .map(|p| libm::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]))
        .fold(0.0, f64::max)
        .max(1e-12);
    for p in pts.iter_mut() {
        *p = p.map(|v| v / max_r);
    }
    if noise > 0.0 {
        let jitter = Normal::new(0.0, noise).map_err(|_| Error::Config("invalid noise sigma".into()))?;
        for p in pts.iter_mut() {
            *p = p.map(|v| v + jitter.sample(rng));
        }
    }
    let r = rotation_matrix(rotation, rng);
    for p in pts.iter_mut() {
        *p = core::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
    }
    PointCloud::new(pts)
}

/// Balanced labeled clouds with a stratified 80/20 split, deterministic in
/// `spec.seed`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Split> {
    if spec.classes.len() < 2 {
        return Err(Error::Config("at least 2 classes are required".into()));
    }
    if spec.points == 0 || spec.per_class == 0 || !(spec.noise >= 0.0) {
        return Err(Error::Config("invalid synthetic dataset sizes or noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_train = (spec.per_class * 4).div_ceil(5);
    for (label, &shape) in spec.classes.iter().enumerate() {
        let mut clouds = (0..spec.per_class)
            .map(|_| {
                sample_shape(shape, spec.points, spec.noise, spec.rotation, &mut rng)
                    .map(|c| c.with_label(label))
            })
            .collect::<Result<Vec<_>>>()?;
        clouds.shuffle(&mut rng);
        let rest = clouds.split_off(n_train);
        train.extend(clouds);
        test.extend(rest);
    }
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_lands_on_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = sample_shape(Shape::Sphere, 500, 0.0, Rotation::So3, &mut rng).unwrap();
        for p in c.points() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn all_shapes_fit_the_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [Shape::Box, Shape::Torus, Shape::Cylinder] {
            let c = sample_shape(s, 300, 0.0, Rotation::None, &mut rng).unwrap();
            let max = c
                .points()
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_balanced_split() {
        let spec = SyntheticSpec {
            points: 64,
            per_class: 10,
            ..Default::default()
        };
        let a = generate_synthetic_dataset(&spec).unwrap();
        let b = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.test.len(), 8);
        for label in 0..4 {
            assert_eq!(a.train.iter().filter(|c| c.label == Some(label)).count(), 8);
            assert_eq!(a.test.iter().filter(|c| c.label == Some(label)).count(), 2);
        }
        let one = SyntheticSpec {
            classes: alloc::vec![Shape::Sphere],
            ..spec
        };
        assert!(generate_synthetic_dataset(&one).is_err());
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [Rotation::Z, Rotation::So3] {
            let r = rotation_matrix(kind, &mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }
}
