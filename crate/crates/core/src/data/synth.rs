//! Procedural shape classes standing in for a CAD benchmark.
//!
//! Every surface fits the unit cube `[-1, 1]³` and is sampled uniformly by
//! area. Augmentation applies a z-rotation, a uniform scale in `[0.8, 1.2]`
//! and a translation in `[-0.1, 0.1]³`, in that order.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mesh::{sample_surface_with, Mesh};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.3;
pub const HELIX_TURNS: f64 = 2.0;
pub const HELIX_TUBE: f64 = 0.08;
pub const HELIX_RADIUS: f64 = 1.0 - HELIX_TUBE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Plane,
    Helix,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Pyramid,
        ShapeClass::Plane,
        ShapeClass::Helix,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown shape class {id} (expected 0..{})",
                Self::ALL.len()
            ))
        })
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Plane => "plane",
            ShapeClass::Helix => "helix",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown shape class `{s}`")))
    }
}

fn unit_sphere(rng: &mut impl Rng) -> Point3 {
    loop {
        let p: Point3 = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
        let r2: f64 = p.iter().map(|v| v * v).sum();
        if r2 > 1e-6 && r2 <= 1.0 {
            let r = r2.sqrt();
            return p.map(|v| v / r);
        }
    }
}

fn cube(rng: &mut impl Rng) -> Point3 {
    let face = rng.gen_range(0..6);
    let mut p: Point3 = [0; 3].map(|_| rng.gen_range(-1.0..=1.0));
    p[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
    p
}

fn disc(rng: &mut impl Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..TAU);
    (r * t.cos(), r * t.sin())
}

/// Radius 1, height 2, with caps.
fn cylinder(rng: &mut impl Rng) -> Point3 {
    let side = 4.0 * PI;
    let caps = 2.0 * PI;
    if rng.gen::<f64>() * (side + caps) < side {
        let t = rng.gen_range(0.0..TAU);
        [t.cos(), t.sin(), rng.gen_range(-1.0..=1.0)]
    } else {
        let (x, y) = disc(rng, 1.0);
        [x, y, if rng.gen::<bool>() { 1.0 } else { -1.0 }]
    }
}

/// Apex at `z = 1`, unit base disc at `z = -1`.
fn cone(rng: &mut impl Rng) -> Point3 {
    let side = PI * 5f64.sqrt();
    let base = PI;
    if rng.gen::<f64>() * (side + base) < side {
        // Lateral area grows linearly with the distance from the apex.
        let s = rng.gen::<f64>().sqrt();
        let t = rng.gen_range(0.0..TAU);
        [s * t.cos(), s * t.sin(), 1.0 - 2.0 * s]
    } else {
        let (x, y) = disc(rng, 1.0);
        [x, y, -1.0]
    }
}

fn torus(rng: &mut impl Rng) -> Point3 {
    let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
    loop {
        let u = rng.gen_range(0.0..TAU);
        let v = rng.gen_range(0.0..TAU);
        // Area element ∝ R + r cos v.
        if rng.gen::<f64>() * (big + small) <= big + small * v.cos() {
            let ring = big + small * v.cos();
            return [ring * u.cos(), ring * u.sin(), small * v.sin()];
        }
    }
}

fn pyramid_mesh() -> Mesh {
    let vertices = vec![
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [0.0, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [0, 1, 4],
        [1, 2, 4],
        [2, 3, 4],
        [3, 0, 4],
    ];
    Mesh { vertices, faces }
}

fn plane(rng: &mut impl Rng) -> Point3 {
    [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), 0.0]
}

/// A thin tube around a helix of `HELIX_TURNS` turns spanning `z ∈ [-1, 1]`.
fn helix(rng: &mut impl Rng) -> Point3 {
    let t = rng.gen_range(0.0..HELIX_TURNS * TAU);
    let pitch = 2.0 / (HELIX_TURNS * TAU);
    let axis = [
        HELIX_RADIUS * t.cos(),
        HELIX_RADIUS * t.sin(),
        -1.0 + pitch * t,
    ];
    let tangent = normalize([-HELIX_RADIUS * t.sin(), HELIX_RADIUS * t.cos(), pitch]);
    let normal = [-t.cos(), -t.sin(), 0.0];
    let binormal = cross(tangent, normal);
    let a = rng.gen_range(0.0..TAU);
    let z = (axis[2] + HELIX_TUBE * a.sin() * binormal[2]).clamp(-1.0, 1.0);
    [
        axis[0] + HELIX_TUBE * (a.cos() * normal[0] + a.sin() * binormal[0]),
        axis[1] + HELIX_TUBE * (a.cos() * normal[1] + a.sin() * binormal[1]),
        z,
    ]
}

fn normalize(v: Point3) -> Point3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unaugmented surface samples of one class.
pub fn sample_shape(class: ShapeClass, n: usize, rng: &mut impl Rng) -> Result<Vec<Point3>> {
    let draw: fn(&mut ChaCha8Rng) -> Point3 = match class {
        ShapeClass::Sphere => unit_sphere,
        ShapeClass::Cube => cube,
        ShapeClass::Cylinder => cylinder,
        ShapeClass::Cone => cone,
        ShapeClass::Torus => torus,
        ShapeClass::Plane => plane,
        ShapeClass::Helix => helix,
        ShapeClass::Pyramid => {
            let mut sub = ChaCha8Rng::seed_from_u64(rng.gen());
            return Ok(sample_surface_with(&pyramid_mesh(), n, &mut sub)?.points);
        }
    };
    let mut sub = ChaCha8Rng::seed_from_u64(rng.gen());
    Ok((0..n).map(|_| draw(&mut sub)).collect())
}

/// Rotation about z, uniform scale, then translation.
pub fn augment(points: &mut [Point3], rng: &mut impl Rng) {
    let theta = rng.gen_range(0.0..TAU);
    let s = rng.gen_range(0.8..=1.2);
    let t: Point3 = [0; 3].map(|_| rng.gen_range(-0.1..=0.1));
    let (sin, cos) = theta.sin_cos();
    for p in points.iter_mut() {
        let (x, y) = (cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]);
        *p = [s * x + t[0], s * y + t[1], s * p[2] + t[2]];
    }
}

/// One labelled cloud; deterministic in `seed`.
pub fn generate_synthetic(
    class_id: usize,
    n_points: usize,
    seed: u64,
    augmented: bool,
) -> Result<PointCloud> {
    let class = ShapeClass::from_id(class_id)?;
    if n_points == 0 {
        return Err(Error::InvalidInput(
            "a cloud needs at least one point".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = sample_shape(class, n_points, &mut rng)?;
    if augmented {
        augment(&mut points, &mut rng);
    }
    PointCloud::new(points, Some(class_id))
}

/// Seed of sample `index` of class `class_id` in a dataset split.
pub fn sample_seed(base: u64, split: u64, class_id: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(split);
    let mix = rng.gen::<u64>();
    mix ^ ((class_id as u64) << 32 | index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `per_class` clouds of every class, class-major order.
pub fn synthetic_split(
    per_class: usize,
    n_points: usize,
    seed: u64,
    split: u64,
    augmented: bool,
) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(per_class * ShapeClass::ALL.len());
    for class in ShapeClass::ALL {
        for i in 0..per_class {
            out.push(generate_synthetic(
                class.id(),
                n_points,
                sample_seed(seed, split, class.id(), i),
                augmented,
            )?);
        }
    }
    Ok(out)
}
