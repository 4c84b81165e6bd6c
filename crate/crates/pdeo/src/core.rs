//! Domain types: Gaussian primitives, scenes, cameras, and the attribute
//! activations.
//!
//! Raw attributes are unbounded; rendering sees activated values only:
//! opacity through a sigmoid, scale through a componentwise exponential.

use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::{Mat2, Mat3, Vec3, F};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scale components below this (after activation) make the covariance
/// numerically singular.
pub const SCALE_FLOOR: F = 1e-12;

/// Sigmoid activation for the opacity logit. Strictly monotone, output in (0,1).
pub fn activate_opacity<T: Real>(o: T) -> Result<T> {
    if !o.is_finite() {
        return Err(Error::NonFinite("opacity logit"));
    }
    Ok(T::one() / (T::one() + (-o).exp()))
}

/// Inverse of [`activate_opacity`].
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// Componentwise exponential of a log-scale vector. Rejects non-finite
/// inputs and overflowing outputs rather than propagating infinities.
pub fn activate_scale<T: Real>(s: &[T]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(s.len());
    for &c in s {
        if !c.is_finite() {
            return Err(Error::NonFinite("log-scale component"));
        }
        let v = c.exp();
        if !v.is_finite() {
            return Err(Error::ScaleOverflow(c.to_f64().unwrap_or(f64::NAN)));
        }
        out.push(v);
    }
    Ok(out)
}

/// Rotation of a primitive. 2D scenes carry a learnable angle; 3D scenes a
/// fixed orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    Angle(F),
    Matrix(Mat3),
}

impl Rotation {
    pub fn angle(&self) -> F {
        match self {
            Rotation::Angle(a) => *a,
            Rotation::Matrix(_) => 0.0,
        }
    }

    pub fn matrix3(&self) -> Mat3 {
        match self {
            Rotation::Angle(a) => {
                let (s, c) = a.sin_cos();
                Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
            }
            Rotation::Matrix(m) => *m,
        }
    }

    pub fn matrix2(&self) -> Mat2 {
        let a = self.angle();
        let (s, c) = a.sin_cos();
        Mat2::new(c, -s, s, c)
    }

    /// Orthonormality defect `max |RᵀR − I|`.
    pub fn orthonormality_defect(&self) -> F {
        let m = self.matrix3();
        let d = m.transpose() * m - Mat3::identity();
        d.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }
}

/// One primitive's raw (pre-activation) learnable attributes.
///
/// `depth_key` orders 2D blending and is never mutated by optimization.
/// 2D scenes use the x/y components of `mu` and `log_scale` (z is held at 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RawGaussian {
    pub mu: Vec3,
    pub color: Vec3,
    /// Opacity logit.
    pub opacity: F,
    pub log_scale: Vec3,
    pub rot: Rotation,
    pub depth_key: F,
}

impl RawGaussian {
    /// Activated scale for the scene's dimensionality. Fails on degenerate
    /// (sub-1e-12) components.
    pub fn scale_activated(&self, mode: Mode) -> Result<Vec<F>> {
        let dim = mode.dim();
        let s = activate_scale(&self.log_scale.as_slice()[..dim])?;
        for &c in &s {
            if c < SCALE_FLOOR {
                return Err(Error::DegenerateScale(c));
            }
        }
        Ok(s)
    }

    /// Largest activated scale component, `ŝ*`.
    pub fn max_scale(&self, mode: Mode) -> Result<F> {
        Ok(self
            .scale_activated(mode)?
            .into_iter()
            .fold(F::NEG_INFINITY, F::max))
    }

    pub fn opacity_activated(&self) -> Result<F> {
        activate_opacity(self.opacity)
    }
}

impl Mode {
    pub fn dim(&self) -> usize {
        match self {
            Mode::Image2d => 2,
            Mode::Ortho3d => 3,
        }
    }
}

/// Axis-aligned bounding box in world units. 2D scenes use a flat box
/// (`min.z == max.z == 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn unit2d() -> Aabb {
        Aabb {
            min: Vec3::new(0.0, 0.0, 0.0),
            max: Vec3::new(1.0, 1.0, 0.0),
        }
    }

    pub fn unit3d() -> Aabb {
        Aabb {
            min: Vec3::zeros(),
            max: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> F {
        self.size().norm()
    }

    /// Containment test with a relative margin (fraction of the extent).
    pub fn contains_with_margin(&self, p: &Vec3, margin: F) -> bool {
        let pad = self.size() * margin;
        (0..3).all(|i| p[i] >= self.min[i] - pad[i] - 1e-15 && p[i] <= self.max[i] + pad[i] + 1e-15)
    }
}

/// Ordered collection of Gaussians plus the rendering mode and world bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<RawGaussian>,
    pub mode: Mode,
    pub bbox: Aabb,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// FNV-1a hash over the bit patterns of every attribute. Used for
    /// bit-exact regression goldens.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for g in &self.gaussians {
            for v in [&g.mu, &g.color, &g.log_scale] {
                for i in 0..3 {
                    h.f64(v[i]);
                }
            }
            h.f64(g.opacity);
            h.f64(g.depth_key);
            match g.rot {
                Rotation::Angle(a) => h.f64(a),
                Rotation::Matrix(m) => {
                    for x in m.iter() {
                        h.f64(*x);
                    }
                }
            }
        }
        h.finish()
    }
}

pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Fnv {
        Fnv(0xcbf29ce484222325)
    }
    pub fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x100000001b3);
    }
    pub fn f64(&mut self, x: f64) {
        for b in x.to_bits().to_le_bytes() {
            self.byte(b);
        }
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Fnv::new()
    }
}

/// Orthographic camera. Pixel (row, col) maps to a world-space point on the
/// image plane through `center`; rays travel along `view_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraOrtho {
    pub view_dir: Vec3,
    pub basis_u: Vec3,
    pub basis_v: Vec3,
    pub width: usize,
    pub height: usize,
    /// World units per pixel.
    pub pixel_scale: F,
    pub center: Vec3,
}

impl CameraOrtho {
    /// Build a camera looking along `view_dir` through `center`, with a
    /// deterministic orthonormal in-plane basis.
    pub fn looking(
        center: Vec3,
        view_dir: Vec3,
        width: usize,
        height: usize,
        pixel_scale: F,
    ) -> Result<CameraOrtho> {
        let n = view_dir.norm();
        if !n.is_finite() || n <= 0.0 {
            return Err(Error::NonFinite("view direction"));
        }
        let r = view_dir / n;
        // Pick the world axis least aligned with r as the up hint.
        let hint = if r.x.abs() <= r.y.abs() && r.x.abs() <= r.z.abs() {
            Vec3::new(1.0, 0.0, 0.0)
        } else if r.y.abs() <= r.z.abs() {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let u = r.cross(&hint).normalize();
        let v = r.cross(&u);
        let cam = CameraOrtho {
            view_dir: r,
            basis_u: u,
            basis_v: v,
            width,
            height,
            pixel_scale,
            center,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = 1e-12;
        let ok = (self.view_dir.norm_squared() - 1.0).abs() <= tol
            && (self.basis_u.norm_squared() - 1.0).abs() <= tol
            && (self.basis_v.norm_squared() - 1.0).abs() <= tol
            && self.view_dir.dot(&self.basis_u).abs() <= tol
            && self.view_dir.dot(&self.basis_v).abs() <= tol
            && self.basis_u.dot(&self.basis_v).abs() <= tol;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(
                "camera basis is not orthonormal".into(),
            ))
        }
    }

    /// World-space anchor point of the ray through pixel (row, col), taken at
    /// the pixel center on the plane through `self.center`.
    pub fn pixel_origin(&self, row: usize, col: usize) -> Vec3 {
        let u = (col as F + 0.5 - self.width as F * 0.5) * self.pixel_scale;
        let v = (row as F + 0.5 - self.height as F * 0.5) * self.pixel_scale;
        self.center + self.basis_u * u + self.basis_v * v
    }

    /// Signed depth of a point along the viewing direction.
    pub fn depth(&self, p: &Vec3) -> F {
        self.view_dir.dot(&(p - self.center))
    }
}

/// Gaussian density at `x`: `exp(−½ (x−μ)ᵀ Σ⁻¹ (x−μ))` with `Σ = R S Sᵀ Rᵀ`.
/// Equals 1 exactly at `x = μ`.
pub fn eval_gaussian(g: &RawGaussian, x: &Vec3, mode: Mode) -> Result<F> {
    let s = g.scale_activated(mode)?;
    let d = x - g.mu;
    let m2 = match mode {
        Mode::Image2d => {
            let rt = g.rot.matrix2().transpose();
            let y = rt * nalgebra::Vector2::new(d.x, d.y);
            (y.x / s[0]).powi(2) + (y.y / s[1]).powi(2)
        }
        Mode::Ortho3d => {
            let y = g.rot.matrix3().transpose() * d;
            (y.x / s[0]).powi(2) + (y.y / s[1]).powi(2) + (y.z / s[2]).powi(2)
        }
    };
    Ok((-0.5 * m2).exp())
}

/// Default bounding box for a mode: the unit box.
pub fn default_bbox(mode: Mode) -> Aabb {
    match mode {
        Mode::Image2d => Aabb::unit2d(),
        Mode::Ortho3d => Aabb::unit3d(),
    }
}

/// Deterministic scene initialization: positions uniform in the bbox, scale
/// set to half the mean nearest-neighbor distance, activated opacity 0.1,
/// colors uniform in [0,1], depth keys from the same seeded stream.
pub fn init_scene(cfg: &TrainConfig, seed: u64) -> Result<Scene> {
    if cfg.count == 0 {
        return Err(Error::InvalidConfig("count must be >= 1".into()));
    }
    let mode = cfg.mode;
    let bbox = default_bbox(mode);
    let dim = mode.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut positions = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let mut p = Vec3::zeros();
        for a in 0..dim {
            p[a] = bbox.min[a] + rng.gen::<F>() * (bbox.max[a] - bbox.min[a]);
        }
        positions.push(p);
    }
    let mut colors = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        colors.push(Vec3::new(rng.gen::<F>(), rng.gen::<F>(), rng.gen::<F>()));
    }
    let mut depth_keys = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        depth_keys.push(rng.gen::<F>());
    }

    let mean_nn = if cfg.count >= 2 {
        let mut total = 0.0;
        for (i, p) in positions.iter().enumerate() {
            let mut best = F::INFINITY;
            for (j, q) in positions.iter().enumerate() {
                if i != j {
                    best = best.min((p - q).norm());
                }
            }
            total += best;
        }
        total / cfg.count as F
    } else {
        bbox.diagonal() * 0.25
    };
    let log_s = (mean_nn * 0.5).max(SCALE_FLOOR * 10.0).ln();
    let opacity = logit(0.1_f64);

    let gaussians = (0..cfg.count)
        .map(|i| {
            let mut log_scale = Vec3::zeros();
            for a in 0..dim {
                log_scale[a] = log_s;
            }
            RawGaussian {
                mu: positions[i],
                color: colors[i],
                opacity,
                log_scale,
                rot: match mode {
                    Mode::Image2d => Rotation::Angle(0.0),
                    Mode::Ortho3d => Rotation::Matrix(Mat3::identity()),
                },
                depth_key: depth_keys[i],
            }
        })
        .collect();

    Ok(Scene {
        gaussians,
        mode,
        bbox,
    })
}
