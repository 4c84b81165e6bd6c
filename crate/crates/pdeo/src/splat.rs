//! Forward rendering (alpha blending of splatted Gaussians) and the analytic
//! backward pass.
//!
//! 2D mode splats the planar Gaussian density directly. 3D orthographic mode
//! uses the closed-form line integral of the Gaussian along each pixel ray:
//! with local-frame ray direction `r` and anchor offset `x`, the exponent
//! along the ray is `-(A t² + B t + C)` and the integral is
//! `sqrt(π/A) · exp(B²/(4A) − C)`.

use crate::config::Mode;
use crate::core::{CameraOrtho, Fnv, RawGaussian, Scene, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::{Mat2, Mat3, Vec2, Vec3, F};

/// Alpha clamp keeping `1/(1−α)` in the occlusion gradient finite.
pub const ALPHA_CLAMP: F = 0.999;
/// Footprint cutoff: contributions with log-weight below −8 (≈4σ) are culled.
pub const CULL_LOG_WEIGHT: F = -8.0;

// ---------------------------------------------------------------------------
// Image

/// Row-major RGB image with real-valued channels (nominal range [0,1]).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[F; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: [F; 3]) -> Image {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [F; 3] {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: [F; 3]) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.pixels.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// FNV-1a hash over channel bit patterns, for bit-exact goldens.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for p in &self.pixels {
            for &c in p {
                h.f64(c);
            }
        }
        h.finish()
    }
}

// ---------------------------------------------------------------------------
// Gradients

/// Per-Gaussian, per-attribute loss gradients for one iteration. Scale and
/// rotation gradients live in the raw (log-scale / angle) domain.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_mu: Vec<Vec3>,
    pub d_color: Vec<Vec3>,
    pub d_opacity: Vec<F>,
    pub d_scale: Vec<Vec3>,
    pub d_rot: Vec<F>,
}

impl GradientSet {
    pub fn zeros(n: usize) -> GradientSet {
        GradientSet {
            d_mu: vec![Vec3::zeros(); n],
            d_color: vec![Vec3::zeros(); n],
            d_opacity: vec![0.0; n],
            d_scale: vec![Vec3::zeros(); n],
            d_rot: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mu.is_empty()
    }

    pub fn add(&mut self, other: &GradientSet) {
        for i in 0..self.len() {
            self.d_mu[i] += other.d_mu[i];
            self.d_color[i] += other.d_color[i];
            self.d_opacity[i] += other.d_opacity[i];
            self.d_scale[i] += other.d_scale[i];
            self.d_rot[i] += other.d_rot[i];
        }
    }

    /// First non-finite entry, as (index, attribute name).
    pub fn find_non_finite(&self) -> Option<(usize, &'static str)> {
        for i in 0..self.len() {
            if !self.d_mu[i].iter().all(|v| v.is_finite()) {
                return Some((i, "position"));
            }
            if !self.d_color[i].iter().all(|v| v.is_finite()) {
                return Some((i, "color"));
            }
            if !self.d_opacity[i].is_finite() {
                return Some((i, "opacity"));
            }
            if !self.d_scale[i].iter().all(|v| v.is_finite()) {
                return Some((i, "scale"));
            }
            if !self.d_rot[i].is_finite() {
                return Some((i, "rotation"));
            }
        }
        None
    }

    /// Positional gradient norms, the densification statistic.
    pub fn position_norms(&self) -> Vec<F> {
        self.d_mu.iter().map(|g| g.norm()).collect()
    }
}

// ---------------------------------------------------------------------------
// Splat kernels (generic over the scalar)

fn check_scales<T: Real>(s_hat: &[T]) -> Result<()> {
    for &s in s_hat {
        if s < T::c(SCALE_FLOOR) {
            return Err(Error::DegenerateScale(s.to_f64().unwrap_or(f64::NAN)));
        }
    }
    Ok(())
}

/// Quadratic coefficient `A = Σ_j r_j²/(2ŝ_j²)` and the linear map
/// `B(x₂,x₃) = r₂x₂/ŝ₂² + r₃x₃/ŝ₃²` for a Gaussian's local frame.
pub fn splat_coeffs<T: Real>(s_hat: [T; 3], r_loc: [T; 3]) -> Result<(T, SplatB<T>)> {
    check_scales(&s_hat)?;
    let half = T::c(0.5);
    let mut a = T::zero();
    for j in 0..3 {
        a = a + half * r_loc[j] * r_loc[j] / (s_hat[j] * s_hat[j]);
    }
    Ok((
        a,
        SplatB {
            b2: r_loc[1] / (s_hat[1] * s_hat[1]),
            b3: r_loc[2] / (s_hat[2] * s_hat[2]),
        },
    ))
}

/// The linear map from an in-plane local offset to the linear exponent
/// coefficient.
#[derive(Debug, Clone, Copy)]
pub struct SplatB<T> {
    pub b2: T,
    pub b3: T,
}

impl<T: Real> SplatB<T> {
    pub fn apply(&self, x2: T, x3: T) -> T {
        self.b2 * x2 + self.b3 * x3
    }
}

/// Closed-form line integral of the unit-height Gaussian along local-frame
/// direction `r_loc` through local anchor offset `x_loc`. Invariant under
/// sliding the anchor along the ray.
pub fn splat_integral_local<T: Real>(s_hat: [T; 3], r_loc: [T; 3], x_loc: [T; 3]) -> Result<T> {
    check_scales(&s_hat)?;
    let half = T::c(0.5);
    let mut a = T::zero();
    let mut b = T::zero();
    let mut c = T::zero();
    for j in 0..3 {
        let inv2 = T::one() / (s_hat[j] * s_hat[j]);
        a = a + half * r_loc[j] * r_loc[j] * inv2;
        b = b + r_loc[j] * x_loc[j] * inv2;
        c = c + half * x_loc[j] * x_loc[j] * inv2;
    }
    let four = T::c(4.0);
    let g = b * b / (four * a) - c;
    Ok((T::c(std::f64::consts::PI) / a).sqrt() * g.exp())
}

/// Local-frame quantities of one Gaussian under one camera.
fn local_frame(g: &RawGaussian, cam: &CameraOrtho, row: usize, col: usize) -> ([F; 3], [F; 3]) {
    let rt = g.rot.matrix3().transpose();
    let r_loc = rt * cam.view_dir;
    let x_loc = rt * (cam.pixel_origin(row, col) - g.mu);
    (r_loc.into(), x_loc.into())
}

/// Exact line integral of [`crate::core::eval_gaussian`] along the pixel's
/// view ray (3D orthographic mode).
pub fn splat_closed_form(g: &RawGaussian, cam: &CameraOrtho, row: usize, col: usize) -> Result<F> {
    let s = g.scale_activated(Mode::Ortho3d)?;
    let (r_loc, x_loc) = local_frame(g, cam, row, col);
    splat_integral_local([s[0], s[1], s[2]], r_loc, x_loc)
}

/// Trapezoidal quadrature of the Gaussian density along the pixel ray over
/// ±8 effective standard deviations. Oracle for [`splat_closed_form`];
/// evaluates the density directly and never touches the closed form.
pub fn splat_quadrature(
    g: &RawGaussian,
    cam: &CameraOrtho,
    row: usize,
    col: usize,
    n_samples: usize,
) -> Result<F> {
    if n_samples < 3 || n_samples.is_multiple_of(2) {
        return Err(Error::Usage("n_samples must be odd and >= 3".into()));
    }
    let s = g.scale_activated(Mode::Ortho3d)?;
    let (r_loc, x_loc) = local_frame(g, cam, row, col);
    // Center and effective width of the integrand along the ray.
    let mut a = 0.0;
    let mut b = 0.0;
    for j in 0..3 {
        let inv2 = 1.0 / (s[j] * s[j]);
        a += 0.5 * r_loc[j] * r_loc[j] * inv2;
        b += r_loc[j] * x_loc[j] * inv2;
    }
    let t_center = -b / (2.0 * a);
    let sigma_eff = 1.0 / (2.0 * a).sqrt();
    let t0 = t_center - 8.0 * sigma_eff;
    let t1 = t_center + 8.0 * sigma_eff;
    let h = (t1 - t0) / (n_samples - 1) as F;
    let p0 = cam.pixel_origin(row, col);
    let mut sum = 0.0;
    for k in 0..n_samples {
        let t = t0 + h * k as F;
        let v = crate::core::eval_gaussian(g, &(p0 + cam.view_dir * t), Mode::Ortho3d)?;
        let w = if k == 0 || k == n_samples - 1 {
            0.5
        } else {
            1.0
        };
        sum += w * v;
    }
    Ok(sum * h)
}

// ---------------------------------------------------------------------------
// Views

/// Pixel grid for 2D image fitting: pixel centers sample the scene plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneView {
    pub width: usize,
    pub height: usize,
    /// World position of the center of pixel (0,0).
    pub origin: Vec2,
    pub pixel_dx: F,
    pub pixel_dy: F,
}

impl PlaneView {
    /// Grid covering the scene bbox.
    pub fn covering(bbox: &crate::core::Aabb, width: usize, height: usize) -> PlaneView {
        let size = bbox.size();
        let dx = size.x / width as F;
        let dy = size.y / height as F;
        PlaneView {
            width,
            height,
            origin: Vec2::new(bbox.min.x + 0.5 * dx, bbox.min.y + 0.5 * dy),
            pixel_dx: dx,
            pixel_dy: dy,
        }
    }

    #[inline]
    pub fn pixel_pos(&self, row: usize, col: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + col as F * self.pixel_dx,
            self.origin.y + row as F * self.pixel_dy,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RenderView {
    Plane(PlaneView),
    Ortho(CameraOrtho),
}

impl RenderView {
    pub fn width(&self) -> usize {
        match self {
            RenderView::Plane(v) => v.width,
            RenderView::Ortho(c) => c.width,
        }
    }
    pub fn height(&self) -> usize {
        match self {
            RenderView::Plane(v) => v.height,
            RenderView::Ortho(c) => c.height,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Cull contributions below the 4σ footprint. Disabled for gradient
    /// checking, where cull boundaries would show up as finite-difference
    /// discontinuities.
    pub cull: bool,
    pub background: Vec3,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            cull: true,
            background: Vec3::zeros(),
        }
    }
}

// ---------------------------------------------------------------------------
// Blending

/// Front-to-back alpha compositing over depth-ordered entries `(α_i, ĉ_i)`.
/// Returns the blended color and the final transmittance `T_N`.
pub fn alpha_blend(entries: &[(F, Vec3)], background: Vec3) -> (Vec3, F) {
    let mut color = Vec3::zeros();
    let mut t = 1.0;
    for &(alpha, c) in entries {
        let a = alpha.clamp(0.0, ALPHA_CLAMP);
        color += c * (a * t);
        t *= 1.0 - a;
    }
    (color + background * t, t)
}

// ---------------------------------------------------------------------------
// Prepared per-Gaussian render state

enum PreparedKind {
    Plane {
        rt: Mat2,
        s: [F; 2],
        mu: Vec2,
    },
    Ortho {
        r: Mat3,
        r_loc: Vec3,
        /// A and per-axis 1/ŝ² for the local exponent.
        a: F,
        inv2: [F; 3],
    },
}

struct Prepared {
    idx: usize,
    opacity: F,
    color: Vec3,
    kind: PreparedKind,
    // Inclusive pixel-space cull box.
    row0: isize,
    row1: isize,
    col0: isize,
    col1: isize,
}

struct Sample {
    weight: F,
    log_weight: F,
}

struct SampleGrad {
    weight: F,
    d_mu: Vec3,
    d_s: Vec3,
    d_rot: F,
}

impl Prepared {
    #[inline]
    fn in_box(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as isize, col as isize);
        r >= self.row0 && r <= self.row1 && c >= self.col0 && c <= self.col1
    }
}

fn sample_plane(p: &Prepared, v: &PlaneView, row: usize, col: usize) -> Sample {
    if let PreparedKind::Plane { rt, s, mu } = &p.kind {
        let d = v.pixel_pos(row, col) - mu;
        let y = rt * d;
        let lw = -0.5 * ((y.x / s[0]).powi(2) + (y.y / s[1]).powi(2));
        Sample {
            weight: lw.exp(),
            log_weight: lw,
        }
    } else {
        unreachable!()
    }
}

struct OrthoCtx<'a> {
    cam: &'a CameraOrtho,
}

fn sample_ortho(p: &Prepared, mu: &Vec3, ctx: &OrthoCtx, row: usize, col: usize) -> Sample {
    if let PreparedKind::Ortho {
        r, r_loc, a, inv2, ..
    } = &p.kind
    {
        let x = r.transpose() * (ctx.cam.pixel_origin(row, col) - mu);
        let mut b = 0.0;
        let mut c = 0.0;
        for j in 0..3 {
            b += r_loc[j] * x[j] * inv2[j];
            c += 0.5 * x[j] * x[j] * inv2[j];
        }
        let g = b * b / (4.0 * a) - c;
        Sample {
            weight: (std::f64::consts::PI / a).sqrt() * g.exp(),
            log_weight: g,
        }
    } else {
        unreachable!()
    }
}

fn sample_grad_2d(p: &Prepared, v: &PlaneView, row: usize, col: usize) -> (Sample, SampleGrad) {
    if let PreparedKind::Plane { rt, s, mu } = &p.kind {
        let d = v.pixel_pos(row, col) - mu;
        let y = rt * d;
        let q = Vec2::new(y.x / (s[0] * s[0]), y.y / (s[1] * s[1]));
        let lw = -0.5 * (y.x * q.x + y.y * q.y);
        let w = lw.exp();
        let rm = rt.transpose(); // R
        let dmu2 = rm * q * w;
        (
            Sample {
                weight: w,
                log_weight: lw,
            },
            SampleGrad {
                weight: w,
                d_mu: Vec3::new(dmu2.x, dmu2.y, 0.0),
                d_s: Vec3::new(w * y.x * q.x, w * y.y * q.y, 0.0),
                d_rot: w * y.x * y.y * (1.0 / (s[1] * s[1]) - 1.0 / (s[0] * s[0])),
            },
        )
    } else {
        unreachable!()
    }
}

fn sample_grad_3d(
    p: &Prepared,
    mu: &Vec3,
    ctx: &OrthoCtx,
    row: usize,
    col: usize,
) -> (Sample, SampleGrad) {
    if let PreparedKind::Ortho {
        r, r_loc, a, inv2, ..
    } = &p.kind
    {
        let x = r.transpose() * (ctx.cam.pixel_origin(row, col) - mu);
        let mut b = 0.0;
        let mut c = 0.0;
        for j in 0..3 {
            b += r_loc[j] * x[j] * inv2[j];
            c += 0.5 * x[j] * x[j] * inv2[j];
        }
        let g = b * b / (4.0 * a) - c;
        let w = (std::f64::consts::PI / a).sqrt() * g.exp();
        // ∂ln w/∂x_j, then back to world through −R.
        let mut gx = Vec3::zeros();
        let mut ds = Vec3::zeros();
        for j in 0..3 {
            gx[j] = (b / (2.0 * a)) * r_loc[j] * inv2[j] - x[j] * inv2[j];
            // d ln w / d s_j with ŝ_j = e^{s_j}:
            let rj2 = r_loc[j] * r_loc[j] * inv2[j];
            let bj = r_loc[j] * x[j] * inv2[j];
            let cj = x[j] * x[j] * inv2[j];
            ds[j] = rj2 / (2.0 * a) - b * bj / a + b * b * rj2 / (4.0 * a * a) + cj;
        }
        (
            Sample {
                weight: w,
                log_weight: g,
            },
            SampleGrad {
                weight: w,
                d_mu: -(r * gx) * w,
                d_s: ds * w,
                d_rot: 0.0,
            },
        )
    } else {
        unreachable!()
    }
}

fn prepare(scene: &Scene, view: &RenderView, opts: &RenderOptions) -> Result<Vec<Prepared>> {
    let (w, h) = (view.width(), view.height());
    let mut out = Vec::with_capacity(scene.len());
    for (idx, g) in scene.gaussians.iter().enumerate() {
        let opacity = g.opacity_activated()?;
        let s = g.scale_activated(scene.mode)?;
        let (kind, center_px, radius_px): (PreparedKind, (F, F), (F, F)) = match (scene.mode, view)
        {
            (Mode::Image2d, RenderView::Plane(v)) => {
                let mu = Vec2::new(g.mu.x, g.mu.y);
                let rad = 4.0 * s[0].max(s[1]);
                let cc = (
                    (mu.x - v.origin.x) / v.pixel_dx,
                    (mu.y - v.origin.y) / v.pixel_dy,
                );
                (
                    PreparedKind::Plane {
                        rt: g.rot.matrix2().transpose(),
                        s: [s[0], s[1]],
                        mu,
                    },
                    (cc.1, cc.0),
                    (rad / v.pixel_dy, rad / v.pixel_dx),
                )
            }
            (Mode::Ortho3d, RenderView::Ortho(cam)) => {
                let r = g.rot.matrix3();
                let r_loc = r.transpose() * cam.view_dir;
                let s3 = [s[0], s[1], s[2]];
                let inv2 = [
                    1.0 / (s3[0] * s3[0]),
                    1.0 / (s3[1] * s3[1]),
                    1.0 / (s3[2] * s3[2]),
                ];
                let a = 0.5
                    * (r_loc.x * r_loc.x * inv2[0]
                        + r_loc.y * r_loc.y * inv2[1]
                        + r_loc.z * r_loc.z * inv2[2]);
                let d = g.mu - cam.center;
                let u = cam.basis_u.dot(&d);
                let v = cam.basis_v.dot(&d);
                let rad = 4.0 * s3[0].max(s3[1]).max(s3[2]);
                (
                    PreparedKind::Ortho { r, r_loc, a, inv2 },
                    (
                        v / cam.pixel_scale + cam.height as F * 0.5 - 0.5,
                        u / cam.pixel_scale + cam.width as F * 0.5 - 0.5,
                    ),
                    (rad / cam.pixel_scale, rad / cam.pixel_scale),
                )
            }
            _ => {
                return Err(Error::DimensionMismatch(
                    "render view does not match scene mode".into(),
                ))
            }
        };
        let (row0, row1, col0, col1) = if opts.cull {
            (
                (center_px.0 - radius_px.0).floor() as isize,
                (center_px.0 + radius_px.0).ceil() as isize,
                (center_px.1 - radius_px.1).floor() as isize,
                (center_px.1 + radius_px.1).ceil() as isize,
            )
        } else {
            (0, h as isize - 1, 0, w as isize - 1)
        };
        out.push(Prepared {
            idx,
            opacity,
            color: g.color,
            kind,
            row0,
            row1,
            col0,
            col1,
        });
    }
    // Blend order: 2D by depth key, 3D by ray depth of μ (both ascending).
    match (scene.mode, view) {
        (Mode::Image2d, _) => {
            out.sort_by(|a, b| {
                let (ka, kb) = (
                    scene.gaussians[a.idx].depth_key,
                    scene.gaussians[b.idx].depth_key,
                );
                ka.partial_cmp(&kb).unwrap().then(a.idx.cmp(&b.idx))
            });
        }
        (Mode::Ortho3d, RenderView::Ortho(cam)) => {
            out.sort_by(|a, b| {
                let (da, db) = (
                    cam.depth(&scene.gaussians[a.idx].mu),
                    cam.depth(&scene.gaussians[b.idx].mu),
                );
                da.partial_cmp(&db).unwrap().then(a.idx.cmp(&b.idx))
            });
        }
        _ => unreachable!(),
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward / backward

pub struct RenderOutput {
    pub image: Image,
    /// Per-Gaussian flag: contributed to at least one pixel.
    pub visible: Vec<bool>,
    pub final_transmittance: Vec<F>,
}

/// Deterministic single-threaded forward render.
pub fn render_image(
    scene: &Scene,
    view: &RenderView,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let prepared = prepare(scene, view, opts)?;
    let (w, h) = (view.width(), view.height());
    let mut image = Image::new(w, h);
    let mut visible = vec![false; scene.len()];
    let mut t_final = Vec::with_capacity(w * h);
    let ortho_ctx = match view {
        RenderView::Ortho(cam) => Some(OrthoCtx { cam }),
        _ => None,
    };
    for row in 0..h {
        for col in 0..w {
            let mut color = Vec3::zeros();
            let mut t = 1.0_f64;
            for p in &prepared {
                if opts.cull && !p.in_box(row, col) {
                    continue;
                }
                let sample = match view {
                    RenderView::Plane(v) => sample_plane(p, v, row, col),
                    RenderView::Ortho(_) => sample_ortho(
                        p,
                        &scene.gaussians[p.idx].mu,
                        ortho_ctx.as_ref().unwrap(),
                        row,
                        col,
                    ),
                };
                if opts.cull && sample.log_weight < CULL_LOG_WEIGHT {
                    continue;
                }
                let alpha = (p.opacity * sample.weight).min(ALPHA_CLAMP);
                if alpha < 1e-14 {
                    continue;
                }
                visible[p.idx] = true;
                color += p.color * (alpha * t);
                t *= 1.0 - alpha;
                if t < 1e-14 {
                    break;
                }
            }
            color += opts.background * t;
            image.set(row, col, [color.x, color.y, color.z]);
            t_final.push(t);
        }
    }
    Ok(RenderOutput {
        image,
        visible,
        final_transmittance: t_final,
    })
}

/// Analytic gradient of the scalar loss whose per-pixel derivative is
/// `residual` (dL/dC, RGB per pixel). Includes the self term and the
/// occlusion terms through downstream transmittances for position, opacity,
/// scale and rotation; color has only the self term.
pub fn backward_image(
    scene: &Scene,
    view: &RenderView,
    residual: &Image,
    opts: &RenderOptions,
) -> Result<GradientSet> {
    if residual.width != view.width() || residual.height != view.height() {
        return Err(Error::DimensionMismatch(
            "residual image does not match view".into(),
        ));
    }
    let prepared = prepare(scene, view, opts)?;
    let mut grads = GradientSet::zeros(scene.len());
    let ortho_ctx = match view {
        RenderView::Ortho(cam) => Some(OrthoCtx { cam }),
        _ => None,
    };

    // Per-pixel contribution record for the reverse sweep.
    struct Contrib {
        idx: usize,
        alpha: F,
        clamped: bool,
        t_before: F,
        color: Vec3,
        opacity: F,
        weight: F,
        d_mu_w: Vec3,
        d_s_w: Vec3,
        d_rot_w: F,
    }

    let mut contribs: Vec<Contrib> = Vec::new();
    for row in 0..residual.height {
        for col in 0..residual.width {
            let res = residual.at(row, col);
            let res = Vec3::new(res[0], res[1], res[2]);
            contribs.clear();
            let mut t = 1.0_f64;
            for p in &prepared {
                if opts.cull && !p.in_box(row, col) {
                    continue;
                }
                let (sample, grad) = match view {
                    RenderView::Plane(v) => sample_grad_2d(p, v, row, col),
                    RenderView::Ortho(_) => sample_grad_3d(
                        p,
                        &scene.gaussians[p.idx].mu,
                        ortho_ctx.as_ref().unwrap(),
                        row,
                        col,
                    ),
                };
                if opts.cull && sample.log_weight < CULL_LOG_WEIGHT {
                    continue;
                }
                let raw_alpha = p.opacity * sample.weight;
                let clamped = raw_alpha > ALPHA_CLAMP;
                let alpha = raw_alpha.min(ALPHA_CLAMP);
                if alpha < 1e-14 {
                    continue;
                }
                contribs.push(Contrib {
                    idx: p.idx,
                    alpha,
                    clamped,
                    t_before: t,
                    color: p.color,
                    opacity: p.opacity,
                    weight: grad.weight,
                    d_mu_w: grad.d_mu,
                    d_s_w: grad.d_s,
                    d_rot_w: grad.d_rot,
                });
                t *= 1.0 - alpha;
                if t < 1e-14 {
                    break;
                }
            }
            if res == Vec3::zeros() {
                continue;
            }
            // Reverse sweep: `suffix` accumulates Σ_{k>i} ĉ_k α_k T_k.
            let mut suffix = Vec3::zeros();
            for c in contribs.iter().rev() {
                let d_alpha = res.dot(&c.color) * c.t_before - res.dot(&suffix) / (1.0 - c.alpha);
                grads.d_color[c.idx] += res * (c.alpha * c.t_before);
                if !c.clamped {
                    let sig = c.opacity;
                    grads.d_opacity[c.idx] += d_alpha * c.weight * sig * (1.0 - sig);
                    let f = d_alpha * sig;
                    grads.d_mu[c.idx] += c.d_mu_w * f;
                    grads.d_scale[c.idx] += c.d_s_w * f;
                    grads.d_rot[c.idx] += c.d_rot_w * f;
                }
                suffix += c.color * (c.alpha * c.t_before);
            }
        }
    }
    Ok(grads)
}
