//! Photometric loss plus the two particle-constraint losses.
//!
//! The scale loss penalizes the largest activated scale component above a
//! margin β; the confidence loss pushes activated opacities toward {0,1} by
//! penalizing the distance to the binarized value `⌊1.99·ô⌋`.

use crate::core::Scene;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::splat::Image;
use crate::{Vec3, F};

/// Per-iteration loss breakdown. `total` is exactly
/// `photometric + ω_s·scale_term + ω_t·confidence_term`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub photometric: F,
    pub scale_term: F,
    pub confidence_term: F,
    pub total: F,
    pub omega_s: F,
    pub omega_t: F,
}

impl LossReport {
    pub fn new(photometric: F, scale_term: F, confidence_term: F, omega_s: F, omega_t: F) -> Self {
        LossReport {
            photometric,
            scale_term,
            confidence_term,
            total: photometric + omega_s * scale_term + omega_t * confidence_term,
            omega_s,
            omega_t,
        }
    }
}

/// Mean squared error over pixels and channels, with the per-pixel residual
/// `dL/dC = 2(C−C_gt)/(#pixels·#channels)`.
pub fn photometric_l2(rendered: &Image, target: &Image) -> Result<(F, Image)> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::Usage(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let n = (rendered.pixels.len() * 3) as F;
    let mut loss = 0.0;
    let mut residual = Image::new(rendered.width, rendered.height);
    for (i, (r, t)) in rendered.pixels.iter().zip(&target.pixels).enumerate() {
        let mut res = [0.0; 3];
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d * d;
            res[c] = 2.0 * d / n;
        }
        residual.pixels[i] = res;
    }
    Ok((loss / n, residual))
}

/// Hinge penalty on one Gaussian's largest activated scale: `max(ŝ*−β, 0)`.
pub fn scale_penalty<T: Real>(s_star: T, beta: T) -> T {
    (s_star - beta).max(T::zero())
}

/// Confidence term for one activated opacity: `(ô − ⌊1.99·ô⌋)²` and its
/// derivative w.r.t. the raw logit, treating the floor as locally constant.
pub fn confidence_term<T: Real>(o_hat: T) -> (T, T) {
    let b = (T::c(1.99) * o_hat).floor();
    let d = o_hat - b;
    let two = T::c(2.0);
    (d * d, two * d * o_hat * (T::one() - o_hat))
}

/// Mean hinge scale loss over the visible set, with per-Gaussian log-scale
/// gradient contributions (subgradient into the argmax component only).
pub fn scale_loss(scene: &Scene, visible: &[bool], beta: F) -> Result<(F, Vec<Vec3>)> {
    let n = scene.len();
    let mut d_s = vec![Vec3::zeros(); n];
    let count = visible.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok((0.0, d_s));
    }
    let dim = scene.mode.dim();
    let mut total = 0.0;
    for (i, g) in scene.gaussians.iter().enumerate() {
        if !visible[i] {
            continue;
        }
        let s = g.scale_activated(scene.mode)?;
        let (argmax, &s_star) = s
            .iter()
            .enumerate()
            .take(dim)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        total += scale_penalty(s_star, beta);
        if s_star > beta {
            // d max(ŝ*−β,0)/d s_j = ŝ* through the exp activation.
            d_s[i][argmax] = s_star / count as F;
        }
    }
    Ok((total / count as F, d_s))
}

/// Mean confidence loss over the visible set, with per-Gaussian opacity-logit
/// gradient contributions.
pub fn confidence_loss(scene: &Scene, visible: &[bool]) -> Result<(F, Vec<F>)> {
    let n = scene.len();
    let mut d_o = vec![0.0; n];
    let count = visible.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok((0.0, d_o));
    }
    let mut total = 0.0;
    for (i, g) in scene.gaussians.iter().enumerate() {
        if !visible[i] {
            continue;
        }
        let o_hat = g.opacity_activated()?;
        let (term, grad) = confidence_term(o_hat);
        total += term;
        d_o[i] = grad / count as F;
    }
    Ok((total / count as F, d_o))
}
