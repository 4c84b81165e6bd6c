//! Seeded synthetic targets.
//!
//! 2D: band-limited noise plus geometric primitives, so the target mixes
//! smooth gradients with hard edges. 3D: a random Gaussian cloud rendered by
//! the production renderer, so the training views are exactly representable.

use crate::config::{Mode, TrainConfig};
use crate::core::{Aabb, CameraOrtho, RawGaussian, Rotation, Scene};
use crate::error::Result;
use crate::splat::{render_image, Image, RenderOptions, RenderView};
use crate::{Vec3, F};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Band-limited noise plus primitives: a few low-frequency cosine waves, a
/// filled disk, an axis-aligned bar, and a linear ramp, composited per
/// channel and clamped to [0,1].
pub fn synthetic_target_2d(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53594e); // disjoint from scene init
                                                              // Low-frequency cosine basis: frequencies 1..4 cycles per image.
    struct Wave {
        fx: F,
        fy: F,
        phase: F,
        amp: [F; 3],
    }
    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            fx: rng.gen_range(1.0..4.0),
            fy: rng.gen_range(1.0..4.0),
            phase: rng.gen::<F>() * std::f64::consts::TAU,
            amp: [
                0.08 + 0.12 * rng.gen::<F>(),
                0.08 + 0.12 * rng.gen::<F>(),
                0.08 + 0.12 * rng.gen::<F>(),
            ],
        })
        .collect();
    let disk_c = (0.25 + 0.5 * rng.gen::<F>(), 0.25 + 0.5 * rng.gen::<F>());
    let disk_r = 0.10 + 0.10 * rng.gen::<F>();
    let disk_col = [rng.gen::<F>(), rng.gen::<F>(), rng.gen::<F>()];
    let bar_x = 0.2 + 0.5 * rng.gen::<F>();
    let bar_w = 0.04 + 0.06 * rng.gen::<F>();
    let bar_col = [rng.gen::<F>(), rng.gen::<F>(), rng.gen::<F>()];
    let ramp_col = [
        0.2 + 0.3 * rng.gen::<F>(),
        0.2 + 0.3 * rng.gen::<F>(),
        0.2 + 0.3 * rng.gen::<F>(),
    ];

    let mut img = Image::new(width, height);
    for row in 0..height {
        for col in 0..width {
            let u = (col as F + 0.5) / width as F;
            let v = (row as F + 0.5) / height as F;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = 0.35 + ramp_col[c] * u;
            }
            for w in &waves {
                let s = (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).cos();
                for (c, p) in px.iter_mut().enumerate() {
                    *p += w.amp[c] * s;
                }
            }
            let dd = (u - disk_c.0).hypot(v - disk_c.1);
            if dd < disk_r {
                px = disk_col;
            }
            if (u - bar_x).abs() < bar_w {
                for c in 0..3 {
                    px[c] = 0.5 * px[c] + 0.5 * bar_col[c];
                }
            }
            for c in &mut px {
                *c = c.clamp(0.0, 1.0);
            }
            img.set(row, col, px);
        }
    }
    img
}

/// Ground-truth Gaussian cloud for 3D fitting: positions in the middle of the
/// unit box, moderate opacities, isotropic-ish scales.
pub fn synthetic_cloud_3d(count: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x434c44);
    let gaussians = (0..count)
        .map(|_| RawGaussian {
            mu: Vec3::new(
                0.2 + 0.6 * rng.gen::<F>(),
                0.2 + 0.6 * rng.gen::<F>(),
                0.2 + 0.6 * rng.gen::<F>(),
            ),
            color: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            opacity: crate::core::logit(0.3 + 0.6 * rng.gen::<F>()),
            log_scale: Vec3::new(
                -2.8 + 0.8 * rng.gen::<F>(),
                -2.8 + 0.8 * rng.gen::<F>(),
                -2.8 + 0.8 * rng.gen::<F>(),
            ),
            rot: Rotation::Matrix(crate::Mat3::identity()),
            depth_key: rng.gen(),
        })
        .collect();
    Scene {
        gaussians,
        mode: Mode::Ortho3d,
        bbox: Aabb::unit3d(),
    }
}

/// Deterministic camera ring around the unit box: `views` training cameras
/// spaced around the equator with a small elevation stagger, plus one
/// held-out camera offset half a step.
pub fn camera_ring(
    views: usize,
    width: usize,
    height: usize,
    holdout: bool,
) -> Result<(Vec<CameraOrtho>, Option<CameraOrtho>)> {
    let center = Vec3::new(0.5, 0.5, 0.5);
    // Cover the unit box diagonal regardless of direction.
    let pixel_scale = 1.3 / width as F;
    let dir = |angle: F, elev: F| {
        Vec3::new(
            angle.cos() * elev.cos(),
            angle.sin() * elev.cos(),
            elev.sin(),
        )
    };
    let mut cams = Vec::with_capacity(views);
    for k in 0..views {
        let angle = std::f64::consts::TAU * k as F / views as F;
        let elev = if k % 2 == 0 { 0.3 } else { -0.2 };
        cams.push(CameraOrtho::looking(
            center,
            dir(angle, elev),
            width,
            height,
            pixel_scale,
        )?);
    }
    let held = if holdout {
        let angle = std::f64::consts::TAU * 0.5 / views.max(1) as F;
        Some(CameraOrtho::looking(
            center,
            dir(angle, 0.05),
            width,
            height,
            pixel_scale,
        )?)
    } else {
        None
    };
    Ok((cams, held))
}

/// Training targets for one run: the views and their rendered (or loaded)
/// target images.
pub struct TargetSet {
    pub views: Vec<RenderView>,
    pub targets: Vec<Image>,
    pub holdout: Option<(RenderView, Image)>,
}

/// Build the target set from the config: 2D renders or loads a single plane
/// target; 3D renders the seeded cloud from a camera ring.
pub fn build_targets(cfg: &TrainConfig) -> Result<TargetSet> {
    match cfg.mode {
        Mode::Image2d => {
            let target = if cfg.target == "synthetic" {
                synthetic_target_2d(cfg.image_width, cfg.image_height, cfg.seed)
            } else {
                crate::io::read_ppm(std::path::Path::new(&cfg.target))?
            };
            let bbox = Aabb::unit2d();
            let view = RenderView::Plane(crate::splat::PlaneView::covering(
                &bbox,
                target.width,
                target.height,
            ));
            Ok(TargetSet {
                views: vec![view],
                targets: vec![target],
                holdout: None,
            })
        }
        Mode::Ortho3d => {
            let cloud = synthetic_cloud_3d(24, cfg.seed);
            let (cams, held) =
                camera_ring(cfg.views, cfg.image_width, cfg.image_height, cfg.holdout)?;
            let opts = RenderOptions {
                cull: true,
                background: if cfg.white_background {
                    Vec3::new(1.0, 1.0, 1.0)
                } else {
                    Vec3::zeros()
                },
            };
            let mut views = Vec::with_capacity(cams.len());
            let mut targets = Vec::with_capacity(cams.len());
            for cam in cams {
                let view = RenderView::Ortho(cam);
                targets.push(render_image(&cloud, &view, &opts)?.image);
                views.push(view);
            }
            let holdout = match held {
                Some(cam) => {
                    let view = RenderView::Ortho(cam);
                    let img = render_image(&cloud, &view, &opts)?.image;
                    Some((view, img))
                }
                None => None,
            };
            Ok(TargetSet {
                views,
                targets,
                holdout,
            })
        }
    }
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    #[test]
    fn target_2d_deterministic_and_bounded() {
        let a = synthetic_target_2d(32, 32, 7);
        let b = synthetic_target_2d(32, 32, 7);
        assert_eq!(a, b);
        assert!(a
            .pixels
            .iter()
            .all(|p| p.iter().all(|&c| (0.0..=1.0).contains(&c))));
        let c = synthetic_target_2d(32, 32, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn target_2d_has_contrast() {
        let img = synthetic_target_2d(64, 64, 0);
        let lo = img.pixels.iter().map(|p| p[0]).fold(F::INFINITY, F::min);
        let hi = img
            .pixels
            .iter()
            .map(|p| p[0])
            .fold(F::NEG_INFINITY, F::max);
        assert!(hi - lo > 0.3, "lo={lo} hi={hi}");
    }

    #[test]
    fn cloud_3d_in_bbox() {
        let s = synthetic_cloud_3d(24, 1);
        assert_eq!(s.len(), 24);
        for g in &s.gaussians {
            assert!(s.bbox.contains_with_margin(&g.mu, 0.0));
        }
    }

    #[test]
    fn build_targets_3d_views_nonempty() {
        let mut cfg = TrainConfig::default();
        cfg.mode = Mode::Ortho3d;
        cfg.image_width = 16;
        cfg.image_height = 16;
        cfg.views = 3;
        cfg.holdout = true;
        let ts = build_targets(&cfg).unwrap();
        assert_eq!(ts.views.len(), 3);
        assert!(ts.holdout.is_some());
        // Targets must contain signal, not an all-black render.
        assert!(ts.targets[0].pixels.iter().any(|p| p[0] > 0.01));
    }
}
