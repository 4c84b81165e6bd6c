//! Independent oracles: finite-difference gradients, the direct viscous
//! reference update, the gradient-magnitude scaling probe, and field energy
//! decay.

use crate::config::Mode;
use crate::core::{Aabb, CameraOrtho, RawGaussian, Rotation, Scene};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::losses::photometric_l2;
use crate::splat::{
    backward_image, render_image, GradientSet, Image, PlaneView, RenderOptions, RenderView,
};
use crate::{Mat3, Vec3, F};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One raw scalar attribute of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Mu(usize),
    Color(usize),
    Opacity,
    Scale(usize),
    Rot,
}

impl Attribute {
    pub fn name(&self) -> &'static str {
        match self {
            Attribute::Mu(_) => "position",
            Attribute::Color(_) => "color",
            Attribute::Opacity => "opacity",
            Attribute::Scale(_) => "scale",
            Attribute::Rot => "rotation",
        }
    }

    fn get(&self, g: &RawGaussian) -> F {
        match *self {
            Attribute::Mu(a) => g.mu[a],
            Attribute::Color(a) => g.color[a],
            Attribute::Opacity => g.opacity,
            Attribute::Scale(a) => g.log_scale[a],
            Attribute::Rot => g.rot.angle(),
        }
    }

    fn set(&self, g: &mut RawGaussian, v: F) {
        match *self {
            Attribute::Mu(a) => g.mu[a] = v,
            Attribute::Color(a) => g.color[a] = v,
            Attribute::Opacity => g.opacity = v,
            Attribute::Scale(a) => g.log_scale[a] = v,
            Attribute::Rot => g.rot = Rotation::Angle(v),
        }
    }

    /// Analytic gradient entry for this attribute from a [`GradientSet`].
    pub fn pick(&self, grads: &GradientSet, i: usize) -> F {
        match *self {
            Attribute::Mu(a) => grads.d_mu[i][a],
            Attribute::Color(a) => grads.d_color[i][a],
            Attribute::Opacity => grads.d_opacity[i],
            Attribute::Scale(a) => grads.d_scale[i][a],
            Attribute::Rot => grads.d_rot[i],
        }
    }
}

/// Central finite difference of the photometric L2 loss w.r.t. one raw
/// attribute, using full forward renders.
pub fn finite_diff_grad(
    scene: &Scene,
    view: &RenderView,
    target: &Image,
    opts: &RenderOptions,
    index: usize,
    attr: Attribute,
    eps: F,
) -> Result<F> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut probe = scene.clone();
    let base = attr.get(&scene.gaussians[index]);
    let mut eval = |v: F| -> Result<F> {
        attr.set(&mut probe.gaussians[index], v);
        let out = render_image(&probe, view, opts)?;
        Ok(photometric_l2(&out.image, target)?.0)
    };
    let lp = eval(base + eps)?;
    let lm = eval(base - eps)?;
    Ok((lp - lm) / (2.0 * eps))
}

/// All learnable scalar attributes for a mode.
pub fn attributes_for(mode: Mode) -> Vec<Attribute> {
    let mut v = vec![
        Attribute::Mu(0),
        Attribute::Mu(1),
        Attribute::Color(0),
        Attribute::Color(1),
        Attribute::Color(2),
        Attribute::Opacity,
        Attribute::Scale(0),
        Attribute::Scale(1),
    ];
    match mode {
        Mode::Image2d => v.push(Attribute::Rot),
        Mode::Ortho3d => {
            v.push(Attribute::Mu(2));
            v.push(Attribute::Scale(2));
        }
    }
    v
}

/// Worst observed relative errors of the gradient suite, per attribute name.
#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub cases: usize,
    pub max_rel: Vec<(&'static str, F)>,
    pub failures: Vec<String>,
}

impl GradcheckReport {
    fn record(&mut self, name: &'static str, rel: F) {
        match self.max_rel.iter_mut().find(|(n, _)| *n == name) {
            Some((_, m)) => *m = m.max(rel),
            None => self.max_rel.push((name, rel)),
        }
    }

    pub fn worst(&self) -> F {
        self.max_rel.iter().map(|(_, m)| *m).fold(0.0, F::max)
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let a = Vec3::new(
            rng.gen::<F>() - 0.5,
            rng.gen::<F>() - 0.5,
            rng.gen::<F>() - 0.5,
        );
        let b = Vec3::new(
            rng.gen::<F>() - 0.5,
            rng.gen::<F>() - 0.5,
            rng.gen::<F>() - 0.5,
        );
        if a.norm() < 1e-3 {
            continue;
        }
        let e1 = a.normalize();
        let bp = b - e1 * e1.dot(&b);
        if bp.norm() < 1e-3 {
            continue;
        }
        let e2 = bp.normalize();
        return Mat3::from_columns(&[e1, e2, e1.cross(&e2)]);
    }
}

fn random_case(mode: Mode, rng: &mut ChaCha8Rng) -> (Scene, RenderView, Image) {
    let n = rng.gen_range(2..=5);
    let gaussians = (0..n)
        .map(|_| {
            // Moderate opacities keep alphas away from the 0.999 clamp,
            // whose kink breaks central differences.
            let opacity = -2.0 + 3.0 * rng.gen::<F>();
            match mode {
                Mode::Image2d => RawGaussian {
                    mu: Vec3::new(
                        0.15 + 0.7 * rng.gen::<F>(),
                        0.15 + 0.7 * rng.gen::<F>(),
                        0.0,
                    ),
                    color: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                    opacity,
                    log_scale: Vec3::new(
                        -2.8 + 1.4 * rng.gen::<F>(),
                        -2.8 + 1.4 * rng.gen::<F>(),
                        0.0,
                    ),
                    rot: Rotation::Angle(rng.gen::<F>() * std::f64::consts::TAU),
                    depth_key: rng.gen(),
                },
                Mode::Ortho3d => RawGaussian {
                    mu: Vec3::new(
                        0.25 + 0.5 * rng.gen::<F>(),
                        0.25 + 0.5 * rng.gen::<F>(),
                        0.25 + 0.5 * rng.gen::<F>(),
                    ),
                    color: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                    opacity,
                    log_scale: Vec3::new(
                        -2.6 + 1.2 * rng.gen::<F>(),
                        -2.6 + 1.2 * rng.gen::<F>(),
                        -2.6 + 1.2 * rng.gen::<F>(),
                    ),
                    rot: Rotation::Matrix(random_rotation(rng)),
                    depth_key: rng.gen(),
                },
            }
        })
        .collect();
    let (scene, view) = match mode {
        Mode::Image2d => {
            let scene = Scene {
                gaussians,
                mode,
                bbox: Aabb::unit2d(),
            };
            let view = RenderView::Plane(PlaneView::covering(&scene.bbox, 12, 12));
            (scene, view)
        }
        Mode::Ortho3d => {
            let scene = Scene {
                gaussians,
                mode,
                bbox: Aabb::unit3d(),
            };
            let dir = Vec3::new(
                rng.gen::<F>() - 0.5,
                rng.gen::<F>() - 0.5,
                rng.gen::<F>() - 0.5,
            ) + Vec3::new(0.0, 0.0, 1e-3);
            let cam =
                CameraOrtho::looking(Vec3::new(0.5, 0.5, 0.5), dir, 10, 10, 1.3 / 10.0).unwrap();
            (scene, RenderView::Ortho(cam))
        }
    };
    let mut target = Image::new(view.width(), view.height());
    for p in target.pixels.iter_mut() {
        *p = [rng.gen(), rng.gen(), rng.gen()];
    }
    (scene, view, target)
}

/// The full gradient oracle suite: `cases` random configurations per mode,
/// every learnable attribute of every Gaussian, analytic vs central
/// differences at `tolerance` relative error.
pub fn run_gradcheck(cases: usize, seed: u64, tolerance: F) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RenderOptions {
        cull: false,
        background: Vec3::zeros(),
    };
    let eps = 1e-5;
    let mut report = GradcheckReport::default();
    for mode in [Mode::Image2d, Mode::Ortho3d] {
        let attrs = attributes_for(mode);
        for case in 0..cases {
            let (scene, view, target) = random_case(mode, &mut rng);
            let out = render_image(&scene, &view, &opts)?;
            let (_, residual) = photometric_l2(&out.image, &target)?;
            let grads = backward_image(&scene, &view, &residual, &opts)?;
            let i = rng.gen_range(0..scene.len());
            for &attr in &attrs {
                let analytic = attr.pick(&grads, i);
                let numeric = finite_diff_grad(&scene, &view, &target, &opts, i, attr, eps)?;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                report.record(attr.name(), rel);
                if rel >= tolerance {
                    report.failures.push(format!(
                        "mode={mode:?} case={case} gaussian={i} attr={} analytic={analytic:.9e} numeric={numeric:.9e} rel={rel:.3e}",
                        attr.name()
                    ));
                }
            }
            report.cases += 1;
        }
    }
    Ok(report)
}

/// Direct evaluation of the viscous update: each particle's raw update is
/// pulled toward the mean update of its voxel co-occupants (including
/// itself): `Δμ̂_i = Δμ_i + (1−λ)(mean_{N_i} Δμ_j − Δμ_i)`.
pub fn viscous_reference_update(
    field: &VelocityField,
    positions: &[Vec3],
    updates: &[Vec3],
    lambda: F,
) -> Result<Vec<Vec3>> {
    if positions.len() != updates.len() {
        return Err(Error::LengthMismatch {
            left: positions.len(),
            right: updates.len(),
        });
    }
    let n_vox = field.dims[0] * field.dims[1] * field.dims[2];
    let mut sums = vec![Vec3::zeros(); n_vox];
    let mut counts = vec![0u32; n_vox];
    let cells: Vec<usize> = positions
        .iter()
        .map(|p| field.linear(field.voxel_index(p)))
        .collect();
    for (c, u) in cells.iter().zip(updates) {
        sums[*c] += u;
        counts[*c] += 1;
    }
    Ok(cells
        .iter()
        .zip(updates)
        .map(|(&c, u)| {
            let mean = sums[c] / counts[c] as F;
            u + (mean - u) * (1.0 - lambda)
        })
        .collect())
}

/// One probed scale of the scaling report.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub s_hat: F,
    /// Footprint-summed gradient magnitudes, normalized by the footprint's
    /// total splat weight.
    pub g_mu: F,
    pub g_color: F,
    pub g_opacity: F,
    pub g_scale: F,
    /// ŝ·g_mu / g_scale.
    pub ratio: F,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of ln g_mu vs ln ŝ.
    pub slope: F,
    pub slope_stderr: F,
    /// Scales skipped for sub-2×2-pixel footprints.
    pub skipped: usize,
}

/// Footprint-summed per-pixel gradient magnitudes of a single isotropic 2D
/// Gaussian across a scale sweep. The footprint is the set of pixels with
/// splat weight ≥ 0.01 (the 0.99 confidence bound); sums are normalized by
/// the footprint's total weight so residual bookkeeping cancels.
pub fn gradient_scaling_probe(grid: usize, center: (F, F), scales: &[F]) -> Result<ScalingReport> {
    let view = PlaneView::covering(&Aabb::unit2d(), grid, grid);
    let o_hat = 0.5_f64; // logit 0
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for &s in scales {
        if s < crate::core::SCALE_FLOOR {
            return Err(Error::DegenerateScale(s));
        }
        let mut w_sum = 0.0;
        let mut g_mu = 0.0;
        let mut g_color = 0.0;
        let mut g_opacity = 0.0;
        let mut g_scale = 0.0;
        let mut px_count = 0usize;
        for row in 0..grid {
            for col in 0..grid {
                let p = view.pixel_pos(row, col);
                let y = crate::Vec2::new(p.x - center.0, p.y - center.1);
                let q = y / (s * s);
                let w = (-0.5 * y.dot(&q)).exp();
                if w < 0.01 {
                    continue;
                }
                px_count += 1;
                w_sum += w;
                g_mu += o_hat * w * q.norm();
                g_color += o_hat * w;
                g_opacity += w * o_hat * (1.0 - o_hat);
                // Log-scale domain: dw/ds_j = w·y_j²/ŝ_j².
                g_scale += o_hat * w * crate::Vec2::new(y.x * q.x, y.y * q.y).norm();
            }
        }
        // Footprint must be at least 2×2 pixels for the discretization to
        // resemble the continuous integral.
        if px_count < 4 {
            skipped += 1;
            continue;
        }
        let g_mu = g_mu / w_sum;
        let g_scale = g_scale / w_sum;
        rows.push(ScalingRow {
            s_hat: s,
            g_mu,
            g_color: g_color / w_sum,
            g_opacity: g_opacity / w_sum,
            g_scale,
            ratio: s * g_mu / g_scale,
        });
    }
    if rows.len() < 2 {
        return Err(Error::Usage(
            "scaling probe needs at least two usable scales".into(),
        ));
    }
    // Least squares in log-log space.
    let xs: Vec<F> = rows.iter().map(|r| r.s_hat.ln()).collect();
    let ys: Vec<F> = rows.iter().map(|r| r.g_mu.ln()).collect();
    let n = xs.len() as F;
    let mx = xs.iter().sum::<F>() / n;
    let my = ys.iter().sum::<F>() / n;
    let sxx: F = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: F = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let resid: F = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - my - slope * (x - mx);
            e * e
        })
        .sum();
    let dof = (xs.len() as F - 2.0).max(1.0);
    let slope_stderr = (resid / dof / sxx).sqrt();
    Ok(ScalingReport {
        rows,
        slope,
        slope_stderr,
        skipped,
    })
}

/// Default sweep for the probe command and the acceptance gate: 12 scales
/// spanning two decades on a 256-pixel grid.
pub fn default_scaling_probe() -> Result<ScalingReport> {
    let scales: Vec<F> = (0..12)
        .map(|k| 0.005 * (100.0_f64).powf(k as F / 11.0))
        .collect();
    gradient_scaling_probe(256, (0.5, 0.5), &scales)
}

/// Max-voxel-norm series of a freely decaying field (all photometric
/// gradients zero): entry l equals λ_g × entry l−1.
pub fn energy_decay_probe(field: &mut VelocityField, steps: usize) -> Result<Vec<F>> {
    let mut series = Vec::with_capacity(steps);
    for _ in 0..steps {
        field.p2g_update(&[], &[])?;
        series.push(field.max_norm());
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (scene, view, _) = random_case(Mode::Image2d, &mut rng);
        let opts = RenderOptions {
            cull: false,
            background: Vec3::zeros(),
        };
        // Target equals the render: loss is at a global minimum of 0.
        let target = render_image(&scene, &view, &opts).unwrap().image;
        let d = finite_diff_grad(&scene, &view, &target, &opts, 0, Attribute::Mu(0), 1e-5).unwrap();
        assert!(d.abs() < 1e-10, "{d}");
    }

    #[test]
    fn gradcheck_small_suite_passes() {
        let report = run_gradcheck(12, 3, 1e-4).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.cases, 24);
        assert!(report.max_rel.len() >= 5);
    }

    #[test]
    fn finite_diff_second_order_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (scene, view, target) = random_case(Mode::Image2d, &mut rng);
        let opts = RenderOptions {
            cull: false,
            background: Vec3::zeros(),
        };
        let out = render_image(&scene, &view, &opts).unwrap();
        let (_, residual) = photometric_l2(&out.image, &target).unwrap();
        let grads = backward_image(&scene, &view, &residual, &opts).unwrap();
        let analytic = Attribute::Mu(0).pick(&grads, 0);
        let e1 = (finite_diff_grad(&scene, &view, &target, &opts, 0, Attribute::Mu(0), 8e-4)
            .unwrap()
            - analytic)
            .abs();
        let e2 = (finite_diff_grad(&scene, &view, &target, &opts, 0, Attribute::Mu(0), 4e-4)
            .unwrap()
            - analytic)
            .abs();
        assert!(e2 < e1, "e1={e1} e2={e2}");
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (scene, view, target) = random_case(Mode::Image2d, &mut rng);
        let opts = RenderOptions::default();
        assert!(
            finite_diff_grad(&scene, &view, &target, &opts, 0, Attribute::Opacity, 1e-2).is_err()
        );
    }

    fn flat_field() -> VelocityField {
        VelocityField::new(Vec3::zeros(), 0.25, [4, 4, 1], 0.8)
    }

    #[test]
    fn viscous_uniform_flow_inert() {
        let field = flat_field();
        let positions = vec![
            Vec3::new(0.1, 0.1, 0.0),
            Vec3::new(0.12, 0.11, 0.0),
            Vec3::new(0.7, 0.8, 0.0),
        ];
        let u = Vec3::new(0.3, -0.2, 0.0);
        let updates = vec![u; 3];
        let out = viscous_reference_update(&field, &positions, &updates, 0.8).unwrap();
        for v in out {
            assert!((v - u).norm() < 1e-15);
        }
    }

    #[test]
    fn viscous_antisymmetric_pair() {
        let field = flat_field();
        let p = Vec3::new(0.1, 0.1, 0.0);
        let u = Vec3::new(1.0, 0.0, 0.0);
        let out = viscous_reference_update(&field, &[p, p], &[u, -u], 0.8).unwrap();
        assert!((out[0] - u * 0.8).norm() < 1e-15);
        assert!((out[1] + u * 0.8).norm() < 1e-15);
    }

    #[test]
    fn viscous_preserves_group_mean() {
        let field = flat_field();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let positions: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), 0.0))
            .collect();
        let updates: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.gen::<F>() - 0.5, rng.gen::<F>() - 0.5, 0.0))
            .collect();
        let out = viscous_reference_update(&field, &positions, &updates, 0.7).unwrap();
        // Mean preserved within each voxel group.
        let mut groups: std::collections::HashMap<usize, (Vec3, Vec3, u32)> =
            std::collections::HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            let c = field.linear(field.voxel_index(p));
            let e = groups.entry(c).or_insert((Vec3::zeros(), Vec3::zeros(), 0));
            e.0 += updates[i];
            e.1 += out[i];
            e.2 += 1;
        }
        for (_, (a, b, _)) in groups {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn fixed_point_matches_pdeo_step() {
        // Drive the field to its fixed point under constant updates, then one
        // pipeline step must equal the direct viscous reference with λ := λ_p.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let positions: Vec<Vec3> = (0..25)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), 0.0))
            .collect();
        let updates: Vec<Vec3> = (0..25)
            .map(|_| Vec3::new(rng.gen::<F>() - 0.5, rng.gen::<F>() - 0.5, 0.0))
            .collect();
        let lambda = 0.8;
        let mut field = flat_field();
        for _ in 0..400 {
            field.p2g_update(&positions, &updates).unwrap();
        }
        let stepped =
            crate::optimizer::pdeo_position_step(&mut field, &positions, &updates, lambda).unwrap();
        let reference = viscous_reference_update(&field, &positions, &updates, lambda).unwrap();
        for (a, b) in stepped.iter().zip(&reference) {
            assert!((a - b).norm() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn scaling_probe_slope_near_minus_one() {
        let report = default_scaling_probe().unwrap();
        assert!(report.rows.len() >= 8);
        let decades = (report.rows.last().unwrap().s_hat / report.rows[0].s_hat).log10();
        assert!(decades >= 2.0 - 1e-9, "{decades}");
        assert!(
            (-1.3..=-0.7).contains(&report.slope),
            "slope {}",
            report.slope
        );
        for r in &report.rows {
            assert!((0.1..=10.0).contains(&r.ratio), "ratio {}", r.ratio);
        }
        // Color magnitude varies by < 10× over the sweep.
        let cmax = report.rows.iter().map(|r| r.g_color).fold(0.0, F::max);
        let cmin = report
            .rows
            .iter()
            .map(|r| r.g_color)
            .fold(F::INFINITY, F::min);
        assert!(cmax / cmin < 10.0, "{cmax} / {cmin}");
    }

    #[test]
    fn scaling_probe_translation_invariant() {
        let scales: Vec<F> = (0..8)
            .map(|k| 0.01 * (30.0_f64).powf(k as F / 7.0))
            .collect();
        let a = gradient_scaling_probe(256, (0.5, 0.5), &scales).unwrap();
        let b = gradient_scaling_probe(256, (0.47, 0.54), &scales).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!(
                (ra.g_mu - rb.g_mu).abs() / ra.g_mu < 0.05,
                "{} vs {}",
                ra.g_mu,
                rb.g_mu
            );
        }
    }

    #[test]
    fn scaling_probe_skips_tiny_footprints() {
        let scales = [1e-4, 0.05, 0.1, 0.2];
        let report = gradient_scaling_probe(64, (0.5, 0.5), &scales).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.rows.len(), 3);
    }

    #[test]
    fn energy_decay_examples() {
        let mut f = flat_field();
        f.velocities[0] = Vec3::new(1.0, 0.0, 0.0);
        let series = energy_decay_probe(&mut f, 10).unwrap();
        assert!((series[9] - 0.8_f64.powi(10)).abs() < 1e-14);
        for k in 1..series.len() {
            assert!((series[k] - 0.8 * series[k - 1]).abs() < 1e-14);
        }

        let mut f = VelocityField::new(Vec3::zeros(), 0.25, [4, 4, 1], 1.0);
        f.velocities[3] = Vec3::new(0.5, 0.5, 0.0);
        let series = energy_decay_probe(&mut f, 5).unwrap();
        assert!(series.iter().all(|&x| (x - series[0]).abs() < 1e-15));

        let mut f = VelocityField::new(Vec3::zeros(), 0.25, [4, 4, 1], 0.0);
        f.velocities[3] = Vec3::new(0.5, 0.5, 0.0);
        let series = energy_decay_probe(&mut f, 2).unwrap();
        assert_eq!(series, vec![0.0, 0.0]);
    }
}
