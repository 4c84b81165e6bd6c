//! Command implementations behind the binary: fitting runs, the gradient
//! check, probes, and the ablation grid. Each run writes a self-contained
//! directory reproducible from `config.resolved` alone.

use crate::analysis::{
    default_scaling_probe, energy_decay_probe, run_gradcheck, viscous_reference_update,
};
use crate::config::{Mode, TrainConfig};
use crate::core::Scene;
use crate::error::{Error, Result};
use crate::field::{impact_trace, VelocityField};
use crate::io::{fmt_sig9, save_checkpoint, write_ppm};
use crate::optimizer::{pdeo_position_step, train_with_snapshots, IterMetrics, TrainOutput};
use crate::splat::{render_image, RenderOptions};
use crate::synth::{build_targets, TargetSet};
use crate::{Vec3, F};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// metrics.csv with a fixed column order. The `psnr_holdout` column appears
/// only when a held-out view was evaluated.
pub fn metrics_csv(metrics: &[IterMetrics]) -> String {
    let holdout = metrics.first().is_some_and(|m| m.psnr_holdout.is_some());
    let mut s = String::new();
    s.push_str("iteration,loss_total,loss_photometric,loss_scale,loss_confidence,psnr,ssim");
    if holdout {
        s.push_str(",psnr_holdout");
    }
    s.push_str(",gaussian_count,med_step_q1,med_step_q2,med_step_q3,med_step_q4,wall_ms\n");
    for m in metrics {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            m.iteration,
            fmt_sig9(m.loss.total),
            fmt_sig9(m.loss.photometric),
            fmt_sig9(m.loss.scale_term),
            fmt_sig9(m.loss.confidence_term),
            fmt_sig9(m.psnr),
            fmt_sig9(m.ssim),
        );
        if holdout {
            let _ = write!(s, ",{}", fmt_sig9(m.psnr_holdout.unwrap_or(0.0)));
        }
        let _ = writeln!(
            s,
            ",{},{},{},{},{},{}",
            m.count,
            fmt_sig9(m.med_step[0]),
            fmt_sig9(m.med_step[1]),
            fmt_sig9(m.med_step[2]),
            fmt_sig9(m.med_step[3]),
            fmt_sig9(m.wall_ms),
        );
    }
    s
}

fn render_opts(cfg: &TrainConfig) -> RenderOptions {
    RenderOptions {
        cull: true,
        background: if cfg.white_background {
            Vec3::new(1.0, 1.0, 1.0)
        } else {
            Vec3::zeros()
        },
    }
}

/// Mean PSNR/SSIM of the final scene over all training views.
pub fn evaluate(scene: &Scene, targets: &TargetSet, cfg: &TrainConfig) -> Result<(F, F)> {
    let opts = render_opts(cfg);
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for (view, target) in targets.views.iter().zip(&targets.targets) {
        let out = render_image(scene, view, &opts)?;
        psnr += crate::metrics::psnr(&out.image, target)?;
        ssim += crate::metrics::ssim(&out.image, target)?;
    }
    let n = targets.views.len() as F;
    Ok((psnr / n, ssim / n))
}

/// Shared fit harness: trains and writes the run directory.
pub fn run_fit(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.resolved"), cfg.resolved())?;
    let targets = build_targets(cfg)?;
    // Intermediate renders every 500 iterations alongside the checkpoint.
    let snaps: Vec<u64> = (0..cfg.iterations)
        .filter(|i| i % 500 == 0 && *i > 0)
        .collect();
    let (out, snapshots) = train_with_snapshots(cfg, &targets, &snaps)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
    for (iter, img) in &snapshots {
        write_ppm(&out_dir.join(format!("render_{iter:06}.ppm")), img)?;
    }
    let opts = render_opts(cfg);
    let final_img = render_image(&out.scene, &targets.views[0], &opts)?.image;
    write_ppm(&out_dir.join("final.ppm"), &final_img)?;
    write_ppm(&out_dir.join("target.ppm"), &targets.targets[0])?;
    save_checkpoint(&out_dir.join("checkpoint.txt"), &out.scene, &out.state)?;
    Ok(out)
}

pub fn run_fit2d(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    if cfg.mode != Mode::Image2d {
        return Err(Error::InvalidConfig("fit2d requires mode = image2d".into()));
    }
    run_fit(cfg, out_dir)
}

pub fn run_fit3d(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    if cfg.mode != Mode::Ortho3d {
        return Err(Error::InvalidConfig("fit3d requires mode = ortho3d".into()));
    }
    run_fit(cfg, out_dir)
}

/// Gradient and quadrature suites; returns true iff everything passed and
/// prints the worst relative error per attribute.
pub fn run_gradcheck_cmd(cases: usize, seed: u64) -> Result<bool> {
    let tolerance = 1e-4;
    let report = run_gradcheck(cases, seed, tolerance)?;
    println!("gradient suite: {} cases per mode", cases);
    for (name, rel) in &report.max_rel {
        println!("  max rel error [{name}]: {}", fmt_sig9(*rel));
    }
    for f in &report.failures {
        println!("  FAIL {f}");
    }
    let quad_worst = quadrature_suite(seed, 100)?;
    println!("quadrature suite: max rel error {}", fmt_sig9(quad_worst));
    let pass = report.failures.is_empty() && quad_worst < 1e-6;
    println!("gradcheck: {}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

/// Closed-form splat vs dense trapezoid quadrature on random rotated
/// configurations; returns the worst relative error.
pub fn quadrature_suite(seed: u64, cases: usize) -> Result<F> {
    use crate::core::{CameraOrtho, RawGaussian, Rotation};
    use crate::splat::{splat_closed_form, splat_quadrature};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraOrtho::looking(
        Vec3::new(0.5, 0.5, 0.5),
        Vec3::new(1.0, 0.4, -0.3),
        8,
        8,
        1.0 / 8.0,
    )?;
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let rot = {
            // Gram-Schmidt on random vectors.
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
                break crate::Mat3::from_columns(&[e1, e2, e1.cross(&e2)]);
            }
        };
        let g = RawGaussian {
            mu: Vec3::new(
                0.3 + 0.4 * rng.gen::<F>(),
                0.3 + 0.4 * rng.gen::<F>(),
                0.3 + 0.4 * rng.gen::<F>(),
            ),
            color: Vec3::zeros(),
            opacity: 0.0,
            log_scale: Vec3::new(
                -2.2 + 1.2 * rng.gen::<F>(),
                -2.2 + 1.2 * rng.gen::<F>(),
                -2.2 + 1.2 * rng.gen::<F>(),
            ),
            rot: Rotation::Matrix(rot),
            depth_key: 0.0,
        };
        let row = rng.gen_range(0..8);
        let col = rng.gen_range(0..8);
        let cf = splat_closed_form(&g, &cam, row, col)?;
        let q = splat_quadrature(&g, &cam, row, col, 20001)?;
        let rel = (cf - q).abs() / cf.abs().max(q.abs()).max(1e-30);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// `probe <kind>`: writes `probe_<kind>.csv` into the output directory.
pub fn run_probe(kind: &str, out_dir: &Path, lambda_g: F) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::new();
    match kind {
        "scaling" => {
            let report = default_scaling_probe()?;
            csv.push_str("s_hat,g_mu,g_color,g_opacity,g_scale,ratio\n");
            for r in &report.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    fmt_sig9(r.s_hat),
                    fmt_sig9(r.g_mu),
                    fmt_sig9(r.g_color),
                    fmt_sig9(r.g_opacity),
                    fmt_sig9(r.g_scale),
                    fmt_sig9(r.ratio),
                );
            }
            let _ = writeln!(
                csv,
                "slope,{},stderr,{}",
                fmt_sig9(report.slope),
                fmt_sig9(report.slope_stderr)
            );
        }
        "impact" => {
            let series = impact_trace(lambda_g, Vec3::new(1.0, 0.0, 0.0), 20);
            csv.push_str("step,vx,vy,vz\n");
            for (k, v) in series.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{k},{},{},{}",
                    fmt_sig9(v.x),
                    fmt_sig9(v.y),
                    fmt_sig9(v.z)
                );
            }
        }
        "decay" => {
            let mut field = VelocityField::new(Vec3::zeros(), 0.25, [4, 4, 1], lambda_g);
            field.velocities[0] = Vec3::new(1.0, 0.0, 0.0);
            let series = energy_decay_probe(&mut field, 20)?;
            csv.push_str("step,max_norm\n");
            for (k, x) in series.iter().enumerate() {
                let _ = writeln!(csv, "{k},{}", fmt_sig9(*x));
            }
        }
        "fixedpoint" => {
            csv.push_str("set,max_deviation\n");
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for set in 0..10 {
                let positions: Vec<Vec3> = (0..20)
                    .map(|_| Vec3::new(rng.gen(), rng.gen(), 0.0))
                    .collect();
                let updates: Vec<Vec3> = (0..20)
                    .map(|_| Vec3::new(rng.gen::<F>() - 0.5, rng.gen::<F>() - 0.5, 0.0))
                    .collect();
                let mut field =
                    VelocityField::new(Vec3::zeros(), 1.0 / 16.0, [16, 16, 1], lambda_g);
                for _ in 0..400 {
                    field.p2g_update(&positions, &updates)?;
                }
                let stepped = pdeo_position_step(&mut field, &positions, &updates, lambda_g)?;
                let reference = viscous_reference_update(&field, &positions, &updates, lambda_g)?;
                let dev = stepped
                    .iter()
                    .zip(&reference)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, F::max);
                let _ = writeln!(csv, "{set},{}", fmt_sig9(dev));
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown probe kind `{other}`"
            )));
        }
    }
    std::fs::write(out_dir.join(format!("probe_{kind}.csv")), csv)?;
    Ok(())
}

pub const ABLATE_VARIANTS: [&str; 5] = [
    "full",
    "no_p2g_g2p",
    "no_densify_criterion",
    "no_scale_loss",
    "no_confidence_loss",
];

/// Apply one named ablation to a base config.
pub fn ablate_variant(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "no_p2g_g2p" => cfg.pdeo = false,
        "no_densify_criterion" => cfg.use_cosine_densify = false,
        "no_scale_loss" => cfg.omega_s = 0.0,
        "no_confidence_loss" => cfg.omega_t = 0.0,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown ablation variant `{other}`"
            )))
        }
    }
    Ok(cfg)
}

/// Variant grid × seeds; writes `ablate.csv` with one row per run.
pub fn run_ablate(base: &TrainConfig, out_dir: &Path, seeds: &[u64]) -> Result<()> {
    base.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("variant,seed,psnr,ssim,gaussian_count\n");
    for variant in ABLATE_VARIANTS {
        for &seed in seeds {
            let mut cfg = ablate_variant(base, variant)?;
            cfg.seed = seed;
            let targets = build_targets(&cfg)?;
            let (out, _) = train_with_snapshots(&cfg, &targets, &[])?;
            let (psnr, ssim) = evaluate(&out.scene, &targets, &cfg)?;
            let _ = writeln!(
                csv,
                "{variant},{seed},{},{},{}",
                fmt_sig9(psnr),
                fmt_sig9(ssim),
                out.scene.len()
            );
        }
    }
    std::fs::write(out_dir.join("ablate.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 10;
        cfg.count = 6;
        cfg.image_width = 16;
        cfg.image_height = 16;
        cfg.densify_start = 3;
        cfg.densify_stop = 8;
        cfg
    }

    #[test]
    fn fit2d_writes_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        run_fit2d(&cfg, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        // Header plus one row per iteration.
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("iteration,loss_total"));
        assert!(dir.path().join("final.ppm").exists());
        assert!(dir.path().join("config.resolved").exists());
        assert!(dir.path().join("checkpoint.txt").exists());
    }

    #[test]
    fn fit2d_rerun_is_bit_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        run_fit2d(&cfg, d1.path()).unwrap();
        run_fit2d(&cfg, d2.path()).unwrap();
        for name in ["metrics.csv", "final.ppm", "checkpoint.txt"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn fit2d_rejects_3d_config() {
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Ortho3d;
        assert!(matches!(
            run_fit2d(&cfg, Path::new("/nonexistent")),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn fit3d_holdout_adds_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.mode = Mode::Ortho3d;
        cfg.views = 4;
        cfg.holdout = true;
        run_fit3d(&cfg, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.lines().next().unwrap().contains("psnr_holdout"));
    }

    #[test]
    fn probe_impact_first_rows() {
        let dir = tempfile::tempdir().unwrap();
        run_probe("impact", dir.path(), 0.8).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("probe_impact.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert!(rows[1].starts_with("0,2.00000000e-1"));
        assert!(rows[2].starts_with("1,1.60000000e-1"));
        assert!(rows[3].starts_with("2,1.28000000e-1"));
    }

    #[test]
    fn probe_decay_lambda_one_constant() {
        let dir = tempfile::tempdir().unwrap();
        run_probe("decay", dir.path(), 1.0).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("probe_decay.csv")).unwrap();
        let values: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert!(values.iter().all(|&v| v == values[0]));
    }

    #[test]
    fn probe_unknown_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_probe("bogus", dir.path(), 0.8),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn probe_scaling_has_slope_row() {
        let dir = tempfile::tempdir().unwrap();
        run_probe("scaling", dir.path(), 0.8).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("probe_scaling.csv")).unwrap();
        assert!(csv.lines().last().unwrap().starts_with("slope,"));
    }

    #[test]
    fn ablate_grid_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.iterations = 5;
        cfg.densify_start = 1;
        cfg.densify_stop = 4;
        run_ablate(&cfg, dir.path(), &[0, 1]).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("ablate.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 1 + 5 * 2);
        for v in ABLATE_VARIANTS {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{v},"))));
        }
    }
}
