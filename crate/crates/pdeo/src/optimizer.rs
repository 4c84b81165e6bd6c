//! Training loop: per-attribute base updates, the particle/grid position
//! pipeline, and velocity-guided densification.

use crate::config::{BaseOptimizer, CosineMode, Mode, TrainConfig};
use crate::core::{init_scene, RawGaussian, Rotation, Scene};
use crate::error::{Error, Result};
use crate::field::{g2p_blend, VelocityField};
use crate::io::{floats_to_vec3, read_tagged_floats, write_f_line, write_vec3_line};
use crate::losses::{confidence_loss, photometric_l2, scale_loss, LossReport};
use crate::splat::{backward_image, render_image, GradientSet, RenderOptions};
use crate::synth::TargetSet;
use crate::{Vec3, F};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::time::Instant;

const ADAM_B1: F = 0.9;
const ADAM_B2: F = 0.999;
const ADAM_EPS: F = 1e-8;
const SPLIT_SCALE_DIVISOR: F = 1.6;
const DEPTH_KEY_JITTER: F = 1e-6;

/// Mutable optimizer state carried across iterations. Moment arrays stay in
/// lockstep with the Gaussian list through clone/split/prune.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub base: BaseOptimizer,
    /// Shared adaptive-moment step counter (bias correction).
    pub step: u64,
    /// First moments per attribute.
    pub m: GradientSet,
    /// Second moments per attribute.
    pub v: GradientSet,
    /// Running positional-gradient-norm sums and observation counts, the
    /// densification statistic. Reset after every densify event.
    pub grad_sum: Vec<F>,
    pub grad_count: Vec<u32>,
    pub field: VelocityField,
}

impl OptimizerState {
    pub fn new(n: usize, cfg: &TrainConfig, bbox: &crate::core::Aabb) -> OptimizerState {
        OptimizerState {
            base: cfg.base_optimizer,
            step: 0,
            m: GradientSet::zeros(n),
            v: GradientSet::zeros(n),
            grad_sum: vec![0.0; n],
            grad_count: vec![0; n],
            field: VelocityField::covering(bbox, cfg.grid_cells_per_axis, cfg.lambda_g),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuild all per-Gaussian arrays: entries with `keep[i]` survive in
    /// order, then `added` zero-initialized entries are appended. The field
    /// is untouched.
    pub fn rebuild(&mut self, keep: &[bool], added: usize) {
        fn filter<T: Clone + Default>(v: &[T], keep: &[bool], added: usize) -> Vec<T> {
            let mut out: Vec<T> = v
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(x, _)| x.clone())
                .collect();
            out.resize(out.len() + added, T::default());
            out
        }
        for set in [&mut self.m, &mut self.v] {
            set.d_mu = filter(&set.d_mu, keep, added);
            set.d_color = filter(&set.d_color, keep, added);
            set.d_opacity = filter(&set.d_opacity, keep, added);
            set.d_scale = filter(&set.d_scale, keep, added);
            set.d_rot = filter(&set.d_rot, keep, added);
        }
        self.grad_sum = filter(&self.grad_sum, keep, added);
        self.grad_count = filter(&self.grad_count, keep, added);
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_sum.iter_mut().for_each(|x| *x = 0.0);
        self.grad_count.iter_mut().for_each(|x| *x = 0);
    }

    /// Bit-exact text serialization (appended to the checkpoint).
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "optimizer {} {}",
            match self.base {
                BaseOptimizer::PlainSgd => "plain_sgd",
                BaseOptimizer::AdaptiveMoment => "adaptive_moment",
            },
            self.step
        )?;
        for (tag, set) in [("m", &self.m), ("v", &self.v)] {
            write_vec3_line(w, &format!("{tag}_mu"), &set.d_mu)?;
            write_vec3_line(w, &format!("{tag}_color"), &set.d_color)?;
            write_f_line(w, &format!("{tag}_opacity"), &set.d_opacity)?;
            write_vec3_line(w, &format!("{tag}_scale"), &set.d_scale)?;
            write_f_line(w, &format!("{tag}_rot"), &set.d_rot)?;
        }
        write_f_line(w, "grad_sum", &self.grad_sum)?;
        write!(w, "grad_count")?;
        for c in &self.grad_count {
            write!(w, " {c}")?;
        }
        writeln!(w)?;
        write_vec3_line(w, "field_origin", &[self.field.origin])?;
        write_f_line(w, "field_cell", &[self.field.cell_size])?;
        writeln!(
            w,
            "field_dims {} {} {}",
            self.field.dims[0], self.field.dims[1], self.field.dims[2]
        )?;
        write_f_line(w, "field_lambda", &[self.field.lambda_g])?;
        write_vec3_line(w, "field_v", &self.field.velocities)?;
        Ok(())
    }

    pub fn read_text(lines: &mut std::str::Lines) -> Result<OptimizerState> {
        let bad = |m: &str| Error::Usage(format!("checkpoint: {m}"));
        let mut next = |tag: &str| -> Result<String> {
            lines
                .next()
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("missing `{tag}` line")))
        };
        let head = next("optimizer")?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        if toks.len() != 3 || toks[0] != "optimizer" {
            return Err(bad("bad optimizer line"));
        }
        let base = match toks[1] {
            "plain_sgd" => BaseOptimizer::PlainSgd,
            "adaptive_moment" => BaseOptimizer::AdaptiveMoment,
            _ => return Err(bad("unknown optimizer")),
        };
        let step: u64 = toks[2].parse().map_err(|_| bad("bad step counter"))?;

        let read_set =
            |tag: &str, next: &mut dyn FnMut(&str) -> Result<String>| -> Result<GradientSet> {
                let d_mu = floats_to_vec3(read_tagged_floats(&next(tag)?, &format!("{tag}_mu"))?)?;
                let d_color =
                    floats_to_vec3(read_tagged_floats(&next(tag)?, &format!("{tag}_color"))?)?;
                let d_opacity = read_tagged_floats(&next(tag)?, &format!("{tag}_opacity"))?;
                let d_scale =
                    floats_to_vec3(read_tagged_floats(&next(tag)?, &format!("{tag}_scale"))?)?;
                let d_rot = read_tagged_floats(&next(tag)?, &format!("{tag}_rot"))?;
                Ok(GradientSet {
                    d_mu,
                    d_color,
                    d_opacity,
                    d_scale,
                    d_rot,
                })
            };
        let m = read_set("m", &mut next)?;
        let v = read_set("v", &mut next)?;
        let grad_sum = read_tagged_floats(&next("grad_sum")?, "grad_sum")?;
        let count_line = next("grad_count")?;
        let grad_count: Vec<u32> = count_line
            .strip_prefix("grad_count")
            .ok_or_else(|| bad("expected grad_count"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad grad_count entry")))
            .collect::<Result<_>>()?;
        let origin = floats_to_vec3(read_tagged_floats(&next("field_origin")?, "field_origin")?)?;
        let cell = read_tagged_floats(&next("field_cell")?, "field_cell")?;
        let dims_line = next("field_dims")?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("field_dims")
            .ok_or_else(|| bad("expected field_dims"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad field dims")))
            .collect::<Result<_>>()?;
        let lambda = read_tagged_floats(&next("field_lambda")?, "field_lambda")?;
        let velocities = floats_to_vec3(read_tagged_floats(&next("field_v")?, "field_v")?)?;
        if origin.len() != 1 || cell.len() != 1 || dims.len() != 3 || lambda.len() != 1 {
            return Err(bad("bad field header arity"));
        }
        if velocities.len() != dims[0] * dims[1] * dims[2] {
            return Err(bad("field velocity count does not match dims"));
        }
        Ok(OptimizerState {
            base,
            step,
            m,
            v,
            grad_sum,
            grad_count,
            field: VelocityField {
                origin: origin[0],
                cell_size: cell[0],
                dims: [dims[0], dims[1], dims[2]],
                velocities,
                lambda_g: lambda[0],
            },
        })
    }
}

/// Per-attribute learning rates for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepRates {
    pub position: F,
    pub color: F,
    pub opacity: F,
    pub scale: F,
    pub rotation: F,
}

impl StepRates {
    pub fn at(cfg: &TrainConfig, iter: u64) -> StepRates {
        let position = match cfg.lr_position_final {
            Some(lrf) if cfg.iterations > 1 => {
                let t = iter as F / (cfg.iterations - 1) as F;
                cfg.lr_position * (lrf / cfg.lr_position).powf(t)
            }
            _ => cfg.lr_position,
        };
        StepRates {
            position,
            color: cfg.lr_color,
            opacity: cfg.lr_opacity,
            scale: cfg.lr_scale,
            rotation: cfg.lr_rotation,
        }
    }
}

#[inline]
fn adam_scalar(m: &mut F, v: &mut F, g: F, lr: F, t: u64) -> F {
    *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
    *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
    let mh = *m / (1.0 - ADAM_B1.powi(t as i32));
    let vh = *v / (1.0 - ADAM_B2.powi(t as i32));
    -lr * mh / (vh.sqrt() + ADAM_EPS)
}

/// Raw per-attribute updates Δγ from the gradients: descent steps, before
/// any field blending. Returned in a [`GradientSet`] reused as a delta bundle.
pub fn base_step(
    state: &mut OptimizerState,
    grads: &GradientSet,
    rates: &StepRates,
) -> Result<GradientSet> {
    if let Some((index, attribute)) = grads.find_non_finite() {
        return Err(Error::PoisonedStep { index, attribute });
    }
    let n = grads.len();
    let mut upd = GradientSet::zeros(n);
    match state.base {
        BaseOptimizer::PlainSgd => {
            for i in 0..n {
                upd.d_mu[i] = -grads.d_mu[i] * rates.position;
                upd.d_color[i] = -grads.d_color[i] * rates.color;
                upd.d_opacity[i] = -grads.d_opacity[i] * rates.opacity;
                upd.d_scale[i] = -grads.d_scale[i] * rates.scale;
                upd.d_rot[i] = -grads.d_rot[i] * rates.rotation;
            }
        }
        BaseOptimizer::AdaptiveMoment => {
            state.step += 1;
            let t = state.step;
            for i in 0..n {
                for a in 0..3 {
                    upd.d_mu[i][a] = adam_scalar(
                        &mut state.m.d_mu[i][a],
                        &mut state.v.d_mu[i][a],
                        grads.d_mu[i][a],
                        rates.position,
                        t,
                    );
                    upd.d_color[i][a] = adam_scalar(
                        &mut state.m.d_color[i][a],
                        &mut state.v.d_color[i][a],
                        grads.d_color[i][a],
                        rates.color,
                        t,
                    );
                    upd.d_scale[i][a] = adam_scalar(
                        &mut state.m.d_scale[i][a],
                        &mut state.v.d_scale[i][a],
                        grads.d_scale[i][a],
                        rates.scale,
                        t,
                    );
                }
                upd.d_opacity[i] = adam_scalar(
                    &mut state.m.d_opacity[i],
                    &mut state.v.d_opacity[i],
                    grads.d_opacity[i],
                    rates.opacity,
                    t,
                );
                upd.d_rot[i] = adam_scalar(
                    &mut state.m.d_rot[i],
                    &mut state.v.d_rot[i],
                    grads.d_rot[i],
                    rates.rotation,
                    t,
                );
            }
        }
    }
    Ok(upd)
}

/// The position pipeline: deposit the raw updates into the field, then blend
/// each particle's update with its voxel velocity. With λ_p = λ_g = 1 the
/// result is the raw update and the field stays frozen.
pub fn pdeo_position_step(
    field: &mut VelocityField,
    positions: &[Vec3],
    raw_updates: &[Vec3],
    lambda_p: F,
) -> Result<Vec<Vec3>> {
    field.p2g_update(positions, raw_updates)?;
    Ok(positions
        .iter()
        .zip(raw_updates)
        .map(|(p, u)| g2p_blend(u, &field.velocity_at(p), lambda_p))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensifyAction {
    None,
    Clone,
    Split,
}

/// Candidate test: running gradient-norm average above the threshold, or the
/// particle update disagreeing with the voxel velocity by more than θ_p.
/// Degenerate (near-zero) vectors make the cosine criterion inert. Candidates
/// smaller than the median scale clone; larger ones split.
pub fn densify_decide(
    avg_grad_norm: F,
    dmu: &Vec3,
    v_n: &Vec3,
    s_star: F,
    median_scale: F,
    cfg: &TrainConfig,
) -> DensifyAction {
    let mut candidate = cfg.use_grad_densify && avg_grad_norm > cfg.grad_threshold;
    if !candidate && cfg.use_cosine_densify {
        let (nd, nv) = (dmu.norm(), v_n.norm());
        if nd > 1e-12 && nv > 1e-12 {
            let cos = dmu.dot(v_n) / (nd * nv);
            let threshold = cfg.theta_p.to_radians().cos();
            candidate = match cfg.densify_cosine_mode {
                CosineMode::Disagree => cos < threshold,
                CosineMode::Agree => cos > threshold,
            };
        }
    }
    if !candidate {
        DensifyAction::None
    } else if s_star < median_scale {
        DensifyAction::Clone
    } else {
        DensifyAction::Split
    }
}

/// Clone: exact copy offset along the applied update.
pub fn clone_gaussian(g: &RawGaussian, dmu: &Vec3) -> RawGaussian {
    let mut child = g.clone();
    child.mu += dmu;
    child.depth_key += DEPTH_KEY_JITTER;
    child
}

/// Split: two children sampled from the parent's density with scale reduced
/// by the 1.6 convention; the caller removes the parent.
pub fn split_gaussian(
    g: &RawGaussian,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<[RawGaussian; 2]> {
    let dim = mode.dim();
    let s = g.scale_activated(mode)?;
    let r = g.rot.matrix3();
    let shrink = SPLIT_SCALE_DIVISOR.ln();
    let mut make = |jitter: F| -> RawGaussian {
        let mut local = Vec3::zeros();
        for a in 0..dim {
            let z: F = StandardNormal.sample(rng);
            local[a] = z * s[a];
        }
        let mut child = g.clone();
        child.mu = g.mu + r * local;
        for a in 0..dim {
            child.log_scale[a] -= shrink;
        }
        child.depth_key += jitter;
        child
    };
    Ok([make(0.0), make(DEPTH_KEY_JITTER)])
}

/// One densify/prune event. Returns (clones, splits, pruned).
pub fn densify_and_prune(
    scene: &mut Scene,
    state: &mut OptimizerState,
    applied_dmu: &[Vec3],
    raw_dmu: &[Vec3],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize)> {
    let n = scene.len();
    if n == 0 {
        return Ok((0, 0, 0));
    }
    let mut scales = Vec::with_capacity(n);
    for g in &scene.gaussians {
        scales.push(g.max_scale(scene.mode)?);
    }
    let median_scale = median(&mut scales.clone());
    let extent = scene.bbox.diagonal().max(1e-12);

    let mut keep = vec![true; n];
    let mut children: Vec<RawGaussian> = Vec::new();
    let mut budget = cfg.max_gaussians.saturating_sub(n);
    let mut clones = 0;
    let mut splits = 0;
    for i in 0..n {
        if budget == 0 {
            break;
        }
        let avg = if state.grad_count[i] > 0 {
            state.grad_sum[i] / state.grad_count[i] as F
        } else {
            0.0
        };
        let probe = if cfg.densify_preblend {
            &raw_dmu[i]
        } else {
            &applied_dmu[i]
        };
        let v_n = if cfg.pdeo {
            state.field.velocity_at(&scene.gaussians[i].mu)
        } else {
            Vec3::zeros()
        };
        match densify_decide(avg, probe, &v_n, scales[i], median_scale, cfg) {
            DensifyAction::None => {}
            DensifyAction::Clone => {
                children.push(clone_gaussian(&scene.gaussians[i], &applied_dmu[i]));
                clones += 1;
                budget -= 1;
            }
            DensifyAction::Split => {
                let [a, b] = split_gaussian(&scene.gaussians[i], scene.mode, rng)?;
                children.push(a);
                children.push(b);
                keep[i] = false;
                splits += 1;
                budget -= 1;
            }
        }
    }
    // Prune originals with vanishing opacity or runaway extent.
    let mut pruned = 0;
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        let g = &scene.gaussians[i];
        if g.opacity_activated()? < cfg.prune_opacity || scales[i] > extent {
            keep[i] = false;
            pruned += 1;
        }
    }
    let mut retained: Vec<RawGaussian> = scene
        .gaussians
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(g, _)| g.clone())
        .collect();
    let added = children.len();
    retained.append(&mut children);
    scene.gaussians = retained;
    state.rebuild(&keep, added);
    state.reset_grad_stats();
    Ok((clones, splits, pruned))
}

fn median(values: &mut [F]) -> F {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-iteration training metrics. `med_step` is the median applied position
/// displacement within each activated-scale quartile (q0 = smallest scales).
#[derive(Debug, Clone, PartialEq)]
pub struct IterMetrics {
    pub iteration: u64,
    pub loss: LossReport,
    pub psnr: F,
    pub ssim: F,
    pub psnr_holdout: Option<F>,
    pub count: usize,
    pub med_step: [F; 4],
    pub wall_ms: F,
}

fn step_quartiles(scales: &[F], dmu: &[Vec3]) -> [F; 4] {
    let n = scales.len();
    let mut out = [0.0; 4];
    if n == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scales[a].partial_cmp(&scales[b]).unwrap().then(a.cmp(&b)));
    let mut buckets: [Vec<F>; 4] = Default::default();
    for (rank, &i) in order.iter().enumerate() {
        let q = (rank * 4 / n).min(3);
        buckets[q].push(dmu[i].norm());
    }
    for (q, b) in buckets.iter_mut().enumerate() {
        out[q] = median(b);
    }
    out
}

pub struct TrainOutput {
    pub scene: Scene,
    pub state: OptimizerState,
    pub metrics: Vec<IterMetrics>,
}

/// The full loop: render, losses, analytic backward, base step, position
/// blending, periodic densify/prune. Deterministic under a fixed seed.
pub fn train(cfg: &TrainConfig, targets: &TargetSet) -> Result<TrainOutput> {
    train_with_snapshots(cfg, targets, &[]).map(|(out, _)| out)
}

/// As [`train`], additionally capturing the forward render at the listed
/// iterations (pre-update, current round-robin view).
pub fn train_with_snapshots(
    cfg: &TrainConfig,
    targets: &TargetSet,
    snapshot_iters: &[u64],
) -> Result<(TrainOutput, Vec<(u64, crate::splat::Image)>)> {
    cfg.validate()?;
    if targets.views.is_empty() {
        return Err(Error::InvalidConfig("no training views".into()));
    }
    let mut scene = init_scene(cfg, cfg.seed)?;
    let mut state = OptimizerState::new(scene.len(), cfg, &scene.bbox);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x64656e73));
    let opts = RenderOptions {
        cull: true,
        background: if cfg.white_background {
            Vec3::new(1.0, 1.0, 1.0)
        } else {
            Vec3::zeros()
        },
    };
    let mut metrics = Vec::with_capacity(cfg.iterations as usize);
    let mut snapshots = Vec::new();
    for iter in 0..cfg.iterations {
        let t0 = Instant::now();
        let vi = (iter as usize) % targets.views.len();
        let view = &targets.views[vi];
        let target = &targets.targets[vi];

        let out = render_image(&scene, view, &opts)?;
        if snapshot_iters.contains(&iter) {
            snapshots.push((iter, out.image.clone()));
        }
        let (photometric, residual) = photometric_l2(&out.image, target)?;
        let (scale_term, d_scale_extra) = scale_loss(&scene, &out.visible, cfg.beta)?;
        let (confidence_term, d_op_extra) = confidence_loss(&scene, &out.visible)?;
        let report = LossReport::new(
            photometric,
            scale_term,
            confidence_term,
            cfg.omega_s,
            cfg.omega_t,
        );
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }

        let mut grads = backward_image(&scene, view, &residual, &opts)?;
        for i in 0..scene.len() {
            grads.d_scale[i] += d_scale_extra[i] * cfg.omega_s;
            grads.d_opacity[i] += d_op_extra[i] * cfg.omega_t;
        }
        for i in 0..scene.len() {
            if out.visible[i] {
                state.grad_sum[i] += grads.d_mu[i].norm();
                state.grad_count[i] += 1;
            }
        }

        let rates = StepRates::at(cfg, iter);
        let upd = base_step(&mut state, &grads, &rates)?;
        let positions: Vec<Vec3> = scene.gaussians.iter().map(|g| g.mu).collect();
        let applied_dmu = if cfg.pdeo {
            pdeo_position_step(&mut state.field, &positions, &upd.d_mu, cfg.lambda_p)?
        } else {
            upd.d_mu.clone()
        };
        let mut scales = Vec::with_capacity(scene.len());
        for g in &scene.gaussians {
            scales.push(g.max_scale(scene.mode)?);
        }
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.mu += applied_dmu[i];
            g.color += upd.d_color[i];
            g.opacity += upd.d_opacity[i];
            g.log_scale += upd.d_scale[i];
            if let Rotation::Angle(a) = g.rot {
                g.rot = Rotation::Angle(a + upd.d_rot[i]);
            }
        }

        if iter >= cfg.densify_start
            && iter < cfg.densify_stop
            && (iter - cfg.densify_start).is_multiple_of(cfg.densify_interval)
        {
            densify_and_prune(
                &mut scene,
                &mut state,
                &applied_dmu,
                &upd.d_mu,
                cfg,
                &mut rng,
            )?;
        }

        let psnr = crate::metrics::psnr(&out.image, target)?;
        let ssim = crate::metrics::ssim(&out.image, target)?;
        let psnr_holdout = match &targets.holdout {
            Some((hview, himg)) => {
                let hout = render_image(&scene, hview, &opts)?;
                Some(crate::metrics::psnr(&hout.image, himg)?)
            }
            None => None,
        };
        let wall_ms = if cfg.deterministic {
            0.0
        } else {
            t0.elapsed().as_secs_f64() * 1e3
        };
        metrics.push(IterMetrics {
            iteration: iter,
            loss: report,
            psnr,
            ssim,
            psnr_holdout,
            count: scene.len(),
            med_step: step_quartiles(&scales, &applied_dmu),
            wall_ms,
        });
    }
    Ok((
        TrainOutput {
            scene,
            state,
            metrics,
        },
        snapshots,
    ))
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::core::Aabb;
    use crate::synth::build_targets;

    fn sgd_state(n: usize) -> OptimizerState {
        let mut cfg = TrainConfig::default();
        cfg.base_optimizer = BaseOptimizer::PlainSgd;
        OptimizerState::new(n, &cfg, &Aabb::unit2d())
    }

    fn rates(lr: F) -> StepRates {
        StepRates {
            position: lr,
            color: lr,
            opacity: lr,
            scale: lr,
            rotation: lr,
        }
    }

    #[test]
    fn sgd_examples() {
        let mut state = sgd_state(1);
        let grads = GradientSet::zeros(1);
        let upd = base_step(&mut state, &grads, &rates(0.01)).unwrap();
        assert_eq!(upd.d_mu[0], Vec3::zeros());
        assert_eq!(upd.d_opacity[0], 0.0);

        let mut grads = GradientSet::zeros(1);
        grads.d_opacity[0] = 2.0;
        let upd = base_step(&mut state, &grads, &rates(0.01)).unwrap();
        assert!((upd.d_opacity[0] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn poisoned_gradient_names_attribute() {
        let mut state = sgd_state(2);
        let mut grads = GradientSet::zeros(2);
        grads.d_scale[1].y = F::NAN;
        match base_step(&mut state, &grads, &rates(0.01)) {
            Err(Error::PoisonedStep { index, attribute }) => {
                assert_eq!(index, 1);
                assert_eq!(attribute, "scale");
            }
            other => panic!("expected poisoned step, got {other:?}"),
        }
    }

    #[test]
    fn adaptive_moment_first_step_magnitude_is_lr() {
        // Bias-corrected step 1: mh = g, vh = g², so Δ ≈ −lr·sign(g).
        let mut cfg = TrainConfig::default();
        cfg.base_optimizer = BaseOptimizer::AdaptiveMoment;
        let state = OptimizerState::new(1, &cfg, &Aabb::unit2d());
        for g in [1e-6, 1.0, 1e4] {
            let mut st = state.clone();
            let mut grads = GradientSet::zeros(1);
            grads.d_opacity[0] = g;
            let upd = base_step(&mut st, &grads, &rates(0.01)).unwrap();
            assert!(
                (upd.d_opacity[0] + 0.01).abs() < 1e-4,
                "g={g} step={}",
                upd.d_opacity[0]
            );
        }
    }

    #[test]
    fn pdeo_single_particle_example() {
        // Zero prior field, λ_g = λ_p = 0.8, Δμ = (1,0,0):
        // field picks up 0.2·Δμ, blend gives 0.8 + 0.2·0.2 = 0.84.
        let mut field = VelocityField::new(Vec3::zeros(), 0.25, [4, 4, 1], 0.8);
        let positions = vec![Vec3::new(0.1, 0.1, 0.0)];
        let raw = vec![Vec3::new(1.0, 0.0, 0.0)];
        let applied = pdeo_position_step(&mut field, &positions, &raw, 0.8).unwrap();
        assert!((applied[0].x - 0.84).abs() < 1e-15, "{}", applied[0].x);
        assert!((field.velocity_at(&positions[0]).x - 0.2).abs() < 1e-15);
    }

    #[test]
    fn pdeo_disabled_limit_passthrough() {
        let mut field = VelocityField::new(Vec3::zeros(), 0.25, [4, 4, 1], 1.0);
        let positions = vec![Vec3::new(0.1, 0.1, 0.0), Vec3::new(0.6, 0.7, 0.0)];
        let raw = vec![Vec3::new(0.3, -0.2, 0.0), Vec3::new(-0.1, 0.05, 0.0)];
        let applied = pdeo_position_step(&mut field, &positions, &raw, 1.0).unwrap();
        assert_eq!(applied, raw);
        assert_eq!(field.max_norm(), 0.0);
    }

    #[test]
    fn densify_decide_examples() {
        let cfg = TrainConfig::default();
        let u = Vec3::new(1.0, 0.0, 0.0);
        // Parallel vectors, tiny gradient: no action.
        assert_eq!(
            densify_decide(0.0, &u, &u, 0.1, 0.2, &cfg),
            DensifyAction::None
        );
        // Antiparallel (180° > 120°): candidate; small scale clones.
        assert_eq!(
            densify_decide(0.0, &u, &(-u), 0.1, 0.2, &cfg),
            DensifyAction::Clone
        );
        // Antiparallel with large scale splits.
        assert_eq!(
            densify_decide(0.0, &u, &(-u), 0.5, 0.2, &cfg),
            DensifyAction::Split
        );
        // Zero voxel velocity: cosine inert, gradient trigger decides.
        assert_eq!(
            densify_decide(0.0, &u, &Vec3::zeros(), 0.1, 0.2, &cfg),
            DensifyAction::None
        );
        assert_eq!(
            densify_decide(1.0, &u, &Vec3::zeros(), 0.1, 0.2, &cfg),
            DensifyAction::Clone
        );
    }

    #[test]
    fn split_children_scale_exact() {
        let g = RawGaussian {
            mu: Vec3::new(0.5, 0.5, 0.0),
            color: Vec3::zeros(),
            opacity: 0.0,
            log_scale: Vec3::new(-1.0, -1.5, 0.0),
            rot: Rotation::Angle(0.3),
            depth_key: 0.25,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let [a, b] = split_gaussian(&g, Mode::Image2d, &mut rng).unwrap();
        for child in [&a, &b] {
            let ps = g.scale_activated(Mode::Image2d).unwrap();
            let cs = child.scale_activated(Mode::Image2d).unwrap();
            for d in 0..2 {
                assert!((cs[d] - ps[d] / 1.6).abs() < 1e-12 * ps[d]);
            }
            assert_eq!(child.log_scale.z, 0.0);
            assert_eq!(child.mu.z, 0.0);
        }
        assert_eq!(a.depth_key, g.depth_key);
        assert!((b.depth_key - g.depth_key - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn prune_examples() {
        let mut cfg = TrainConfig::default();
        cfg.count = 3;
        cfg.use_grad_densify = false;
        cfg.use_cosine_densify = false;
        let mut scene = init_scene(&cfg, 1).unwrap();
        // Drive one opacity to ~1e-4.
        scene.gaussians[1].opacity = crate::core::logit(1e-4);
        let mut state = OptimizerState::new(3, &cfg, &scene.bbox);
        let dmu = vec![Vec3::zeros(); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, s, p) =
            densify_and_prune(&mut scene, &mut state, &dmu, &dmu, &cfg, &mut rng).unwrap();
        assert_eq!((c, s, p), (0, 0, 1));
        assert_eq!(scene.len(), 2);
        assert_eq!(state.len(), 2);
    }

    #[test]
    fn densify_respects_cap() {
        let mut cfg = TrainConfig::default();
        cfg.count = 4;
        cfg.max_gaussians = 5;
        cfg.grad_threshold = 0.0;
        let mut scene = init_scene(&cfg, 2).unwrap();
        let mut state = OptimizerState::new(4, &cfg, &scene.bbox);
        // Every Gaussian has a huge grad stat: all are candidates.
        state.grad_sum.iter_mut().for_each(|x| *x = 1.0);
        state.grad_count.iter_mut().for_each(|x| *x = 1);
        let dmu = vec![Vec3::new(1e-3, 0.0, 0.0); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        densify_and_prune(&mut scene, &mut state, &dmu, &dmu, &cfg, &mut rng).unwrap();
        assert!(scene.len() <= cfg.max_gaussians + 1, "{}", scene.len());
        assert_eq!(scene.len(), state.len());
    }

    #[test]
    fn train_zero_iterations() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 0;
        cfg.count = 4;
        cfg.image_width = 16;
        cfg.image_height = 16;
        let targets = build_targets(&cfg).unwrap();
        let out = train(&cfg, &targets).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.scene, init_scene(&cfg, cfg.seed).unwrap());
    }

    #[test]
    fn train_deterministic() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 12;
        cfg.count = 8;
        cfg.image_width = 16;
        cfg.image_height = 16;
        cfg.densify_start = 4;
        cfg.densify_stop = 10;
        let targets = build_targets(&cfg).unwrap();
        let a = train(&cfg, &targets).unwrap();
        let b = train(&cfg, &targets).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.loss.total, y.loss.total);
            assert_eq!(x.psnr, y.psnr);
            assert_eq!(x.med_step, y.med_step);
        }
    }

    #[test]
    fn disabled_limit_matches_baseline_short() {
        let mut base = TrainConfig::default();
        base.iterations = 25;
        base.count = 8;
        base.image_width = 16;
        base.image_height = 16;
        base.densify_start = 5;
        base.densify_stop = 20;
        base.pdeo = false;
        let mut unity = base.clone();
        unity.pdeo = true;
        unity.lambda_g = 1.0;
        unity.lambda_p = 1.0;
        let targets = build_targets(&base).unwrap();
        let a = train(&base, &targets).unwrap();
        let b = train(&unity, &targets).unwrap();
        assert_eq!(a.scene.checksum(), b.scene.checksum());
    }

    #[test]
    fn nonposition_attributes_ignore_field() {
        // Same run with a poisoned field must differ only in positions on the
        // first step; color/opacity/scale updates are field-independent.
        let mut cfg = TrainConfig::default();
        cfg.iterations = 1;
        cfg.count = 6;
        cfg.image_width = 16;
        cfg.image_height = 16;
        cfg.densify_start = 0;
        cfg.densify_stop = 1;
        cfg.densify_interval = 1000;
        cfg.lambda_p = 0.5;
        let targets = build_targets(&cfg).unwrap();
        let mut on = cfg.clone();
        on.pdeo = true;
        let mut off = cfg.clone();
        off.pdeo = false;
        let a = train(&on, &targets).unwrap();
        let b = train(&off, &targets).unwrap();
        for (ga, gb) in a.scene.gaussians.iter().zip(&b.scene.gaussians) {
            assert_eq!(ga.color, gb.color);
            assert_eq!(ga.opacity, gb.opacity);
            assert_eq!(ga.log_scale, gb.log_scale);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 8;
        cfg.count = 6;
        cfg.image_width = 16;
        cfg.image_height = 16;
        cfg.densify_start = 2;
        cfg.densify_stop = 6;
        let targets = build_targets(&cfg).unwrap();
        let out = train(&cfg, &targets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        crate::io::save_checkpoint(&path, &out.scene, &out.state).unwrap();
        let (scene, state) = crate::io::load_checkpoint(&path).unwrap();
        assert_eq!(scene, out.scene);
        assert_eq!(state.step, out.state.step);
        assert_eq!(state.field, out.state.field);
        assert_eq!(state.m.d_mu, out.state.m.d_mu);
        assert_eq!(state.v.d_scale, out.state.v.d_scale);
        assert_eq!(state.grad_sum, out.state.grad_sum);
        assert_eq!(state.grad_count, out.state.grad_count);
    }
}
