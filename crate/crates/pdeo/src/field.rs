//! Voxel velocity field and the particle/grid transfers.
//!
//! Particles bind to their nearest cell (no multi-cell kernel weights). Each
//! update decays the stored voxel velocity by `λ_g` and deposits the mean of
//! the co-occupants' position updates with weight `1−λ_g`; voxels with no
//! occupants decay toward zero.

use crate::core::Aabb;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::{Vec3, F};

/// Regular voxel grid over the scene storing per-voxel velocity vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub origin: Vec3,
    pub cell_size: F,
    pub dims: [usize; 3],
    pub velocities: Vec<Vec3>,
    /// Decay coefficient in [0,1].
    pub lambda_g: F,
}

impl VelocityField {
    pub fn new(origin: Vec3, cell_size: F, dims: [usize; 3], lambda_g: F) -> VelocityField {
        assert!(cell_size > 0.0, "cell_size must be positive");
        assert!(dims.iter().all(|&d| d >= 1), "dims must be >= 1 per axis");
        VelocityField {
            origin,
            cell_size,
            dims,
            velocities: vec![Vec3::zeros(); dims[0] * dims[1] * dims[2]],
            lambda_g,
        }
    }

    /// Grid covering `bbox` with `cells` voxels along the longest axis.
    /// Flat (2D) boxes get a single cell along z.
    pub fn covering(bbox: &Aabb, cells: usize, lambda_g: F) -> VelocityField {
        let size = bbox.size();
        let longest = size.x.max(size.y).max(size.z).max(1e-12);
        let cell = longest / cells as F;
        let dim = |extent: F| ((extent / cell).ceil() as usize).max(1);
        VelocityField::new(
            bbox.min,
            cell,
            [dim(size.x), dim(size.y), dim(size.z)],
            lambda_g,
        )
    }

    /// Voxel of a position: floor((pos − origin)/cell) per axis, clamped to
    /// the grid so outside particles bind to the border voxel.
    pub fn voxel_index(&self, pos: &Vec3) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((pos[a] - self.origin[a]) / self.cell_size).floor();
            idx[a] = (f.max(0.0) as usize).min(self.dims[a] - 1);
        }
        idx
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    pub fn velocity_at(&self, pos: &Vec3) -> Vec3 {
        self.velocities[self.linear(self.voxel_index(pos))]
    }

    /// Particle-to-grid transfer: `v' = λ_g v + (1−λ_g)·mean(Δμ)` per voxel,
    /// with the mean taken as zero for unoccupied voxels.
    pub fn p2g_update(&mut self, positions: &[Vec3], updates: &[Vec3]) -> Result<()> {
        if positions.len() != updates.len() {
            return Err(Error::LengthMismatch {
                left: positions.len(),
                right: updates.len(),
            });
        }
        let n = self.velocities.len();
        let mut sums = vec![Vec3::zeros(); n];
        let mut counts = vec![0u32; n];
        for (p, u) in positions.iter().zip(updates) {
            let i = self.linear(self.voxel_index(p));
            sums[i] += u;
            counts[i] += 1;
        }
        let lg = self.lambda_g;
        for i in 0..n {
            let mean = if counts[i] > 0 {
                sums[i] / counts[i] as F
            } else {
                Vec3::zeros()
            };
            self.velocities[i] = self.velocities[i] * lg + mean * (1.0 - lg);
        }
        Ok(())
    }

    pub fn max_norm(&self) -> F {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, F::max)
    }

    /// Text snapshot: one line per nonzero voxel, `ix iy [iz] vx vy [vz]`.
    /// Flat grids (z dim 1) omit the z columns.
    pub fn snapshot(&self) -> String {
        let flat = self.dims[2] == 1;
        let mut out = String::new();
        for iz in 0..self.dims[2] {
            for iy in 0..self.dims[1] {
                for ix in 0..self.dims[0] {
                    let v = self.velocities[self.linear([ix, iy, iz])];
                    if v == Vec3::zeros() {
                        continue;
                    }
                    if flat {
                        out.push_str(&format!("{ix} {iy} {} {}\n", fmt(v.x), fmt(v.y)));
                    } else {
                        out.push_str(&format!(
                            "{ix} {iy} {iz} {} {} {}\n",
                            fmt(v.x),
                            fmt(v.y),
                            fmt(v.z)
                        ));
                    }
                }
            }
        }
        out
    }
}

fn fmt(x: F) -> String {
    crate::io::fmt_sig9(x)
}

/// Grid-to-particle blend: `Δμ̂ = λ_p·Δμ + (1−λ_p)·v_n`.
pub fn g2p_blend(update: &Vec3, voxel_velocity: &Vec3, lambda_p: F) -> Vec3 {
    update * lambda_p + voxel_velocity * (1.0 - lambda_p)
}

/// Closed-form accumulated contribution of a deposited mean update after `L`
/// field steps: `Δv·(1−λ_g)·Σ_{k=1..L} λ_g^{k−1} = Δv·(1−λ_g^L)`.
pub fn total_impact_partial<T: Real>(dv: [T; 3], lambda_g: T, steps: u64) -> [T; 3] {
    let factor = T::one() - lambda_g.powi(steps as i32);
    [dv[0] * factor, dv[1] * factor, dv[2] * factor]
}

/// Scripted single-injection field simulation: deposit `dv` as the voxel
/// mean at step `t`, then let the field decay. Returns the per-step
/// contribution series `(1−λ_g)·λ_g^{l−t}·Δv` for `horizon` steps, computed
/// by actually running the recurrence.
pub fn impact_trace(lambda_g: F, dv: Vec3, horizon: usize) -> Vec<Vec3> {
    let mut series = Vec::with_capacity(horizon);
    let mut v = Vec3::zeros();
    for step in 0..horizon {
        let mean = if step == 0 { dv } else { Vec3::zeros() };
        v = v * lambda_g + mean * (1.0 - lambda_g);
        series.push(v);
    }
    series
}
