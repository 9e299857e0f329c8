//! Jump-point transition between pyramid stages.
//!
//! At the boundary from stage `k+1` (window end `e_prev`) to stage `k` (window
//! start `s`) the low-resolution endpoint is nearest-upsampled, rescaled and
//! perturbed with corrective noise whose 2×2 blocks have unit variance and
//! pairwise correlation `gamma`:
//!
//! ```text
//! start_k = (s / e_prev) * up(end_{k+1}, 2) + alpha * n'
//! ```
//!
//! Matching the diagonal and off-diagonal variances of the resulting Gaussian
//! to the start law of stage `k` fixes `e_prev` and `alpha` as functions of
//! `(s, gamma)`. See [`solve_jump`].

use crate::error::{arg_err, dim_err, Result};
use crate::grid::{LatentGrid, Shape};
use crate::rng::RngStream;
use crate::schedule::{check_gamma, linked_end, StageSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpParams {
    /// Start of the finer window.
    pub start: f64,
    /// End of the coarser window.
    pub prev_end: f64,
    pub gamma: f64,
    /// Multiplier on the upsampled endpoint, `s / e_prev`.
    pub rescale: f64,
    /// Corrective noise weight, `(1 - s) / sqrt(1 - gamma)`.
    pub alpha: f64,
}

impl JumpParams {
    /// Plain nearest upsampling with no rescale and no noise.
    pub fn upsample_only() -> Self {
        Self {
            start: f64::NAN,
            prev_end: f64::NAN,
            gamma: 0.0,
            rescale: 1.0,
            alpha: 0.0,
        }
    }

    /// Jump parameters for entering stage `k` from stage `k + 1`.
    pub fn for_stage(schedule: &StageSchedule, k: usize) -> Result<Self> {
        if k + 1 >= schedule.num_stages() {
            return arg_err(format!("stage {k} has no coarser neighbour"));
        }
        let p = solve_jump(schedule.stage(k)?.start, schedule.gamma())?;
        debug_assert!((p.prev_end - schedule.stage(k + 1).unwrap().end).abs() < 1e-12);
        Ok(p)
    }

    /// Residual of the two variance-matching equations
    /// (diagonal, off-diagonal). Both vanish for solver output.
    pub fn matching_residuals(&self) -> (f64, f64) {
        let carried = (self.rescale * (1.0 - self.prev_end)).powi(2);
        let a2 = self.alpha * self.alpha;
        (
            carried + a2 - (1.0 - self.start).powi(2),
            carried + a2 * self.gamma,
        )
    }
}

/// Solves the jump-point matching equations for start `s` and correlation `gamma`.
pub fn solve_jump(s: f64, gamma: f64) -> Result<JumpParams> {
    check_gamma(gamma)?;
    if !(s > 0.0 && s < 1.0) {
        return arg_err(format!("jump start s = {s} outside (0, 1)"));
    }
    let prev_end = linked_end(s, gamma)?;
    let alpha = if gamma == 0.0 {
        1.0 - s
    } else if gamma <= -1.0 / 3.0 {
        3f64.sqrt() * (1.0 - s) / 2.0
    } else {
        (1.0 - s) / (1.0 - gamma).sqrt()
    };
    let rescale = if gamma <= -1.0 / 3.0 {
        (1.0 + s) / 2.0
    } else {
        s / prev_end
    };
    Ok(JumpParams {
        start: s,
        prev_end,
        gamma,
        rescale,
        alpha,
    })
}

/// Coefficients `(a, b)` with `n' = a z + b mean(z)` over a block of four
/// i.i.d. standard normals `z`, giving unit variance and correlation `gamma`.
///
/// The block covariance has eigenvalues `1 + 3 gamma` (once) and `1 - gamma`
/// (three times); `a^2 = 1 - gamma` and `a + b = sqrt(1 + 3 gamma)`. Nothing
/// here needs a factorization, so the singular case `gamma = -1/3` is exact.
pub fn block_coefficients(gamma: f64) -> Result<(f64, f64)> {
    check_gamma(gamma)?;
    let a = (1.0 - gamma).sqrt();
    let b = (1.0 + 3.0 * gamma).max(0.0).sqrt() - a;
    Ok((a, b))
}

/// Corrective noise for a grid of `shape` (even height and width).
///
/// Each non-overlapping 2×2 block of each channel is drawn independently.
/// Draw order is row-major over blocks, channel innermost, four normals per
/// block in raster order within the block.
pub fn corrective_noise(shape: Shape, gamma: f64, rng: &mut RngStream) -> Result<LatentGrid> {
    if shape.height % 2 != 0 || shape.width % 2 != 0 {
        return dim_err(format!("corrective noise needs even dims, got {shape}"));
    }
    let (a, b) = block_coefficients(gamma)?;
    let mut out = LatentGrid::zeros(shape)?.into_data();
    let ch = shape.channels;
    let idx = |r: usize, c: usize, k: usize| (r * shape.width + c) * ch + k;
    let exact_center = gamma <= -1.0 / 3.0;
    for br in 0..shape.height / 2 {
        for bc in 0..shape.width / 2 {
            for k in 0..ch {
                let mut z = [0.0; 4];
                rng.fill_normal(&mut z);
                let mean = (z[0] + z[1] + z[2] + z[3]) / 4.0;
                let vals = if exact_center {
                    // last entry closes the block so the sum is exactly zero
                    let d0 = a * (z[0] - mean);
                    let d1 = a * (z[1] - mean);
                    let d2 = a * (z[2] - mean);
                    [d0, d1, d2, -(d0 + d1 + d2)]
                } else {
                    [
                        a * z[0] + b * mean,
                        a * z[1] + b * mean,
                        a * z[2] + b * mean,
                        a * z[3] + b * mean,
                    ]
                };
                let (r0, c0) = (2 * br, 2 * bc);
                out[idx(r0, c0, k)] = vals[0];
                out[idx(r0, c0 + 1, k)] = vals[1];
                out[idx(r0 + 1, c0, k)] = vals[2];
                out[idx(r0 + 1, c0 + 1, k)] = vals[3];
            }
        }
    }
    Ok(LatentGrid::from_parts(shape, out))
}

/// Applies the jump: `rescale * up(x, 2) + alpha * n'`.
///
/// When `alpha == 0` no noise is drawn.
pub fn jump(x_end_prev: &LatentGrid, params: &JumpParams, rng: &mut RngStream) -> Result<LatentGrid> {
    let up = x_end_prev.up(2)?;
    let mut out = up.scale(params.rescale);
    if params.alpha != 0.0 {
        let noise = corrective_noise(up.shape(), params.gamma, rng)?;
        out.axpy(params.alpha, &noise)?;
    }
    Ok(out)
}
