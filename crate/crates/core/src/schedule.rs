//! Pyramid stages and their time windows.
//!
//! Stage `k` runs at resolution `full / 2^k` over the window `[s_k, e_k]`.
//! Starts are laid out uniformly, `s_k = (K-1-k)/K`, and each coarser stage's
//! end `e_{k+1}` is tied to the next start `s_k` by the jump-point link, so the
//! renoising transition between them is exact.

use crate::error::{arg_err, Result};
use crate::rng::RngStream;

/// Default within-block correlation of the corrective noise.
pub const DEFAULT_GAMMA: f64 = -1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub index: usize,
    pub divisor: usize,
    pub start: f64,
    pub end: f64,
}

impl Stage {
    pub fn new(index: usize, start: f64, end: f64) -> Result<Self> {
        if index >= usize::BITS as usize - 1 {
            return arg_err(format!("stage index {index} too large"));
        }
        if !(0.0..1.0).contains(&start) || !(start < end && end <= 1.0) {
            return arg_err(format!("invalid stage window [{start}, {end}]"));
        }
        Ok(Self {
            index,
            divisor: 1 << index,
            start,
            end,
        })
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    /// Maps `t ∈ [s, e]` to the window-local time `t' ∈ [0, 1]`.
    pub fn rescale_time(&self, t: f64) -> Result<f64> {
        if !(self.start..=self.end).contains(&t) {
            return arg_err(format!(
                "t = {t} outside stage {} window [{}, {}]",
                self.index, self.start, self.end
            ));
        }
        Ok(((t - self.start) / self.width()).clamp(0.0, 1.0))
    }

    /// Inverse of [`Stage::rescale_time`].
    pub fn time_at(&self, local: f64) -> f64 {
        if local >= 1.0 {
            self.end
        } else {
            self.start + self.width() * local
        }
    }
}

/// Validates `gamma ∈ [-1/3, 0]`.
pub fn check_gamma(gamma: f64) -> Result<()> {
    // -1/3 is the smallest value keeping the block covariance semidefinite.
    if !(gamma >= -1.0 / 3.0 - 1e-15 && gamma <= 0.0) {
        return arg_err(format!("gamma = {gamma} outside [-1/3, 0]"));
    }
    Ok(())
}

/// End of the coarser window that pairs with start `s` of the next finer
/// window, for corrective-noise correlation `gamma`.
///
/// `gamma = 0` is the limit `e = 1`; `gamma = -1/3` gives `2s / (1 + s)`.
pub fn linked_end(s: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(s > 0.0 && s < 1.0) {
        return arg_err(format!("jump start s = {s} outside (0, 1)"));
    }
    if gamma == 0.0 {
        return Ok(1.0);
    }
    if gamma <= -1.0 / 3.0 {
        return Ok(2.0 * s / (1.0 + s));
    }
    let a = s * (1.0 - gamma).sqrt();
    Ok(a / ((1.0 - s) * (-gamma).sqrt() + a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// `s_k = (K-1-k)/K`, ends derived from the jump link.
    #[default]
    UniformStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    /// Ordered coarsest first: indices `K-1, ..., 0`.
    stages: Vec<Stage>,
    gamma: f64,
}

impl StageSchedule {
    pub fn build(num_stages: usize, gamma: f64, layout: Layout) -> Result<Self> {
        if num_stages == 0 {
            return arg_err("number of stages must be at least 1");
        }
        if num_stages >= 32 {
            return arg_err(format!("{num_stages} stages is not supported"));
        }
        check_gamma(gamma)?;
        let k_total = num_stages as f64;
        let starts: Vec<f64> = match layout {
            Layout::UniformStart => (0..num_stages)
                .map(|k| (num_stages - 1 - k) as f64 / k_total)
                .collect(),
        };
        let mut stages = Vec::with_capacity(num_stages);
        for k in (0..num_stages).rev() {
            let end = if k == 0 {
                1.0
            } else {
                linked_end(starts[k - 1], gamma)?
            };
            stages.push(Stage::new(k, starts[k], end)?);
        }
        Ok(Self { stages, gamma })
    }

    /// `build` with the default `gamma = -1/3`.
    pub fn uniform(num_stages: usize) -> Result<Self> {
        Self::build(num_stages, DEFAULT_GAMMA, Layout::UniformStart)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Stages in sampling order (coarsest first).
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Stage by pyramid index (0 = full resolution).
    pub fn stage(&self, k: usize) -> Result<&Stage> {
        let n = self.stages.len();
        if k >= n {
            return arg_err(format!("stage {k} out of range for {n} stages"));
        }
        Ok(&self.stages[n - 1 - k])
    }

    /// Largest resolution divisor, `2^{K-1}`.
    pub fn coarsest_divisor(&self) -> usize {
        self.stages[0].divisor
    }

    /// Draws a stage index uniformly from `0..K`.
    pub fn sample_stage(&self, rng: &mut RngStream) -> usize {
        sample_stage(self.num_stages(), rng)
    }
}

pub fn sample_stage(num_stages: usize, rng: &mut RngStream) -> usize {
    rng.index(num_stages.max(1))
}
