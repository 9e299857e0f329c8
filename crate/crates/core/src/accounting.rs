//! Token and attention-cost arithmetic for full-sequence versus pyramidal
//! training of a video latent sequence.

use crate::error::{arg_err, Result};
use crate::temporal::history_divisors;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub vae_spatial: usize,
    pub vae_temporal: usize,
    /// First frame is encoded on its own, the rest in groups of `vae_temporal`.
    pub causal_first_frame: bool,
    pub patch: usize,
}

impl Default for VideoSpec {
    /// Ten seconds of 24 fps video at 768×1280.
    fn default() -> Self {
        Self {
            frames: 241,
            height: 768,
            width: 1280,
            vae_spatial: 8,
            vae_temporal: 8,
            causal_first_frame: true,
            patch: 2,
        }
    }
}

impl VideoSpec {
    /// Checks positivity and that both spatial dims survive `num_stages`
    /// halvings after VAE compression and patchification.
    pub fn validate(&self, num_stages: usize) -> Result<()> {
        let fields = [
            self.frames,
            self.height,
            self.width,
            self.vae_spatial,
            self.vae_temporal,
            self.patch,
        ];
        if fields.contains(&0) {
            return arg_err(format!("video spec fields must be positive: {self:?}"));
        }
        if num_stages == 0 || num_stages > 16 {
            return arg_err(format!("unsupported stage count {num_stages}"));
        }
        let unit = self.vae_spatial * self.patch * (1 << (num_stages - 1));
        if self.height % unit != 0 || self.width % unit != 0 {
            return arg_err(format!(
                "{}x{} is not divisible by vae·patch·2^(K-1) = {unit}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    /// Tokens per latent frame at full resolution.
    pub fn tokens_per_frame(&self) -> usize {
        let unit = self.vae_spatial * self.patch;
        (self.height / unit) * (self.width / unit)
    }
}

pub fn latent_frames(spec: &VideoSpec) -> Result<usize> {
    if spec.frames == 0 || spec.vae_temporal == 0 {
        return arg_err("frames and temporal compression must be positive");
    }
    if spec.causal_first_frame {
        if (spec.frames - 1) % spec.vae_temporal != 0 {
            return arg_err(format!(
                "{} frames: (frames - 1) not divisible by {}",
                spec.frames, spec.vae_temporal
            ));
        }
        Ok(1 + (spec.frames - 1) / spec.vae_temporal)
    } else {
        if spec.frames % spec.vae_temporal != 0 {
            return arg_err(format!(
                "{} frames not divisible by {}",
                spec.frames, spec.vae_temporal
            ));
        }
        Ok(spec.frames / spec.vae_temporal)
    }
}

pub fn tokens_full(spec: &VideoSpec) -> Result<usize> {
    spec.validate(1)?;
    Ok(latent_frames(spec)? * spec.tokens_per_frame())
}

/// Default history divisors (oldest first) for `n_history` frames: the
/// newest frame one level below full resolution, everything older clamped at
/// the coarsest level.
pub fn default_history_divisors(n_history: usize, num_stages: usize) -> Result<Vec<usize>> {
    if num_stages == 0 {
        return arg_err("number of stages must be at least 1");
    }
    history_divisors(n_history, 1.min(num_stages - 1), num_stages)
}

/// Current frame at full resolution plus each history frame at its divisor.
pub fn tokens_pyramid(spec: &VideoSpec, num_stages: usize, history_divisors: &[usize]) -> Result<usize> {
    spec.validate(num_stages)?;
    let t = latent_frames(spec)?;
    if history_divisors.len() + 1 != t {
        return arg_err(format!(
            "{} history divisors for {t} latent frames (expected {})",
            history_divisors.len(),
            t - 1
        ));
    }
    let max = 1usize << (num_stages - 1);
    for &d in history_divisors {
        if !d.is_power_of_two() || d > max {
            return arg_err(format!("history divisor {d} is not a power of two ≤ {max}"));
        }
    }
    if history_divisors.windows(2).any(|w| w[0] < w[1]) {
        return arg_err("history divisors must not increase toward the present");
    }
    let n = spec.tokens_per_frame();
    Ok(n + history_divisors.iter().map(|d| n / (d * d)).sum::<usize>())
}

/// Quadratic attention cost in token pairs.
pub fn attention_cost(tokens: usize) -> u128 {
    (tokens as u128) * (tokens as u128)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenReport {
    pub latent_frames: usize,
    pub tokens_per_frame: usize,
    pub full_tokens: usize,
    pub pyramid_tokens: usize,
    /// `cost(pyramid) / cost(full)`.
    pub cost_ratio: f64,
    /// `1 / 16^K`, the idealised ratio when every token is at the coarsest level.
    pub ideal_ratio: f64,
}

/// Full versus pyramid token counts with the default history divisors.
pub fn token_report(spec: &VideoSpec, num_stages: usize) -> Result<TokenReport> {
    let t = latent_frames(spec)?;
    let divisors = default_history_divisors(t - 1, num_stages)?;
    let full = tokens_full(spec)?;
    let pyramid = tokens_pyramid(spec, num_stages, &divisors)?;
    Ok(TokenReport {
        latent_frames: t,
        tokens_per_frame: spec.tokens_per_frame(),
        full_tokens: full,
        pyramid_tokens: pyramid,
        cost_ratio: attention_cost(pyramid) as f64 / attention_cost(full) as f64,
        ideal_ratio: 16f64.powi(-(num_stages as i32)),
    })
}
