//! Training examples for the unified piecewise flow-matching objective.
//!
//! Within stage `k` both window endpoints are built from one shared noise draw
//! `n` at the stage resolution:
//!
//! ```text
//! end   = e_k * down(x1, 2^k)              + (1 - e_k) * n
//! start = s_k * up(down(x1, 2^{k+1}), 2)   + (1 - s_k) * n
//! ```
//!
//! and the model regresses the constant velocity `end - start` at the point
//! `lerp(start, end, t')`.

use crate::error::{arg_err, dim_err, Result};
use crate::grid::LatentGrid;
use crate::rng::RngStream;
use crate::schedule::{Stage, StageSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSample {
    pub stage: Stage,
    /// Global time in `[s_k, e_k]`.
    pub t: f64,
    pub x_t: LatentGrid,
    pub target: LatentGrid,
    pub start: LatentGrid,
    pub end: LatentGrid,
}

impl PyramidSample {
    pub fn local_time(&self) -> f64 {
        self.stage.rescale_time(self.t).unwrap_or(0.0)
    }
}

/// Noise-free mean of the window end: `e_k * down(x1, 2^k)`.
pub fn end_mean(x1: &LatentGrid, stage: &Stage) -> Result<LatentGrid> {
    Ok(x1.down(stage.divisor)?.scale(stage.end))
}

/// Noise-free mean of the window start: `s_k * up(down(x1, 2^{k+1}), 2)`.
pub fn start_mean(x1: &LatentGrid, stage: &Stage) -> Result<LatentGrid> {
    let out_shape = x1.shape().reduced(stage.divisor)?;
    if stage.start == 0.0 {
        return LatentGrid::zeros(out_shape);
    }
    Ok(x1
        .down(stage.divisor * 2)?
        .up(2)?
        .scale(stage.start))
}

/// Coupled window endpoints `(start, end)` for one shared noise draw.
pub fn make_endpoints(
    x1: &LatentGrid,
    stage: &Stage,
    noise: &LatentGrid,
) -> Result<(LatentGrid, LatentGrid)> {
    let stage_shape = x1.shape().reduced(stage.divisor)?;
    if noise.shape() != stage_shape {
        return dim_err(format!(
            "noise is {} but stage {} expects {stage_shape}",
            noise.shape(),
            stage.index
        ));
    }
    let end = end_mean(x1, stage)?;
    let end = LatentGrid::combine(1.0, &end, 1.0 - stage.end, noise)?;
    let start = start_mean(x1, stage)?;
    let start = LatentGrid::combine(1.0, &start, 1.0 - stage.start, noise)?;
    Ok((start, end))
}

/// Builds the training example for a given stage, time and noise.
pub fn sample_at(x1: &LatentGrid, stage: &Stage, t: f64, noise: &LatentGrid) -> Result<PyramidSample> {
    let local = stage.rescale_time(t)?;
    let (start, end) = make_endpoints(x1, stage, noise)?;
    let x_t = LatentGrid::lerp(&start, &end, local)?;
    let target = end.sub(&start)?;
    Ok(PyramidSample {
        stage: *stage,
        t,
        x_t,
        target,
        start,
        end,
    })
}

/// Draws stage, time and noise from `rng` and builds the training example.
///
/// Draw order is fixed: stage index, then `t`, then the noise grid.
pub fn make_sample(
    x1: &LatentGrid,
    schedule: &StageSchedule,
    rng: &mut RngStream,
) -> Result<PyramidSample> {
    let coarsest = schedule.coarsest_divisor();
    let shape = x1.shape();
    if shape.height % coarsest != 0 || shape.width % coarsest != 0 {
        return dim_err(format!(
            "x1 {shape} is not divisible by the coarsest divisor {coarsest}"
        ));
    }
    let k = schedule.sample_stage(rng);
    let stage = *schedule.stage(k)?;
    let t = rng.uniform_in(stage.start, stage.end);
    let noise = LatentGrid::gaussian_from(shape.reduced(stage.divisor)?, rng)?;
    sample_at(x1, &stage, t, &noise)
}

/// Mean squared error between a predicted velocity and the sample's target.
pub fn fm_loss(v_pred: &LatentGrid, sample: &PyramidSample) -> Result<f64> {
    mse(v_pred, &sample.target)
}

/// [`fm_loss`] scaled by a per-stage weight (index = stage index).
pub fn fm_loss_weighted(v_pred: &LatentGrid, sample: &PyramidSample, weights: &[f64]) -> Result<f64> {
    let Some(&w) = weights.get(sample.stage.index) else {
        return arg_err(format!(
            "no loss weight for stage {} ({} weights)",
            sample.stage.index,
            weights.len()
        ));
    };
    Ok(w * fm_loss(v_pred, sample)?)
}

pub fn mse(a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;

    fn x1_8x8(seed: u64) -> LatentGrid {
        LatentGrid::gaussian(Shape::new(8, 8, 1), seed, 99).unwrap()
    }

    #[test]
    fn constant_inputs_give_constant_velocity() {
        let stage = Stage::new(1, 1.0 / 3.0, 0.8).unwrap();
        let x1 = LatentGrid::filled(Shape::new(8, 8, 1), 2.0).unwrap();
        let noise = LatentGrid::filled(Shape::new(4, 4, 1), -1.0).unwrap();
        let (s, e) = make_endpoints(&x1, &stage, &noise).unwrap();
        let expect = (0.8 - 1.0 / 3.0) * (2.0 - (-1.0));
        for v in e.sub(&s).unwrap().data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_endpoints() {
        let stage = Stage::new(1, 1.0 / 3.0, 0.8).unwrap();
        let x1 = x1_8x8(1);
        let noise = LatentGrid::zeros(Shape::new(4, 4, 1)).unwrap();
        let (s, e) = make_endpoints(&x1, &stage, &noise).unwrap();
        let e_ref = x1.down(2).unwrap().scale(0.8);
        let s_ref = x1.down(4).unwrap().up(2).unwrap().scale(1.0 / 3.0);
        assert!(e.max_abs_diff(&e_ref).unwrap() < 1e-15);
        assert!(s.max_abs_diff(&s_ref).unwrap() < 1e-15);
    }

    #[test]
    fn single_stage_is_vanilla_flow_matching() {
        let stage = Stage::new(0, 0.0, 1.0).unwrap();
        let x1 = x1_8x8(2);
        let noise = LatentGrid::gaussian(x1.shape(), 5, 0).unwrap();
        let (s, e) = make_endpoints(&x1, &stage, &noise).unwrap();
        assert_eq!(s, noise);
        assert_eq!(e, x1);
        let smp = sample_at(&x1, &stage, 0.3, &noise).unwrap();
        let vanilla = LatentGrid::combine(0.3, &x1, 0.7, &noise).unwrap();
        assert!(smp.x_t.max_abs_diff(&vanilla).unwrap() < 1e-15);
        assert_eq!(smp.target, x1.sub(&noise).unwrap());
    }

    #[test]
    fn noise_shape_is_checked() {
        let stage = Stage::new(1, 1.0 / 3.0, 0.8).unwrap();
        let x1 = x1_8x8(1);
        let noise = LatentGrid::zeros(Shape::new(8, 8, 1)).unwrap();
        assert!(make_endpoints(&x1, &stage, &noise).is_err());
    }

    #[test]
    fn sample_endpoints_and_determinism() {
        let sched = StageSchedule::uniform(3).unwrap();
        let x1 = x1_8x8(3);
        let a = make_sample(&x1, &sched, &mut RngStream::new(4, 0)).unwrap();
        let b = make_sample(&x1, &sched, &mut RngStream::new(4, 0)).unwrap();
        assert_eq!(a, b);
        let noise = a.start.sub(&start_mean(&x1, &a.stage).unwrap()).unwrap()
            .scale(1.0 / (1.0 - a.stage.start));
        let at_s = sample_at(&x1, &a.stage, a.stage.start, &noise).unwrap();
        assert!(at_s.x_t.max_abs_diff(&at_s.start).unwrap() < 1e-12);
        let at_e = sample_at(&x1, &a.stage, a.stage.end, &noise).unwrap();
        assert_eq!(at_e.x_t, at_e.end);
        // velocity does not depend on t
        assert_eq!(at_s.target, at_e.target);
        let bad = LatentGrid::zeros(Shape::new(6, 6, 1)).unwrap();
        assert!(make_sample(&bad, &sched, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn loss_examples() {
        let stage = Stage::new(0, 0.0, 1.0).unwrap();
        let x1 = LatentGrid::filled(Shape::new(2, 2, 1), 2.0).unwrap();
        let noise = LatentGrid::zeros(x1.shape()).unwrap();
        let smp = sample_at(&x1, &stage, 0.5, &noise).unwrap();
        assert_eq!(fm_loss(&smp.target, &smp).unwrap(), 0.0);
        assert_eq!(fm_loss(&smp.target.map(|v| v + 1.0), &smp).unwrap(), 1.0);
        assert_eq!(fm_loss(&noise, &smp).unwrap(), 4.0);
        assert_eq!(fm_loss_weighted(&noise, &smp, &[0.5]).unwrap(), 2.0);
        assert!(fm_loss_weighted(&noise, &smp, &[]).is_err());
        let wrong = LatentGrid::zeros(Shape::new(1, 1, 1)).unwrap();
        assert!(fm_loss(&wrong, &smp).is_err());
    }

    #[test]
    fn endpoint_laws_and_coupling() {
        let stage = Stage::new(1, 1.0 / 3.0, 0.8).unwrap();
        let x1 = x1_8x8(7);
        let n = 40_000;
        let e_mean = end_mean(&x1, &stage).unwrap();
        let s_mean = start_mean(&x1, &stage).unwrap();
        let px = e_mean.len();
        let mut sum_e = vec![0.0; px];
        let mut sq_e = vec![0.0; px];
        let mut sq_s = vec![0.0; px];
        let mut cross = vec![0.0; px];
        let mut rng = RngStream::new(8, 0);
        for _ in 0..n {
            let noise = LatentGrid::gaussian_from(e_mean.shape(), &mut rng).unwrap();
            let (s, e) = make_endpoints(&x1, &stage, &noise).unwrap();
            for i in 0..px {
                let de = e.data()[i] - e_mean.data()[i];
                let ds = s.data()[i] - s_mean.data()[i];
                sum_e[i] += de;
                sq_e[i] += de * de;
                sq_s[i] += ds * ds;
                cross[i] += de * ds;
            }
        }
        for i in 0..px {
            let ve = sq_e[i] / n as f64;
            let vs = sq_s[i] / n as f64;
            assert!((sum_e[i] / n as f64).abs() < 0.01);
            assert!((ve - 0.04).abs() < 0.002, "end variance {ve}");
            assert!((vs - 4.0 / 9.0).abs() < 0.02, "start variance {vs}");
            let rho = cross[i] / n as f64 / (ve * vs).sqrt();
            assert!((rho - 1.0).abs() < 1e-9);
        }
    }
}
