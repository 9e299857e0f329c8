//! Stagewise sampling: Euler integration inside each window, renoising jumps
//! between windows.

use std::io::Write;

use crate::error::{arg_err, Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::model::field::VelocityField;
use crate::renoise::{jump, JumpParams};
use crate::rng::RngStream;
use crate::schedule::{Stage, StageSchedule};
use crate::temporal::HistoryPyramid;

pub const DEFAULT_STEPS_PER_STAGE: usize = 16;

/// Trajectories with at most this many state values are written verbatim to
/// CSV; larger states are summarised.
pub const CSV_FLATTEN_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Euler steps for stage `k`, indexed by `k`.
    pub steps_per_stage: Vec<usize>,
    pub guidance_scale: f64,
    pub seed: u64,
    pub renoise: bool,
}

impl SamplerConfig {
    pub fn new(num_stages: usize, seed: u64) -> Self {
        Self {
            steps_per_stage: vec![DEFAULT_STEPS_PER_STAGE; num_stages],
            guidance_scale: 1.0,
            seed,
            renoise: true,
        }
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if self.steps_per_stage.len() != num_stages {
            return arg_err(format!(
                "{} step counts given for {num_stages} stages",
                self.steps_per_stage.len()
            ));
        }
        if self.steps_per_stage.contains(&0) {
            return arg_err("every stage needs at least one step");
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return arg_err(format!(
                "guidance scale must be a non-negative number, got {}",
                self.guidance_scale
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub stage: usize,
    pub state: LatentGrid,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// CSV with header `step,t,stage,...`. When every state has the same
    /// length of at most [`CSV_FLATTEN_LIMIT`] values the states are flattened
    /// to `v0,v1,...`; otherwise each row is summarised as `mean,std,min,max`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let len = self.points.first().map_or(0, |p| p.state.len());
        let uniform = self.points.iter().all(|p| p.state.len() == len);
        let flatten = uniform && len <= CSV_FLATTEN_LIMIT;
        write!(w, "step,t,stage")?;
        if flatten {
            for i in 0..len {
                write!(w, ",v{i}")?;
            }
        } else {
            write!(w, ",mean,std,min,max")?;
        }
        writeln!(w)?;
        for (step, p) in self.points.iter().enumerate() {
            write!(w, "{step},{},{}", p.t, p.stage)?;
            let d = p.state.data();
            if flatten {
                for v in d {
                    write!(w, ",{v}")?;
                }
            } else {
                let n = d.len() as f64;
                let mean = d.iter().sum::<f64>() / n;
                let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                let min = d.iter().copied().fold(f64::INFINITY, f64::min);
                let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                write!(w, ",{mean},{std},{min},{max}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// `v_uncond + scale * (v_cond - v_uncond)`.
pub fn guided_velocity(v_cond: &LatentGrid, v_uncond: &LatentGrid, scale: f64) -> Result<LatentGrid> {
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

fn velocity(
    field: &dyn VelocityField,
    x: &LatentGrid,
    t: f64,
    stage: usize,
    condition: Option<&HistoryPyramid>,
    guidance: f64,
) -> Result<LatentGrid> {
    let v_cond = field.evaluate(x, t, stage, condition)?;
    match condition {
        Some(_) if guidance != 1.0 => {
            let v_uncond = field.evaluate(x, t, stage, None)?;
            guided_velocity(&v_cond, &v_uncond, guidance)
        }
        _ => Ok(v_cond),
    }
}

fn integrate(
    field: &dyn VelocityField,
    x_start: &LatentGrid,
    stage: &Stage,
    n_steps: usize,
    condition: Option<&HistoryPyramid>,
    guidance: f64,
    mut record: Option<&mut Trajectory>,
) -> Result<LatentGrid> {
    if n_steps == 0 {
        return arg_err("integration needs at least one step");
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x_start.clone();
    for j in 0..n_steps {
        let t = stage.time_at(j as f64 * dt);
        let v = velocity(field, &x, t, stage.index, condition, guidance)?;
        if v.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "velocity {} does not match state {}",
                v.shape(),
                x.shape()
            )));
        }
        if !v.is_finite() {
            return Err(Error::Numerical {
                step: j,
                message: format!("non-finite velocity in stage {}", stage.index),
            });
        }
        x.axpy(dt, &v)?;
        if let Some(traj) = record.as_deref_mut() {
            traj.points.push(TrajectoryPoint {
                t: stage.time_at((j + 1) as f64 * dt),
                stage: stage.index,
                state: x.clone(),
            });
        }
    }
    Ok(x)
}

/// Explicit Euler from `t' = 0` to `t' = 1` in `n_steps` uniform steps.
pub fn integrate_stage(
    field: &dyn VelocityField,
    x_start: &LatentGrid,
    stage: &Stage,
    n_steps: usize,
    condition: Option<&HistoryPyramid>,
) -> Result<LatentGrid> {
    integrate(field, x_start, stage, n_steps, condition, 1.0, None)
}

/// Stream id used for the initial noise; the jump into stage `k` uses `k + 1`.
pub const INITIAL_NOISE_STREAM: u64 = 0;

/// Generates one full-resolution sample of `full_shape`.
pub fn sample(
    field: &dyn VelocityField,
    schedule: &StageSchedule,
    cfg: &SamplerConfig,
    full_shape: Shape,
    condition: Option<&HistoryPyramid>,
) -> Result<(LatentGrid, Trajectory)> {
    let n = schedule.num_stages();
    cfg.validate(n)?;
    let start_shape = full_shape.reduced(schedule.coarsest_divisor())?;
    let mut x = LatentGrid::gaussian(start_shape, cfg.seed, INITIAL_NOISE_STREAM)?;
    let mut traj = Trajectory::default();
    for (i, stage) in schedule.stages().iter().enumerate() {
        if i > 0 {
            let params = if cfg.renoise {
                JumpParams::for_stage(schedule, stage.index)?
            } else {
                JumpParams::upsample_only()
            };
            let mut rng = RngStream::new(cfg.seed, stage.index as u64 + 1);
            x = jump(&x, &params, &mut rng)?;
        }
        traj.points.push(TrajectoryPoint {
            t: stage.start,
            stage: stage.index,
            state: x.clone(),
        });
        x = integrate(
            field,
            &x,
            stage,
            cfg.steps_per_stage[stage.index],
            condition,
            cfg.guidance_scale,
            Some(&mut traj),
        )?;
    }
    Ok((x, traj))
}

/// Velocity field that knows the clean target `x1` and returns, for any state,
/// the exact conditional velocity of the coupled path through that state.
///
/// Inside stage `k` a state `x` at local time `t'` determines the shared noise
/// `n` elementwise, and hence both window endpoints. Euler steps along this
/// field stay on the straight path, so sampling with it ends exactly at `x1`.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub x1: LatentGrid,
    pub schedule: StageSchedule,
}

impl VelocityField for OracleField {
    fn evaluate(&self, x: &LatentGrid, t: f64, stage: usize, _: Option<&HistoryPyramid>) -> Result<LatentGrid> {
        let st = self.schedule.stage(stage)?;
        let local = st.rescale_time(t)?;
        let start_mean = crate::flow::start_mean(&self.x1, st)?;
        let end_mean = crate::flow::end_mean(&self.x1, st)?;
        let mean = LatentGrid::combine(1.0 - local, &start_mean, local, &end_mean)?;
        let spread = (1.0 - local) * (1.0 - st.start) + local * (1.0 - st.end);
        x.same_shape(&mean)?;
        // spread is zero only at the very end of the final window, which Euler never evaluates
        let noise = x.sub(&mean)?.scale(1.0 / spread);
        let end = LatentGrid::combine(1.0, &end_mean, 1.0 - st.end, &noise)?;
        let start = LatentGrid::combine(1.0, &start_mean, 1.0 - st.start, &noise)?;
        end.sub(&start)
    }
}
