//! Two-dimensional coupling experiment: a few target points, a uniform source
//! on `[-1, 1]^2`, and two contiguous time windows `[0, 1/2]`, `[1/2, 1]`.
//!
//! With shared-noise coupling every training pair inside a window moves along
//! a straight segment of the same source-to-target line; with random coupling
//! the start and end of a window use unrelated source points, so the regressed
//! field averages over crossing directions and sampled paths bend.

use crate::error::{arg_err, Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::model::field::{PointField, VelocityField};
use crate::model::metrics::straightness;
use crate::model::mlp::{Activation, MlpNet, TimeEmbedding};
use crate::model::optim::Adam;
use crate::model::{batch_gradient, Coupling, StepMetric, Task, TrainConfig};
use crate::rng::RngStream;
use crate::sampler::{Trajectory, TrajectoryPoint};
use crate::schedule::Stage;

const SEED_STREAM_DATA: u64 = 1;
const SEED_STREAM_EVAL: u64 = 2;
const CHUNK: usize = 16;

/// Target points for the 1- and 3-point variants.
pub fn toy_targets(points: usize) -> Result<Vec<[f64; 2]>> {
    match points {
        1 => Ok(vec![[0.5, 0.5]]),
        3 => Ok(vec![[-0.6, -0.5], [0.6, -0.5], [0.0, 0.65]]),
        n => arg_err(format!("toy task supports 1 or 3 target points, got {n}")),
    }
}

/// Windows in sampling order: stage 1 = `[0, 1/2]`, stage 0 = `[1/2, 1]`.
pub fn toy_windows() -> Vec<Stage> {
    vec![
        Stage::new(1, 0.0, 0.5).expect("valid window"),
        Stage::new(0, 0.5, 1.0).expect("valid window"),
    ]
}

#[derive(Debug, Clone, Copy)]
struct ToyExample {
    input: [f64; 2],
    target: [f64; 2],
    t: f64,
    stage: usize,
}

fn uniform_point(rng: &mut RngStream) -> [f64; 2] {
    [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)]
}

fn draw_example(
    rng: &mut RngStream,
    windows: &[Stage],
    targets: &[[f64; 2]],
    coupling: Coupling,
) -> ToyExample {
    let stage = windows[rng.index(windows.len())];
    let t = rng.uniform_in(stage.start, stage.end);
    let x1 = targets[rng.index(targets.len())];
    let n_start = uniform_point(rng);
    let n_end = match coupling {
        Coupling::Ours => n_start,
        Coupling::Random => uniform_point(rng),
    };
    let (s, e) = (stage.start, stage.end);
    let local = (t - s) / (e - s);
    let mut input = [0.0; 2];
    let mut target = [0.0; 2];
    for d in 0..2 {
        let start = s * x1[d] + (1.0 - s) * n_start[d];
        let end = e * x1[d] + (1.0 - e) * n_end[d];
        input[d] = (1.0 - local) * start + local * end;
        target[d] = end - start;
    }
    ToyExample {
        input,
        target,
        t,
        stage: stage.index,
    }
}

#[derive(Debug, Clone)]
pub struct Toy2dReport {
    pub losses: Vec<StepMetric>,
    pub straightness: f64,
    /// Mean distance of generated points to their nearest target.
    pub mean_nearest_distance: f64,
    pub trajectories: Vec<Trajectory>,
}

pub fn new_toy_net(cfg: &TrainConfig) -> Result<MlpNet> {
    let emb = TimeEmbedding {
        frequencies: cfg.frequencies,
        stages: 2,
    };
    MlpNet::new(2, &cfg.hidden, 2, emb, Activation::Silu, cfg.seed)
}

/// Trains the piecewise objective on the toy task and evaluates straightness.
pub fn train_toy2d(cfg: &TrainConfig) -> Result<(MlpNet, Toy2dReport)> {
    if cfg.task != Task::Toy2d {
        return arg_err("train_toy2d needs a toy2d config");
    }
    cfg.validate()?;
    let targets = toy_targets(cfg.points)?;
    let windows = toy_windows();
    let mut net = new_toy_net(cfg)?;
    let mut opt = Adam::new(cfg.optim, net.num_params())?;
    let mut rng = RngStream::new(cfg.seed, SEED_STREAM_DATA);
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / (2 * cfg.batch) as f64;
    let mut evaluations = 0u64;
    for step in 0..cfg.steps {
        let batch: Vec<ToyExample> = (0..cfg.batch)
            .map(|_| draw_example(&mut rng, &windows, &targets, cfg.coupling))
            .collect();
        let (loss_sum, grads) = batch_gradient(&net, &batch, CHUNK, |net, ws, ex, grads| {
            let out = net.forward(ws, &ex.input, ex.t, ex.stage)?;
            let w = cfg.stage_weight(ex.stage);
            let diff = [out[0] - ex.target[0], out[1] - ex.target[1]];
            let upstream = [2.0 * w * scale * diff[0], 2.0 * w * scale * diff[1]];
            net.backward(ws, &upstream, grads)?;
            Ok(w * (diff[0] * diff[0] + diff[1] * diff[1]))
        })?;
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt.step(net.params_mut(), &grads)?;
        evaluations += cfg.batch as u64;
        losses.push(StepMetric {
            step,
            loss,
            evaluations,
        });
    }
    let field = PointField { net };
    let trajectories = sample_toy(
        &field,
        cfg.eval_samples,
        cfg.sample_steps,
        cfg.seed,
    )?;
    let report = Toy2dReport {
        losses,
        straightness: mean_straightness(&trajectories),
        mean_nearest_distance: mean_nearest_distance(&trajectories, &targets),
        trajectories,
    };
    Ok((field.net, report))
}

/// Euler-integrates `n` trajectories from uniform source points through both
/// windows. The hand-off between windows is the identity.
pub fn sample_toy(
    field: &dyn VelocityField,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if steps == 0 {
        return arg_err("toy sampling needs at least one step per window");
    }
    let windows = toy_windows();
    let mut rng = RngStream::new(seed, SEED_STREAM_EVAL);
    let shape = Shape::new(1, 1, 2);
    let dt = 1.0 / steps as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = uniform_point(&mut rng);
        let mut x = LatentGrid::new(shape, p.to_vec())?;
        let mut traj = Trajectory::default();
        for w in &windows {
            traj.points.push(TrajectoryPoint {
                t: w.start,
                stage: w.index,
                state: x.clone(),
            });
            for j in 0..steps {
                let v = field.evaluate(&x, w.time_at(j as f64 * dt), w.index, None)?;
                if !v.is_finite() {
                    return Err(Error::Numerical {
                        step: j,
                        message: "non-finite toy velocity".into(),
                    });
                }
                x.axpy(dt, &v)?;
                traj.points.push(TrajectoryPoint {
                    t: w.time_at((j + 1) as f64 * dt),
                    stage: w.index,
                    state: x.clone(),
                });
            }
        }
        out.push(traj);
    }
    Ok(out)
}

pub fn mean_straightness(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    trajectories.iter().map(straightness).sum::<f64>() / trajectories.len() as f64
}

pub fn mean_nearest_distance(trajectories: &[Trajectory], targets: &[[f64; 2]]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    let total: f64 = trajectories
        .iter()
        .filter_map(|t| t.points.last())
        .map(|p| {
            let d = p.state.data();
            targets
                .iter()
                .map(|q| ((d[0] - q[0]).powi(2) + (d[1] - q[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / trajectories.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::field::FnField;

    #[test]
    fn ours_coupling_examples_lie_on_source_target_line() {
        let mut rng = RngStream::new(1, 0);
        let targets = toy_targets(1).unwrap();
        for _ in 0..100 {
            let ex = draw_example(&mut rng, &toy_windows(), &targets, Coupling::Ours);
            // velocity per unit global time is x1 - n, constant along the line:
            // x + (1 - t) * target / width = x1
            let w = 0.5;
            for d in 0..2 {
                let reach = ex.input[d] + (1.0 - ex.t) * ex.target[d] / w;
                assert!((reach - targets[0][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_constant_field_gives_zero_straightness() {
        let f = FnField(|x: &LatentGrid, _: f64, _: usize| Ok(LatentGrid::filled(x.shape(), 0.3)?));
        let trajs = sample_toy(&f, 8, 10, 4).unwrap();
        assert!(mean_straightness(&trajs) < 1e-28);
        assert_eq!(trajs[0].points.len(), 22);
    }

    #[test]
    fn untrained_nets_match_across_couplings() {
        let mut cfg = TrainConfig::toy2d();
        cfg.steps = 0;
        cfg.eval_samples = 32;
        let (_, a) = train_toy2d(&cfg).unwrap();
        cfg.coupling = Coupling::Random;
        let (_, b) = train_toy2d(&cfg).unwrap();
        assert_eq!(a.straightness, b.straightness);
    }

    #[test]
    fn training_is_reproducible() {
        let mut cfg = TrainConfig::toy2d();
        cfg.steps = 20;
        cfg.batch = 64;
        cfg.eval_samples = 8;
        let (na, ra) = train_toy2d(&cfg).unwrap();
        let (nb, rb) = train_toy2d(&cfg).unwrap();
        assert_eq!(na, nb);
        assert_eq!(ra.losses, rb.losses);
    }

    #[test]
    fn bad_point_count() {
        let mut cfg = TrainConfig::toy2d();
        cfg.points = 2;
        assert!(train_toy2d(&cfg).is_err());
    }
}
