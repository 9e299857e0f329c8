use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use pyramid_flow::accounting::{token_report, VideoSpec};
use pyramid_flow::grid::Shape;
use pyramid_flow::model::checkpoint::{Checkpoint, FieldKind};
use pyramid_flow::model::field::{PixelField, PointField};
use pyramid_flow::model::tinyimage::{train_tinyimage, IMAGE_SIZE};
use pyramid_flow::model::toy2d::{sample_toy, train_toy2d};
use pyramid_flow::model::{Coupling, StepMetric, TrainConfig};
use pyramid_flow::renoise::{corrective_noise, solve_jump};
use pyramid_flow::rng::RngStream;
use pyramid_flow::sampler::{sample, SamplerConfig, Trajectory};
use pyramid_flow::schedule::{Layout, StageSchedule, DEFAULT_GAMMA};
use pyramid_flow::temporal::{causal_mask, history_divisors};

use crate::plot::{read_trajectories, render_svg};
use crate::{Cli, Command, ImageArgs, Invalid, MaskArgs, OptimArgs, SampleArgs, ToyArgs, VerifyArgs};

const MOMENT_TOL: f64 = 0.01;
const IDENTITY_TOL: f64 = 1e-12;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Schedule(a) => schedule(a.stages, a.gamma),
        Command::VerifyRenoise(a) => verify_renoise(a, cli.seed),
        Command::TrainToy2d(a) => train_toy(a, cli),
        Command::TrainImage(a) => train_image(a, cli),
        Command::Sample(a) => sample_cmd(a, cli),
        Command::Tokens(a) => {
            let spec = VideoSpec {
                frames: a.frames,
                height: a.height,
                width: a.width,
                vae_spatial: a.vae_spatial,
                vae_temporal: a.vae_temporal,
                causal_first_frame: !a.no_causal_first_frame,
                patch: a.patch,
            };
            let r = token_report(&spec, a.stages)?;
            println!("metric,value");
            println!("latent_frames,{}", r.latent_frames);
            println!("tokens_per_frame,{}", r.tokens_per_frame);
            println!("full_tokens,{}", r.full_tokens);
            println!("pyramid_tokens,{}", r.pyramid_tokens);
            println!("cost_ratio,{}", r.cost_ratio);
            println!("ideal_ratio,{}", r.ideal_ratio);
            Ok(())
        }
        Command::Mask(a) => mask(a),
        Command::Plot(a) => {
            let file = fs::File::open(&a.input)
                .map_err(|e| Invalid(format!("cannot open {}: {e}", a.input.display())))?;
            let trajs = read_trajectories(file)?;
            let name = match &a.output {
                Some(n) => n.clone(),
                None => format!(
                    "{}.svg",
                    a.input.file_stem().map_or("plot".into(), |s| s.to_string_lossy())
                ),
            };
            write_out(&cli.out_dir, &name, render_svg(&trajs).as_bytes())
        }
    }
}

/// Four decimals with trailing zeros removed, keeping one decimal digit.
pub fn fmt4(v: f64) -> String {
    let s = format!("{v:.4}");
    let trimmed = s.trim_end_matches('0');
    if trimmed.ends_with('.') {
        format!("{trimmed}0")
    } else {
        trimmed.to_string()
    }
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn schedule(stages: usize, gamma: f64) -> Result<()> {
    let sch = StageSchedule::build(stages, gamma, Layout::UniformStart)?;
    let mut out = String::from("k,divisor,s,e\n");
    for st in sch.stages().iter().rev() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            st.index,
            1usize << st.index,
            fmt4(st.start),
            fmt4(st.end)
        ));
    }
    print!("{out}");
    Ok(())
}

fn verify_renoise(a: &VerifyArgs, seed: u64) -> Result<()> {
    if a.samples == 0 {
        return Err(Invalid("--samples must be positive".into()).into());
    }
    let params = solve_jump(a.s, a.gamma)?;
    let (r_diag, r_off) = params.matching_residuals();
    let scale = (1.0 - a.s).powi(2);
    let rel_diag = r_diag.abs() / scale;
    let rel_off = r_off.abs() / scale;

    let noise = corrective_noise(
        Shape::new(2, 2 * a.samples, 1),
        a.gamma,
        &mut RngStream::new(seed, 0),
    )?;
    let d = noise.data();
    let w = 2 * a.samples;
    let (mut sq, mut cross, mut max_sum) = (0.0, 0.0, 0.0f64);
    for b in 0..a.samples {
        let v = [d[2 * b], d[2 * b + 1], d[w + 2 * b], d[w + 2 * b + 1]];
        sq += v.iter().map(|x| x * x).sum::<f64>();
        for i in 0..4 {
            for j in i + 1..4 {
                cross += v[i] * v[j];
            }
        }
        max_sum = max_sum.max((v[0] + v[1] + v[2] + v[3]).abs());
    }
    let n = a.samples as f64;
    let diag = sq / (4.0 * n);
    let off = cross / (6.0 * n);

    println!("metric,value");
    println!("gamma,{}", a.gamma);
    println!("s,{}", a.s);
    println!("prev_end,{}", params.prev_end);
    println!("rescale,{}", params.rescale);
    println!("alpha,{}", params.alpha);
    println!("mean_rel_residual,{rel_diag:e}");
    println!("cov_rel_residual,{rel_off:e}");
    println!("blocks,{}", a.samples);
    println!("diag_variance,{diag}");
    println!("offdiag_covariance,{off}");
    println!("max_abs_block_sum,{max_sum}");

    let mut failures = Vec::new();
    if (diag - 1.0).abs() > MOMENT_TOL {
        failures.push(format!("variance {diag:.4} outside 1±{MOMENT_TOL}"));
    }
    if (off - a.gamma).abs() > MOMENT_TOL {
        failures.push(format!("covariance {off:.4} outside {:.4}±{MOMENT_TOL}", a.gamma));
    }
    if rel_diag > IDENTITY_TOL || rel_off > IDENTITY_TOL {
        failures.push("jump parameters miss the matching equations".into());
    }
    if a.gamma <= DEFAULT_GAMMA && max_sum != 0.0 {
        failures.push(format!("block sums not zero (max {max_sum:e})"));
    }
    if failures.is_empty() {
        println!(
            "PASS offdiag {off:.4} in [{:.4}, {:.4}], variance {diag:.4}",
            a.gamma - MOMENT_TOL,
            a.gamma + MOMENT_TOL
        );
        Ok(())
    } else {
        println!("FAIL {}", failures.join("; "));
        Err(Invalid("renoise verification failed".into()).into())
    }
}

fn apply_optim(cfg: &mut TrainConfig, o: &OptimArgs, seed: u64) {
    cfg.seed = seed;
    if let Some(v) = o.steps {
        cfg.steps = v;
    }
    if let Some(v) = o.batch {
        cfg.batch = v;
    }
    if let Some(v) = o.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = o.beta1 {
        cfg.optim.beta1 = v;
    }
    if let Some(v) = o.beta2 {
        cfg.optim.beta2 = v;
    }
    if let Some(v) = o.eps {
        cfg.optim.eps = v;
    }
    if let Some(v) = o.weight_decay {
        cfg.optim.weight_decay = v;
    }
    if o.max_grad_norm.is_some() {
        cfg.optim.max_grad_norm = o.max_grad_norm;
    }
    if let Some(v) = &o.hidden {
        cfg.hidden = v.clone();
    }
    if let Some(v) = o.frequencies {
        cfg.frequencies = v;
    }
    if let Some(v) = o.sample_steps {
        cfg.sample_steps = v;
    }
    if let Some(v) = o.eval_samples {
        cfg.eval_samples = v;
    }
}

fn metrics_csv(losses: &[StepMetric]) -> String {
    let mut s = String::from("step,loss,evaluations\n");
    for m in losses {
        s.push_str(&format!("{},{},{}\n", m.step, m.loss, m.evaluations));
    }
    s
}

/// Concatenates trajectories under one header; `step` restarts at 0 for each.
fn trajectories_csv(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let mut buf = Vec::new();
        t.write_csv(&mut buf)?;
        let body = if i == 0 {
            &buf[..]
        } else {
            let nl = buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |p| p + 1);
            &buf[nl..]
        };
        out.extend_from_slice(body);
    }
    Ok(out)
}

fn train_toy(a: &ToyArgs, cli: &Cli) -> Result<()> {
    let modes = match a.coupling.as_str() {
        "both" => vec![Coupling::Ours, Coupling::Random],
        other => vec![other.parse::<Coupling>()?],
    };
    let mut summary = String::from("coupling,points,steps,final_loss,straightness,mean_nearest_distance\n");
    for mode in modes {
        let mut cfg = TrainConfig::toy2d();
        cfg.points = a.points;
        cfg.coupling = mode;
        apply_optim(&mut cfg, &a.optim, cli.seed);
        let (net, report) = train_toy2d(&cfg)?;
        let tag = format!("toy2d_{mode}");
        write_out(&cli.out_dir, &format!("{tag}_metrics.csv"), metrics_csv(&report.losses).as_bytes())?;
        let ckpt = Checkpoint {
            net,
            kind: FieldKind::Point,
            sample_shape: Shape::new(1, 1, 2),
            gamma: DEFAULT_GAMMA,
        };
        write_out(&cli.out_dir, &format!("{tag}_model.pyrm"), &ckpt.to_bytes())?;
        let csv = trajectories_csv(&report.trajectories)?;
        write_out(&cli.out_dir, &format!("{tag}_trajectories.csv"), &csv)?;
        let svg = render_svg(&read_trajectories(&csv[..])?);
        write_out(&cli.out_dir, &format!("{tag}.svg"), svg.as_bytes())?;
        summary.push_str(&format!(
            "{mode},{},{},{},{},{}\n",
            cfg.points,
            report.losses.len(),
            report.losses.last().map_or(f64::NAN, |m| m.loss),
            report.straightness,
            report.mean_nearest_distance
        ));
    }
    print!("{summary}");
    write_out(&cli.out_dir, "toy2d_summary.csv", summary.as_bytes())
}

fn train_image(a: &ImageArgs, cli: &Cli) -> Result<()> {
    let mut cfg = TrainConfig::tiny_image();
    cfg.stages = a.stages;
    cfg.pixel_budget = a.pixel_budget;
    if let Some(n) = a.dataset_size {
        cfg.dataset_size = n;
    }
    apply_optim(&mut cfg, &a.optim, cli.seed);
    let (net, report) = train_tinyimage(&cfg)?;
    let tag = format!("image_k{}", cfg.stages);
    write_out(&cli.out_dir, &format!("{tag}_metrics.csv"), metrics_csv(&report.losses).as_bytes())?;
    let ckpt = Checkpoint {
        net,
        kind: FieldKind::Pixel,
        sample_shape: Shape::new(IMAGE_SIZE, IMAGE_SIZE, 1),
        gamma: DEFAULT_GAMMA,
    };
    write_out(&cli.out_dir, &format!("{tag}_model.pyrm"), &ckpt.to_bytes())?;
    let summary = format!(
        "stages,steps,pixel_evaluations,final_loss,energy_distance\n{},{},{},{},{}\n",
        cfg.stages,
        report.steps,
        report.pixel_evaluations,
        report.losses.last().map_or(f64::NAN, |m| m.loss),
        report.energy_distance
    );
    print!("{summary}");
    write_out(&cli.out_dir, &format!("{tag}_summary.csv"), summary.as_bytes())
}

fn sample_cmd(a: &SampleArgs, cli: &Cli) -> Result<()> {
    let file = fs::File::open(&a.model)
        .map_err(|e| Invalid(format!("cannot open {}: {e}", a.model.display())))?;
    let ckpt = Checkpoint::read_from(std::io::BufReader::new(file))?;
    let (grid, traj) = match ckpt.kind {
        FieldKind::Point => {
            let steps = a.steps.clone().unwrap_or_else(|| vec![16]);
            if steps.windows(2).any(|w| w[0] != w[1]) {
                return Err(Invalid("toy models use one step count for both windows".into()).into());
            }
            let field = PointField { net: ckpt.net };
            let mut trajs = sample_toy(&field, 1, steps[0], cli.seed)?;
            let traj = trajs.pop().expect("one trajectory");
            let last = traj.points.last().expect("non-empty").state.clone();
            (last, traj)
        }
        FieldKind::Pixel => {
            let k = ckpt.net.embedding().stages.max(1);
            let schedule = StageSchedule::build(k, ckpt.gamma, Layout::UniformStart)?;
            let mut cfg = SamplerConfig::new(k, cli.seed);
            if let Some(s) = &a.steps {
                cfg.steps_per_stage = s.clone();
            }
            cfg.guidance_scale = a.guidance;
            cfg.renoise = !a.no_renoise;
            let field = PixelField { net: ckpt.net };
            sample(&field, &schedule, &cfg, ckpt.sample_shape, None)?
        }
    };
    write_out(&cli.out_dir, "sample.pyrg", &grid.to_bytes())?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    write_out(&cli.out_dir, "sample_trajectory.csv", &csv)?;
    let mean = grid.data().iter().sum::<f64>() / grid.len() as f64;
    println!("shape,{}", grid.shape());
    println!("mean,{mean}");
    Ok(())
}

fn mask(a: &MaskArgs) -> Result<()> {
    if a.frames == 0 {
        return Err(Invalid("--frames must be at least 1".into()).into());
    }
    let full = Shape::new(a.height, a.width, 1);
    let coarsest = 1usize << a.stages.saturating_sub(1);
    full.reduced(coarsest)?;
    let divisors = history_divisors(a.frames - 1, a.stage, a.stages)?;
    let mut per_frame: Vec<usize> = divisors
        .iter()
        .map(|&d| full.reduced(d).map(|s| s.pixels()))
        .collect::<pyramid_flow::Result<_>>()?;
    per_frame.push(full.reduced(1 << a.stage)?.pixels());
    let m = causal_mask(&per_frame)?;
    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    write!(w, "query,frame")?;
    for k in 0..m.len() {
        write!(w, ",k{k}")?;
    }
    writeln!(w)?;
    for q in 0..m.len() {
        write!(w, "{q},{}", m.frame_of_token[q])?;
        for &allowed in m.row(q) {
            write!(w, ",{}", u8::from(allowed))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyramid_flow::grid::LatentGrid;

    #[test]
    fn four_decimal_format() {
        assert_eq!(fmt4(2.0 / 3.0), "0.6667");
        assert_eq!(fmt4(1.0), "1.0");
        assert_eq!(fmt4(0.8), "0.8");
        assert_eq!(fmt4(0.0), "0.0");
        assert_eq!(fmt4(0.5), "0.5");
        assert_eq!(fmt4(1.0 / 3.0), "0.3333");
    }

    #[test]
    fn trajectory_concatenation_keeps_one_header() {
        let p = |v: f64| pyramid_flow::sampler::TrajectoryPoint {
            t: 0.0,
            stage: 0,
            state: LatentGrid::new(Shape::new(1, 1, 2), vec![v, v]).unwrap(),
        };
        let t = Trajectory {
            points: vec![p(0.0), p(1.0)],
        };
        let csv = String::from_utf8(trajectories_csv(&[t.clone(), t]).unwrap()).unwrap();
        assert_eq!(csv.matches("step").count(), 1);
        assert_eq!(csv.lines().count(), 5);
    }
}
