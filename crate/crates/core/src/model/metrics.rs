//! Scalar metrics used by the training experiments.

use crate::error::{arg_err, Result};
use crate::grid::LatentGrid;
use crate::sampler::Trajectory;

/// Mean squared deviation of a trajectory from the straight chord of each of
/// its windows, averaged over windows.
///
/// The points of one window are the consecutive points sharing a stage index;
/// point `j` of `n` is compared with `lerp(first, last, j / n)`.
pub fn straightness(traj: &Trajectory) -> f64 {
    let pts = &traj.points;
    let mut total = 0.0;
    let mut windows = 0usize;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j + 1 < pts.len() && pts[j + 1].stage == pts[i].stage {
            j += 1;
        }
        let seg = &pts[i..=j];
        if seg.len() >= 2 {
            let n = (seg.len() - 1) as f64;
            let a = seg[0].state.data();
            let b = seg[seg.len() - 1].state.data();
            let mut dev = 0.0;
            for (m, p) in seg.iter().enumerate() {
                let w = m as f64 / n;
                dev += p
                    .state
                    .data()
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(x, (a, b))| {
                        let chord = (1.0 - w) * a + w * b;
                        (x - chord) * (x - chord)
                    })
                    .sum::<f64>();
            }
            total += dev / seg.len() as f64;
            windows += 1;
        }
        i = j + 1;
    }
    if windows == 0 {
        0.0
    } else {
        total / windows as f64
    }
}

fn flat_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two-sample energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` on flattened grids.
pub fn energy_distance(xs: &[LatentGrid], ys: &[LatentGrid]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return arg_err("energy distance needs non-empty sample sets");
    }
    let shape = xs[0].shape();
    if xs.iter().chain(ys).any(|g| g.shape() != shape) {
        return arg_err("energy distance needs samples of one shape");
    }
    let mean_cross = |a: &[LatentGrid], b: &[LatentGrid]| -> f64 {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += flat_distance(x.data(), y.data());
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(2.0 * mean_cross(xs, ys) - mean_cross(xs, xs) - mean_cross(ys, ys))
}

/// High-pass residual: each value minus the mean of its edge-replicated 3×3
/// neighbourhood (per channel).
pub fn highpass_residual(g: &LatentGrid) -> LatentGrid {
    let (h, w, ch) = (g.height() as isize, g.width() as isize, g.channels());
    let mut out = Vec::with_capacity(g.len());
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut s = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let rr = (r + dr).clamp(0, h - 1) as usize;
                        let cc = (c + dc).clamp(0, w - 1) as usize;
                        s += g.get(rr, cc, k);
                    }
                }
                out.push(g.get(r as usize, c as usize, k) - s / 9.0);
            }
        }
    }
    LatentGrid::from_parts(g.shape(), out)
}

/// Pearson correlation of high-pass residuals over horizontally and
/// vertically adjacent pixel pairs that lie inside the same aligned 2×2
/// block. Nearest-upsampling artifacts push this toward positive values.
pub fn block_residual_autocorrelation(samples: &[LatentGrid]) -> f64 {
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for g in samples {
        let r = highpass_residual(g);
        for br in 0..g.height() / 2 {
            for bc in 0..g.width() / 2 {
                for k in 0..g.channels() {
                    let (r0, c0) = (2 * br, 2 * bc);
                    let v = |dr: usize, dc: usize| r.get(r0 + dr, c0 + dc, k);
                    pairs.push((v(0, 0), v(0, 1)));
                    pairs.push((v(1, 0), v(1, 1)));
                    pairs.push((v(0, 0), v(1, 0)));
                    pairs.push((v(0, 1), v(1, 1)));
                }
            }
        }
    }
    pearson(&pairs)
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs
        .iter()
        .fold((0.0, 0.0), |(sa, sb), (a, b)| (sa + a, sb + b));
    let (ma, mb) = (ma / n, mb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
