//! SVG rendering of 2D trajectory CSVs. Output depends only on the input bytes.

use std::fmt::Write as _;
use std::io::Read;

use anyhow::Result;
use pyramid_flow::Error as FlowError;

use crate::Invalid;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotPoint {
    pub stage: usize,
    pub x: f64,
    pub y: f64,
}

/// Splits rows into trajectories whenever `step` returns to 0.
pub fn read_trajectories(input: impl Read) -> Result<Vec<Vec<PlotPoint>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(Vec::new());
    }
    if header.len() < 3 || &header[0] != "step" || &header[1] != "t" || &header[2] != "stage" {
        return Err(Invalid("trajectory CSV must start with step,t,stage".into()).into());
    }
    let dims = header.len() - 3;
    if dims != 2 || &header[3] != "v0" {
        return Err(FlowError::Unsupported(format!(
            "plot needs 2D states, found {dims} state column(s)"
        ))
        .into());
    }
    let mut out: Vec<Vec<PlotPoint>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Invalid(format!("bad number {:?}: {e}", &rec[i])).into())
        };
        let step = num(0)?;
        let p = PlotPoint {
            stage: num(2)? as usize,
            x: num(3)?,
            y: num(4)?,
        };
        if step == 0.0 || out.is_empty() {
            out.push(Vec::new());
        }
        out.last_mut().expect("pushed above").push(p);
    }
    Ok(out)
}

fn bounds(trajs: &[Vec<PlotPoint>]) -> (f64, f64, f64, f64) {
    let mut b = (-1.0f64, 1.0f64, -1.0f64, 1.0f64);
    for p in trajs.iter().flatten() {
        if p.x.is_finite() && p.y.is_finite() {
            b = (b.0.min(p.x), b.1.max(p.x), b.2.min(p.y), b.3.max(p.y));
        }
    }
    let pad = 0.05 * (b.1 - b.0).max(b.3 - b.2);
    (b.0 - pad, b.1 + pad, b.2 - pad, b.3 + pad)
}

pub fn render_svg(trajs: &[Vec<PlotPoint>]) -> String {
    let (x0, x1, y0, y1) = bounds(trajs);
    let span = SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * span;
    let sy = |y: f64| SIZE - MARGIN - (y - y0) / (y1 - y0) * span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{span}\" height=\"{span}\" fill=\"none\" stroke=\"#888\"/>"
    );
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#bbb\"/>",
        sx(x0),
        sy(0.0),
        sx(x1),
        sy(0.0)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#bbb\"/>",
        sx(0.0),
        sy(y0),
        sx(0.0),
        sy(y1)
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.2}</text>",
            sx(v),
            SIZE - MARGIN + 14.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>",
            MARGIN - 4.0,
            sy(v) + 4.0
        );
    }
    for traj in trajs {
        let mut i = 0;
        while i < traj.len() {
            let stage = traj[i].stage;
            let mut j = i;
            while j + 1 < traj.len() && traj[j + 1].stage == stage {
                j += 1;
            }
            let pts: Vec<String> = traj[i..=j]
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1\" stroke-opacity=\"0.6\"/>",
                pts.join(" "),
                PALETTE[stage % PALETTE.len()]
            );
            // the next window starts where this one ended
            i = j + 1;
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_axes_only() {
        let trajs = read_trajectories(&b""[..]).unwrap();
        assert!(trajs.is_empty());
        let svg = render_svg(&trajs);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("<line"));
        assert!(!svg.contains("<polyline"));
        let header_only = read_trajectories(&b"step,t,stage,v0,v1\n"[..]).unwrap();
        assert!(header_only.is_empty());
    }

    #[test]
    fn straight_trajectory_is_collinear() {
        let csv = "step,t,stage,v0,v1\n0,0,0,0,0\n1,0.5,0,0.5,0.5\n2,1,0,1,1\n";
        let trajs = read_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(trajs.len(), 1);
        let svg = render_svg(&trajs);
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts: Vec<(f64, f64)> = line
            .split('"')
            .nth(1)
            .unwrap()
            .split(' ')
            .map(|p| {
                let (a, b) = p.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        assert_eq!(pts.len(), 3);
        let cross = (pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1) - (pts[1].1 - pts[0].1) * (pts[2].0 - pts[0].0);
        assert!(cross.abs() < 0.1, "{cross}");
    }

    #[test]
    fn splits_on_step_reset_and_colors_by_stage() {
        let csv = "step,t,stage,v0,v1\n0,0,1,0,0\n1,0.5,0,1,1\n0,0,1,0,1\n1,0.5,0,1,0\n";
        let trajs = read_trajectories(csv.as_bytes()).unwrap();
        assert_eq!(trajs.len(), 2);
        let svg = render_svg(&trajs);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains(PALETTE[0]) && svg.contains(PALETTE[1]));
    }

    #[test]
    fn rejects_higher_dimensions() {
        let csv = "step,t,stage,v0,v1,v2\n0,0,0,0,0,0\n";
        let err = read_trajectories(csv.as_bytes()).unwrap_err();
        assert!(matches!(err.downcast_ref::<FlowError>(), Some(FlowError::Unsupported(_))));
        let summary = "step,t,stage,mean,std,min,max\n";
        assert!(read_trajectories(summary.as_bytes()).is_err());
    }
}
