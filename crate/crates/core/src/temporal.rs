//! Temporal-pyramid history conditioning.
//!
//! When frame `i` is generated at stage `k`, frame `i-1` conditions it at
//! divisor `2^k`, frame `i-2` at `2^{k+1}` and so on, clamped at the coarsest
//! pyramid level. Attention across frames is blockwise causal. History tokens
//! get positions interpolated onto the full-frame extent, current-stage tokens
//! keep the native lattice of their reduced grid.

use crate::error::{arg_err, dim_err, Result};
use crate::grid::LatentGrid;
use crate::rng::RngStream;
use crate::schedule::Stage;

/// Upper bound of the history corruption strength.
pub const MAX_CORRUPTION: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryMode {
    /// Corrupt each entry with noise of strength `u ~ U[0, 1/3]`.
    Train,
    /// Clean history.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub frame_index: usize,
    pub divisor: usize,
    pub grid: LatentGrid,
    pub corruption: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPyramid {
    /// Oldest first.
    pub entries: Vec<HistoryEntry>,
    pub current_stage: Stage,
}

/// Divisors for `n_past` history frames, oldest first, when the current frame
/// is at stage `k` of a `num_stages` pyramid.
pub fn history_divisors(n_past: usize, k: usize, num_stages: usize) -> Result<Vec<usize>> {
    if num_stages == 0 || k >= num_stages {
        return arg_err(format!("stage {k} outside a {num_stages}-stage pyramid"));
    }
    let max_level = num_stages - 1;
    Ok((0..n_past)
        .map(|i| {
            // i = 0 is the oldest; distance back from the current frame is n_past - i
            let back = n_past - i - 1;
            1usize << (k + back).min(max_level)
        })
        .collect())
}

pub fn build_history(
    past_frames: &[LatentGrid],
    current_stage: &Stage,
    num_stages: usize,
    mode: HistoryMode,
    rng: &mut RngStream,
) -> Result<HistoryPyramid> {
    let divisors = history_divisors(past_frames.len(), current_stage.index, num_stages)?;
    let coarsest = 1usize << (num_stages - 1);
    if let Some(first) = past_frames.first() {
        let shape = first.shape();
        if let Some(bad) = past_frames.iter().find(|f| f.shape() != shape) {
            return dim_err(format!(
                "history frames differ in shape: {shape} vs {}",
                bad.shape()
            ));
        }
        shape.reduced(coarsest)?;
    }
    let mut entries = Vec::with_capacity(past_frames.len());
    for (i, (frame, &d)) in past_frames.iter().zip(&divisors).enumerate() {
        let clean = frame.down(d)?;
        let (grid, corruption) = match mode {
            HistoryMode::Infer => (clean, 0.0),
            HistoryMode::Train => {
                let u = rng.uniform_in(0.0, MAX_CORRUPTION);
                let noise = LatentGrid::gaussian_from(clean.shape(), rng)?;
                (LatentGrid::combine(1.0 - u, &clean, u, &noise)?, u)
            }
        };
        entries.push(HistoryEntry {
            frame_index: i,
            divisor: d,
            grid,
            corruption,
        });
    }
    Ok(HistoryPyramid {
        entries,
        current_stage: *current_stage,
    })
}

impl HistoryPyramid {
    /// Frame index of the frame being generated.
    pub fn current_frame(&self) -> usize {
        self.entries.last().map_or(0, |e| e.frame_index + 1)
    }
}

/// Total tokens: every history grid's `height × width` plus the current stage.
pub fn token_count(history: &HistoryPyramid, current_stage_tokens: usize) -> usize {
    history
        .entries
        .iter()
        .map(|e| e.grid.height() * e.grid.width())
        .sum::<usize>()
        + current_stage_tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub frame_of_token: Vec<usize>,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.frame_of_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_of_token.is_empty()
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len() + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        let n = self.len();
        &self.allowed[query * n..(query + 1) * n]
    }
}

/// Blockwise causal mask: full attention within a frame, none to later frames.
pub fn causal_mask(tokens_per_frame: &[usize]) -> Result<AttentionMask> {
    if tokens_per_frame.is_empty() {
        return arg_err("causal mask needs at least one frame");
    }
    let frame_of_token: Vec<usize> = tokens_per_frame
        .iter()
        .enumerate()
        .flat_map(|(f, &n)| std::iter::repeat_n(f, n))
        .collect();
    let n = frame_of_token.len();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = frame_of_token[k] <= frame_of_token[q];
        }
    }
    Ok(AttentionMask {
        frame_of_token,
        allowed,
    })
}

/// Coordinates of one frame's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionBlock {
    pub frame: usize,
    pub divisor: usize,
    pub rows: usize,
    pub cols: usize,
    /// `true` for history (interpolated onto the full-frame extent).
    pub interpolated: bool,
    /// `(row, col)` per token, row-major.
    pub coords: Vec<(f64, f64)>,
}

impl PositionBlock {
    /// Physical extent `(row_min, row_max, col_min, col_max)` covered by the
    /// token cells, each token spanning `divisor` units when interpolated and
    /// one unit otherwise.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let half = if self.interpolated {
            self.divisor as f64 / 2.0
        } else {
            0.5
        };
        let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(r, c) in &self.coords {
            r0 = r0.min(r - half);
            r1 = r1.max(r + half);
            c0 = c0.min(c - half);
            c1 = c1.max(c + half);
        }
        (r0, r1, c0, c1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    /// History blocks oldest first, then the current-stage block.
    pub blocks: Vec<PositionBlock>,
}

/// Block-centre coordinate of cell `i` at divisor `d` on the full grid.
fn interpolated_coord(i: usize, d: usize) -> f64 {
    (i * d) as f64 + (d as f64 - 1.0) / 2.0
}

pub fn position_grids(history: &HistoryPyramid, full_dims: (usize, usize)) -> Result<PositionGrid> {
    let (h, w) = full_dims;
    let mut blocks = Vec::with_capacity(history.entries.len() + 1);
    for e in &history.entries {
        let (rows, cols) = (e.grid.height(), e.grid.width());
        if rows * e.divisor != h || cols * e.divisor != w {
            return dim_err(format!(
                "history entry {rows}x{cols} at divisor {} does not tile {h}x{w}",
                e.divisor
            ));
        }
        let mut coords = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                coords.push((interpolated_coord(r, e.divisor), interpolated_coord(c, e.divisor)));
            }
        }
        blocks.push(PositionBlock {
            frame: e.frame_index,
            divisor: e.divisor,
            rows,
            cols,
            interpolated: true,
            coords,
        });
    }
    let d = history.current_stage.divisor;
    if h % d != 0 || w % d != 0 {
        return dim_err(format!("{h}x{w} not divisible by stage divisor {d}"));
    }
    let (rows, cols) = (h / d, w / d);
    let mut coords = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            coords.push((r as f64, c as f64));
        }
    }
    blocks.push(PositionBlock {
        frame: history.current_frame(),
        divisor: d,
        rows,
        cols,
        interpolated: false,
        coords,
    });
    Ok(PositionGrid { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;

    fn frames(n: usize, h: usize, w: usize) -> Vec<LatentGrid> {
        (0..n)
            .map(|i| LatentGrid::gaussian(Shape::new(h, w, 1), 1, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn single_clean_history_entry() {
        let st = Stage::new(0, 2.0 / 3.0, 1.0).unwrap();
        let past = frames(1, 8, 8);
        let h = build_history(&past, &st, 3, HistoryMode::Infer, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(h.entries.len(), 1);
        assert_eq!(h.entries[0].divisor, 1);
        assert_eq!(h.entries[0].grid, past[0]);
        assert_eq!(h.entries[0].corruption, 0.0);
    }

    #[test]
    fn divisors_follow_recurrence_with_clamp() {
        assert_eq!(history_divisors(4, 0, 3).unwrap(), vec![4, 4, 2, 1]);
        assert_eq!(history_divisors(3, 1, 3).unwrap(), vec![4, 4, 2]);
        assert_eq!(history_divisors(2, 0, 1).unwrap(), vec![1, 1]);
        assert!(history_divisors(2, 3, 3).is_err());
        let st = Stage::new(0, 2.0 / 3.0, 1.0).unwrap();
        let h = build_history(&frames(4, 8, 8), &st, 3, HistoryMode::Infer, &mut RngStream::new(0, 0)).unwrap();
        let shapes: Vec<usize> = h.entries.iter().map(|e| e.grid.height()).collect();
        assert_eq!(shapes, vec![2, 2, 4, 8]);
    }

    #[test]
    fn training_corruption_is_reproducible_and_bounded() {
        let st = Stage::new(1, 1.0 / 3.0, 0.8).unwrap();
        let past = frames(6, 8, 8);
        let a = build_history(&past, &st, 3, HistoryMode::Train, &mut RngStream::new(3, 0)).unwrap();
        let b = build_history(&past, &st, 3, HistoryMode::Train, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(a, b);
        let strengths: Vec<f64> = a.entries.iter().map(|e| e.corruption).collect();
        assert!(strengths.iter().all(|&u| (0.0..=MAX_CORRUPTION).contains(&u)));
        // independent strengths per entry
        assert!(strengths.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn history_shape_errors() {
        let st = Stage::new(0, 0.5, 1.0).unwrap();
        let mut past = frames(2, 8, 8);
        past.push(LatentGrid::zeros(Shape::new(4, 4, 1)).unwrap());
        assert!(build_history(&past, &st, 2, HistoryMode::Infer, &mut RngStream::new(0, 0)).is_err());
        let odd = frames(1, 6, 6);
        assert!(build_history(&odd, &st, 3, HistoryMode::Infer, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = causal_mask(&[3]).unwrap();
        assert!((0..3).all(|q| m.row(q).iter().all(|&a| a)));
        let m = causal_mask(&[2, 2, 2]).unwrap();
        assert_eq!(m.len(), 6);
        for q in 0..6 {
            for k in 0..6 {
                assert_eq!(m.allowed(q, k), k / 2 <= q / 2);
            }
        }
        let m = causal_mask(&[1, 3, 2]).unwrap();
        let sums: Vec<usize> = (0..6).map(|q| m.row(q).iter().filter(|&&a| a).count()).collect();
        assert_eq!(sums, vec![1, 4, 4, 4, 6, 6]);
        assert!(causal_mask(&[]).is_err());
    }

    #[test]
    fn position_examples() {
        let full = Stage::new(0, 0.0, 1.0).unwrap();
        let empty = HistoryPyramid {
            entries: vec![],
            current_stage: full,
        };
        let g = position_grids(&empty, (4, 4)).unwrap();
        assert_eq!(g.blocks.len(), 1);
        assert_eq!(g.blocks[0].coords[5], (1.0, 1.0));
        assert_eq!(g.blocks[0].coords.last(), Some(&(3.0, 3.0)));

        let st = Stage::new(0, 0.5, 1.0).unwrap();
        let h = build_history(&frames(2, 4, 4), &st, 3, HistoryMode::Infer, &mut RngStream::new(0, 0)).unwrap();
        let g = position_grids(&h, (4, 4)).unwrap();
        let hist2 = &g.blocks[1];
        assert_eq!(hist2.divisor, 1);
        let hist1 = &g.blocks[0];
        assert_eq!(hist1.divisor, 2);
        assert_eq!(hist1.coords, vec![(0.5, 0.5), (0.5, 2.5), (2.5, 0.5), (2.5, 2.5)]);
        assert_eq!(hist1.extent(), hist2.extent());
        assert_eq!(hist1.extent(), (-0.5, 3.5, -0.5, 3.5));
        assert_eq!(g.blocks[2].frame, 2);
    }

    #[test]
    fn current_stage_positions_extrapolate() {
        let st = Stage::new(2, 0.0, 0.5).unwrap();
        let h = HistoryPyramid {
            entries: vec![],
            current_stage: st,
        };
        let g = position_grids(&h, (8, 8)).unwrap();
        let b = &g.blocks[0];
        assert_eq!((b.rows, b.cols), (2, 2));
        assert_eq!(b.coords, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn token_counts() {
        let full = Stage::new(0, 0.0, 1.0).unwrap();
        let empty = HistoryPyramid {
            entries: vec![],
            current_stage: full,
        };
        assert_eq!(token_count(&empty, 3840), 3840);
        // two frames at divisors (2, 1) on a 48x80 latent
        let st = Stage::new(0, 0.5, 1.0).unwrap();
        let past: Vec<LatentGrid> = (0..2)
            .map(|_| LatentGrid::zeros(Shape::new(48, 80, 1)).unwrap())
            .collect();
        let h = build_history(&past, &st, 2, HistoryMode::Infer, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(token_count(&h, 3840), 8640);
        let per_entry: Vec<usize> = h.entries.iter().map(|e| e.grid.height() * e.grid.width()).collect();
        assert!(per_entry.windows(2).all(|w| w[0] <= w[1]));
    }

    proptest::proptest! {
        #[test]
        fn mask_is_reflexive_and_transitive(tpf in proptest::collection::vec(1usize..4, 1..6)) {
            let m = causal_mask(&tpf).unwrap();
            let n = m.len();
            for q in 0..n {
                proptest::prop_assert!(m.allowed(q, q));
                for k in 0..n {
                    if m.allowed(q, k) {
                        for j in 0..n {
                            if m.allowed(k, j) { proptest::prop_assert!(m.allowed(q, j)); }
                        }
                    }
                }
            }
        }

        #[test]
        fn history_positions_stay_inside_frame(n_past in 0usize..6, k in 0usize..3) {
            let st = Stage::new(k, 0.0, 1.0).unwrap();
            let past: Vec<LatentGrid> = (0..n_past)
                .map(|_| LatentGrid::zeros(Shape::new(8, 8, 1)).unwrap())
                .collect();
            let h = build_history(&past, &st, 3, HistoryMode::Infer, &mut RngStream::new(0, 0)).unwrap();
            let g = position_grids(&h, (8, 8)).unwrap();
            for b in &g.blocks[..n_past] {
                proptest::prop_assert_eq!(b.extent(), (-0.5, 7.5, -0.5, 7.5));
                for &(r, c) in &b.coords {
                    proptest::prop_assert!((0.0..8.0).contains(&r) && (0.0..8.0).contains(&c));
                }
            }
            let cur = g.blocks.last().unwrap();
            proptest::prop_assert_eq!(cur.rows, 8 >> k);
        }
    }
}
