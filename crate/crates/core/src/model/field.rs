//! The velocity-field interface consumed by the sampler, plus adapters that
//! turn an [`MlpNet`] into a field.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::grid::LatentGrid;
use crate::model::mlp::{MlpNet, Workspace};
use crate::temporal::HistoryPyramid;

/// Maps `(noisy latent, global time, stage index, condition)` to a velocity
/// grid of the same shape. Velocities are derivatives with respect to the
/// window-local time `t'`.
pub trait VelocityField {
    fn evaluate(
        &self,
        x: &LatentGrid,
        t: f64,
        stage: usize,
        condition: Option<&HistoryPyramid>,
    ) -> Result<LatentGrid>;
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn evaluate(
        &self,
        x: &LatentGrid,
        t: f64,
        stage: usize,
        condition: Option<&HistoryPyramid>,
    ) -> Result<LatentGrid> {
        (**self).evaluate(x, t, stage, condition)
    }
}

/// The same grid everywhere, broadcast to the query shape when it is a single
/// pixel.
#[derive(Debug, Clone)]
pub struct ConstantField(pub LatentGrid);

impl VelocityField for ConstantField {
    fn evaluate(&self, x: &LatentGrid, _: f64, _: usize, _: Option<&HistoryPyramid>) -> Result<LatentGrid> {
        if self.0.shape() == x.shape() {
            return Ok(self.0.clone());
        }
        if self.0.height() == 1 && self.0.width() == 1 && self.0.channels() == x.channels() {
            let v = self.0.data().to_vec();
            return LatentGrid::from_fn(x.shape(), |_, _, c| v[c]);
        }
        dim_err(format!(
            "constant field {} cannot serve {}",
            self.0.shape(),
            x.shape()
        ))
    }
}

/// Wraps a closure `(x, t, stage) -> velocity`.
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&LatentGrid, f64, usize) -> Result<LatentGrid>,
{
    fn evaluate(&self, x: &LatentGrid, t: f64, stage: usize, _: Option<&HistoryPyramid>) -> Result<LatentGrid> {
        (self.0)(x, t, stage)
    }
}

/// Applies the network to each pixel's channel vector independently; for
/// 1×1 grids this is just the network on a point.
#[derive(Debug, Clone)]
pub struct PointField {
    pub net: MlpNet,
}

impl VelocityField for PointField {
    fn evaluate(&self, x: &LatentGrid, t: f64, stage: usize, _: Option<&HistoryPyramid>) -> Result<LatentGrid> {
        let ch = x.channels();
        if self.net.input_dim() != ch || self.net.output_dim() != ch {
            return dim_err(format!(
                "point network maps {} -> {}, grid has {ch} channels",
                self.net.input_dim(),
                self.net.output_dim()
            ));
        }
        let mut ws = self.net.workspace();
        let mut out = Vec::with_capacity(x.len());
        for px in x.data().chunks(ch) {
            out.extend_from_slice(self.net.forward(&mut ws, px, t, stage)?);
        }
        LatentGrid::new(x.shape(), out).map_err(|_| crate::error::Error::Numerical {
            step: 0,
            message: "network produced a non-finite velocity".into(),
        })
    }
}

/// Per-pixel network over the 3×3 neighbourhood (edge-replicated) plus the
/// pixel's normalised coordinates in `[-1, 1]`.
///
/// One parameter set serves every resolution because the inputs are local.
#[derive(Debug, Clone)]
pub struct PixelField {
    pub net: MlpNet,
}

pub const NEIGHBORHOOD: usize = 9;

impl PixelField {
    pub fn input_dim(channels: usize) -> usize {
        NEIGHBORHOOD * channels + 2
    }

    /// Writes the feature vector for pixel `(r, c)` into `out`.
    pub fn pixel_features(x: &LatentGrid, r: usize, c: usize, out: &mut Vec<f64>) {
        out.clear();
        let (h, w, ch) = (x.height() as isize, x.width() as isize, x.channels());
        for dr in -1..=1isize {
            let rr = (r as isize + dr).clamp(0, h - 1) as usize;
            for dc in -1..=1isize {
                let cc = (c as isize + dc).clamp(0, w - 1) as usize;
                let base = x.index(rr, cc, 0);
                out.extend_from_slice(&x.data()[base..base + ch]);
            }
        }
        out.push(2.0 * (r as f64 + 0.5) / h as f64 - 1.0);
        out.push(2.0 * (c as f64 + 0.5) / w as f64 - 1.0);
    }

    fn check(&self, x: &LatentGrid) -> Result<()> {
        let ch = x.channels();
        if self.net.input_dim() != Self::input_dim(ch) || self.net.output_dim() != ch {
            return dim_err(format!(
                "pixel network maps {} -> {}, grid with {ch} channels needs {} -> {ch}",
                self.net.input_dim(),
                self.net.output_dim(),
                Self::input_dim(ch)
            ));
        }
        Ok(())
    }
}

impl VelocityField for PixelField {
    fn evaluate(&self, x: &LatentGrid, t: f64, stage: usize, _: Option<&HistoryPyramid>) -> Result<LatentGrid> {
        self.check(x)?;
        let ch = x.channels();
        let rows: Vec<Result<Vec<f64>>> = (0..x.height())
            .into_par_iter()
            .map(|r| {
                let mut ws: Workspace = self.net.workspace();
                let mut feats = Vec::with_capacity(self.net.input_dim());
                let mut row = Vec::with_capacity(x.width() * ch);
                for c in 0..x.width() {
                    Self::pixel_features(x, r, c, &mut feats);
                    row.extend_from_slice(self.net.forward(&mut ws, &feats, t, stage)?);
                }
                Ok(row)
            })
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for row in rows {
            out.extend(row?);
        }
        LatentGrid::new(x.shape(), out).map_err(|_| crate::error::Error::Numerical {
            step: 0,
            message: "network produced a non-finite velocity".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;

    #[test]
    fn features_replicate_edges() {
        let x = LatentGrid::from_fn(Shape::new(2, 2, 1), |r, c, _| (r * 2 + c) as f64).unwrap();
        let mut f = Vec::new();
        PixelField::pixel_features(&x, 0, 0, &mut f);
        assert_eq!(&f[..9], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 3.0]);
        assert_eq!(&f[9..], &[-0.5, -0.5]);
    }

    #[test]
    fn constant_field_broadcasts() {
        let c = ConstantField(LatentGrid::new(Shape::new(1, 1, 2), vec![1.0, 2.0]).unwrap());
        let x = LatentGrid::zeros(Shape::new(2, 2, 2)).unwrap();
        let v = c.evaluate(&x, 0.0, 0, None).unwrap();
        assert_eq!(v.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let bad = LatentGrid::zeros(Shape::new(2, 2, 3)).unwrap();
        assert!(c.evaluate(&bad, 0.0, 0, None).is_err());
    }
}
