//! Rectangular binnings over `(x, y)` and gridded functions on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

/// A partition of `[lo, hi]` into `n` cells, uniform in `x` or in `ln x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub spacing: Spacing,
}

impl Axis {
    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Axis::build(lo, hi, n, Spacing::Linear)
    }

    pub fn log(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0) {
            return Err(Error::Domain(format!("log axis needs lo > 0, got {lo}")));
        }
        Axis::build(lo, hi, n, Spacing::Log)
    }

    fn build(lo: f64, hi: f64, n: usize, spacing: Spacing) -> Result<Self> {
        if n == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(format!("bad axis [{lo}, {hi}] with {n} cells")));
        }
        Ok(Axis { lo, hi, n, spacing })
    }

    #[inline]
    fn forward(&self, v: f64) -> f64 {
        match self.spacing {
            Spacing::Linear => v,
            Spacing::Log => v.ln(),
        }
    }

    #[inline]
    fn backward(&self, u: f64) -> f64 {
        match self.spacing {
            Spacing::Linear => u,
            Spacing::Log => u.exp(),
        }
    }

    pub fn edge(&self, i: usize) -> f64 {
        if i == 0 {
            return self.lo;
        }
        if i == self.n {
            return self.hi;
        }
        let (a, b) = (self.forward(self.lo), self.forward(self.hi));
        self.backward(a + (b - a) * i as f64 / self.n as f64)
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.edge(i)).collect()
    }

    /// Cell midpoint in the axis' own scale (geometric mean for log spacing).
    pub fn center(&self, i: usize) -> f64 {
        let (a, b) = (self.forward(self.lo), self.forward(self.hi));
        self.backward(a + (b - a) * (i as f64 + 0.5) / self.n as f64)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.edge(i + 1) - self.edge(i)
    }

    /// Cell containing `v`; the upper edge belongs to the last cell.
    #[inline]
    pub fn locate(&self, v: f64) -> Option<usize> {
        if !(v >= self.lo && v <= self.hi) {
            return None;
        }
        let (a, b) = (self.forward(self.lo), self.forward(self.hi));
        let u = (self.forward(v) - a) / (b - a) * self.n as f64;
        Some((u as usize).min(self.n - 1))
    }

    /// Interpolation bracket among cell centers: `(i, i + 1, t)` with `v ~ (1-t) c_i + t c_{i+1}`
    /// in the axis scale, clamped to the outermost centers.
    #[inline]
    pub fn bracket(&self, v: f64) -> (usize, usize, f64) {
        if self.n == 1 {
            return (0, 0, 0.0);
        }
        let (a, b) = (self.forward(self.lo), self.forward(self.hi));
        let u = if v > 0.0 || self.spacing == Spacing::Linear {
            (self.forward(v) - a) / (b - a) * self.n as f64 - 0.5
        } else {
            f64::NEG_INFINITY
        };
        if !(u > 0.0) {
            return (0, 1, 0.0);
        }
        let top = (self.n - 1) as f64;
        if u >= top {
            return (self.n - 2, self.n - 1, 1.0);
        }
        let i = u as usize;
        (i, i + 1, u - i as f64)
    }
}

/// Product binning: `d` lag axes followed by the size axis. Flat indices are
/// row-major with the size axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub x_axes: Vec<Axis>,
    pub y_axis: Axis,
}

impl Binning {
    pub fn new(x_axes: Vec<Axis>, y_axis: Axis) -> Self {
        assert!(!x_axes.is_empty(), "at least one lag axis");
        Binning { x_axes, y_axis }
    }

    /// The box `[-l, l]^d x [1/l, l]` with `nx` linear and `ny` log-spaced cells.
    pub fn truncation_box(dim: usize, l: f64, nx: usize, ny: usize) -> Result<Self> {
        Binning::with_y_range(dim, l, 1.0 / l, l, nx, ny)
    }

    pub fn with_y_range(dim: usize, x_half: f64, y_lo: f64, y_hi: f64, nx: usize, ny: usize) -> Result<Self> {
        let ax = Axis::linear(-x_half, x_half, nx)?;
        Ok(Binning::new(vec![ax; dim], Axis::log(y_lo, y_hi, ny)?))
    }

    pub fn dim(&self) -> usize {
        self.x_axes.len()
    }

    pub fn len(&self) -> usize {
        self.x_axes.iter().map(|a| a.n).product::<usize>() * self.y_axis.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn locate(&self, x: &[f64], y: f64) -> Option<usize> {
        let mut idx = 0;
        for (ax, &c) in self.x_axes.iter().zip(x) {
            idx = idx * ax.n + ax.locate(c)?;
        }
        Some(idx * self.y_axis.n + self.y_axis.locate(y)?)
    }

    /// Per-axis indices of a flat cell index, lag axes first.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim() + 1];
        out[self.dim()] = flat % self.y_axis.n;
        flat /= self.y_axis.n;
        for k in (0..self.dim()).rev() {
            out[k] = flat % self.x_axes[k].n;
            flat /= self.x_axes[k].n;
        }
        out
    }

    pub fn cell_center(&self, flat: usize) -> (Vec<f64>, f64) {
        let idx = self.unflatten(flat);
        let x = self.x_axes.iter().zip(&idx).map(|(ax, &i)| ax.center(i)).collect();
        (x, self.y_axis.center(idx[self.dim()]))
    }

    pub fn cell_volume(&self, flat: usize) -> f64 {
        let idx = self.unflatten(flat);
        let mut v = self.y_axis.width(idx[self.dim()]);
        for (ax, &i) in self.x_axes.iter().zip(&idx) {
            v *= ax.width(i);
        }
        v
    }

    /// Whether the cell touches the outer boundary of the box.
    pub fn on_edge(&self, flat: usize) -> bool {
        let idx = self.unflatten(flat);
        let yi = idx[self.dim()];
        if yi == 0 || yi + 1 == self.y_axis.n {
            return true;
        }
        self.x_axes.iter().zip(&idx).any(|(ax, &i)| i == 0 || i + 1 == ax.n)
    }

    /// Coarsens by merging `fx` lag cells and `fy` size cells per axis.
    pub fn coarsen_map(&self, fx: usize, fy: usize) -> Result<(Binning, Vec<usize>)> {
        if fx == 0
            || fy == 0
            || !self.y_axis.n.is_multiple_of(fy)
            || self.x_axes.iter().any(|a| !a.n.is_multiple_of(fx))
        {
            return Err(Error::BinningMismatch(format!(
                "coarsening factors ({fx}, {fy}) do not divide the binning"
            )));
        }
        let x_axes: Vec<Axis> = self.x_axes.iter().map(|a| Axis { n: a.n / fx, ..*a }).collect();
        let coarse = Binning::new(
            x_axes,
            Axis {
                n: self.y_axis.n / fy,
                ..self.y_axis
            },
        );
        let map = (0..self.len())
            .map(|flat| {
                let idx = self.unflatten(flat);
                let mut c = 0;
                for (k, ax) in coarse.x_axes.iter().enumerate() {
                    c = c * ax.n + idx[k] / fx;
                }
                c * coarse.y_axis.n + idx[self.dim()] / fy
            })
            .collect();
        Ok((coarse, map))
    }
}

/// A function sampled at the cell centers of a binning, interpolated
/// multilinearly (in log-y for a log axis) and clamped outside the centers' hull.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFn {
    pub binning: Binning,
    pub values: Vec<f64>,
}

impl GridFn {
    pub fn new(binning: Binning, values: Vec<f64>) -> Result<Self> {
        if values.len() != binning.len() {
            return Err(Error::BinningMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                binning.len()
            )));
        }
        Ok(GridFn { binning, values })
    }

    pub fn constant(binning: Binning, value: f64) -> Self {
        let n = binning.len();
        GridFn {
            binning,
            values: vec![value; n],
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eval(&self, x: &[f64], y: f64) -> f64 {
        let d = self.binning.dim();
        let mut lo = [0usize; 4];
        let mut hi = [0usize; 4];
        let mut t = [0.0; 4];
        for k in 0..d {
            let (a, b, s) = self.binning.x_axes[k].bracket(x[k]);
            lo[k] = a;
            hi[k] = b;
            t[k] = s;
        }
        let (a, b, s) = self.binning.y_axis.bracket(y);
        lo[d] = a;
        hi[d] = b;
        t[d] = s;
        let mut total = 0.0;
        for corner in 0..(1usize << (d + 1)) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..=d {
                let up = corner >> k & 1 == 1;
                w *= if up { t[k] } else { 1.0 - t[k] };
                let n = if k < d {
                    self.binning.x_axes[k].n
                } else {
                    self.binning.y_axis.n
                };
                flat = flat * n + if up { hi[k] } else { lo[k] };
            }
            if w != 0.0 {
                total += w * self.values[flat];
            }
        }
        total
    }
}
