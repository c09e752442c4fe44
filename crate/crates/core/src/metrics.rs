//! Two-sample statistics on point clouds: energy distance and a smoothed
//! histogram KL divergence.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn rows(a: &Tensor) -> (usize, usize) {
    a.dims2()
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (n, d) = rows(a);
    let (m, _) = rows(b);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for i in 0..n {
        let x = &ad[i * d..(i + 1) * d];
        let mut row = 0.0;
        for j in 0..m {
            let y = &bd[j * d..(j + 1) * d];
            row += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
        total += row;
    }
    total / (n * m) as f64
}

/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` with every expectation an exact mean over
/// all pairs (diagonal included), so identical multisets score zero.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("energy distance needs two non-empty sets"));
    }
    if rows(a).1 != rows(b).1 {
        return Err(Error::ShapeMismatch {
            op: "energy_distance",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let ab = mean_pair_distance(a, b);
    let aa = mean_pair_distance(a, a);
    let bb = mean_pair_distance(b, b);
    // Rounding can leave a tiny negative residue for identical sets.
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Axis-aligned 2D grid. Points outside it are counted in the nearest edge bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramGrid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub bins: [usize; 2],
}

impl Default for HistogramGrid {
    fn default() -> Self {
        Self {
            lo: [-4.0, -4.0],
            hi: [4.0, 4.0],
            bins: [32, 32],
        }
    }
}

impl HistogramGrid {
    pub fn validate(&self) -> Result<()> {
        for k in 0..2 {
            if !(self.lo[k] < self.hi[k]) || self.bins[k] == 0 {
                return Err(Error::invalid(format!("degenerate histogram grid {self:?}")));
            }
        }
        Ok(())
    }

    fn cell(&self, p: &[f64]) -> usize {
        let idx = |k: usize| {
            let w = (self.hi[k] - self.lo[k]) / self.bins[k] as f64;
            let i = ((p[k] - self.lo[k]) / w).floor();
            if i.is_nan() || i < 0.0 {
                0
            } else {
                (i as usize).min(self.bins[k] - 1)
            }
        };
        idx(0) * self.bins[1] + idx(1)
    }

    /// Normalised histogram with `smoothing` pseudo-counts added to every bin.
    pub fn histogram(&self, a: &Tensor, smoothing: f64) -> Result<Vec<f64>> {
        self.validate()?;
        let (n, d) = rows(a);
        if d != 2 {
            return Err(Error::invalid(format!("histograms need 2-D points, got {d}-D")));
        }
        let cells = self.bins[0] * self.bins[1];
        let mut h = vec![smoothing; cells];
        for i in 0..n {
            h[self.cell(&a.data()[i * 2..i * 2 + 2])] += 1.0;
        }
        let total = n as f64 + smoothing * cells as f64;
        h.iter_mut().for_each(|x| *x /= total);
        Ok(h)
    }
}

/// `KL(P_a ‖ P_b)` between additively smoothed histograms on a shared grid.
pub fn histogram_kl(a: &Tensor, b: &Tensor, grid: &HistogramGrid, smoothing: f64) -> Result<f64> {
    if !(smoothing > 0.0) {
        return Err(Error::invalid("histogram smoothing must be positive"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("histogram KL needs two non-empty sets"));
    }
    let p = grid.histogram(a, smoothing)?;
    let q = grid.histogram(b, smoothing)?;
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}
