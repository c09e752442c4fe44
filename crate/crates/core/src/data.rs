//! Conditional 2D toy distributions and training-batch assembly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::guidance::{sample_time_pair, TimePairConfig};
use crate::network::Condition;
use crate::objectives::{FlowBatch, FlowSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// One point mass per class.
    Delta { points: Vec<Vec<f64>> },
    /// One isotropic Gaussian per class.
    GaussianMixture { means: Vec<Vec<f64>>, std: f64 },
    /// Two interleaved half circles, one per class.
    Moons { noise: f64 },
    /// Eight squares on `[-2, 2]²`; the class is the quadrant.
    Checkerboard,
}

impl DatasetKind {
    /// `(±2, ±2)` with `σ = 0.3`.
    pub fn default_mixture() -> Self {
        DatasetKind::GaussianMixture {
            means: vec![
                vec![2.0, 2.0],
                vec![-2.0, 2.0],
                vec![-2.0, -2.0],
                vec![2.0, -2.0],
            ],
            std: 0.3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Delta { .. } => "delta",
            DatasetKind::GaussianMixture { .. } => "gaussian_mixture",
            DatasetKind::Moons { .. } => "moons",
            DatasetKind::Checkerboard => "checkerboard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Map<String, serde_json::Value>")]
pub struct ToyDataset {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub seed: u64,
}

// `seed` sits beside the kind's own fields; flattening would lose the
// unknown-field check, so the seed is split off by hand.
impl TryFrom<serde_json::Map<String, serde_json::Value>> for ToyDataset {
    type Error = String;

    fn try_from(mut map: serde_json::Map<String, serde_json::Value>) -> std::result::Result<Self, String> {
        let seed = match map.remove("seed") {
            Some(v) => serde_json::from_value(v).map_err(|e| format!("dataset seed: {e}"))?,
            None => 0,
        };
        let kind: DatasetKind =
            serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| e.to_string())?;
        ToyDataset::new(kind, seed).map_err(|e| e.to_string())
    }
}

impl ToyDataset {
    pub fn new(kind: DatasetKind, seed: u64) -> Result<Self> {
        let ds = Self { kind, seed };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let uniform = |pts: &[Vec<f64>]| {
            let d = pts.first().map_or(0, Vec::len);
            d > 0 && pts.iter().all(|p| p.len() == d && p.iter().all(|x| x.is_finite()))
        };
        match &self.kind {
            DatasetKind::Delta { points } if !uniform(points) => {
                Err(Error::invalid("delta dataset needs at least one finite point"))
            }
            DatasetKind::GaussianMixture { means, .. } if !uniform(means) => {
                Err(Error::invalid("mixture needs at least one finite mean"))
            }
            DatasetKind::GaussianMixture { std, .. } if !(*std > 0.0 && std.is_finite()) => {
                Err(Error::invalid(format!("mixture std must be positive, got {std}")))
            }
            DatasetKind::Moons { noise } if !(*noise > 0.0 && noise.is_finite()) => {
                Err(Error::invalid(format!("moons noise must be positive, got {noise}")))
            }
            _ => Ok(()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.kind {
            DatasetKind::Delta { points } => points.len(),
            DatasetKind::GaussianMixture { means, .. } => means.len(),
            DatasetKind::Moons { .. } => 2,
            DatasetKind::Checkerboard => 4,
        }
    }

    pub fn data_dim(&self) -> usize {
        match &self.kind {
            DatasetKind::Delta { points } => points[0].len(),
            DatasetKind::GaussianMixture { means, .. } => means[0].len(),
            DatasetKind::Moons { .. } | DatasetKind::Checkerboard => 2,
        }
    }

    /// One draw from the class-`class` conditional.
    pub fn draw<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            DatasetKind::Delta { points } => points[class].clone(),
            DatasetKind::GaussianMixture { means, std } => means[class]
                .iter()
                .map(|m| {
                    let n: f64 = StandardNormal.sample(rng);
                    m + std * n
                })
                .collect(),
            DatasetKind::Moons { noise } => {
                let theta = rng.random_range(0.0..PI);
                let (x, y) = if class == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                // Centre on the origin and stretch to roughly [-2, 2].
                vec![
                    1.5 * (x - 0.5 + noise * nx),
                    1.5 * (y - 0.25 + noise * ny),
                ]
            }
            DatasetKind::Checkerboard => {
                // Quadrant q holds two of the eight squares; pick one uniformly.
                let (sx, sy) = (class & 1, class >> 1);
                let cell = rng.random_range(0..2usize);
                // Filled squares have (column + row) even on the 4×4 grid.
                let col = 2 * sx + cell;
                let row = 2 * sy + (col % 2);
                let x = -2.0 + col as f64 + rng.random::<f64>();
                let y = -2.0 + row as f64 + rng.random::<f64>();
                vec![x, y]
            }
        }
    }

    /// A class chosen uniformly, then a draw from that class.
    pub fn draw_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let class = rng.random_range(0..self.num_classes());
        (self.draw(class, rng), class)
    }

    /// The first `n` labelled draws of the stream seeded by `seed`.
    pub fn sample_with_seed(&self, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * self.data_dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, c) = self.draw_labeled(&mut rng);
            data.extend(x);
            labels.push(c);
        }
        let t = Tensor::matrix(n, self.data_dim(), data).expect("sized by construction");
        (t, labels)
    }

    /// The dataset's own stream: draw `i` depends only on `(seed, i)`.
    pub fn sample(&self, n: usize) -> (Tensor, Vec<usize>) {
        self.sample_with_seed(n, self.seed)
    }
}

/// `B` flow samples: `x` from the data, fresh `ε ~ N(0, I)`, logit-normal
/// `(r, t)`, and the label replaced by the null condition with `drop_prob`.
pub fn sample_training_batch<R: Rng + ?Sized>(
    ds: &ToyDataset,
    batch_size: usize,
    drop_prob: f64,
    tp: &TimePairConfig,
    rng: &mut R,
) -> Result<FlowBatch> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::invalid(format!(
            "drop probability must lie in [0, 1], got {drop_prob}"
        )));
    }
    let d = ds.data_dim();
    let samples = (0..batch_size)
        .map(|_| {
            let (x, class) = ds.draw_labeled(rng);
            let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let (r, t) = sample_time_pair(tp, rng);
            let cond = if rng.random::<f64>() < drop_prob {
                Condition::Null
            } else {
                Condition::Class(class)
            };
            FlowSample::new(x, eps, r, t, cond)
        })
        .collect::<Result<Vec<_>>>()?;
    FlowBatch::new(samples)
}
