//! Time-pair sampling and classifier-free guidance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Logit-normal `(r, t)` sampling with a configurable share of `r ≠ t` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimePairConfig {
    pub mu: f64,
    pub sigma: f64,
    pub neq_ratio: f64,
}

impl Default for TimePairConfig {
    fn default() -> Self {
        Self {
            mu: -2.0,
            sigma: 2.0,
            neq_ratio: 0.1,
        }
    }
}

impl TimePairConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.neq_ratio) {
            return Err(Error::invalid(format!(
                "neq_ratio must lie in [0, 1], got {}",
                self.neq_ratio
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid("sigma must be positive and mu finite"));
        }
        Ok(())
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Largest and smallest f64 strictly inside (0, 1).
const OPEN_UNIT_MAX: f64 = 1.0 - f64::EPSILON / 2.0;
const OPEN_UNIT_MIN: f64 = f64::MIN_POSITIVE;

fn logit_normal<R: Rng + ?Sized>(cfg: &TimePairConfig, rng: &mut R) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    logistic(cfg.mu + cfg.sigma * n).clamp(OPEN_UNIT_MIN, OPEN_UNIT_MAX)
}

/// Draws `(r, t)` with `0 < r ≤ t < 1`.
pub fn sample_time_pair<R: Rng + ?Sized>(cfg: &TimePairConfig, rng: &mut R) -> (f64, f64) {
    let distinct = rng.random::<f64>() < cfg.neq_ratio;
    let a = logit_normal(cfg, rng);
    if !distinct {
        return (a, a);
    }
    let b = logit_normal(cfg, rng);
    (a.min(b), a.max(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Standard,
    Scaled,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Standard => "standard",
            GuidanceMode::Scaled => "scaled",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "standard" => Ok(GuidanceMode::Standard),
            "scaled" => Ok(GuidanceMode::Scaled),
            other => Err(Error::Config(format!(
                "unknown guidance mode {other:?} (none | standard | scaled)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub omega: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self {
            mode: GuidanceMode::None,
            omega: 1.0,
        }
    }

    pub fn standard(omega: f64) -> Self {
        Self {
            mode: GuidanceMode::Standard,
            omega,
        }
    }

    pub fn scaled(omega: f64) -> Self {
        Self {
            mode: GuidanceMode::Scaled,
            omega,
        }
    }

    /// Whether the unconditional branch has to be evaluated.
    pub fn is_guided(&self) -> bool {
        self.mode != GuidanceMode::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_guided() && !(self.omega.is_finite() && self.omega >= 1.0) {
            return Err(Error::invalid(format!(
                "guidance strength must be >= 1, got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

/// Below this `‖u_u‖²` the projection coefficient is treated as undefined.
pub const DEGENERATE_NORM_SQ: f64 = 1e-12;

/// Projection coefficient `⟨u_c, u_u⟩ / ‖u_u‖²`.
pub fn cfg_scale_factor(u_c: &[f64], u_u: &[f64]) -> Result<f64> {
    if u_c.len() != u_u.len() {
        return Err(Error::invalid("guidance branches differ in dimension"));
    }
    let norm_sq: f64 = u_u.iter().map(|x| x * x).sum();
    if norm_sq < DEGENERATE_NORM_SQ {
        return Err(Error::DegenerateDirection(norm_sq));
    }
    let dot: f64 = u_c.iter().zip(u_u).map(|(a, b)| a * b).sum();
    Ok(dot / norm_sq)
}

/// Combines conditional and unconditional predictions row by row.
///
/// A degenerate unconditional row falls back to `s = 1`, i.e. standard CFG.
pub fn apply_guidance(u_c: &Tensor, u_u: &Tensor, cfg: &GuidanceConfig) -> Result<Tensor> {
    if u_c.shape() != u_u.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_guidance",
            left: u_c.shape().to_vec(),
            right: u_u.shape().to_vec(),
        });
    }
    let w = cfg.omega;
    if w == 1.0 {
        return Ok(u_c.clone());
    }
    match cfg.mode {
        GuidanceMode::None => Ok(u_c.clone()),
        GuidanceMode::Standard => Ok(u_c.zip_map(u_u, |c, u| w * c + (1.0 - w) * u)),
        GuidanceMode::Scaled => {
            let d = u_c.cols();
            let mut out = u_c.clone();
            for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
                let uu = u_u.row(i);
                let s = match cfg_scale_factor(u_c.row(i), uu) {
                    Ok(s) => s,
                    Err(Error::DegenerateDirection(_)) => 1.0,
                    Err(e) => return Err(e),
                };
                for (o, u) in row.iter_mut().zip(uu) {
                    *o = w * *o + (1.0 - w) * s * u;
                }
            }
            Ok(out)
        }
    }
}
