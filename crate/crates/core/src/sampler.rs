//! One-step and multi-step MeanFlow samplers, plus the Euler flow-matching
//! baseline. All three integrate from noise at `t = 1` to data at `t = 0` on a
//! uniform grid and apply guidance at every network query.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::guidance::{apply_guidance, GuidanceConfig};
use crate::network::{Condition, VelocityField};

/// Guided prediction at a shared `(t, Δt)`: one network call, or two when guided.
pub fn guided_velocity<M: VelocityField + ?Sized>(
    model: &M,
    z: &Tensor,
    t: f64,
    dt: f64,
    conds: &[Condition],
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    let u_c = model.evaluate(z, t, dt, conds)?;
    if !cfg.is_guided() {
        return Ok(u_c);
    }
    let null = vec![Condition::Null; conds.len()];
    let u_u = model.evaluate(z, t, dt, &null)?;
    apply_guidance(&u_c, &u_u, cfg)
}

fn check_output(z: &Tensor) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: "sampler".to_string(),
        })
    }
}

/// `z₀ = ε − u(ε, 1, 1 | c)`, guided.
pub fn one_step_sample<M: VelocityField + ?Sized>(
    model: &M,
    eps: &Tensor,
    conds: &[Condition],
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    let g = guided_velocity(model, eps, 1.0, 1.0, conds, cfg)?;
    let out = eps.zip_map(&g, |e, u| e - u);
    check_output(&out)?;
    Ok(out)
}

/// Grid times `1 = t_n > … > t_0 = 0`, listed from `t_n` down.
pub fn uniform_grid(n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .rev()
        .map(|k| k as f64 / n_steps as f64)
        .collect()
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        Err(Error::invalid("n_steps must be at least 1"))
    } else {
        Ok(())
    }
}

/// Repeated interval jumps `z_r = z_t − (t − r)·u(z_t, t, t − r)`.
pub fn multi_step_sample<M: VelocityField + ?Sized>(
    model: &M,
    eps: &Tensor,
    conds: &[Condition],
    cfg: &GuidanceConfig,
    n_steps: usize,
) -> Result<Tensor> {
    check_steps(n_steps)?;
    let grid = uniform_grid(n_steps);
    let mut z = eps.clone();
    for w in grid.windows(2) {
        let (t, r) = (w[0], w[1]);
        let h = t - r;
        let g = guided_velocity(model, &z, t, h, conds, cfg)?;
        z = z.zip_map(&g, |z, u| z - h * u);
    }
    check_output(&z)?;
    Ok(z)
}

/// Explicit Euler on `dz/dt = u(z, t, 0 | c)` from `t = 1` to `t = 0`.
pub fn fm_euler_sample<M: VelocityField + ?Sized>(
    model: &M,
    eps: &Tensor,
    conds: &[Condition],
    cfg: &GuidanceConfig,
    n_steps: usize,
) -> Result<Tensor> {
    check_steps(n_steps)?;
    let grid = uniform_grid(n_steps);
    let mut z = eps.clone();
    for w in grid.windows(2) {
        let (t, r) = (w[0], w[1]);
        let h = t - r;
        let g = guided_velocity(model, &z, t, 0.0, conds, cfg)?;
        z = z.zip_map(&g, |z, u| z - h * u);
    }
    check_output(&z)?;
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Average-velocity jumps; one step is the one-step sampler.
    Meanflow,
    /// Instantaneous-velocity Euler integration.
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self::one_step()
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SamplerKind::Meanflow => "meanflow",
            SamplerKind::Euler => "euler",
        };
        write!(f, "{kind}-{}", self.steps)
    }
}

impl SamplerSpec {
    pub fn one_step() -> Self {
        Self {
            kind: SamplerKind::Meanflow,
            steps: 1,
        }
    }

    pub fn meanflow(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Meanflow,
            steps,
        }
    }

    pub fn euler(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Euler,
            steps,
        }
    }

    /// Network calls per batch for this sampler under `cfg`.
    pub fn evaluations(&self, cfg: &GuidanceConfig) -> u64 {
        let per_step = if cfg.is_guided() { 2 } else { 1 };
        per_step * self.steps as u64
    }

    pub fn sample<M: VelocityField + ?Sized>(
        &self,
        model: &M,
        eps: &Tensor,
        conds: &[Condition],
        cfg: &GuidanceConfig,
    ) -> Result<Tensor> {
        match (self.kind, self.steps) {
            (SamplerKind::Meanflow, 1) => one_step_sample(model, eps, conds, cfg),
            (SamplerKind::Meanflow, n) => multi_step_sample(model, eps, conds, cfg, n),
            (SamplerKind::Euler, n) => fm_euler_sample(model, eps, conds, cfg, n),
        }
    }
}
