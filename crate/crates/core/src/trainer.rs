//! AdamW with linear warmup and staged decay, and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{sample_training_batch, ToyDataset};
use crate::error::{Error, Result};
use crate::guidance::TimePairConfig;
use crate::network::{save_checkpoint, VelocityModel};
use crate::objectives::{fm_loss, meanflow_loss, FlowBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Fm,
    Meanflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub step: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub decay_milestones: Vec<Milestone>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub drop_prob: f64,
    pub time_pair: TimePairConfig,
    /// Set from the run seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Global-norm clipping threshold; off when absent.
    pub grad_clip: Option<f64>,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lr_max = 1e-3;
        Self {
            objective: Objective::Meanflow,
            steps: 20_000,
            batch_size: 256,
            lr_max,
            warmup_steps: 500,
            decay_milestones: vec![
                Milestone {
                    step: 12_500,
                    lr: lr_max / 10.0,
                },
                Milestone {
                    step: 17_500,
                    lr: lr_max / 100.0,
                },
            ],
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-6,
            drop_prob: 0.1,
            time_pair: TimePairConfig::default(),
            seed: 0,
            grad_clip: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Same schedule shape over `steps`, milestones at 62.5% and 87.5%.
    pub fn scaled_to(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.warmup_steps = (steps / 40).max(1).min(steps.saturating_sub(1));
        self.decay_milestones = vec![
            Milestone {
                step: steps * 5 / 8,
                lr: self.lr_max / 10.0,
            },
            Milestone {
                step: steps * 7 / 8,
                lr: self.lr_max / 100.0,
            },
        ];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) must be below steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if self
            .decay_milestones
            .windows(2)
            .any(|w| w[0].step >= w[1].step)
        {
            return Err(Error::invalid("decay milestones must be strictly increasing"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::invalid("lr_max must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::invalid("drop_prob must lie in [0, 1]"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        self.time_pair.validate()
    }
}

/// Linear ramp from 0 to `lr_max` over the warmup, then the most recent milestone.
pub fn lr_at_step(cfg: &TrainConfig, step: usize) -> Result<f64> {
    if step >= cfg.steps {
        return Err(Error::invalid(format!(
            "step {step} outside a {}-step run",
            cfg.steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_max * step as f64 / cfg.warmup_steps as f64);
    }
    Ok(cfg
        .decay_milestones
        .iter()
        .take_while(|m| m.step <= step)
        .last()
        .map_or(cfg.lr_max, |m| m.lr))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-decay Adam step with bias correction:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + λ·θ)`.
pub fn adamw_update(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("parameter, gradient and moment counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_update",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient".to_string(),
            });
        }
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let wd = cfg.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * p[i]);
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_gradients(
    model: &VelocityModel,
    batch: &FlowBatch,
    objective: Objective,
) -> Result<(f64, Vec<Tensor>)> {
    let graph = match objective {
        Objective::Fm => fm_loss(model, &batch.with_r_equal_t())?,
        Objective::Meanflow => meanflow_loss(model, batch)?,
    };
    Ok((graph.value(), graph.gradients()?))
}

/// Loss, optional clipping, and one AdamW update. Returns the pre-update loss.
pub fn train_step(
    model: &mut VelocityModel,
    state: &mut OptimizerState,
    batch: &FlowBatch,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_gradients(model, batch, cfg.objective)?;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: state.step as usize,
            lr,
            loss,
        });
    }
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    adamw_update(model.params_mut(), &grads, state, lr, cfg)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VelocityModel,
    pub trace: Vec<TracePoint>,
}

/// Trains `model` in place of a copy; deterministic given `cfg.seed`.
///
/// With the flow-matching objective every batch has `r` forced to `t`.
pub fn train(model: &VelocityModel, ds: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, ds, cfg, |_, _| Ok(()))
}

/// As [`train`], also writing `<stem>-step<N>` every `checkpoint_every` steps
/// and `<stem>` at the end.
pub fn train_with_checkpoints(
    model: &VelocityModel,
    ds: &ToyDataset,
    cfg: &TrainConfig,
    stem: &Path,
) -> Result<TrainOutcome> {
    let every = cfg.checkpoint_every;
    let outcome = run(model, ds, cfg, |m, step| {
        if every > 0 && step % every == 0 && step < cfg.steps {
            let name = format!(
                "{}-step{step}",
                stem.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
            );
            save_checkpoint(m, &stem.with_file_name(name), step)?;
        }
        Ok(())
    })?;
    save_checkpoint(&outcome.model, stem, cfg.steps)?;
    Ok(outcome)
}

fn run(
    model: &VelocityModel,
    ds: &ToyDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&VelocityModel, usize) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.data_dim() != model.config().data_dim || ds.num_classes() > model.config().num_conditions {
        return Err(Error::invalid(format!(
            "dataset ({} dims, {} classes) does not fit the model ({} dims, {} conditions)",
            ds.data_dim(),
            ds.num_classes(),
            model.config().data_dim,
            model.config().num_conditions
        )));
    }
    let mut model = model.clone();
    let mut state = OptimizerState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at_step(cfg, step)?;
        let batch = sample_training_batch(ds, cfg.batch_size, cfg.drop_prob, &cfg.time_pair, &mut rng)?;
        let loss = match train_step(&mut model, &mut state, &batch, lr, cfg) {
            Err(Error::Diverged { loss, .. }) => return Err(Error::Diverged { step, lr, loss }),
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    lr,
                    loss: f64::NAN,
                })
            }
            other => other?,
        };
        trace.push(TracePoint { step, loss, lr });
        on_step(&model, step + 1)?;
    }
    Ok(TrainOutcome { model, trace })
}

/// `step,loss,lr` rows.
pub fn write_trace_csv(trace: &[TracePoint], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: PathBuf::from(path),
        source: e.into(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for p in trace {
        w.serialize(p).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
