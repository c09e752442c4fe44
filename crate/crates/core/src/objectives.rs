//! Flow paths and the two regression objectives.
//!
//! The path is `z_t = (1 − t)·x + t·ε` with velocity `v = ε − x`, so `t = 0` is
//! data and `t = 1` is noise. The flow-matching loss regresses the
//! instantaneous velocity. The MeanFlow loss regresses the average velocity
//! over `[r, t]` onto the frozen target `v − (t − r)·du/dt`, where the total
//! derivative holds `r` fixed and is one JVP of the network along
//! `(v, 1, 1)` in `(z, t, Δt)`.

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{Condition, VelocityField};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub r: f64,
    pub t: f64,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub cond: Condition,
}

impl FlowSample {
    pub fn new(x: Vec<f64>, eps: Vec<f64>, r: f64, t: f64, cond: Condition) -> Result<Self> {
        if x.len() != eps.len() {
            return Err(Error::invalid("x and eps differ in dimension"));
        }
        if !(0.0 <= r && r <= t && t <= 1.0) {
            return Err(Error::invalid(format!(
                "time pair must satisfy 0 <= r <= t <= 1, got r={r}, t={t}"
            )));
        }
        let z = x
            .iter()
            .zip(&eps)
            .map(|(x, e)| (1.0 - t) * x + t * e)
            .collect();
        let v = x.iter().zip(&eps).map(|(x, e)| e - x).collect();
        Ok(Self {
            x,
            eps,
            r,
            t,
            z,
            v,
            cond,
        })
    }

    pub fn dt(&self) -> f64 {
        self.t - self.r
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowBatch {
    samples: Vec<FlowSample>,
}

impl FlowBatch {
    pub fn new(samples: Vec<FlowSample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let d = first.x.len();
        if samples.iter().any(|s| s.x.len() != d) {
            return Err(Error::invalid("mixed data dimensions in batch"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[FlowSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn data_dim(&self) -> usize {
        self.samples[0].x.len()
    }

    /// Copy of the batch with every `r` replaced by `t`.
    pub fn with_r_equal_t(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| FlowSample { r: s.t, ..s.clone() })
            .collect();
        Self { samples }
    }

    fn stack(&self, f: impl Fn(&FlowSample) -> &[f64]) -> Tensor {
        let d = self.data_dim();
        let data = self.samples.iter().flat_map(|s| f(s).iter().copied()).collect();
        Tensor::matrix(self.len(), d, data).expect("uniform dimension checked")
    }

    fn column(&self, f: impl Fn(&FlowSample) -> f64) -> Tensor {
        let data = self.samples.iter().map(f).collect();
        Tensor::matrix(self.len(), 1, data).expect("one value per sample")
    }

    fn conds(&self) -> Vec<Condition> {
        self.samples.iter().map(|s| s.cond).collect()
    }
}

/// A recorded scalar loss together with the parameter leaves it depends on.
pub struct LossGraph {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub loss: Var,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self.loss)
    }

    /// Gradient for every model parameter, in model order.
    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        Ok(self.backward()?.collect(&self.tape, &self.params))
    }
}

/// `(1/B)·Σ‖pred − target‖²`
fn mean_sq_error(tape: &mut Tape, pred: Var, target: Var, batch: usize) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let total = tape.sq_norm(diff)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// `v − (t − r)·du`, row by row.
fn target_rows(v: &Tensor, dt: &Tensor, du: &Tensor) -> Tensor {
    let d = v.cols();
    let mut out = v.clone();
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let h = dt.data()[i];
        for (o, g) in row.iter_mut().zip(du.row(i)) {
            *o -= h * g;
        }
    }
    out
}

/// Flow-matching loss: `mean ‖u(z_t, t, 0 | c) − v‖²`. Every sample needs `r == t`.
pub fn fm_loss<M: VelocityField + ?Sized>(model: &M, batch: &FlowBatch) -> Result<LossGraph> {
    if let Some(s) = batch.samples().iter().find(|s| s.r != s.t) {
        return Err(Error::invalid(format!(
            "fm_loss needs r == t, got r={}, t={}",
            s.r, s.t
        )));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true)?;
    let z = tape.input(batch.stack(|s| &s.z))?;
    let t = tape.input(batch.column(|s| s.t))?;
    let dt = tape.input(batch.column(|s| s.dt()))?;
    let u = model.record(&mut tape, &params, z, t, dt, &batch.conds())?;
    let v = tape.input(batch.stack(|s| &s.v))?;
    let loss = mean_sq_error(&mut tape, u, v, batch.len())?;
    Ok(LossGraph { tape, params, loss })
}

/// The frozen regression target `v − (t − r)·du/dt` for every sample.
pub fn meanflow_targets<M: VelocityField + ?Sized>(model: &M, batch: &FlowBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false)?;
    let (u, v, dt) = record_with_tangents(model, &mut tape, &params, batch)?;
    let du = tape.tangent_or_zero(u);
    let target = tape.input(target_rows(&v, &dt, &du))?;
    let frozen = tape.stop_gradient(target)?;
    Ok(tape.value(frozen).clone())
}

pub fn meanflow_target<M: VelocityField + ?Sized>(model: &M, sample: &FlowSample) -> Result<Vec<f64>> {
    let batch = FlowBatch::new(vec![sample.clone()])?;
    Ok(meanflow_targets(model, &batch)?.into_data())
}

fn record_with_tangents<M: VelocityField + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: &[Var],
    batch: &FlowBatch,
) -> Result<(Var, Tensor, Tensor)> {
    let b = batch.len();
    let v = batch.stack(|s| &s.v);
    let dt = batch.column(|s| s.dt());
    let z = tape.input_with_tangent(batch.stack(|s| &s.z), v.clone())?;
    let t = tape.input_with_tangent(batch.column(|s| s.t), Tensor::full(&[b, 1], 1.0))?;
    let dtv = tape.input_with_tangent(dt.clone(), Tensor::full(&[b, 1], 1.0))?;
    let u = model.record(tape, params, z, t, dtv, &batch.conds())?;
    Ok((u, v, dt))
}

/// MeanFlow loss: `mean ‖u(z_t, t, t − r | c) − sg(u_tgt)‖²`.
///
/// One forward pass yields both the prediction and its JVP; the target built
/// from the JVP enters the graph behind a stop-gradient node.
pub fn meanflow_loss<M: VelocityField + ?Sized>(model: &M, batch: &FlowBatch) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true)?;
    let (u, v, dt) = record_with_tangents(model, &mut tape, &params, batch)?;
    let du = tape.tangent_or_zero(u);
    let target = tape.input(target_rows(&v, &dt, &du))?;
    let target = tape.stop_gradient(target)?;
    let loss = mean_sq_error(&mut tape, u, target, batch.len())?;
    Ok(LossGraph { tape, params, loss })
}


#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::network::{ModelConfig, VelocityModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64, perturb: bool) -> VelocityModel {
        let cfg = ModelConfig {
            hidden_dims: vec![12, 12],
            time_embed_dim: 6,
            cond_embed_dim: 3,
            num_conditions: 2,
            max_frequency: 10.0,
            ..ModelConfig::default()
        };
        let mut m = VelocityModel::init(cfg, seed).unwrap();
        if perturb {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for p in m.params_mut() {
                for x in p.data_mut() {
                    *x += rng.random_range(-0.4..0.4);
                }
            }
        }
        m
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> FlowBatch {
        let samples = (0..n)
            .map(|i| {
                let a: f64 = rng.random_range(0.0..1.0);
                let b: f64 = rng.random_range(0.0..1.0);
                let (r, t) = if a <= b { (a, b) } else { (b, a) };
                FlowSample::new(
                    vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    r,
                    t,
                    if i % 3 == 0 { Condition::Null } else { Condition::Class(i % 2) },
                )
                .unwrap()
            })
            .collect();
        FlowBatch::new(samples).unwrap()
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let s = FlowSample::new(vec![1.0, -3.0], vec![0.5, 2.0], 0.0, 0.0, Condition::Null).unwrap();
        assert_eq!(s.z, vec![1.0, -3.0]);
        let s = FlowSample::new(vec![1.0, -3.0], vec![0.5, 2.0], 0.2, 1.0, Condition::Null).unwrap();
        assert_eq!(s.z, vec![0.5, 2.0]);
        let s = FlowSample::new(vec![0.0, 0.0], vec![2.0, -2.0], 0.5, 0.5, Condition::Null).unwrap();
        assert_eq!(s.z, vec![1.0, -1.0]);
        assert_eq!(s.v, vec![2.0, -2.0]);
    }

    #[test]
    fn rejects_r_after_t() {
        assert!(FlowSample::new(vec![0.0], vec![1.0], 0.6, 0.5, Condition::Null).is_err());
        assert!(FlowBatch::new(vec![]).is_err());
    }

    #[test]
    fn fm_loss_with_perfect_predictor_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 8).with_r_equal_t();
        let stub = FixedOutput(batch.stack(|s| &s.v));
        assert_eq!(fm_loss(&stub, &batch).unwrap().value(), 0.0);
    }

    #[test]
    fn fm_loss_of_zero_model_is_mean_velocity_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 16).with_r_equal_t();
        let m = small_model(0, false);
        let expected: f64 = batch
            .samples()
            .iter()
            .map(|s| s.v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            / 16.0;
        let got = fm_loss(&m, &batch).unwrap().value();
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn fm_loss_single_sample_by_hand() {
        let s = FlowSample::new(vec![0.0], vec![2.0], 0.3, 0.3, Condition::Null).unwrap();
        let batch = FlowBatch::new(vec![s]).unwrap();
        let stub = FixedOutput(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        assert_eq!(fm_loss(&stub, &batch).unwrap().value(), 1.0);
    }

    #[test]
    fn fm_loss_rejects_interval_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 4);
        assert!(fm_loss(&small_model(0, false), &batch).is_err());
    }

    #[test]
    fn target_equals_velocity_when_r_equals_t() {
        let m = small_model(4, true);
        let s = FlowSample::new(vec![0.3, 1.0], vec![-1.0, 0.4], 0.7, 0.7, Condition::Class(1)).unwrap();
        assert_eq!(meanflow_target(&m, &s).unwrap(), s.v);
    }

    #[test]
    fn target_of_zero_head_is_velocity() {
        let m = small_model(4, false);
        let s = FlowSample::new(vec![0.3, 1.0], vec![-1.0, 0.4], 0.1, 0.9, Condition::Null).unwrap();
        assert_eq!(meanflow_target(&m, &s).unwrap(), s.v);
    }

    #[test]
    fn target_on_linear_stub() {
        // A = diag(1, 2), v = (1, 1), t − r = 0.5 → (0.5, 0)
        let stub = LinearStub {
            a: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
        };
        let s = FlowSample::new(vec![0.0, 0.0], vec![1.0, 1.0], 0.25, 0.75, Condition::Null).unwrap();
        assert_eq!(meanflow_target(&stub, &s).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn target_jvp_term_matches_finite_differences() {
        let m = small_model(7, true);
        let s = FlowSample::new(vec![0.8, -0.5], vec![0.1, 1.3], 0.2, 0.6, Condition::Class(0)).unwrap();
        let tgt = meanflow_target(&m, &s).unwrap();
        let h = 1e-6;
        let at = |k: f64| {
            let z: Vec<f64> = s.z.iter().zip(&s.v).map(|(z, v)| z + k * v).collect();
            m.forward(&z, s.t + k, s.dt() + k, s.cond).unwrap()
        };
        let (plus, minus) = (at(h), at(-h));
        for i in 0..2 {
            let du = (plus[i] - minus[i]) / (2.0 * h);
            let fd_target = s.v[i] - s.dt() * du;
            let jvp_term = (s.v[i] - tgt[i]) / s.dt();
            assert!((jvp_term - du).abs() <= 1e-4 * du.abs().max(1e-3), "{jvp_term} vs {du}");
            assert!((fd_target - tgt[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn meanflow_reduces_to_fm_when_r_equals_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = small_model(8, true);
        for _ in 0..5 {
            let batch = random_batch(&mut rng, 10).with_r_equal_t();
            let a = meanflow_loss(&m, &batch).unwrap();
            let b = fm_loss(&m, &batch).unwrap();
            assert_eq!(a.value().to_bits(), b.value().to_bits());
            assert_eq!(a.gradients().unwrap(), b.gradients().unwrap());
        }
    }

    #[test]
    fn meanflow_loss_zero_head_by_hand() {
        let m = small_model(0, false);
        let s = FlowSample::new(vec![0.0, 0.0], vec![2.0, 0.0], 0.1, 0.8, Condition::Null).unwrap();
        let batch = FlowBatch::new(vec![s]).unwrap();
        assert_eq!(meanflow_loss(&m, &batch).unwrap().value(), 4.0);
    }

    #[test]
    fn meanflow_loss_with_target_stub_is_zero() {
        let stub = LinearStub {
            a: Tensor::matrix(2, 2, vec![0.0; 4]).unwrap(),
        };
        let s = FlowSample::new(vec![1.0, 2.0], vec![1.0, 2.0], 0.1, 0.8, Condition::Null).unwrap();
        // x == ε gives v = 0, and a zero map predicts the zero target.
        let batch = FlowBatch::new(vec![s]).unwrap();
        assert_eq!(meanflow_loss(&stub, &batch).unwrap().value(), 0.0);
    }

    /// Loss value with the target evaluated at `target_params` and the
    /// prediction at `pred_params`.
    fn split_loss(m: &VelocityModel, pred: &[Tensor], target: &[Tensor], batch: &FlowBatch) -> f64 {
        let pm = VelocityModel::from_params(m.config().clone(), 0, pred.to_vec()).unwrap();
        let tm = VelocityModel::from_params(m.config().clone(), 0, target.to_vec()).unwrap();
        let tgt = meanflow_targets(&tm, batch).unwrap();
        let z = batch.stack(|s| &s.z);
        let mut total = 0.0;
        for (i, s) in batch.samples().iter().enumerate() {
            let zi = Tensor::matrix(1, 2, z.row(i).to_vec()).unwrap();
            let u = pm.evaluate(&zi, s.t, s.dt(), &[s.cond]).unwrap();
            total += u.zip_map(&Tensor::matrix(1, 2, tgt.row(i).to_vec()).unwrap(), |a, b| (a - b).powi(2)).data().iter().sum::<f64>();
        }
        total / batch.len() as f64
    }

    #[test]
    fn gradient_does_not_flow_through_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = small_model(9, true);
        let batch = random_batch(&mut rng, 6);
        let grads = meanflow_loss(&m, &batch).unwrap().gradients().unwrap();
        let base = m.params().to_vec();
        let h = 1e-6;
        // Probe a handful of hidden-layer weights.
        let mut frozen_err: f64 = 0.0;
        let mut live_gap: f64 = 0.0;
        for (pi, idx) in [(1, 0), (1, 17), (3, 5), (5, 1), (0, 2)] {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[pi].data_mut()[idx] += h;
            minus[pi].data_mut()[idx] -= h;
            let frozen = (split_loss(&m, &plus, &base, &batch) - split_loss(&m, &minus, &base, &batch)) / (2.0 * h);
            let live = (split_loss(&m, &plus, &plus, &batch) - split_loss(&m, &minus, &minus, &batch)) / (2.0 * h);
            let g = grads[pi].data()[idx];
            frozen_err = frozen_err.max((g - frozen).abs() / g.abs().max(1e-3));
            live_gap = live_gap.max((g - live).abs() / g.abs().max(1e-3));
        }
        assert!(frozen_err < 1e-5, "frozen-target gradient mismatch {frozen_err}");
        assert!(live_gap > 1e-3, "gradient indistinguishable from the unfrozen objective");
    }
}
