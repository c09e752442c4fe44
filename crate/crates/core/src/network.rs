//! The conditional average-velocity network `u(z, t, Δt | c)`.
//!
//! A plain MLP. Its input row is `[z, emb(t), emb(Δt), e_c]` where `emb` is a
//! sinusoidal embedding and `e_c` a learned row of the condition table; the
//! last row of that table is the null condition used for guidance.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

/// A class label, or the null token used for unconditional predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    /// Row of the embedding table selected by this condition.
    pub fn row(self, num_conditions: usize) -> Result<usize> {
        match self {
            Condition::Class(k) if k < num_conditions => Ok(k),
            Condition::Class(k) => Err(Error::invalid(format!(
                "condition {k} out of range for {num_conditions} classes"
            ))),
            Condition::Null => Ok(num_conditions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub num_conditions: usize,
    pub activation: Activation,
    /// Highest angular frequency of the time embedding.
    pub max_frequency: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_dims: vec![128, 128, 128],
            time_embed_dim: 32,
            cond_embed_dim: 16,
            num_conditions: 4,
            activation: Activation::Silu,
            max_frequency: 3.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.cond_embed_dim == 0 || self.num_conditions == 0 {
            return Err(Error::invalid(
                "data_dim, cond_embed_dim and num_conditions must be positive",
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if !(self.max_frequency.is_finite() && self.max_frequency > 0.0) {
            return Err(Error::invalid("max_frequency must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.data_dim + 2 * self.time_embed_dim + self.cond_embed_dim
    }

    /// `(fan_out, fan_in)` of each dense layer, output head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_width();
        for &h in &self.hidden_dims {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((self.data_dim, fan_in));
        dims
    }

    /// Names and shapes of every parameter array, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = vec![(
            "cond_embed".to_string(),
            vec![self.num_conditions + 1, self.cond_embed_dim],
        )];
        for (i, (out, inp)) in self.layer_dims().into_iter().enumerate() {
            layout.push((format!("layer{i}.weight"), vec![out, inp]));
            layout.push((format!("layer{i}.bias"), vec![out]));
        }
        layout
    }

    fn frequencies(&self) -> (Tensor, Tensor) {
        let half = self.time_embed_dim / 2;
        let mut freqs = Vec::with_capacity(self.time_embed_dim);
        let mut phase = Vec::with_capacity(self.time_embed_dim);
        for k in 0..half {
            let f = if half > 1 {
                self.max_frequency.powf(k as f64 / (half - 1) as f64)
            } else {
                1.0
            };
            freqs.extend([f, f]);
            phase.extend([0.0, FRAC_PI_2]);
        }
        let freqs = Tensor::new(vec![self.time_embed_dim, 1], freqs).expect("sized above");
        (freqs, Tensor::vector(phase))
    }
}

/// Interleaved `(sin fₖt, cos fₖt)` pairs, as used inside the network.
pub fn sinusoidal_embedding(cfg: &ModelConfig, t: f64) -> Vec<f64> {
    let (freqs, phase) = cfg.frequencies();
    freqs
        .data()
        .iter()
        .zip(phase.data())
        .map(|(f, p)| (t * f + p).sin())
        .collect()
}

/// Anything that can be recorded on a tape as `u(z, t, Δt | c)`.
///
/// `z` is `[B, data_dim]`, `t` and `dt` are `[B, 1]`, and `params` are the
/// leaves returned by [`VelocityField::bind`] on the same tape.
pub trait VelocityField {
    fn data_dim(&self) -> usize;

    /// Loads trainable arrays onto `tape`, as parameter leaves when `trainable`.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>>;

    fn record(
        &self,
        tape: &mut Tape,
        params: &[Var],
        z: Var,
        t: Var,
        dt: Var,
        conds: &[Condition],
    ) -> Result<Var>;

    /// Number of [`VelocityField::record`] calls so far.
    fn evaluations(&self) -> u64;

    /// Batched evaluation with a shared `(t, Δt)`, outside any training graph.
    fn evaluate(&self, z: &Tensor, t: f64, dt: f64, conds: &[Condition]) -> Result<Tensor> {
        let rows = z.rows();
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let zv = tape.input(z.clone())?;
        let tv = tape.input(Tensor::full(&[rows, 1], t))?;
        let dv = tape.input(Tensor::full(&[rows, 1], dt))?;
        let out = self.record(&mut tape, &params, zv, tv, dv, conds)?;
        Ok(tape.value(out).clone())
    }
}

fn check_times(t: &Tensor, dt: &Tensor) -> Result<()> {
    for (&t, &d) in t.data().iter().zip(dt.data()) {
        if !(0.0..=1.0).contains(&t) || d < 0.0 || d > t {
            return Err(Error::invalid(format!(
                "time pair must satisfy 0 <= dt <= t <= 1, got t={t}, dt={d}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct VelocityModel {
    config: ModelConfig,
    seed: u64,
    params: Vec<Tensor>,
    evals: AtomicU64,
}

impl Clone for VelocityModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.clone(),
            evals: AtomicU64::new(0),
        }
    }
}

impl VelocityModel {
    /// He-uniform hidden layers, unit-variance condition rows, and a zero head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.param_layout();
        let head = layout.len() - 2;
        let params = layout
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let bound = if i == 0 {
                    3f64.sqrt()
                } else if i >= head || name.ends_with(".bias") {
                    0.0
                } else {
                    (6.0 / shape[1] as f64).sqrt()
                };
                let data = (0..n)
                    .map(|_| {
                        if bound == 0.0 {
                            0.0
                        } else {
                            rng.random_range(-bound..bound)
                        }
                    })
                    .collect();
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            seed,
            params,
            evals: AtomicU64::new(0),
        })
    }

    pub fn from_params(config: ModelConfig, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(&params)
                .any(|((_, shape), p)| p.shape() != shape.as_slice())
        {
            return Err(Error::invalid("parameter arrays do not match the architecture"));
        }
        Ok(Self {
            config,
            seed,
            params,
            evals: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Single-sample convenience wrapper over [`VelocityField::evaluate`].
    pub fn forward(&self, z: &[f64], t: f64, dt: f64, c: Condition) -> Result<Vec<f64>> {
        let z = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.evaluate(&z, t, dt, &[c])?.into_data())
    }
}

impl VelocityField for VelocityModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.input(p.clone())
                }
            })
            .collect()
    }

    fn record(
        &self,
        tape: &mut Tape,
        params: &[Var],
        z: Var,
        t: Var,
        dt: Var,
        conds: &[Condition],
    ) -> Result<Var> {
        let cfg = &self.config;
        let rows = tape.value(z).rows();
        if tape.value(z).cols() != cfg.data_dim || conds.len() != rows {
            return Err(Error::invalid(format!(
                "expected {rows} conditions and {} data columns",
                cfg.data_dim
            )));
        }
        check_times(tape.value(t), tape.value(dt))?;
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter leaves do not match the model"));
        }
        self.evals.fetch_add(1, Ordering::Relaxed);

        let k1 = cfg.num_conditions + 1;
        let mut onehot = vec![0.0; rows * k1];
        for (i, c) in conds.iter().enumerate() {
            onehot[i * k1 + c.row(cfg.num_conditions)?] = 1.0;
        }
        let onehot = tape.input(Tensor::matrix(rows, k1, onehot)?)?;
        let cond = tape.matmul(onehot, params[0])?;

        let (freqs, phase) = cfg.frequencies();
        let freqs = tape.input(freqs)?;
        let phase = tape.input(phase)?;
        let embed = |tape: &mut Tape, s: Var| -> Result<Var> {
            let arg = tape.affine(s, freqs, phase)?;
            tape.sin(arg)
        };
        let et = embed(tape, t)?;
        let ed = embed(tape, dt)?;

        let mut h = tape.concat(&[z, et, ed, cond])?;
        let layers = params[1..].chunks(2).collect::<Vec<_>>();
        for (i, wb) in layers.iter().enumerate() {
            h = tape.affine(h, wb[0], wb[1])?;
            if i + 1 < layers.len() {
                h = match cfg.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Silu => tape.silu(h)?,
                };
            }
        }
        Ok(h)
    }

    fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON side of a checkpoint; the parameters live in a sibling `.bin` blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<ParamEntry>,
    pub blob: String,
}

pub const CHECKPOINT_FORMAT: &str = "meanflow-checkpoint-v1";

fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian `f64`, manifest order).
pub fn save_checkpoint(model: &VelocityModel, stem: &Path, step: usize) -> Result<()> {
    let (json_path, bin_path) = stem_paths(stem);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model.config.clone(),
        seed: model.seed,
        step,
        params: model
            .config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect(),
        blob: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut blob = Vec::with_capacity(model.num_params() * 8);
    for x in model.params.iter().flat_map(|p| p.data()) {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(VelocityModel, CheckpointManifest)> {
    let (json_path, _) = stem_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let bin_path = json_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != expected * 8 {
        return Err(Error::invalid(format!(
            "{} holds {} bytes, manifest declares {} values",
            bin_path.display(),
            bytes.len(),
            expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let params = manifest
        .params
        .iter()
        .map(|p| {
            let n = p.shape.iter().product();
            Tensor::new(p.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let model = VelocityModel::from_params(manifest.model.clone(), manifest.seed, params)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::jvp;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dims: vec![16, 16],
            time_embed_dim: 8,
            cond_embed_dim: 4,
            num_conditions: 3,
            ..ModelConfig::default()
        }
    }

    /// A model with a randomised head so outputs are non-trivial.
    fn perturbed(seed: u64) -> VelocityModel {
        let mut m = VelocityModel::init(small(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in m.params_mut() {
            for x in p.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn layout_widths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.input_width(), 2 + 64 + 16);
        let layout = cfg.param_layout();
        assert_eq!(layout[0].1, vec![5, 16]);
        assert_eq!(layout[1].1, vec![128, 82]);
        assert_eq!(layout.last().unwrap().1, vec![2]);
        assert_eq!(layout[layout.len() - 2].1, vec![2, 128]);
    }

    #[test]
    fn rejects_bad_config() {
        let odd = ModelConfig {
            time_embed_dim: 7,
            ..ModelConfig::default()
        };
        assert!(VelocityModel::init(odd, 0).is_err());
        let empty = ModelConfig {
            hidden_dims: vec![8, 0],
            ..ModelConfig::default()
        };
        assert!(VelocityModel::init(empty, 0).is_err());
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let m = VelocityModel::init(small(), 3).unwrap();
        for (z, t, dt, c) in [
            ([0.3, -2.0], 0.5, 0.2, Condition::Class(1)),
            ([5.0, 1.0], 1.0, 1.0, Condition::Null),
            ([0.0, 0.0], 0.0, 0.0, Condition::Class(0)),
        ] {
            assert_eq!(m.forward(&z, t, dt, c).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = VelocityModel::init(small(), 11).unwrap();
        let b = VelocityModel::init(small(), 11).unwrap();
        let c = VelocityModel::init(small(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn embedding_at_zero_alternates() {
        let e = sinusoidal_embedding(&ModelConfig::default(), 0.0);
        assert_eq!(e.len(), 32);
        for (i, x) in e.iter().enumerate() {
            assert_eq!(*x, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn forward_validates_inputs() {
        let m = VelocityModel::init(small(), 0).unwrap();
        assert!(m.forward(&[0.0, 0.0], 0.3, 0.5, Condition::Null).is_err());
        assert!(m.forward(&[0.0, 0.0], 0.3, 0.1, Condition::Class(3)).is_err());
        assert!(m.forward(&[0.0, 0.0], 1.2, 0.1, Condition::Class(0)).is_err());
    }

    #[test]
    fn conditions_change_output() {
        let m = perturbed(5);
        let outs: Vec<_> = [
            Condition::Class(0),
            Condition::Class(1),
            Condition::Class(2),
            Condition::Null,
        ]
        .iter()
        .map(|&c| m.forward(&[0.4, -0.1], 0.6, 0.3, c).unwrap())
        .collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let m = perturbed(9);
        let z = Tensor::matrix(2, 2, vec![0.5, -1.0, 1.5, 0.2]).unwrap();
        let (t, dt) = (0.6, 0.25);
        let tau_z = Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let conds = [Condition::Class(2), Condition::Null];
        let (_, d) = jvp(
            |g, x| {
                let p = m.bind(g, false)?;
                m.record(g, &p, x[0], x[1], x[2], &conds)
            },
            &[
                z.clone(),
                Tensor::full(&[2, 1], t),
                Tensor::full(&[2, 1], dt),
            ],
            &[tau_z.clone(), Tensor::full(&[2, 1], 1.0), Tensor::full(&[2, 1], 1.0)],
        )
        .unwrap();
        let h = 1e-6;
        let shifted = |s: f64| {
            let zs = z.zip_map(&tau_z, |a, b| a + s * b);
            m.evaluate(&zs, t + s, dt + s, &conds).unwrap()
        };
        let fd = shifted(h).zip_map(&shifted(-h), |a, b| (a - b) / (2.0 * h));
        for (a, b) in d.data().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn counts_evaluations() {
        let m = VelocityModel::init(small(), 0).unwrap();
        let z = Tensor::zeros(&[4, 2]);
        m.evaluate(&z, 1.0, 1.0, &[Condition::Null; 4]).unwrap();
        m.evaluate(&z, 0.5, 0.0, &[Condition::Class(0); 4]).unwrap();
        assert_eq!(m.evaluations(), 2);
        m.reset_evaluations();
        assert_eq!(m.evaluations(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = perturbed(21);
        let stem = dir.path().join("ckpt/model");
        save_checkpoint(&m, &stem, 42).unwrap();
        let (back, manifest) = load_checkpoint(&stem).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.seed, 21);
        assert_eq!(manifest.blob, "model.bin");
        assert_eq!(back.params(), m.params());
        let bytes = std::fs::read(dir.path().join("ckpt/model.bin")).unwrap();
        assert_eq!(bytes.len(), m.num_params() * 8);
        assert_eq!(
            f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            m.params()[0].data()[0]
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_checkpoint(&perturbed(1), &stem, 0).unwrap();
        let bin = dir.path().join("m.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }
}
