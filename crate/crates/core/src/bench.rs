//! Evaluation harness: held-out sets, run reports, the sampling-speed
//! benchmark, and the guidance and `r ≠ t` ratio sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::metrics::energy_distance;
use crate::network::{Condition, ModelConfig, VelocityField, VelocityModel};
use crate::sampler::SamplerSpec;
use crate::trainer::{train, TrainConfig};

/// Guidance strengths swept by default.
pub const DEFAULT_OMEGAS: [f64; 5] = [1.0, 1.5, 2.5, 3.5, 4.5];

/// Standard-normal `[n, dim]` noise from its own stream.
pub fn gaussian_noise(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::matrix(n, dim, data).expect("sized by construction")
}

/// Held-out data with its labels, plus the noise used to generate the
/// comparison samples. Generation reuses the held-out labels as conditions.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub seed: u64,
    pub data: Tensor,
    pub labels: Vec<usize>,
    pub noise: Tensor,
}

impl EvalSet {
    /// Held-out stream and noise stream both derived from `seed`; neither
    /// overlaps the training stream, which is seeded from the train config.
    pub fn new(ds: &ToyDataset, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("evaluation set needs at least one sample"));
        }
        let (data, labels) = ds.sample_with_seed(n, held_out_seed(seed));
        let noise = gaussian_noise(n, ds.data_dim(), noise_seed(seed));
        Ok(Self {
            seed,
            data,
            labels,
            noise,
        })
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.labels.iter().map(|&c| Condition::Class(c)).collect()
    }

    pub fn generate<M: VelocityField + ?Sized>(
        &self,
        model: &M,
        sampler: &SamplerSpec,
        guidance: &GuidanceConfig,
    ) -> Result<Tensor> {
        sampler.sample(model, &self.noise, &self.conditions(), guidance)
    }

    /// Energy distance between generated samples and the held-out data.
    pub fn score<M: VelocityField + ?Sized>(
        &self,
        model: &M,
        sampler: &SamplerSpec,
        guidance: &GuidanceConfig,
    ) -> Result<f64> {
        energy_distance(&self.generate(model, sampler, guidance)?, &self.data)
    }
}

fn held_out_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED_0001
}

fn noise_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED_0002
}

/// Config echo, named metrics, timings, evaluation counts and seeds of one run.
///
/// Timings are the only non-deterministic field; reports that must be
/// reproducible byte for byte leave them empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, f64>,
    pub evaluations: BTreeMap<String, u64>,
    pub seeds: Vec<u64>,
}

impl RunReport {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn add_metric(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One header row from the field names, then one row per record.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let io = |e: csv::Error| Error::Io {
        path: PathBuf::from(path),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `x,y` rows, for 2-D sample sets.
pub fn write_points_csv(points: &Tensor, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        x: f64,
        y: f64,
    }
    if points.cols() != 2 {
        return Err(Error::invalid("point CSVs hold 2-D samples"));
    }
    let rows: Vec<Row> = (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            Row { x: p[0], y: p[1] }
        })
        .collect();
    write_csv(&rows, path)
}

/// Scatter of `generated` (blue) over `reference` (grey) on `[-lim, lim]²`.
pub fn scatter_svg(generated: &Tensor, reference: Option<&Tensor>, lim: f64, title: &str) -> String {
    const SIZE: f64 = 480.0;
    let px = |x: f64| (x + lim) / (2.0 * lim) * SIZE;
    let py = |y: f64| SIZE - (y + lim) / (2.0 * lim) * SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<line x1="0" y1="{c}" x2="{SIZE}" y2="{c}" stroke="#ddd"/><line x1="{c}" y1="0" x2="{c}" y2="{SIZE}" stroke="#ddd"/>"##,
        c = SIZE / 2.0
    );
    let mut dots = |t: &Tensor, colour: &str| {
        for i in 0..t.rows() {
            let p = t.row(i);
            if p.len() >= 2 && p[0].abs() <= lim && p[1].abs() <= lim {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="{colour}" fill-opacity="0.5"/>"#,
                    px(p[0]),
                    py(p[1])
                );
            }
        }
    };
    if let Some(r) = reference {
        dots(r, "#888888");
    }
    dots(generated, "#1f5fbf");
    let _ = writeln!(
        s,
        r#"<text x="8" y="18" font-family="monospace" font-size="13">{}</text>"#,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(svg: &str, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub sampler: String,
    pub guidance: String,
    pub evaluations: u64,
    pub median_seconds: f64,
    pub seconds_per_sample: f64,
}

pub const WARMUP_ROUNDS: usize = 2;

/// Times each sampler on one fixed batch: two untimed warmups, then the
/// median of `repeats` timed runs. Evaluation counts come from the model's
/// own counter over a single run.
pub fn speed_bench(
    model: &VelocityModel,
    specs: &[SamplerSpec],
    guidance: &GuidanceConfig,
    batch: usize,
    repeats: usize,
) -> Result<Vec<SpeedRow>> {
    guidance.validate()?;
    if batch == 0 || repeats == 0 {
        return Err(Error::invalid("speed bench needs batch >= 1 and repeats >= 1"));
    }
    let k = model.config().num_conditions;
    let conds: Vec<Condition> = (0..batch).map(|i| Condition::Class(i % k)).collect();
    let eps = gaussian_noise(batch, model.config().data_dim, 0);
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let before = model.evaluations();
        spec.sample(model, &eps, &conds, guidance)?;
        let evaluations = model.evaluations() - before;
        for _ in 1..WARMUP_ROUNDS {
            spec.sample(model, &eps, &conds, guidance)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            std::hint::black_box(spec.sample(model, &eps, &conds, guidance)?);
            times.push(t0.elapsed().as_secs_f64());
        }
        let median_seconds = median(&mut times);
        rows.push(SpeedRow {
            sampler: spec.to_string(),
            guidance: guidance_label(guidance),
            evaluations,
            median_seconds,
            seconds_per_sample: median_seconds / batch as f64,
        });
    }
    Ok(rows)
}

fn guidance_label(g: &GuidanceConfig) -> String {
    match g.mode {
        GuidanceMode::None => "none".to_string(),
        m => format!("{}@{}", m.as_str(), g.omega),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sampler: String,
    pub mode: String,
    pub omega: f64,
    pub seed: u64,
    pub energy_distance: f64,
}

/// Energy distance for every (sampler, mode, ω, eval seed) cell, sorted by
/// that key.
pub fn cfg_sweep<M: VelocityField + ?Sized>(
    model: &M,
    omegas: &[f64],
    modes: &[GuidanceMode],
    samplers: &[SamplerSpec],
    evals: &[EvalSet],
) -> Result<Vec<SweepRow>> {
    let mut rows = vec![];
    for sampler in samplers {
        for &mode in modes {
            for &omega in omegas {
                let g = GuidanceConfig { mode, omega };
                g.validate()?;
                for ev in evals {
                    rows.push(SweepRow {
                        sampler: sampler.to_string(),
                        mode: mode.as_str().to_string(),
                        omega,
                        seed: ev.seed,
                        energy_distance: ev.score(model, sampler, &g)?,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (&a.sampler, &a.mode, a.seed)
            .cmp(&(&b.sampler, &b.mode, b.seed))
            .then(a.omega.total_cmp(&b.omega))
    });
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub seed: u64,
    pub energy_distance: f64,
    pub final_loss: f64,
}

/// Trains one model per (ratio, seed) from `template` and scores each with
/// `sampler` on an eval set seeded by the same seed. The seed drives both the
/// parameter initialisation and the training stream.
#[allow(clippy::too_many_arguments)]
pub fn rt_ratio_ablation(
    model_cfg: &ModelConfig,
    ds: &ToyDataset,
    template: &TrainConfig,
    ratios: &[f64],
    seeds: &[u64],
    sampler: &SamplerSpec,
    guidance: &GuidanceConfig,
    eval_size: usize,
) -> Result<Vec<RatioRow>> {
    let mut rows = vec![];
    for &seed in seeds {
        let ev = EvalSet::new(ds, eval_size, seed)?;
        let init = VelocityModel::init(model_cfg.clone(), seed)?;
        for &ratio in ratios {
            let mut cfg = template.clone();
            cfg.seed = seed;
            cfg.time_pair.neq_ratio = ratio;
            let out = train(&init, ds, &cfg)?;
            let final_loss = out.trace.last().map_or(f64::NAN, |p| p.loss);
            rows.push(RatioRow {
                ratio,
                seed,
                energy_distance: ev.score(&out.model, sampler, guidance)?,
                final_loss,
            });
        }
    }
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;

    fn tiny() -> VelocityModel {
        VelocityModel::init(
            ModelConfig {
                hidden_dims: vec![8],
                time_embed_dim: 4,
                cond_embed_dim: 2,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn mixture() -> ToyDataset {
        ToyDataset::new(DatasetKind::default_mixture(), 0).unwrap()
    }

    #[test]
    fn median_of_odd_even_and_single() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&mut [7.5]), 7.5);
    }

    #[test]
    fn speed_bench_counts_evaluations() {
        let m = tiny();
        let rows = speed_bench(
            &m,
            &[SamplerSpec::one_step(), SamplerSpec::meanflow(25), SamplerSpec::euler(25)],
            &GuidanceConfig::scaled(1.5),
            16,
            1,
        )
        .unwrap();
        let evals: Vec<u64> = rows.iter().map(|r| r.evaluations).collect();
        assert_eq!(evals, vec![2, 50, 50]);
        assert!(rows.iter().all(|r| r.median_seconds > 0.0));
        let plain = speed_bench(&m, &[SamplerSpec::meanflow(3)], &GuidanceConfig::none(), 4, 1).unwrap();
        assert_eq!(plain[0].evaluations, 3);
    }

    #[test]
    fn eval_sets_are_reproducible_and_distinct() {
        let a = EvalSet::new(&mixture(), 50, 1).unwrap();
        let b = EvalSet::new(&mixture(), 50, 1).unwrap();
        let c = EvalSet::new(&mixture(), 50, 2).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.noise, b.noise);
        assert_ne!(a.data, c.data);
        let (train_stream, _) = mixture().sample(50);
        assert_ne!(a.data, train_stream);
    }

    #[test]
    fn sweep_has_every_cell_and_unit_omega_ties() {
        let m = tiny();
        let evals: Vec<EvalSet> = (0..2).map(|s| EvalSet::new(&mixture(), 40, s).unwrap()).collect();
        let rows = cfg_sweep(
            &m,
            &DEFAULT_OMEGAS,
            &[GuidanceMode::Standard, GuidanceMode::Scaled],
            &[SamplerSpec::one_step()],
            &evals,
        )
        .unwrap();
        assert_eq!(rows.len(), 5 * 2 * 2);
        for seed in 0..2 {
            let at_one: Vec<f64> = rows
                .iter()
                .filter(|r| r.omega == 1.0 && r.seed == seed)
                .map(|r| r.energy_distance)
                .collect();
            assert_eq!(at_one.len(), 2);
            assert_eq!(at_one[0], at_one[1]);
        }
        let again = cfg_sweep(
            &m,
            &DEFAULT_OMEGAS,
            &[GuidanceMode::Standard, GuidanceMode::Scaled],
            &[SamplerSpec::one_step()],
            &evals,
        )
        .unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn ratio_ablation_shape() {
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default().scaled_to(4)
        };
        let rows = rt_ratio_ablation(
            tiny().config(),
            &mixture(),
            &cfg,
            &[0.9, 0.1],
            &[5, 4],
            &SamplerSpec::one_step(),
            &GuidanceConfig::none(),
            20,
        )
        .unwrap();
        let keys: Vec<(f64, u64)> = rows.iter().map(|r| (r.ratio, r.seed)).collect();
        assert_eq!(keys, vec![(0.1, 4), (0.1, 5), (0.9, 4), (0.9, 5)]);
    }

    #[test]
    fn report_rejects_non_finite_and_omits_empty_timings() {
        let mut r = RunReport::new(serde_json::json!({"a": 1}));
        assert!(r.add_metric("x", f64::NAN).is_err());
        r.add_metric("x", 0.5).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(!text.contains("timings"));
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![9.0, 9.0]]).unwrap();
        let a = scatter_svg(&pts, Some(&pts), 4.0, "a<b");
        assert_eq!(a, scatter_svg(&pts, Some(&pts), 4.0, "a<b"));
        assert_eq!(a.matches("<circle").count(), 2);
        assert!(a.contains("a&lt;b"));
    }
}
