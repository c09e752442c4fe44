//! The `meanflow` command line: train, sample, eval, bench and ablate.
//!
//! Exit codes: 0 on success, 1 for configuration or I/O problems, 2 when the
//! numerics fail (non-finite loss or output).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    cfg_sweep, rt_ratio_ablation, scatter_svg, speed_bench, write_csv, write_json, write_svg,
    EvalSet, RunReport,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::metrics::histogram_kl;
use crate::network::{load_checkpoint, Condition, VelocityModel};
use crate::sampler::SamplerKind;
use crate::trainer::{train_with_checkpoints, write_trace_csv, Objective};

#[derive(Debug, Parser)]
#[command(name = "meanflow", version, about = "One-step MeanFlow generation on toy 2-D data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and the loss trace.
    Train(TrainArgs),
    /// Draw samples from a checkpoint; writes CSV and an SVG scatter.
    Sample(SampleArgs),
    /// Score a checkpoint against held-out data; writes metrics JSON.
    Eval(SampleArgs),
    /// Time samplers and count network evaluations.
    Bench(BenchArgs),
    /// Run one of the ablation sweeps.
    #[command(subcommand)]
    Ablate(Ablation),
}

#[derive(Debug, Subcommand)]
enum Ablation {
    /// Guidance strength × guidance mode sweep on a trained checkpoint.
    CfgSweep(SweepArgs),
    /// Train one model per r≠t ratio and seed, then score one-step samples.
    RtRatio(RatioArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config (or a JSON config echo).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Fm,
    Meanflow,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Number of optimiser steps.
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// Fraction of training pairs with r ≠ t.
    #[arg(long)]
    neq_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Meanflow,
    Euler,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Standard,
    Scaled,
}

impl From<ModeArg> for GuidanceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => GuidanceMode::None,
            ModeArg::Standard => GuidanceMode::Standard,
            ModeArg::Scaled => GuidanceMode::Scaled,
        }
    }
}

#[derive(Debug, Args)]
struct Sampling {
    /// Sampler steps; 1 is the one-step sampler.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Classifier-free guidance variant.
    #[arg(long, value_enum)]
    cfg_mode: Option<ModeArg>,
    /// Guidance strength ω.
    #[arg(long)]
    omega: Option<f64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint stem (without .json/.bin).
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    sampling: Sampling,
    /// Number of samples (per evaluation seed for `eval`).
    #[arg(long)]
    n: Option<usize>,
    /// Condition every sample on this class instead of cycling through all.
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to time; a freshly initialised model otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    cfg_mode: Option<ModeArg>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// Points per evaluation seed.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct RatioArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_steps: Option<usize>,
    /// Points per evaluation seed.
    #[arg(long)]
    n: Option<usize>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(Ablation::CfgSweep(a)) => cmd_cfg_sweep(a),
        Command::Ablate(Ablation::RtRatio(a)) => cmd_rt_ratio(a),
    }
}

/// Flag > file > default. Without `--config`, a checkpoint's training
/// config echo is used when one sits next to it.
fn resolve(common: &Common, ckpt: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, ckpt.and_then(train_echo)) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

const TRAIN_ECHO: &str = "train_config.json";

fn train_echo(ckpt: &Path) -> Option<PathBuf> {
    let p = ckpt.parent().unwrap_or(Path::new("")).join(TRAIN_ECHO);
    p.exists().then_some(p)
}

fn apply_sampling(cfg: &mut RunConfig, s: &Sampling) {
    if let Some(steps) = s.steps {
        cfg.sampler.steps = steps;
    }
    if let Some(kind) = s.sampler {
        cfg.sampler.kind = match kind {
            SamplerArg::Meanflow => SamplerKind::Meanflow,
            SamplerArg::Euler => SamplerKind::Euler,
        };
    }
    apply_guidance(cfg, s.cfg_mode, s.omega);
}

fn apply_guidance(cfg: &mut RunConfig, mode: Option<ModeArg>, omega: Option<f64>) {
    if let Some(m) = mode {
        cfg.guidance.mode = m.into();
    }
    if let Some(w) = omega {
        cfg.guidance.omega = w;
    }
}

fn finish(cfg: &RunConfig, echo_name: &str) -> Result<()> {
    cfg.validate()?;
    write_json(cfg, &cfg.out_dir.join(echo_name))
}

fn load_model(ckpt: &Path, cfg: &RunConfig) -> Result<VelocityModel> {
    let (model, _) = load_checkpoint(ckpt)?;
    if model.config().data_dim != cfg.data.data_dim()
        || model.config().num_conditions < cfg.data.num_classes()
    {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured dataset",
            ckpt.display()
        )));
    }
    Ok(model)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(o) = a.objective {
        cfg.train.objective = match o {
            ObjectiveArg::Fm => Objective::Fm,
            ObjectiveArg::Meanflow => Objective::Meanflow,
        };
    }
    if let Some(steps) = a.train_steps {
        cfg.train = cfg.train.clone().scaled_to(steps);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr_max {
        let k = lr / cfg.train.lr_max;
        cfg.train.lr_max = lr;
        cfg.train.decay_milestones.iter_mut().for_each(|m| m.lr *= k);
    }
    if let Some(r) = a.neq_ratio {
        cfg.train.time_pair.neq_ratio = r;
    }
    finish(&cfg, TRAIN_ECHO)?;
    let init = VelocityModel::init(cfg.model.clone(), cfg.seed)?;
    let out = train_with_checkpoints(&init, &cfg.data, &cfg.train_config(), &cfg.out_dir.join("model"))?;
    write_trace_csv(&out.trace, &cfg.out_dir.join("loss.csv"))?;
    if let Some(last) = out.trace.last() {
        eprintln!("trained {} steps, final loss {:.6}", out.trace.len(), last.loss);
    }
    Ok(())
}

fn sample_conditions(n: usize, classes: usize, class: Option<usize>) -> Result<Vec<Condition>> {
    match class {
        Some(c) if c >= classes => Err(Error::Config(format!(
            "class {c} out of range for a {classes}-class dataset"
        ))),
        Some(c) => Ok(vec![Condition::Class(c); n]),
        None => Ok((0..n).map(|i| Condition::Class(i % classes)).collect()),
    }
}

fn write_samples_csv(points: &crate::autodiff::Tensor, conds: &[Condition], path: &Path) -> Result<()> {
    crate::bench::ensure_parent(path)?;
    let io = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let d = points.cols();
    let mut header = vec!["class".to_string()];
    if d == 2 {
        header.extend(["x".to_string(), "y".to_string()]);
    } else {
        header.extend((0..d).map(|k| format!("x{k}")));
    }
    w.write_record(&header).map_err(io)?;
    for (i, c) in conds.iter().enumerate() {
        let label = match c {
            Condition::Class(k) => k.to_string(),
            Condition::Null => "null".to_string(),
        };
        let mut rec = vec![label];
        rec.extend(points.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, Some(&a.ckpt))?;
    apply_sampling(&mut cfg, &a.sampling);
    finish(&cfg, "sample_config.json")?;
    let model = load_model(&a.ckpt, &cfg)?;
    let n = a.n.unwrap_or(cfg.eval.samples);
    let conds = sample_conditions(n, cfg.data.num_classes(), a.class)?;
    let eps = crate::bench::gaussian_noise(n, cfg.model.data_dim, cfg.seed);
    let x = cfg.sampler.sample(&model, &eps, &conds, &cfg.guidance)?;
    write_samples_csv(&x, &conds, &cfg.out_dir.join("samples.csv"))?;
    let (reference, _) = cfg.data.sample_with_seed(n, cfg.seed);
    let title = format!("{} {}", cfg.sampler, cfg.guidance.mode.as_str());
    write_svg(
        &scatter_svg(&x, Some(&reference), 4.0, &title),
        &cfg.out_dir.join("samples.svg"),
    )
}

fn cmd_eval(a: SampleArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, Some(&a.ckpt))?;
    apply_sampling(&mut cfg, &a.sampling);
    if let Some(n) = a.n {
        cfg.eval.samples = n;
    }
    finish(&cfg, "eval_config.json")?;
    let model = load_model(&a.ckpt, &cfg)?;
    let mut report = RunReport::new(serde_json::to_value(&cfg)?);
    report.seeds = cfg.eval.seeds.clone();
    let (mut ed_sum, mut kl_sum) = (0.0, 0.0);
    for &seed in &cfg.eval.seeds {
        let ev = EvalSet::new(&cfg.data, cfg.eval.samples, seed)?;
        let x = ev.generate(&model, &cfg.sampler, &cfg.guidance)?;
        let ed = crate::metrics::energy_distance(&x, &ev.data)?;
        report.add_metric(format!("energy_distance.seed{seed}"), ed)?;
        ed_sum += ed;
        if cfg.model.data_dim == 2 {
            let kl = histogram_kl(&x, &ev.data, &cfg.eval.grid, cfg.eval.smoothing)?;
            report.add_metric(format!("histogram_kl.seed{seed}"), kl)?;
            kl_sum += kl;
        }
    }
    let k = cfg.eval.seeds.len() as f64;
    report.add_metric("energy_distance.mean", ed_sum / k)?;
    if cfg.model.data_dim == 2 {
        report.add_metric("histogram_kl.mean", kl_sum / k)?;
    }
    report
        .evaluations
        .insert(cfg.sampler.to_string(), cfg.sampler.evaluations(&cfg.guidance));
    report.write_json(&cfg.out_dir.join("metrics.json"))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, a.ckpt.as_deref())?;
    apply_guidance(&mut cfg, a.cfg_mode, a.omega);
    if let Some(b) = a.batch {
        cfg.eval.bench_batch = b;
    }
    if let Some(r) = a.repeats {
        cfg.eval.bench_repeats = r;
    }
    finish(&cfg, "bench_config.json")?;
    let model = match &a.ckpt {
        Some(p) => load_model(p, &cfg)?,
        None => VelocityModel::init(cfg.model.clone(), cfg.seed)?,
    };
    let rows = speed_bench(
        &model,
        &cfg.eval.bench_samplers,
        &cfg.guidance,
        cfg.eval.bench_batch,
        cfg.eval.bench_repeats,
    )?;
    let mut report = RunReport::new(serde_json::to_value(&cfg)?);
    report.seeds = vec![cfg.seed];
    for r in &rows {
        report.timings.insert(format!("{}.median_seconds", r.sampler), r.median_seconds);
        report.timings.insert(format!("{}.seconds_per_sample", r.sampler), r.seconds_per_sample);
        report.evaluations.insert(r.sampler.clone(), r.evaluations);
    }
    if let Some(first) = rows.first() {
        for r in &rows[1..] {
            report.add_metric(
                format!("time_ratio.{}_over_{}", r.sampler, first.sampler),
                r.median_seconds / first.median_seconds,
            )?;
        }
    }
    write_csv(&rows, &cfg.out_dir.join("bench.csv"))?;
    report.write_json(&cfg.out_dir.join("bench.json"))
}

fn cmd_cfg_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, Some(&a.ckpt))?;
    if let Some(n) = a.n {
        cfg.eval.samples = n;
    }
    finish(&cfg, "cfg_sweep_config.json")?;
    let model = load_model(&a.ckpt, &cfg)?;
    let evals = cfg
        .eval
        .seeds
        .iter()
        .map(|&s| EvalSet::new(&cfg.data, cfg.eval.samples, s))
        .collect::<Result<Vec<_>>>()?;
    let rows = cfg_sweep(
        &model,
        &cfg.eval.omegas,
        &cfg.eval.modes,
        &cfg.eval.sweep_samplers,
        &evals,
    )?;
    write_csv(&rows, &cfg.out_dir.join("cfg_sweep.csv"))?;

    let mut report = RunReport::new(serde_json::to_value(&cfg)?);
    report.seeds = cfg.eval.seeds.clone();
    for sampler in &cfg.eval.sweep_samplers {
        for &mode in &cfg.eval.modes {
            for &omega in &cfg.eval.omegas {
                let cell: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.sampler == sampler.to_string() && r.mode == mode.as_str() && r.omega == omega)
                    .map(|r| r.energy_distance)
                    .collect();
                let key = format!("energy_distance.{sampler}.{}.w{omega}", mode.as_str());
                report.add_metric(key, cell.iter().sum::<f64>() / cell.len() as f64)?;
                let g = GuidanceConfig { mode, omega };
                report.evaluations.insert(format!("{sampler}.{}", mode.as_str()), sampler.evaluations(&g));
                let x = evals[0].generate(&model, sampler, &g)?;
                let name = format!("{sampler}_{}_w{omega}.svg", mode.as_str());
                let title = format!("{sampler} {} w={omega}", mode.as_str());
                write_svg(
                    &scatter_svg(&x, Some(&evals[0].data), 4.0, &title),
                    &cfg.out_dir.join("cfg_sweep").join(name),
                )?;
            }
        }
    }
    report.write_json(&cfg.out_dir.join("cfg_sweep.json"))
}

fn cmd_rt_ratio(a: RatioArgs) -> Result<()> {
    let mut cfg = resolve(&a.common, None)?;
    if let Some(steps) = a.train_steps {
        cfg.train = cfg.train.clone().scaled_to(steps);
    }
    if let Some(n) = a.n {
        cfg.eval.samples = n;
    }
    finish(&cfg, "rt_ratio_config.json")?;
    let rows = rt_ratio_ablation(
        &cfg.model,
        &cfg.data,
        &cfg.train,
        &cfg.eval.ratios,
        &cfg.eval.ratio_seeds,
        &cfg.sampler,
        &cfg.guidance,
        cfg.eval.samples,
    )?;
    write_csv(&rows, &cfg.out_dir.join("rt_ratio.csv"))?;
    let mut report = RunReport::new(serde_json::to_value(&cfg)?);
    report.seeds = cfg.eval.ratio_seeds.clone();
    for &ratio in &cfg.eval.ratios {
        let cell: Vec<f64> = rows
            .iter()
            .filter(|r| r.ratio == ratio)
            .map(|r| r.energy_distance)
            .collect();
        report.add_metric(
            format!("energy_distance.ratio{ratio}"),
            cell.iter().sum::<f64>() / cell.len() as f64,
        )?;
    }
    report
        .evaluations
        .insert(cfg.sampler.to_string(), cfg.sampler.evaluations(&cfg.guidance));
    report.write_json(&cfg.out_dir.join("rt_ratio.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn parser_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(run_command(["meanflow", "--help"]), 0);
        assert_eq!(run_command(["meanflow", "train", "--help"]), 0);
        assert_eq!(run_command(["meanflow", "frobnicate"]), 1);
        assert_eq!(run_command(["meanflow", "sample"]), 1);
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(
            exit_code(&Error::Diverged {
                step: 1,
                lr: 0.1,
                loss: f64::NAN
            }),
            2
        );
    }

    #[test]
    fn class_selection() {
        assert_eq!(sample_conditions(3, 2, None).unwrap()[2], Condition::Class(0));
        assert!(sample_conditions(3, 2, Some(2)).is_err());
    }
}
