//! On-disk run configuration: a TOML file with one table per component.
//!
//! Every key has a default, unknown keys are rejected, and command-line flags
//! are applied on top of the loaded file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::DEFAULT_OMEGAS;
use crate::data::{DatasetKind, ToyDataset};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode};
use crate::metrics::HistogramGrid;
use crate::network::ModelConfig;
use crate::sampler::SamplerSpec;
use crate::trainer::TrainConfig;

/// Settings for `eval`, `bench` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out points (and generated points) per evaluation seed.
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub omegas: Vec<f64>,
    pub modes: Vec<GuidanceMode>,
    pub sweep_samplers: Vec<SamplerSpec>,
    pub ratios: Vec<f64>,
    pub ratio_seeds: Vec<u64>,
    pub bench_samplers: Vec<SamplerSpec>,
    pub bench_batch: usize,
    pub bench_repeats: usize,
    pub grid: HistogramGrid,
    pub smoothing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            seeds: vec![0, 1, 2, 3, 4],
            omegas: DEFAULT_OMEGAS.to_vec(),
            modes: vec![GuidanceMode::Standard, GuidanceMode::Scaled],
            sweep_samplers: vec![SamplerSpec::one_step(), SamplerSpec::meanflow(2)],
            ratios: vec![0.1, 0.5, 0.9],
            ratio_seeds: vec![0, 1, 2],
            bench_samplers: vec![
                SamplerSpec::one_step(),
                SamplerSpec::meanflow(25),
                SamplerSpec::euler(25),
            ],
            bench_batch: 256,
            bench_repeats: 5,
            grid: HistogramGrid::default(),
            smoothing: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Seeds parameter initialisation and the training stream.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: ToyDataset,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            seed: 0,
            model: ModelConfig::default(),
            data: ToyDataset::new(DatasetKind::default_mixture(), 0)
                .expect("default mixture is valid"),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::none(),
            sampler: SamplerSpec::one_step(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// TOML, or JSON when the extension is `.json` (the format of echoed configs).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// The training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.model.validate().map_err(wrap)?;
        self.data.validate().map_err(wrap)?;
        self.train_config().validate().map_err(wrap)?;
        self.guidance.validate().map_err(wrap)?;
        self.eval.grid.validate().map_err(wrap)?;
        if self.data.data_dim() != self.model.data_dim {
            return Err(Error::Config(format!(
                "dataset is {}-D but the model is {}-D",
                self.data.data_dim(),
                self.model.data_dim
            )));
        }
        if self.data.num_classes() > self.model.num_conditions {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model only {} conditions",
                self.data.num_classes(),
                self.model.num_conditions
            )));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if self.eval.samples == 0 || self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs samples > 0 and at least one seed".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 7
            out_dir = "runs/delta"

            [data]
            kind = "delta"
            points = [[1.0, -0.5]]

            [train]
            objective = "fm"
            steps = 100
            warmup_steps = 10
            decay_milestones = [{ step = 50, lr = 1e-4 }]

            [guidance]
            mode = "scaled"
            omega = 1.5

            [sampler]
            kind = "euler"
            steps = 25
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_config().seed, 7);
        assert_eq!(cfg.train.steps, 100);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.data.num_classes(), 1);
        assert_eq!(cfg.sampler, SamplerSpec::euler(25));
        assert_eq!(cfg.guidance, GuidanceConfig::scaled(1.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sed = 1",
            "[train]\nstep = 3",
            "[train]\nseed = 3",
            "[data]\nkind = \"moons\"\nnoise = 0.1\nwobble = 2",
            "[model]\nwidth = 3",
        ] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn json_echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let cfg = RunConfig {
            seed: 3,
            ..RunConfig::default()
        };
        crate::bench::write_json(&cfg, &path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_model_and_data_fail_validation() {
        let cfg = RunConfig::from_toml("[model]\nnum_conditions = 2").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
