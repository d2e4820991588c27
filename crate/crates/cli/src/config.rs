//! File configuration. Every section is optional; missing keys take the
//! documented defaults and unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rjepa::analysis::BenchMode;
use rjepa::data::{
    gen_latent_sequences, gen_scanpath_sequences, read_dataset, ImageParams, LatentProcessParams, SequenceDataset,
};
use rjepa::jepa::{JepaConfig, TestbedConfig};
use rjepa::trainer::{TestbedTrainConfig, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: JepaConfig,
    pub train: TrainConfig,
    pub collapse: CollapseConfig,
    pub testbed: TestbedConfig,
    pub balance: BalanceConfig,
    pub gradcheck: GradcheckConfig,
    pub moments: MomentsConfig,
    pub bench: BenchConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: JepaConfig::default(),
            train: TrainConfig::default(),
            collapse: CollapseConfig::default(),
            testbed: TestbedConfig::default(),
            balance: BalanceConfig::default(),
            gradcheck: GradcheckConfig::default(),
            moments: MomentsConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    #[default]
    Latent,
    Scanpath,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: Generator,
    /// Dataset file for `generator = "file"`.
    pub path: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
    pub t: usize,
    /// Square patch side in pixels.
    pub patch: usize,
    pub data_seed: u64,
    pub latent_dim: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub offset: f64,
    pub image: ImageParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Latent,
            path: None,
            train: 64,
            test: 16,
            t: 100,
            patch: 16,
            data_seed: 3,
            latent_dim: 256,
            rho_min: 0.0,
            rho_max: 0.99,
            offset: 0.0,
            image: ImageParams::default(),
        }
    }
}

impl DataConfig {
    /// Generates (or loads) the whole dataset, then splits it.
    pub fn build(&self) -> anyhow::Result<(SequenceDataset, SequenceDataset)> {
        let ds = self.generate()?;
        if ds.len() < self.train {
            bail!("dataset holds {} sequences, data.train asks for {}", ds.len(), self.train);
        }
        Ok(ds.split(self.train)?)
    }

    pub fn generate(&self) -> anyhow::Result<SequenceDataset> {
        let count = self.train + self.test;
        let mut ds = match self.generator {
            Generator::Latent => {
                let dim = self.patch * self.patch * self.image.channels;
                let p = LatentProcessParams::graded(self.latent_dim, dim, self.rho_min, self.rho_max, self.data_seed)?;
                gen_latent_sequences(&p, count, self.t, (self.patch, self.patch, self.image.channels), self.data_seed)?
            }
            Generator::Scanpath => gen_scanpath_sequences(&self.image, count, self.t, self.patch, self.data_seed)?,
            Generator::File => {
                let path = self.path.as_deref().context("data.path is required when data.generator = \"file\"")?;
                return read_dataset(path).with_context(|| format!("reading {}", path.display()));
            }
        };
        ds.add_offset(self.offset);
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub epochs: usize,
    pub stop_gradient: bool,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Bptt,
            lr: 0.02,
            epochs: 6,
            stop_gradient: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub lr: f64,
    pub iterations: usize,
    pub train_encoder: bool,
    pub sequences: usize,
    pub t: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub data_seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        let run = TestbedTrainConfig::default();
        Self {
            lr: run.lr,
            iterations: run.iterations,
            train_encoder: run.train_encoder,
            sequences: 16,
            t: 100,
            rho_min: 0.2,
            rho_max: 0.9,
            data_seed: 9,
        }
    }
}

impl BalanceConfig {
    pub fn run(&self) -> TestbedTrainConfig {
        TestbedTrainConfig {
            lr: self.lr,
            iterations: self.iterations,
            train_encoder: self.train_encoder,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    #[default]
    Rgc,
    TimeDecay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Gates {
    #[default]
    Diagonal,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n: usize,
    pub t: usize,
    pub instances: usize,
    pub cell: Cell,
    pub gates: Gates,
    pub weight_scale: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n: 8,
            t: 12,
            instances: 5,
            cell: Cell::Rgc,
            gates: Gates::Diagonal,
            weight_scale: 0.6,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    pub n: usize,
    /// Diagonal of `U`, repeated over all latents.
    pub tau: f64,
    /// `Σ = sigma_scale · I`
    pub sigma_scale: f64,
    pub samples: usize,
    pub burn_in: usize,
    pub tau_grid: Vec<f64>,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            n: 1,
            tau: 0.5,
            sigma_scale: 1.0,
            samples: 200_000,
            burn_in: 200,
            tau_grid: rjepa::analysis::DEFAULT_TAU_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub t: usize,
    pub mode: BenchMode,
    pub slope_min: f64,
    pub slope_max: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![32, 64, 128, 256],
            t: 100,
            mode: BenchMode::Rfp,
            slope_min: 1.7,
            slope_max: 2.5,
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<CliConfig> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn parse(text: &str) -> anyhow::Result<CliConfig> {
    Ok(toml::from_str(text)?)
}

pub fn render(cfg: &CliConfig) -> String {
    toml::to_string(cfg).unwrap_or_else(|e| format!("# unrenderable config: {e}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_parses() {
        let text = include_str!("../config.example.toml");
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.data.offset, 1.0);
        assert_eq!(cfg.train.lr, 0.005);
        assert_eq!(cfg.gradcheck, GradcheckConfig::default());
        assert_eq!(cfg.testbed, TestbedConfig::default());
    }

    #[test]
    fn render_round_trips() {
        let cfg = CliConfig::default();
        assert_eq!(parse(&render(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse("[bench]\nslope = 2\n").unwrap_err();
        assert!(format!("{err:#}").contains("slope"));
        assert!(parse("colour = 1\n").is_err());
    }

    #[test]
    fn file_generator_requires_path() {
        let d = DataConfig {
            generator: Generator::File,
            ..DataConfig::default()
        };
        assert!(format!("{:#}", d.generate().unwrap_err()).contains("data.path"));
    }
}
