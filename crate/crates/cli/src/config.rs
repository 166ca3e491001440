//! Pipeline configuration: one TOML document with nested sections.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use endd::distill::{DistObjective, TrainConfig};
use endd::eval::{RankingMetric, DEFAULT_GRID_STEP};
use endd::synthdata::GrammarConfig;
use endd::uncertainty::Aggregate;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "ENDD_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "endd-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root for everything below unless overridden.
    pub output_dir: PathBuf,
    /// Corpora and vocabulary; `<output_dir>/data` when unset.
    pub data_dir: Option<PathBuf>,
    /// Model checkpoints; `<output_dir>/checkpoints` when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        let output_dir = std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
        Self {
            output_dir,
            data_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl Paths {
    pub fn data(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoints"))
    }

    pub fn results(&self) -> PathBuf {
        self.output_dir.join("results")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSizes {
    pub train: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            train: 20_000,
            test_id: 2_000,
            test_ood: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Temperature applied to member outputs for every ensemble-side quantity.
    pub temperature: f64,
    pub grid_step: f64,
    pub rejection_fraction: f64,
    /// Ranking used by `reject-curve` when no metric is given.
    pub ranking_metric: RankingMetric,
    pub aggregate: Aggregate,
    /// Which distribution-distilled model supplies uncertainties for GUA.
    pub gua_uncertainty_model: DistObjective,
    /// Sentences decoded together.
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            grid_step: DEFAULT_GRID_STEP,
            rejection_fraction: 0.10,
            ranking_metric: RankingMetric::Ku,
            aggregate: Aggregate::Sum,
            gua_uncertainty_model: DistObjective::Kl,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Members are trained with seeds `train.seed + i`.
    pub ensemble_size: usize,
    pub paths: Paths,
    pub corpus: CorpusSizes,
    pub grammar: GrammarConfig,
    pub train: TrainConfig,
    /// Epoch count for the three students; `train.epochs` when unset.
    pub student_epochs: Option<usize>,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            paths: Paths::default(),
            corpus: CorpusSizes::default(),
            grammar: GrammarConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            student_epochs: None,
            eval: EvalSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            bail!("ensemble_size must be at least 1");
        }
        if self.corpus.train == 0 || self.corpus.test_id == 0 || self.corpus.test_ood == 0 {
            bail!("corpus sizes must be positive");
        }
        if !(self.eval.temperature > 0.0) || !self.eval.temperature.is_finite() {
            bail!("eval.temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval.rejection_fraction) {
            bail!("eval.rejection_fraction must lie in [0, 1]");
        }
        if self.eval.batch_size == 0 {
            bail!("eval.batch_size must be positive");
        }
        if self.student_epochs == Some(0) {
            bail!("student_epochs must be positive");
        }
        self.grammar.validate()?;
        self.train.validate()?;
        if self.train.model.vocab_size != self.grammar.vocab_size {
            bail!(
                "model vocab_size {} differs from grammar vocab_size {}",
                self.train.model.vocab_size,
                self.grammar.vocab_size
            );
        }
        Ok(())
    }

    pub fn member_seed(&self, index: usize) -> u64 {
        self.train.seed.wrapping_add(index as u64)
    }

    pub fn student_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.student_epochs.unwrap_or(self.train.epochs),
            checkpoint_path: None,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// Writes the effective configuration next to an output.
    pub fn dump(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("effective_config.toml");
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
