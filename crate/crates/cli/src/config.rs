use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rct_core::dataset::{MissingEncoding, Schema};
use rct_core::evaluation::Recipe;
use rct_core::imputation::LearnerConfig;
use rct_core::llmclient::{PromptTemplate, ProviderConfig, QuestionSpec};
use rct_core::pairing::PlanOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    OobPredictionQuantiles,
    CategoricalColumn,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StratifyConfig {
    pub basis: Basis,
    /// Covariate or stratum column for the categorical basis.
    pub column: Option<String>,
    pub group_size: Option<usize>,
    pub n_groups: Option<usize>,
    /// Cut quantile groups inside each analysis stratum.
    pub within_strata: bool,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        StratifyConfig {
            basis: Basis::OobPredictionQuantiles,
            column: None,
            group_size: Some(10),
            n_groups: None,
            within_strata: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub alpha: f64,
    /// Empty means: base, base plus each score column, base plus all.
    pub recipes: Vec<Recipe>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            alpha: 0.05,
            recipes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub replications: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { replications: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub path: PathBuf,
    pub schema: Schema,
    #[serde(default)]
    pub missing: MissingEncoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub impute: LearnerConfig,
    #[serde(default)]
    pub stratify: StratifyConfig,
    #[serde(default)]
    pub pairing: PlanOptions,
    #[serde(default)]
    pub questions: Vec<QuestionSpec>,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

impl Config {
    /// Reads the TOML file; relative data paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(data) = config.data.as_mut() {
            if data.path.is_relative() {
                if let Some(dir) = path.parent() {
                    data.path = dir.join(&data.path);
                }
            }
        }
        Ok(config)
    }

    pub fn data(&self) -> Result<&DataConfig> {
        match &self.data {
            Some(d) => Ok(d),
            None => bail!("the config has no [data] section"),
        }
    }

    pub fn check_questions(&self) -> Result<()> {
        if self.questions.is_empty() {
            bail!("the config defines no [[questions]]");
        }
        for q in &self.questions {
            q.validate()?;
        }
        Ok(())
    }
}
