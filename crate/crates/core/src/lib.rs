//! Design-based treatment-effect estimation for randomized experiments,
//! with pairwise LLM comparisons turned into an adjusted pair score
//! covariate.

pub mod dataset;
pub mod estimator;
pub mod evaluation;
pub mod imputation;
pub mod llmclient;
pub mod pairing;
pub mod simulation;

pub use dataset::{
    encode_covariates, load_experiment, AugmentedCovariates, CovariateValue, Experiment, ExtraColumn, MissingEncoding,
    OutcomeKind, Schema, Unit,
};
pub use estimator::{adjusted_estimate, ess_ratio, ht_estimate, EstimateResult, Imputations, SyntheticTruth};
pub use evaluation::{compare_models, significance_test, ComparisonReport, EstimateRow, Recipe, SignificanceReport};
pub use imputation::{impute, ForestConfig, LearnerConfig, LearnerKind};
pub use llmclient::{Client, MockConfig, MockProvider, PromptTemplate, ProviderConfig, QuestionSpec};
pub use pairing::{aggregate_scores, plan_pairs, stratify, GroupSpec, PairPlan, PairScoreSet, StratumAssignment, Verdict};
pub use simulation::{generate, monte_carlo, DgpConfig, McReport, PipelineConfig};
