//! Synthetic experiments and a Monte-Carlo harness that redraws the
//! assignment and reruns whole estimation pipelines.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{encode_covariates, CovariateValue, DatasetError, Experiment, MissingEncoding, Unit};
use crate::estimator::{adjusted_estimate, ht_estimate, EstimatorError, Imputations, SyntheticTruth};
use crate::imputation::{impute, ImputationError, LearnerConfig};
use crate::llmclient::{Cache, Client, LlmError, MockConfig, MockProvider, PromptTemplate, QuestionSpec};
use crate::pairing::{aggregate_scores, plan_pairs, stratify, GroupSpec, PairingError, PlanOptions};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("at least 100 replications are required, got {0}")]
    TooFewReplications(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// `Σ x_j / √k`.
    Linear,
    /// `2·1{x0 > 0} − 1`.
    Step,
    /// `x0·x1 + x0 / 2`.
    Interaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Constant(f64),
    /// `τ_i = mean + slope·x0_i`.
    Heterogeneous { mean: f64, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub label: String,
    pub n: usize,
    pub p: f64,
    /// Number of observed iid standard-normal covariates.
    pub k: usize,
    pub outcome: OutcomeModel,
    /// Scale of the part of `y_c` not explained by the covariates.
    pub noise_sd: f64,
    pub effect: Effect,
    /// Share of that residual variance carried by the hidden latent quality.
    pub signal_share: f64,
    pub seed: u64,
    /// Redraw potential outcomes each replication instead of holding them
    /// fixed.
    #[serde(default)]
    pub redraw_outcomes: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            label: "linear".into(),
            n: 200,
            p: 0.5,
            k: 3,
            outcome: OutcomeModel::Linear,
            noise_sd: 1.0,
            effect: Effect::Constant(0.0),
            signal_share: 0.0,
            seed: 0,
            redraw_outcomes: false,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::Config(format!("{}: {m}", self.label)));
        if self.n < 10 {
            return bad("n must be at least 10");
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad("p must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.signal_share) {
            return bad("signal_share must lie in [0, 1]");
        }
        if self.k == 0 || (self.outcome == OutcomeModel::Interaction && self.k < 2) {
            return bad("too few covariates for the outcome model");
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative");
        }
        Ok(())
    }
}

/// A synthetic population with one assignment draw.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub experiment: Experiment,
    pub truth: SyntheticTruth,
    /// Hidden quality per unit, the mock provider's latent score.
    pub latent: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `Z_i ~ Bernoulli(p)` independently, redrawing in the rare case
/// that an arm has fewer than two units.
pub fn draw_assignment(n: usize, p: f64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let z: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(p))).collect();
        let treated = z.iter().filter(|&&v| v == 1).count();
        if treated >= 2 && n - treated >= 2 {
            return z;
        }
    }
}

fn population(dgp: &DgpConfig, seed: u64) -> (Vec<Unit>, SyntheticTruth, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<Vec<f64>> = (0..dgp.k).map(|_| normals(&mut rng, dgp.n)).collect();
    let latent = normals(&mut rng, dgp.n);
    let eps = normals(&mut rng, dgp.n);
    let (a, b) = (dgp.signal_share.sqrt(), (1.0 - dgp.signal_share).sqrt());
    let mut y_c = Vec::with_capacity(dgp.n);
    let mut y_t = Vec::with_capacity(dgp.n);
    for i in 0..dgp.n {
        let f = match dgp.outcome {
            OutcomeModel::Linear => cols.iter().map(|c| c[i]).sum::<f64>() / (dgp.k as f64).sqrt(),
            OutcomeModel::Step => {
                if cols[0][i] > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            OutcomeModel::Interaction => cols[0][i] * cols[1][i] + cols[0][i] / 2.0,
        };
        let yc = f + dgp.noise_sd * (a * latent[i] + b * eps[i]);
        let tau = match dgp.effect {
            Effect::Constant(t) => t,
            Effect::Heterogeneous { mean, slope } => mean + slope * cols[0][i],
        };
        y_c.push(yc);
        y_t.push(yc + tau);
    }
    let units = (0..dgp.n)
        .map(|i| Unit {
            id: format!("u{i}"),
            covariates: (0..dgp.k).map(|j| (format!("x{j}"), CovariateValue::Real(cols[j][i]))).collect(),
            text_fields: Vec::new(),
        })
        .collect();
    (units, SyntheticTruth::new(y_t, y_c), latent)
}

/// Draws potential outcomes from `dgp.seed`, then one assignment.
pub fn generate(dgp: &DgpConfig) -> Result<Synthetic, SimulationError> {
    dgp.validate()?;
    let (units, truth, latent) = population(dgp, dgp.seed);
    let z = draw_assignment(dgp.n, dgp.p, dgp.seed.wrapping_add(0x5eed));
    let y = truth.observe(&z);
    let experiment = Experiment::from_parts(units, z, y, dgp.p)?;
    Ok(Synthetic {
        experiment,
        truth,
        latent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ht,
    /// Cross-fitted learner on the observed covariates.
    Base,
    /// Base covariates plus the adjusted pair score from mock comparisons.
    PairScore,
    /// Imputations equal to the true potential outcomes.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub label: String,
    pub kind: EstimatorKind,
    #[serde(default)]
    pub learner: LearnerConfig,
    /// Units per comparison stratum, cut on the base model's `m̂`.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub mock: MockConfig,
}

fn default_group_size() -> usize {
    10
}

impl PipelineConfig {
    pub fn new(label: &str, kind: EstimatorKind) -> Self {
        PipelineConfig {
            label: label.into(),
            kind,
            learner: LearnerConfig::loo_linear(),
            group_size: 10,
            mock: MockConfig::default(),
        }
    }
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub tau_hat: f64,
    pub variance: f64,
    pub se: f64,
    pub tau_bar: f64,
}

fn run_pipeline(sim: &Synthetic, pipeline: &PipelineConfig, rep_seed: u64) -> Result<Draw, SimulationError> {
    let e = &sim.experiment;
    let result = match pipeline.kind {
        EstimatorKind::Ht => ht_estimate(e)?,
        EstimatorKind::Oracle => {
            let imp = Imputations {
                y_hat_t: sim.truth.y_t.clone(),
                y_hat_c: sim.truth.y_c.clone(),
                cross_fitted: true,
            };
            adjusted_estimate(e, &imp, &pipeline.label)?
        }
        EstimatorKind::Base => {
            let x = encode_covariates(e, &[], MissingEncoding::Indicator)?;
            let (imp, _) = impute(e, &x, &pipeline.learner)?;
            adjusted_estimate(e, &imp, &pipeline.label)?
        }
        EstimatorKind::PairScore => {
            let x = encode_covariates(e, &[], MissingEncoding::Indicator)?;
            let (base_imp, _) = impute(e, &x, &pipeline.learner)?;
            let m_hat = base_imp.blend(e.p[0]);
            let strata = stratify(&m_hat, GroupSpec::GroupSize(pipeline.group_size))?;
            let question = QuestionSpec::single("quality", "likely to have the higher outcome");
            let plan = plan_pairs(&strata, &[question.id.clone()], rep_seed, &PlanOptions::default());
            let latent: HashMap<String, f64> = e
                .units
                .iter()
                .zip(&sim.latent)
                .map(|(u, &l)| (u.id.clone(), l))
                .collect();
            let mock = MockConfig {
                seed: pipeline.mock.seed.wrapping_add(rep_seed),
                ..pipeline.mock.clone()
            };
            let client = Client::new(Arc::new(MockProvider::new(latent, mock)), "mock", Cache::in_memory(), false)?;
            let mut template = PromptTemplate::default();
            for name in e.covariate_names() {
                template.sentences.insert(name.clone(), format!("Its {name} is {{value}}."));
            }
            let comparisons = client.run_plan(&plan, &e.units, &[question], &template)?;
            let scores = aggregate_scores(&comparisons, &plan, e.len())?;
            let x = x.append(&scores.to_extra_columns())?;
            let (imp, _) = impute(e, &x, &pipeline.learner)?;
            adjusted_estimate(e, &imp, &pipeline.label)?
        }
    };
    Ok(Draw {
        tau_hat: result.tau_hat,
        variance: result.variance,
        se: result.se,
        tau_bar: sim.truth.tau_bar,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub dgp: String,
    pub estimator: String,
    pub replications: usize,
    pub tau_bar: f64,
    pub mean_tau_hat: f64,
    pub bias: f64,
    /// Standard error of `mean_tau_hat` across replications.
    pub mc_se: f64,
    pub mean_est_variance: f64,
    pub empirical_variance: f64,
    /// Monte-Carlo standard error of `mean_est_variance − empirical_variance`.
    pub variance_gap_mc_se: f64,
    pub coverage: f64,
}

impl McReport {
    fn from_draws(dgp: &str, estimator: &str, draws: &[Draw]) -> Self {
        let r = draws.len() as f64;
        let mean = |f: &dyn Fn(&Draw) -> f64| draws.iter().map(f).sum::<f64>() / r;
        let mean_tau_hat = mean(&|d| d.tau_hat);
        let tau_bar = mean(&|d| d.tau_bar);
        let err_mean = mean(&|d| d.tau_hat - d.tau_bar);
        // Deviations from the per-replication truth (equal to deviations of
        // tau_hat when potential outcomes are fixed).
        let dev: Vec<f64> = draws.iter().map(|d| d.tau_hat - d.tau_bar - err_mean).collect();
        let m2 = dev.iter().map(|d| d * d).sum::<f64>() / r;
        let m4 = dev.iter().map(|d| d.powi(4)).sum::<f64>() / r;
        let empirical_variance = m2 * r / (r - 1.0);
        let mean_est_variance = mean(&|d| d.variance);
        let est_var_sd = (draws.iter().map(|d| (d.variance - mean_est_variance).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
        let se_emp = ((m4 - m2 * m2).max(0.0) / r).sqrt();
        let se_est = est_var_sd / r.sqrt();
        let covered = draws
            .iter()
            .filter(|d| (d.tau_hat - d.tau_bar).abs() <= 1.96 * d.se)
            .count();
        McReport {
            dgp: dgp.to_string(),
            estimator: estimator.to_string(),
            replications: draws.len(),
            tau_bar,
            mean_tau_hat,
            bias: err_mean,
            mc_se: (empirical_variance / r).sqrt(),
            mean_est_variance,
            empirical_variance,
            variance_gap_mc_se: (se_emp * se_emp + se_est * se_est).sqrt(),
            coverage: covered as f64 / r,
        }
    }
}

/// Reports plus per-replication draws, `draws[rep][estimator]`.
#[derive(Debug, Clone)]
pub struct McRun {
    pub reports: Vec<McReport>,
    pub draws: Vec<Vec<Draw>>,
}

/// Replication `r` draws its assignment from `dgp.seed + r + 1` (and, with
/// `redraw_outcomes`, its population too) and runs every pipeline on that
/// same draw.
pub fn monte_carlo(
    dgp: &DgpConfig,
    pipelines: &[PipelineConfig],
    replications: usize,
) -> Result<McRun, SimulationError> {
    dgp.validate()?;
    if replications < 100 {
        return Err(SimulationError::TooFewReplications(replications));
    }
    let fixed = population(dgp, dgp.seed);
    let draws: Vec<Vec<Draw>> = (0..replications as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<Draw>, SimulationError> {
            let rep_seed = dgp.seed.wrapping_add(r + 1);
            let (units, truth, latent) = if dgp.redraw_outcomes {
                population(dgp, rep_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
            } else {
                fixed.clone()
            };
            let z = draw_assignment(dgp.n, dgp.p, rep_seed);
            let y = truth.observe(&z);
            let sim = Synthetic {
                experiment: Experiment::from_parts(units, z, y, dgp.p)?,
                truth,
                latent,
            };
            pipelines.iter().map(|p| run_pipeline(&sim, p, rep_seed)).collect()
        })
        .collect::<Result<_, _>>()?;
    let reports = pipelines
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let column: Vec<Draw> = draws.iter().map(|d| d[k]).collect();
            McReport::from_draws(&dgp.label, &p.label, &column)
        })
        .collect();
    Ok(McRun { reports, draws })
}

pub fn write_reports_csv<W: Write>(reports: &[McReport], writer: W) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// DGPs used by `simulate --suite default` and the variance checks.
pub fn default_suite(seed: u64) -> Vec<DgpConfig> {
    vec![
        DgpConfig {
            label: "linear_tau2_p05".into(),
            effect: Effect::Constant(2.0),
            seed,
            ..DgpConfig::default()
        },
        DgpConfig {
            label: "step_null_p03".into(),
            p: 0.3,
            outcome: OutcomeModel::Step,
            seed: seed.wrapping_add(1),
            ..DgpConfig::default()
        },
        DgpConfig {
            label: "interaction_hetero_p05".into(),
            outcome: OutcomeModel::Interaction,
            effect: Effect::Heterogeneous { mean: 1.0, slope: 0.5 },
            seed: seed.wrapping_add(2),
            ..DgpConfig::default()
        },
        DgpConfig {
            label: "linear_latent_p05".into(),
            n: 300,
            effect: Effect::Constant(1.0),
            signal_share: 0.8,
            seed: seed.wrapping_add(3),
            ..DgpConfig::default()
        },
    ]
}

/// Estimators run on every suite DGP.
pub fn default_pipelines() -> Vec<PipelineConfig> {
    vec![
        PipelineConfig::new("ht", EstimatorKind::Ht),
        PipelineConfig::new("base", EstimatorKind::Base),
        PipelineConfig::new("base+pair_score", EstimatorKind::PairScore),
    ]
}
