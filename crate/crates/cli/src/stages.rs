use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use rct_core::dataset::{encode_covariates, load_experiment, AugmentedCovariates, Experiment, ExtraColumn};
use rct_core::evaluation::{compare_models, significance_test, write_significance_csv, Recipe};
use rct_core::imputation::{impute, FitReport};
use rct_core::llmclient::{Cache, Client, HttpProvider, LlmError, MockProvider, ProviderKind, Transport};
use rct_core::pairing::{
    aggregate_scores, plan_pairs, stratify, stratify_within, GroupSpec, PairComparison, PairPlan, PairScoreSet,
    StratumAssignment,
};
use rct_core::simulation::{default_pipelines, default_suite, monte_carlo, write_reports_csv};

use crate::config::{Basis, Config};
use crate::manifest::{digest_bytes, digest_file, now, Artifact, Manifest, StageRecord};

pub const INGEST: &str = "ingest.json";
pub const BASE_PREDICTIONS: &str = "base_predictions.csv";
pub const IMPUTE_REPORT: &str = "impute_report.json";
pub const STRATA: &str = "strata.csv";
pub const PAIRS: &str = "pairs.csv";
pub const COMPARISONS: &str = "comparisons.csv";
pub const SCORES: &str = "scores.csv";
pub const ESTIMATES: &str = "estimates.csv";
pub const SIGNIFICANCE: &str = "significance.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const SIMULATION: &str = "simulation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    UpToDate,
}

/// Query-time overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct QueryOptions {
    pub provider: Option<ProviderKind>,
    pub live: bool,
    pub model: Option<String>,
    pub max_in_flight: Option<usize>,
    pub rpm: Option<f64>,
    pub cache_path: Option<PathBuf>,
}

pub struct Ctx {
    pub config: Config,
    pub out_dir: PathBuf,
    pub force: bool,
    pub seed: u64,
    manifest: Manifest,
}

impl Ctx {
    pub fn new(config: Config, config_digest: String, out_dir: PathBuf, force: bool, seed: Option<u64>) -> Result<Ctx> {
        std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let mut manifest = Manifest::load(&out_dir)?;
        let seed = seed.unwrap_or(config.seed);
        manifest.config_digest = config_digest;
        manifest.seed = seed;
        Ok(Ctx {
            config,
            out_dir,
            force,
            seed,
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn upstream(&self, name: &str, producer: &str) -> Result<String> {
        let path = self.path(name);
        if !path.exists() {
            bail!(
                "missing upstream artifact {}; run `rct {producer}` first",
                path.display()
            );
        }
        digest_file(&path)
    }

    /// Runs `body` unless the recorded outputs already match these inputs.
    /// Outputs that exist but do not match are only replaced with `--force`.
    fn stage(
        &mut self,
        name: &str,
        section: Value,
        upstream: &[(&str, &str)],
        outputs: &[&str],
        provider: Option<String>,
        body: impl FnOnce(&Ctx) -> Result<()>,
    ) -> Result<Status> {
        let mut ups = Vec::new();
        for (file, producer) in upstream {
            ups.push(json!([file, self.upstream(file, producer)?]));
        }
        let input = json!({"stage": name, "config": section, "seed": self.seed, "upstream": ups});
        let input_digest = digest_bytes(input.to_string().as_bytes());

        if let Some(record) = self.manifest.stages.get(name) {
            let intact = record.input_digest == input_digest
                && record.outputs.len() == outputs.len()
                && record.outputs.iter().all(|a| {
                    let p = self.path(&a.path);
                    p.exists() && digest_file(&p).map(|d| d == a.digest).unwrap_or(false)
                });
            if intact {
                println!("{name}: up to date");
                return Ok(Status::UpToDate);
            }
        }
        let existing: Vec<&str> = outputs.iter().copied().filter(|o| self.path(o).exists()).collect();
        if !existing.is_empty() && !self.force {
            bail!(
                "{name}: existing outputs ({}) in {} do not match the current inputs (config, seed or upstream \
                 artifacts changed, or the files were edited); pass --force to overwrite them",
                existing.join(", "),
                self.out_dir.display()
            );
        }
        body(self)?;
        let outputs = outputs
            .iter()
            .map(|o| {
                Ok(Artifact {
                    path: o.to_string(),
                    digest: digest_file(&self.path(o))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                input_digest,
                outputs,
                seed: self.seed,
                provider,
                completed_at: now(),
            },
        );
        self.manifest.save(&self.out_dir)?;
        Ok(Status::Ran)
    }

    fn experiment(&self) -> Result<Experiment> {
        let data = self.config.data()?;
        let e = load_experiment(&data.path, &data.schema)
            .with_context(|| format!("loading {}", data.path.display()))?;
        Ok(e)
    }

    fn base_design(&self, e: &Experiment, extras: &[ExtraColumn]) -> Result<AugmentedCovariates> {
        let data = self.config.data()?;
        let x = encode_covariates(e, extras, data.missing)?;
        Ok(x)
    }

    fn score_columns(&self, e: &Experiment) -> Result<Vec<ExtraColumn>> {
        let ids = e.ids();
        let scores = PairScoreSet::read_csv(File::open(self.path(SCORES))?, &ids)
            .with_context(|| format!("reading {}", self.path(SCORES).display()))?;
        Ok(scores.to_extra_columns())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    data_digest: String,
    n: usize,
    n_treated: usize,
    n_control: usize,
    strata: Vec<(String, usize)>,
    covariates: Vec<String>,
    warning: Option<String>,
}

pub fn ingest(ctx: &mut Ctx) -> Result<Status> {
    let data = ctx.config.data()?.clone();
    let data_digest = digest_file(&data.path)?;
    let section = json!({"data_digest": data_digest, "schema": data.schema, "missing": data.missing});
    ctx.stage("ingest", section, &[], &[INGEST], None, |ctx| {
        let e = ctx.experiment()?;
        let summary = IngestSummary {
            data_digest: data_digest.clone(),
            n: e.len(),
            n_treated: e.n_treated(),
            n_control: e.n_control(),
            strata: e.strata_indices().into_iter().map(|(l, idx)| (l, idx.len())).collect(),
            covariates: e.covariate_names(),
            warning: e.assignment_warning(),
        };
        if let Some(w) = &summary.warning {
            eprintln!("warning: {w}");
        }
        println!(
            "ingest: {} units ({} treated, {} control) in {} strata",
            summary.n,
            summary.n_treated,
            summary.n_control,
            summary.strata.len()
        );
        std::fs::write(ctx.path(INGEST), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BasePrediction {
    id: String,
    y_hat_t: f64,
    y_hat_c: f64,
    m_hat: f64,
}

pub fn impute_stage(ctx: &mut Ctx) -> Result<Status> {
    let section = json!({"learner": ctx.config.impute});
    ctx.stage(
        "impute",
        section,
        &[(INGEST, "ingest")],
        &[BASE_PREDICTIONS, IMPUTE_REPORT],
        None,
        |ctx| {
            let e = ctx.experiment()?;
            let x = ctx.base_design(&e, &[])?;
            let (imp, report): (_, FitReport) = impute(&e, &x, &ctx.config.impute)?;
            let mut w = csv::Writer::from_path(ctx.path(BASE_PREDICTIONS))?;
            for (i, unit) in e.units.iter().enumerate() {
                let p = e.p[i];
                w.serialize(BasePrediction {
                    id: unit.id.clone(),
                    y_hat_t: imp.y_hat_t[i],
                    y_hat_c: imp.y_hat_c[i],
                    m_hat: p * imp.y_hat_c[i] + (1.0 - p) * imp.y_hat_t[i],
                })?;
            }
            w.flush()?;
            std::fs::write(ctx.path(IMPUTE_REPORT), serde_json::to_string_pretty(&report)?)?;
            println!(
                "impute: cross-fitted MSE treated {:.4}, control {:.4} on {} columns",
                report.mse_t,
                report.mse_c,
                report.column_names.len()
            );
            Ok(())
        },
    )
}

fn read_base_predictions(ctx: &Ctx, e: &Experiment) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(ctx.path(BASE_PREDICTIONS))?;
    let rows: Vec<BasePrediction> = r.deserialize().collect::<Result<_, _>>()?;
    if rows.len() != e.len() || rows.iter().zip(&e.units).any(|(r, u)| r.id != u.id) {
        bail!("{} does not list the experiment's units in order", BASE_PREDICTIONS);
    }
    Ok(rows.into_iter().map(|r| r.m_hat).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct StratumRow {
    id: String,
    stratum: String,
}

pub fn stratify_stage(ctx: &mut Ctx) -> Result<Status> {
    let cfg = ctx.config.stratify.clone();
    let upstream: &[(&str, &str)] = match cfg.basis {
        Basis::OobPredictionQuantiles => &[(INGEST, "ingest"), (BASE_PREDICTIONS, "impute")],
        _ => &[(INGEST, "ingest")],
    };
    ctx.stage("stratify", json!(cfg), upstream, &[STRATA], None, |ctx| {
        let e = ctx.experiment()?;
        let assignment = match cfg.basis {
            Basis::OobPredictionQuantiles => {
                let m_hat = read_base_predictions(ctx, &e)?;
                let spec = match (cfg.group_size, cfg.n_groups) {
                    (_, Some(g)) => GroupSpec::NGroups(g),
                    (Some(s), None) => GroupSpec::GroupSize(s),
                    (None, None) => bail!("stratify needs group_size or n_groups"),
                };
                if cfg.within_strata && e.strata.is_some() {
                    stratify_within(&m_hat, &e.strata_indices(), spec)?
                } else {
                    stratify(&m_hat, spec)?
                }
            }
            Basis::CategoricalColumn => {
                let column = cfg
                    .column
                    .as_deref()
                    .ok_or_else(|| anyhow!("the categorical basis needs stratify.column"))?;
                let labels: Vec<String> = if Some(column) == ctx.config.data()?.schema.stratum.as_deref() {
                    e.strata.clone().unwrap_or_default()
                } else {
                    e.units
                        .iter()
                        .map(|u| match u.covariate(column) {
                            Some(v) => Ok(v.display().unwrap_or_else(|| "missing".into())),
                            None => Err(anyhow!("no covariate named `{column}`")),
                        })
                        .collect::<Result<_>>()?
                };
                StratumAssignment::categorical(&labels)
            }
            Basis::None => StratumAssignment::single(e.len()),
        };
        let mut w = csv::Writer::from_path(ctx.path(STRATA))?;
        for (i, unit) in e.units.iter().enumerate() {
            w.serialize(StratumRow {
                id: unit.id.clone(),
                stratum: assignment.labels[assignment.stratum_of[i]].clone(),
            })?;
        }
        w.flush()?;
        let sizes = assignment.sizes();
        println!(
            "stratify: {} strata, sizes {}..{}",
            assignment.n_strata(),
            sizes.iter().min().unwrap_or(&0),
            sizes.iter().max().unwrap_or(&0)
        );
        Ok(())
    })
}

fn read_strata(ctx: &Ctx, e: &Experiment) -> Result<StratumAssignment> {
    let mut r = csv::Reader::from_path(ctx.path(STRATA))?;
    let rows: Vec<StratumRow> = r.deserialize().collect::<Result<_, _>>()?;
    if rows.len() != e.len() || rows.iter().zip(&e.units).any(|(r, u)| r.id != u.id) {
        bail!("{} does not list the experiment's units in order", STRATA);
    }
    Ok(StratumAssignment::categorical(
        &rows.into_iter().map(|r| r.stratum).collect::<Vec<_>>(),
    ))
}

fn question_ids(config: &Config) -> Vec<String> {
    config.questions.iter().map(|q| q.id.clone()).collect()
}

pub fn pair(ctx: &mut Ctx) -> Result<Status> {
    ctx.config.check_questions()?;
    let section = json!({"pairing": ctx.config.pairing, "questions": question_ids(&ctx.config)});
    ctx.stage("pair", section, &[(INGEST, "ingest"), (STRATA, "stratify")], &[PAIRS], None, |ctx| {
        let e = ctx.experiment()?;
        let strata = read_strata(ctx, &e)?;
        let plan = plan_pairs(&strata, &question_ids(&ctx.config), ctx.seed, &ctx.config.pairing);
        plan.write_csv(File::create(ctx.path(PAIRS))?, &e.ids(), &strata)?;
        println!(
            "pair: {} pairs x {} questions{}",
            plan.pairs.len(),
            plan.questions.len(),
            if plan.skipped_strata.is_empty() {
                String::new()
            } else {
                format!(", skipped singleton strata {}", plan.skipped_strata.join(", "))
            }
        );
        Ok(())
    })
}

fn read_plan(ctx: &Ctx, e: &Experiment) -> Result<(PairPlan, StratumAssignment)> {
    let strata = read_strata(ctx, e)?;
    let plan = PairPlan::read_csv(
        File::open(ctx.path(PAIRS))?,
        &e.ids(),
        &strata,
        question_ids(&ctx.config),
        ctx.seed,
    )?;
    Ok((plan, strata))
}

/// Reads a numeric column keyed by the id column straight from the data CSV.
fn read_latent(path: &Path, id_column: &str, column: &str) -> Result<HashMap<String, f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("data has no column `{name}`"))
    };
    let (id, col) = (find(id_column)?, find(column)?);
    let mut out = HashMap::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(col).unwrap_or("").trim();
        // The mock fails on units it has no latent for.
        if raw.is_empty() || raw == "NA" {
            continue;
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| anyhow!("row {row}: latent `{raw}` in column `{column}` is not a number"))?;
        out.insert(rec.get(id).unwrap_or("").trim().to_string(), v);
    }
    Ok(out)
}

pub fn query(ctx: &mut Ctx, opts: &QueryOptions) -> Result<Status> {
    ctx.config.check_questions()?;
    let mut provider = ctx.config.provider.clone();
    if let Some(kind) = opts.provider {
        provider.kind = kind;
    }
    if let Some(model) = &opts.model {
        provider.model = model.clone();
    }
    if let Some(n) = opts.max_in_flight {
        provider.max_in_flight = n;
    }
    if opts.rpm.is_some() {
        provider.requests_per_minute = opts.rpm;
    }
    if provider.kind == ProviderKind::HttpChat && !opts.live {
        return Err(anyhow!(LlmError::LiveNotAllowed).context(
            "the http provider sends paid requests to a live endpoint; rerun with --live to allow it, \
             or use --provider mock",
        ));
    }
    let kind_name = match provider.kind {
        ProviderKind::Mock => "mock",
        ProviderKind::HttpChat => "http",
    };
    // Concurrency and rate settings do not change answers, so they stay out
    // of the digest.
    let section = json!({
        "questions": ctx.config.questions,
        "template": ctx.config.template,
        "kind": kind_name,
        "model": provider.model,
        "endpoint": if provider.kind == ProviderKind::HttpChat { Some(&provider.endpoint) } else { None },
        "temperature": provider.temperature,
        "mock": if provider.kind == ProviderKind::Mock { Some((&provider.mock, &provider.mock_latent_column)) } else { None },
    });
    let cache_path = opts.cache_path.clone().unwrap_or_else(|| ctx.path("cache.jsonl"));
    let upstream = [(INGEST, "ingest"), (STRATA, "stratify"), (PAIRS, "pair")];
    ctx.stage("query", section, &upstream, &[COMPARISONS], Some(kind_name.into()), |ctx| {
        let e = ctx.experiment()?;
        let (plan, _) = read_plan(ctx, &e)?;
        let transport: Arc<dyn Transport> = match provider.kind {
            ProviderKind::Mock => {
                let data = ctx.config.data()?;
                let column = provider
                    .mock_latent_column
                    .as_deref()
                    .ok_or_else(|| anyhow!("the mock provider needs provider.mock_latent_column"))?;
                let latent = read_latent(&data.path, &data.schema.id, column)?;
                let mut mock = provider.mock.clone();
                mock.seed = mock.seed.wrapping_add(ctx.seed);
                Arc::new(MockProvider::new(latent, mock))
            }
            ProviderKind::HttpChat => Arc::new(HttpProvider::from_env(
                &provider.endpoint,
                &provider.model,
                provider.temperature,
                &provider.api_key_env,
                Duration::from_secs(provider.timeout_secs),
            )?),
        };
        let cache = Cache::open(&cache_path)?;
        let client = Client::new(transport, &provider.model, cache, opts.live)?.configured(&provider);
        let comparisons = client.run_plan(&plan, &e.units, &ctx.config.questions, &ctx.config.template)?;
        let mut w = csv::Writer::from_path(ctx.path(COMPARISONS))?;
        for c in &comparisons {
            w.serialize(c)?;
        }
        w.flush()?;
        let invalid = comparisons
            .iter()
            .filter(|c| c.verdict == rct_core::pairing::Verdict::Invalid)
            .count();
        println!(
            "query: {} verdicts ({} invalid), {} provider calls, {} cache hits",
            comparisons.len(),
            invalid,
            client.transport_calls(),
            client.cache_hits()
        );
        Ok(())
    })
}

pub fn score(ctx: &mut Ctx) -> Result<Status> {
    let upstream = [(INGEST, "ingest"), (STRATA, "stratify"), (PAIRS, "pair"), (COMPARISONS, "query")];
    ctx.stage("score", json!({}), &upstream, &[SCORES], None, |ctx| {
        let e = ctx.experiment()?;
        let (plan, _) = read_plan(ctx, &e)?;
        let mut r = csv::Reader::from_path(ctx.path(COMPARISONS))?;
        let comparisons: Vec<PairComparison> = r.deserialize().collect::<Result<_, _>>()?;
        let scores = aggregate_scores(&comparisons, &plan, e.len())?;
        scores.write_csv(File::create(ctx.path(SCORES))?, &e.ids())?;
        for (q, s) in &scores.scores {
            let missing = s.iter().filter(|v| v.is_none()).count();
            println!("score: {q}: {} units scored, {missing} without a valid comparison", s.len() - missing);
        }
        Ok(())
    })
}

fn default_recipes(scores: &[ExtraColumn]) -> Vec<Recipe> {
    let mut recipes = vec![Recipe::base()];
    let names: Vec<&str> = scores.iter().map(|c| c.name.as_str()).collect();
    if names.len() > 1 {
        for n in &names {
            recipes.push(Recipe::base_plus(format!("base+{n}"), &[n]));
        }
    }
    recipes.push(Recipe::base_plus("base+pair_score", &names));
    recipes
}

pub fn estimate(ctx: &mut Ctx) -> Result<Status> {
    let section = json!({"learner": ctx.config.impute});
    ctx.stage("estimate", section, &[(INGEST, "ingest"), (SCORES, "score")], &[ESTIMATES], None, |ctx| {
        let e = ctx.experiment()?;
        let scores = ctx.score_columns(&e)?;
        let x = ctx.base_design(&e, &scores)?;
        let report = compare_models(&e, &x, &default_recipes(&scores), &ctx.config.impute)?;
        report.write_csv(File::create(ctx.path(ESTIMATES))?)?;
        print!("{}", report.to_text());
        Ok(())
    })
}

pub fn evaluate(ctx: &mut Ctx) -> Result<Status> {
    let section = json!({"learner": ctx.config.impute, "evaluate": ctx.config.evaluate});
    let upstream = [(INGEST, "ingest"), (BASE_PREDICTIONS, "impute"), (SCORES, "score")];
    let outputs = [SIGNIFICANCE, COMPARISON_CSV, COMPARISON_TXT];
    ctx.stage("evaluate", section, &upstream, &outputs, None, |ctx| {
        let e = ctx.experiment()?;
        let scores = ctx.score_columns(&e)?;
        let m_hat = read_base_predictions(ctx, &e)?;
        let base = ctx.base_design(&e, &[ExtraColumn::new("base_prediction", m_hat, "base model")])?;
        let sig = significance_test(&e, &base, &scores, ctx.config.evaluate.alpha)?;
        write_significance_csv(&sig, File::create(ctx.path(SIGNIFICANCE))?)?;
        for s in &sig {
            println!(
                "evaluate: {} coefficient {:.4} (se {:.4}, p {:.4}){}",
                s.covariate,
                s.coefficient,
                s.se,
                s.p_value,
                if s.significant { "" } else { " not significant" }
            );
        }
        let x = ctx.base_design(&e, &scores)?;
        let recipes = if ctx.config.evaluate.recipes.is_empty() {
            default_recipes(&scores)
        } else {
            ctx.config.evaluate.recipes.clone()
        };
        let report = compare_models(&e, &x, &recipes, &ctx.config.impute)?;
        report.write_csv(File::create(ctx.path(COMPARISON_CSV))?)?;
        let text = report.to_text();
        std::fs::write(ctx.path(COMPARISON_TXT), &text)?;
        print!("{text}");
        Ok(())
    })
}

pub fn simulate(ctx: &mut Ctx, replications: Option<usize>) -> Result<Status> {
    let reps = replications.unwrap_or(ctx.config.simulate.replications);
    let section = json!({"suite": "default", "replications": reps});
    ctx.stage("simulate", section, &[], &[SIMULATION], None, |ctx| {
        let mut reports = Vec::new();
        for dgp in default_suite(ctx.seed) {
            let run = monte_carlo(&dgp, &default_pipelines(), reps)?;
            reports.extend(run.reports);
        }
        write_reports_csv(&reports, File::create(ctx.path(SIMULATION))?)?;
        println!(
            "{:<24} {:<16} {:>9} {:>9} {:>11} {:>11} {:>8}",
            "dgp", "estimator", "bias", "mc_se", "mean_var", "emp_var", "cover"
        );
        for r in &reports {
            println!(
                "{:<24} {:<16} {:>9.5} {:>9.5} {:>11.6} {:>11.6} {:>8.3}",
                r.dgp, r.estimator, r.bias, r.mc_se, r.mean_est_variance, r.empirical_variance, r.coverage
            );
        }
        Ok(())
    })
}
