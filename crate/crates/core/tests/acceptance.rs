//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test --release -p rct-core --test acceptance`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rct_core::dataset::{encode_covariates, CovariateValue, Experiment, ExtraColumn, MissingEncoding, Unit};
use rct_core::estimator::{adjusted_estimate, ess_ratio, ht_estimate, Imputations};
use rct_core::evaluation::significance_test;
use rct_core::imputation::{fit_loo, logistic_fit, Forest, ForestConfig};
use rct_core::llmclient::{
    Cache, ChatRequest, Client, MockConfig, MockProvider, PromptTemplate, QuestionSpec, Transport, TransportError,
};
use rct_core::pairing::{
    aggregate_scores, plan_pairs, PairComparison, PairPlan, PlanOptions, PlannedPair, Presentation, StratumAssignment,
    Verdict,
};
use rct_core::simulation::{
    default_pipelines, default_suite, monte_carlo, DgpConfig, Effect, EstimatorKind, PipelineConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn criterion_1() -> Outcome {
    let rows = [
        ("Science", 0.1227, 0.0977, 1.577),
        ("Neurophysiology", 0.1300, 0.1080, 1.446),
        ("Genetics", 0.1110, 0.0999, 1.234),
        ("Applied Physiology", 0.1707, 0.1680, 1.033),
        ("FASEB", 0.1066, 0.0912, 1.368),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (journal, base, both, published) in rows {
        let ess = ess_ratio(base, both).map_err(|e| e.to_string())?;
        ok &= (ess - published).abs() <= 0.01;
        detail.push(format!("{journal} {ess:.4} vs {published}"));
    }
    check(ok, detail.join("; "))
}

fn random_experiment(rng: &mut ChaCha8Rng, n: usize, p: f64) -> (Vec<u8>, Vec<f64>, Vec<f64>) {
    loop {
        let z: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(p))).collect();
        let t = z.iter().filter(|&&v| v == 1).count();
        if t >= 2 && n - t >= 2 {
            let y_c: Vec<f64> = (0..n).map(|_| 3.0 * normal(rng) + 1.0).collect();
            return (z, y_c.clone(), y_c);
        }
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for design in 0..100 {
        let n = rng.gen_range(6..200);
        let p = rng.gen_range(0.1..0.9);
        let tau = rng.gen_range(-5.0..5.0);
        let (z, y_c, _) = random_experiment(&mut rng, n, p);
        let y_t: Vec<f64> = y_c.iter().map(|v| v + tau).collect();
        let y: Vec<f64> = (0..n).map(|i| if z[i] == 1 { y_t[i] } else { y_c[i] }).collect();
        let e = Experiment::simple(z, y, p).map_err(|e| e.to_string())?;

        let ht = ht_estimate(&e).map_err(|e| e.to_string())?;
        let zero = adjusted_estimate(&e, &Imputations::zeros(n), "none").map_err(|e| e.to_string())?;
        if ht.tau_hat.to_bits() != zero.tau_hat.to_bits() {
            return Err(format!("design {design}: HT {} vs zero-imputation {}", ht.tau_hat, zero.tau_hat));
        }
        let perfect = Imputations {
            y_hat_t: y_t,
            y_hat_c: y_c,
            cross_fitted: true,
        };
        let r = adjusted_estimate(&e, &perfect, "oracle").map_err(|e| e.to_string())?;
        worst = worst.max((r.tau_hat - tau).abs());
    }
    check(
        worst <= 1e-10,
        format!("zero imputation == HT bitwise on 100 designs; oracle max |error| {worst:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let pipelines = [
        PipelineConfig::new("ht", EstimatorKind::Ht),
        PipelineConfig::new("adjusted", EstimatorKind::Base),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (k, (tau, p)) in [(0.0, 0.3), (0.0, 0.5), (2.0, 0.3), (2.0, 0.5)].into_iter().enumerate() {
        let dgp = DgpConfig {
            label: format!("tau{tau}_p{p}"),
            n: 200,
            p,
            effect: Effect::Constant(tau),
            seed: 300 + k as u64,
            ..DgpConfig::default()
        };
        let run = monte_carlo(&dgp, &pipelines, 2000).map_err(|e| e.to_string())?;
        for r in &run.reports {
            let pass = (r.mean_tau_hat - r.tau_bar).abs() <= 4.0 * r.mc_se;
            ok &= pass;
            detail.push(format!(
                "{}/{}: bias {:+.4} ({:.1} MC-se)",
                r.dgp,
                r.estimator,
                r.mean_tau_hat - r.tau_bar,
                (r.mean_tau_hat - r.tau_bar).abs() / r.mc_se
            ));
        }
    }
    check(ok, detail.join("; "))
}

fn criterion_4() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for dgp in default_suite(4000) {
        let run = monte_carlo(&dgp, &default_pipelines(), 2000).map_err(|e| e.to_string())?;
        for r in &run.reports {
            let conservative = r.mean_est_variance >= r.empirical_variance - 3.0 * r.variance_gap_mc_se;
            let covered = r.coverage >= 0.94;
            ok &= conservative && covered;
            detail.push(format!(
                "{}/{}: est var {:.5} vs emp {:.5} (gap se {:.5}), coverage {:.3}",
                r.dgp, r.estimator, r.mean_est_variance, r.empirical_variance, r.variance_gap_mc_se, r.coverage
            ));
        }
    }
    check(ok, detail.join("; "))
}

fn criterion_5() -> Outcome {
    let pipelines = [
        PipelineConfig::new("base", EstimatorKind::Base),
        PipelineConfig::new("base+pair_score", EstimatorKind::PairScore),
    ];
    let per_rep_ess = |signal_share: f64, seed: u64| -> Result<Vec<f64>, String> {
        let dgp = DgpConfig {
            label: format!("share{signal_share}"),
            n: 300,
            effect: Effect::Constant(1.0),
            signal_share,
            seed,
            ..DgpConfig::default()
        };
        let run = monte_carlo(&dgp, &pipelines, 200).map_err(|e| e.to_string())?;
        Ok(run.draws.iter().map(|d| (d[0].se / d[1].se).powi(2)).collect())
    };
    // Informative: the mock's latent is the hidden part of the outcome.
    let informative = per_rep_ess(0.8, 5000)?;
    let share = informative.iter().filter(|&&e| e > 1.2).count() as f64 / informative.len() as f64;
    // Pure noise: the latent carries none of the outcome.
    let noise = per_rep_ess(0.0, 5001)?;
    let mean_noise = noise.iter().sum::<f64>() / noise.len() as f64;
    let mean_inf = informative.iter().sum::<f64>() / informative.len() as f64;
    check(
        share >= 0.9 && (0.95..=1.05).contains(&mean_noise),
        format!(
            "informative: ESS > 1.2 in {:.1}% of 200 (mean ESS {mean_inf:.2}); pure noise: mean ESS {mean_noise:.4}",
            100.0 * share
        ),
    )
}

fn comparison(pair: usize, verdict: Verdict) -> PairComparison {
    PairComparison {
        pair,
        question: "q".into(),
        verdict,
        attempts: 1,
        raw: None,
    }
}

fn criterion_6() -> Outcome {
    let plan = plan_pairs(&StratumAssignment::single(10), &["q".to_string()], 6, &PlanOptions::default());
    let comps: Vec<PairComparison> = plan
        .pairs
        .iter()
        .map(|p| comparison(p.index, if (p.a + p.b) % 3 == 0 { Verdict::First } else { Verdict::Second }))
        .collect();
    let scores = aggregate_scores(&comps, &plan, 10).map_err(|e| e.to_string())?;
    let sum: f64 = scores.scores["q"].iter().map(|s| s.unwrap()).sum();
    let performed_ok = scores.performed["q"].iter().all(|&p| p == 9);

    let fixed = PairPlan {
        pairs: [(0, 1), (0, 2), (1, 2)]
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| PlannedPair {
                index: k,
                a,
                b,
                stratum: 0,
                presentation: Presentation::AFirst,
            })
            .collect(),
        questions: vec!["q".into()],
        seed: 0,
        skipped_strata: vec![],
    };
    let dropped = aggregate_scores(
        &[comparison(0, Verdict::First), comparison(1, Verdict::Invalid), comparison(2, Verdict::First)],
        &fixed,
        3,
    )
    .map_err(|e| e.to_string())?;
    let hand = vec![Some(1.0), Some(0.5), Some(0.0)];
    check(
        plan.pairs.len() == 45 && performed_ok && sum == 5.0 && dropped.scores["q"] == hand,
        format!(
            "{} pairs, performed all 9: {performed_ok}, sum of scores {sum}, dropped-pair scores {:?}",
            plan.pairs.len(),
            dropped.scores["q"]
        ),
    )
}

fn brute_loo(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let mut d = DMatrix::from_element(n - 1, x.ncols() + 1, 1.0);
            d.view_mut((0, 1), (n - 1, x.ncols())).copy_from(&x.select_rows(&keep));
            let yy = DVector::from_iterator(n - 1, keep.iter().map(|&r| y[r]));
            let beta = d.clone().svd(true, true).solve(&yy, 1e-12).expect("svd solve");
            beta[0] + (0..x.ncols()).map(|j| x[(i, j)] * beta[j + 1]).sum::<f64>()
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(15..60);
        let k = rng.gen_range(1..6);
        let x = DMatrix::from_fn(n, k, |_, _| normal(&mut rng));
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] * 1.5 + normal(&mut rng)).collect();
        let fit = fit_loo(&x, &y).map_err(|e| e.to_string())?;
        for (a, b) in fit.loo.iter().zip(brute_loo(&x, &y)) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    let n = 5000;
    let x = DMatrix::from_fn(n, 1, |_, _| normal(&mut rng));
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let eta = -1.0 + 2.0 * x[(i, 0)];
            f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp()))
        })
        .collect();
    let fit = logistic_fit(&y, &x, &["x".to_string()]).map_err(|e| e.to_string())?;
    let (b, se) = (fit.coefficients(), fit.standard_errors());
    let z0 = (b[0] + 1.0).abs() / se[0];
    let z1 = (b[1] - 2.0).abs() / se[1];

    let xf = DMatrix::from_fn(300, 4, |_, _| normal(&mut rng));
    let yf: Vec<f64> = (0..300).map(|i| xf[(i, 0)].sin() + xf[(i, 1)] + normal(&mut rng)).collect();
    let cfg = ForestConfig {
        n_trees: 100,
        seed: 77,
        ..ForestConfig::default()
    };
    let bits = |f: &Forest| -> Vec<Option<u64>> { f.oob_predictions(&xf).iter().map(|v| v.map(f64::to_bits)).collect() };
    let a = Forest::fit(&xf, &yf, &cfg, cfg.seed).map_err(|e| e.to_string())?;
    let b2 = Forest::fit(&xf, &yf, &cfg, cfg.seed).map_err(|e| e.to_string())?;
    let identical = bits(&a) == bits(&b2);

    check(
        worst <= 1e-8 && z0 <= 3.0 && z1 <= 3.0 && identical,
        format!(
            "LOO max rel diff {worst:.2e} over 50 designs; logistic |Δβ|/SE = ({z0:.2}, {z1:.2}); RF OOB bit-identical: {identical}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rejected = 0;
    for s in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(80_000 + s);
        let n = 200;
        let x0: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let z: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let y: Vec<f64> = (0..n).map(|i| x0[i] + 0.5 * f64::from(z[i]) + normal(&mut rng)).collect();
        let llm: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let e = Experiment::simple(z, y, 0.5).map_err(|e| e.to_string())?;
        let base = encode_covariates(&e, &[ExtraColumn::new("x0", x0, "base")], MissingEncoding::Indicator)
            .map_err(|e| e.to_string())?;
        let r = significance_test(&e, &base, &[ExtraColumn::new("pair_score", llm, "llm")], 0.05)
            .map_err(|e| e.to_string())?;
        rejected += usize::from(r[0].significant);
    }
    let rate = rejected as f64 / 1000.0;
    check((0.03..=0.07).contains(&rate), format!("rejection rate {rate:.3} at alpha 0.05"))
}

/// Records every request it forwards.
struct Recording<T> {
    inner: T,
    calls: AtomicUsize,
    prompts: Mutex<Vec<(String, u8)>>,
}

impl<T: Transport> Transport for Recording<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts
            .lock()
            .unwrap()
            .push((request.prompt.user.clone(), request.attempt));
        self.inner.send(request)
    }
    fn is_live(&self) -> bool {
        false
    }
}

fn criterion_9() -> Outcome {
    let units: Vec<Unit> = (0..20)
        .map(|i| Unit {
            id: format!("u{i}"),
            covariates: vec![("age".into(), CovariateValue::Integer(20 + i))],
            text_fields: vec![],
        })
        .collect();
    let latent: HashMap<String, f64> = units.iter().enumerate().map(|(i, u)| (u.id.clone(), i as f64 / 5.0)).collect();
    let mut template = PromptTemplate::default();
    template.sentences.insert("age".into(), "They are {value} years old.".into());
    let question = QuestionSpec::single("q", "older");
    let strata = StratumAssignment::categorical(&(0..20).map(|i| format!("s{}", i % 2)).collect::<Vec<_>>());
    let plan = plan_pairs(&strata, &["q".to_string()], 9, &PlanOptions::default());

    // Refusal on the first attempt, always; the retry sometimes refuses too.
    let config = MockConfig {
        noise_scale: 0.5,
        refusal_rate: 1.0,
        retry_refusal_rate: 0.3,
        seed: 9,
    };
    let recording = Arc::new(Recording {
        inner: MockProvider::new(latent.clone(), config.clone()),
        calls: AtomicUsize::new(0),
        prompts: Mutex::new(Vec::new()),
    });
    let client = Client::new(recording.clone(), "mock", Cache::in_memory(), false).map_err(|e| e.to_string())?;
    let comps = client
        .run_plan(&plan, &units, &[question.clone()], &template)
        .map_err(|e| e.to_string())?;
    let prompts = recording.prompts.lock().unwrap().clone();
    let mut by_prompt: HashMap<&str, Vec<u8>> = HashMap::new();
    for (p, attempt) in &prompts {
        by_prompt.entry(p).or_default().push(*attempt);
    }
    let one_retry = by_prompt.len() == plan.pairs.len()
        && by_prompt.values().all(|a| {
            let mut a = a.clone();
            a.sort();
            a == vec![1, 2]
        });
    let invalid: Vec<&PairComparison> = comps.iter().filter(|c| c.verdict == Verdict::Invalid).collect();
    let scores = aggregate_scores(&comps, &plan, units.len()).map_err(|e| e.to_string())?;
    let valid = comps.len() - invalid.len();
    let performed: usize = scores.performed["q"].iter().sum();
    let dropped = !invalid.is_empty() && invalid.iter().all(|c| c.attempts == 2) && performed == 2 * valid;

    let calls_before = recording.calls.load(Ordering::SeqCst);
    let again = client
        .run_plan(&plan, &units, &[question.clone()], &template)
        .map_err(|e| e.to_string())?;
    let cache_ok = recording.calls.load(Ordering::SeqCst) == calls_before && again == comps;

    let run = |threads: usize| -> Result<_, String> {
        let c = Client::new(Arc::new(MockProvider::new(latent.clone(), config.clone())), "mock", Cache::in_memory(), false)
            .map_err(|e| e.to_string())?
            .with_max_in_flight(threads);
        let comps = c.run_plan(&plan, &units, &[question.clone()], &template).map_err(|e| e.to_string())?;
        aggregate_scores(&comps, &plan, units.len()).map_err(|e| e.to_string())
    };
    let same = run(1)? == run(8)?;

    check(
        one_retry && dropped && cache_ok && same,
        format!(
            "each of {} prompts sent exactly twice (attempts 1,2): {one_retry}; {} double failures dropped: {dropped}; \
             cache rerun made 0 calls: {cache_ok}; serial == concurrent scores: {same}",
            plan.pairs.len(),
            invalid.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 table arithmetic", criterion_1),
        ("2 estimator identities", criterion_2),
        ("3 unbiasedness", criterion_3),
        ("4 variance validity", criterion_4),
        ("5 precision gain mechanism", criterion_5),
        ("6 pair-score combinatorics", criterion_6),
        ("7 numerics oracles", criterion_7),
        ("8 null calibration", criterion_8),
        ("9 client contracts", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
