//! Stratification, pair planning and aggregation of pairwise verdicts into
//! adjusted pair scores (wins divided by valid comparisons performed).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ExtraColumn;

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("group size {size} exceeds the {n} units available")]
    GroupTooLarge { size: usize, n: usize },
    #[error("cannot form {groups} groups from {n} units")]
    TooManyGroups { groups: usize, n: usize },
    #[error("group size and group count must be positive")]
    EmptyGroup,
    #[error("non-finite stratification value at unit {0}")]
    NonFinite(usize),
    #[error("comparison references pair {0}, which is not in the plan")]
    UnknownPair(usize),
    #[error("duplicate comparison for pair {pair} on question `{question}`")]
    DuplicateComparison { pair: usize, question: String },
    #[error("unknown unit id `{0}`")]
    UnknownUnit(String),
    #[error("invalid record: {0}")]
    Record(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSpec {
    NGroups(usize),
    GroupSize(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumBasis {
    PredictionQuantiles,
    Categorical,
    None,
}

/// Partition of the units into comparison strata.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumAssignment {
    /// Stratum index of each unit.
    pub stratum_of: Vec<usize>,
    pub labels: Vec<String>,
    pub basis: StratumBasis,
    pub group_spec: Option<GroupSpec>,
}

impl StratumAssignment {
    pub fn n_strata(&self) -> usize {
        self.labels.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.labels.len()];
        for (i, &s) in self.stratum_of.iter().enumerate() {
            out[s].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// One stratum holding every unit.
    pub fn single(n: usize) -> Self {
        StratumAssignment {
            stratum_of: vec![0; n],
            labels: vec!["all".to_string()],
            basis: StratumBasis::None,
            group_spec: None,
        }
    }

    /// Strata equal to the distinct labels, in first-appearance order.
    pub fn categorical(labels: &[String]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        let stratum_of = labels
            .iter()
            .map(|l| {
                *pos.entry(l.as_str()).or_insert_with(|| {
                    order.push(l.clone());
                    order.len() - 1
                })
            })
            .collect();
        StratumAssignment {
            stratum_of,
            labels: order,
            basis: StratumBasis::Categorical,
            group_spec: None,
        }
    }
}

fn group_count(n: usize, spec: GroupSpec) -> Result<usize, PairingError> {
    match spec {
        GroupSpec::NGroups(0) | GroupSpec::GroupSize(0) => Err(PairingError::EmptyGroup),
        GroupSpec::NGroups(g) if g > n => Err(PairingError::TooManyGroups { groups: g, n }),
        GroupSpec::NGroups(g) => Ok(g),
        GroupSpec::GroupSize(s) if s > n => Err(PairingError::GroupTooLarge { size: s, n }),
        GroupSpec::GroupSize(s) => Ok(((n as f64 / s as f64).round() as usize).max(1)),
    }
}

/// Sorts units by `values` (ties by unit index) and cuts the order into
/// contiguous groups whose sizes differ by at most one.
pub fn stratify(values: &[f64], spec: GroupSpec) -> Result<StratumAssignment, PairingError> {
    let groups = quantile_groups(values, &(0..values.len()).collect::<Vec<_>>(), spec)?;
    let mut stratum_of = vec![0; values.len()];
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            stratum_of[i] = g;
        }
    }
    Ok(StratumAssignment {
        stratum_of,
        labels: (0..groups.len()).map(|g| format!("g{g}")).collect(),
        basis: StratumBasis::PredictionQuantiles,
        group_spec: Some(spec),
    })
}

/// Quantile stratification inside each parent stratum (e.g. per journal).
pub fn stratify_within(
    values: &[f64],
    parents: &[(String, Vec<usize>)],
    spec: GroupSpec,
) -> Result<StratumAssignment, PairingError> {
    let mut stratum_of = vec![0; values.len()];
    let mut labels = Vec::new();
    for (parent, idx) in parents {
        for members in quantile_groups(values, idx, spec)? {
            for &i in &members {
                stratum_of[i] = labels.len();
            }
            labels.push(format!("{parent}/g{}", labels.len()));
        }
    }
    Ok(StratumAssignment {
        stratum_of,
        labels,
        basis: StratumBasis::PredictionQuantiles,
        group_spec: Some(spec),
    })
}

fn quantile_groups(values: &[f64], idx: &[usize], spec: GroupSpec) -> Result<Vec<Vec<usize>>, PairingError> {
    if let Some(&i) = idx.iter().find(|&&i| !values[i].is_finite()) {
        return Err(PairingError::NonFinite(i));
    }
    let n = idx.len();
    let g = group_count(n, spec)?;
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let (base, extra) = (n / g, n % g);
    let mut out = Vec::with_capacity(g);
    let mut start = 0;
    for k in 0..g {
        let len = base + usize::from(k < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presentation {
    AFirst,
    BFirst,
}

/// An unordered pair `a < b` with the order in which it is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedPair {
    pub index: usize,
    pub a: usize,
    pub b: usize,
    pub stratum: usize,
    pub presentation: Presentation,
}

impl PlannedPair {
    /// `(shown first, shown second)`.
    pub fn shown(&self) -> (usize, usize) {
        match self.presentation {
            Presentation::AFirst => (self.a, self.b),
            Presentation::BFirst => (self.b, self.a),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    /// Maximum pairs per stratum, sampled without replacement.
    pub cap_per_stratum: Option<usize>,
    /// Ask every pair in both presentation orders (order-effect audits).
    pub ordered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    pub pairs: Vec<PlannedPair>,
    pub questions: Vec<String>,
    pub seed: u64,
    pub skipped_strata: Vec<String>,
}

/// Enumerates within-stratum pairs, shuffles their global order and flips a
/// presentation coin for each, all from `seed`.
pub fn plan_pairs(
    strata: &StratumAssignment,
    questions: &[String],
    seed: u64,
    options: &PlanOptions,
) -> PairPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw: Vec<(usize, usize, usize)> = Vec::new();
    let mut skipped = Vec::new();
    for (s, members) in strata.members().iter().enumerate() {
        if members.len() < 2 {
            if !members.is_empty() {
                log::warn!("stratum `{}` has a single unit; skipped", strata.labels[s]);
            }
            skipped.push(strata.labels[s].clone());
            continue;
        }
        let mut within: Vec<(usize, usize, usize)> = Vec::new();
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                within.push((a.min(b), a.max(b), s));
            }
        }
        if let Some(cap) = options.cap_per_stratum {
            if cap < within.len() {
                let mut keep = rand::seq::index::sample(&mut rng, within.len(), cap).into_vec();
                keep.sort_unstable();
                within = keep.into_iter().map(|k| within[k]).collect();
            }
        }
        raw.extend(within);
    }
    raw.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(raw.len() * (1 + options.ordered as usize));
    for (a, b, stratum) in raw {
        if options.ordered {
            for presentation in [Presentation::AFirst, Presentation::BFirst] {
                pairs.push(PlannedPair {
                    index: pairs.len(),
                    a,
                    b,
                    stratum,
                    presentation,
                });
            }
        } else {
            let presentation = if rng.gen_bool(0.5) {
                Presentation::AFirst
            } else {
                Presentation::BFirst
            };
            pairs.push(PlannedPair {
                index: pairs.len(),
                a,
                b,
                stratum,
                presentation,
            });
        }
    }
    PairPlan {
        pairs,
        questions: questions.to_vec(),
        seed,
        skipped_strata: skipped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    First,
    Second,
    Invalid,
}

/// One judgment on a planned pair for one scoring key (a question id, or
/// `question:quality` for multi-quality questions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub pair: usize,
    pub question: String,
    pub verdict: Verdict,
    pub attempts: u8,
    /// Cache key of the stored response.
    pub raw: Option<String>,
}

impl PairComparison {
    /// Winning unit, resolving the verdict against the pair's presentation.
    pub fn winner(&self, pair: &PlannedPair) -> Option<usize> {
        let (first, second) = pair.shown();
        match self.verdict {
            Verdict::First => Some(first),
            Verdict::Second => Some(second),
            Verdict::Invalid => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreSet {
    pub n_units: usize,
    /// Per scoring key, per unit: `wins / performed`, or `None` when no valid
    /// comparison involved the unit.
    pub scores: BTreeMap<String, Vec<Option<f64>>>,
    pub performed: BTreeMap<String, Vec<usize>>,
    pub wins: BTreeMap<String, Vec<usize>>,
}

impl PairScoreSet {
    pub fn questions(&self) -> Vec<&str> {
        self.scores.keys().map(String::as_str).collect()
    }

    /// One covariate column per scoring key, named `pair_score:<key>`.
    pub fn to_extra_columns(&self) -> Vec<ExtraColumn> {
        self.scores
            .iter()
            .map(|(q, s)| ExtraColumn::with_missing(format!("pair_score:{q}"), s.clone(), format!("pair_score:{q}")))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W, ids: &[&str]) -> Result<(), PairingError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "question", "score", "performed"])?;
        for (q, scores) in &self.scores {
            for (i, s) in scores.iter().enumerate() {
                let score = s.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([ids[i], q.as_str(), score.as_str(), &self.performed[q][i].to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a score table written by [`PairScoreSet::write_csv`] (possibly
    /// hand-edited). Wins are reconstructed as `round(score·performed)`.
    pub fn read_csv<R: Read>(reader: R, ids: &[&str]) -> Result<PairScoreSet, PairingError> {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let n = ids.len();
        let mut set = PairScoreSet {
            n_units: n,
            scores: BTreeMap::new(),
            performed: BTreeMap::new(),
            wins: BTreeMap::new(),
        };
        let mut r = csv::Reader::from_reader(reader);
        for rec in r.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default();
            let &i = index.get(id).ok_or_else(|| PairingError::UnknownUnit(id.to_string()))?;
            let q = rec.get(1).unwrap_or_default().to_string();
            let score = match rec.get(2).unwrap_or_default() {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| PairingError::Record(format!("bad score `{s}`")))?),
            };
            let performed: usize = rec
                .get(3)
                .unwrap_or_default()
                .parse()
                .map_err(|_| PairingError::Record("bad performed count".into()))?;
            set.scores.entry(q.clone()).or_insert_with(|| vec![None; n])[i] = score;
            set.performed.entry(q.clone()).or_insert_with(|| vec![0; n])[i] = performed;
            set.wins.entry(q).or_insert_with(|| vec![0; n])[i] =
                score.map_or(0, |s| (s * performed as f64).round() as usize);
        }
        Ok(set)
    }
}

/// Adjusted pair scores: per scoring key, wins over valid comparisons
/// performed. Invalid verdicts drop the pair for that key.
pub fn aggregate_scores(
    comparisons: &[PairComparison],
    plan: &PairPlan,
    n_units: usize,
) -> Result<PairScoreSet, PairingError> {
    let mut seen: HashSet<(usize, &str)> = HashSet::new();
    let mut wins: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut performed: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for c in comparisons {
        let pair = plan.pairs.get(c.pair).ok_or(PairingError::UnknownPair(c.pair))?;
        if !seen.insert((c.pair, c.question.as_str())) {
            return Err(PairingError::DuplicateComparison {
                pair: c.pair,
                question: c.question.clone(),
            });
        }
        let w = wins.entry(c.question.clone()).or_insert_with(|| vec![0; n_units]);
        let p = performed.entry(c.question.clone()).or_insert_with(|| vec![0; n_units]);
        if let Some(winner) = c.winner(pair) {
            w[winner] += 1;
            p[pair.a] += 1;
            p[pair.b] += 1;
        }
    }
    let scores = wins
        .iter()
        .map(|(q, w)| {
            let p = &performed[q];
            let s = (0..n_units)
                .map(|i| (p[i] > 0).then(|| w[i] as f64 / p[i] as f64))
                .collect();
            (q.clone(), s)
        })
        .collect();
    Ok(PairScoreSet {
        n_units,
        scores,
        performed,
        wins,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    pair: usize,
    stratum: String,
    unit_a: String,
    unit_b: String,
    presentation: Presentation,
}

impl PairPlan {
    pub fn write_csv<W: Write>(&self, writer: W, ids: &[&str], strata: &StratumAssignment) -> Result<(), PairingError> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.pairs {
            w.serialize(PlanRow {
                pair: p.index,
                stratum: strata.labels[p.stratum].clone(),
                unit_a: ids[p.a].to_string(),
                unit_b: ids[p.b].to_string(),
                presentation: p.presentation,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        reader: R,
        ids: &[&str],
        strata: &StratumAssignment,
        questions: Vec<String>,
        seed: u64,
    ) -> Result<PairPlan, PairingError> {
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let label_index: HashMap<&str, usize> =
            strata.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut pairs = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize::<PlanRow>() {
            let row = row?;
            let unit = |id: &str| index.get(id).copied().ok_or_else(|| PairingError::UnknownUnit(id.to_string()));
            let (a, b) = (unit(&row.unit_a)?, unit(&row.unit_b)?);
            if row.pair != pairs.len() {
                return Err(PairingError::Record(format!("pair index {} out of sequence", row.pair)));
            }
            let stratum = *label_index
                .get(row.stratum.as_str())
                .ok_or_else(|| PairingError::Record(format!("unknown stratum `{}`", row.stratum)))?;
            pairs.push(PlannedPair {
                index: row.pair,
                a,
                b,
                stratum,
                presentation: row.presentation,
            });
        }
        Ok(PairPlan {
            pairs,
            questions,
            seed,
            skipped_strata: Vec::new(),
        })
    }
}
