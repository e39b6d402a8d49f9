//! Reference-based metrics, rank correlations against human judgments, and
//! the factual-perturbation sensitivity experiment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckg::CharacterKG;
use crate::corpus::Narrative;
use crate::error::{Error, Result};
use crate::factscore::{score_summary, ScoringOptions};
use crate::prompts;
use crate::provider::{ChatRequest, Gateway};
use crate::retrieval::Retriever;
use crate::summarize::{split_sentences, SummaryDraft};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;
pub const DEFAULT_SEED: u64 = 7;
pub const TAG_PERTURB: &str = "perturb";
pub const PERTURB_TEMPERATURE: f64 = 0.0;

/// Slack when comparing a permuted statistic with the observed one, so that
/// orderings producing the same value through different float paths count.
const STAT_EPS: f64 = 1e-12;

fn rouge_tokens(text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(tokens)
}

fn f1(overlap: usize, candidate: usize, reference: usize) -> f64 {
    if overlap == 0 || candidate == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate as f64;
    let r = overlap as f64 / reference as f64;
    100.0 * 2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// ROUGE-N F1 on lowercased whitespace tokens, scaled to [0, 100].
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::InvalidParams(format!(
            "rouge n must be 1 or 2, got {n}"
        )));
    }
    let c = rouge_tokens(candidate)?;
    let r = rouge_tokens(reference)?;
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let overlap: usize = cc
        .iter()
        .map(|(g, k)| rc.get(g).map_or(0, |m| (*k).min(*m)))
        .sum();
    let total = |m: &HashMap<&[String], usize>| m.values().sum::<usize>();
    Ok(f1(overlap, total(&cc), total(&rc)))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common token subsequence, scaled to [0, 100].
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let c = rouge_tokens(candidate)?;
    let r = rouge_tokens(reference)?;
    Ok(f1(lcs_len(&c, &r), c.len(), r.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub unit_id: String,
    pub metric: f64,
    pub human: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePairSeries {
    items: Vec<ScorePair>,
}

impl ScorePairSeries {
    pub fn new(items: Vec<ScorePair>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for item in &items {
            if !seen.insert(item.unit_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate unit id {:?}",
                    item.unit_id
                )));
            }
            if !item.metric.is_finite() || !item.human.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite score for {:?}",
                    item.unit_id
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn from_values(metric: &[f64], human: &[f64]) -> Result<Self> {
        if metric.len() != human.len() {
            return Err(Error::InvalidInput("series lengths differ".into()));
        }
        Self::new(
            metric
                .iter()
                .zip(human)
                .enumerate()
                .map(|(i, (&m, &h))| ScorePair {
                    unit_id: i.to_string(),
                    metric: m,
                    human: h,
                })
                .collect(),
        )
    }

    pub fn items(&self) -> &[ScorePair] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn columns(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.items.len() < 2 {
            return Err(Error::DegenerateSeries(format!(
                "need at least 2 items, got {}",
                self.items.len()
            )));
        }
        let x: Vec<f64> = self.items.iter().map(|p| p.metric).collect();
        let y: Vec<f64> = self.items.iter().map(|p| p.human).collect();
        if is_constant(&x) {
            return Err(Error::DegenerateSeries(
                "all metric scores are equal".into(),
            ));
        }
        if is_constant(&y) {
            return Err(Error::DegenerateSeries("all human scores are equal".into()));
        }
        Ok((x, y))
    }
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn spearman_of(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Tau-b by enumerating every pair.
fn kendall_of(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                tied_x += 1;
            }
            if dy == 0 {
                tied_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - tied_x) * (pairs - tied_y)) as f64).sqrt();
    ((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0)
}

pub fn spearman(series: &ScorePairSeries) -> Result<f64> {
    let (x, y) = series.columns()?;
    Ok(spearman_of(&x, &y))
}

pub fn kendall_tau(series: &ScorePairSeries) -> Result<f64> {
    let (x, y) = series.columns()?;
    Ok(kendall_of(&x, &y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Spearman,
    Kendall,
}

impl Statistic {
    fn compute(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Statistic::Spearman => spearman_of(x, y),
            Statistic::Kendall => kendall_of(x, y),
        }
    }
}

fn factorial_capped(n: usize, cap: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

/// Next lexicographic permutation of indices; false once wrapped around.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len())
        .rev()
        .find(|&j| p[j] > p[i - 1])
        .expect("pivot has a successor");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Two-sided permutation test over shuffles of the human scores.
///
/// When `n!` does not exceed `permutations`, every ordering is enumerated and
/// the exact probability `#{|s| >= |s_obs|} / n!` is returned. Otherwise
/// `permutations` shuffles are drawn from ChaCha8 seeded with `seed`, each
/// shuffling a fresh copy of the human column, and
/// `p = (1 + hits) / (permutations + 1)`.
pub fn permutation_pvalue(
    series: &ScorePairSeries,
    statistic: Statistic,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    if permutations == 0 {
        return Err(Error::InvalidParams("permutations must be positive".into()));
    }
    let (x, y) = series.columns()?;
    let observed = statistic.compute(&x, &y).abs();
    let extreme = |s: f64| s.abs() >= observed - STAT_EPS;

    if let Some(total) = factorial_capped(y.len(), permutations) {
        let mut idx: Vec<usize> = (0..y.len()).collect();
        let mut hits = 0usize;
        loop {
            let shuffled: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            if extreme(statistic.compute(&x, &shuffled)) {
                hits += 1;
            }
            if !next_permutation(&mut idx) {
                break;
            }
        }
        return Ok(hits as f64 / total as f64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.clone();
    let mut hits = 0usize;
    for _ in 0..permutations {
        shuffled.copy_from_slice(&y);
        shuffled.shuffle(&mut rng);
        if extreme(statistic.compute(&x, &shuffled)) {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (permutations + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    VeryWeak,
    Weak,
    Moderate,
    Strong,
}

impl Strength {
    pub fn label(self) -> &'static str {
        match self {
            Strength::VeryWeak => "very weak",
            Strength::Weak => "weak",
            Strength::Moderate => "moderate",
            Strength::Strong => "strong",
        }
    }
}

fn band(value: f64, cuts: [f64; 3]) -> Strength {
    let v = value.abs();
    if v >= cuts[2] {
        Strength::Strong
    } else if v >= cuts[1] {
        Strength::Moderate
    } else if v >= cuts[0] {
        Strength::Weak
    } else {
        Strength::VeryWeak
    }
}

/// Conventional interpretation bands on |rho|; each band includes its lower edge.
pub fn spearman_strength(rho: f64) -> Strength {
    band(rho, [0.15, 0.30, 0.43])
}

/// Conventional interpretation bands on |tau|; each band includes its lower edge.
pub fn kendall_strength(tau: f64) -> Strength {
    band(tau, [0.10, 0.20, 0.30])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub n: usize,
    pub spearman: f64,
    pub spearman_p: f64,
    pub spearman_strength: Strength,
    pub kendall: f64,
    pub kendall_p: f64,
    pub kendall_strength: Strength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMethod {
    pub kendall_variant: String,
    pub significance: String,
    pub permutations: usize,
    pub seed: u64,
    pub rouge_normalization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub method: ReportMethod,
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.metric.len())
            .chain(std::iter::once("metric".len()))
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>8}  {:>8}  {:<9}  {:>8}  {:>8}  {:<9}",
            "metric", "n", "spearman", "p", "strength", "kendall", "p", "strength"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>4}  {:>8.4}  {:>8.4}  {:<9}  {:>8.4}  {:>8.4}  {:<9}",
                r.metric,
                r.n,
                r.spearman,
                r.spearman_p,
                r.spearman_strength.label(),
                r.kendall,
                r.kendall_p,
                r.kendall_strength.label()
            );
        }
        let _ = writeln!(
            out,
            "p-values: {} ({} permutations, seed {}); kendall {}",
            self.method.significance,
            self.method.permutations,
            self.method.seed,
            self.method.kendall_variant
        );
        out
    }
}

/// One row per metric, in name order.
pub fn correlation_report(
    series: &BTreeMap<String, ScorePairSeries>,
    permutations: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    if series.is_empty() {
        return Err(Error::InvalidInput("no metric series to correlate".into()));
    }
    let mut rows = Vec::with_capacity(series.len());
    for (metric, s) in series {
        let rho = spearman(s)?;
        let tau = kendall_tau(s)?;
        rows.push(CorrelationRow {
            metric: metric.clone(),
            n: s.len(),
            spearman: rho,
            spearman_p: permutation_pvalue(s, Statistic::Spearman, permutations, seed)?,
            spearman_strength: spearman_strength(rho),
            kendall: tau,
            kendall_p: permutation_pvalue(s, Statistic::Kendall, permutations, seed)?,
            kendall_strength: kendall_strength(tau),
        });
    }
    Ok(CorrelationReport {
        method: ReportMethod {
            kendall_variant: "tau-b".into(),
            significance: "two-sided permutation test on shuffled human scores".into(),
            permutations,
            seed,
            rouge_normalization: "lowercase, whitespace tokens, no stemming or stopwords".into(),
        },
        rows,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::MalformedInput(format!("{}: {e}", path.display()))
}

#[derive(Debug, Deserialize)]
struct HumanRow {
    unit_id: String,
    human_score: f64,
}

#[derive(Debug, Deserialize)]
struct MetricRow {
    unit_id: String,
    metric: String,
    score: f64,
}

/// Reads `unit_id,human_score`.
pub fn load_human_scores(path: impl AsRef<Path>) -> Result<BTreeMap<String, f64>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<HumanRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if out.insert(row.unit_id.clone(), row.human_score).is_some() {
            return Err(Error::MalformedInput(format!(
                "duplicate unit id {:?}",
                row.unit_id
            )));
        }
    }
    Ok(out)
}

/// Reads `unit_id,metric,score` and pairs each metric with the human scores.
/// Units missing a human score are an error.
pub fn load_metric_series(
    path: impl AsRef<Path>,
    human: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, ScorePairSeries>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut grouped: BTreeMap<String, Vec<ScorePair>> = BTreeMap::new();
    for row in reader.deserialize::<MetricRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let h = *human.get(&row.unit_id).ok_or_else(|| {
            Error::MalformedInput(format!("no human score for unit {:?}", row.unit_id))
        })?;
        grouped.entry(row.metric).or_default().push(ScorePair {
            unit_id: row.unit_id,
            metric: row.score,
            human: h,
        });
    }
    grouped
        .into_iter()
        .map(|(m, items)| Ok((m, ScorePairSeries::new(items)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedSummary {
    pub reference: String,
    pub perturbed: String,
    pub sentences: Vec<(String, String)>,
}

/// Rewrites every sentence of `reference` to be factually wrong, one call
/// per sentence, and rejoins the rewrites in order.
pub fn perturb_summary(gateway: &Gateway, reference: &str) -> Result<PerturbedSummary> {
    let originals = split_sentences(reference);
    if originals.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sentences = Vec::with_capacity(originals.len());
    for (i, s) in originals.iter().enumerate() {
        let request = ChatRequest::new(
            format!("{TAG_PERTURB} sentence {i}"),
            prompts::factual_perturbation(s),
            PERTURB_TEMPERATURE,
        )?;
        let rewrite = gateway.chat_complete(&request)?.trim().to_string();
        sentences.push((s.clone(), rewrite));
    }
    let perturbed = sentences
        .iter()
        .map(|(_, r)| r.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let actual = split_sentences(&perturbed).len();
    if actual != originals.len() {
        return Err(Error::SentenceCountMismatch {
            expected: originals.len(),
            actual,
        });
    }
    Ok(PerturbedSummary {
        reference: originals.join(" "),
        perturbed,
        sentences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricShift {
    pub metric: String,
    pub before: f64,
    pub after: f64,
}

impl MetricShift {
    /// Fractional drop relative to `before`; zero when `before` is zero.
    pub fn relative_drop(&self) -> f64 {
        if self.before == 0.0 {
            0.0
        } else {
            (self.before - self.after) / self.before
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCase {
    pub reference: String,
    pub perturbed: String,
    pub shifts: Vec<MetricShift>,
}

impl PerturbationCase {
    pub fn shift(&self, metric: &str) -> Option<&MetricShift> {
        self.shifts.iter().find(|s| s.metric == metric)
    }
}

/// Scores the reference and its perturbation with the factuality score and
/// ROUGE-L against the reference, both on a 0-100 scale.
pub fn perturbation_case(
    gateway: &Gateway,
    retriever: &Retriever<'_>,
    narrative: &Narrative,
    graph: Option<&CharacterKG>,
    reference: &str,
    options: ScoringOptions,
) -> Result<PerturbationCase> {
    let p = perturb_summary(gateway, reference)?;
    let nfs = |text: &str| -> Result<f64> {
        let draft = SummaryDraft::from_text(0, text, None);
        Ok(100.0 * score_summary(gateway, retriever, &draft, narrative, graph, options)?.score)
    };
    let shifts = vec![
        MetricShift {
            metric: "narrative_fact_score".into(),
            before: nfs(&p.reference)?,
            after: nfs(&p.perturbed)?,
        },
        MetricShift {
            metric: "rouge_l".into(),
            before: rouge_l(&p.reference, &p.reference)?,
            after: rouge_l(&p.perturbed, &p.reference)?,
        },
    ];
    Ok(PerturbationCase {
        reference: p.reference,
        perturbed: p.perturbed,
        shifts,
    })
}
