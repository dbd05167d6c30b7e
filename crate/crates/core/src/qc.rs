//! Downstream use of quality estimates: uncertainty baselines, annotation and
//! pseudo-label selection, dataset reports and subgroup bias tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::eval::spearman;
use crate::record::QualityRecord;
use crate::volume::{ClassVocabulary, Sex, SubjectMeta, Volume};

pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_PERMUTATIONS: usize = 4999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Quality,
    Entropy,
    McDropout,
    Random,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(Method::Quality),
            "entropy" => Ok(Method::Entropy),
            "mc_dropout" | "mc-dropout" => Ok(Method::McDropout),
            "random" => Ok(Method::Random),
            other => Err(Error::InvalidArgument(format!("unknown selector method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerIsWorse,
    HigherIsMoreUncertain,
}

impl Method {
    pub fn direction(self) -> Direction {
        match self {
            Method::Quality | Method::Random => Direction::LowerIsWorse,
            Method::Entropy | Method::McDropout => Direction::HigherIsMoreUncertain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorScore {
    pub volume_id: String,
    #[serde(default)]
    pub class_id: Option<u8>,
    pub method: Method,
    pub score: f64,
    pub direction: Direction,
}

impl SelectorScore {
    pub fn new(volume_id: impl Into<String>, class_id: Option<u8>, method: Method, score: f64) -> Result<Self> {
        let volume_id = volume_id.into();
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score for {volume_id}")));
        }
        Ok(Self { volume_id, class_id, method, score, direction: method.direction() })
    }

    pub fn from_record(r: &QualityRecord) -> Result<Self> {
        Self::new(r.volume_id.clone(), Some(r.class_id), Method::Quality, r.predicted_dsc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Sum,
}

fn check_probabilities(prob: &Volume) -> Result<()> {
    if prob.data.is_empty() {
        return Err(Error::Empty(format!("probability volume {}", prob.id)));
    }
    if let Some(p) = prob.data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1] in {}", prob.id)));
    }
    Ok(())
}

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

pub fn entropy_score(prob: &Volume, class_id: Option<u8>, mode: Aggregate) -> Result<SelectorScore> {
    check_probabilities(prob)?;
    let sum: f64 = prob.data.iter().map(|&p| binary_entropy(p as f64)).sum();
    let score = match mode {
        Aggregate::Mean => sum / prob.data.len() as f64,
        Aggregate::Sum => sum,
    };
    SelectorScore::new(prob.id.clone(), class_id, Method::Entropy, score)
}

/// Mean over voxels of the population standard deviation across passes.
pub fn mc_dropout_score(passes: &[Volume], class_id: Option<u8>) -> Result<SelectorScore> {
    if passes.len() < 2 {
        return Err(Error::InvalidArgument(format!("mc dropout needs at least 2 passes, got {}", passes.len())));
    }
    for p in passes {
        if p.shape != passes[0].shape {
            return Err(Error::ShapeMismatch(passes[0].shape, p.shape));
        }
        check_probabilities(p)?;
    }
    let k = passes.len() as f64;
    let n = passes[0].data.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mean = passes.iter().map(|p| p.data[i] as f64).sum::<f64>() / k;
        let var = passes.iter().map(|p| (p.data[i] as f64 - mean).powi(2)).sum::<f64>() / k;
        acc += var.sqrt();
    }
    SelectorScore::new(passes[0].id.clone(), class_id, Method::McDropout, acc / n as f64)
}

/// Uniform scores in `[0, 1)` for a seeded random baseline.
pub fn random_scores(volume_ids: &[String], seed: u64) -> Vec<SelectorScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = volume_ids.to_vec();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .map(|id| SelectorScore { volume_id: id, class_id: None, method: Method::Random, score: rng.gen(), direction: Direction::LowerIsWorse })
        .collect()
}

/// Volume-level scores worst-first: ascending for quality-like methods,
/// descending for uncertainty. Ties by volume id.
fn worst_first(scores: &[SelectorScore]) -> Result<Vec<(String, f64)>> {
    let Some(first) = scores.first() else { return Ok(Vec::new()) };
    if scores.iter().any(|s| s.method != first.method) {
        return Err(Error::MixedMethods);
    }
    let mut per_volume: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = per_volume.entry(&s.volume_id).or_default();
        e.0 += s.score;
        e.1 += 1;
    }
    let mut out: Vec<(String, f64)> = per_volume.into_iter().map(|(id, (s, n))| (id.to_string(), s / n as f64)).collect();
    match first.method.direction() {
        Direction::LowerIsWorse => out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0))),
        Direction::HigherIsMoreUncertain => out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))),
    }
    Ok(out)
}

/// The `n` volumes most in need of review.
pub fn select_for_annotation(scores: &[SelectorScore], n: usize) -> Result<Vec<String>> {
    Ok(worst_first(scores)?.into_iter().take(n).map(|(id, _)| id).collect())
}

/// The `k` most trustworthy volumes, best first.
pub fn select_pseudo_labels(scores: &[SelectorScore], k: usize) -> Result<Vec<String>> {
    Ok(worst_first(scores)?.into_iter().rev().take(k).map(|(id, _)| id).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKey {
    Sex,
    Age,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub n: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasResult {
    pub key: BiasKey,
    /// Name of the statistical test that produced `statistic` and `p_value`.
    pub test: String,
    pub groups: Vec<GroupSummary>,
    pub statistic: f64,
    pub p_value: f64,
}

fn volume_means(records: &[QualityRecord]) -> BTreeMap<&str, f64> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(&r.volume_id).or_default();
        e.0 += r.predicted_dsc;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch t-test; returns `(t, p)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientGroup(format!("group sizes {} and {}", a.len(), b.len())));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { (0.0, 1.0) } else { ((ma - mb).signum() * f64::MAX, 0.0) });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok((t, p))
}

/// Spearman correlation with a two-sided permutation p-value
/// `(1 + #{|r_perm| >= |r|}) / (permutations + 1)`.
pub fn spearman_permutation_test(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<(f64, f64)> {
    let Some(r) = spearman(x, y)? else { return Ok((0.0, 1.0)) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        let rp = spearman(x, &shuffled)?.unwrap_or(0.0);
        if rp.abs() >= r.abs() - 1e-12 {
            extreme += 1;
        }
    }
    Ok((r, (1 + extreme) as f64 / (permutations + 1) as f64))
}

/// Tests whether per-volume mean quality differs by sex (Welch) or trends
/// with age (Spearman, permutation p-value).
pub fn bias_test(records: &[QualityRecord], meta: &[SubjectMeta], key: BiasKey, seed: u64) -> Result<BiasResult> {
    let by_id: BTreeMap<&str, &SubjectMeta> = meta.iter().map(|m| (m.volume_id.as_str(), m)).collect();
    let means = volume_means(records);
    let mut joined = Vec::with_capacity(means.len());
    for (id, q) in &means {
        let m = by_id.get(id).ok_or_else(|| Error::MissingMetadata(format!("no subject metadata for {id}")))?;
        joined.push((*m, *q));
    }
    let summary = |label: String, xs: &[f64]| GroupSummary { label, n: xs.len(), mean: xs.iter().sum::<f64>() / xs.len() as f64 };
    match key {
        BiasKey::Sex => {
            let pick = |s: Sex| joined.iter().filter(|(m, _)| m.sex == s).map(|(_, q)| *q).collect::<Vec<_>>();
            let (male, female) = (pick(Sex::Male), pick(Sex::Female));
            for (label, g) in [("male", &male), ("female", &female)] {
                if g.len() < 2 {
                    return Err(Error::InsufficientGroup(format!("sex group {label} has {} volumes", g.len())));
                }
            }
            let (t, p) = welch_t_test(&male, &female)?;
            Ok(BiasResult {
                key,
                test: "welch_t".into(),
                groups: vec![summary("male".into(), &male), summary("female".into(), &female)],
                statistic: t,
                p_value: p,
            })
        }
        BiasKey::Age => {
            let aged: Vec<(f64, f64)> = joined.iter().filter_map(|(m, q)| m.age.map(|a| (a, *q))).collect();
            if aged.len() < 3 {
                return Err(Error::InsufficientGroup(format!("{} volumes with a known age", aged.len())));
            }
            let mut decades: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for (a, q) in &aged {
                decades.entry((a / 10.0).floor() as u32 * 10).or_default().push(*q);
            }
            let groups = decades.iter().map(|(d, xs)| summary(format!("{d}s"), xs)).collect();
            let (ages, qs): (Vec<f64>, Vec<f64>) = aged.into_iter().unzip();
            let (r, p) = spearman_permutation_test(&ages, &qs, DEFAULT_PERMUTATIONS, seed)?;
            Ok(BiasResult { key, test: "spearman_permutation".into(), groups, statistic: r, p_value: p })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSummary {
    pub class_id: u8,
    #[serde(default)]
    pub name: Option<String>,
    pub n: usize,
    pub mean_predicted: f64,
    pub fraction_below: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub threshold: f64,
    pub n_records: usize,
    pub organs: Vec<OrganSummary>,
    /// Mean of the per-organ means.
    pub overall_mean: f64,
    pub fraction_below: f64,
    pub bias: Vec<BiasResult>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetReport {
    pub fn organs_csv(&self) -> String {
        let mut out = String::from("class_id,name,n,mean_predicted,fraction_below\n");
        for o in &self.organs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                o.class_id,
                o.name.as_deref().unwrap_or(""),
                o.n,
                o.mean_predicted,
                o.fraction_below
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub threshold: f64,
    pub groupings: Vec<BiasKey>,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, groupings: vec![BiasKey::Sex, BiasKey::Age], seed: 0 }
    }
}

pub fn dataset_report(
    records: &[QualityRecord],
    meta: &[SubjectMeta],
    cfg: &ReportConfig,
    vocab: Option<&ClassVocabulary>,
) -> Result<DatasetReport> {
    if records.is_empty() {
        return Err(Error::Empty("no records for the dataset report".into()));
    }
    let mut by_class: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_id).or_default().push(r.predicted_dsc);
    }
    let mut warnings = Vec::new();
    if let Some(v) = vocab {
        for e in v.entries() {
            if !by_class.contains_key(&e.id) {
                warnings.push(format!("organ {} ({}) has no records, omitted", e.id, e.name));
            }
        }
    }
    let below = |xs: &[f64]| xs.iter().filter(|&&q| q < cfg.threshold).count();
    let organs: Vec<OrganSummary> = by_class
        .iter()
        .map(|(&class_id, xs)| OrganSummary {
            class_id,
            name: vocab.and_then(|v| v.name(class_id)).map(str::to_string),
            n: xs.len(),
            mean_predicted: xs.iter().sum::<f64>() / xs.len() as f64,
            fraction_below: below(xs) as f64 / xs.len() as f64,
        })
        .collect();
    let overall_mean = organs.iter().map(|o| o.mean_predicted).sum::<f64>() / organs.len() as f64;
    let all: Vec<f64> = records.iter().map(|r| r.predicted_dsc).collect();
    let fraction_below = below(&all) as f64 / all.len() as f64;
    let mut bias = Vec::new();
    for &key in &cfg.groupings {
        match bias_test(records, meta, key, cfg.seed) {
            Ok(b) => bias.push(b),
            Err(e) => warnings.push(format!("bias test {key:?} skipped: {e}")),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DatasetReport { threshold: cfg.threshold, n_records: records.len(), organs, overall_mean, fraction_below, bias, warnings })
}
