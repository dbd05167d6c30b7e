//! Agreement between predicted and actual Dice: linear and rank correlation,
//! and average precision at retrieving the worst labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::QualityRecord;
use crate::scalar::Scalar;

/// Pearson correlation; `None` when either input is constant.
pub fn pearson<S: Scalar>(x: &[S], y: &[S]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs at least 2 samples, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let my = y.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a.as_f64() - mx, b.as_f64() - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks<S: Scalar>(x: &[S]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman<S: Scalar>(x: &[S], y: &[S]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub lcc: Option<f64>,
    pub srocc: Option<f64>,
}

pub fn correlation_metrics<S: Scalar>(predicted: &[S], actual: &[S]) -> Result<Correlations> {
    Ok(Correlations { lcc: pearson(predicted, actual)?, srocc: spearman(predicted, actual)? })
}

/// Average precision at `k` for retrieving the `k` lowest-actual samples by
/// ascending prediction. Ties in both orderings go to the lower index.
pub fn map_at_k<S: Scalar>(predicted: &[S], actual: &[S], k: usize) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch(predicted.len(), actual.len()));
    }
    if k == 0 || k > predicted.len() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", predicted.len())));
    }
    let ascending = |v: &[S]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        idx
    };
    let mut target = vec![false; actual.len()];
    for &i in ascending(actual).iter().take(k) {
        target[i] = true;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (pos, &i) in ascending(predicted).iter().take(k).enumerate() {
        if target[i] {
            hits += 1;
            acc += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(acc / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub n: usize,
    pub lcc: Option<f64>,
    pub srocc: Option<f64>,
    /// AP@k keyed by k; absent when the class has too few samples.
    pub ap: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub n: usize,
    /// Pooled over all records.
    pub lcc: Option<f64>,
    pub srocc: Option<f64>,
    /// Unweighted means over classes with a defined value.
    pub macro_lcc: Option<f64>,
    pub macro_srocc: Option<f64>,
    /// MAP@k: mean AP@k over eligible classes.
    pub map: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub per_class: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn eval_suite(records: &[QualityRecord], ks: &[usize]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }
    let mut by_class: BTreeMap<u8, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let actual = r
            .actual_dsc
            .ok_or_else(|| Error::MissingMetadata(format!("actual dsc for {} class {}", r.volume_id, r.class_id)))?;
        let e = by_class.entry(r.class_id).or_default();
        e.0.push(r.predicted_dsc);
        e.1.push(actual);
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut warnings = Vec::new();
    let mut per_class = Vec::new();
    for (&class_id, (p, a)) in &by_class {
        let (lcc, srocc) = if p.len() >= 2 {
            let c = correlation_metrics(p, a)?;
            (c.lcc, c.srocc)
        } else {
            (None, None)
        };
        let mut ap = BTreeMap::new();
        if p.len() >= k_max {
            for &k in ks {
                ap.insert(k, map_at_k(p, a, k)?);
            }
        } else {
            let msg = format!("class {class_id}: {} samples < k = {k_max}, excluded from MAP", p.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        per_class.push(ClassMetrics { class_id, n: p.len(), lcc, srocc, ap });
    }
    let all_p: Vec<f64> = records.iter().map(|r| r.predicted_dsc).collect();
    let all_a: Vec<f64> = records.iter().filter_map(|r| r.actual_dsc).collect();
    let pooled = if all_p.len() >= 2 { correlation_metrics(&all_p, &all_a)? } else { Correlations { lcc: None, srocc: None } };
    let map = ks
        .iter()
        .filter_map(|&k| mean(per_class.iter().filter_map(|c| c.ap.get(&k).copied())).map(|m| (k, m)))
        .collect();
    let overall = OverallMetrics {
        n: records.len(),
        lcc: pooled.lcc,
        srocc: pooled.srocc,
        macro_lcc: mean(per_class.iter().filter_map(|c| c.lcc)),
        macro_srocc: mean(per_class.iter().filter_map(|c| c.srocc)),
        map,
    };
    Ok(EvalReport { ks: ks.to_vec(), per_class, overall, warnings })
}

/// `predicted,actual,class_id` rows for external plotting.
pub fn scatter_csv(records: &[QualityRecord]) -> String {
    let mut out = String::from("predicted,actual,class_id\n");
    for r in records {
        let actual = r.actual_dsc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.predicted_dsc, actual, r.class_id));
    }
    out
}
