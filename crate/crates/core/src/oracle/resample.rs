//! Quality-driven, metadata-balanced volume resampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::record::QualityRecord;
use crate::volume::{Sex, SubjectMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceKey {
    Sex,
    AgeDecade,
}

impl BalanceKey {
    fn group(self, meta: &SubjectMeta) -> Result<String> {
        match self {
            BalanceKey::Sex => match meta.sex {
                Sex::Unknown => Err(Error::MissingMetadata(format!("sex of {}", meta.volume_id))),
                s => Ok(format!("{s:?}").to_lowercase()),
            },
            BalanceKey::AgeDecade => meta
                .age
                .map(|a| format!("{}s", (a / 10.0).floor() as u32 * 10))
                .ok_or_else(|| Error::MissingMetadata(format!("age of {}", meta.volume_id))),
        }
    }
}

/// Selects the `m` volumes with the highest mean predicted quality, taking
/// `floor(m / groups)` from every `balance_key` group (ties by volume id),
/// and returns the manifest restricted to them.
pub fn resample_corpus(
    manifest: &CorpusManifest,
    estimates: &[QualityRecord],
    m: usize,
    balance_key: BalanceKey,
) -> Result<CorpusManifest> {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for e in estimates {
        let s = sums.entry(e.volume_id.as_str()).or_default();
        s.0 += e.predicted_dsc;
        s.1 += 1;
    }
    let mut groups: BTreeMap<String, Vec<(f64, String)>> = BTreeMap::new();
    for meta in manifest.subjects() {
        let (sum, n) = sums
            .get(meta.volume_id.as_str())
            .copied()
            .ok_or_else(|| Error::MissingMetadata(format!("no estimate for volume {}", meta.volume_id)))?;
        groups.entry(balance_key.group(&meta)?).or_default().push((sum / n as f64, meta.volume_id.clone()));
    }
    if groups.is_empty() {
        return Err(Error::Empty("manifest has no volumes".into()));
    }
    let quota = m / groups.len();
    let mut chosen = std::collections::BTreeSet::new();
    for (name, mut members) in groups {
        if members.len() < quota {
            return Err(Error::Capacity(format!("group {name} has {} volumes, {quota} requested", members.len())));
        }
        members.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        chosen.extend(members.into_iter().take(quota).map(|(_, id)| id));
    }
    let mut out = manifest.clone();
    out.records.retain(|r| chosen.contains(&r.volume_id));
    Ok(out)
}
