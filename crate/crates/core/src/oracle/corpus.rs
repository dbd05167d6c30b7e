//! Degraded-label corpus: images, reference labels and degraded labels with
//! their exact Dice, described by a versioned JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::degrade::{degrade_with_neighbors, DegradationKind, DegradationSpec};
use super::overlap::dsc;
use super::phantom::{render, PhantomConfig};
use crate::error::{Error, Result};
use crate::io::{self, VolumeFormat};
use crate::volume::{ClassVocabulary, Mask, Sex, SubjectMeta, Volume};

pub const MANIFEST_SCHEMA: &str = "segqc-corpus";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestEntry {
    pub image: PathBuf,
    /// Multi-class label map aligned with `image`.
    pub labels: PathBuf,
    #[serde(default = "unknown_sex")]
    pub sex: Sex,
    #[serde(default)]
    pub age: Option<f64>,
}

fn unknown_sex() -> Sex {
    Sex::Unknown
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CorpusSource {
    Phantom { phantom: PhantomConfig, volumes: usize },
    Ingest { entries: Vec<IngestEntry> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub classes: Vec<String>,
    pub source: CorpusSource,
    /// Severity ladder applied to every (volume, class).
    pub severities: Vec<DegradationSpec>,
    /// Fraction of volumes held out for testing.
    pub test_fraction: f64,
}

impl CorpusConfig {
    /// Eight-step ladder covering reduced, expanded, shifted and merged masks,
    /// including the undegraded label.
    pub fn default_ladder() -> Vec<DegradationSpec> {
        use DegradationKind::*;
        [(Erode, 0), (Erode, 1), (Erode, 2), (Dilate, 1), (Dilate, 2), (Translate, 2), (MergeNeighbor, 3), (MergeNeighbor, 40)]
            .into_iter()
            .enumerate()
            .map(|(i, (k, m))| DegradationSpec::new(k, m).with_seed(i as u64))
            .collect()
    }

    pub fn phantoms(class_names: &[&str], volumes: usize) -> Self {
        Self {
            classes: class_names.iter().map(|s| s.to_string()).collect(),
            source: CorpusSource::Phantom { phantom: PhantomConfig::for_classes(class_names.len()), volumes },
            severities: Self::default_ladder(),
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub volume_id: String,
    pub class_id: u8,
    pub severity_index: usize,
    pub degradation: DegradationSpec,
    pub image_ref: String,
    pub degraded_ref: String,
    pub ground_truth_ref: String,
    pub actual_dsc: f64,
    pub split: Split,
    pub subject: SubjectMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub records: Vec<CorpusRecord>,
}

impl CorpusManifest {
    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::from_names(self.config.classes.iter().cloned())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)?;
        if m.schema != MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported manifest {} v{}", m.schema, m.version)));
        }
        for r in &m.records {
            if !(0.0..=1.0).contains(&r.actual_dsc) {
                return Err(Error::CorruptHeader(format!("dsc {} outside [0,1]", r.actual_dsc)));
            }
        }
        Ok(m)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &CorpusRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Subject metadata, one entry per volume in first-seen order.
    pub fn subjects(&self) -> Vec<SubjectMeta> {
        let mut seen = std::collections::BTreeSet::new();
        self.records.iter().filter(|r| seen.insert(r.volume_id.clone())).map(|r| r.subject.clone()).collect()
    }
}

/// A manifest together with the grids it references, keyed by reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub images: BTreeMap<String, Volume>,
    pub masks: BTreeMap<String, Mask>,
}

impl Corpus {
    pub fn image(&self, r: &str) -> Result<&Volume> {
        self.images.get(r).ok_or_else(|| Error::MissingFile(PathBuf::from(r)))
    }

    pub fn mask(&self, r: &str) -> Result<&Mask> {
        self.masks.get(r).ok_or_else(|| Error::MissingFile(PathBuf::from(r)))
    }

    /// Recomputes every record's Dice from the stored masks; returns the
    /// records whose stored value differs (bitwise).
    pub fn verify(&self) -> Result<Vec<usize>> {
        let mut bad = Vec::new();
        for (i, r) in self.manifest.records.iter().enumerate() {
            let d = dsc(self.mask(&r.degraded_ref)?, self.mask(&r.ground_truth_ref)?)?;
            if d.to_bits() != r.actual_dsc.to_bits() {
                bad.push(i);
            }
        }
        Ok(bad)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (r, v) in &self.images {
            let p = dir.join(r);
            ensure_parent(&p)?;
            io::save_volume(v, &p, VolumeFormat::Portable)?;
        }
        for (r, m) in &self.masks {
            let p = dir.join(r);
            ensure_parent(&p)?;
            io::save_mask(m, &p, VolumeFormat::Portable)?;
        }
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, self.manifest.to_bytes()?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let manifest = CorpusManifest::from_bytes(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        Self::load_with_manifest(dir, manifest)
    }

    pub fn load_with_manifest(dir: &Path, manifest: CorpusManifest) -> Result<Self> {
        let mut images = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for r in &manifest.records {
            if !images.contains_key(&r.image_ref) {
                images.insert(r.image_ref.clone(), io::load_volume(&dir.join(&r.image_ref), VolumeFormat::Portable)?);
            }
            for m in [&r.degraded_ref, &r.ground_truth_ref] {
                if !masks.contains_key(m) {
                    masks.insert(m.clone(), io::load_mask(&dir.join(m), VolumeFormat::Portable)?);
                }
            }
        }
        Ok(Self { manifest, images, masks })
    }

    /// Keeps only the records accepted by `keep` and the grids they reference.
    pub fn restricted(&self, manifest: CorpusManifest) -> Self {
        let mut images = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for r in &manifest.records {
            if let Some(v) = self.images.get(&r.image_ref) {
                images.insert(r.image_ref.clone(), v.clone());
            }
            for m in [&r.degraded_ref, &r.ground_truth_ref] {
                if let Some(x) = self.masks.get(m) {
                    masks.insert(m.clone(), x.clone());
                }
            }
        }
        Self { manifest, images, masks }
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// SplitMix64 finaliser; mixes record coordinates into per-record seeds.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

struct VolumeSource {
    id: String,
    image: Volume,
    labels: Mask,
    subject: SubjectMeta,
}

fn load_sources(config: &CorpusConfig, seed: u64) -> Result<Vec<VolumeSource>> {
    match &config.source {
        CorpusSource::Phantom { phantom, volumes } => {
            if *volumes == 0 {
                return Err(Error::Empty("corpus needs at least one volume".into()));
            }
            if phantom.organs.len() != config.classes.len() {
                return Err(Error::InvalidArgument(format!(
                    "phantom has {} structures for {} classes",
                    phantom.organs.len(),
                    config.classes.len()
                )));
            }
            let mut meta_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xA6E]));
            let ages: Vec<f64> = (0..*volumes).map(|_| meta_rng.gen_range(20.0..85.0f64).round()).collect();
            Ok((0..*volumes)
                .into_par_iter()
                .map(|v| {
                    let id = format!("vol_{v:03}");
                    let (image, labels) = render(phantom, &id, derive_seed(&[seed, v as u64]));
                    let sex = if v % 2 == 0 { Sex::Male } else { Sex::Female };
                    let subject = SubjectMeta { volume_id: id.clone(), sex, age: Some(ages[v]) };
                    VolumeSource { id, image, labels, subject }
                })
                .collect())
        }
        CorpusSource::Ingest { entries } => {
            if entries.is_empty() {
                return Err(Error::Empty("ingest source lists no volumes".into()));
            }
            entries
                .iter()
                .enumerate()
                .map(|(v, e)| {
                    let id = format!("vol_{v:03}");
                    let mut image = io::load_volume(&e.image, VolumeFormat::from_path(&e.image))?;
                    let mut labels = io::load_mask(&e.labels, VolumeFormat::from_path(&e.labels))?;
                    if image.shape != labels.shape {
                        return Err(Error::ShapeMismatch(image.shape, labels.shape));
                    }
                    image.id = id.clone();
                    labels.id = format!("{id}_labels");
                    labels.class_id = None;
                    let subject = SubjectMeta { volume_id: id.clone(), sex: e.sex, age: e.age };
                    subject.validate()?;
                    Ok(VolumeSource { id, image, labels, subject })
                })
                .collect()
        }
    }
}

/// Synthesises the corpus for `(config, seed)`. Record order is fixed by
/// (volume, class, severity) regardless of worker count.
pub fn build_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if config.classes.is_empty() {
        return Err(Error::Empty("corpus config names no classes".into()));
    }
    if config.severities.is_empty() {
        return Err(Error::Empty("corpus config has an empty severity ladder".into()));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::InvalidArgument(format!("test_fraction must be in [0,1), got {}", config.test_fraction)));
    }
    let vocab = ClassVocabulary::from_names(config.classes.iter().cloned())?;
    let sources = load_sources(config, seed)?;

    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5971])));
    let n_test = if sources.len() >= 2 && config.test_fraction > 0.0 {
        ((sources.len() as f64 * config.test_fraction).round() as usize).clamp(1, sources.len() - 1)
    } else {
        0
    };
    let mut split = vec![Split::Train; sources.len()];
    for &v in &order[..n_test] {
        split[v] = Split::Test;
    }

    type VolumeOutput = (Vec<CorpusRecord>, Vec<(String, Mask)>);
    let per_volume: Vec<VolumeOutput> = sources
        .par_iter()
        .enumerate()
        .map(|(v, src)| {
            let truths: Vec<Mask> = vocab
                .entries()
                .iter()
                .map(|e| {
                    let mut m = src.labels.binary_for(e.id);
                    m.id = format!("{}_c{}_gt", src.id, e.id);
                    m
                })
                .collect();
            let mut records = Vec::new();
            let mut masks = Vec::new();
            for (ci, gt) in truths.iter().enumerate() {
                if gt.is_empty() {
                    continue;
                }
                let class_id = (ci + 1) as u8;
                let neighbours: Vec<&Mask> =
                    truths.iter().enumerate().filter(|(j, m)| *j != ci && !m.is_empty()).map(|(_, m)| m).collect();
                let gt_ref = format!("labels/{}.svol", gt.id);
                for (si, ladder_spec) in config.severities.iter().enumerate() {
                    let spec = ladder_spec.with_seed(derive_seed(&[seed, v as u64, class_id as u64, si as u64, ladder_spec.seed]));
                    let mut degraded = degrade_with_neighbors(gt, &spec, &neighbours);
                    degraded.id = format!("{}_c{}_s{}", src.id, class_id, si);
                    let actual_dsc = dsc(&degraded, gt)?;
                    let degraded_ref = format!("degraded/{}.svol", degraded.id);
                    records.push(CorpusRecord {
                        volume_id: src.id.clone(),
                        class_id,
                        severity_index: si,
                        degradation: spec,
                        image_ref: format!("images/{}.svol", src.id),
                        degraded_ref: degraded_ref.clone(),
                        ground_truth_ref: gt_ref.clone(),
                        actual_dsc,
                        split: split[v],
                        subject: src.subject.clone(),
                    });
                    masks.push((degraded_ref, degraded));
                }
                masks.push((gt_ref, gt.clone()));
            }
            Ok((records, masks))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut masks = BTreeMap::new();
    for (r, m) in per_volume {
        records.extend(r);
        masks.extend(m);
    }
    let images = sources.into_iter().map(|s| (format!("images/{}.svol", s.id), s.image)).collect();
    let manifest = CorpusManifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        records,
    };
    Ok(Corpus { manifest, images, masks })
}
