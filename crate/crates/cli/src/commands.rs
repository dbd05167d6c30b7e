use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context as _};
use rayon::prelude::*;
use serde::Serialize;

use segqc::conditioning::{embed_classes, EmbeddingTable, Provider, TEMPLATES};
use segqc::eval::{eval_suite, scatter_csv};
use segqc::io::{load_mask, load_volume, VolumeFormat};
use segqc::oracle::corpus::{build_corpus, Corpus, CorpusConfig, Split, MANIFEST_FILE};
use segqc::qc::{
    dataset_report, entropy_score, mc_dropout_score, random_scores, select_for_annotation, select_pseudo_labels,
    Aggregate, SelectorScore,
};
use segqc::record::{read_jsonl, write_jsonl};
use segqc::regressor::{train_corpus, Checkpoint, RegressorConfig};
use segqc::{ClassVocabulary, Model, SubjectMeta, Volume};

use crate::config::CliConfig;
use crate::{EmbedArgs, EstimateArgs, EvalArgs, Goal, MethodArg, ProviderKind, ReportArgs, SelectArgs, SplitArg, SynthArgs, TrainArgs};

pub struct Context {
    pub seed: u64,
    pub config: CliConfig,
}

/// Wall clock, bytes written and peak resident memory for one command.
#[derive(Debug, Serialize)]
struct Resources {
    command: &'static str,
    wall_clock_s: f64,
    bytes_written: u64,
    peak_rss_kib: Option<u64>,
}

struct Meter {
    command: &'static str,
    start: Instant,
    bytes: u64,
}

impl Meter {
    fn new(command: &'static str) -> Self {
        Self { command, start: Instant::now(), bytes: 0 }
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.bytes += bytes.len() as u64;
        Ok(())
    }

    /// Writes to `path`, or stdout when absent.
    fn emit(&mut self, path: Option<&Path>, text: &str) -> anyhow::Result<()> {
        match path {
            Some(p) => self.write(p, text.as_bytes()),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn finish(self) -> anyhow::Result<()> {
        let r = Resources {
            command: self.command,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            bytes_written: self.bytes,
            peak_rss_kib: peak_rss_kib(),
        };
        eprintln!("resources: {}", serde_json::to_string(&r)?);
        Ok(())
    }
}

fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

pub fn synth(ctx: &Context, a: SynthArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("synth");
    let cfg = match &ctx.config.corpus {
        Some(c) => c.clone(),
        None => {
            let names: Vec<&str> = a.classes.iter().map(|s| s.trim()).collect();
            CorpusConfig::phantoms(&names, a.volumes)
        }
    };
    let corpus = build_corpus(&cfg, ctx.seed)?;
    corpus.write(&a.out)?;
    meter.bytes += dir_size(&a.out);
    log::info!(
        "wrote {} records over {} volumes to {}",
        corpus.manifest.records.len(),
        corpus.images.len(),
        a.out.join(MANIFEST_FILE).display()
    );
    meter.finish()
}

fn dir_size(dir: &Path) -> u64 {
    let Ok(entries) = fs::read_dir(dir) else { return 0 };
    entries
        .flatten()
        .map(|e| match e.metadata() {
            Ok(m) if m.is_dir() => dir_size(&e.path()),
            Ok(m) => m.len(),
            Err(_) => 0,
        })
        .sum()
}

fn template(spec: Option<&str>) -> anyhow::Result<String> {
    match spec {
        None => Ok(TEMPLATES[2].to_string()),
        Some(s) => match s.parse::<usize>() {
            Ok(i) => TEMPLATES
                .get(i)
                .map(|t| t.to_string())
                .with_context(|| format!("template index {i} out of range 0..{}", TEMPLATES.len())),
            Err(_) => Ok(s.to_string()),
        },
    }
}

pub fn embed(ctx: &Context, a: EmbedArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("embed");
    let section = ctx.config.embedding.clone().unwrap_or_default();
    let vocab = if let Some(dir) = &a.corpus {
        let bytes = fs::read(dir.join(MANIFEST_FILE)).with_context(|| format!("reading manifest in {}", dir.display()))?;
        segqc::oracle::corpus::CorpusManifest::from_bytes(&bytes)?.vocabulary()?
    } else if !a.classes.is_empty() {
        ClassVocabulary::from_names(a.classes.iter().map(|s| s.trim().to_string()))?
    } else {
        bail!("give --corpus or --classes");
    };
    let kind = match (a.provider, section.provider.as_deref()) {
        (Some(k), _) => k,
        (None, None | Some("one_hot")) => ProviderKind::OneHot,
        (None, Some("hash_fallback" | "hash")) => ProviderKind::Hash,
        (None, Some("precomputed_file" | "precomputed")) => ProviderKind::Precomputed,
        (None, Some(other)) => bail!("unknown embedding provider {other:?}"),
    };
    let provider = match kind {
        ProviderKind::OneHot => Provider::OneHot,
        ProviderKind::Hash => Provider::HashFallback { seed: ctx.seed, dim: a.dim.or(section.dim).unwrap_or(64) },
        ProviderKind::Precomputed => Provider::PrecomputedFile {
            path: a.file.or(section.file).context("--file is required for precomputed embeddings")?,
        },
    };
    let template = template(a.template.as_deref().or(section.template.as_deref()))?;
    let table = embed_classes(&vocab, &provider, &template)?;
    meter.write(&a.out, &table.to_json()?)?;
    log::info!("{} classes, d_t = {}, provider {}", table.entries.len(), table.dim, table.provider);
    meter.finish()
}

pub fn train(ctx: &Context, a: TrainArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("train");
    let corpus = load_corpus(&a.corpus)?;
    let table = EmbeddingTable::load(&a.table)?;
    let mut cfg = ctx.config.regressor.clone().unwrap_or_else(RegressorConfig::default);
    cfg.seed = ctx.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.unconditioned {
        cfg.conditioned = false;
    }
    let mut loss = ctx.config.loss.unwrap_or_default();
    if let Some(l) = a.lambda {
        loss.lambda = l;
    }
    let ckpt_dir = a.out.join("checkpoints");
    let out = train_corpus::<f32>(&corpus, &table, &cfg, &loss, Some(&ckpt_dir))?;
    meter.bytes += dir_size(&ckpt_dir);
    let mut model = Vec::new();
    serde_json::to_writer(&mut model, &out.model.to_checkpoint(&loss, cfg.epochs.saturating_sub(1)))?;
    meter.write(&a.out.join("model.json"), &model)?;
    meter.write(&a.out.join("train_log.jsonl"), out.log_jsonl()?.as_bytes())?;
    if let (Some(first), Some(last)) = (out.epoch_means.first(), out.epoch_means.last()) {
        log::info!("mean loss {first:.5} -> {last:.5} over {} epochs", out.epoch_means.len());
    }
    meter.finish()
}

pub fn estimate(_ctx: &Context, a: EstimateArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("estimate");
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let table = EmbeddingTable::load(&a.table)?;
    let k = if a.slices == 0 { usize::MAX } else { a.slices };
    let records = if let Some(dir) = &a.corpus {
        let corpus = load_corpus(dir)?;
        let split = match a.split {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        };
        model.estimate_corpus(&corpus, &table, split, k)?
    } else {
        let (Some(image), Some(mask), Some(class)) = (&a.image, &a.mask, a.class) else {
            bail!("give --corpus, or --image with --mask and --class");
        };
        let v = load_volume(image, VolumeFormat::from_path(image))?;
        let m = load_mask(mask, VolumeFormat::from_path(mask))?;
        vec![model.estimate_volume(&v, &m, class, &table, k)?]
    };
    meter.emit(a.out.as_deref(), &write_jsonl(&records)?)?;
    meter.finish()
}

fn read_records(path: &Path) -> anyhow::Result<Vec<segqc::QualityRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_jsonl(&text)?)
}

pub fn eval_metrics(_ctx: &Context, a: EvalArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("eval-metrics");
    let records = read_records(&a.records)?;
    let report = eval_suite(&records, &a.ks)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    meter.emit(a.out.as_deref(), &json)?;
    if let Some(p) = &a.scatter {
        meter.write(p, scatter_csv(&records).as_bytes())?;
    }
    meter.finish()
}

pub fn report(ctx: &Context, a: ReportArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("report");
    let records = read_records(&a.records)?;
    let (meta, vocab): (Vec<SubjectMeta>, Option<ClassVocabulary>) = match (&a.meta, &a.corpus) {
        (Some(p), _) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            (serde_json::from_slice(&bytes)?, None)
        }
        (None, Some(dir)) => {
            let bytes = fs::read(dir.join(MANIFEST_FILE))?;
            let m = segqc::oracle::corpus::CorpusManifest::from_bytes(&bytes)?;
            (m.subjects(), Some(m.vocabulary()?))
        }
        (None, None) => (Vec::new(), None),
    };
    let mut cfg = ctx.config.report.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    let report = dataset_report(&records, &meta, &cfg, vocab.as_ref())?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    meter.write(&a.out_json, json.as_bytes())?;
    meter.write(&a.out_csv, report.organs_csv().as_bytes())?;
    log::info!(
        "{} records, overall mean {:.3}, {:.1}% below {}",
        report.n_records,
        report.overall_mean,
        100.0 * report.fraction_below,
        report.threshold
    );
    meter.finish()
}

fn load_probabilities(paths: &[std::path::PathBuf]) -> anyhow::Result<Vec<Volume>> {
    if paths.is_empty() {
        bail!("--probs is required for this method");
    }
    paths
        .par_iter()
        .map(|p| load_volume(p, VolumeFormat::from_path(p)).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub fn select(ctx: &Context, a: SelectArgs) -> anyhow::Result<()> {
    let mut meter = Meter::new("select");
    let scores: Vec<SelectorScore> = match a.method {
        MethodArg::Quality => {
            let path = a.records.as_ref().context("--records is required for the quality method")?;
            read_records(path)?.iter().map(SelectorScore::from_record).collect::<Result<_, _>>()?
        }
        MethodArg::Entropy => load_probabilities(&a.probs)?
            .par_iter()
            .map(|v| entropy_score(v, None, Aggregate::Mean))
            .collect::<Result<_, _>>()?,
        MethodArg::McDropout => {
            let mut by_id: BTreeMap<String, Vec<Volume>> = BTreeMap::new();
            for v in load_probabilities(&a.probs)? {
                by_id.entry(v.id.clone()).or_default().push(v);
            }
            by_id.values().collect::<Vec<_>>().par_iter().map(|p| mc_dropout_score(p, None)).collect::<Result<_, _>>()?
        }
        MethodArg::Random => {
            let ids: Vec<String> = if let Some(p) = &a.records {
                read_records(p)?.into_iter().map(|r| r.volume_id).collect()
            } else {
                load_probabilities(&a.probs)?.into_iter().map(|v| v.id).collect()
            };
            random_scores(&ids, ctx.seed)
        }
    };
    let ids = match a.goal {
        Goal::Annotate => select_for_annotation(&scores, a.n)?,
        Goal::Pseudo => select_pseudo_labels(&scores, a.n)?,
    };
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    meter.emit(a.out.as_deref(), &text)?;
    meter.finish()
}
