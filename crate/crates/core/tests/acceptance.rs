//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use segqc::conditioning::{cosine_similarity_matrix, embed_classes, EmbeddingTable, Provider, TEMPLATES};
use segqc::eval::{eval_suite, map_at_k, pearson, spearman};
use segqc::loss::{grad_check_compositional, rank_loss_pair, BatchTargets, LossConfig};
use segqc::oracle::corpus::{build_corpus, Corpus, CorpusConfig, Split};
use segqc::oracle::degrade::{degrade, DegradationKind, DegradationSpec};
use segqc::oracle::overlap::dsc;
use segqc::oracle::phantom::{render, PhantomConfig};
use segqc::pairing::{brute_force_matching, optimal_pairs, PairingResult};
use segqc::qc::{
    bias_test, dataset_report, random_scores, select_for_annotation, welch_t_test, BiasKey, Method, ReportConfig,
    SelectorScore,
};
use segqc::regressor::{train, RegressorConfig, TrainingSet};
use segqc::{Error, Mask, Model, QualityRecord, Sex, SubjectMeta};

const CLASSES: [&str; 5] = ["liver", "spleen", "left kidney", "pancreas", "stomach"];
const TOY_VOLUMES: usize = 14;
const TOY_CORPUS_SEED: u64 = 7;
const SEEDS: u64 = 5;
/// Held-out LCC floor for the toy run, set from pilot runs (5-seed mean 0.79, range 0.73 to 0.87).
const TOY_LCC_FLOOR: f64 = 0.7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn toy_config(seed: u64, conditioned: bool) -> RegressorConfig {
    RegressorConfig {
        stem_pool: 16,
        channels: vec![8, 16, 32],
        d_g: 16,
        attn_hidden: 32,
        batch_size: 32,
        epochs: 20,
        train_slices: 5,
        conditioned,
        seed,
        ..Default::default()
    }
}

struct Toy {
    corpus: Corpus,
    table: EmbeddingTable,
    set: TrainingSet,
}

impl Toy {
    fn build() -> Self {
        let corpus = build_corpus(&CorpusConfig::phantoms(&CLASSES, TOY_VOLUMES), TOY_CORPUS_SEED).unwrap();
        let table = embed_classes(&corpus.manifest.vocabulary().unwrap(), &Provider::OneHot, TEMPLATES[2]).unwrap();
        let cfg = toy_config(0, true);
        let set = TrainingSet::build(&corpus, Split::Train, cfg.train_slices, cfg.stem_pool).unwrap();
        Self { corpus, table, set }
    }

    fn fit(&self, seed: u64, conditioned: bool, lambda: f64) -> Model {
        let loss = LossConfig { lambda, xi: 0.05 };
        train::<f32>(&self.set, &self.table, &toy_config(seed, conditioned), &loss, None).unwrap().model
    }

    fn test_records(&self, model: &Model, k: usize) -> Vec<QualityRecord> {
        model.estimate_corpus(&self.corpus, &self.table, Some(Split::Test), k).unwrap()
    }
}

fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3], density: f64) -> Mask {
    let data = (0..shape.iter().product()).map(|_| rng.gen_bool(density) as u8).collect();
    Mask::new("m", shape, None, data).unwrap()
}

fn dsc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for i in 0..50 {
        let shape = [rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let (da, db) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = random_mask(&mut rng, shape, da);
        let b = random_mask(&mut rng, shape, db);
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let (p, q) = (a.get(z, y, x) != 0, b.get(z, y, x) != 0);
                    na += p as usize;
                    nb += q as usize;
                    both += (p && q) as usize;
                }
            }
        }
        let expected = if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 };
        let ab = dsc(&a, &b).unwrap();
        if ab != expected || dsc(&b, &a).unwrap() != ab {
            mismatches += 1;
        }
        if i == 0 {
            let empty = Mask::empty("e", shape, None);
            if dsc(&empty, &empty).unwrap() != 1.0 {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("50 random masks, {mismatches} mismatches, {:.2?}", elapsed),
    )
}

fn assignment_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let n = [2, 4, 6, 8][t % 4];
        let d = rng.gen_range(2..12);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let h = cosine_similarity_matrix(&vs).unwrap();
        let ours = optimal_pairs(&h).unwrap();
        let best = brute_force_matching(&h, 10).unwrap().best;
        let gap = if ours.is_partition_of(n) { (ours.total_similarity - best.total_similarity).abs() } else { f64::INFINITY };
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("100 batches, max gap {worst:.1e}, {:.2?}", elapsed),
    )
}

fn ranking_worked_values() -> Outcome {
    let a = rank_loss_pair(0.8f64, 0.6, 0.5, 0.9, 0.1).unwrap();
    let b = rank_loss_pair(0.9f64, 0.1, 0.8, 0.2, 0.1).unwrap();
    // 0.18 has no exact binary form; the f64 evaluation is within one ulp of it
    outcome((a - 0.18).abs() <= f64::EPSILON && b == 0.0, format!("values {a:?} and {b:?}"))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 1e-4;
    let (mut accepted, mut excluded, mut worst) = (0, 0, 0.0f64);
    while accepted < 100 {
        let n = rng.gen_range(2..=16);
        let predicted: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let actual: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pairs = (0..n / 2).map(|k| (2 * k, 2 * k + 1)).collect();
        let batch = BatchTargets {
            predicted,
            actual,
            pairing: PairingResult { pairs, leftover: (n % 2 == 1).then_some(n - 1), total_similarity: 0.0 },
        };
        let cfg = LossConfig { lambda: rng.gen_range(0.0..2.0), xi: 0.05 };
        match grad_check_compositional(&batch, &cfg, eps) {
            Ok(err) => {
                accepted += 1;
                worst = worst.max(err);
            }
            Err(Error::NearKink { .. }) => excluded += 1,
            Err(e) => return outcome(false, format!("unexpected error {e}")),
        }
    }
    // equal predictions put the hinge argument at xi, right on the kink
    let kink = BatchTargets {
        predicted: vec![0.5, 0.5],
        actual: vec![0.4, 0.9],
        pairing: PairingResult { pairs: vec![(0, 1)], leftover: None, total_similarity: 0.0 },
    };
    let planted =
        matches!(grad_check_compositional(&kink, &LossConfig { lambda: 1.0, xi: 1e-6 }, eps), Err(Error::NearKink { .. }));
    outcome(
        worst <= 1e-3 && planted,
        format!("100 smooth points, max rel err {worst:.1e}, {excluded} near-kink points excluded, planted kink detected: {planted}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..30);
        let k = rng.gen_range(1..=n);
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 6.0).collect();
        let act: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 6.0).collect();
        let mut by_act: Vec<(f64, usize)> = act.iter().copied().zip(0..n).collect();
        by_act.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let target: Vec<usize> = by_act[..k].iter().map(|p| p.1).collect();
        let mut by_pred: Vec<(f64, usize)> = pred.iter().copied().zip(0..n).collect();
        by_pred.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ap = 0.0;
        for pos in 0..k {
            if target.contains(&by_pred[pos].1) {
                let hits = by_pred[..=pos].iter().filter(|p| target.contains(&p.1)).count();
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        if (map_at_k(&pred, &act, k).unwrap() - ap / k as f64).abs() > 1e-12 {
            failures += 1;
        }
        if n >= 3 {
            let cont: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mono: Vec<f64> = cont.iter().map(|v| v.powi(3) + 2.0 * v.exp()).collect();
            let affine: Vec<f64> = cont.iter().map(|v| 4.5 * v - 7.0).collect();
            let s = (spearman(&cont, &y).unwrap().unwrap() - spearman(&mono, &y).unwrap().unwrap()).abs();
            let l = (pearson(&cont, &y).unwrap().unwrap() - pearson(&affine, &y).unwrap().unwrap()).abs();
            if s > 1e-12 || l > 1e-9 {
                failures += 1;
            }
        }
    }
    outcome(failures == 0, format!("200 instances, {failures} failures"))
}

fn toy_training(toy: &Toy, model: &Model, elapsed: Duration) -> Outcome {
    let report = eval_suite(&toy.test_records(model, 10), &[5, 10]).unwrap();
    let lcc = report.overall.lcc.unwrap_or(f64::NAN);
    outcome(
        lcc >= TOY_LCC_FLOOR && elapsed <= Duration::from_secs(600),
        format!(
            "{} training slices, {} severities, held-out LCC {lcc:.3} (SROCC {:.3}), {:.1?}",
            toy.set.len(),
            toy.corpus.manifest.config.severities.len(),
            report.overall.srocc.unwrap_or(f64::NAN),
            elapsed
        ),
    )
}

fn ablations(toy: &Toy, seed0: &Model) -> Outcome {
    let (mut cond_lcc, mut uncond_lcc, mut rank_map, mut mse_map) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..SEEDS {
        let conditioned = if seed == 0 { seed0.clone() } else { toy.fit(seed, true, 1.0) };
        let r = eval_suite(&toy.test_records(&conditioned, 10), &[10]).unwrap();
        cond_lcc += r.overall.lcc.unwrap_or(0.0);
        rank_map += r.overall.map[&10];
        let r = eval_suite(&toy.test_records(&toy.fit(seed, false, 1.0), 10), &[10]).unwrap();
        uncond_lcc += r.overall.lcc.unwrap_or(0.0);
        let r = eval_suite(&toy.test_records(&toy.fit(seed, true, 0.0), 10), &[10]).unwrap();
        mse_map += r.overall.map[&10];
    }
    let s = SEEDS as f64;
    let (cond_lcc, uncond_lcc, rank_map, mse_map) = (cond_lcc / s, uncond_lcc / s, rank_map / s, mse_map / s);
    outcome(
        cond_lcc >= uncond_lcc && rank_map >= mse_map,
        format!(
            "mean LCC conditioned {cond_lcc:.3} vs unconditioned {uncond_lcc:.3}; mean MAP@10 lambda=1 {rank_map:.3} vs lambda=0 {mse_map:.3}"
        ),
    )
}

fn slice_convergence(toy: &Toy, model: &Model) -> Outcome {
    let all = toy.test_records(model, usize::MAX);
    let gaps: Vec<f64> = [2, 5, 10]
        .iter()
        .map(|&k| {
            let est = toy.test_records(model, k);
            est.iter().zip(&all).map(|(e, a)| (e.predicted_dsc - a.predicted_dsc).abs()).sum::<f64>() / all.len() as f64
        })
        .collect();
    outcome(
        gaps.windows(2).all(|w| w[1] <= w[0]),
        format!("mean |estimate(k) - estimate(all)| for k = 2, 5, 10: {:.4}, {:.4}, {:.4}", gaps[0], gaps[1], gaps[2]),
    )
}

fn degradation_monotonicity() -> Outcome {
    let cfg = PhantomConfig::for_classes(3);
    let mut violations = 0;
    let mut ladders = 0;
    for v in 0..20u64 {
        let (_, labels) = render(&cfg, &format!("p{v}"), 100 + v);
        for class_id in 1..=3u8 {
            let truth = labels.binary_for(class_id);
            for kind in [DegradationKind::Erode, DegradationKind::Dilate] {
                let seq: Vec<f64> =
                    (0..=4).map(|m| dsc(&degrade(&truth, &DegradationSpec::new(kind, m)), &truth).unwrap()).collect();
                ladders += 1;
                if seq.windows(2).any(|w| w[1] > w[0]) || seq[0] != 1.0 {
                    violations += 1;
                }
            }
        }
    }
    outcome(violations == 0, format!("{ladders} ladders on 20 phantoms, {violations} violations"))
}

fn selector_harness() -> Outcome {
    let (pool, n, trials) = (100usize, 10usize, 100u64);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut wins = 0;
    let mut last = (0.0, 0.0);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let ids: Vec<String> = (0..pool).map(|i| format!("vol_{i:03}")).collect();
        let truth: Vec<f64> = (0..pool).map(|_| rng.gen_range(0.3..1.0)).collect();
        let true_scores: Vec<SelectorScore> =
            ids.iter().zip(&truth).map(|(id, &q)| SelectorScore::new(id.clone(), None, Method::Quality, q).unwrap()).collect();
        let true_bottom = select_for_annotation(&true_scores, n).unwrap();
        let overlap = |chosen: &[String]| chosen.iter().filter(|c| true_bottom.contains(c)).count() as f64;
        let estimated: Vec<SelectorScore> = ids
            .iter()
            .zip(&truth)
            .map(|(id, &q)| SelectorScore::new(id.clone(), None, Method::Quality, q + noise.sample(&mut rng)).unwrap())
            .collect();
        let quality = overlap(&select_for_annotation(&estimated, n).unwrap());
        let draws = 200;
        let random_mean = (0..draws)
            .map(|d| overlap(&select_for_annotation(&random_scores(&ids, t * 10_000 + d), n).unwrap()))
            .sum::<f64>()
            / draws as f64;
        if quality > random_mean {
            wins += 1;
        }
        last = (quality, random_mean);
    }
    outcome(
        wins >= 95,
        format!("quality beat random mean overlap in {wins}/{trials} trials (last: {:.0} vs {:.2})", last.0, last.1),
    )
}

fn report_correctness() -> Outcome {
    let organs: [(u8, &[f64]); 3] = [
        (1, &[0.95, 0.9, 0.85, 0.7, 0.92, 0.88, 0.6, 0.99, 0.81, 0.8]),
        (2, &[0.5, 0.75, 0.9, 0.9, 0.85, 0.95, 0.65, 0.6]),
        (3, &[0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.79]),
    ];
    let mut records = Vec::new();
    for (class_id, values) in organs {
        for (i, &p) in values.iter().enumerate() {
            records.push(QualityRecord {
                volume_id: format!("vol_{i:03}"),
                class_id,
                actual_dsc: None,
                predicted_dsc: p,
                slices: vec![],
            });
        }
    }
    // hand counts: means 8.4/10, 6.1/8, 6.34/7; below 0.8: 2, 4, 1 of 25
    let expected = [(0.84, 0.2), (0.7625, 0.5), (6.34 / 7.0, 1.0 / 7.0)];
    let meta: Vec<SubjectMeta> = (0..10)
        .map(|i| SubjectMeta {
            volume_id: format!("vol_{i:03}"),
            sex: if i % 2 == 0 { Sex::Male } else { Sex::Female },
            age: Some(30.0 + 4.0 * i as f64),
        })
        .collect();
    let report = dataset_report(&records, &meta, &ReportConfig::default(), None).unwrap();
    let counts_ok = report.n_records == 25
        && report.fraction_below == 7.0 / 25.0
        && report.organs.len() == 3
        && report
            .organs
            .iter()
            .zip(expected)
            .all(|(o, (m, f))| (o.mean_predicted - m).abs() < 1e-12 && (o.fraction_below - f).abs() < 1e-12);

    // planted shift: female volumes 0.1 lower, quality falling with age
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut planted = Vec::new();
    let mut planted_meta = Vec::new();
    for i in 0..60 {
        let id = format!("vol_{i:03}");
        let sex = if i % 2 == 0 { Sex::Male } else { Sex::Female };
        let age = 20.0 + (i * 7 % 60) as f64;
        let base = 0.85 - if sex == Sex::Female { 0.1 } else { 0.0 } - 0.1 * (age - 50.0) / 30.0;
        planted.push(QualityRecord {
            volume_id: id.clone(),
            class_id: 1,
            actual_dsc: None,
            predicted_dsc: base + noise.sample(&mut rng),
            slices: vec![],
        });
        planted_meta.push(SubjectMeta { volume_id: id, sex, age: Some(age) });
    }
    let sex_p = bias_test(&planted, &planted_meta, BiasKey::Sex, 0).unwrap().p_value;
    let age_p = bias_test(&planted, &planted_meta, BiasKey::Age, 0).unwrap().p_value;

    let normal = Normal::new(0.0, 1.0).unwrap();
    let trials = 1000;
    let rejected = (0..trials)
        .filter(|_| {
            let a: Vec<f64> = (0..15).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..10).map(|_| 1.5 * normal.sample(&mut rng)).collect();
            welch_t_test(&a, &b).unwrap().1 < 0.05
        })
        .count();
    let null_rate = rejected as f64 / trials as f64;
    outcome(
        counts_ok && sex_p < 1e-3 && age_p < 1e-3 && (0.03..=0.07).contains(&null_rate),
        format!(
            "hand counts match: {counts_ok}; planted p sex {sex_p:.1e}, age {age_p:.1e}; null rejection rate at 0.05: {null_rate:.3}"
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = CorpusConfig::phantoms(&CLASSES[..3], 4);
    let a = build_corpus(&cfg, 21).unwrap();
    let b = build_corpus(&cfg, 21).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write(da.path()).unwrap();
    b.write(db.path()).unwrap();
    let mut same_files = true;
    for entry in std::fs::read_dir(da.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            same_files &= std::fs::read(&path).ok() == std::fs::read(db.path().join(path.file_name().unwrap())).ok();
        }
    }
    let manifests = a.manifest.to_bytes().unwrap() == b.manifest.to_bytes().unwrap();

    let table = embed_classes(&a.manifest.vocabulary().unwrap(), &Provider::OneHot, TEMPLATES[2]).unwrap();
    let rcfg = RegressorConfig { epochs: 2, ..toy_config(3, true) };
    let set = TrainingSet::build(&a, Split::Train, rcfg.train_slices, rcfg.stem_pool).unwrap();
    let run = || train::<f32>(&set, &table, &rcfg, &LossConfig::default(), None).unwrap().log_jsonl().unwrap();
    let logs = run() == run();
    outcome(manifests && same_files && logs, format!("manifests identical: {manifests}, files identical: {same_files}, loss logs identical: {logs}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "dsc oracle", dsc_oracle());
    record(2, "assignment optimality", assignment_optimality());
    record(3, "ranking loss worked values", ranking_worked_values());
    record(4, "gradient checks", gradient_checks());
    record(5, "metric oracles", metric_oracles());

    let start = Instant::now();
    let toy = Toy::build();
    let seed0 = toy.fit(0, true, 1.0);
    let elapsed = start.elapsed();
    record(6, "toy training", toy_training(&toy, &seed0, elapsed));
    record(7, "ablation directions", ablations(&toy, &seed0));
    record(8, "slice sampling convergence", slice_convergence(&toy, &seed0));
    record(9, "degradation monotonicity", degradation_monotonicity());
    record(10, "selector harness", selector_harness());
    record(11, "report correctness", report_correctness());
    record(12, "determinism", determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
