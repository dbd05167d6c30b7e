use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use segqc::qc::{
    bias_test, entropy_score, select_for_annotation, select_pseudo_labels, spearman_permutation_test, welch_t_test,
    Aggregate, BiasKey, Method, SelectorScore,
};
use segqc::{QualityRecord, Sex, SubjectMeta, Volume};

fn scores(values: &[f64], method: Method) -> Vec<SelectorScore> {
    values.iter().enumerate().map(|(i, &v)| SelectorScore::new(format!("vol_{i:03}"), None, method, v).unwrap()).collect()
}

proptest! {
    #[test]
    fn selection_ignores_input_order(values in prop::collection::vec(0.0f64..1.0, 1..40), n in 0usize..45, seed in any::<u64>()) {
        let s = scores(&values, Method::Quality);
        let mut shuffled = s.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(select_for_annotation(&s, n).unwrap(), select_for_annotation(&shuffled, n).unwrap());
        prop_assert_eq!(select_pseudo_labels(&s, n).unwrap(), select_pseudo_labels(&shuffled, n).unwrap());
        prop_assert_eq!(select_for_annotation(&s, n).unwrap().len(), n.min(values.len()));
    }

    #[test]
    fn full_pool_orders_are_reversed(values in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let s = scores(&values, Method::Quality);
        let mut worst = select_for_annotation(&s, values.len()).unwrap();
        let best = select_pseudo_labels(&s, values.len()).unwrap();
        worst.reverse();
        prop_assert_eq!(worst, best);
        // negated quality read as uncertainty ranks the same volumes first
        let negated: Vec<f64> = values.iter().map(|v| 1.0 - v).collect();
        prop_assert_eq!(
            select_for_annotation(&s, values.len()).unwrap(),
            select_for_annotation(&scores(&negated, Method::Entropy), values.len()).unwrap()
        );
    }

    #[test]
    fn mean_entropy_ignores_replication(p in prop::collection::vec(0.0f32..=1.0, 1..64), reps in 2usize..5) {
        let one = Volume::new("v", [1, 1, p.len()], [1.0; 3], p.clone()).unwrap();
        let many = Volume::new("v", [reps, 1, p.len()], [1.0; 3], p.repeat(reps)).unwrap();
        let a = entropy_score(&one, None, Aggregate::Mean).unwrap().score;
        let b = entropy_score(&many, None, Aggregate::Mean).unwrap().score;
        prop_assert!((a - b).abs() < 1e-9);
        let sa = entropy_score(&one, None, Aggregate::Sum).unwrap().score;
        let sb = entropy_score(&many, None, Aggregate::Sum).unwrap().score;
        prop_assert!((sb - reps as f64 * sa).abs() < 1e-9 * (1.0 + sb));
    }
}

fn cohort(n: usize, shift: f64, seed: u64) -> (Vec<QualityRecord>, Vec<SubjectMeta>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut records = Vec::new();
    let mut meta = Vec::new();
    for i in 0..n {
        let id = format!("vol_{i:03}");
        let sex = if i % 2 == 0 { Sex::Male } else { Sex::Female };
        let age = 20.0 + (i * 7 % 60) as f64;
        let base = 0.8 + if sex == Sex::Female { shift } else { 0.0 } - shift * (age - 50.0) / 30.0;
        for class_id in 1..=2u8 {
            let q = base + noise.sample(&mut rng);
            records.push(QualityRecord { volume_id: id.clone(), class_id, actual_dsc: None, predicted_dsc: q, slices: vec![] });
        }
        meta.push(SubjectMeta { volume_id: id, sex, age: Some(age) });
    }
    (records, meta)
}

#[test]
fn planted_shifts_are_detected() {
    let (records, meta) = cohort(60, 0.1, 3);
    let sex = bias_test(&records, &meta, BiasKey::Sex, 0).unwrap();
    assert!(sex.p_value < 1e-3, "sex p = {}", sex.p_value);
    assert_eq!(sex.test, "welch_t");
    let age = bias_test(&records, &meta, BiasKey::Age, 0).unwrap();
    assert!(age.p_value < 1e-3, "age p = {}", age.p_value);
    assert!(age.statistic < 0.0);
}

#[test]
fn null_p_values_are_calibrated() {
    let trials = 400;
    let mut welch_rejects = 0;
    let mut perm_rejects = 0;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..trials {
        let a: Vec<f64> = (0..12).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..9).map(|_| 2.0 * normal.sample(&mut rng)).collect();
        if welch_t_test(&a, &b).unwrap().1 < 0.05 {
            welch_rejects += 1;
        }
        if t < 100 {
            let x: Vec<f64> = (0..15).map(|i| i as f64).collect();
            let y: Vec<f64> = (0..15).map(|_| normal.sample(&mut rng)).collect();
            if spearman_permutation_test(&x, &y, 199, t).unwrap().1 < 0.05 {
                perm_rejects += 1;
            }
        }
    }
    let welch_rate = welch_rejects as f64 / trials as f64;
    assert!((0.02..=0.09).contains(&welch_rate), "welch null rejection rate {welch_rate}");
    assert!(perm_rejects <= 12, "permutation null rejections {perm_rejects} of 100");
}

#[test]
fn welch_matches_reference_value() {
    // group means 2 and 5, sample variances 2.5 and 2.5, n = 5 each:
    // t = -3 / sqrt(1) = -3, df = 8, two-sided p = 0.017071
    let (t, p) = welch_t_test(&[0.0, 1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
    assert!((t + 3.0).abs() < 1e-12);
    assert!((p - 0.017071).abs() < 1e-5, "p = {p}");
}

#[test]
fn worked_selection_and_single_group() {
    let s: Vec<SelectorScore> =
        [("a", 0.9), ("b", 0.4), ("c", 0.7)].iter().map(|&(id, q)| SelectorScore::new(id, None, Method::Quality, q).unwrap()).collect();
    assert_eq!(select_pseudo_labels(&s, 2).unwrap(), ["a", "c"]);
    assert_eq!(select_for_annotation(&s, 1).unwrap(), ["b"]);
    let records: Vec<QualityRecord> = (0..4)
        .map(|i| QualityRecord { volume_id: format!("v{i}"), class_id: 1, actual_dsc: None, predicted_dsc: 0.5, slices: vec![] })
        .collect();
    let meta: Vec<SubjectMeta> = (0..4).map(|i| SubjectMeta { volume_id: format!("v{i}"), sex: Sex::Male, age: None }).collect();
    assert!(bias_test(&records, &meta, BiasKey::Sex, 0).is_err());
    assert!(bias_test(&records, &meta[..3], BiasKey::Sex, 0).is_err());
}
