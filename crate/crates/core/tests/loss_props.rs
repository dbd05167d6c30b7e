use proptest::prelude::*;
use segqc::loss::{
    compositional_gradient, compositional_loss, grad_check_compositional, mse_loss, rank_loss_pair, BatchTargets,
    LossConfig,
};
use segqc::pairing::PairingResult;
use segqc::Error;

fn batch(n: usize) -> impl Strategy<Value = BatchTargets<f64>> {
    (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0.0f64..1.0, n), Just(n)).prop_map(|(p, a, n)| {
        let pairs = (0..n / 2).map(|k| (2 * k, 2 * k + 1)).collect();
        BatchTargets {
            predicted: p,
            actual: a,
            pairing: PairingResult { pairs, leftover: (n % 2 == 1).then_some(n - 1), total_similarity: 0.0 },
        }
    })
}

proptest! {
    #[test]
    fn hinge_is_symmetric_under_swap(pi in -1.0f64..1.0, pj in -1.0f64..1.0, ai in 0.0f64..1.0, aj in 0.0f64..1.0, xi in 0.001f64..0.5) {
        let l = rank_loss_pair(pi, pj, ai, aj, xi).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l, rank_loss_pair(pj, pi, aj, ai, xi).unwrap());
    }

    #[test]
    fn hinge_ignores_common_shift(pi in 0.0f64..1.0, pj in 0.0f64..1.0, ai in 0.0f64..1.0, aj in 0.0f64..1.0, c in -1.0f64..1.0) {
        let l = rank_loss_pair(pi, pj, ai, aj, 0.05).unwrap();
        let shifted = rank_loss_pair(pi + c, pj + c, ai + c, aj + c, 0.05).unwrap();
        prop_assert!((l - shifted).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_plain_mse(b in (2usize..40).prop_flat_map(batch)) {
        let out = compositional_loss(&b, &LossConfig { lambda: 0.0, xi: 0.05 }).unwrap();
        prop_assert_eq!(out.total.to_bits(), mse_loss(&b.predicted, &b.actual).unwrap().to_bits());
    }

    #[test]
    fn analytic_gradient_matches_differences(b in (2usize..40).prop_flat_map(batch), lambda in 0.0f64..2.0) {
        let cfg = LossConfig { lambda, xi: 0.05 };
        match grad_check_compositional(&b, &cfg, 1e-4) {
            Err(Error::NearKink { .. }) => {}
            other => prop_assert!(other.unwrap() <= 1e-6),
        }
        let (out, g) = compositional_gradient(&b, &cfg).unwrap();
        prop_assert_eq!(g.len(), b.predicted.len());
        prop_assert!(out.total >= out.mse_term);
    }
}

#[test]
fn worked_hinge_values() {
    assert!((rank_loss_pair(0.9f64, 0.5, 0.4, 0.7, 0.06).unwrap() - 0.18).abs() < 1e-15);
    assert_eq!(rank_loss_pair(0.2f64, 0.8, 0.3, 0.9, 0.05).unwrap(), 0.0);
    assert!(rank_loss_pair(f64::NAN, 0.8, 0.3, 0.9, 0.05).is_err());
}

#[test]
fn kink_points_are_refused() {
    let b = BatchTargets {
        predicted: vec![0.5f64, 0.5],
        actual: vec![0.3, 0.3],
        pairing: PairingResult { pairs: vec![(0, 1)], leftover: None, total_similarity: 0.0 },
    };
    let cfg = LossConfig { lambda: 1.0, xi: 1e-5 };
    assert!(matches!(grad_check_compositional(&b, &cfg, 1e-4), Err(Error::NearKink { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let b = BatchTargets {
        predicted: vec![0.5f64, 0.4],
        actual: vec![0.3, 0.2],
        pairing: PairingResult { pairs: vec![(0, 1)], leftover: None, total_similarity: 0.0 },
    };
    assert!(compositional_loss(&b, &LossConfig { lambda: -1.0, xi: 0.05 }).is_err());
    assert!(compositional_loss(&b, &LossConfig { lambda: 1.0, xi: 0.0 }).is_err());
    let bad = BatchTargets { pairing: PairingResult { pairs: vec![(0, 5)], leftover: None, total_similarity: 0.0 }, ..b };
    assert!(compositional_loss(&bad, &LossConfig::default()).is_err());
}
