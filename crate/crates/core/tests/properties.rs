use dtpm::evaluation::{auc_roc, Metrics};
use dtpm::linalg::Matrix;
use dtpm::mlp::{Head, Mlp};
use dtpm::models::inv_gamma_loss;
use dtpm::schedule::DiffusionSchedule;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((-20.0f64..20.0, any::<bool>()), 2..60)
        .prop_filter("needs both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| v.into_iter().map(|(s, l)| ((s * 4.0).round() / 4.0, l as u8)).unzip())
}

proptest! {
    // beta_hi is capped so alpha_bar stays above f64 resolution; past that,
    // 1 - alpha_bar rounds to 1 and sigma saturates
    #[test]
    fn sigma_strictly_increases(t in 2usize..600, beta_hi in 1e-4f64..0.1) {
        let s = DiffusionSchedule::<f64>::new(t, beta_hi).unwrap();
        prop_assert!(s.sigmas().windows(2).all(|w| w[1] > w[0]));
        prop_assert!(s.sigmas().iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn auc_ignores_increasing_transforms((scores, labels) in scores_and_labels()) {
        let base = auc_roc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 3.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| (s / 40.0).tanh()).collect();
        prop_assert!((auc_roc(&cubed, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((auc_roc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auc_of_negated_scores_is_complement((scores, labels) in scores_and_labels()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc_roc(&scores, &labels).unwrap() + auc_roc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_deterministic_and_bounded((scores, labels) in scores_and_labels()) {
        let a = Metrics::compute(&scores, &labels).unwrap();
        prop_assert_eq!(a, Metrics::compute(&scores, &labels).unwrap());
        for m in [a.auc_roc, a.auc_pr, a.f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn categorical_head_outputs_a_simplex(seed in 0u64..500, scale in prop::sample::select(vec![1e-3, 1.0, 1e3, 1e6])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::<f64>::new(&[5, 12, 7], Head::Softmax, 0.3, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| scale * ((i * 7 + seed as usize) % 11) as f64 - 5.0 * scale).collect()).unwrap();
        let (out, _) = net.forward(&x).unwrap();
        let (train_out, _) = net.forward_train(&x, &mut rng).unwrap();
        for p in [out, train_out] {
            for r in p.iter_rows() {
                prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inv_gamma_loss_minimized_at_shape_times_variance(a in 0.5f64..10.0, log_s2 in -10.0f64..0.0) {
        let s2 = log_s2.exp();
        let loss = |b: f64| inv_gamma_loss(&[b], &[s2], a).unwrap().0;
        // golden-section search on ln b
        let (mut lo, mut hi) = (log_s2 - 10.0, log_s2 + 10.0);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if loss(m1.exp()) < loss(m2.exp()) { hi = m2 } else { lo = m1 }
        }
        let b_star = ((lo + hi) / 2.0).exp();
        prop_assert!((b_star / (a * s2) - 1.0).abs() < 1e-5, "{} vs {}", b_star, a * s2);
    }
}
