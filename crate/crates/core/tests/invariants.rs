use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use r2b::losses::{attention_map, attention_point_distance, kd_loss};
use r2b::network::{read_checkpoint, write_checkpoint, NetConfig, NetVariant, Network};
use r2b::tensor::{label_matrix, Labels, Tensor};
use r2b::trainer::{mixup_with, topk_accuracy, OptimizerPolicy};

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_distance_is_bounded_and_scale_free(seed in any::<u64>(), s in 0.01f64..100.0) {
        let a = randn(seed, &[2, 3, 4, 4]);
        let b = randn(seed ^ 1, &[2, 3, 4, 4]);
        let (qa, qb) = (attention_map(&a).unwrap(), attention_map(&b).unwrap());
        let d = attention_point_distance(&qa, &qb).unwrap();
        // non-negative maps: normalized difference never exceeds sqrt(2)
        prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&d));
        let ds = attention_point_distance(&attention_map(&a.scale(s)).unwrap(), &qb).unwrap();
        prop_assert!((d - ds).abs() < 1e-6);
    }

    #[test]
    fn kd_is_nonnegative_and_shift_invariant(seed in any::<u64>(), tau in 0.5f64..8.0, shift in -5.0f64..5.0) {
        let s = randn(seed, &[3, 6]);
        let t = randn(seed ^ 7, &[3, 6]);
        let kd = kd_loss(&s, &t, tau).unwrap();
        prop_assert!(kd >= -1e-12);
        let shifted = kd_loss(&s.map(|v| v + shift), &t, tau).unwrap();
        prop_assert!((kd - shifted).abs() < 1e-9 * kd.abs().max(1.0));
    }

    #[test]
    fn topk_is_monotone_in_k(seed in any::<u64>(), n in 1usize..40) {
        let logits = randn(seed, &[n, 7]);
        let labels: Vec<usize> = (0..n).map(|i| (i * 5 + seed as usize) % 7).collect();
        let mut prev = 0.0;
        for k in 1..=7 {
            let acc = topk_accuracy(&logits, &labels, k).unwrap();
            prop_assert!(acc >= prev);
            prev = acc;
        }
        prop_assert_eq!(prev, 100.0);
    }

    #[test]
    fn mixup_keeps_label_rows_stochastic(seed in any::<u64>(), lambda in 0.0f64..=1.0, n in 1usize..12) {
        let x = randn(seed, &[n, 2, 2, 2]);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let y = label_matrix(&Labels::Hard(&labels), n, 3).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let (_, ym) = mixup_with(&x, &y, lambda, &perm).unwrap();
        for row in ym.data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn lr_never_rises_after_warmup(epochs in 8usize..400) {
        let p = OptimizerPolicy::first_stage().rescaled(epochs);
        prop_assert!(p.validate().is_ok());
        let mut prev = f64::INFINITY;
        for e in p.warmup_epochs..epochs {
            let lr = p.lr_at(e, 0.5);
            prop_assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn checkpoint_bytes_are_stable(seed in 0u64..1000, classes in 2usize..6, variant in 0usize..4) {
        let v = NetVariant::ALL[variant];
        let net = Network::build(NetConfig::reduced(v, classes, vec![4, 8], vec![1, 1]).with_seed(seed)).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &net.to_checkpoint(&[]).unwrap()).unwrap();
        let (back, _) = Network::from_checkpoint(&read_checkpoint(&a).unwrap()).unwrap();
        let mut b = Vec::new();
        write_checkpoint(&mut b, &back.to_checkpoint(&[]).unwrap()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(back.variant(), v);
    }
}
