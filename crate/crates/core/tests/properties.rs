use proptest::prelude::*;

use autolr::autolr::{
    center_index, center_out_targets, initial_targets, renew_lr, sorting_quality, AutoLrConfig,
};
use autolr::micronet::{build_network, Activation, BlockSpec, HeadSpec, NetSnapshot, NetworkSpec};
use autolr::optim::{LrVector, LR_CEILING, LR_FLOOR};
use autolr::schedules::{lr_at, BaselineScheduleConfig, ScheduleKind};

fn variations(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, 2..=max_len)
}

proptest! {
    #[test]
    fn quality_invariant_under_monotone_maps(v in variations(9), scale in 1e-3f64..1e3, shift in 0.0f64..10.0) {
        let q = sorting_quality(&v).unwrap();
        let mapped: Vec<f64> = v.iter().map(|x| (x * scale + shift).ln()).collect();
        prop_assert_eq!(q, sorting_quality(&mapped).unwrap());
        prop_assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn reversing_sorted_input_is_worst_case(mut v in variations(9)) {
        v.sort_by(f64::total_cmp);
        v.dedup();
        prop_assume!(v.len() >= 2);
        prop_assert_eq!(sorting_quality(&v).unwrap(), 1.0);
        v.reverse();
        let k = v.len();
        let q = sorting_quality(&v).unwrap();
        // sum |k - rank| for a reversal is floor(K^2 / 2)
        prop_assert_eq!(q, 1.0 - 2.0 / (k * k) as f64 * (k * k / 2) as f64);
    }

    #[test]
    fn center_out_ordered_anchored_nonnegative(v in variations(12), spacing in 1e-9f64..0.5) {
        let c = center_index(v.len());
        let t = center_out_targets(&v, spacing, c).unwrap().targets;
        prop_assert!(t.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(t[c - 1], v[c - 1]);
        prop_assert!(t.iter().all(|&x| x >= 0.0));
        // already-ordered blocks keep their measurement
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(center_out_targets(&sorted, spacing, c).unwrap().targets, sorted);
    }

    #[test]
    fn initial_targets_linear_and_bounded(v in variations(10)) {
        let cfg = AutoLrConfig::default();
        let s = initial_targets(&v, &cfg).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(s.spacing >= cfg.d_floor);
        prop_assert!((s.targets[0] - cfg.alpha * min).abs() <= 1e-15 * min.max(1.0));
        for w in s.targets.windows(2) {
            prop_assert!(w[1] > w[0]);
            prop_assert!(((w[1] - w[0]) - s.spacing).abs() <= 1e-12 * s.spacing.max(w[1]));
        }
    }

    #[test]
    fn renew_lr_is_homogeneous(v in variations(8), factor in 0.1f64..10.0, lr in 1e-5f64..1e-3) {
        let k = v.len();
        let targets: Vec<f64> = v.iter().rev().cloned().collect();
        let lrs = LrVector::uniform(lr, k);
        let a = renew_lr(&lrs, &v, &targets).unwrap();
        let scaled: Vec<f64> = targets.iter().map(|t| t * factor).collect();
        let b = renew_lr(&lrs, &v, &scaled).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            let (xc, yc) = (*x, *y);
            if xc > LR_FLOOR && yc < LR_CEILING && xc * factor < LR_CEILING && xc * factor > LR_FLOOR {
                prop_assert!((yc - xc * factor).abs() <= 1e-12 * yc);
            }
            prop_assert!((LR_FLOOR..=LR_CEILING).contains(&yc));
        }
    }

    #[test]
    fn schedules_stay_in_range(epochs in 1usize..200, kind_idx in 0usize..4, n in 1usize..8) {
        let kind = ScheduleKind::ALL[kind_idx];
        let cfg = BaselineScheduleConfig { cycles: n, n_reset: n, ..BaselineScheduleConfig::new(kind, epochs) };
        prop_assume!(cfg.validate().is_ok());
        let mut prev = f64::INFINITY;
        for e in 0..epochs {
            let lr = lr_at(&cfg, e).unwrap();
            prop_assert!(lr > 0.0 && lr <= cfg.l_max);
            match kind {
                ScheduleKind::Single | ScheduleKind::StepDecay => {
                    prop_assert!(lr <= prev);
                    prev = lr;
                }
                ScheduleKind::Cyclic | ScheduleKind::Sgdr => prop_assert!(lr >= cfg.l_min * (1.0 - 1e-12)),
            }
        }
    }

    #[test]
    fn periodic_schedules_repeat(p in 1usize..20, n in 1usize..6, kind_idx in 0usize..2) {
        let kind = [ScheduleKind::Cyclic, ScheduleKind::Sgdr][kind_idx];
        let epochs = p * n;
        let cfg = BaselineScheduleConfig { cycles: n, n_reset: n, ..BaselineScheduleConfig::new(kind, epochs) };
        prop_assume!(cfg.validate().is_ok());
        for e in 0..epochs - p {
            prop_assert_eq!(lr_at(&cfg, e).unwrap(), lr_at(&cfg, e + p).unwrap());
        }
    }

    #[test]
    fn snapshot_bytes_roundtrip(seed in any::<u64>(), dims in prop::collection::vec(1usize..6, 1..4), input in 1usize..6, classes in 2usize..5) {
        let spec = NetworkSpec {
            input_dim: input,
            blocks: dims.iter().map(|&d| BlockSpec { output_dim: d, activation: Activation::Tanh }).collect(),
            head: HeadSpec { num_classes: classes },
            seed,
        };
        let snap = build_network(&spec).unwrap().snapshot();
        let bytes = snap.to_bytes();
        let back = NetSnapshot::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.content_hash(), snap.content_hash());
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        prop_assert!(NetSnapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
