//! Property suites over the blending, prototype and optimizer primitives.

use daso_core::blend::{argmax, blend, blend_weights, PseudoLabelTracker, TrackerMode};
use daso_core::nn::{ema_update, init_model, CosineHead, Dense};
use daso_core::proto_bank::{FeatureBatch, PrototypeBank, Provenance};
use daso_core::Error;
use proptest::prelude::*;

fn prob_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn sparse_prob_vec(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], k).prop_filter_map("non-zero mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn triple(k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (prob_vec(k), prob_vec(k), sparse_prob_vec(k))
}

proptest! {
    #[test]
    fn blended_pseudo_label_is_a_distribution(
        (p, q, m) in (2usize..12).prop_flat_map(triple),
        t in 0.05f64..5.0,
    ) {
        let u = blend_weights(&m, t).unwrap();
        let b = blend(&p, &q, &u).unwrap();
        prop_assert!(b.iter().all(|&v| v >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsilon_range_argmax_and_zeros(m in (2usize..12).prop_flat_map(sparse_prob_vec), t in 0.05f64..5.0) {
        let u = blend_weights(&m, t).unwrap();
        let max = m.iter().copied().fold(0.0, f64::max);
        for (k, (&uk, &mk)) in u.iter().zip(&m).enumerate() {
            prop_assert!((0.0..=1.0).contains(&uk), "υ[{k}] = {uk}");
            if mk == max {
                prop_assert_eq!(uk, 1.0);
            }
            if mk == 0.0 {
                prop_assert_eq!(uk, 0.0);
            }
        }
    }

    #[test]
    fn upsilon_non_decreasing_in_t_dist(
        m in (2usize..12).prop_flat_map(sparse_prob_vec),
        t1 in 0.05f64..5.0,
        dt in 0.0f64..5.0,
    ) {
        let lo = blend_weights(&m, t1).unwrap();
        let hi = blend_weights(&m, t1 + dt).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b + 1e-15 >= *a, "{a} > {b}");
        }
    }

    #[test]
    fn most_predicted_class_is_fully_replaced(
        (p, q, m) in (2usize..8).prop_flat_map(triple),
        t in 0.1f64..3.0,
    ) {
        let u = blend_weights(&m, t).unwrap();
        let kp = argmax(&p);
        prop_assume!(u[kp] == 1.0);
        prop_assert_eq!(blend(&p, &q, &u).unwrap(), q);
    }

    #[test]
    fn queues_stay_balanced_and_fifo(
        l in 1usize..8,
        labels in prop::collection::vec(0usize..4, 0..60),
    ) {
        let mut bank = PrototypeBank::balanced(4, l, 0.05).unwrap();
        let features: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64, 1.0]).collect();
        for (chunk_f, chunk_y) in features.chunks(7).zip(labels.chunks(7)) {
            let batch = FeatureBatch { features: chunk_f.to_vec(), provenance: Provenance::EmaEncoder };
            bank.enqueue_labeled(&batch, chunk_y).unwrap();
        }
        for c in 0..4 {
            let seen: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i).collect();
            let expect: Vec<usize> = seen[seen.len().saturating_sub(l)..].to_vec();
            let got: Vec<usize> = bank.queue(c).map(|z| z[0] as usize).collect();
            prop_assert_eq!(bank.len(c), expect.len());
            prop_assert!(bank.len(c) <= l);
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn cosine_probs_are_scale_invariant(
        z in prop::collection::vec(0.01f64..2.0, 5),
        protos in prop::collection::vec(prop::collection::vec(0.01f64..2.0, 5), 3),
        t in 0.02f64..1.0,
    ) {
        let head = CosineHead::new(&protos, t).unwrap();
        let base = head.probs(&z).unwrap();
        for alpha in [0.1, 10.0] {
            let zs: Vec<f64> = z.iter().map(|v| v * alpha).collect();
            let scaled: Vec<Vec<f64>> = protos.iter().map(|c| c.iter().map(|v| v * alpha).collect()).collect();
            let a = head.probs(&zs).unwrap();
            let b = CosineHead::new(&scaled, t).unwrap().probs(&z).unwrap();
            for k in 0..3 {
                prop_assert!((a[k] - base[k]).abs() < 1e-12);
                prop_assert!((b[k] - base[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_is_a_contraction(
        start in prop::collection::vec(-5.0f64..5.0, 6),
        target in prop::collection::vec(-5.0f64..5.0, 6),
        rho in 0.0f64..0.999,
        n in 1usize..40,
    ) {
        let layer = |w: &[f64]| Dense { in_dim: 2, out_dim: 3, weight: w.to_vec(), bias: vec![0.0; 3] };
        let mut ema = vec![layer(&start)];
        let params = vec![layer(&target)];
        for _ in 0..n {
            ema_update(&mut ema, &params, rho).unwrap();
        }
        let bound = rho.powi(n as i32);
        for i in 0..6 {
            let gap = (ema[0].weight[i] - target[i]).abs();
            prop_assert!(gap <= bound * (start[i] - target[i]).abs() + 1e-12);
        }
    }
}

#[test]
fn tracker_segments_and_empty_segments() {
    let mut t = PseudoLabelTracker::new(3, 2, TrackerMode::Snapshot).unwrap();
    assert_eq!(t.m_hat(), &[1.0 / 3.0; 3]);
    t.record_predictions(&[0; 50]).unwrap();
    t.record_predictions(&[1; 30]).unwrap();
    assert_eq!(t.refreshes(), 1);
    let mut counts = vec![0usize; 50];
    counts.extend([1; 30]);
    counts.extend([2; 20]);
    let mut t = PseudoLabelTracker::new(3, 1, TrackerMode::Snapshot).unwrap();
    t.record_predictions(&counts).unwrap();
    assert_eq!(t.m_hat(), &[0.5, 0.3, 0.2]);
    t.record_predictions(&[]).unwrap();
    assert_eq!(t.m_hat(), &[0.5, 0.3, 0.2]);
    assert_eq!(t.refreshes(), 1);
}

#[test]
fn window_tracker_forgets_old_steps() {
    let mut t = PseudoLabelTracker::new(2, 2, TrackerMode::Window).unwrap();
    t.record_predictions(&[0, 0]).unwrap();
    assert_eq!(t.m_hat(), &[1.0, 0.0]);
    t.record_predictions(&[1, 1]).unwrap();
    assert_eq!(t.m_hat(), &[0.5, 0.5]);
    t.record_predictions(&[1, 1]).unwrap();
    assert_eq!(t.m_hat(), &[0.0, 1.0]);
}

#[test]
fn bank_rejects_online_features_and_bad_labels() {
    let mut bank = PrototypeBank::balanced(2, 4, 0.05).unwrap();
    let online = FeatureBatch {
        features: vec![vec![1.0]],
        provenance: Provenance::OnlineEncoder,
    };
    assert!(matches!(bank.enqueue_labeled(&online, &[0]), Err(Error::Contract(_))));
    let ema = FeatureBatch {
        features: vec![vec![1.0]],
        provenance: Provenance::EmaEncoder,
    };
    assert!(matches!(bank.enqueue_labeled(&ema, &[2]), Err(Error::Input(_))));
    assert!(matches!(bank.head(), Err(Error::WarmupIncomplete(_))));
    let mut relaxed = PrototypeBank::balanced(2, 4, 0.05).unwrap().allow_online_features();
    relaxed.enqueue_labeled(&online, &[0]).unwrap();
}

#[test]
fn ema_update_extremes() {
    let m = init_model(&[3, 4], 2, 7).unwrap();
    let mut shifted = m.clone();
    for w in &mut shifted.encoder[0].weight {
        *w += 1.0;
    }
    let mut e = m.ema_encoder.clone();
    ema_update(&mut e, &shifted.encoder, 1.0).unwrap();
    assert_eq!(e, m.ema_encoder);
    ema_update(&mut e, &shifted.encoder, 0.0).unwrap();
    assert_eq!(e, shifted.encoder);
}
