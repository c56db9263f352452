//! Training-step equivalences: stop-gradient seals, the pre-train gate and
//! the mode lattice, checked bit for bit.

use daso_core::blend::argmax;
use daso_core::datagen::{generate_dataset, DatasetBundle, Labeled};
use daso_core::harness::config::RunConfig;
use daso_core::learner::{pseudo_label_snapshot, run_training_with, train_step, LearnerMode, TrainState};
use daso_core::nn::{self, ema_update, finite_diff_check, softmax, CompositeLoss, LossGroup, Term, TermKind};
use daso_core::par::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    RunConfig::parse(
        r#"
        seed = 3
        total_steps = 60
        eval_interval = 20
        [dataset]
        K = 3
        d = 2
        N1 = 30
        M1 = 60
        gamma_l = 5.0
        gamma_u = 5.0
        test_per_class = 10
        [model]
        hidden = [8]
        feature_dim = 6
        [loss]
        P = 10
        tau = 0.6
        [bank]
        L = 8
        [tracker]
        segment_len = 5
        [optim]
        B = 8
        mu = 2
        rho = 0.9
        "#,
    )
    .unwrap()
}

type Batch = (Vec<Labeled>, Vec<Vec<f64>>);

fn batches(data: &DatasetBundle, cfg: &RunConfig, n: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..n)
        .map(|_| {
            let l = (0..cfg.optim.batch_size)
                .map(|_| data.labeled[rng.random_range(0..data.labeled.len())].clone())
                .collect();
            let u = (0..cfg.optim.batch_size * cfg.optim.mu)
                .map(|_| data.unlabeled.inputs[rng.random_range(0..data.unlabeled.inputs.len())].clone())
                .collect();
            (l, u)
        })
        .collect()
}

fn trajectory(cfg: &RunConfig, steps: usize) -> (TrainState, Vec<f64>) {
    let data = generate_dataset(&cfg.dataset, 1).unwrap();
    let mut state = TrainState::new(cfg, &data.labeled_counts).unwrap();
    let mut losses = Vec::new();
    for (l, u) in batches(&data, cfg, steps) {
        let m = train_step(&mut state, &l, &u, &cfg.loss, &cfg.augment).unwrap();
        losses.push(m.loss_total);
    }
    (state, losses)
}

#[test]
fn fixmatch_equals_daso_with_zero_blend_and_no_alignment() {
    let mut a = small_config();
    a.loss.learner_mode = LearnerMode::Fixmatch;
    let mut b = small_config();
    b.loss.learner_mode = LearnerMode::BlendConst(0.0);
    b.loss.lambda_align = 0.0;
    let (sa, la) = trajectory(&a, 50);
    let (sb, lb) = trajectory(&b, 50);
    assert!(sb.bank.is_warm());
    assert_eq!(la, lb);
    assert_eq!(sa.model, sb.model);
    assert_eq!(sa.opt, sb.opt);
}

#[test]
fn gate_keeps_daso_on_fixmatch_trajectory_before_p() {
    let mut a = small_config();
    a.loss.learner_mode = LearnerMode::Fixmatch;
    let mut b = small_config();
    b.loss.pretrain_steps = 1000;
    let data = generate_dataset(&b.dataset, 1).unwrap();
    let mut sb = TrainState::new(&b, &data.labeled_counts).unwrap();
    for (l, u) in batches(&data, &b, 40) {
        let m = train_step(&mut sb, &l, &u, &b.loss, &b.augment).unwrap();
        assert!(!m.align_active);
        assert_eq!(m.loss_align, 0.0);
        assert_eq!(m.blend_rate, 0.0);
    }
    let (sa, _) = trajectory(&a, 40);
    assert_eq!(sa.model, sb.model);
}

#[test]
fn daso_departs_from_fixmatch_after_the_gate() {
    let mut a = small_config();
    a.loss.learner_mode = LearnerMode::Fixmatch;
    let b = small_config();
    let (sa, _) = trajectory(&a, 30);
    let (sb, _) = trajectory(&b, 30);
    assert_ne!(sa.model, sb.model);
}

#[test]
fn zero_unlabeled_weights_reduce_to_supervised_training() {
    let mut cfg = small_config();
    cfg.loss.lambda_u = 0.0;
    cfg.loss.lambda_align = 0.0;
    cfg.augment.weak_sigma = 0.0;
    let data = generate_dataset(&cfg.dataset, 1).unwrap();
    let mut state = TrainState::new(&cfg, &data.labeled_counts).unwrap();
    let mut manual = state.model.clone();
    let mut opt = state.opt.clone();
    for (l, u) in batches(&data, &cfg, 30) {
        train_step(&mut state, &l, &u, &cfg.loss, &cfg.augment).unwrap();
        let mut loss = CompositeLoss::new();
        loss.declare(LossGroup::Cls, 1.0, l.len());
        for s in &l {
            let mut target = vec![0.0; 3];
            target[s.y] = 1.0;
            loss.push(
                s.x.clone(),
                vec![Term {
                    group: LossGroup::Cls,
                    kind: TermKind::Ce { target, offset: None },
                }],
            );
        }
        let (_, g) = nn::loss_and_grads(&manual, &loss).unwrap();
        nn::sgd_step(&mut manual, &g, &mut opt).unwrap();
        manual.update_ema(cfg.optim.rho).unwrap();
    }
    assert_eq!(state.model, manual);
}

#[test]
fn ema_encoder_moves_only_by_the_ema_rule() {
    let cfg = small_config();
    let data = generate_dataset(&cfg.dataset, 1).unwrap();
    let mut state = TrainState::new(&cfg, &data.labeled_counts).unwrap();
    for (l, u) in batches(&data, &cfg, 25) {
        let before = state.model.ema_encoder.clone();
        train_step(&mut state, &l, &u, &cfg.loss, &cfg.augment).unwrap();
        let mut expect = before;
        ema_update(&mut expect, &state.model.encoder, cfg.optim.rho).unwrap();
        assert_eq!(state.model.ema_encoder, expect);
    }
}

#[test]
fn gradients_ignore_the_ema_encoder_and_targets() {
    let cfg = small_config();
    let (mut state, _) = trajectory(&cfg, 20);
    let data = generate_dataset(&cfg.dataset, 1).unwrap();
    let head = state.bank.shared_head().unwrap();
    let mut loss = CompositeLoss::new();
    loss.declare(LossGroup::Unsup, 1.0, 6).declare(LossGroup::Align, 1.0, 6);
    for x in data.unlabeled.inputs.iter().take(6) {
        // targets computed from the model itself, then frozen as values
        let (z, logits) = state.model.forward(x, false).unwrap();
        let p = softmax(&logits);
        let q = head.probs(&z).unwrap();
        loss.push(
            x.clone(),
            vec![
                Term {
                    group: LossGroup::Unsup,
                    kind: TermKind::Ce {
                        target: p,
                        offset: None,
                    },
                },
                Term {
                    group: LossGroup::Align,
                    kind: TermKind::SemanticCe {
                        target: q,
                        head: head.clone(),
                    },
                },
            ],
        );
    }
    let (_, g1) = nn::loss_and_grads(&state.model, &loss).unwrap();
    let mut perturbed = state.model.clone();
    for layer in &mut perturbed.ema_encoder {
        for w in &mut layer.weight {
            *w = -*w + 0.5;
        }
    }
    let (_, g2) = nn::loss_and_grads(&perturbed, &loss).unwrap();
    assert_eq!(g1, g2);
    assert!(finite_diff_check(&state.model, &loss, 1e-5).unwrap() < 1e-4);
}

#[test]
fn blend_const_one_uses_semantic_labels_once_warm() {
    let mut cfg = small_config();
    cfg.loss.learner_mode = LearnerMode::BlendConst(1.0);
    let (mut state, _) = trajectory(&cfg, 20);
    let data = generate_dataset(&cfg.dataset, 1).unwrap();
    let preds = pseudo_label_snapshot(&mut state, &data.unlabeled.inputs, &cfg.loss).unwrap();
    let head = state.bank.head().unwrap();
    for (x, (pred, _)) in data.unlabeled.inputs.iter().zip(preds) {
        let z = state.model.features(x, false).unwrap();
        assert_eq!(pred, argmax(&head.probs(&z).unwrap()));
    }
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let cfg = small_config();
    let a = run_training_with(Exec::Sequential, &cfg).unwrap();
    let b = run_training_with(Exec::Parallel, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn every_learner_mode_trains() {
    for mode in [
        "fixmatch_daso",
        "fixmatch",
        "pseudolabel",
        "pseudolabel_daso",
        "meanteacher",
        "meanteacher_daso",
        "blend_const(0.5)",
    ] {
        let mut cfg = small_config();
        cfg.loss.learner_mode = mode.parse().unwrap();
        cfg.loss.la_enabled = mode == "fixmatch_daso";
        let r = run_training_with(Exec::Sequential, &cfg).unwrap();
        assert!(r.status.is_ok(), "{mode}: {:?}", r.status);
        assert_eq!(r.history.len(), 4);
        assert!(r.summary.balanced_acc_median.is_finite());
    }
}
