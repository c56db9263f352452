//! Losses, the DASO training step and the baseline learners.
//!
//! One training step follows this order:
//!
//! 1. weak-augment the labeled batch, encode it with the EMA encoder and push
//!    the features into the prototype bank;
//! 2. for each unlabeled sample build weak/strong views, the linear
//!    pseudo-label `p̂`, the semantic pseudo-label `q̂` and the blended `p̂′`
//!    (blending only once `t ≥ P` and every class queue is non-empty);
//! 3. assemble the labeled, unsupervised and alignment losses;
//! 4. one SGD step, then the EMA encoder update;
//! 5. record the step's pseudo-label predictions in the tracker.

mod run;

pub use run::{run_training, run_training_with, EvalPoint, RunResult, RunStatus, Summary};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blend::{argmax, blend, blend_weights, PseudoLabelTracker};
use crate::datagen::{augment, AugmentMode, AugmentSpec, Labeled};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::nn::{
    self, init_model, sgd_step, softmax, softmax_ce, CompositeLoss, CosineHead, LossGroup, ModelParams, OptState, Term,
    TermKind,
};
use crate::par::{self, Exec};
use crate::proto_bank::{FeatureBatch, PrototypeBank, Provenance};
use crate::seed::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LearnerMode {
    /// FixMatch with distribution-aware blending and the alignment loss.
    FixmatchDaso,
    Fixmatch,
    /// Thresholded hard pseudo-labels on a single view.
    Pseudolabel,
    PseudolabelDaso,
    /// Squared error to EMA-model predictions.
    Meanteacher,
    MeanteacherDaso,
    /// FixMatch + DASO with every `υ_k` pinned to the given value.
    BlendConst(f64),
}

impl LearnerMode {
    /// Whether semantic pseudo-labels (and so the prototype bank) are used.
    pub fn uses_semantics(self) -> bool {
        !matches!(
            self,
            LearnerMode::Fixmatch | LearnerMode::Pseudolabel | LearnerMode::Meanteacher
        )
    }

    fn uses_align(self) -> bool {
        matches!(self, LearnerMode::FixmatchDaso | LearnerMode::BlendConst(_))
    }
}

impl fmt::Display for LearnerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerMode::FixmatchDaso => f.write_str("fixmatch_daso"),
            LearnerMode::Fixmatch => f.write_str("fixmatch"),
            LearnerMode::Pseudolabel => f.write_str("pseudolabel"),
            LearnerMode::PseudolabelDaso => f.write_str("pseudolabel_daso"),
            LearnerMode::Meanteacher => f.write_str("meanteacher"),
            LearnerMode::MeanteacherDaso => f.write_str("meanteacher_daso"),
            LearnerMode::BlendConst(v) => write!(f, "blend_const({v})"),
        }
    }
}

impl FromStr for LearnerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim() {
            "fixmatch_daso" | "daso" => LearnerMode::FixmatchDaso,
            "fixmatch" => LearnerMode::Fixmatch,
            "pseudolabel" => LearnerMode::Pseudolabel,
            "pseudolabel_daso" => LearnerMode::PseudolabelDaso,
            "meanteacher" => LearnerMode::Meanteacher,
            "meanteacher_daso" => LearnerMode::MeanteacherDaso,
            other => {
                let v = other
                    .strip_prefix("blend_const(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown learner mode `{other}`"))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("blend_const weight {v} outside [0, 1]"));
                }
                LearnerMode::BlendConst(v)
            }
        })
    }
}

impl Serialize for LearnerMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LearnerMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which distribution the confidence threshold looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// The blended target `p̂′` that the loss actually uses.
    Blended,
    /// The linear prediction `p̂`.
    Linear,
}

/// Which predictions feed the pseudo-label tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerCounts {
    Masked,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_u: f64,
    pub lambda_align: f64,
    pub tau: f64,
    #[serde(rename = "P")]
    pub pretrain_steps: u64,
    pub la_enabled: bool,
    pub la_tau: f64,
    pub learner_mode: LearnerMode,
    /// Fraction of total steps over which `lambda_u` ramps linearly from 0.
    pub ramp_up: Option<f64>,
    pub mask_source: MaskSource,
    pub tracker_counts: TrackerCounts,
    /// Replace the soft target by its one-hot argmax (FixMatch family only).
    pub hard_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_u: 1.0,
            lambda_align: 1.0,
            tau: 0.95,
            pretrain_steps: 5000,
            la_enabled: false,
            la_tau: 1.0,
            learner_mode: LearnerMode::FixmatchDaso,
            ramp_up: None,
            mask_source: MaskSource::Blended,
            tracker_counts: TrackerCounts::Masked,
            hard_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0) {
            return Err(Error::config("loss.lambda_u", "must be non-negative"));
        }
        if !(self.lambda_align >= 0.0) {
            return Err(Error::config("loss.lambda_align", "must be non-negative"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("loss.tau", "must lie in (0, 1]"));
        }
        if !(self.la_tau >= 0.0) {
            return Err(Error::config("loss.la_tau", "must be non-negative"));
        }
        if let Some(r) = self.ramp_up {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config("loss.ramp_up", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// `lambda_u · min(1, t / (ramp · total))`.
    pub fn lambda_u_at(&self, t: u64, total_steps: u64) -> f64 {
        match self.ramp_up {
            Some(r) if total_steps > 0 => {
                let span = r * total_steps as f64;
                self.lambda_u * (t as f64 / span).min(1.0)
            }
            _ => self.lambda_u,
        }
    }
}

/// `logits_k + τ · log n_k`.
pub fn adjust_logits_la(logits: &[f64], n_counts: &[usize], la_tau: f64) -> Result<Vec<f64>> {
    Ok(logits
        .iter()
        .zip(la_offsets(n_counts, la_tau)?.iter())
        .map(|(a, o)| a + o)
        .collect())
}

fn la_offsets(n_counts: &[usize], la_tau: f64) -> Result<Vec<f64>> {
    if n_counts.contains(&0) {
        return Err(Error::config(
            "loss.la_enabled",
            "logit adjustment needs every class count ≥ 1",
        ));
    }
    Ok(n_counts.iter().map(|&n| la_tau * (n as f64).ln()).collect())
}

/// FixMatch consistency term: `1(confidence ≥ τ) · H(target, softmax(strong))`.
pub fn unsup_loss_fixmatch(target: &[f64], logits_strong: &[f64], confidence: f64, tau: f64) -> Result<(f64, u8)> {
    if confidence < tau {
        return Ok((0.0, 0));
    }
    let (l, _) = softmax_ce(target, logits_strong)?;
    Ok((l, 1))
}

/// `H(q_weak, q(z_strong))`. Returns `None` while the bank is still warming up.
pub fn align_loss(q_weak: &[f64], z_strong: &[f64], bank: &mut PrototypeBank) -> Result<Option<f64>> {
    let head = match bank.head() {
        Ok(h) => h,
        Err(Error::WarmupIncomplete(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    head.ce_and_grad(q_weak, z_strong).map(|(l, _)| Some(l))
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Everything one training run carries between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelParams,
    pub opt: OptState,
    pub bank: PrototypeBank,
    pub tracker: PseudoLabelTracker,
    pub t: u64,
    pub rng: ChaCha8Rng,
    pub total_steps: u64,
    t_dist: f64,
    rho: f64,
    use_ema_features: bool,
    aug_seed: u64,
    label_counts: Vec<usize>,
    la_offsets: Option<Arc<[f64]>>,
    exec: Exec,
}

impl TrainState {
    /// Builds the initial state for `cfg` given the visible labeled class counts.
    pub fn new(cfg: &RunConfig, label_counts: &[usize]) -> Result<Self> {
        let k = cfg.dataset.k;
        let mut dims = vec![cfg.dataset.d];
        dims.extend(&cfg.model.hidden);
        dims.push(cfg.model.feature_dim);
        let model = init_model(&dims, k, seed::stream_seed(cfg.seed, Stream::Init))?;
        let o = &cfg.optim;
        let opt = OptState::new(&model, o.lr, o.momentum, o.weight_decay, o.nesterov);
        let bank = if cfg.bank.balanced_queue {
            PrototypeBank::balanced(k, cfg.bank.queue_len, cfg.bank.t_proto)?
        } else {
            PrototypeBank::proportional(label_counts, cfg.bank.queue_len, cfg.bank.t_proto)?
        };
        let bank = if cfg.bank.use_ema_encoder {
            bank
        } else {
            bank.allow_online_features()
        };
        let tracker = PseudoLabelTracker::new(k, cfg.tracker.segment_len, cfg.tracker.mode)?;
        let la = if cfg.loss.la_enabled {
            Some(Arc::from(la_offsets(label_counts, cfg.loss.la_tau)?))
        } else {
            None
        };
        Ok(TrainState {
            model,
            opt,
            bank,
            tracker,
            t: 0,
            rng: seed::rng(seed::stream_seed(cfg.seed, Stream::Sampling)),
            total_steps: cfg.total_steps,
            t_dist: cfg.tracker.t_dist,
            rho: cfg.optim.rho,
            use_ema_features: cfg.bank.use_ema_encoder,
            aug_seed: seed::stream_seed(cfg.seed, Stream::Augment),
            label_counts: label_counts.to_vec(),
            la_offsets: la,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn label_counts(&self) -> &[usize] {
        &self.label_counts
    }

    fn view_seed(&self, view: u64, i: usize) -> u64 {
        seed::mix(self.aug_seed, &[self.t, view, i as u64])
    }

    /// Blend weights in force for the current step.
    pub fn upsilon(&self, cfg: &LossConfig) -> Result<Vec<f64>> {
        let k = self.model.num_classes();
        match cfg.learner_mode {
            LearnerMode::BlendConst(v) => Ok(vec![v; k]),
            m if m.uses_semantics() => blend_weights(self.tracker.m_hat(), self.t_dist),
            _ => Ok(vec![0.0; k]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_u: f64,
    pub loss_align: f64,
    pub lambda_u: f64,
    pub mask_rate: f64,
    /// Fraction of unlabeled samples whose target was blended.
    pub blend_rate: f64,
    pub align_active: bool,
    pub m_hat: Vec<f64>,
    pub upsilon: Vec<f64>,
}

/// Per-sample pseudo-label result.
#[derive(Clone, Debug)]
struct Pseudo {
    student_input: Vec<f64>,
    target: Vec<f64>,
    q_hat: Option<Vec<f64>>,
    pred: usize,
    masked: bool,
    blended: bool,
}

struct StepContext<'a> {
    cfg: &'a LossConfig,
    head: Option<Arc<CosineHead>>,
    upsilon: &'a [f64],
    gate: bool,
}

fn pseudo_label(model: &ModelParams, ctx: &StepContext<'_>, weak: &[f64], student: Vec<f64>) -> Result<Pseudo> {
    let cfg = ctx.cfg;
    let mode = cfg.learner_mode;
    let teacher_ema = matches!(mode, LearnerMode::Meanteacher | LearnerMode::MeanteacherDaso);
    let (z_w, logits_w) = model.forward(weak, teacher_ema)?;
    let p_hat = softmax(&logits_w);
    let q_hat = match (&ctx.head, mode.uses_semantics()) {
        (Some(h), true) => match h.probs(&z_w) {
            Ok(q) => Some(q),
            Err(Error::DegenerateFeature) => None,
            Err(e) => return Err(e),
        },
        _ => None,
    };
    let (p_prime, blended) = match (&q_hat, ctx.gate) {
        (Some(q), true) => (blend(&p_hat, q, ctx.upsilon)?, true),
        _ => (p_hat.clone(), false),
    };
    let pred = argmax(&p_prime);
    let confidence = match cfg.mask_source {
        MaskSource::Blended => p_prime[pred],
        MaskSource::Linear => p_hat[argmax(&p_hat)],
    };
    let k = p_hat.len();
    let (target, masked) = match mode {
        LearnerMode::Meanteacher | LearnerMode::MeanteacherDaso => (p_prime, true),
        LearnerMode::Pseudolabel | LearnerMode::PseudolabelDaso => (one_hot(pred, k), confidence >= cfg.tau),
        _ if cfg.hard_targets => (one_hot(pred, k), confidence >= cfg.tau),
        _ => (p_prime, confidence >= cfg.tau),
    };
    Ok(Pseudo {
        student_input: student,
        target,
        q_hat,
        pred,
        masked,
        blended,
    })
}

/// One optimization step over a labeled and an unlabeled batch.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[Labeled],
    unlabeled: &[Vec<f64>],
    cfg: &LossConfig,
    aug: &AugmentSpec,
) -> Result<StepMetrics> {
    let step = state.t;
    let with_step = |e: Error| match e {
        Error::Numeric { term, .. } => Error::Numeric { term, step: Some(step) },
        e => e,
    };
    let k = state.model.num_classes();
    let mode = cfg.learner_mode;

    // labeled weak views, then prototype features
    let labeled_views: Vec<Vec<f64>> = labeled
        .iter()
        .enumerate()
        .map(|(i, s)| augment(&s.x, aug, AugmentMode::Weak, state.view_seed(0, i)))
        .collect();
    if mode.uses_semantics() {
        let features = par::map(state.exec, &labeled_views, |x| {
            state.model.features(x, state.use_ema_features)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let batch = FeatureBatch {
            features,
            provenance: if state.use_ema_features {
                Provenance::EmaEncoder
            } else {
                Provenance::OnlineEncoder
            },
        };
        let labels: Vec<usize> = labeled.iter().map(|s| s.y).collect();
        state.bank.enqueue_labeled(&batch, &labels)?;
    }
    let head = if mode.uses_semantics() && state.bank.is_warm() {
        Some(state.bank.shared_head()?)
    } else {
        None
    };

    let upsilon = state.upsilon(cfg)?;
    let gate = step >= cfg.pretrain_steps;
    let ctx = StepContext {
        cfg,
        head: head.clone(),
        upsilon: &upsilon,
        gate,
    };

    // unlabeled views
    let idx: Vec<usize> = (0..unlabeled.len()).collect();
    let pseudo = par::map(state.exec, &idx, |&i| {
        let u = &unlabeled[i];
        let weak = augment(u, aug, AugmentMode::Weak, state.view_seed(1, i));
        let student = match mode {
            LearnerMode::Pseudolabel | LearnerMode::PseudolabelDaso => weak.clone(),
            LearnerMode::Meanteacher | LearnerMode::MeanteacherDaso => {
                augment(u, aug, AugmentMode::Weak, state.view_seed(3, i))
            }
            _ => augment(u, aug, AugmentMode::Strong, state.view_seed(2, i)),
        };
        pseudo_label(&state.model, &ctx, &weak, student)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    // losses
    let lambda_u = cfg.lambda_u_at(step, state.total_steps);
    let align_on = gate && mode.uses_align() && cfg.lambda_align > 0.0;
    let align_active = align_on && head.is_some();
    let mut loss = CompositeLoss::new();
    loss.declare(LossGroup::Cls, 1.0, labeled.len())
        .declare(LossGroup::Unsup, lambda_u, unlabeled.len())
        .declare(
            LossGroup::Align,
            if align_on { cfg.lambda_align } else { 0.0 },
            unlabeled.len(),
        );
    for (x, s) in labeled_views.into_iter().zip(labeled) {
        loss.push(
            x,
            vec![Term {
                group: LossGroup::Cls,
                kind: TermKind::Ce {
                    target: one_hot(s.y, k),
                    offset: state.la_offsets.clone(),
                },
            }],
        );
    }
    let mut preds = Vec::new();
    let (mut n_masked, mut n_blended) = (0usize, 0usize);
    for p in pseudo {
        let mut terms = Vec::new();
        if p.masked {
            n_masked += 1;
            let kind = if matches!(mode, LearnerMode::Meanteacher | LearnerMode::MeanteacherDaso) {
                TermKind::ProbSq { target: p.target }
            } else {
                TermKind::Ce {
                    target: p.target,
                    offset: None,
                }
            };
            terms.push(Term {
                group: LossGroup::Unsup,
                kind,
            });
        }
        if p.blended {
            n_blended += 1;
        }
        if let (true, Some(h), Some(q)) = (align_on, &head, p.q_hat) {
            terms.push(Term {
                group: LossGroup::Align,
                kind: TermKind::SemanticCe {
                    target: q,
                    head: h.clone(),
                },
            });
        }
        if p.masked || cfg.tracker_counts == TrackerCounts::All {
            preds.push(p.pred);
        }
        loss.push(p.student_input, terms);
    }
    let (value, grads) = nn::loss_and_grads_with(state.exec, &state.model, &loss).map_err(with_step)?;

    sgd_step(&mut state.model, &grads, &mut state.opt)?;
    state.model.update_ema(state.rho)?;
    state.tracker.record_predictions(&preds)?;
    state.t += 1;

    let n_u = unlabeled.len().max(1) as f64;
    Ok(StepMetrics {
        step,
        loss_total: value.total,
        loss_cls: value.group(LossGroup::Cls),
        loss_u: value.group(LossGroup::Unsup),
        loss_align: value.group(LossGroup::Align),
        lambda_u,
        mask_rate: n_masked as f64 / n_u,
        blend_rate: n_blended as f64 / n_u,
        align_active,
        m_hat: state.tracker.m_hat().to_vec(),
        upsilon,
    })
}

/// Current pseudo-labels for raw (un-augmented) unlabeled inputs:
/// `(argmax p̂′, passed mask)` per sample. Nothing is updated.
pub fn pseudo_label_snapshot(
    state: &mut TrainState,
    inputs: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<Vec<(usize, bool)>> {
    let mode = cfg.learner_mode;
    let head = if mode.uses_semantics() && state.bank.is_warm() {
        Some(state.bank.shared_head()?)
    } else {
        None
    };
    let upsilon = state.upsilon(cfg)?;
    let ctx = StepContext {
        cfg,
        head,
        upsilon: &upsilon,
        gate: state.t >= cfg.pretrain_steps,
    };
    par::map(state.exec, inputs, |u| {
        pseudo_label(&state.model, &ctx, u, Vec::new()).map(|p| (p.pred, p.masked))
    })
    .into_iter()
    .collect()
}
