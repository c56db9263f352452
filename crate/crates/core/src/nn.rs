//! Micro MLP engine.
//!
//! The model is an encoder (dense layers, each followed by ReLU) and a linear
//! classifier on the final encoder activation. An EMA copy of the encoder is
//! carried alongside the trainable weights. Gradients are derived by hand for
//! the three loss terms the learners need and are checked against central
//! finite differences in [`finite_diff_check`].

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::seed;

/// Dense layer `y = W^T x + b` with `W` stored row-major as `in_dim × out_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// `(in_dim, out_dim)`
    pub fn shape(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.out_dim..(i + 1) * self.out_dim];
            for (yj, &w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        y
    }

    /// Accumulates `x ⊗ dy` into this buffer and returns `W dy`.
    fn backward_into(&mut self, layer: &Dense, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; layer.in_dim];
        for (i, &xi) in x.iter().enumerate() {
            let row = &layer.weight[i * layer.out_dim..(i + 1) * layer.out_dim];
            let grow = &mut self.weight[i * layer.out_dim..(i + 1) * layer.out_dim];
            let mut acc = 0.0;
            for j in 0..layer.out_dim {
                grow[j] += xi * dy[j];
                acc += row[j] * dy[j];
            }
            dx[i] = acc;
        }
        for (b, &d) in self.bias.iter_mut().zip(dy) {
            *b += d;
        }
        dx
    }

    fn entries(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn entry_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }
}

/// Encoder θ, classifier φ and the EMA encoder θ′.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub ema_encoder: Vec<Dense>,
}

/// Gradient buffers shaped like the trainable part of [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
}

/// Builds a model for `layer_dims = [input, hidden.., feature]` and `k` classes.
///
/// Weights are uniform in `±1/sqrt(fan_in)`, biases zero, and the EMA encoder
/// starts as an exact copy of the encoder.
pub fn init_model(layer_dims: &[usize], k: usize, seed: u64) -> Result<ModelParams> {
    if layer_dims.len() < 2 {
        return Err(Error::config(
            "model.layer_dims",
            "need at least an input and a feature dimension",
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::config("model.layer_dims", "dimensions must be positive"));
    }
    if k < 2 {
        return Err(Error::config("dataset.K", "need at least two classes"));
    }
    let mut rng = seed::rng(seed);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut d = Dense::zeros(fan_in, fan_out);
        for w in d.weight.iter_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        d
    };
    let encoder: Vec<Dense> = layer_dims.windows(2).map(|w| layer(w[0], w[1])).collect();
    let feature_dim = *layer_dims.last().unwrap();
    let classifier = layer(feature_dim, k);
    Ok(ModelParams {
        ema_encoder: encoder.clone(),
        encoder,
        classifier,
    })
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim
    }

    /// Number of trainable scalars (encoder + classifier).
    pub fn trainable_len(&self) -> usize {
        self.encoder.iter().map(Dense::len).sum::<usize>() + self.classifier.len()
    }

    fn trainable_entry_mut(&mut self, mut i: usize) -> &mut f64 {
        for layer in self.encoder.iter_mut() {
            if i < layer.len() {
                return layer.entry_mut(i);
            }
            i -= layer.len();
        }
        self.classifier.entry_mut(i)
    }

    /// Online-encoder features, classifier logits.
    pub fn forward(&self, x: &[f64], use_ema_encoder: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let layers = if use_ema_encoder {
            &self.ema_encoder
        } else {
            &self.encoder
        };
        let z = encode(layers, x)?;
        let logits = self.classifier.apply(&z);
        Ok((z, logits))
    }

    pub fn features(&self, x: &[f64], use_ema_encoder: bool) -> Result<Vec<f64>> {
        let layers = if use_ema_encoder {
            &self.ema_encoder
        } else {
            &self.encoder
        };
        encode(layers, x)
    }

    /// θ′ ← ρθ′ + (1−ρ)θ
    pub fn update_ema(&mut self, rho: f64) -> Result<()> {
        ema_update(&mut self.ema_encoder, &self.encoder, rho)
    }
}

fn encode(layers: &[Dense], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layers[0].in_dim {
        return Err(Error::Shape {
            what: "model input",
            expected: layers[0].in_dim,
            got: x.len(),
        });
    }
    let mut h = x.to_vec();
    for layer in layers {
        h = layer.apply(&h);
        relu(&mut h);
    }
    Ok(h)
}

fn relu(h: &mut [f64]) {
    for v in h.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Grads {
            encoder: params
                .encoder
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
            classifier: Dense::zeros(params.classifier.in_dim, params.classifier.out_dim),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(std::iter::once(&self.classifier))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(std::iter::once(&mut self.classifier))
    }

    /// Flattened view in the same order as the trainable parameters.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.entries().copied()).collect()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.entries_mut().zip(b.entries()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.entries_mut() {
                *x *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.entries())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn all_finite(&self) -> bool {
        self.tensors().flat_map(|t| t.entries()).all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

pub(crate) fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if !(v >= 0.0) {
            return Err(Error::Contract(format!("{what} has a negative or NaN entry")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|&a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in e.iter_mut() {
        *v /= s;
    }
    e
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&a| (a - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy `−Σ t_k log softmax(a)_k` and its logit gradient `softmax(a) − t`.
pub fn softmax_ce(target: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != logits.len() {
        return Err(Error::Shape {
            what: "cross-entropy target",
            expected: logits.len(),
            got: target.len(),
        });
    }
    check_distribution(target, "cross-entropy target")?;
    let lse = log_sum_exp(logits);
    let loss = target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, a)| -t * (a - lse))
        .sum();
    let mut d = softmax(logits);
    for (g, t) in d.iter_mut().zip(target) {
        *g -= t;
    }
    Ok((loss, d))
}

/// `‖softmax(a) − t‖²` and its logit gradient.
pub fn softmax_sq(target: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != logits.len() {
        return Err(Error::Shape {
            what: "squared-error target",
            expected: logits.len(),
            got: target.len(),
        });
    }
    let p = softmax(logits);
    let g: Vec<f64> = p.iter().zip(target).map(|(p, t)| 2.0 * (p - t)).collect();
    let loss = p.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    let pg: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
    let d = p.iter().zip(&g).map(|(p, g)| p * (g - pg)).collect();
    Ok((loss, d))
}

/// Unit-normalized class prototypes with a softmax temperature.
///
/// `probs(z) = softmax_k(cos(z, c_k) / temperature)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead {
    unit: Vec<Vec<f64>>,
    temperature: f64,
}

impl CosineHead {
    pub fn new(prototypes: &[Vec<f64>], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config("bank.T_proto", "temperature must be positive"));
        }
        let unit = prototypes
            .iter()
            .map(|c| normalized(c).ok_or(Error::DegenerateFeature))
            .collect::<Result<Vec<_>>>()?;
        Ok(CosineHead { unit, temperature })
    }

    pub fn num_classes(&self) -> usize {
        self.unit.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Cosine similarities of `z` to every prototype.
    pub fn similarities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zn = normalized(z).ok_or(Error::DegenerateFeature)?;
        Ok(self.unit.iter().map(|c| dot(c, &zn)).collect())
    }

    pub fn probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        let s = self.similarities(z)?;
        let a: Vec<f64> = s.iter().map(|s| s / self.temperature).collect();
        Ok(softmax(&a))
    }

    /// Cross-entropy of `probs(z)` against `target` and its gradient w.r.t. `z`.
    pub fn ce_and_grad(&self, target: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let norm = dot(z, z).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateFeature);
        }
        let zn: Vec<f64> = z.iter().map(|v| v / norm).collect();
        let s: Vec<f64> = self.unit.iter().map(|c| dot(c, &zn)).collect();
        let a: Vec<f64> = s.iter().map(|s| s / self.temperature).collect();
        let (loss, da) = softmax_ce(target, &a)?;
        // d s_k / d z = (ĉ_k − s_k ẑ) / |z|
        let mut dz = vec![0.0; z.len()];
        for ((c, &sk), &dak) in self.unit.iter().zip(&s).zip(&da) {
            let g = dak / self.temperature / norm;
            for ((d, &ci), &zi) in dz.iter_mut().zip(c).zip(&zn) {
                *d += g * (ci - sk * zi);
            }
        }
        Ok((loss, dz))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Which objective a term belongs to. Each group is mean-reduced over its
/// declared batch size and scaled by its coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossGroup {
    Cls,
    Unsup,
    Align,
}

impl LossGroup {
    pub const ALL: [LossGroup; 3] = [LossGroup::Cls, LossGroup::Unsup, LossGroup::Align];

    pub fn name(self) -> &'static str {
        match self {
            LossGroup::Cls => "loss_cls",
            LossGroup::Unsup => "loss_u",
            LossGroup::Align => "loss_align",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

/// A single per-sample loss. Targets are plain values, so no gradient can
/// flow into them.
#[derive(Clone, Debug)]
pub enum TermKind {
    /// Cross-entropy against `softmax(logits + offset)`.
    Ce {
        target: Vec<f64>,
        offset: Option<Arc<[f64]>>,
    },
    /// `‖softmax(logits) − target‖²`.
    ProbSq { target: Vec<f64> },
    /// Cross-entropy against the cosine classifier on the encoder feature.
    /// A zero-norm feature contributes nothing.
    SemanticCe { target: Vec<f64>, head: Arc<CosineHead> },
}

#[derive(Clone, Debug)]
pub struct Term {
    pub group: LossGroup,
    pub kind: TermKind,
}

/// One input pushed through the online encoder, with the terms it feeds.
#[derive(Clone, Debug)]
pub struct Row {
    pub input: Vec<f64>,
    pub terms: Vec<Term>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct GroupSpec {
    coef: f64,
    batch: usize,
}

/// `Σ_g coef_g · (1/batch_g) · Σ_{terms in g} ℓ`.
#[derive(Clone, Debug)]
pub struct CompositeLoss {
    groups: [GroupSpec; 3],
    rows: Vec<Row>,
}

impl Default for CompositeLoss {
    fn default() -> Self {
        Self::new()
    }
}

impl CompositeLoss {
    pub fn new() -> Self {
        CompositeLoss {
            groups: [GroupSpec { coef: 0.0, batch: 0 }; 3],
            rows: Vec::new(),
        }
    }

    /// Sets a group's weight and the batch size its mean is taken over
    /// (rows without a term for the group still count).
    pub fn declare(&mut self, group: LossGroup, coef: f64, batch: usize) -> &mut Self {
        self.groups[group.idx()] = GroupSpec { coef, batch };
        self
    }

    pub fn push(&mut self, input: Vec<f64>, terms: Vec<Term>) {
        self.rows.push(Row { input, terms });
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn coef(&self, group: LossGroup) -> f64 {
        self.groups[group.idx()].coef
    }

    fn scale(&self, group: LossGroup) -> f64 {
        let g = self.groups[group.idx()];
        if g.batch == 0 {
            0.0
        } else {
            1.0 / g.batch as f64
        }
    }
}

/// Total weighted loss plus the unweighted mean of each group.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    group_mean: [f64; 3],
}

impl LossValue {
    pub fn group(&self, g: LossGroup) -> f64 {
        self.group_mean[g.idx()]
    }
}

struct Trace {
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn trace(params: &ModelParams, x: &[f64]) -> Result<Trace> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape {
            what: "model input",
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let mut acts = Vec::with_capacity(params.encoder.len() + 1);
    acts.push(x.to_vec());
    for layer in &params.encoder {
        let mut h = layer.apply(acts.last().unwrap());
        relu(&mut h);
        acts.push(h);
    }
    let logits = params.classifier.apply(acts.last().unwrap());
    Ok(Trace { acts, logits })
}

/// Per-term loss and the gradients it sends to the logits and the feature.
/// Loss value with optional gradients w.r.t. logits and features.
type TermOutput = (f64, Option<Vec<f64>>, Option<Vec<f64>>);

fn term_value(term: &Term, logits: &[f64], z: &[f64]) -> Result<Option<TermOutput>> {
    Ok(Some(match &term.kind {
        TermKind::Ce { target, offset } => {
            let (l, d) = match offset {
                Some(off) => {
                    let adj: Vec<f64> = logits.iter().zip(off.iter()).map(|(a, o)| a + o).collect();
                    softmax_ce(target, &adj)?
                }
                None => softmax_ce(target, logits)?,
            };
            (l, Some(d), None)
        }
        TermKind::ProbSq { target } => {
            let (l, d) = softmax_sq(target, logits)?;
            (l, Some(d), None)
        }
        TermKind::SemanticCe { target, head } => match head.ce_and_grad(target, z) {
            Ok((l, dz)) => (l, None, Some(dz)),
            Err(Error::DegenerateFeature) => return Ok(None),
            Err(e) => return Err(e),
        },
    }))
}

fn numeric(group: LossGroup) -> Error {
    Error::Numeric {
        term: group.name().to_string(),
        step: None,
    }
}

struct Partial {
    total: f64,
    group_sum: [f64; 3],
    grads: Grads,
}

fn rows_loss_and_grads(params: &ModelParams, loss: &CompositeLoss, rows: &[Row]) -> Result<Partial> {
    let mut out = Partial {
        total: 0.0,
        group_sum: [0.0; 3],
        grads: Grads::zeros_like(params),
    };
    for row in rows {
        if row.terms.is_empty() {
            continue;
        }
        let tr = trace(params, &row.input)?;
        let z = tr.acts.last().unwrap();
        let mut dlogits = vec![0.0; tr.logits.len()];
        let mut dz = vec![0.0; z.len()];
        let mut touched = false;
        for term in &row.terms {
            let w = loss.coef(term.group) * loss.scale(term.group);
            let Some((l, dl, dzz)) = term_value(term, &tr.logits, z)? else {
                continue;
            };
            if !l.is_finite() {
                return Err(numeric(term.group));
            }
            out.group_sum[term.group.idx()] += l * loss.scale(term.group);
            out.total += w * l;
            if w == 0.0 {
                continue;
            }
            if let Some(d) = dl {
                for (a, b) in dlogits.iter_mut().zip(&d) {
                    *a += w * b;
                }
                touched = true;
            }
            if let Some(d) = dzz {
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(numeric(term.group));
                }
                for (a, b) in dz.iter_mut().zip(&d) {
                    *a += w * b;
                }
                touched = true;
            }
        }
        if !touched {
            continue;
        }
        let dz_cls = out.grads.classifier.backward_into(&params.classifier, z, &dlogits);
        for (a, b) in dz.iter_mut().zip(&dz_cls) {
            *a += b;
        }
        let mut dh = dz;
        for (li, layer) in params.encoder.iter().enumerate().rev() {
            let h_out = &tr.acts[li + 1];
            for (d, &h) in dh.iter_mut().zip(h_out) {
                if h <= 0.0 {
                    *d = 0.0;
                }
            }
            dh = out.grads.encoder[li].backward_into(layer, &tr.acts[li], &dh);
        }
    }
    Ok(out)
}

const ROW_CHUNK: usize = 16;

/// Analytic loss and gradients of a composite loss.
pub fn loss_and_grads(params: &ModelParams, loss: &CompositeLoss) -> Result<(LossValue, Grads)> {
    loss_and_grads_with(Exec::default(), params, loss)
}

/// [`loss_and_grads`] with an explicit execution strategy. Rows are processed
/// in fixed-size chunks and chunk results are summed in order, so the output
/// does not depend on the strategy or thread count.
pub fn loss_and_grads_with(exec: Exec, params: &ModelParams, loss: &CompositeLoss) -> Result<(LossValue, Grads)> {
    let parts = par::map_chunks(exec, &loss.rows, ROW_CHUNK, |rows| {
        rows_loss_and_grads(params, loss, rows)
    });
    let mut value = LossValue::default();
    let mut grads = Grads::zeros_like(params);
    for p in parts {
        let p = p?;
        value.total += p.total;
        for g in 0..3 {
            value.group_mean[g] += p.group_sum[g];
        }
        grads.add_assign(&p.grads);
    }
    if !value.total.is_finite() {
        return Err(Error::Numeric {
            term: "total".into(),
            step: None,
        });
    }
    if !grads.all_finite() {
        return Err(Error::Numeric {
            term: "gradients".into(),
            step: None,
        });
    }
    Ok((value, grads))
}

/// Loss value plus a fingerprint of every ReLU on/off decision.
fn loss_with_pattern(params: &ModelParams, loss: &CompositeLoss) -> Result<(f64, Vec<bool>)> {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for row in &loss.rows {
        if row.terms.is_empty() {
            continue;
        }
        let tr = trace(params, &row.input)?;
        for (li, layer) in params.encoder.iter().enumerate() {
            let pre = layer.apply(&tr.acts[li]);
            pattern.extend(pre.iter().map(|&v| v > 0.0));
        }
        let z = tr.acts.last().unwrap();
        for term in &row.terms {
            let w = loss.coef(term.group) * loss.scale(term.group);
            if let Some((l, _, _)) = term_value(term, &tr.logits, z)? {
                total += w * l;
            }
        }
    }
    Ok((total, pattern))
}

const GRADCHECK_MAX_ENTRIES: usize = 400;
const GRADCHECK_MAX_KINKS: usize = 10;

/// Max relative error `|analytic − numeric| / max(1, |numeric|)` over a
/// sampled subset of trainable entries, using central differences.
///
/// An entry whose ±eps perturbation flips any ReLU is a kink; it is replaced
/// by another sample. More than ten kinks is an error.
pub fn finite_diff_check(params: &ModelParams, loss: &CompositeLoss, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::config("gradcheck.eps", "must be positive"));
    }
    let (_, grads) = loss_and_grads(params, loss)?;
    let analytic = grads.flat();
    let n = params.trainable_len();
    let mut rng = seed::rng(seed::stream_seed(0, seed::Stream::GradCheck));
    let mut order: Vec<usize> = if n <= GRADCHECK_MAX_ENTRIES {
        (0..n).collect()
    } else {
        sample(&mut rng, n, n).into_vec()
    };
    order.reverse();
    let (_, base_pattern) = loss_with_pattern(params, loss)?;
    let mut checked = 0;
    let mut kinks = 0;
    let mut max_err = 0.0f64;
    let mut probe = params.clone();
    while checked < GRADCHECK_MAX_ENTRIES.min(n) {
        let Some(i) = order.pop() else { break };
        let orig = *probe.trainable_entry_mut(i);
        *probe.trainable_entry_mut(i) = orig + eps;
        let (lp, pp) = loss_with_pattern(&probe, loss)?;
        *probe.trainable_entry_mut(i) = orig - eps;
        let (lm, pm) = loss_with_pattern(&probe, loss)?;
        *probe.trainable_entry_mut(i) = orig;
        if pp != base_pattern || pm != base_pattern {
            kinks += 1;
            if kinks > GRADCHECK_MAX_KINKS {
                return Err(Error::Kink(kinks));
            }
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
        checked += 1;
    }
    Ok(max_err)
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// SGD state: one velocity buffer per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub velocity: Grads,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl OptState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        OptState {
            velocity: Grads::zeros_like(params),
            lr,
            momentum,
            weight_decay,
            nesterov,
        }
    }
}

/// `v ← μv + (g + λp)`; then `p ← p − lr(g + λp + μv)` (Nesterov) or `p ← p − lr·v`.
pub fn sgd_step(params: &mut ModelParams, grads: &Grads, opt: &mut OptState) -> Result<()> {
    if grads.encoder.len() != params.encoder.len() || opt.velocity.encoder.len() != params.encoder.len() {
        return Err(Error::Shape {
            what: "optimizer layers",
            expected: params.encoder.len(),
            got: grads.encoder.len(),
        });
    }
    let (lr, mu, wd, nesterov) = (opt.lr, opt.momentum, opt.weight_decay, opt.nesterov);
    let param_tensors = params.encoder.iter_mut().chain(std::iter::once(&mut params.classifier));
    for ((p, g), v) in param_tensors.zip(grads.tensors()).zip(opt.velocity.tensors_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                what: "optimizer tensor",
                expected: p.len(),
                got: g.len(),
            });
        }
        for ((pi, &gi), vi) in p.entries_mut().zip(g.entries()).zip(v.entries_mut()) {
            let d = gi + wd * *pi;
            *vi = mu * *vi + d;
            if nesterov {
                *pi -= lr * (d + mu * *vi);
            } else {
                *pi -= lr * *vi;
            }
        }
    }
    Ok(())
}

/// `e ← ρe + (1−ρ)p` entry-wise.
pub fn ema_update(ema: &mut [Dense], params: &[Dense], rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("optim.rho", "EMA decay must lie in [0, 1]"));
    }
    if ema.len() != params.len() {
        return Err(Error::Shape {
            what: "EMA layers",
            expected: params.len(),
            got: ema.len(),
        });
    }
    for (e, p) in ema.iter_mut().zip(params) {
        if e.shape() != p.shape() {
            return Err(Error::Shape {
                what: "EMA tensor",
                expected: p.len(),
                got: e.len(),
            });
        }
        for (ei, &pi) in e.entries_mut().zip(p.entries()) {
            *ei = rho * *ei + (1.0 - rho) * pi;
        }
    }
    Ok(())
}
