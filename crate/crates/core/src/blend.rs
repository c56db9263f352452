//! Empirical pseudo-label distribution and distribution-aware blending.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::check_distribution;

/// How `m̂` summarizes recent predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerMode {
    /// Counts over non-overlapping segments; `m̂` is refreshed at each boundary.
    Snapshot,
    /// `m̂` is refreshed every step from the last `segment_len` steps.
    Window,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelTracker {
    mode: TrackerMode,
    segment_len: usize,
    current_counts: Vec<u64>,
    steps_in_segment: usize,
    window: VecDeque<Vec<u64>>,
    m_hat: Vec<f64>,
    refreshes: u64,
}

impl PseudoLabelTracker {
    pub fn new(k: usize, segment_len: usize, mode: TrackerMode) -> Result<Self> {
        if k < 2 {
            return Err(Error::config("dataset.K", "need at least two classes"));
        }
        if segment_len == 0 {
            return Err(Error::config("tracker.segment_len", "must be positive"));
        }
        Ok(PseudoLabelTracker {
            mode,
            segment_len,
            current_counts: vec![0; k],
            steps_in_segment: 0,
            window: VecDeque::new(),
            m_hat: vec![1.0 / k as f64; k],
            refreshes: 0,
        })
    }

    pub fn m_hat(&self) -> &[f64] {
        &self.m_hat
    }

    pub fn current_counts(&self) -> &[u64] {
        &self.current_counts
    }

    /// Number of times `m̂` has been replaced.
    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Records one training step's hard predictions.
    pub fn record_predictions(&mut self, hard_preds: &[usize]) -> Result<()> {
        let k = self.m_hat.len();
        if let Some(&bad) = hard_preds.iter().find(|&&p| p >= k) {
            return Err(Error::Input(format!("prediction {bad} outside 0..{k}")));
        }
        match self.mode {
            TrackerMode::Snapshot => {
                for &p in hard_preds {
                    self.current_counts[p] += 1;
                }
                self.steps_in_segment += 1;
                if self.steps_in_segment == self.segment_len {
                    let counts = std::mem::replace(&mut self.current_counts, vec![0; k]);
                    self.refresh(&counts);
                    self.steps_in_segment = 0;
                }
            }
            TrackerMode::Window => {
                let mut step = vec![0u64; k];
                for &p in hard_preds {
                    step[p] += 1;
                }
                self.window.push_back(step);
                if self.window.len() > self.segment_len {
                    self.window.pop_front();
                }
                let mut counts = vec![0u64; k];
                for s in &self.window {
                    for (c, v) in counts.iter_mut().zip(s) {
                        *c += v;
                    }
                }
                self.current_counts = counts.clone();
                self.refresh(&counts);
            }
        }
        Ok(())
    }

    fn refresh(&mut self, counts: &[u64]) {
        let total: u64 = counts.iter().sum();
        if total > 0 {
            self.m_hat = counts.iter().map(|&c| c as f64 / total as f64).collect();
            self.refreshes += 1;
        }
    }
}

/// `υ_k = m̂_k^{1/T} / max_j m̂_j^{1/T}`, with `0^{1/T} = 0`.
pub fn blend_weights(m_hat: &[f64], t_dist: f64) -> Result<Vec<f64>> {
    if !(t_dist > 0.0) || !t_dist.is_finite() {
        return Err(Error::config("tracker.T_dist", "temperature must be positive"));
    }
    let scaled: Vec<f64> = m_hat
        .iter()
        .map(|&m| if m <= 0.0 { 0.0 } else { m.powf(1.0 / t_dist) })
        .collect();
    let max = scaled.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Contract("pseudo-label distribution is all zero".into()));
    }
    Ok(scaled.into_iter().map(|v| v / max).collect())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `p̂′ = (1 − υ_{k′}) p̂ + υ_{k′} q̂` with `k′ = argmax p̂`.
pub fn blend(p_hat: &[f64], q_hat: &[f64], upsilon: &[f64]) -> Result<Vec<f64>> {
    if p_hat.len() != q_hat.len() || p_hat.len() != upsilon.len() {
        return Err(Error::Shape {
            what: "blend inputs",
            expected: p_hat.len(),
            got: q_hat.len().min(upsilon.len()),
        });
    }
    check_distribution(p_hat, "linear pseudo-label")?;
    check_distribution(q_hat, "semantic pseudo-label")?;
    let w = upsilon[argmax(p_hat)];
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Contract(format!("blend weight {w} outside [0, 1]")));
    }
    Ok(p_hat.iter().zip(q_hat).map(|(p, q)| (1.0 - w) * p + w * q).collect())
}
