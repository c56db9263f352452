//! Per-class feature queues, prototypes and the cosine-similarity classifier.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::CosineHead;

/// Which encoder produced a feature batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    EmaEncoder,
    OnlineEncoder,
}

/// Features tagged with the encoder that produced them. They are plain
/// values: nothing downstream can push gradients back through them.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub features: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    queues: Vec<VecDeque<Vec<f64>>>,
    capacities: Vec<usize>,
    temperature: f64,
    require_ema: bool,
    cache: Option<Vec<Option<Vec<f64>>>>,
}

impl PrototypeBank {
    /// `k` queues of equal capacity `l`.
    pub fn balanced(k: usize, l: usize, temperature: f64) -> Result<Self> {
        Self::with_capacities(vec![l; k], temperature)
    }

    /// Queue sizes proportional to class frequency (`l · n_k / max n`, at
    /// least one). Used only for the unbalanced-queue ablation.
    pub fn proportional(label_counts: &[usize], l: usize, temperature: f64) -> Result<Self> {
        let max = label_counts.iter().copied().max().unwrap_or(0).max(1);
        let caps = label_counts
            .iter()
            .map(|&n| ((l * n) as f64 / max as f64).round().max(1.0) as usize)
            .collect();
        Self::with_capacities(caps, temperature)
    }

    fn with_capacities(capacities: Vec<usize>, temperature: f64) -> Result<Self> {
        if capacities.len() < 2 {
            return Err(Error::config("dataset.K", "need at least two classes"));
        }
        if capacities.contains(&0) {
            return Err(Error::config("bank.L", "queue capacity must be positive"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::config("bank.T_proto", "temperature must be positive"));
        }
        Ok(PrototypeBank {
            queues: vec![VecDeque::new(); capacities.len()],
            capacities,
            temperature,
            require_ema: true,
            cache: None,
        })
    }

    /// Accept features from the online encoder (no-EMA ablation).
    pub fn allow_online_features(mut self) -> Self {
        self.require_ema = false;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self, class: usize) -> usize {
        self.capacities[class]
    }

    pub fn queue(&self, class: usize) -> impl Iterator<Item = &Vec<f64>> {
        self.queues[class].iter()
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn is_warm(&self) -> bool {
        self.queues.iter().all(|q| !q.is_empty())
    }

    pub fn enqueue_labeled(&mut self, batch: &FeatureBatch, labels: &[usize]) -> Result<()> {
        if self.require_ema && batch.provenance != Provenance::EmaEncoder {
            return Err(Error::Contract(
                "prototype features must come from the EMA encoder".into(),
            ));
        }
        if batch.features.len() != labels.len() {
            return Err(Error::Shape {
                what: "labeled feature batch",
                expected: labels.len(),
                got: batch.features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.queues.len()) {
            return Err(Error::Input(format!("label {bad} outside 0..{}", self.queues.len())));
        }
        if labels.is_empty() {
            return Ok(());
        }
        for (z, &y) in batch.features.iter().zip(labels) {
            let q = &mut self.queues[y];
            q.push_back(z.clone());
            while q.len() > self.capacities[y] {
                q.pop_front();
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Queue means; `None` marks a class with an empty queue.
    pub fn prototypes(&mut self) -> &[Option<Vec<f64>>] {
        if self.cache.is_none() {
            self.cache = Some(self.queues.iter().map(queue_mean).collect());
        }
        self.cache.as_deref().unwrap()
    }

    /// Cosine classifier over the current prototypes.
    pub fn head(&mut self) -> Result<CosineHead> {
        let t = self.temperature;
        let protos = self
            .prototypes()
            .iter()
            .enumerate()
            .map(|(k, c)| c.clone().ok_or(Error::WarmupIncomplete(k)))
            .collect::<Result<Vec<_>>>()?;
        CosineHead::new(&protos, t)
    }

    pub fn shared_head(&mut self) -> Result<Arc<CosineHead>> {
        self.head().map(Arc::new)
    }
}

fn queue_mean(q: &VecDeque<Vec<f64>>) -> Option<Vec<f64>> {
    let first = q.front()?;
    let mut m = vec![0.0; first.len()];
    for z in q {
        for (a, b) in m.iter_mut().zip(z) {
            *a += b;
        }
    }
    let n = q.len() as f64;
    for a in m.iter_mut() {
        *a /= n;
    }
    Some(m)
}

/// `q = softmax_k(cos(z, c_k) / T_proto)` over the bank's prototypes.
pub fn semantic_probs(z: &[f64], bank: &mut PrototypeBank) -> Result<Vec<f64>> {
    bank.head()?.probs(z)
}
