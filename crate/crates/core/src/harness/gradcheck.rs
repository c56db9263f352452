//! The fixed gradient-check problem: a small MLP under every loss term the
//! learners use (logit-adjusted CE, soft-target CE, squared probability
//! error and the cosine-classifier CE), all groups active at once.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::{
    finite_diff_check, init_model, softmax, CompositeLoss, CosineHead, LossGroup, ModelParams, Term, TermKind,
};
use crate::seed::{self, Stream};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub params: usize,
    pub secs: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn random_probs(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    softmax(&logits)
}

/// Builds the check problem from `seed`.
pub fn problem(seed: u64) -> Result<(ModelParams, CompositeLoss)> {
    const K: usize = 4;
    const D: usize = 6;
    let model = init_model(&[4, 8, D], K, seed::mix(seed, &[Stream::GradCheck as u64, 1]))?;
    let mut rng = seed::rng(seed::mix(seed, &[Stream::GradCheck as u64, 2]));
    let input =
        |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..4).map(|_| StandardNormal.sample(rng)).collect() };
    let protos: Vec<Vec<f64>> = (0..K)
        .map(|_| (0..D).map(|_| rng.random_range(0.05..1.0)).collect())
        .collect();
    let head = Arc::new(CosineHead::new(&protos, 0.05)?);
    let offset: Arc<[f64]> = Arc::from([20.0f64, 8.0, 3.0, 1.0].map(f64::ln));

    let (n_l, n_u) = (6, 8);
    let mut loss = CompositeLoss::new();
    loss.declare(LossGroup::Cls, 1.0, n_l)
        .declare(LossGroup::Unsup, 1.0, n_u)
        .declare(LossGroup::Align, 1.0, n_u);
    for i in 0..n_l {
        let mut target = vec![0.0; K];
        target[i % K] = 1.0;
        let x = input(&mut rng);
        loss.push(
            x,
            vec![Term {
                group: LossGroup::Cls,
                kind: TermKind::Ce {
                    target,
                    offset: Some(offset.clone()),
                },
            }],
        );
    }
    for i in 0..n_u {
        let x = input(&mut rng);
        let unsup = if i % 2 == 0 {
            TermKind::Ce {
                target: random_probs(&mut rng, K),
                offset: None,
            }
        } else {
            TermKind::ProbSq {
                target: random_probs(&mut rng, K),
            }
        };
        let align = TermKind::SemanticCe {
            target: random_probs(&mut rng, K),
            head: head.clone(),
        };
        loss.push(
            x,
            vec![
                Term {
                    group: LossGroup::Unsup,
                    kind: unsup,
                },
                Term {
                    group: LossGroup::Align,
                    kind: align,
                },
            ],
        );
    }
    Ok((model, loss))
}

pub fn run_gradcheck(eps: f64) -> Result<GradcheckReport> {
    let started = Instant::now();
    let (model, loss) = problem(0)?;
    let max_rel_err = finite_diff_check(&model, &loss, eps)?;
    Ok(GradcheckReport {
        max_rel_err,
        params: model.trainable_len(),
        secs: started.elapsed().as_secs_f64(),
    })
}
