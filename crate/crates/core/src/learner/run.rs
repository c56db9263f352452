use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::{pseudo_label_snapshot, train_step, StepMetrics, TrainState};
use crate::datagen::{generate_dataset, DatasetBundle};
use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::metrics::{self, evaluate_with, mean_defined, median_last_k, minority_classes, EvalReport, PlQualityReport};
use crate::par::Exec;
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: u64,
    pub eval: EvalReport,
    pub pl: PlQualityReport,
    /// Metrics of the training step that just finished, if any.
    pub train: Option<StepMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", content = "error", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

/// Medians over the last `median_k` evaluations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub balanced_acc_median: f64,
    pub per_class_acc: Vec<f64>,
    pub minority_acc_median: f64,
    /// Mean minority-class pseudo-label recall over all unlabeled samples.
    pub pl_recall_minority: Option<f64>,
    pub pl_precision_minority: Option<f64>,
    /// Same, restricted to mask-passing pseudo-labels.
    pub pl_recall_minority_masked: Option<f64>,
    pub pl_precision_minority_masked: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub history: Vec<EvalPoint>,
    pub summary: Summary,
    pub status: RunStatus,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn median_opt(values: impl Iterator<Item = Option<f64>>, k: usize) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    median_last_k(&v, k).ok()
}

impl Summary {
    pub fn from_history(history: &[EvalPoint], k_last: usize) -> Summary {
        let tail = &history[history.len().saturating_sub(k_last)..];
        let bal: Vec<f64> = history.iter().map(|p| p.eval.balanced_acc).collect();
        let minority_acc: Vec<f64> = history.iter().map(|p| p.eval.minority_acc).collect();
        let k = history.first().map_or(0, |p| p.eval.per_class_acc.len());
        let per_class_acc = (0..k)
            .map(|c| {
                let v: Vec<f64> = tail.iter().map(|p| p.eval.per_class_acc[c]).collect();
                median_last_k(&v, k_last).unwrap_or(f64::NAN)
            })
            .collect();
        let minority = minority_classes(k.max(2));
        let pick = |f: &dyn Fn(&EvalPoint) -> &Vec<Option<f64>>| {
            median_opt(tail.iter().map(|p| mean_defined(f(p), minority.clone())), k_last)
        };
        Summary {
            balanced_acc_median: median_last_k(&bal, k_last).unwrap_or(f64::NAN),
            minority_acc_median: median_last_k(&minority_acc, k_last).unwrap_or(f64::NAN),
            per_class_acc,
            pl_recall_minority: pick(&|p| &p.pl.all.recall),
            pl_precision_minority: pick(&|p| &p.pl.all.precision),
            pl_recall_minority_masked: pick(&|p| &p.pl.masked.recall),
            pl_precision_minority_masked: pick(&|p| &p.pl.masked.precision),
        }
    }
}

fn eval_point(
    state: &mut TrainState,
    data: &DatasetBundle,
    cfg: &RunConfig,
    exec: Exec,
    train: Option<StepMetrics>,
) -> Result<EvalPoint> {
    let eval = evaluate_with(exec, &state.model, &data.test, true)?;
    let preds = pseudo_label_snapshot(state, &data.unlabeled.inputs, &cfg.loss)?;
    let pl = metrics::pl_quality(&preds, data.hidden_labels(), data.num_classes())?;
    Ok(EvalPoint {
        step: state.t,
        eval,
        pl,
        train,
    })
}

/// Runs one full experiment: data generation, training with periodic
/// evaluation of the EMA model, and the median summary.
pub fn run_training(cfg: &RunConfig) -> Result<RunResult> {
    run_training_with(Exec::default(), cfg)
}

pub fn run_training_with(exec: Exec, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let data = generate_dataset(&cfg.dataset, seed::stream_seed(cfg.seed, Stream::Data))?;
    let mut state = TrainState::new(cfg, &data.labeled_counts)?.with_exec(exec);
    let mut history = vec![eval_point(&mut state, &data, cfg, exec, None)?];
    let b = cfg.optim.batch_size;
    let ub = b * cfg.optim.mu;
    let n_l = data.labeled.len();
    let n_u = data.unlabeled.inputs.len();
    let mut status = RunStatus::Ok;
    while state.t < cfg.total_steps {
        let labeled: Vec<_> = (0..b)
            .map(|_| data.labeled[state.rng.random_range(0..n_l)].clone())
            .collect();
        let unlabeled: Vec<_> = (0..ub)
            .map(|_| data.unlabeled.inputs[state.rng.random_range(0..n_u)].clone())
            .collect();
        let step = match train_step(&mut state, &labeled, &unlabeled, &cfg.loss, &cfg.augment) {
            Ok(m) => m,
            Err(e) => {
                status = RunStatus::Failed(e.to_string());
                break;
            }
        };
        if state.t % cfg.eval_interval == 0 {
            match eval_point(&mut state, &data, cfg, exec, Some(step)) {
                Ok(p) => history.push(p),
                Err(e) => {
                    status = RunStatus::Failed(e.to_string());
                    break;
                }
            }
        }
    }
    let summary = Summary::from_history(&history, cfg.median_k);
    Ok(RunResult {
        config: cfg.clone(),
        history,
        summary,
        status,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
