//! Multi-run suites: the ablation arm matrix, cartesian sweeps and the
//! aggregate report over finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use toml::Value;

use super::config::RunConfig;
use super::output::{self, SummaryFile, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::learner::{run_training_with, LearnerMode};
use crate::metrics::mean_std;
use crate::par::{self, Exec};

/// One labeled configuration inside a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: RunConfig,
}

/// The fixed ablation matrix, each arm derived from `base`.
pub fn ablation_arms(base: &RunConfig) -> Vec<Arm> {
    let daso = {
        let mut c = base.clone();
        c.loss.learner_mode = LearnerMode::FixmatchDaso;
        c
    };
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut config = daso.clone();
        f(&mut config);
        Arm {
            label: label.to_string(),
            config,
        }
    };
    vec![
        with("daso", &|_| {}),
        with("fixmatch", &|c| c.loss.learner_mode = LearnerMode::Fixmatch),
        with("blend_const_0", &|c| c.loss.learner_mode = LearnerMode::BlendConst(0.0)),
        with("blend_const_1", &|c| c.loss.learner_mode = LearnerMode::BlendConst(1.0)),
        with("blend_const_0.5", &|c| {
            c.loss.learner_mode = LearnerMode::BlendConst(0.5)
        }),
        with("no_align", &|c| c.loss.lambda_align = 0.0),
        with("unbalanced_queue", &|c| c.bank.balanced_queue = false),
        with("no_ema_encoder", &|c| c.bank.use_ema_encoder = false),
    ]
}

/// Expands `base` over seeds `0..seeds` (offset by the base seed).
pub fn with_seeds(arms: Vec<Arm>, seeds: u64) -> Vec<Arm> {
    arms.into_iter()
        .flat_map(|arm| {
            (0..seeds).map(move |i| {
                let mut config = arm.config.clone();
                config.seed = arm.config.seed + i;
                Arm {
                    label: arm.label.clone(),
                    config,
                }
            })
        })
        .collect()
}

fn flatten_grid(table: &toml::Table, prefix: &str, out: &mut Vec<(String, Vec<Value>)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten_grid(t, &key, out)?,
            Value::Array(a) if !a.is_empty() => out.push((key, a.clone())),
            _ => return Err(Error::config(key, "grid entries must be non-empty arrays")),
        }
    }
    Ok(())
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a grid file (dotted keys or nested tables mapping to value lists)
/// and returns one arm per point of the cartesian product, in key order.
pub fn sweep_arms(base: &RunConfig, grid_text: &str) -> Result<Vec<Arm>> {
    let table: toml::Table = grid_text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<grid>", e.message().to_string()))?;
    let mut axes = Vec::new();
    flatten_grid(&table, "", &mut axes)?;
    if axes.is_empty() {
        return Err(Error::config("<grid>", "no axes declared"));
    }
    let mut arms = vec![Arm {
        label: String::new(),
        config: base.clone(),
    }];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(arms.len() * values.len());
        for arm in &arms {
            for v in values {
                let config = arm.config.with_override(key, v.clone())?;
                let part = format!("{key}={}", value_label(v));
                let label = if arm.label.is_empty() {
                    part
                } else {
                    format!("{},{part}", arm.label)
                };
                next.push(Arm { label, config });
            }
        }
        arms = next;
    }
    Ok(arms)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._=-,".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Where a suite arm's run directory lives under `root`.
pub fn arm_dir(root: &Path, arm: &Arm) -> PathBuf {
    root.join(sanitize(&arm.label)).join(format!("seed{}", arm.config.seed))
}

/// Runs every arm with at most `jobs` concurrent runs (each run internally
/// sequential) and writes one directory per run. Returns the summaries in
/// arm order; failed runs are recorded, not propagated.
pub fn run_suite(root: &Path, arms: Vec<Arm>, jobs: usize) -> Result<Vec<SummaryFile>> {
    let results = par::run_jobs(Exec::default(), jobs.max(1), arms, |arm| -> Result<SummaryFile> {
        let result = run_training_with(Exec::Sequential, &arm.config)?;
        output::write_run_dir(&arm_dir(root, &arm), &arm.label, &result)?;
        Ok(SummaryFile::new(&arm.label, &result))
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let table = comparison_table(&summaries);
    output::write_atomic(&root.join("table.md"), table.as_bytes())?;
    Ok(summaries)
}

/// Recursively collects `summary.json` files under each path.
pub fn collect_summaries(paths: &[PathBuf]) -> Result<Vec<SummaryFile>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.is_file() {
            if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
                out.push(p.to_path_buf());
            }
            return Ok(());
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Input(format!("`{}` does not exist", p.display())));
        }
        walk(p, &mut files)?;
    }
    files.iter().map(|f| SummaryFile::load(f)).collect()
}

fn fmt_mean_std(values: &[f64], scale: f64) -> String {
    if values.is_empty() {
        return "n/a".into();
    }
    let (m, s) = mean_std(values);
    format!("{:.2} ± {:.2}", m * scale, s * scale)
}

/// Markdown table of mean ± std per label, labels in first-seen order.
/// Accuracies are in percent; only runs with status `ok` count.
pub fn comparison_table(summaries: &[SummaryFile]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&SummaryFile>> = BTreeMap::new();
    for s in summaries {
        if !groups.contains_key(s.label.as_str()) {
            order.push(&s.label);
        }
        groups.entry(&s.label).or_default().push(s);
    }
    let mut out = String::from(
        "| arm | runs | failed | balanced acc | minority acc | PL recall (minority) | PL precision (minority) |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for label in order {
        let runs = &groups[label];
        let ok: Vec<_> = runs.iter().filter(|s| s.status == "ok").collect();
        let col = |f: &dyn Fn(&SummaryFile) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|s| f(s)).collect();
            fmt_mean_std(&v, 100.0)
        };
        let _ = writeln!(
            out,
            "| {label} | {} | {} | {} | {} | {} | {} |",
            runs.len(),
            runs.len() - ok.len(),
            col(&|s| Some(s.balanced_acc_median20)),
            col(&|s| Some(s.minority_acc_median)),
            col(&|s| s.pl_recall_minority),
            col(&|s| s.pl_precision_minority),
        );
    }
    out
}
