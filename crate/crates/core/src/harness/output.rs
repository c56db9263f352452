//! Run directories: config echo, long-format metrics, summary, status and
//! timing metadata. Every file is written to a temporary sibling and renamed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::learner::{RunResult, RunStatus};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DASO_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STATUS_FILE: &str = "status";
pub const METADATA_FILE: &str = "metadata.json";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub label: String,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub balanced_acc_median20: f64,
    pub per_class_acc: Vec<f64>,
    pub minority_acc_median: f64,
    pub pl_recall_minority: Option<f64>,
    pub pl_precision_minority: Option<f64>,
    pub pl_recall_minority_masked: Option<f64>,
    pub pl_precision_minority_masked: Option<f64>,
    pub config_echo: serde_json::Value,
}

impl SummaryFile {
    pub fn new(label: &str, result: &RunResult) -> Self {
        let (status, error) = match &result.status {
            RunStatus::Ok => ("ok".to_string(), None),
            RunStatus::Failed(e) => ("failed".to_string(), Some(e.clone())),
        };
        let s = &result.summary;
        SummaryFile {
            label: label.to_string(),
            seed: result.config.seed,
            status,
            error,
            balanced_acc_median20: s.balanced_acc_median,
            per_class_acc: s.per_class_acc.clone(),
            minority_acc_median: s.minority_acc_median,
            pl_recall_minority: s.pl_recall_minority,
            pl_precision_minority: s.pl_precision_minority,
            pl_recall_minority_masked: s.pl_recall_minority_masked,
            pl_precision_minority_masked: s.pl_precision_minority_masked,
            config_echo: serde_json::to_value(&result.config).expect("config serializes"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

fn push_row(out: &mut String, step: u64, metric: &str, class: Option<usize>, value: f64) {
    let class = class.map(|c| c.to_string()).unwrap_or_default();
    let _ = writeln!(out, "{step},{metric},{class},{value}");
}

fn push_classes(out: &mut String, step: u64, metric: &str, values: &[f64]) {
    for (c, &v) in values.iter().enumerate() {
        push_row(out, step, metric, Some(c), v);
    }
}

fn push_optional(out: &mut String, step: u64, metric: &str, values: &[Option<f64>]) {
    for (c, v) in values.iter().enumerate() {
        if let Some(v) = v {
            push_row(out, step, metric, Some(c), *v);
        }
    }
}

/// Long-format metric history: one `step,metric,class,value` row per value.
/// Undefined ratios are omitted; `class` is empty for scalar metrics.
pub fn metrics_csv(result: &RunResult) -> String {
    let mut out = String::from("step,metric,class,value\n");
    for p in &result.history {
        let s = p.step;
        let e = &p.eval;
        push_row(&mut out, s, "balanced_acc", None, e.balanced_acc);
        push_row(&mut out, s, "overall_acc", None, e.overall_acc);
        push_row(&mut out, s, "minority_acc", None, e.minority_acc);
        push_classes(&mut out, s, "test_acc", &e.per_class_acc);
        push_row(&mut out, s, "pl_coverage", None, p.pl.coverage);
        push_optional(&mut out, s, "pl_recall", &p.pl.all.recall);
        push_optional(&mut out, s, "pl_precision", &p.pl.all.precision);
        push_optional(&mut out, s, "pl_rel_size", &p.pl.all.rel_size);
        push_optional(&mut out, s, "pl_recall_masked", &p.pl.masked.recall);
        push_optional(&mut out, s, "pl_precision_masked", &p.pl.masked.precision);
        if let Some(t) = &p.train {
            push_row(&mut out, s, "loss_total", None, t.loss_total);
            push_row(&mut out, s, "loss_cls", None, t.loss_cls);
            push_row(&mut out, s, "loss_u", None, t.loss_u);
            push_row(&mut out, s, "loss_align", None, t.loss_align);
            push_row(&mut out, s, "lambda_u", None, t.lambda_u);
            push_row(&mut out, s, "mask_rate", None, t.mask_rate);
            push_row(&mut out, s, "blend_rate", None, t.blend_rate);
            push_row(
                &mut out,
                s,
                "align_active",
                None,
                if t.align_active { 1.0 } else { 0.0 },
            );
            push_classes(&mut out, s, "m_hat", &t.m_hat);
            push_classes(&mut out, s, "upsilon", &t.upsilon);
        }
    }
    out
}

#[derive(Serialize)]
struct Metadata<'a> {
    label: &'a str,
    started_unix_secs: f64,
    finished_unix_secs: f64,
    wall_clock_secs: f64,
    crate_version: &'a str,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes the five run files into `dir`, creating it if needed.
/// `status` is written last so its presence marks a complete directory.
pub fn write_run_dir(dir: &Path, label: &str, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), result.config.to_toml().as_bytes())?;
    write_atomic(&dir.join(METRICS_FILE), metrics_csv(result).as_bytes())?;
    let summary = SummaryFile::new(label, result);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join(SUMMARY_FILE), format!("{json}\n").as_bytes())?;
    let finished = unix_now();
    let meta = Metadata {
        label,
        started_unix_secs: finished - result.wall_clock_secs,
        finished_unix_secs: finished,
        wall_clock_secs: result.wall_clock_secs,
        crate_version: env!("CARGO_PKG_VERSION"),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write_atomic(&dir.join(METADATA_FILE), format!("{json}\n").as_bytes())?;
    let status = match &result.status {
        RunStatus::Ok => "ok\n".to_string(),
        RunStatus::Failed(e) => format!("failed: {e}\n"),
    };
    write_atomic(&dir.join(STATUS_FILE), status.as_bytes())
}

/// Directory name for a run of `config` without an explicit output path.
pub fn run_dir_name(stem: &str, config: &RunConfig) -> String {
    format!("{stem}_seed{}", config.seed)
}
