//! Metrics over attempt records, JSON Lines results, and review bundles for plausible patches.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use similar::TextDiff;
use thiserror::Error;

use crate::orchestrator::{AttemptError, AttemptRecord, AttemptSink, TaskRun};
use crate::task::{RepairTask, RunConfig};
use crate::validation::Classification;

pub const RESULTS_FILE: &str = "attempts.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REVIEW_DIR: &str = "review";

/// What the metrics need to know about one attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttemptSummary {
    pub classification: Option<Classification>,
    /// The model answered: a candidate was produced or extraction failed.
    pub counted: bool,
}

impl From<&AttemptRecord> for AttemptSummary {
    fn from(r: &AttemptRecord) -> Self {
        Self {
            classification: r.classification(),
            counted: r.candidate.is_some() || matches!(r.error, Some(AttemptError::Extraction(_))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    /// Attempts in the denominator, see [`AttemptSummary::counted`].
    pub attempts_total: usize,
    pub attempts_compilable: usize,
    pub attempts_plausible: usize,
    /// Attempts lost to gateway errors; not in `attempts_total`.
    pub attempts_failed_to_query: usize,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tasks: Vec<TaskMetrics>,
    pub attempts_total: usize,
    pub attempts_compilable: usize,
    pub attempts_plausible: usize,
    pub compilable_pct: f64,
    pub plausible_pct: f64,
    /// No attempt reached the denominator; both percentages are 0.
    pub empty: bool,
    pub tasks_passed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl RunReport {
    pub fn with_meta(mut self, config: &RunConfig, wall_clock_ms: u64) -> Self {
        self.config = Some(config.clone());
        self.wall_clock_ms = Some(wall_clock_ms);
        self
    }

    /// `plausible/compilable` percentages, one decimal each.
    pub fn headline(&self) -> String {
        format!("{:.1}/{:.1}", self.plausible_pct, self.compilable_pct)
    }
}

pub struct TaskSummary<'a> {
    pub task_id: &'a str,
    pub attempts: Vec<AttemptSummary>,
    pub error: Option<String>,
}

fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

pub fn metrics_from_summaries(tasks: &[TaskSummary<'_>]) -> RunReport {
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        let counted: Vec<_> = t.attempts.iter().filter(|a| a.counted).collect();
        let compilable = counted
            .iter()
            .filter(|a| a.classification.is_some_and(Classification::compiles))
            .count();
        let plausible = counted
            .iter()
            .filter(|a| a.classification == Some(Classification::Plausible))
            .count();
        out.push(TaskMetrics {
            task_id: t.task_id.to_string(),
            attempts_total: counted.len(),
            attempts_compilable: compilable,
            attempts_plausible: plausible,
            attempts_failed_to_query: t.attempts.len() - counted.len(),
            pass: plausible > 0,
            error: t.error.clone(),
        });
    }
    let total: usize = out.iter().map(|t| t.attempts_total).sum();
    let compilable: usize = out.iter().map(|t| t.attempts_compilable).sum();
    let plausible: usize = out.iter().map(|t| t.attempts_plausible).sum();
    RunReport {
        tasks_passed: out.iter().filter(|t| t.pass).count(),
        tasks: out,
        attempts_total: total,
        attempts_compilable: compilable,
        attempts_plausible: plausible,
        compilable_pct: pct(compilable, total),
        plausible_pct: pct(plausible, total),
        empty: total == 0,
        config: None,
        wall_clock_ms: None,
    }
}

/// Compilable and plausible percentages over all attempts in which the model answered.
pub fn compute_metrics(runs: &[TaskRun]) -> RunReport {
    let summaries: Vec<TaskSummary<'_>> = runs
        .iter()
        .map(|run| match &run.result {
            Ok(records) => TaskSummary {
                task_id: &run.task_id,
                attempts: records.iter().map(AttemptSummary::from).collect(),
                error: None,
            },
            Err(e) => TaskSummary {
                task_id: &run.task_id,
                attempts: Vec::new(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    metrics_from_summaries(&summaries)
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `attempts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub task_id: String,
    pub temperature: f64,
    pub attempt_index: u32,
    pub classification: Option<Classification>,
    pub candidate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<AttemptError>,
    pub llm_calls: u32,
    pub prompt_digests: Vec<String>,
}

impl ResultLine {
    pub fn new(task_id: &str, r: &AttemptRecord) -> Self {
        Self {
            task_id: task_id.to_string(),
            temperature: r.temperature,
            attempt_index: r.attempt_index,
            classification: r.classification(),
            candidate: r.candidate.is_some(),
            error: r.error.clone(),
            llm_calls: r.llm_calls,
            prompt_digests: r.request_digests.clone(),
        }
    }

    fn summary(&self) -> AttemptSummary {
        AttemptSummary {
            classification: self.classification,
            counted: self.candidate || matches!(self.error, Some(AttemptError::Extraction(_))),
        }
    }
}

/// Streams attempts to a JSON Lines file as they complete.
pub struct JsonlSink {
    out: Mutex<BufWriter<fs::File>>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self, ReportError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl AttemptSink for JsonlSink {
    fn record(&self, task_id: &str, attempt: &AttemptRecord) {
        let line = serde_json::to_string(&ResultLine::new(task_id, attempt)).expect("serializes");
        let mut out = self.out.lock().unwrap();
        if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
            log::warn!("could not append attempt of task {task_id} to the stream log");
        }
    }
}

fn guard(path: &Path, force: bool) -> Result<(), ReportError> {
    if path.exists() && !force {
        return Err(ReportError::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// Writes `attempts.jsonl` (one line per attempt, in task order) and `summary.json` into `dir`.
pub fn export_results(
    report: &RunReport,
    runs: &[TaskRun],
    dir: &Path,
    force: bool,
) -> Result<(), ReportError> {
    let results = dir.join(RESULTS_FILE);
    let summary = dir.join(SUMMARY_FILE);
    guard(&results, force)?;
    guard(&summary, force)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = BufWriter::new(fs::File::create(&results).map_err(io_err(&results))?);
    for run in runs {
        for record in run.result.iter().flatten() {
            let line =
                serde_json::to_string(&ResultLine::new(&run.task_id, record)).expect("serializes");
            writeln!(out, "{line}").map_err(io_err(&results))?;
        }
    }
    out.flush().map_err(io_err(&results))?;
    let text = serde_json::to_string_pretty(report).expect("serializes");
    fs::write(&summary, text + "\n").map_err(io_err(&summary))
}

pub fn read_result_lines(path: &Path) -> Result<Vec<ResultLine>, ReportError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReportError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Recomputes the report from `attempts.jsonl` in `dir`.
///
/// Task order, task-level errors, config echo and wall-clock come from `summary.json` when it is
/// present; the metrics themselves are always recomputed from the attempt lines.
pub fn load_results(dir: &Path) -> Result<RunReport, ReportError> {
    let lines = read_result_lines(&dir.join(RESULTS_FILE))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let stored: Option<RunReport> = if summary_path.exists() {
        let text = fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
        Some(serde_json::from_str(&text).map_err(|e| ReportError::Parse {
            path: summary_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?)
    } else {
        None
    };

    let mut order: Vec<(String, Option<String>)> = stored
        .as_ref()
        .map(|s| {
            s.tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.error.clone()))
                .collect()
        })
        .unwrap_or_default();
    for l in &lines {
        if !order.iter().any(|(id, _)| id == &l.task_id) {
            order.push((l.task_id.clone(), None));
        }
    }
    let summaries: Vec<TaskSummary<'_>> = order
        .iter()
        .map(|(id, error)| TaskSummary {
            task_id: id,
            attempts: lines
                .iter()
                .filter(|l| &l.task_id == id)
                .map(ResultLine::summary)
                .collect(),
            error: error.clone(),
        })
        .collect();
    let mut report = metrics_from_summaries(&summaries);
    if let Some(s) = stored {
        report.config = s.config;
        report.wall_clock_ms = s.wall_clock_ms;
    }
    Ok(report)
}

fn validation_log(record: &AttemptRecord) -> String {
    let mut log = String::new();
    for stage in record.outcome.iter().flat_map(|o| &o.stages) {
        log.push_str(&format!(
            "== {} (exit {}, {} ms{}) ==\n--- stdout ---\n{}\n--- stderr ---\n{}\n",
            stage.stage.as_str(),
            stage.exit_code,
            stage.duration_ms,
            if stage.timed_out { ", timed out" } else { "" },
            stage.stdout,
            stage.stderr
        ));
    }
    log
}

fn ensure_trailing_newline(s: &str) -> String {
    if s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}

/// Writes one directory per plausible patch under `dir/review`.
///
/// Each holds the original function, the patched function, a unified diff between them, the
/// model's reasoning, and the validation logs.
pub fn export_review_bundle(
    tasks: &[RepairTask],
    runs: &[TaskRun],
    dir: &Path,
    force: bool,
) -> Result<Vec<PathBuf>, ReportError> {
    let root = dir.join(REVIEW_DIR);
    if root.exists() {
        if !force {
            return Err(ReportError::Exists(root));
        }
        fs::remove_dir_all(&root).map_err(io_err(&root))?;
    }
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    let mut written = Vec::new();
    for run in runs {
        let Ok(records) = &run.result else { continue };
        let Some(task) = tasks.iter().find(|t| t.id == run.task_id) else {
            continue;
        };
        let ext = task.language_hint.file_extension();
        let original = task
            .read_function_source()
            .map_err(io_err(&task.vulnerable_path()))?;
        for record in records.iter().filter(|r| r.is_plausible()) {
            let candidate = record
                .candidate
                .as_ref()
                .expect("plausible implies candidate");
            let name = format!(
                "{}-t{:.2}-a{}",
                task.id.replace(['/', '\\'], "_"),
                record.temperature,
                record.attempt_index
            );
            let bundle = root.join(name);
            fs::create_dir_all(&bundle).map_err(io_err(&bundle))?;
            let original = ensure_trailing_newline(&original);
            let patched = ensure_trailing_newline(&candidate.code);
            let diff = TextDiff::from_lines(&original, &patched)
                .unified_diff()
                .header(
                    &format!("a/{}", task.vulnerable_file.display()),
                    &format!("b/{}", task.vulnerable_file.display()),
                )
                .to_string();
            let files = [
                (format!("original.{ext}"), original.clone()),
                (format!("patched.{ext}"), patched),
                ("patch.diff".to_string(), diff),
                (
                    "reasoning.txt".to_string(),
                    record.reasoning.clone().unwrap_or_default(),
                ),
                ("validation.log".to_string(), validation_log(record)),
            ];
            for (file, body) in files {
                let path = bundle.join(file);
                fs::write(&path, body).map_err(io_err(&path))?;
            }
            written.push(bundle);
        }
    }
    Ok(written)
}
