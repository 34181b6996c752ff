//! Turning failed validation stages into the short error excerpt sent back to the model.
//!
//! Each stage has its own extraction rule:
//!
//! * compile errors are parsed from the compiler output and kept when they fall within
//!   [`PROXIMITY_RADIUS`] lines of a vulnerable line;
//! * functional failures are reduced to the names of the failing tests, captured by the task's
//!   `test_failure_pattern`;
//! * security failures are reduced to the head of the sanitizer report.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patching::patched_line_count;
use crate::task::{LineSpan, RepairTask};
use crate::validation::{Classification, Stage, StageResult, ValidationOutcome};

pub const PROXIMITY_RADIUS: usize = 100;
pub const SANITIZER_EXCERPT_LINES: usize = 40;
pub const EXTRACTION_FAILURE_MESSAGE: &str = "Your previous response contained no code block.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilerDiagnostic {
    pub file: String,
    pub line: usize,
    pub severity: Severity,
    pub message: String,
}

impl CompilerDiagnostic {
    fn render(&self) -> String {
        let severity = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
            Severity::Note => "note",
        };
        format!("{}:{}: {severity}: {}", self.file, self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    Compile,
    Functional,
    Security,
    Extraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub source: FeedbackSource,
    pub excerpt: String,
}

impl FeedbackMessage {
    pub fn extraction_failure() -> Self {
        Self {
            source: FeedbackSource::Extraction,
            excerpt: EXTRACTION_FAILURE_MESSAGE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedbackError {
    #[error("invalid test_failure_pattern: {0}")]
    BadPattern(String),
    #[error("test_failure_pattern has no capture group")]
    NoCaptureGroup,
    #[error("feedback requested for a plausible outcome")]
    Plausible,
}

fn diagnostic_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?P<file>[^:\s][^:]*):(?P<line>\d+):(?:(?P<col>\d+):)?\s*(?P<sev>fatal error|error|warning|note):\s?(?P<msg>.*)$",
        )
        .unwrap()
    })
}

/// Parses GCC/Clang/javac style `file:line[:col]: severity: message` diagnostics.
///
/// Lines that do not start a diagnostic are appended to the preceding one.
pub fn parse_compiler_diagnostics(stderr: &str) -> Vec<CompilerDiagnostic> {
    let mut out: Vec<CompilerDiagnostic> = Vec::new();
    for raw in stderr.lines() {
        let line = raw.trim_end_matches('\r');
        if let Some(caps) = diagnostic_re().captures(line) {
            let number: usize = caps["line"].parse().unwrap_or(0);
            if number >= 1 {
                let severity = match &caps["sev"] {
                    "warning" => Severity::Warning,
                    "note" => Severity::Note,
                    _ => Severity::Error,
                };
                out.push(CompilerDiagnostic {
                    file: caps["file"].to_string(),
                    line: number,
                    severity,
                    message: caps["msg"].to_string(),
                });
                continue;
            }
        }
        if let Some(last) = out.last_mut() {
            if !line.trim().is_empty() {
                last.message.push('\n');
                last.message.push_str(line);
            }
        }
    }
    out
}

/// Keeps errors within `radius` lines of any vulnerable line, in order.
///
/// If that leaves nothing but at least one error exists, the first error is returned alone.
pub fn filter_by_proximity(
    diags: &[CompilerDiagnostic],
    vulnerable_lines: &[usize],
    radius: usize,
) -> Vec<CompilerDiagnostic> {
    let near = |d: &CompilerDiagnostic| {
        vulnerable_lines
            .iter()
            .any(|&v| d.line.abs_diff(v) <= radius)
    };
    let kept: Vec<CompilerDiagnostic> = diags
        .iter()
        .filter(|d| d.severity == Severity::Error && near(d))
        .cloned()
        .collect();
    if kept.is_empty() {
        diags
            .iter()
            .find(|d| d.severity == Severity::Error)
            .cloned()
            .into_iter()
            .collect()
    } else {
        kept
    }
}

/// Maps original-file vulnerable lines into the patched file.
///
/// Lines after the span move by the change in span length; lines inside it are clamped to the
/// (possibly shorter) replacement.
pub fn remap_vulnerable_lines(lines: &[usize], span: LineSpan, new_len: usize) -> Vec<usize> {
    let new_len = new_len.max(1);
    let new_end = span.start_line + new_len - 1;
    lines
        .iter()
        .map(|&l| {
            if l > span.end_line {
                l + new_end - span.end_line
            } else if l >= span.start_line {
                l.min(new_end)
            } else {
                l
            }
        })
        .collect()
}

/// Ordered, de-duplicated group-1 captures of `pattern` over `log`.
pub fn extract_failed_tests(log: &str, pattern: &str) -> Result<Vec<String>, FeedbackError> {
    let re = Regex::new(pattern).map_err(|e| FeedbackError::BadPattern(e.to_string()))?;
    if re.captures_len() < 2 {
        return Err(FeedbackError::NoCaptureGroup);
    }
    let mut names: Vec<String> = Vec::new();
    for caps in re.captures_iter(log) {
        if let Some(m) = caps.get(1) {
            if !names.iter().any(|n| n == m.as_str()) {
                names.push(m.as_str().to_string());
            }
        }
    }
    Ok(names)
}

fn tail(text: &str, n: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(n)..].join("\n")
}

const ASAN_MARKER: &str = "ERROR: AddressSanitizer";
const UBSAN_MARKER: &str = "runtime error:";

/// Head of the first ASan/UBSan report: the headline through the end of the first stack trace,
/// at most [`SANITIZER_EXCERPT_LINES`] lines. Without a report, the tail of `stderr`.
pub fn summarize_sanitizer_report(stderr: &str) -> String {
    let lines: Vec<&str> = stderr.lines().collect();
    let start = lines
        .iter()
        .position(|l| l.contains(ASAN_MARKER) || l.contains(UBSAN_MARKER));
    let Some(start) = start else {
        return tail(stderr, SANITIZER_EXCERPT_LINES);
    };
    // ASan headlines carry a `==pid==` prefix that differs on every run.
    let headline = match lines[start].find(ASAN_MARKER) {
        Some(i) => &lines[start][i..],
        None => lines[start],
    };
    let window_end = (start + SANITIZER_EXCERPT_LINES).min(lines.len());
    let is_frame = |l: &str| l.starts_with("    #");
    let end = match (start + 1..window_end).find(|&i| is_frame(lines[i])) {
        Some(first) => (first..window_end)
            .take_while(|&i| is_frame(lines[i]))
            .last()
            .unwrap_or(first),
        None => start,
    };
    let mut out = vec![headline];
    out.extend_from_slice(&lines[start + 1..=end]);
    out.join("\n")
}

fn fallback_excerpt(stage: &StageResult, what: &str) -> String {
    let combined = format!("{}\n{}", stage.stdout, stage.stderr);
    let log = tail(combined.trim(), SANITIZER_EXCERPT_LINES);
    if stage.timed_out {
        format!("{what} timed out.\n{log}").trim_end().to_string()
    } else if log.trim().is_empty() {
        format!("{what} failed with exit code {}.", stage.exit_code)
    } else {
        log
    }
}

/// Builds the error excerpt for a failed outcome.
///
/// `patched_code` is the candidate that was applied; it is used to place the vulnerable lines in
/// the patched file before the proximity filter runs.
pub fn compose_feedback(
    outcome: &ValidationOutcome,
    task: &RepairTask,
    patched_code: &str,
) -> Result<FeedbackMessage, FeedbackError> {
    let failed = match outcome.classification {
        Classification::Plausible => return Err(FeedbackError::Plausible),
        _ => outcome.failed_stage().ok_or(FeedbackError::Plausible)?,
    };
    let message = match failed.stage {
        Stage::Compile => {
            let all = parse_compiler_diagnostics(&format!("{}\n{}", failed.stderr, failed.stdout));
            let vulnerable = remap_vulnerable_lines(
                &task.vulnerable_lines,
                task.function_span,
                patched_line_count(patched_code),
            );
            let kept = filter_by_proximity(&all, &vulnerable, PROXIMITY_RADIUS);
            let excerpt = if kept.is_empty() {
                fallback_excerpt(failed, "Compilation")
            } else {
                kept.iter()
                    .map(CompilerDiagnostic::render)
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            FeedbackMessage {
                source: FeedbackSource::Compile,
                excerpt,
            }
        }
        Stage::Functional => {
            let log = format!("{}\n{}", failed.stdout, failed.stderr);
            let names = extract_failed_tests(&log, &task.test_failure_pattern)?;
            let excerpt = if names.is_empty() {
                fallback_excerpt(failed, "Functional tests")
            } else {
                format!("Failed tests: {}", names.join(", "))
            };
            FeedbackMessage {
                source: FeedbackSource::Functional,
                excerpt,
            }
        }
        Stage::Security => {
            let summary = summarize_sanitizer_report(&failed.stderr);
            let excerpt = if summary.trim().is_empty() {
                fallback_excerpt(failed, "Security test")
            } else {
                summary
            };
            FeedbackMessage {
                source: FeedbackSource::Security,
                excerpt,
            }
        }
    };
    Ok(message)
}
