//! Repair tasks, run configuration, and the JSON manifest that lists tasks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// System message the repair loop sends with every request by default.
pub const DEFAULT_SYSTEM_MESSAGE: &str = "You are a chatbot for vulnerability repair";
/// Sampling temperatures swept by default, in order.
pub const DEFAULT_TEMPERATURES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Feedback rounds that follow the initial attempt at each temperature.
pub const DEFAULT_FEEDBACK_ITERATIONS: u32 = 4;
pub const DEFAULT_MODEL_NAME: &str = "gpt-3.5-turbo";
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageHint {
    C,
    Cpp,
    Java,
    Other,
}

impl LanguageHint {
    /// Info string used on markdown code fences.
    pub fn fence_label(self) -> &'static str {
        match self {
            LanguageHint::C => "c",
            LanguageHint::Cpp => "cpp",
            LanguageHint::Java => "java",
            LanguageHint::Other => "",
        }
    }

    pub fn line_comment(self) -> &'static str {
        match self {
            LanguageHint::Other => "#",
            _ => "//",
        }
    }

    pub fn file_extension(self) -> &'static str {
        match self {
            LanguageHint::C => "c",
            LanguageHint::Cpp => "cpp",
            LanguageHint::Java => "java",
            LanguageHint::Other => "txt",
        }
    }
}

/// Inclusive, 1-based line range of the vulnerable function inside `vulnerable_file`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineSpan {
    pub start_line: usize,
    pub end_line: usize,
}

impl LineSpan {
    pub fn new(start_line: usize, end_line: usize) -> Self {
        Self {
            start_line,
            end_line,
        }
    }

    pub fn len(&self) -> usize {
        self.end_line + 1 - self.start_line
    }

    pub fn is_empty(&self) -> bool {
        self.end_line < self.start_line
    }

    pub fn contains(&self, line: usize) -> bool {
        (self.start_line..=self.end_line).contains(&line)
    }
}

// Manifest entries are written as `[start, end]` pairs.
impl From<(usize, usize)> for LineSpan {
    fn from((start_line, end_line): (usize, usize)) -> Self {
        Self::new(start_line, end_line)
    }
}

/// One vulnerability-repair instance.
///
/// `project_root` and `vulnerable_file` locate the program under repair, `security_test_command`
/// runs the sanitizer-instrumented test it currently fails, and `functional_test_command` runs the
/// project's own suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTask {
    pub id: String,
    pub project_root: PathBuf,
    pub vulnerable_file: PathBuf,
    #[serde(with = "span_pair")]
    pub function_span: LineSpan,
    pub vulnerable_lines: Vec<usize>,
    pub vulnerability_description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cve_id: Option<String>,
    pub language_hint: LanguageHint,
    pub build_command: String,
    pub functional_test_command: String,
    pub security_test_command: String,
    pub test_failure_pattern: String,
    pub timeout_seconds: u64,
    /// Extra environment variables for every validation stage.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub env: BTreeMap<String, String>,
}

mod span_pair {
    use super::LineSpan;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(span: &LineSpan, s: S) -> Result<S::Ok, S::Error> {
        (span.start_line, span.end_line).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LineSpan, D::Error> {
        <(usize, usize)>::deserialize(d).map(LineSpan::from)
    }
}

impl RepairTask {
    pub fn vulnerable_path(&self) -> PathBuf {
        self.project_root.join(&self.vulnerable_file)
    }

    /// Reads the text of the vulnerable function out of `file_text`.
    pub fn function_source_in(&self, file_text: &str) -> Option<String> {
        let lines: Vec<&str> = split_lines(file_text);
        let span = self.function_span;
        if span.start_line == 0 || span.end_line > lines.len() || span.is_empty() {
            return None;
        }
        Some(lines[span.start_line - 1..span.end_line].join("\n"))
    }

    pub fn read_function_source(&self) -> std::io::Result<String> {
        let text = fs::read(self.vulnerable_path())?;
        let text = String::from_utf8_lossy(&text);
        self.function_source_in(&text).ok_or_else(|| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!(
                    "function_span ({}, {}) lies outside {}",
                    self.function_span.start_line,
                    self.function_span.end_line,
                    self.vulnerable_file.display()
                ),
            )
        })
    }

    /// Vulnerable lines renumbered relative to the extracted function block.
    pub fn block_relative_lines(&self) -> Vec<usize> {
        self.vulnerable_lines
            .iter()
            .map(|&l| l + 1 - self.function_span.start_line)
            .collect()
    }

    /// Field-level invariants that need no file system access.
    fn field_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, message: String| {
            out.push(Violation {
                task_id: self.id.clone(),
                field,
                message,
            })
        };
        if self.id.trim().is_empty() {
            push("id", "id must not be empty".into());
        }
        let span = self.function_span;
        if span.start_line < 1 {
            push("function_span", "start_line must be at least 1".into());
        }
        if span.start_line > span.end_line {
            push("function_span", "start_line exceeds end_line".into());
        }
        for &line in &self.vulnerable_lines {
            if !span.contains(line) {
                push(
                    "vulnerable_lines",
                    format!(
                        "vulnerable line {line} lies outside function_span ({}, {})",
                        span.start_line, span.end_line
                    ),
                );
            }
        }
        for (field, value) in [
            ("build_command", &self.build_command),
            ("functional_test_command", &self.functional_test_command),
            ("security_test_command", &self.security_test_command),
        ] {
            if value.trim().is_empty() {
                push(field, format!("{field} must not be empty"));
            }
        }
        if self.timeout_seconds == 0 {
            push("timeout_seconds", "timeout_seconds must be positive".into());
        }
        if let Err(e) = regex::Regex::new(&self.test_failure_pattern) {
            push(
                "test_failure_pattern",
                format!("test_failure_pattern does not compile: {e}"),
            );
        }
        out
    }
}

/// Splits on `\n` without producing a trailing empty line for a final terminator.
pub(crate) fn split_lines(text: &str) -> Vec<&str> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').collect()
}

/// A broken task invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub task_id: String,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Checks every task invariant, including those that depend on the files on disk.
///
/// An empty result means the task is usable.
pub fn validate_task(task: &RepairTask) -> Vec<Violation> {
    let mut out = task.field_violations();
    if !task.project_root.is_dir() {
        out.push(Violation {
            task_id: task.id.clone(),
            field: "project_root",
            message: format!("project_root not found: {}", task.project_root.display()),
        });
        return out;
    }
    let path = task.vulnerable_path();
    match fs::read(&path) {
        Ok(bytes) => {
            let text = String::from_utf8_lossy(&bytes);
            let count = split_lines(&text).len();
            if task.function_span.end_line > count {
                out.push(Violation {
                    task_id: task.id.clone(),
                    field: "function_span",
                    message: format!(
                        "end_line {} exceeds line count {count} of {}",
                        task.function_span.end_line,
                        task.vulnerable_file.display()
                    ),
                });
            }
        }
        Err(_) => out.push(Violation {
            task_id: task.id.clone(),
            field: "vulnerable_file",
            message: format!(
                "vulnerable_file not found: {}",
                task.vulnerable_file.display()
            ),
        }),
    }
    out
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("task {task_id}: {field}: {message}")]
    Invalid {
        task_id: String,
        field: &'static str,
        message: String,
    },
}

/// Loads and validates every task listed in the manifest at `path`.
///
/// Relative `project_root` values are resolved against the manifest's directory. An empty file
/// (or one holding only whitespace) yields no tasks.
pub fn load_manifest(path: &Path) -> Result<Vec<RepairTask>, ManifestError> {
    let bytes = fs::read(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut tasks: Vec<RepairTask> =
        serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for task in &mut tasks {
        if task.project_root.is_relative() {
            task.project_root = base.join(&task.project_root);
        }
        if let Some(v) = task.field_violations().into_iter().next() {
            return Err(ManifestError::Invalid {
                task_id: v.task_id,
                field: v.field,
                message: v.message,
            });
        }
    }
    Ok(tasks)
}

/// Which prompt family drives the repair loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Vrpilot,
    CodexvrBaseline(BaselineVariant),
}

/// The six completion-style baseline templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineVariant {
    /// Body deleted, nothing else.
    #[serde(rename = "n.h", alias = "n.h.")]
    NoHelp,
    #[serde(rename = "s.1", alias = "s.1.")]
    Simple1,
    #[serde(rename = "s.2", alias = "s.2.")]
    Simple2,
    #[serde(rename = "c.")]
    Commented,
    #[serde(rename = "c.a.", alias = "c.a")]
    CommentedAlt,
    #[serde(rename = "c.n", alias = "c.n.")]
    CommentedAltNoToken,
}

impl BaselineVariant {
    pub const ALL: [BaselineVariant; 6] = [
        BaselineVariant::NoHelp,
        BaselineVariant::Simple1,
        BaselineVariant::Simple2,
        BaselineVariant::Commented,
        BaselineVariant::CommentedAlt,
        BaselineVariant::CommentedAltNoToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineVariant::NoHelp => "n.h",
            BaselineVariant::Simple1 => "s.1",
            BaselineVariant::Simple2 => "s.2",
            BaselineVariant::Commented => "c.",
            BaselineVariant::CommentedAlt => "c.a.",
            BaselineVariant::CommentedAltNoToken => "c.n",
        }
    }
}

impl fmt::Display for BaselineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown baseline variant {0:?} (expected one of n.h, s.1, s.2, c., c.a., c.n)")]
pub struct UnknownVariant(pub String);

impl std::str::FromStr for BaselineVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "n.h" | "n.h." => Ok(BaselineVariant::NoHelp),
            "s.1" | "s.1." => Ok(BaselineVariant::Simple1),
            "s.2" | "s.2." => Ok(BaselineVariant::Simple2),
            "c." | "c" => Ok(BaselineVariant::Commented),
            "c.a." | "c.a" => Ok(BaselineVariant::CommentedAlt),
            "c.n" | "c.n." => Ok(BaselineVariant::CommentedAltNoToken),
            other => Err(UnknownVariant(other.to_string())),
        }
    }
}

/// Knobs for one campaign. Every field has a default so partial JSON configs are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub enable_cot: bool,
    pub enable_feedback: bool,
    pub temperatures: Vec<f64>,
    pub feedback_iterations: u32,
    pub stop_on_first_plausible: bool,
    pub prompt_mode: PromptMode,
    pub system_message: String,
    pub model_name: String,
    pub max_tokens: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            enable_cot: true,
            enable_feedback: true,
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            feedback_iterations: DEFAULT_FEEDBACK_ITERATIONS,
            stop_on_first_plausible: false,
            prompt_mode: PromptMode::Vrpilot,
            system_message: DEFAULT_SYSTEM_MESSAGE.to_string(),
            model_name: DEFAULT_MODEL_NAME.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("temperatures must not be empty")]
    NoTemperatures,
    #[error("temperature {0} lies outside [0.0, 1.0]")]
    TemperatureOutOfRange(f64),
    #[error("max_tokens must be positive")]
    ZeroMaxTokens,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.temperatures.is_empty() {
            return Err(ConfigError::NoTemperatures);
        }
        if let Some(&t) = self.temperatures.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ConfigError::TemperatureOutOfRange(t));
        }
        if self.max_tokens == 0 {
            return Err(ConfigError::ZeroMaxTokens);
        }
        Ok(())
    }

    /// Attempts run at each temperature when nothing turns plausible.
    pub fn attempts_per_temperature(&self) -> u32 {
        match self.prompt_mode {
            PromptMode::Vrpilot if !self.enable_feedback => 1,
            _ => 1 + self.feedback_iterations,
        }
    }

    /// Model calls per attempt.
    pub fn calls_per_attempt(&self) -> u32 {
        match self.prompt_mode {
            PromptMode::Vrpilot if self.enable_cot => 2,
            _ => 1,
        }
    }
}
