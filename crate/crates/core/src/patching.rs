//! Pulling candidate code out of model responses and writing it into staged workspaces.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use thiserror::Error;
use walkdir::WalkDir;

use crate::prompting::ANSWER_TRIGGER;
use crate::task::RepairTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    FencedBlock,
    TrailingHeuristic,
}

/// Replacement function text proposed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub code: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub temperature: f64,
    pub attempt_index: u32,
    pub extraction_method: ExtractionMethod,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedCode {
    pub code: String,
    pub method: ExtractionMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("response is empty")]
    EmptyResponse,
    #[error("response contains no code block")]
    NoCode,
}

/// Removes `"<i> "` prefixes, but only when every line carries one and they count 1, 2, 3, ...
///
/// Anything else is returned unchanged.
pub fn strip_line_numbers(code: &str) -> String {
    if code.is_empty() {
        return String::new();
    }
    let (body, terminated) = match code.strip_suffix('\n') {
        Some(body) => (body, true),
        None => (code, false),
    };
    let mut stripped = Vec::new();
    for (i, line) in body.split('\n').enumerate() {
        let number = (i + 1).to_string();
        match line
            .strip_prefix(number.as_str())
            .and_then(|rest| rest.strip_prefix(' '))
        {
            Some(rest) => stripped.push(rest),
            None => return code.to_string(),
        }
    }
    let mut out = stripped.join("\n");
    if terminated {
        out.push('\n');
    }
    out
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Contents of every fenced block in document order. An unterminated fence runs to the end.
fn fenced_blocks(response: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in response.split('\n') {
        match current.as_mut() {
            None if is_fence(line) => current = Some(Vec::new()),
            None => {}
            Some(_)
                if is_fence(line)
                    && line.trim_start().trim_start_matches('`').trim().is_empty() =>
            {
                blocks.push(current.take().unwrap().join("\n"));
            }
            Some(lines) => lines.push(line),
        }
    }
    if let Some(lines) = current {
        blocks.push(lines.join("\n"));
    }
    blocks
}

/// Picks the candidate code out of a model response.
///
/// The longest fenced block wins; without fences, the text after the last answer trigger is used.
/// Echoed line numbers are stripped either way.
pub fn extract_code(response: &str) -> Result<ExtractedCode, ExtractionError> {
    if response.is_empty() {
        return Err(ExtractionError::EmptyResponse);
    }
    let longest = fenced_blocks(response)
        .into_iter()
        .filter(|b| !b.trim().is_empty())
        .fold(None::<String>, |best, b| match best {
            Some(best) if best.chars().count() >= b.chars().count() => Some(best),
            _ => Some(b),
        });
    if let Some(block) = longest {
        return Ok(ExtractedCode {
            code: strip_line_numbers(&block),
            method: ExtractionMethod::FencedBlock,
        });
    }
    if let Some(idx) = response.rfind(ANSWER_TRIGGER) {
        let rest = &response[idx + ANSWER_TRIGGER.len()..];
        let rest = rest
            .trim_start_matches([':', ' ', '\t'])
            .trim_start_matches(['\r', '\n'])
            .trim_end();
        if !rest.trim().is_empty() {
            return Ok(ExtractedCode {
                code: strip_line_numbers(rest),
                method: ExtractionMethod::TrailingHeuristic,
            });
        }
    }
    Err(ExtractionError::NoCode)
}

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("project_root not found: {0}")]
    MissingProject(PathBuf),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("patch code is empty")]
    EmptyCode,
    #[error("function_span ({start}, {end}) outside {path} with {lines} line(s)")]
    SpanOutOfRange {
        path: PathBuf,
        start: usize,
        end: usize,
        lines: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PatchError + '_ {
    move |source| PatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A private, writable copy of a project tree for one attempt.
///
/// The directory is removed on drop unless [`Workspace::keep`] was called.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    pub task_id: String,
    pub attempt_index: u32,
    guard: Option<TempDir>,
}

impl Workspace {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Keeps the directory on disk after this value is dropped.
    pub fn keep(mut self) -> PathBuf {
        if let Some(dir) = self.guard.take() {
            let _ = dir.keep();
        }
        self.root.clone()
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Copies `task.project_root` into a fresh directory under `scratch`.
pub fn stage_workspace(
    task: &RepairTask,
    attempt_index: u32,
    scratch: &Path,
) -> Result<Workspace, PatchError> {
    let source = &task.project_root;
    if !source.is_dir() {
        return Err(PatchError::MissingProject(source.clone()));
    }
    fs::create_dir_all(scratch).map_err(io_err(scratch))?;
    let dir = tempfile::Builder::new()
        .prefix(&format!("{}-a{attempt_index}-", sanitize(&task.id)))
        .tempdir_in(scratch)
        .map_err(io_err(scratch))?;
    let root = dir.path().to_path_buf();
    let canonical_root = root.canonicalize().unwrap_or_else(|_| root.clone());
    // A scratch directory nested in the project must not be copied into each workspace.
    let canonical_source = source.canonicalize().unwrap_or_else(|_| source.clone());
    let nested_scratch = scratch
        .canonicalize()
        .ok()
        .filter(|s| s.starts_with(&canonical_source));

    let walker = WalkDir::new(source).follow_links(true).into_iter();
    for entry in walker.filter_entry(|e| {
        e.path()
            .canonicalize()
            .map(|p| {
                !p.starts_with(&canonical_root)
                    && nested_scratch.as_ref().is_none_or(|s| !p.starts_with(s))
            })
            .unwrap_or(true)
    }) {
        let entry = entry.map_err(|e| PatchError::Io {
            path: source.clone(),
            source: e.into(),
        })?;
        let rel = entry
            .path()
            .strip_prefix(source)
            .expect("walk stays under root");
        let dest = root.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).map_err(io_err(&dest))?;
        } else {
            fs::copy(entry.path(), &dest).map_err(io_err(entry.path()))?;
            let mut perms = fs::metadata(&dest).map_err(io_err(&dest))?.permissions();
            if perms.readonly() {
                #[allow(clippy::permissions_set_readonly_false)]
                perms.set_readonly(false);
                fs::set_permissions(&dest, perms).map_err(io_err(&dest))?;
            }
        }
    }
    Ok(Workspace {
        root,
        task_id: task.id.clone(),
        attempt_index,
        guard: Some(dir),
    })
}

/// Splits raw bytes into lines, reporting whether the last line had a terminator.
fn byte_lines(bytes: &[u8]) -> (Vec<&[u8]>, bool) {
    if bytes.is_empty() {
        return (Vec::new(), false);
    }
    let (body, terminated) = match bytes.strip_suffix(b"\n") {
        Some(body) => (body, true),
        None => (bytes, false),
    };
    (body.split(|&b| b == b'\n').collect(), terminated)
}

/// Replaces the task's function span inside the workspace copy with `code`.
///
/// Bytes outside the span are left exactly as they were. A single trailing newline on `code` is
/// dropped so it does not introduce a blank line.
pub fn apply_patch(
    workspace: &Workspace,
    task: &RepairTask,
    code: &str,
) -> Result<PathBuf, PatchError> {
    if code.is_empty() {
        return Err(PatchError::EmptyCode);
    }
    let path = workspace.root().join(&task.vulnerable_file);
    let original = fs::read(&path).map_err(io_err(&path))?;
    let (lines, terminated) = byte_lines(&original);
    let span = task.function_span;
    if span.start_line == 0 || span.start_line > span.end_line || span.end_line > lines.len() {
        return Err(PatchError::SpanOutOfRange {
            path,
            start: span.start_line,
            end: span.end_line,
            lines: lines.len(),
        });
    }
    let code = code.strip_suffix('\n').unwrap_or(code);
    let mut out = Vec::with_capacity(original.len() + code.len());
    let replacement = [code.as_bytes()];
    let pieces = lines[..span.start_line - 1]
        .iter()
        .chain(replacement.iter())
        .chain(lines[span.end_line..].iter());
    for (i, line) in pieces.enumerate() {
        if i > 0 {
            out.push(b'\n');
        }
        out.extend_from_slice(line);
    }
    if terminated {
        out.push(b'\n');
    }
    fs::write(&path, out).map_err(io_err(&path))?;
    Ok(path)
}

/// Number of lines `code` occupies once applied.
pub fn patched_line_count(code: &str) -> usize {
    let code = code.strip_suffix('\n').unwrap_or(code);
    code.split('\n').count()
}
