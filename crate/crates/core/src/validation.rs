//! Compile, functional-test and security-test stages run inside a staged workspace.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patching::Workspace;
use crate::task::RepairTask;

pub const WORKSPACE_PLACEHOLDER: &str = "{workspace}";
pub const DEFAULT_OUTPUT_CAP: usize = 1 << 20;
pub const TRUNCATION_MARKER: &str = "\n[vrpilot: output truncated]\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Compile,
    Functional,
    Security,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Compile => "compile",
            Stage::Functional => "functional",
            Stage::Security => "security",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub passed: bool,
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    CompileError,
    FunctionalFail,
    SecurityFail,
    Plausible,
}

impl Classification {
    pub fn compiles(self) -> bool {
        self != Classification::CompileError
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Classification::CompileError => "compile_error",
            Classification::FunctionalFail => "functional_fail",
            Classification::SecurityFail => "security_fail",
            Classification::Plausible => "plausible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub classification: Classification,
    pub stages: Vec<StageResult>,
}

impl ValidationOutcome {
    pub fn stage(&self, stage: Stage) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn failed_stage(&self) -> Option<&StageResult> {
        self.stages.iter().find(|s| !s.passed)
    }
}

/// Problems with the harness itself, as opposed to a stage that ran and failed.
#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("empty command for {0} stage")]
    EmptyCommand(&'static str),
    #[error("unknown placeholder {placeholder} in command {command:?}")]
    BadTemplate {
        command: String,
        placeholder: String,
    },
    #[error("could not spawn {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("command not found while running {command:?}: {stderr}")]
    CommandNotFound { command: String, stderr: String },
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Bytes kept per output stream.
    pub output_cap: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            output_cap: DEFAULT_OUTPUT_CAP,
        }
    }
}

/// Replaces `{workspace}`; any other `{name}` placeholder is rejected. `${VAR}` is left to the shell.
pub fn substitute_template(command: &str, workspace: &Path) -> Result<String, ValidationError> {
    let placeholder = regex::Regex::new(r"(^|[^$])\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap();
    for caps in placeholder.captures_iter(command) {
        let name = &caps[2];
        if name != "workspace" {
            return Err(ValidationError::BadTemplate {
                command: command.to_string(),
                placeholder: format!("{{{name}}}"),
            });
        }
    }
    Ok(command.replace(WORKSPACE_PLACEHOLDER, &workspace.display().to_string()))
}

struct Captured {
    bytes: Vec<u8>,
    truncated: bool,
}

fn capture<R: Read + Send + 'static>(mut reader: R, cap: usize) -> thread::JoinHandle<Captured> {
    thread::spawn(move || {
        let mut bytes = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 16 * 1024];
        loop {
            match reader.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(bytes.len());
                    if n > room {
                        truncated = true;
                    }
                    bytes.extend_from_slice(&buf[..n.min(room)]);
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        Captured { bytes, truncated }
    })
}

fn finish(handle: thread::JoinHandle<Captured>) -> String {
    let captured = handle.join().unwrap_or(Captured {
        bytes: Vec::new(),
        truncated: false,
    });
    let mut text = String::from_utf8_lossy(&captured.bytes).into_owned();
    if captured.truncated {
        text.push_str(TRUNCATION_MARKER);
    }
    text
}

#[cfg(unix)]
fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

#[cfg(not(unix))]
fn exit_code(status: ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

#[cfg(unix)]
fn kill_tree(child: &mut std::process::Child) {
    // The child leads its own process group, so this reaches anything the shell spawned.
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut std::process::Child) {
    let _ = child.kill();
}

/// Runs one shell command with `{workspace}` substituted and the workspace as working directory.
pub fn run_stage(
    stage: Stage,
    command: &str,
    workspace: &Path,
    timeout: Duration,
    env: &BTreeMap<String, String>,
    options: &ValidationOptions,
) -> Result<StageResult, ValidationError> {
    if command.trim().is_empty() {
        return Err(ValidationError::EmptyCommand(stage.as_str()));
    }
    let expanded = substitute_template(command, workspace)?;
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&expanded)
        .current_dir(workspace)
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|source| ValidationError::Spawn {
        command: expanded.clone(),
        source,
    })?;
    let stdout = capture(
        child.stdout.take().expect("piped stdout"),
        options.output_cap,
    );
    let stderr = capture(
        child.stderr.take().expect("piped stderr"),
        options.output_cap,
    );

    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if started.elapsed() >= timeout => {
                timed_out = true;
                kill_tree(&mut child);
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(_) => {
                kill_tree(&mut child);
                break child.wait().ok();
            }
        }
    };
    let stdout = finish(stdout);
    let stderr = finish(stderr);
    let exit_code = status.map(exit_code).unwrap_or(-1);

    if !timed_out && exit_code == 127 && stderr.contains("not found") {
        return Err(ValidationError::CommandNotFound {
            command: expanded,
            stderr,
        });
    }

    Ok(StageResult {
        stage,
        passed: exit_code == 0 && !timed_out,
        exit_code,
        stdout,
        stderr,
        duration_ms: started.elapsed().as_millis() as u64,
        timed_out,
    })
}

/// Compile, then functional tests, then security tests, stopping at the first failure.
pub fn validate(
    workspace: &Workspace,
    task: &RepairTask,
    options: &ValidationOptions,
) -> Result<ValidationOutcome, ValidationError> {
    validate_dir(workspace.root(), task, options)
}

/// [`validate`] against an arbitrary directory holding the (patched) project.
pub fn validate_dir(
    root: &Path,
    task: &RepairTask,
    options: &ValidationOptions,
) -> Result<ValidationOutcome, ValidationError> {
    let timeout = Duration::from_secs(task.timeout_seconds);
    let plan = [
        (
            Stage::Compile,
            &task.build_command,
            Classification::CompileError,
        ),
        (
            Stage::Functional,
            &task.functional_test_command,
            Classification::FunctionalFail,
        ),
        (
            Stage::Security,
            &task.security_test_command,
            Classification::SecurityFail,
        ),
    ];
    let mut stages = Vec::with_capacity(3);
    for (stage, command, on_failure) in plan {
        let result = run_stage(stage, command, root, timeout, &task.env, options)?;
        let passed = result.passed;
        stages.push(result);
        if !passed {
            return Ok(ValidationOutcome {
                classification: on_failure,
                stages,
            });
        }
    }
    Ok(ValidationOutcome {
        classification: Classification::Plausible,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{LanguageHint, LineSpan};

    fn run(command: &str, timeout_ms: u64, cap: usize) -> Result<StageResult, ValidationError> {
        let dir = tempfile::tempdir().unwrap();
        run_stage(
            Stage::Compile,
            command,
            dir.path(),
            Duration::from_millis(timeout_ms),
            &BTreeMap::new(),
            &ValidationOptions { output_cap: cap },
        )
    }

    #[test]
    fn success_and_failure() {
        let ok = run("true", 5000, 1024).unwrap();
        assert!(ok.passed);
        assert_eq!(ok.exit_code, 0);
        assert!(!ok.timed_out);
        let bad = run("echo out; echo err >&2; exit 3", 5000, 1024).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.exit_code, 3);
        assert_eq!(bad.stdout, "out\n");
        assert_eq!(bad.stderr, "err\n");
    }

    #[test]
    fn timeout_kills_the_command() {
        let started = Instant::now();
        let r = run("sleep 10", 200, 1024).unwrap();
        assert!(r.timed_out);
        assert!(!r.passed);
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn timeout_reaches_grandchildren() {
        let started = Instant::now();
        let r = run("sleep 10 & sleep 10; wait", 200, 1024).unwrap();
        assert!(r.timed_out);
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn large_output_is_capped() {
        let r = run(
            "head -c 10485760 /dev/zero | tr '\\0' x >&2",
            30_000,
            1 << 20,
        )
        .unwrap();
        assert!(r.passed);
        assert!(r.stderr.ends_with(TRUNCATION_MARKER));
        assert_eq!(r.stderr.len(), (1 << 20) + TRUNCATION_MARKER.len());
    }

    #[test]
    fn workspace_substitution_and_cwd() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_stage(
            Stage::Functional,
            "test \"$(pwd -P)\" = \"$(cd {workspace} && pwd -P)\" && echo ${HOME:+home}",
            dir.path(),
            Duration::from_secs(5),
            &BTreeMap::new(),
            &ValidationOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn env_additions_reach_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let env = BTreeMap::from([("VRPILOT_TEST_FLAG".to_string(), "on".to_string())]);
        let r = run_stage(
            Stage::Security,
            "test \"$VRPILOT_TEST_FLAG\" = on",
            dir.path(),
            Duration::from_secs(5),
            &env,
            &ValidationOptions::default(),
        )
        .unwrap();
        assert!(r.passed);
    }

    #[test]
    fn configuration_errors_are_distinct() {
        assert!(matches!(
            run("no-such-binary-xyz --flag", 5000, 1024),
            Err(ValidationError::CommandNotFound { .. })
        ));
        assert!(matches!(
            run("make {target}", 5000, 1024),
            Err(ValidationError::BadTemplate { placeholder, .. }) if placeholder == "{target}"
        ));
        assert!(matches!(
            run("  ", 5000, 1024),
            Err(ValidationError::EmptyCommand(_))
        ));
    }

    fn task(build: &str, functional: &str, security: &str) -> RepairTask {
        RepairTask {
            id: "t".into(),
            project_root: "/unused".into(),
            vulnerable_file: "a.c".into(),
            function_span: LineSpan::new(1, 1),
            vulnerable_lines: vec![1],
            vulnerability_description: "x".into(),
            cve_id: None,
            language_hint: LanguageHint::C,
            build_command: build.into(),
            functional_test_command: functional.into(),
            security_test_command: security.into(),
            test_failure_pattern: r"FAIL (\w+)".into(),
            timeout_seconds: 10,
            env: BTreeMap::new(),
        }
    }

    fn outcome(build: &str, functional: &str, security: &str) -> ValidationOutcome {
        let dir = tempfile::tempdir().unwrap();
        validate_dir(
            dir.path(),
            &task(build, functional, security),
            &ValidationOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn stages_short_circuit_in_order() {
        let o = outcome("false", "true", "true");
        assert_eq!(o.classification, Classification::CompileError);
        assert_eq!(o.stages.len(), 1);

        let o = outcome("true", "false", "true");
        assert_eq!(o.classification, Classification::FunctionalFail);
        assert_eq!(
            o.stages.iter().map(|s| s.stage).collect::<Vec<_>>(),
            [Stage::Compile, Stage::Functional]
        );

        let o = outcome("true", "true", "exit 1");
        assert_eq!(o.classification, Classification::SecurityFail);
        assert_eq!(o.stages.len(), 3);

        let o = outcome("true", "true", "true");
        assert_eq!(o.classification, Classification::Plausible);
        assert!(o.stages.iter().all(|s| s.passed));
        assert_eq!(o.failed_stage(), None);
    }

    #[test]
    fn classification_is_deterministic() {
        let a = outcome("true", "echo FAIL x; false", "true");
        let b = outcome("true", "echo FAIL x; false", "true");
        assert_eq!(a.classification, b.classification);
    }
}
