//! Vulnerability repair driven by a chat-completion model.
//!
//! A [`RepairTask`] names a vulnerable function inside a project together with the commands that
//! build it, run its functional tests, and run its sanitizer-instrumented security test. The
//! [`orchestrator`] sweeps sampling temperatures; at each one it asks the model for a fix using
//! two-stage chain-of-thought prompts, validates the candidate in an isolated workspace, and feeds
//! compiler, test, or sanitizer errors back into the next prompt until a plausible patch appears
//! or the budget runs out.

pub mod feedback;
pub mod gateway;
pub mod orchestrator;
pub mod patching;
pub mod prompting;
pub mod report;
pub mod task;
pub mod validation;

pub use feedback::{CompilerDiagnostic, FeedbackMessage, FeedbackSource, Severity};
pub use gateway::{
    ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError, OpenAiBackend,
    RecordingBackend, ReplayBackend, ScriptedBackend, Transcript,
};
pub use orchestrator::{
    repair_task, run_campaign, AttemptError, AttemptRecord, AttemptSink, OrchestratorError,
    RunOptions, TaskRun,
};
pub use patching::{ExtractionMethod, PatchCandidate, Workspace};
pub use prompting::{PromptBundle, PromptKind, Role, Turn};
pub use report::{compute_metrics, RunReport, TaskMetrics};
pub use task::{
    load_manifest, validate_task, BaselineVariant, LanguageHint, LineSpan, PromptMode, RepairTask,
    RunConfig,
};
pub use validation::{Classification, Stage, StageResult, ValidationOutcome};
