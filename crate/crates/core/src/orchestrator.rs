//! The repair loop.
//!
//! For every configured temperature the loop makes an initial attempt and then up to
//! `feedback_iterations` feedback attempts. With chain-of-thought enabled each attempt is two
//! model calls (reasoning, then answer); otherwise it is one direct call. A feedback attempt
//! embeds the previous candidate and the error distilled from its validation. The chain restarts
//! from the initial prompt at each temperature.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feedback::{compose_feedback, FeedbackError, FeedbackMessage};
use crate::gateway::{ChatBackend, ChatRequest, FinishReason, GatewayError};
use crate::patching::{apply_patch, extract_code, stage_workspace, PatchCandidate, PatchError};
use crate::prompting::{
    build_codexvr_prompt, build_cot_answer_prompt, build_cot_reasoning_prompt, build_direct_prompt,
    build_feedback_reasoning_prompt, build_feedback_task_text, build_task_text, PromptBundle,
    PromptError, Provenance,
};
use crate::task::{validate_task, ConfigError, PromptMode, RepairTask, RunConfig, Violation};
use crate::validation::{
    validate, Classification, ValidationError, ValidationOptions, ValidationOutcome,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum AttemptError {
    Gateway(String),
    Extraction(String),
}

/// Everything that happened in one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub temperature: f64,
    /// 0 is the initial attempt at this temperature.
    pub attempt_index: u32,
    pub prompts: Vec<PromptBundle>,
    /// Digest of each request actually sent, parallel to `prompts`.
    pub request_digests: Vec<String>,
    pub reasoning: Option<String>,
    pub candidate: Option<PatchCandidate>,
    pub outcome: Option<ValidationOutcome>,
    /// Feedback embedded in this attempt's prompt.
    pub feedback_sent: Option<FeedbackMessage>,
    pub llm_calls: u32,
    pub error: Option<AttemptError>,
}

impl AttemptRecord {
    fn new(temperature: f64, attempt_index: u32) -> Self {
        Self {
            temperature,
            attempt_index,
            prompts: Vec::new(),
            request_digests: Vec::new(),
            reasoning: None,
            candidate: None,
            outcome: None,
            feedback_sent: None,
            llm_calls: 0,
            error: None,
        }
    }

    pub fn classification(&self) -> Option<Classification> {
        self.outcome.as_ref().map(|o| o.classification)
    }

    pub fn is_plausible(&self) -> bool {
        self.classification() == Some(Classification::Plausible)
    }
}

/// Receives attempts as they complete. Shared by all task workers.
pub trait AttemptSink: Sync {
    fn record(&self, task_id: &str, attempt: &AttemptRecord);
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid task: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTask(Vec<Violation>),
    #[error("cannot read vulnerable function: {0}")]
    Source(#[source] std::io::Error),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
}

pub struct RunOptions<'a> {
    /// Parent directory for per-attempt workspaces.
    pub scratch: PathBuf,
    pub validation: ValidationOptions,
    pub sink: Option<&'a dyn AttemptSink>,
}

impl RunOptions<'_> {
    pub fn new(scratch: impl Into<PathBuf>) -> Self {
        Self {
            scratch: scratch.into(),
            validation: ValidationOptions::default(),
            sink: None,
        }
    }
}

struct Attempter<'a> {
    task: &'a RepairTask,
    config: &'a RunConfig,
    backend: &'a dyn ChatBackend,
    options: &'a RunOptions<'a>,
}

impl Attempter<'_> {
    fn call(
        &self,
        record: &mut AttemptRecord,
        bundle: PromptBundle,
    ) -> Result<String, GatewayError> {
        let request = ChatRequest::from_bundle(
            &bundle,
            &self.config.model_name,
            record.temperature,
            self.config.max_tokens,
        );
        record.request_digests.push(request.digest());
        record.prompts.push(bundle);
        record.llm_calls += 1;
        let response = self.backend.complete(&request)?;
        if response.finish_reason == FinishReason::Error || response.content.is_empty() {
            return Err(GatewayError::BadResponse(
                "model returned no content".to_string(),
            ));
        }
        Ok(response.content)
    }

    fn decorate(&self, bundle: PromptBundle, record: &AttemptRecord) -> PromptBundle {
        bundle
            .with_system(self.config.system_message.clone())
            .with_provenance(Provenance {
                task_id: self.task.id.clone(),
                temperature: record.temperature,
                attempt_index: record.attempt_index,
            })
    }

    /// Queries the model; returns the response that should contain code.
    fn query(
        &self,
        record: &mut AttemptRecord,
        task_text: &str,
        source: &str,
        is_feedback: bool,
    ) -> Result<Result<String, GatewayError>, OrchestratorError> {
        let config = self.config;
        match config.prompt_mode {
            PromptMode::CodexvrBaseline(variant) => {
                let p = self.decorate(build_codexvr_prompt(variant, self.task, source)?, record);
                Ok(self.call(record, p))
            }
            PromptMode::Vrpilot if config.enable_cot => {
                let reasoning_prompt = if is_feedback {
                    build_feedback_reasoning_prompt(task_text)?
                } else {
                    build_cot_reasoning_prompt(task_text)?
                };
                let reasoning_prompt = self.decorate(reasoning_prompt, record);
                let reasoning = match self.call(record, reasoning_prompt.clone()) {
                    Ok(z) => z,
                    Err(e) => return Ok(Err(e)),
                };
                record.reasoning = Some(reasoning.clone());
                let answer = build_cot_answer_prompt(&reasoning_prompt, &reasoning)?;
                Ok(self.call(record, answer))
            }
            PromptMode::Vrpilot => {
                let p = self.decorate(build_direct_prompt(task_text)?, record);
                Ok(self.call(record, p))
            }
        }
    }

    fn emit(&self, record: &AttemptRecord) {
        if let Some(sink) = self.options.sink {
            sink.record(&self.task.id, record);
        }
    }

    fn run(&self) -> Result<Vec<AttemptRecord>, OrchestratorError> {
        let task = self.task;
        let config = self.config;
        let source = task
            .read_function_source()
            .map_err(OrchestratorError::Source)?;
        let task_text = build_task_text(task, &source)?;
        let feedback_on = config.prompt_mode == PromptMode::Vrpilot && config.enable_feedback;
        let per_temperature = config.attempts_per_temperature();

        let mut records = Vec::new();
        let mut serial = 0u32;
        'temperatures: for &temperature in &config.temperatures {
            let mut previous: Option<(String, FeedbackMessage)> = None;
            for attempt_index in 0..per_temperature {
                let mut record = AttemptRecord::new(temperature, attempt_index);
                let text = match &previous {
                    Some((prior, fb)) => {
                        record.feedback_sent = Some(fb.clone());
                        build_feedback_task_text(&task_text, prior, &fb.excerpt)?
                    }
                    None => task_text.clone(),
                };
                let response = match self.query(&mut record, &text, &source, previous.is_some())? {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("task {}: temperature {temperature}: {e}", task.id);
                        record.error = Some(AttemptError::Gateway(e.to_string()));
                        self.emit(&record);
                        records.push(record);
                        continue 'temperatures;
                    }
                };
                let has_next = feedback_on && attempt_index + 1 < per_temperature;

                let extracted = match extract_code(&response) {
                    Ok(e) => e,
                    Err(e) => {
                        record.error = Some(AttemptError::Extraction(e.to_string()));
                        if has_next {
                            let prior = if response.trim().is_empty() {
                                "(empty response)".to_string()
                            } else {
                                response.clone()
                            };
                            previous = Some((prior, FeedbackMessage::extraction_failure()));
                        }
                        self.emit(&record);
                        records.push(record);
                        continue;
                    }
                };
                let candidate = PatchCandidate {
                    code: extracted.code,
                    raw_response: response,
                    reasoning: record.reasoning.clone(),
                    temperature,
                    attempt_index,
                    extraction_method: extracted.method,
                };

                let workspace = stage_workspace(task, serial, &self.options.scratch)?;
                serial += 1;
                apply_patch(&workspace, task, &candidate.code)?;
                let outcome = validate(&workspace, task, &self.options.validation)?;
                drop(workspace);

                let plausible = outcome.classification == Classification::Plausible;
                if !plausible && has_next {
                    let fb = compose_feedback(&outcome, task, &candidate.code)?;
                    previous = Some((candidate.code.clone(), fb));
                }
                record.candidate = Some(candidate);
                record.outcome = Some(outcome);
                self.emit(&record);
                records.push(record);

                if plausible {
                    if config.stop_on_first_plausible {
                        break 'temperatures;
                    }
                    continue 'temperatures;
                }
            }
        }
        Ok(records)
    }
}

/// Runs the full temperature sweep for one task.
pub fn repair_task(
    task: &RepairTask,
    config: &RunConfig,
    backend: &dyn ChatBackend,
    options: &RunOptions<'_>,
) -> Result<Vec<AttemptRecord>, OrchestratorError> {
    config.validate()?;
    let violations = validate_task(task);
    if !violations.is_empty() {
        return Err(OrchestratorError::InvalidTask(violations));
    }
    Attempter {
        task,
        config,
        backend,
        options,
    }
    .run()
}

#[derive(Debug)]
pub struct TaskRun {
    pub task_id: String,
    pub result: Result<Vec<AttemptRecord>, OrchestratorError>,
}

/// Repairs every task with at most `parallelism` concurrent workers. Results keep input order.
pub fn run_campaign(
    tasks: &[RepairTask],
    config: &RunConfig,
    backend: &dyn ChatBackend,
    options: &RunOptions<'_>,
    parallelism: usize,
) -> Result<Vec<TaskRun>, ConfigError> {
    config.validate()?;
    let workers = parallelism.max(1).min(tasks.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<TaskRun>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let result = repair_task(task, config, backend, options);
                if let Err(e) = &result {
                    log::error!("task {}: {e}", task.id);
                }
                *slots[i].lock().unwrap() = Some(TaskRun {
                    task_id: task.id.clone(),
                    result,
                });
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect())
}

/// Hex SHA-256 over every request digest of every attempt, in order.
pub fn transcript_digest(records: &[AttemptRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        for d in &r.request_digests {
            hasher.update(d.as_bytes());
            hasher.update(b"\n");
        }
    }
    hex::encode(hasher.finalize())
}
