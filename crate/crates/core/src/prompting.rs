//! Prompt construction.
//!
//! Chain-of-thought prompting happens in two stages. The reasoning stage sends
//! `Q: <task>\nA: Let's think step by step`; the answer stage resends that text followed by the
//! model's reasoning and the answer trigger `Therefore the fixed code is`. Feedback rounds reuse
//! the same two stages with a task text that also embeds the previous candidate and the distilled
//! error. Every builder here is a pure function of its inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{BaselineVariant, RepairTask, DEFAULT_SYSTEM_MESSAGE};

pub const REASONING_TRIGGER: &str = "Let's think step by step";
pub const ANSWER_TRIGGER: &str = "Therefore the fixed code is";
pub const PRIOR_PATCH_HEADER: &str = "Previously suggested fix:";
pub const ERROR_HEADER: &str = "It failed with the following error:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Initial,
    CotReasoning,
    CotAnswer,
    FeedbackReasoning,
    FeedbackAnswer,
    Baseline(BaselineVariant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task_id: String,
    pub temperature: f64,
    pub attempt_index: u32,
}

/// An ordered chat transcript plus the template that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub turns: Vec<Turn>,
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl PromptBundle {
    fn single(kind: PromptKind, content: String) -> Self {
        Self {
            system: DEFAULT_SYSTEM_MESSAGE.to_string(),
            turns: vec![Turn::user(content)],
            kind,
            provenance: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = system.into();
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Content of the last user turn.
    pub fn final_user_content(&self) -> &str {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("answer prompts follow a reasoning prompt, got {0:?}")]
    NotReasoning(PromptKind),
}

fn non_empty(value: &str, what: &'static str) -> Result<(), PromptError> {
    if value.is_empty() {
        Err(PromptError::Empty(what))
    } else {
        Ok(())
    }
}

/// Prefixes line `i` (1-based) with `"<i> "`. A trailing newline stays a trailing newline.
pub fn number_lines(code: &str) -> String {
    if code.is_empty() {
        return String::new();
    }
    let (body, terminated) = match code.strip_suffix('\n') {
        Some(body) => (body, true),
        None => (code, false),
    };
    let mut out = String::with_capacity(code.len() + 4 * body.len() / 16);
    for (i, line) in body.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&(i + 1).to_string());
        out.push(' ');
        out.push_str(line);
    }
    if terminated {
        out.push('\n');
    }
    out
}

/// The repair instruction followed by the numbered vulnerable function.
pub fn build_task_text(task: &RepairTask, source: &str) -> Result<String, PromptError> {
    non_empty(source, "function source")?;
    let lines = task.block_relative_lines();
    let instruction = if lines.is_empty() {
        format!(
            "Fix the {} vulnerability in the following code:",
            task.vulnerability_description
        )
    } else {
        let listed: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        format!(
            "Fix the {} vulnerability at line(s) {} in the following code:",
            task.vulnerability_description,
            listed.join(", ")
        )
    };
    Ok(format!("{instruction}\n{}", number_lines(source)))
}

fn reasoning_content(task_text: &str) -> String {
    format!("Q: {task_text}\nA: {REASONING_TRIGGER}")
}

pub fn build_cot_reasoning_prompt(task_text: &str) -> Result<PromptBundle, PromptError> {
    non_empty(task_text, "task text")?;
    Ok(PromptBundle::single(
        PromptKind::CotReasoning,
        reasoning_content(task_text),
    ))
}

/// Same text as [`build_cot_reasoning_prompt`], tagged as a feedback round.
pub fn build_feedback_reasoning_prompt(feedback_text: &str) -> Result<PromptBundle, PromptError> {
    non_empty(feedback_text, "feedback task text")?;
    Ok(PromptBundle::single(
        PromptKind::FeedbackReasoning,
        reasoning_content(feedback_text),
    ))
}

pub fn build_cot_answer_prompt(
    reasoning_prompt: &PromptBundle,
    reasoning: &str,
) -> Result<PromptBundle, PromptError> {
    let kind = match reasoning_prompt.kind {
        PromptKind::CotReasoning => PromptKind::CotAnswer,
        PromptKind::FeedbackReasoning => PromptKind::FeedbackAnswer,
        other => return Err(PromptError::NotReasoning(other)),
    };
    non_empty(reasoning, "reasoning")?;
    let content = format!(
        "{}\n{reasoning}\n{ANSWER_TRIGGER}",
        reasoning_prompt.final_user_content()
    );
    Ok(PromptBundle {
        system: reasoning_prompt.system.clone(),
        turns: vec![Turn::user(content)],
        kind,
        provenance: reasoning_prompt.provenance.clone(),
    })
}

/// Task text for a feedback round: the original task, then the previous candidate, then the error.
pub fn build_feedback_task_text(
    task_text: &str,
    prior_patch: &str,
    error_excerpt: &str,
) -> Result<String, PromptError> {
    non_empty(task_text, "task text")?;
    non_empty(prior_patch, "prior patch")?;
    non_empty(error_excerpt, "error excerpt")?;
    Ok(format!(
        "{task_text}\n{PRIOR_PATCH_HEADER}\n{prior_patch}\n{ERROR_HEADER}\n{error_excerpt}"
    ))
}

/// A prompt carrying neither trigger sentence.
pub fn build_direct_prompt(task_text: &str) -> Result<PromptBundle, PromptError> {
    non_empty(task_text, "task text")?;
    Ok(PromptBundle::single(
        PromptKind::Initial,
        task_text.to_string(),
    ))
}

/// Everything up to and including the opening brace, or the first line when there is none.
fn signature_of(source: &str) -> &str {
    match source.find('{') {
        Some(i) => &source[..=i],
        None => source.lines().next().unwrap_or(source),
    }
}

fn first_token(source: &str) -> &str {
    source.split_whitespace().next().unwrap_or("")
}

fn line_commented(source: &str, marker: &str) -> String {
    source
        .lines()
        .map(|l| format!("{marker} {l}").trim_end().to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

fn block_comment_body(source: &str) -> String {
    source.replace("*/", "* /")
}

/// Completion-style baseline prompts over the vulnerable function.
pub fn build_codexvr_prompt(
    variant: BaselineVariant,
    task: &RepairTask,
    source: &str,
) -> Result<PromptBundle, PromptError> {
    non_empty(source, "function source")?;
    let desc = &task.vulnerability_description;
    let lc = task.language_hint.line_comment();
    let signature = signature_of(source);
    let token = first_token(source);
    let alt_prefix = format!(
        "/* BUG: {desc} */\n/*\n{}\n*/\n/* FIXED: */\n",
        block_comment_body(source)
    );
    let text = match variant {
        BaselineVariant::NoHelp => format!("{signature}\n"),
        BaselineVariant::Simple1 => format!("{signature}\n    {lc} bugfix: fixed {desc}\n"),
        BaselineVariant::Simple2 => format!("{signature}\n    {lc} fixed {desc} bug\n"),
        BaselineVariant::Commented => format!(
            "{lc} BUG: {desc}\n{}\n{lc} FIXED:\n{token}",
            line_commented(source, lc)
        ),
        BaselineVariant::CommentedAlt => format!("{alt_prefix}{token}"),
        BaselineVariant::CommentedAltNoToken => alt_prefix,
    };
    Ok(PromptBundle::single(PromptKind::Baseline(variant), text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{LanguageHint, LineSpan};
    use std::collections::BTreeMap;

    fn task(start: usize, end: usize, lines: Vec<usize>) -> RepairTask {
        RepairTask {
            id: "toy".into(),
            project_root: "/nonexistent".into(),
            vulnerable_file: "a.c".into(),
            function_span: LineSpan::new(start, end),
            vulnerable_lines: lines,
            vulnerability_description: "Heap Buffer Overflow".into(),
            cve_id: None,
            language_hint: LanguageHint::C,
            build_command: "make".into(),
            functional_test_command: "make test".into(),
            security_test_command: "make asan".into(),
            test_failure_pattern: r"FAIL (\w+)".into(),
            timeout_seconds: 10,
            env: BTreeMap::new(),
        }
    }

    #[test]
    fn numbering() {
        assert_eq!(number_lines("a\nb"), "1 a\n2 b");
        assert_eq!(number_lines(""), "");
        assert_eq!(number_lines("x\n\ny"), "1 x\n2 \n3 y");
        assert_eq!(number_lines("a\n"), "1 a\n");
        assert_eq!(number_lines("\n"), "1 \n");
    }

    #[test]
    fn task_text_golden() {
        // function occupies file lines 10..=14, vulnerable line 12 is block line 3
        let t = task(10, 14, vec![12]);
        let src = "int f(char *p) {\n  int i;\n  p[i] = 0;\n  return 0;\n}";
        let text = build_task_text(&t, src).unwrap();
        assert_eq!(
            text,
            "Fix the Heap Buffer Overflow vulnerability at line(s) 3 in the following code:\n\
             1 int f(char *p) {\n2   int i;\n3   p[i] = 0;\n4   return 0;\n5 }"
        );
    }

    #[test]
    fn task_text_lists_several_lines() {
        let t = task(1, 5, vec![2, 4]);
        let text = build_task_text(&t, "a\nb\nc\nd\ne").unwrap();
        assert!(text.starts_with("Fix the Heap Buffer Overflow vulnerability at line(s) 2, 4 "));
    }

    #[test]
    fn task_text_single_line_and_empty() {
        let t = task(7, 7, vec![7]);
        let text = build_task_text(&t, "return buf[n];").unwrap();
        assert!(text.ends_with("\n1 return buf[n];"));
        assert_eq!(
            build_task_text(&t, ""),
            Err(PromptError::Empty("function source"))
        );
    }

    #[test]
    fn reasoning_prompt() {
        let p = build_cot_reasoning_prompt("fix the bug in f()").unwrap();
        assert_eq!(p.kind, PromptKind::CotReasoning);
        assert_eq!(p.turns.len(), 1);
        assert_eq!(p.turns[0].role, Role::User);
        assert_eq!(
            p.turns[0].content,
            "Q: fix the bug in f()\nA: Let's think step by step"
        );
        let p = build_cot_reasoning_prompt("line one\nline two").unwrap();
        assert_eq!(
            p.turns[0].content,
            "Q: line one\nline two\nA: Let's think step by step"
        );
        assert!(build_cot_reasoning_prompt("").is_err());
    }

    #[test]
    fn answer_prompt() {
        let x = build_cot_reasoning_prompt("fix f").unwrap();
        let a = build_cot_answer_prompt(&x, "The loop reads past the buffer.").unwrap();
        assert_eq!(a.kind, PromptKind::CotAnswer);
        assert_eq!(
            a.turns[0].content,
            "Q: fix f\nA: Let's think step by step\nThe loop reads past the buffer.\nTherefore the fixed code is"
        );
        let fenced = "Use this:\n```c\nint x;\n```\n";
        let a = build_cot_answer_prompt(&x, fenced).unwrap();
        assert!(a.turns[0].content.contains(fenced));
        assert!(build_cot_answer_prompt(&x, "").is_err());

        let f = build_feedback_reasoning_prompt("fix f again").unwrap();
        let a = build_cot_answer_prompt(&f, "z").unwrap();
        assert_eq!(a.kind, PromptKind::FeedbackAnswer);
        assert!(a.turns[0].content.ends_with(ANSWER_TRIGGER));

        let d = build_direct_prompt("fix f").unwrap();
        assert_eq!(
            build_cot_answer_prompt(&d, "z"),
            Err(PromptError::NotReasoning(PromptKind::Initial))
        );
    }

    #[test]
    fn feedback_text_ordering() {
        let x = "Fix the Heap Buffer Overflow vulnerability";
        let c = "while (len > 0 && i < cap) { ... }";
        let e = "AddressSanitizer: heap-buffer-overflow on address 0x1";
        let text = build_feedback_task_text(x, c, e).unwrap();
        let (ix, ic, ie) = (
            text.find(x).unwrap(),
            text.find(c).unwrap(),
            text.find(e).unwrap(),
        );
        assert!(ix < ic && ic < ie);
        assert_eq!(
            text,
            format!(
                "{x}\nPreviously suggested fix:\n{c}\nIt failed with the following error:\n{e}"
            )
        );
        let text = build_feedback_task_text(x, c, "!").unwrap();
        assert!(text.ends_with("\n!"));
        assert!(build_feedback_task_text(x, "", e).is_err());
        assert!(build_feedback_task_text("", c, e).is_err());
        assert!(build_feedback_task_text(x, c, "").is_err());

        let f = build_cot_reasoning_prompt(&text).unwrap();
        assert!(f.turns[0].content.starts_with(&format!("Q: {x}")));
        assert!(f.turns[0].content.ends_with(REASONING_TRIGGER));
    }

    #[test]
    fn direct_prompt_has_no_triggers() {
        let p = build_direct_prompt("fix ...").unwrap();
        assert_eq!(p.kind, PromptKind::Initial);
        assert_eq!(p.turns[0].content, "fix ...");
        assert!(!p.turns[0].content.contains(REASONING_TRIGGER));
        assert!(!p.turns[0].content.contains(ANSWER_TRIGGER));
        assert!(build_direct_prompt("").is_err());
    }

    const SRC: &str = "int f(char *p)\n{\n    p[8] = 0;\n    return 0;\n}";

    fn baseline(v: BaselineVariant) -> String {
        build_codexvr_prompt(v, &task(1, 5, vec![3]), SRC)
            .unwrap()
            .turns
            .remove(0)
            .content
    }

    #[test]
    fn baseline_no_help_and_simple() {
        assert_eq!(baseline(BaselineVariant::NoHelp), "int f(char *p)\n{\n");
        let s1 = baseline(BaselineVariant::Simple1);
        assert!(s1.contains("bugfix: fixed Heap Buffer Overflow"));
        assert!(!s1.contains("p[8]"));
        let s2 = baseline(BaselineVariant::Simple2);
        assert!(s2.contains("fixed Heap Buffer Overflow bug"));
        assert!(!s2.contains("return 0"));
    }

    #[test]
    fn baseline_commented() {
        let c = baseline(BaselineVariant::Commented);
        assert_eq!(
            c,
            "// BUG: Heap Buffer Overflow\n// int f(char *p)\n// {\n//     p[8] = 0;\n//     return 0;\n// }\n// FIXED:\nint"
        );
        let p = build_codexvr_prompt(
            BaselineVariant::Commented,
            &task(1, 1, vec![1]),
            "int f(){...}",
        )
        .unwrap();
        assert!(p.turns[0].content.ends_with("// FIXED:\nint"));
        assert_eq!(p.kind, PromptKind::Baseline(BaselineVariant::Commented));
    }

    #[test]
    fn baseline_alt_and_no_token() {
        let ca = baseline(BaselineVariant::CommentedAlt);
        let cn = baseline(BaselineVariant::CommentedAltNoToken);
        assert!(ca.starts_with("/* BUG: Heap Buffer Overflow */\n/*\n"));
        assert!(ca.ends_with("/* FIXED: */\nint"));
        assert_eq!(ca.strip_suffix("int").unwrap(), cn);
        assert!(!ca.contains("//"));
    }

    #[test]
    fn baseline_rejects_empty_source() {
        assert!(build_codexvr_prompt(BaselineVariant::NoHelp, &task(1, 1, vec![]), "").is_err());
    }

    #[test]
    fn builders_are_pure() {
        let t = task(1, 5, vec![3]);
        assert_eq!(build_task_text(&t, SRC), build_task_text(&t, SRC));
        for v in BaselineVariant::ALL {
            assert_eq!(
                build_codexvr_prompt(v, &t, SRC),
                build_codexvr_prompt(v, &t, SRC)
            );
        }
    }
}
