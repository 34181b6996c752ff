use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vrpilot_core::feedback::compose_feedback;
use vrpilot_core::gateway::{self, DEFAULT_BASE_URL};
use vrpilot_core::patching::{apply_patch, stage_workspace};
use vrpilot_core::prompting::{
    build_codexvr_prompt, build_cot_answer_prompt, build_cot_reasoning_prompt, build_direct_prompt,
    build_feedback_reasoning_prompt, build_feedback_task_text, build_task_text,
};
use vrpilot_core::report::{
    self, export_results, export_review_bundle, JsonlSink, RESULTS_FILE, SUMMARY_FILE,
};
use vrpilot_core::validation::{validate, ValidationOptions, DEFAULT_OUTPUT_CAP};
use vrpilot_core::{
    compute_metrics, load_manifest, run_campaign, BaselineVariant, ChatBackend, Classification,
    OpenAiBackend, RecordingBackend, RepairTask, ReplayBackend, RunConfig, RunOptions, RunReport,
    ScriptedBackend,
};

#[derive(Parser)]
#[command(
    name = "vrpilot",
    version,
    about = "Repair vulnerable functions with an LLM in the loop"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the repair loop over every task in a manifest.
    Run(RunArgs),
    /// Run the compile/functional/security pipeline on one task, optionally with a patch.
    Validate(ValidateArgs),
    /// Print the exact prompt sent for one task.
    Prompt(PromptArgs),
    /// Recompute metrics from a results directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ReplayMode {
    /// Match recorded requests by digest.
    Digest,
    /// Serve recorded responses in order.
    Sequential,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "digest", requires = "replay")]
    replay_mode: ReplayMode,
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, default_value = "vrpilot-out")]
    out: PathBuf,
    /// Parent directory for per-attempt workspaces (default: system temp dir).
    #[arg(long)]
    scratch: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long, env = "VRPILOT_BASE_URL", default_value = DEFAULT_BASE_URL)]
    base_url: String,
    /// Per-request HTTP timeout in seconds.
    #[arg(long, default_value_t = 120)]
    request_timeout: u64,
    #[arg(long, default_value_t = DEFAULT_OUTPUT_CAP)]
    output_cap: usize,
}

#[derive(clap::Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    task: String,
    /// Replacement text for the task's function span.
    #[arg(long)]
    patch: Option<PathBuf>,
    #[arg(long)]
    scratch: Option<PathBuf>,
    /// Leave the staged workspace on disk.
    #[arg(long)]
    keep: bool,
    /// Print the outcome as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptStage {
    Reasoning,
    Answer,
    Direct,
}

#[derive(clap::Args)]
struct PromptArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    task: String,
    /// vrpilot, or a baseline variant: n.h, s.1, s.2, c., c.a., c.n
    #[arg(long, default_value = "vrpilot")]
    mode: String,
    #[arg(long, value_enum, default_value = "reasoning")]
    stage: PromptStage,
    /// Reasoning text placed before the answer trigger.
    #[arg(long, default_value = "[Z]")]
    reasoning: String,
    /// Previous candidate; with --feedback-error, prints a feedback-round prompt.
    #[arg(long, requires = "feedback_error")]
    feedback_patch: Option<PathBuf>,
    #[arg(long, requires = "feedback_patch")]
    feedback_error: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    json: bool,
}

fn find_task(manifest: &Path, id: &str) -> Result<RepairTask> {
    load_manifest(manifest)?
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| anyhow!("no task {id:?} in {}", manifest.display()))
}

fn scratch_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.unwrap_or_else(|| std::env::temp_dir().join("vrpilot-workspaces"))
}

fn print_report(report: &RunReport) {
    println!(
        "{:<24} {:>8} {:>10} {:>9}  pass",
        "task", "attempts", "compilable", "plausible"
    );
    for t in &report.tasks {
        match &t.error {
            Some(e) => println!("{:<24} error: {e}", t.task_id),
            None => println!(
                "{:<24} {:>8} {:>10} {:>9}  {}",
                t.task_id,
                t.attempts_total,
                t.attempts_compilable,
                t.attempts_plausible,
                if t.pass { "yes" } else { "no" }
            ),
        }
    }
    if report.empty {
        println!("no attempts produced a response");
    }
    println!(
        "compilable {:.1}%  plausible {:.1}%  tasks passed {}/{}",
        report.compilable_pct,
        report.plausible_pct,
        report.tasks_passed,
        report.tasks.len()
    );
}

fn run(args: RunArgs) -> Result<()> {
    let tasks = load_manifest(&args.manifest)?;
    let config: RunConfig = match &args.config {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => RunConfig::default(),
    };
    config.validate()?;
    if !args.force {
        for name in [RESULTS_FILE, SUMMARY_FILE, report::REVIEW_DIR] {
            let path = args.out.join(name);
            if path.exists() {
                bail!(
                    "{} already exists (pass --force to overwrite)",
                    path.display()
                );
            }
        }
    }
    fs::create_dir_all(&args.out)?;

    let backend = match make_backend(&args)? {
        b if args.record.is_some() => Backend::Recording(RecordingBackend::new(b)),
        b => Backend::Plain(b),
    };

    let stream_path = args.out.join("attempts.partial.jsonl");
    let sink = JsonlSink::create(&stream_path)?;
    let options = RunOptions {
        scratch: scratch_dir(args.scratch.clone()),
        validation: ValidationOptions {
            output_cap: args.output_cap,
        },
        sink: Some(&sink),
    };
    let started = Instant::now();
    let runs = run_campaign(&tasks, &config, backend.as_dyn(), &options, args.parallel)?;
    let report = compute_metrics(&runs).with_meta(&config, started.elapsed().as_millis() as u64);

    if let (Backend::Recording(rec), Some(path)) = (&backend, &args.record) {
        rec.save(path)?;
    }
    export_results(&report, &runs, &args.out, args.force)?;
    let bundles = export_review_bundle(&tasks, &runs, &args.out, args.force)?;
    drop(sink);
    let _ = fs::remove_file(&stream_path);
    print_report(&report);
    println!(
        "results in {} ({} review bundle(s))",
        args.out.display(),
        bundles.len()
    );
    Ok(())
}

enum Backend {
    Plain(Box<dyn ChatBackend>),
    Recording(RecordingBackend<Box<dyn ChatBackend>>),
}

impl Backend {
    fn as_dyn(&self) -> &dyn ChatBackend {
        match self {
            Backend::Plain(b) => b.as_ref(),
            Backend::Recording(r) => r,
        }
    }
}

fn make_backend(args: &RunArgs) -> Result<Box<dyn ChatBackend>> {
    let timeout = Duration::from_secs(args.request_timeout);
    Ok(match (&args.replay, args.replay_mode) {
        (Some(path), ReplayMode::Digest) => Box::new(ReplayBackend::from_file(path)?),
        (Some(path), ReplayMode::Sequential) => Box::new(ScriptedBackend::from_transcript(
            &gateway::load_session(path)?,
        )),
        (None, _) => Box::new(OpenAiBackend::from_env(&args.base_url, timeout)?),
    })
}

fn validate_cmd(args: ValidateArgs) -> Result<()> {
    let task = find_task(&args.manifest, &args.task)?;
    let violations = vrpilot_core::validate_task(&task);
    if !violations.is_empty() {
        bail!(
            "task {} is invalid: {}",
            task.id,
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        );
    }
    let workspace = stage_workspace(&task, 0, &scratch_dir(args.scratch))?;
    let patch = match &args.patch {
        Some(path) => {
            let code =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            apply_patch(&workspace, &task, &code)?;
            code
        }
        None => task.read_function_source()?,
    };
    let outcome = validate(&workspace, &task, &ValidationOptions::default())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&outcome)?);
    } else {
        for stage in &outcome.stages {
            println!(
                "{:<10} {} (exit {}, {} ms{})",
                stage.stage.as_str(),
                if stage.passed { "passed" } else { "failed" },
                stage.exit_code,
                stage.duration_ms,
                if stage.timed_out { ", timed out" } else { "" }
            );
        }
        println!("classification: {}", outcome.classification.as_str());
        if outcome.classification != Classification::Plausible {
            let fb = compose_feedback(&outcome, &task, &patch)?;
            println!("feedback:\n{}", fb.excerpt);
        }
    }
    if args.keep {
        eprintln!("workspace kept at {}", workspace.keep().display());
    }
    Ok(())
}

fn prompt_cmd(args: PromptArgs) -> Result<()> {
    let task = find_task(&args.manifest, &args.task)?;
    let source = task.read_function_source()?;
    let bundle = if args.mode == "vrpilot" {
        let mut text = build_task_text(&task, &source)?;
        let feedback = match (&args.feedback_patch, &args.feedback_error) {
            (Some(p), Some(e)) => {
                text = build_feedback_task_text(
                    &text,
                    &fs::read_to_string(p)?,
                    &fs::read_to_string(e)?,
                )?;
                true
            }
            _ => false,
        };
        let reasoning = if feedback {
            build_feedback_reasoning_prompt(&text)?
        } else {
            build_cot_reasoning_prompt(&text)?
        };
        match args.stage {
            PromptStage::Reasoning => reasoning,
            PromptStage::Answer => build_cot_answer_prompt(&reasoning, &args.reasoning)?,
            PromptStage::Direct => build_direct_prompt(&text)?,
        }
    } else {
        let variant: BaselineVariant = args.mode.parse()?;
        build_codexvr_prompt(variant, &task, &source)?
    };
    print!("{}", bundle.final_user_content());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let report = report::load_results(&args.input)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_report(&report);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Prompt(a) => prompt_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
