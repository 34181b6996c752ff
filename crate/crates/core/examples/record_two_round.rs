//! Records the two-round repair of the toy fixture into a transcript file.
//!
//! ```bash
//! cargo run -p vrpilot-core --example record_two_round -- fixtures/toy-overflow
//! ```

use std::fs;
use std::path::PathBuf;

use vrpilot_core::gateway::RecordingBackend;
use vrpilot_core::{load_manifest, repair_task, RunConfig, RunOptions, ScriptedBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixture = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "fixtures/toy-overflow".into()),
    );
    let task = load_manifest(&fixture.join("manifest.json"))?.remove(0);
    let responses = [
        "round1_reasoning.txt",
        "round1_answer.md",
        "round2_reasoning.txt",
        "round2_answer.md",
    ]
    .iter()
    .map(|f| fs::read_to_string(fixture.join("responses").join(f)))
    .collect::<Result<Vec<_>, _>>()?;
    let backend = RecordingBackend::new(ScriptedBackend::new(responses));
    let config = RunConfig {
        stop_on_first_plausible: true,
        ..RunConfig::default()
    };
    let scratch = tempfile::tempdir()?;
    let records = repair_task(&task, &config, &backend, &RunOptions::new(scratch.path()))?;
    for r in &records {
        println!(
            "t={} attempt={} -> {:?}",
            r.temperature,
            r.attempt_index,
            r.classification()
        );
    }
    let out = fixture.join("transcripts/two_round.json");
    backend.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
