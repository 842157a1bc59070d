//! Runs the whole study end to end on a reduced corpus and lists the bundle.
//!
//! cargo run --release --example run_all [OUT_DIR]

use std::path::PathBuf;

use fglab::dataset::SynthConfig;
use fglab::pipeline::{run_all, PipelineConfig, TrainBudget};

fn main() -> fglab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fglab-run-all"));
    let cfg = PipelineConfig {
        seed: 11,
        synth: SynthConfig {
            train_per_category: 30,
            test_per_category: 8,
            ..SynthConfig::default()
        },
        budget: TrainBudget {
            iterations: 150,
            batch_size: 32,
            decay_every: 100,
        },
        unguided_limit: Some(20),
        vis_references: 40,
        ..PipelineConfig::default()
    };
    let manifest = run_all(&cfg, &out, |line| eprintln!("{line}"))?;
    for stage in &manifest.stages {
        println!("{} ({} files)", stage.stage, stage.files.len());
    }
    let fusion = std::fs::read_to_string(out.join("06-fusion/fusion.json"))?;
    println!("{fusion}");
    Ok(())
}
