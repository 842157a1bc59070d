//! Human-recognition study backend: balanced trial sets over coarse
//! categories, one masked image at a time, top-5 responses, and reports
//! comparing people with networks on the same images.

mod error;
mod service;
mod session;
mod store;

use std::collections::BTreeMap;
use std::path::Path;

pub use error::StudyError;
pub use service::{
    router, serve, CreateReply, CreateRequest, ErrorBody, NextReply, ResponseReply,
    ResponseRequest, StudyState,
};
pub use session::{
    build_report, parse_trial_id, sample_trials, trial_id, CategoryRow, Condition, Event,
    NetColumns, Response, RosterEntry, Session, StudyPool, StudyReport,
};
pub use store::EventStore;

use crate::dataset::{load_variant, LabelMerge, Split};
use crate::error::Result;
use crate::nn::load_network;

/// Loads `data/fg/manifest.jsonl` and `data/bg/manifest.jsonl` (test split),
/// optional display names from `data/roster.json` (a label-merge file), every
/// `*.ckpt` under `nets`, and replays the session log in `store`.
pub fn load_state(data: &Path, nets: &Path, store: &Path) -> Result<StudyState> {
    let names = match data.join("roster.json") {
        p if p.exists() => LabelMerge::load(&p)?.names,
        _ => Vec::new(),
    };
    let mut pools = Vec::new();
    for (cond, dir) in [(Condition::Fg, "fg"), (Condition::Bg, "bg")] {
        let manifest = data.join(dir).join("manifest.jsonl");
        if manifest.exists() {
            pools.push(StudyPool::from_variant(
                cond,
                &load_variant(&manifest, Split::Test)?,
                &names,
            ));
        }
    }
    let mut networks = BTreeMap::new();
    if nets.exists() {
        for entry in std::fs::read_dir(nets)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("ckpt") {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                networks.insert(id, load_network(&path)?);
            }
        }
    }
    Ok(StudyState::new(pools, networks, store)?)
}
