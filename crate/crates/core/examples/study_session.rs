//! Starts the study service on a local port and plays one short session over
//! HTTP, then prints the report next to a network's accuracy on the same
//! images.
//!
//! cargo run --release --example study_session

use std::sync::Arc;

use fglab::dataset::{
    build_variant, synth_generate, write_variant, BgFilter, DatasetKind, Split, SynthConfig,
};
use fglab::nn::{ArchSpec, Checkpoint, Network};
use fglab::{seed, study};
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("fglab-study");
    let _ = std::fs::remove_dir_all(&root);
    let (data, nets, store) = (root.join("data"), root.join("nets"), root.join("sessions"));

    let cfg = SynthConfig {
        train_per_category: 1,
        test_per_category: 4,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 7)?;
    for kind in [DatasetKind::Fg, DatasetKind::Bg] {
        let test = build_variant(&corpus.test, kind, Split::Test, BgFilter::Frame)?;
        write_variant(&data.join(kind.as_str()), &[&test])?;
    }
    std::fs::write(data.join("roster.json"), serde_json::to_vec(&cfg.roster())?)?;
    std::fs::create_dir_all(&nets)?;
    let net = Network::<f32>::init(ArchSpec::tiny_net(10, 0.5), &mut seed::rng(1))?;
    Checkpoint::new(net, None, Default::default(), 0, 1).save(&nets.join("untrained.ckpt"))?;

    let state = Arc::new(study::load_state(&data, &nets, &store)?);
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("runtime");
        rt.block_on(study::serve(state, "127.0.0.1:0".parse().unwrap(), |a| {
            tx.send(a).unwrap()
        }))
    });
    let base = format!("http://{}", rx.recv()?);

    let created: Value = ureq::post(&format!("{base}/sessions"))
        .send_json(json!({ "condition": "fg", "trial_count": 10, "seed": 3, "cover_all": true }))?
        .into_json()?;
    let sid = created["session_id"].as_str().unwrap();
    println!(
        "session {sid}, roster of {}",
        created["roster"].as_array().unwrap().len()
    );
    loop {
        let resp = ureq::get(&format!("{base}/sessions/{sid}/next")).call()?;
        if resp.status() == 204 {
            break;
        }
        let next: Value = resp.into_json()?;
        ureq::get(&format!("{base}{}", next["image_url"].as_str().unwrap())).call()?;
        ureq::post(&format!("{base}/sessions/{sid}/responses"))
            .send_json(json!({ "trial_id": next["trial_id"], "picks": [0, 1, 2] }))?;
    }
    let report: Value = ureq::get(&format!("{base}/sessions/{sid}/report?net=untrained"))
        .call()?
        .into_json()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
