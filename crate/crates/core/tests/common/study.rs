//! HTTP client and checks for the study service.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use fglab::dataset::{load_variant, read_manifest, DatasetVariant, Split};
use fglab::eval::{evaluate, PatchProtocol};
use fglab::geometry::Ratio;
use fglab::nn::load_network;
use fglab::study::{self, Event, StudyReport};
use serde_json::{json, Value};

use super::study_fixture;

pub struct Api {
    pub base: String,
}

impl Api {
    pub fn call(&self, req: ureq::Request, body: Option<Value>) -> (u16, Value) {
        let res = match body {
            Some(b) => req.send_json(b),
            None => req.call(),
        };
        let resp = match res {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => panic!("transport error: {e}"),
        };
        let status = resp.status();
        if status == 204 {
            return (status, Value::Null);
        }
        if resp.content_type() == "image/png" {
            let mut bytes = Vec::new();
            std::io::Read::read_to_end(&mut resp.into_reader(), &mut bytes).unwrap();
            assert_eq!(&bytes[1..4], b"PNG");
            return (status, json!({ "png_bytes": bytes.len() }));
        }
        (status, resp.into_json().unwrap())
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        self.call(ureq::get(&format!("{}{path}", self.base)), None)
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.call(ureq::post(&format!("{}{path}", self.base)), Some(body))
    }

    pub fn create(
        &self,
        condition: &str,
        trials: usize,
        seed: u64,
        cover: bool,
    ) -> (String, Value) {
        let (s, v) = self.post(
            "/sessions",
            json!({ "condition": condition, "trial_count": trials, "seed": seed, "cover_all": cover }),
        );
        assert_eq!(s, 200, "{v}");
        (v["session_id"].as_str().unwrap().to_string(), v)
    }

    /// Serves the next trial and fetches its image; returns the trial id.
    pub fn serve(&self, session: &str) -> Option<String> {
        let (s, v) = self.get(&format!("/sessions/{session}/next"));
        if s == 204 {
            return None;
        }
        assert_eq!(s, 200, "{v}");
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["image_url", "remaining", "trial_id"],
            "no label may leak"
        );
        let (s, _) = self.get(v["image_url"].as_str().unwrap());
        assert_eq!(s, 200);
        Some(v["trial_id"].as_str().unwrap().to_string())
    }

    pub fn answer(&self, session: &str, trial: &str, picks: &[u32]) -> (u16, Value) {
        self.post(
            &format!("/sessions/{session}/responses"),
            json!({ "trial_id": trial, "picks": picks, "elapsed_ms": 1500 }),
        )
    }
}

pub fn start_in_process(data: &Path, nets: &Path, store: &Path) -> Api {
    let state = Arc::new(study::load_state(data, nets, store).unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(study::serve(state, "127.0.0.1:0".parse().unwrap(), |a| {
            tx.send(a).unwrap()
        }))
        .unwrap();
    });
    Api {
        base: format!("http://{}", rx.recv().unwrap()),
    }
}

pub struct Server {
    child: Child,
    pub api: Api,
}

impl Server {
    pub fn spawn(data: &Path, nets: &Path, store: &Path) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_fglab"))
            .args(["serve-study", "--port", "0", "--data"])
            .arg(data)
            .arg("--nets")
            .arg(nets)
            .arg("--store")
            .arg(store)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .expect("address line")
            .to_string();
        Self {
            child,
            api: Api {
                base: format!("http://{addr}"),
            },
        }
    }

    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

pub fn fixture(per_category: usize) -> (tempfile::TempDir, PathBuf, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let (data, nets) = study_fixture(dir.path(), per_category);
    let store = dir.path().join("sessions");
    (dir, data, nets, store)
}

pub fn trial_sources(store: &Path, session: &str) -> Vec<String> {
    let text = std::fs::read_to_string(store.join(format!("{session}.jsonl"))).unwrap();
    match serde_json::from_str(text.lines().next().unwrap()).unwrap() {
        Event::Created { trials, .. } => trials,
        other => panic!("first event is {other:?}"),
    }
}

pub fn fg_labels(data: &Path) -> BTreeMap<String, u32> {
    read_manifest(&data.join("fg/manifest.jsonl"))
        .unwrap()
        .into_iter()
        .map(|r| (r.source_id, r.label))
        .collect()
}

/// Four answered trials with hits at rank 1, rank 3, a miss and rank 1.
pub fn four_trial_oracle(api: &Api, data: &Path, store: &Path) {
    let (sid, _) = api.create("fg", 4, 12, false);
    let sources = trial_sources(store, &sid);
    let labels = fg_labels(data);
    let wrong = |l: u32| (l + 1) % 4;
    let other = |l: u32| (l + 2) % 4;
    // Hit at rank 1, hit at rank 3, miss, hit at rank 1.
    let plans: Vec<Vec<u32>> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let l = labels[s];
            match i {
                0 | 3 => vec![l],
                1 => vec![wrong(l), other(l), l],
                _ => vec![wrong(l), other(l)],
            }
        })
        .collect();
    for plan in &plans {
        let t = api.serve(&sid).unwrap();
        assert_eq!(api.answer(&sid, &t, plan).0, 200);
    }
    let (_, v) = api.get(&format!("/sessions/{sid}/report"));
    let r: StudyReport = serde_json::from_value(v).unwrap();
    assert_eq!(r.human_top1, Ratio::of(2, 4));
    assert_eq!(r.human_top5, Ratio::of(3, 4));
    let mut expect: BTreeMap<u32, (usize, u64, u64)> = BTreeMap::new();
    for (i, s) in sources.iter().enumerate() {
        let e = expect.entry(labels[s]).or_default();
        e.0 += 1;
        e.1 += (i == 0 || i == 3) as u64;
        e.2 += (i != 2) as u64;
    }
    for row in &r.per_category {
        let (n, t1, t5) = expect[&row.label];
        assert_eq!(row.answered, n);
        assert_eq!(row.human_top1, Ratio::of(t1, n as u64));
        assert_eq!(row.human_top5, Ratio::of(t5, n as u64));
    }
}

/// Network columns of fg and bg reports against `evaluate` on the served subset.
pub fn network_columns_match(api: &Api, data: &Path, nets: &Path, store: &Path) {
    for cond in ["fg", "bg"] {
        let (sid, _) = api.create(cond, 12, 5, true);
        while let Some(t) = api.serve(&sid) {
            api.answer(&sid, &t, &[3]);
        }
        let (s, v) = api.get(&format!("/sessions/{sid}/report?net=small"));
        assert_eq!(s, 200, "{v}");
        let r: StudyReport = serde_json::from_value(v).unwrap();
        let cols = r.network.unwrap();

        let wanted = trial_sources(store, &sid);
        let full = load_variant(&data.join(cond).join("manifest.jsonl"), Split::Test).unwrap();
        let subset = DatasetVariant {
            items: full
                .items
                .iter()
                .filter(|i| wanted.contains(&i.record.source_id))
                .cloned()
                .collect(),
            ..full.clone()
        };
        assert_eq!(subset.len(), 12);
        let net = load_network(&nets.join("small.ckpt")).unwrap();
        let direct = evaluate(&net, "small", &subset, PatchProtocol::Ten, false).unwrap();
        assert_eq!(cols.top1.value().to_bits(), direct.top1.value().to_bits());
        assert_eq!(cols.top5.value().to_bits(), direct.top5.value().to_bits());
    }
}

/// Answers `rounds` trials, killing the server after every acknowledgment,
/// and checks after each restart that nothing acknowledged was lost.
pub fn kill_resume_trials(data: &Path, nets: &Path, store: &Path, rounds: usize) {
    let mut server = Server::spawn(data, nets, store);
    let (sid, _) = server.api.create("fg", rounds, 9, true);
    for k in 0..rounds {
        let trial = server.api.serve(&sid).unwrap();
        assert_eq!(
            trial,
            format!("{sid}-t{k}"),
            "round {k}: resumed at the wrong trial"
        );
        let (s, v) = server.api.answer(&sid, &trial, &[(k % 4) as u32]);
        assert_eq!((s, v["accepted"].as_bool()), (200, Some(true)));
        server.kill();
        server = Server::spawn(data, nets, store);
        let (s, v) = server
            .api
            .get(&format!("/sessions/{sid}/report?partial=true"));
        assert_eq!(s, 200, "{v}");
        assert_eq!(
            v["answered"].as_u64(),
            Some(k as u64 + 1),
            "round {k}: acknowledged response lost"
        );
    }
    assert!(server.api.serve(&sid).is_none());
    let (s, v) = server.api.get(&format!("/sessions/{sid}/report"));
    assert_eq!((s, v["complete"].as_bool()), (200, Some(true)));
    server.kill();
}
