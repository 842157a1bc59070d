//! End-to-end run: datasets, four trainings, cross-evaluation, ratio curves,
//! proposals, fusion and patch grids, written as one report bundle.
//!
//! Each stage writes into its own directory and finishes by writing a
//! `stage.json` listing its files with their hashes. A rerun skips the
//! leading stages whose listed files still hash to the recorded values and
//! redoes everything from the first stage that does not.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    build_variant, load_variant, synth_generate, write_variant, BgFilter, DatasetKind,
    DatasetVariant, Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{cross_eval, ratio_binned_accuracy, PatchProtocol};
use crate::fusion::{fusion_report, FusionMode, FusionSpec, MemberScores, Role};
use crate::nn::{load_network, ArchSpec, Network};
use crate::proposals::{
    propose_variant, variant_recall, write_curve, write_proposals, ProposalConfig,
};
use crate::seed;
use crate::train::{epoch_count, train, write_log, TrainConfig};
use crate::visualize::{emit_grid, last_conv, top_patches, write_hits, GridLayout, Reference};

pub const STAGES: [&str; 7] = [
    "01-datasets",
    "02-train",
    "03-cross-eval",
    "04-ratio-curves",
    "05-proposals",
    "06-fusion",
    "07-visualize",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBudget {
    pub iterations: u64,
    pub batch_size: usize,
    pub decay_every: u64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            iterations: c.iterations,
            batch_size: c.batch_size,
            decay_every: c.optimizer.decay_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub bg_filter: BgFilter,
    /// Defaults to TinyNet sized for the corpus.
    pub arch: Option<ArchSpec>,
    pub budget: TrainBudget,
    /// Per-variant overrides of `budget`, keyed by variant name.
    pub budget_overrides: BTreeMap<String, TrainBudget>,
    pub protocol: PatchProtocol,
    pub ratio_thresholds: Vec<f64>,
    pub proposals: ProposalConfig,
    pub proposal_k: usize,
    /// Evaluate unguided fusion on at most this many test images.
    pub unguided_limit: Option<usize>,
    pub vis_filters: usize,
    pub vis_per_filter: usize,
    pub vis_references: usize,
    pub grid: GridLayout,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            bg_filter: BgFilter::Frame,
            arch: None,
            budget: TrainBudget::default(),
            budget_overrides: BTreeMap::new(),
            protocol: PatchProtocol::Ten,
            ratio_thresholds: vec![0.1, 0.2, 0.3, 0.5, 1.0],
            proposals: ProposalConfig::default(),
            proposal_k: 100,
            unguided_limit: None,
            vis_filters: 8,
            vis_per_filter: 8,
            vis_references: 200,
            grid: GridLayout::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
            .clone()
            .unwrap_or_else(|| ArchSpec::tiny_net(self.synth.categories.len(), 0.5))
    }

    fn budget_for(&self, kind: DatasetKind) -> &TrainBudget {
        self.budget_overrides
            .get(kind.as_str())
            .unwrap_or(&self.budget)
    }

    pub fn train_config(&self, kind: DatasetKind) -> TrainConfig {
        let b = self.budget_for(kind);
        let mut c = TrainConfig::for_kind(kind);
        c.iterations = b.iterations;
        c.batch_size = b.batch_size;
        c.optimizer.decay_every = b.decay_every;
        c.seed = seed::derive(self.seed, &format!("train/{kind}"));
        c.log_every = (b.iterations / 20).max(1);
        c
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    /// Relative path to SHA-256 for every file the stage wrote.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: String,
    pub root_seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn relative_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()) != Some("stage.json") {
                let rel = p
                    .strip_prefix(dir)
                    .expect("inside stage dir")
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, file_sha256(&p)?);
            }
        }
    }
    Ok(out)
}

/// The stage record if the stage finished and its files are intact.
fn verified(dir: &Path) -> Option<StageRecord> {
    let rec: StageRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.join("stage.json")).ok()?).ok()?;
    let ok = rec
        .files
        .iter()
        .all(|(rel, h)| file_sha256(&dir.join(rel)).is_ok_and(|x| &x == h));
    ok.then_some(rec)
}

/// Hash-prefixed checkpoint identity carried by every table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetRef {
    pub net: String,
    pub sha256: String,
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
}

impl Context<'_> {
    fn stage_dir(&self, i: usize) -> PathBuf {
        self.out.join(STAGES[i])
    }

    fn manifest(&self, kind: DatasetKind) -> PathBuf {
        self.stage_dir(0).join(kind.as_str()).join("manifest.jsonl")
    }

    fn test_set(&self, kind: DatasetKind) -> Result<DatasetVariant> {
        load_variant(&self.manifest(kind), Split::Test)
    }

    fn ckpt(&self, kind: DatasetKind) -> PathBuf {
        self.stage_dir(1).join(format!("{kind}.ckpt"))
    }

    fn net(&self, kind: DatasetKind) -> Result<(NetRef, Network<f32>)> {
        let path = self.ckpt(kind);
        Ok((
            NetRef {
                net: format!("{kind}-net"),
                sha256: file_sha256(&path)?,
            },
            load_network(&path)?,
        ))
    }
}

/// Runs every stage that is not already complete. Progress lines go to
/// `log`.
pub fn run_all(
    cfg: &PipelineConfig,
    out: &Path,
    mut log: impl FnMut(&str),
) -> Result<BundleManifest> {
    std::fs::create_dir_all(out)?;
    let ctx = Context { cfg, out };
    let mut records = Vec::new();
    let mut rerun = false;
    for (i, name) in STAGES.iter().enumerate() {
        let dir = ctx.stage_dir(i);
        if !rerun {
            if let Some(rec) = verified(&dir) {
                log(&format!("{name}: up to date"));
                records.push(rec);
                continue;
            }
        }
        rerun = true;
        log(&format!("{name}: running"));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        let stage_seed = seed::derive(cfg.seed, name);
        let run = match i {
            0 => stage_datasets(&ctx, stage_seed),
            1 => stage_train(&ctx, &mut log),
            2 => stage_cross_eval(&ctx),
            3 => stage_ratio_curves(&ctx),
            4 => stage_proposals(&ctx),
            5 => stage_fusion(&ctx),
            _ => stage_visualize(&ctx),
        };
        run.map_err(|e| Error::Stage {
            stage: name,
            source: Box::new(e),
        })?;
        let rec = StageRecord {
            stage: name.to_string(),
            seed: stage_seed,
            files: relative_files(&dir)?,
        };
        write_json(&dir.join("stage.json"), &rec)?;
        records.push(rec);
    }
    let manifest = BundleManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        root_seed: cfg.seed,
        config: cfg.clone(),
        stages: records,
    };
    write_json(&out.join("bundle.json"), &manifest)?;
    Ok(manifest)
}

fn stage_datasets(ctx: &Context, stage_seed: u64) -> Result<()> {
    let corpus = synth_generate(&ctx.cfg.synth, stage_seed)?;
    let mut summary = BTreeMap::new();
    for kind in DatasetKind::ALL {
        let train = build_variant(&corpus.train, kind, Split::Train, ctx.cfg.bg_filter)?;
        let test = build_variant(&corpus.test, kind, Split::Test, ctx.cfg.bg_filter)?;
        write_variant(&ctx.stage_dir(0).join(kind.as_str()), &[&train, &test])?;
        summary.insert(kind.as_str(), [train.len(), test.len()]);
    }
    write_json(
        &ctx.stage_dir(0).join("roster.json"),
        &ctx.cfg.synth.roster(),
    )?;
    write_json(&ctx.stage_dir(0).join("sizes.json"), &summary)
}

#[derive(Serialize)]
struct TrainRow {
    net: NetRef,
    iterations: u64,
    batch_size: usize,
    epochs: f64,
    final_loss: f64,
    final_train_top1: f64,
}

fn stage_train(ctx: &Context, log: &mut impl FnMut(&str)) -> Result<()> {
    let arch = ctx.cfg.arch();
    let mut rows = Vec::new();
    for kind in DatasetKind::ALL {
        let cfg = ctx.cfg.train_config(kind);
        let data = load_variant(&ctx.manifest(kind), Split::Train)?;
        log(&format!(
            "  training {kind}: {} images, {} iterations",
            data.len(),
            cfg.iterations
        ));
        let outcome = train(&cfg, &arch, &data)?;
        outcome.checkpoint.save(&ctx.ckpt(kind))?;
        write_log(
            &ctx.stage_dir(1).join(format!("{kind}.log.jsonl")),
            &outcome.log,
        )?;
        let last = outcome.log.last().expect("at least one log record");
        rows.push(TrainRow {
            net: ctx.net(kind)?.0,
            iterations: cfg.iterations,
            batch_size: cfg.batch_size,
            epochs: epoch_count(&cfg, data.len()),
            final_loss: last.loss,
            final_train_top1: last.train_top1,
        });
    }
    write_json(&ctx.stage_dir(1).join("train.json"), &rows)
}

#[derive(Serialize)]
struct EvalRow {
    net: NetRef,
    set: String,
    top1: f64,
    top5: f64,
}

fn stage_cross_eval(ctx: &Context) -> Result<()> {
    let nets = DatasetKind::ALL
        .iter()
        .map(|&k| ctx.net(k))
        .collect::<Result<Vec<_>>>()?;
    let sets = [DatasetKind::Orig, DatasetKind::Fg, DatasetKind::Bg]
        .iter()
        .map(|&k| ctx.test_set(k))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, &Network<f32>)> =
        nets.iter().map(|(r, n)| (r.net.clone(), n)).collect();
    let matrix = cross_eval(&named, &sets.iter().collect::<Vec<_>>(), ctx.cfg.protocol)?;
    let rows: Vec<EvalRow> = matrix
        .iter()
        .zip(&nets)
        .flat_map(|(row, (r, _))| {
            row.iter().map(|rep| EvalRow {
                net: r.clone(),
                set: rep.dataset_id.clone(),
                top1: rep.top1.value(),
                top5: rep.top5.value(),
            })
        })
        .collect();
    write_json(&ctx.stage_dir(2).join("cross_eval.json"), &rows)
}

#[derive(Serialize)]
struct CurveRowOut {
    net: NetRef,
    set: String,
    thresholds: Vec<f64>,
    counts: Vec<usize>,
    accuracy: Vec<Option<f64>>,
}

fn stage_ratio_curves(ctx: &Context) -> Result<()> {
    let pairs = [
        (DatasetKind::Orig, DatasetKind::Orig),
        (DatasetKind::Fg, DatasetKind::Fg),
        (DatasetKind::Bg, DatasetKind::Bg),
        (DatasetKind::Hybrid, DatasetKind::Orig),
    ];
    let mut rows = Vec::new();
    for (net_kind, set_kind) in pairs {
        let (r, net) = ctx.net(net_kind)?;
        let set = ctx.test_set(set_kind)?;
        let c = ratio_binned_accuracy(&net, &set, &ctx.cfg.ratio_thresholds, ctx.cfg.protocol)?;
        rows.push(CurveRowOut {
            net: r,
            set: set.id(),
            thresholds: c.thresholds,
            counts: c.counts,
            accuracy: c.accuracy,
        });
    }
    write_json(&ctx.stage_dir(3).join("ratio_curves.json"), &rows)
}

fn stage_proposals(ctx: &Context) -> Result<()> {
    let test = ctx.test_set(DatasetKind::Orig)?;
    let props = propose_variant(&test, ctx.cfg.proposal_k, &ctx.cfg.proposals)?;
    let dir = ctx.stage_dir(4);
    write_proposals(&dir.join("proposals.jsonl"), &props)?;
    let curve = variant_recall(&test, &props, 0.7, ctx.cfg.proposal_k)?;
    write_curve(&dir.join("recall.jsonl"), &curve)?;
    let at = |k: usize| curve.at(k.min(ctx.cfg.proposal_k)).value();
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "iou_threshold": 0.7,
            "images": test.len(),
            "recall_at_1": at(1),
            "recall_at_10": at(10),
            "recall_at_100": at(100),
        }),
    )
}

#[derive(Serialize)]
struct FusionRow {
    mode: FusionMode,
    members: Vec<NetRef>,
    roles: Vec<Role>,
    weights: Vec<f64>,
    samples: usize,
    top1: f64,
    top5: f64,
}

fn stage_fusion(ctx: &Context) -> Result<()> {
    let loaded: Vec<(NetRef, Network<f32>)> = [
        DatasetKind::Orig,
        DatasetKind::Fg,
        DatasetKind::Bg,
        DatasetKind::Hybrid,
    ]
    .iter()
    .map(|&k| ctx.net(k))
    .collect::<Result<_>>()?;
    let roles = [Role::Orig, Role::Fg, Role::Bg, Role::Orig];
    let full = FusionSpec {
        members: loaded
            .iter()
            .zip(roles)
            .map(|((r, _), role)| crate::fusion::FusionMember {
                ckpt: r.net.clone(),
                role,
                weight: 1.0,
            })
            .collect(),
        mode: FusionMode::Guided,
        proposal_k: ctx.cfg.proposal_k,
    };
    let nets: Vec<&Network<f32>> = loaded.iter().map(|(_, n)| n).collect();
    let mut test = ctx.test_set(DatasetKind::Orig)?;
    let proposals = crate::proposals::read_proposals(&ctx.stage_dir(4).join("proposals.jsonl"))?;
    // Member subsets, as indices into `loaded`: orig, fg, bg, hybrid.
    let combos: [&[usize]; 7] = [&[1], &[2], &[1, 2], &[0], &[0, 1, 2], &[3], &[3, 2]];
    let mut rows = Vec::new();
    for mode in [FusionMode::Guided, FusionMode::Unguided] {
        if mode == FusionMode::Unguided {
            if let Some(limit) = ctx.cfg.unguided_limit {
                test.items.truncate(limit);
            }
        }
        let spec = FusionSpec {
            mode,
            ..full.clone()
        };
        let scores = MemberScores::compute(&spec, &nets, &test, Some(&proposals))?;
        for combo in combos {
            let mut sub = spec.clone();
            for (i, m) in sub.members.iter_mut().enumerate() {
                m.weight = if combo.contains(&i) { 1.0 } else { 0.0 };
            }
            let rep = fusion_report(&sub, &scores)?;
            rows.push(FusionRow {
                mode,
                members: combo.iter().map(|&i| loaded[i].0.clone()).collect(),
                roles: combo.iter().map(|&i| roles[i]).collect(),
                weights: combo.iter().map(|_| 1.0).collect(),
                samples: rep.samples,
                top1: rep.top1.value(),
                top5: rep.top5.value(),
            });
        }
    }
    write_json(&ctx.stage_dir(5).join("fusion.json"), &rows)
}

fn stage_visualize(ctx: &Context) -> Result<()> {
    let dir = ctx.stage_dir(6);
    for kind in [DatasetKind::Orig, DatasetKind::Fg, DatasetKind::Bg] {
        let (_, net) = ctx.net(kind)?;
        let layer = last_conv(net.arch())
            .ok_or_else(|| Error::Config("network has no convolution".into()))?;
        let nf = net.output_shape_of(layer)[0].min(ctx.cfg.vis_filters);
        let set = ctx.test_set(kind)?;
        let refs: Vec<Reference> = set
            .items
            .iter()
            .take(ctx.cfg.vis_references)
            .map(|i| Reference::new(i.record.source_id.clone(), &i.image, &net))
            .collect();
        let filters: Vec<usize> = (0..nf).collect();
        let hits = top_patches(&net, layer, &filters, &refs, ctx.cfg.vis_per_filter)?;
        write_hits(&dir.join(format!("{kind}.hits.jsonl")), &hits)?;
        let by_id: BTreeMap<&str, &Reference> =
            refs.iter().map(|r| (r.source_id.as_str(), r)).collect();
        emit_grid(
            &hits,
            ctx.cfg.grid,
            |id| {
                by_id
                    .get(id)
                    .map(|r| r.image.clone())
                    .ok_or_else(|| Error::Config(format!("{id} is not a reference image")))
            },
            &dir.join(format!("{kind}.grid.png")),
        )?;
    }
    Ok(())
}
