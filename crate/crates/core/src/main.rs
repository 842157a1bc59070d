use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fglab::dataset::{
    build_datasets, build_variant, load_variant, synth_generate, write_variant, BgFilter,
    BuildOptions, DatasetKind, LabelMerge, Split, SynthConfig,
};
use fglab::eval::{evaluate, topk_accuracy, write_scores, PatchProtocol};
use fglab::fusion::{fusion_report, FusionMode, FusionSpec, MemberScores};
use fglab::nn::{load_network, ArchSpec, Checkpoint};
use fglab::pipeline::{run_all, PipelineConfig};
use fglab::proposals::{
    propose_variant, read_proposals, variant_recall, write_curve, write_proposals, ProposalConfig,
};
use fglab::train::{write_log, TrainConfig, TrainData, Trainer};
use fglab::visualize::{emit_grid, last_conv, top_patches, write_hits, GridLayout, Reference};
use fglab::{study, Error, Result};

#[derive(Parser)]
#[command(name = "fglab", version, about = "Figure-ground ablation lab")]
struct Cli {
    /// Root seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as an annotated manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build dataset variants from an annotated manifest.
    BuildDatasets {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "orig,fg,bg,hybrid")]
        kinds: Vec<DatasetKind>,
        #[arg(long, default_value = "frame")]
        bg_filter: BgFilter,
        #[arg(long)]
        merge: Option<PathBuf>,
    },
    /// Train a network on one variant.
    Train {
        #[arg(long)]
        variant: DatasetKind,
        /// Variant directory or its manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architecture file; TinyNet sized for the data otherwise.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Continue from a resumable checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log path; next to the checkpoint by default.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Top-k accuracy of one network on one test set.
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        #[arg(long, default_value = "ten")]
        patches: PatchProtocol,
        #[arg(long)]
        dump_scores: Option<PathBuf>,
    },
    /// Every network on every test set.
    CrossEval {
        #[arg(long, value_delimiter = ',', required = true)]
        nets: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        sets: Vec<PathBuf>,
        #[arg(long, default_value = "ten")]
        patches: PatchProtocol,
    },
    /// Box proposals for every image of a set.
    Propose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Recall of stored proposals against the annotated boxes.
    Recall {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long = "kmax", alias = "k-max", default_value_t = 100)]
        k_max: usize,
    },
    /// Fused top-k of several networks.
    Fuse {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Stored proposals for unguided mode; generated when absent.
        #[arg(long)]
        proposals: Option<PathBuf>,
    },
    /// Grid of strongest-responding patches.
    Visualize {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Layer index; the last convolution by default.
        #[arg(long)]
        layer: Option<usize>,
        /// Filter range `a..b` (half-open) or comma list.
        #[arg(long, default_value = "0..8")]
        filters: String,
        #[arg(long, default_value_t = 8)]
        per_filter: usize,
        #[arg(long, default_value_t = 200)]
        references: usize,
        /// Hit records path; next to the grid by default.
        #[arg(long)]
        hits: Option<PathBuf>,
    },
    /// HTTP backend for the recognition study.
    ServeStudy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        nets: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Session log directory; `--out` or `<data>/sessions` by default.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// The whole experiment into one bundle directory.
    RunAll {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split `{other}` (train|test)")),
    }
}

fn need_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::Config("--out is required for this subcommand".into()))
}

fn manifest_of(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn net_id(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("net")
        .to_string()
}

fn parse_filters(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad filter list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = &cli.out;
    match cli.command {
        Command::Synth { config } => {
            let cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SynthConfig::default(),
            };
            let dir = need_out(out)?;
            let corpus = synth_generate(&cfg, cli.seed.unwrap_or(0))?;
            let train = build_variant(
                &corpus.train,
                DatasetKind::Orig,
                Split::Train,
                BgFilter::Frame,
            )?;
            let test = build_variant(
                &corpus.test,
                DatasetKind::Orig,
                Split::Test,
                BgFilter::Frame,
            )?;
            let manifest = write_variant(dir, &[&train, &test])?;
            write_json(&dir.join("roster.json"), &cfg.roster())?;
            println!(
                "{} train, {} test -> {}",
                train.len(),
                test.len(),
                manifest.display()
            );
        }

        Command::BuildDatasets {
            input,
            kinds,
            bg_filter,
            merge,
        } => {
            let dir = need_out(out)?;
            let input = manifest_of(&input);
            let merge = merge.as_deref().map(LabelMerge::load).transpose()?;
            let written = build_datasets(&BuildOptions {
                input: input.clone(),
                out: dir.to_path_buf(),
                kinds,
                bg_filter,
                merge: merge.clone(),
            })?;
            let roster = input.with_file_name("roster.json");
            match merge {
                Some(m) if !m.names.is_empty() => write_json(&dir.join("roster.json"), &m)?,
                None if roster.exists() => {
                    std::fs::copy(&roster, dir.join("roster.json"))?;
                }
                _ => {}
            }
            for p in written {
                println!("{}", p.display());
            }
        }

        Command::Train {
            variant,
            data,
            config,
            arch,
            resume,
            log,
        } => {
            let ckpt_path = need_out(out)?;
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::for_kind(variant),
            };
            cfg.kind = variant;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let set = load_variant(&manifest_of(&data), Split::Train)?;
            if set.kind != variant {
                return Err(Error::Config(format!(
                    "--variant {variant} but the data is {}",
                    set.kind
                )));
            }
            let resume = resume.as_deref().map(Checkpoint::<f32>::load).transpose()?;
            let arch = match (&resume, arch) {
                (Some(c), None) => c.net.arch().clone(),
                (Some(c), Some(p))
                    if ArchSpec::load(&p)?.with_drop_prob(cfg.drop_prob) != *c.net.arch() =>
                {
                    return Err(Error::Config(format!(
                        "{} does not match the checkpoint",
                        p.display()
                    )));
                }
                (Some(c), Some(_)) => c.net.arch().clone(),
                (None, Some(p)) => ArchSpec::load(&p)?,
                (None, None) => ArchSpec::tiny_net(set.category_span(), cfg.drop_prob),
            };
            let td = TrainData::from_variant(&set, &arch)?;
            let mut trainer = match resume {
                Some(c) => Trainer::resume(cfg.clone(), c, &td)?,
                None => Trainer::new(cfg.clone(), arch, &td)?,
            };
            if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            trainer.run_until(cfg.iterations, |c| c.save(ckpt_path))?;
            trainer.checkpoint().save(ckpt_path)?;
            let log_path = log.unwrap_or_else(|| ckpt_path.with_extension("log.jsonl"));
            write_log(&log_path, trainer.log())?;
            if let Some(last) = trainer.log().last() {
                println!(
                    "iter {} loss {:.4} train top-1 {:.3} -> {}",
                    last.iter,
                    last.loss,
                    last.train_top1,
                    ckpt_path.display()
                );
            }
        }

        Command::Eval {
            net,
            data,
            k,
            patches,
            dump_scores,
        } => {
            let model = load_network(&net)?;
            let set = load_variant(&manifest_of(&data), Split::Test)?;
            let report = evaluate(&model, &net_id(&net), &set, patches, true)?;
            let rows = report.scores.as_deref().unwrap_or_default();
            let scores: Vec<Vec<f32>> = rows.iter().map(|r| r.scores.clone()).collect();
            let labels: Vec<u32> = rows.iter().map(|r| r.label).collect();
            let mut topk = BTreeMap::new();
            for &k in &k {
                topk.insert(
                    format!("top{k}"),
                    topk_accuracy(&scores, &labels, k)?.value(),
                );
            }
            #[derive(Serialize)]
            struct Summary<'a> {
                net_id: &'a str,
                dataset_id: &'a str,
                samples: usize,
                #[serde(flatten)]
                topk: BTreeMap<String, f64>,
            }
            let summary = Summary {
                net_id: &report.net_id,
                dataset_id: &report.dataset_id,
                samples: rows.len(),
                topk,
            };
            if let Some(p) = dump_scores {
                write_scores(&p, rows)?;
            }
            if let Some(p) = out {
                write_json(p, &summary)?;
            }
            print_json(&summary)?;
        }

        Command::CrossEval {
            nets,
            sets,
            patches,
        } => {
            let models = nets
                .iter()
                .map(|p| load_network(p))
                .collect::<Result<Vec<_>>>()?;
            let named: Vec<(String, &_)> =
                nets.iter().map(|p| net_id(p)).zip(models.iter()).collect();
            let variants = sets
                .iter()
                .map(|p| load_variant(&manifest_of(p), Split::Test))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = variants.iter().collect();
            let table = fglab::eval::cross_eval(&named, &refs, patches)?;
            if let Some(p) = out {
                write_json(p, &table)?;
            }
            for row in &table {
                for r in row {
                    println!(
                        "{:<16} {:<16} top1 {:.4} top5 {:.4}",
                        r.net_id,
                        r.dataset_id,
                        r.top1.value(),
                        r.top5.value()
                    );
                }
            }
        }

        Command::Propose {
            data,
            k,
            config,
            split,
        } => {
            let path = need_out(out)?;
            let cfg = match config {
                Some(p) => ProposalConfig::load(&p)?,
                None => ProposalConfig::default(),
            };
            let set = load_variant(&manifest_of(&data), split)?;
            let props = propose_variant(&set, k, &cfg)?;
            write_proposals(path, &props)?;
            println!("{} images -> {}", props.len(), path.display());
        }

        Command::Recall {
            proposals,
            data,
            iou,
            k_max,
        } => {
            let props = read_proposals(&proposals)?;
            let set = load_variant(&manifest_of(&data), Split::Test)?;
            let curve = variant_recall(&set, &props, iou, k_max)?;
            if let Some(p) = out {
                write_curve(p, &curve)?;
            }
            for k in [1, 10, 100, 1000].into_iter().filter(|&k| k <= k_max) {
                println!("recall@{k} = {:.4}", curve.at(k).value());
            }
        }

        Command::Fuse {
            spec,
            data,
            proposals,
        } => {
            let mut fs = FusionSpec::load(&spec)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            for m in &mut fs.members {
                let p = Path::new(&m.ckpt);
                if p.is_relative() && !p.exists() {
                    m.ckpt = base.join(p).to_string_lossy().into_owned();
                }
            }
            let models = fs
                .members
                .iter()
                .map(|m| load_network(Path::new(&m.ckpt)))
                .collect::<Result<Vec<_>>>()?;
            let nets: Vec<_> = models.iter().collect();
            let set = load_variant(&manifest_of(&data), Split::Test)?;
            let props = match (fs.mode, proposals) {
                (FusionMode::Guided, _) => None,
                (FusionMode::Unguided, Some(p)) => Some(read_proposals(&p)?),
                (FusionMode::Unguided, None) => Some(propose_variant(
                    &set,
                    fs.proposal_k,
                    &ProposalConfig::default(),
                )?),
            };
            let scores = MemberScores::compute(&fs, &nets, &set, props.as_ref())?;
            let report = fusion_report(&fs, &scores)?;
            if let Some(p) = out {
                write_json(p, &report)?;
            }
            print_json(&report)?;
        }

        Command::Visualize {
            net,
            data,
            layer,
            filters,
            per_filter,
            references,
            hits,
        } => {
            let png = need_out(out)?;
            let model = load_network(&net)?;
            let layer = match layer {
                Some(l) => l,
                None => last_conv(model.arch())
                    .ok_or_else(|| Error::Config("network has no convolution".into()))?,
            };
            let filters = parse_filters(&filters)?;
            let set = load_variant(&manifest_of(&data), Split::Test)?;
            let refs: Vec<Reference> = set
                .items
                .iter()
                .take(references)
                .map(|i| Reference::new(i.record.source_id.clone(), &i.image, &model))
                .collect();
            let found = top_patches(&model, layer, &filters, &refs, per_filter)?;
            let by_id: BTreeMap<&str, &Reference> =
                refs.iter().map(|r| (r.source_id.as_str(), r)).collect();
            emit_grid(
                &found,
                GridLayout::default(),
                |id| Ok(by_id[id].image.clone()),
                png,
            )?;
            write_hits(
                &hits.unwrap_or_else(|| png.with_extension("hits.jsonl")),
                &found,
            )?;
            println!(
                "{} filters x {per_filter} -> {}",
                filters.len(),
                png.display()
            );
        }

        Command::ServeStudy {
            data,
            nets,
            port,
            host,
            store,
        } => {
            let store = store
                .or_else(|| out.clone())
                .unwrap_or_else(|| data.join("sessions"));
            let state = Arc::new(study::load_state(&data, &nets, &store)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(study::serve(state, SocketAddr::new(host, port), |addr| {
                println!("listening on {addr}");
                let _ = std::io::stdout().flush();
            }))?;
        }

        Command::RunAll { config } => {
            let dir = need_out(out)?;
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let bundle = run_all(&cfg, dir, |line| eprintln!("{line}"))?;
            println!(
                "{} stages -> {}",
                bundle.stages.len(),
                dir.join("bundle.json").display()
            );
        }
    }
    Ok(())
}
