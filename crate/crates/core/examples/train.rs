//! Trains TinyNet on the foreground variant of a small corpus, saves the
//! checkpoint and reports ten-patch accuracy on the test split.
//!
//! cargo run --release --example train [OUT_DIR]

use std::path::PathBuf;

use fglab::dataset::{build_variant, synth_generate, BgFilter, DatasetKind, Split, SynthConfig};
use fglab::eval::{evaluate, PatchProtocol};
use fglab::nn::ArchSpec;
use fglab::train::{train, TrainConfig};

fn main() -> fglab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fglab-train"));
    std::fs::create_dir_all(&out)?;
    let cfg = SynthConfig {
        train_per_category: 40,
        test_per_category: 10,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 2)?;
    let train_set = build_variant(
        &corpus.train,
        DatasetKind::Fg,
        Split::Train,
        BgFilter::Frame,
    )?;
    let test_set = build_variant(&corpus.test, DatasetKind::Fg, Split::Test, BgFilter::Frame)?;

    let mut tc = TrainConfig::for_kind(DatasetKind::Fg);
    tc.iterations = 300;
    tc.batch_size = 32;
    tc.log_every = 50;
    tc.optimizer.decay_every = 200;
    let run = train(
        &tc,
        &ArchSpec::tiny_net(cfg.categories.len(), 0.5),
        &train_set,
    )?;
    for r in &run.log {
        println!(
            "iter {:>4}  lr {:.4}  loss {:.3}  train top-1 {:.2}",
            r.iter, r.lr, r.loss, r.train_top1
        );
    }
    let path = out.join("fg.ckpt");
    run.checkpoint.save(&path)?;
    let report = evaluate(run.net(), "fg", &test_set, PatchProtocol::Ten, false)?;
    println!("test top-1 {}  top-5 {}", report.top1, report.top5);
    println!("saved {}", path.display());
    Ok(())
}
