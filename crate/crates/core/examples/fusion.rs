//! Late fusion of a foreground and a background network, with and without
//! ground-truth boxes.
//!
//! cargo run --release --example fusion

use fglab::dataset::{build_variant, synth_generate, BgFilter, DatasetKind, Split, SynthConfig};
use fglab::fusion::{fusion_report, tune_weights, FusionMode, FusionSpec, MemberScores, Role};
use fglab::nn::{ArchSpec, Network};
use fglab::proposals::{propose_variant, ProposalConfig};
use fglab::train::{train, TrainConfig};

fn main() -> fglab::Result<()> {
    let cfg = SynthConfig {
        train_per_category: 40,
        test_per_category: 10,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 5)?;
    let fit = |kind| -> fglab::Result<Network<f32>> {
        let set = build_variant(&corpus.train, kind, Split::Train, BgFilter::Frame)?;
        let mut tc = TrainConfig::for_kind(kind);
        tc.iterations = 300;
        tc.batch_size = 32;
        tc.optimizer.decay_every = 200;
        Ok(
            train(&tc, &ArchSpec::tiny_net(cfg.categories.len(), 0.5), &set)?
                .checkpoint
                .net,
        )
    };
    let (fg, bg) = (fit(DatasetKind::Fg)?, fit(DatasetKind::Bg)?);
    let nets = [&fg, &bg];
    let test = build_variant(
        &corpus.test,
        DatasetKind::Orig,
        Split::Test,
        BgFilter::Frame,
    )?;
    let proposals = propose_variant(&test, 100, &ProposalConfig::default())?;

    for mode in [FusionMode::Guided, FusionMode::Unguided] {
        let spec = FusionSpec::equal(mode, &[("fg", Role::Fg), ("bg", Role::Bg)]);
        let scores = MemberScores::compute(&spec, &nets, &test, Some(&proposals))?;
        let r = fusion_report(&spec, &scores)?;
        println!(
            "{mode:?}: fg {} bg {} fused {} over {} images",
            r.member_top1[0], r.member_top1[1], r.top1, r.samples
        );
        if mode == FusionMode::Guided {
            println!("  tuned weights {:?}", tune_weights(&scores, 10)?);
        }
    }
    Ok(())
}
