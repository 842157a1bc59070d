//! Ranks candidate boxes on original test images and prints the recall
//! curve at IoU 0.7.
//!
//! cargo run --release --example proposals

use fglab::dataset::{build_variant, synth_generate, BgFilter, DatasetKind, Split, SynthConfig};
use fglab::proposals::{propose_variant, variant_recall, ProposalConfig};

fn main() -> fglab::Result<()> {
    let cfg = SynthConfig {
        train_per_category: 1,
        test_per_category: 20,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 4)?;
    let test = build_variant(
        &corpus.test,
        DatasetKind::Orig,
        Split::Test,
        BgFilter::Frame,
    )?;
    let props = propose_variant(&test, 100, &ProposalConfig::default())?;

    let first = &test.items[0];
    println!(
        "{} ground truth {}",
        first.record.source_id, first.record.boxes[0]
    );
    for p in props[&first.record.source_id].iter().take(5) {
        println!("  {} score {:.3}", p.rect, p.score);
    }
    let curve = variant_recall(&test, &props, 0.7, 100)?;
    for k in [1, 2, 5, 10, 20, 50, 100] {
        println!("recall@{k:<3} {:.3}", curve.at(k).value());
    }
    Ok(())
}
