//! Finds the test patches that most excite the last convolution's filters and
//! renders them as a grid.
//!
//! cargo run --release --example visualize [OUT_DIR]

use std::collections::BTreeMap;
use std::path::PathBuf;

use fglab::dataset::{build_variant, synth_generate, BgFilter, DatasetKind, Split, SynthConfig};
use fglab::nn::ArchSpec;
use fglab::train::{train, TrainConfig};
use fglab::visualize::{emit_grid, last_conv, receptive_field, top_patches, GridLayout, Reference};

fn main() -> fglab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fglab-visualize"));
    std::fs::create_dir_all(&out)?;
    let cfg = SynthConfig {
        train_per_category: 40,
        test_per_category: 10,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 6)?;
    let set = build_variant(
        &corpus.train,
        DatasetKind::Orig,
        Split::Train,
        BgFilter::Frame,
    )?;
    let mut tc = TrainConfig::for_kind(DatasetKind::Orig);
    tc.iterations = 200;
    tc.batch_size = 32;
    let net = train(&tc, &ArchSpec::tiny_net(cfg.categories.len(), 0.5), &set)?
        .checkpoint
        .net;

    let layer = last_conv(net.arch()).expect("TinyNet has convolutions");
    let rf = receptive_field(net.arch(), layer, 0, 0)?;
    println!("layer {layer}: unit (0, 0) sees {:?}", rf.unclipped);
    let test = build_variant(
        &corpus.test,
        DatasetKind::Orig,
        Split::Test,
        BgFilter::Frame,
    )?;
    let refs: Vec<Reference> = test
        .items
        .iter()
        .map(|i| Reference::new(i.record.source_id.clone(), &i.image, &net))
        .collect();
    let hits = top_patches(&net, layer, &[0, 1, 2, 3, 4, 5], &refs, 8)?;
    for (f, row) in hits.iter().enumerate() {
        println!(
            "filter {f}: best {} at {:.3}",
            row[0].source_id, row[0].response
        );
    }
    let by_id: BTreeMap<&str, &Reference> =
        refs.iter().map(|r| (r.source_id.as_str(), r)).collect();
    let path = out.join("grid.png");
    emit_grid(
        &hits,
        GridLayout::default(),
        |id| Ok(by_id[id].image.clone()),
        &path,
    )?;
    println!("wrote {}", path.display());
    Ok(())
}
