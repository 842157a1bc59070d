//! Generates a small synthetic corpus and writes the four dataset variants.
//!
//! cargo run --release --example datasets [OUT_DIR]

use std::path::PathBuf;

use fglab::dataset::{
    build_variant, synth_generate, write_variant, BgFilter, DatasetKind, Split, SynthConfig,
};

fn main() -> fglab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fglab-datasets"));
    let cfg = SynthConfig {
        train_per_category: 20,
        test_per_category: 5,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 1)?;
    for kind in DatasetKind::ALL {
        let train = build_variant(&corpus.train, kind, Split::Train, BgFilter::Frame)?;
        let test = build_variant(&corpus.test, kind, Split::Test, BgFilter::Frame)?;
        write_variant(&out.join(kind.as_str()), &[&train, &test])?;
        println!("{kind:>6}: {} train, {} test", train.len(), test.len());
    }
    let s = &corpus.test[0];
    println!(
        "{}: box {} foreground ratio {:.3}, frame ratio {:.3}",
        s.source_id,
        s.boxes[0],
        s.foreground_pixel_ratio().value(),
        s.frame_area_ratio()?.value()
    );
    println!("wrote {}", out.display());
    Ok(())
}
