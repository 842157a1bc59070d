//! Trains one network per variant and evaluates every network on every test
//! variant.
//!
//! cargo run --release --example cross_eval

use fglab::dataset::{build_variant, synth_generate, BgFilter, DatasetKind, Split, SynthConfig};
use fglab::eval::{cross_eval, PatchProtocol};
use fglab::nn::{ArchSpec, Network};
use fglab::train::{train, TrainConfig};

fn main() -> fglab::Result<()> {
    let cfg = SynthConfig {
        train_per_category: 40,
        test_per_category: 10,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(&cfg, 3)?;
    let kinds = [DatasetKind::Orig, DatasetKind::Fg, DatasetKind::Bg];
    let mut nets: Vec<(String, Network<f32>)> = Vec::new();
    let mut tests = Vec::new();
    for kind in kinds {
        let set = build_variant(&corpus.train, kind, Split::Train, BgFilter::Frame)?;
        let mut tc = TrainConfig::for_kind(kind);
        tc.iterations = 250;
        tc.batch_size = 32;
        tc.optimizer.decay_every = 180;
        let run = train(&tc, &ArchSpec::tiny_net(cfg.categories.len(), 0.5), &set)?;
        nets.push((kind.to_string(), run.checkpoint.net));
        tests.push(build_variant(
            &corpus.test,
            kind,
            Split::Test,
            BgFilter::Frame,
        )?);
    }
    let refs: Vec<(String, &Network<f32>)> = nets.iter().map(|(n, net)| (n.clone(), net)).collect();
    let table = cross_eval(&refs, &tests.iter().collect::<Vec<_>>(), PatchProtocol::Ten)?;

    print!("{:>8}", "net\\set");
    for k in kinds {
        print!("{:>8}", k.as_str());
    }
    println!();
    for (row, (name, _)) in table.iter().zip(&nets) {
        print!("{name:>8}");
        for cell in row {
            print!("{:>7.1}%", 100.0 * cell.top1.value());
        }
        println!();
    }
    Ok(())
}
