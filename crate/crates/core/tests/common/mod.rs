//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod study;

use fglab::nn::{ArchSpec, LayerSpec, Network, TensorBuf};
use fglab::seed;
use fglab::visualize::{receptive_field, PatchHit, Reference};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: p,
    }
}

/// Closes a layer stack with `fc -> softmax-xent` so it validates.
pub fn with_head(
    input: [usize; 3],
    mut layers: Vec<LayerSpec>,
    categories: usize,
) -> Option<ArchSpec> {
    let mut shape = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        shape = l.output_shape(i, &shape).ok()?;
    }
    layers.push(LayerSpec::Fc {
        inputs: shape.iter().product(),
        outputs: categories,
    });
    layers.push(LayerSpec::SoftmaxXent);
    let arch = ArchSpec {
        input,
        categories,
        layers,
    };
    arch.shapes().ok().map(|_| arch)
}

pub fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

pub const LAYER_KINDS: [&str; 6] = ["conv", "relu", "maxpool", "fc", "dropout", "softmax-xent"];

/// A random small network exercising `kind`, plus a batch and labels.
pub fn gradcheck_case(kind: &str, rng: &mut ChaCha8Rng) -> (ArchSpec, TensorBuf<f64>, Vec<u32>) {
    loop {
        let c = rng.gen_range(1..=3);
        let size = rng.gen_range(4..=8);
        let cats = rng.gen_range(2..=5);
        let n = rng.gen_range(1..=3);
        let input = [c, size, size];
        let mid = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let first = conv(c, mid, k, rng.gen_range(1..=2), rng.gen_range(0..=1));
        let layers = match kind {
            "conv" => vec![
                first,
                conv(
                    mid,
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=2),
                    1,
                    rng.gen_range(0..=1),
                ),
            ],
            "relu" => vec![first, LayerSpec::Relu],
            "maxpool" => vec![
                first,
                LayerSpec::Maxpool {
                    size: rng.gen_range(2..=3),
                    stride: rng.gen_range(1..=2),
                },
            ],
            "fc" => vec![
                LayerSpec::Fc {
                    inputs: c * size * size,
                    outputs: rng.gen_range(2..=6),
                },
                LayerSpec::Relu,
            ],
            "dropout" => vec![
                first,
                LayerSpec::Dropout {
                    drop_prob: rng.gen_range(0.2..0.8),
                },
            ],
            "softmax-xent" => vec![],
            other => panic!("unknown layer kind {other}"),
        };
        let Some(arch) = with_head(input, layers, cats) else {
            continue;
        };
        let len = n * c * size * size;
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..cats as u32)).collect();
        return (
            arch,
            TensorBuf::from_vec(&[n, c, size, size], x).unwrap(),
            labels,
        );
    }
}

/// Largest relative error between analytic and central-difference
/// gradients, over at most `per_tensor` coordinates of each parameter.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradcheck(
    arch: ArchSpec,
    x: &TensorBuf<f64>,
    labels: &[u32],
    net_seed: u64,
    per_tensor: usize,
) -> f64 {
    let mut rng = seed::rng(net_seed);
    let mut net = Network::<f64>::init(arch, &mut rng).unwrap();
    // Non-zero biases so every bias path is exercised.
    let mut params = net.params().to_vec();
    for p in &mut params {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    net.set_params(params.clone()).unwrap();
    let mask_seed = rng.gen::<u64>();
    let loss_at = |net: &Network<f64>| {
        let cache = net.forward_train(x, &mut seed::rng(mask_seed)).unwrap();
        net.backward(Some(&cache), labels).unwrap()
    };
    let (grads, _) = loss_at(&net);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for t in 0..params.len() {
        let len = params[t].len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in picks {
            let mut p = params.clone();
            p[t].data_mut()[i] += h;
            net.set_params(p.clone()).unwrap();
            let up = loss_at(&net).1;
            p[t].data_mut()[i] -= 2.0 * h;
            net.set_params(p).unwrap();
            let down = loss_at(&net).1;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[t].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// One receptive-field perturbation trial on a random padding-free stack of
/// convolutions and max-pools. Every input pixel is pushed by `+-1e6`; the
/// bounding box of the pixels that move the chosen unit must equal the
/// traced field. Returns a description of the mismatch, if any.
pub fn rf_perturbation_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (arch, layer) = loop {
        let size = rng.gen_range(10..=18);
        let c = rng.gen_range(1..=2);
        let depth = rng.gen_range(1..=3);
        let mut layers = Vec::new();
        let mut ch = c;
        for _ in 0..depth {
            if rng.gen_bool(0.35) && !layers.is_empty() {
                layers.push(LayerSpec::Maxpool {
                    size: rng.gen_range(2..=3),
                    stride: rng.gen_range(1..=2),
                });
            } else {
                let out = rng.gen_range(1..=3);
                layers.push(conv(ch, out, rng.gen_range(1..=4), rng.gen_range(1..=2), 0));
                ch = out;
            }
        }
        let layer = layers.len() - 1;
        if let Some(a) = with_head([c, size, size], layers, 2) {
            break (a, layer);
        }
    };
    let net = Network::<f64>::init(arch.clone(), rng).unwrap();
    let shapes = arch.shapes().unwrap();
    let [oc, oh, ow] = <[usize; 3]>::try_from(shapes[layer + 1].as_slice()).unwrap();
    let (f, row, col) = (
        rng.gen_range(0..oc),
        rng.gen_range(0..oh),
        rng.gen_range(0..ow),
    );
    let [c, h, w] = arch.input;
    let base: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let unit = |x: &[f64]| {
        let act = net
            .activations(
                &TensorBuf::from_vec(&[1, c, h, w], x.to_vec()).unwrap(),
                layer,
            )
            .unwrap();
        act.data()[(f * oh + row) * ow + col]
    };
    let v0 = unit(&base);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let moved = [1e6, -1e6].iter().any(|&d| {
                let mut p = base.clone();
                for ch in 0..c {
                    p[(ch * h + y) * w + x] += d;
                }
                unit(&p) != v0
            });
            if moved {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
            }
        }
    }
    let rf = receptive_field(&arch, layer, row, col).map_err(|e| e.to_string())?;
    let got = rf.clipped.as_array().map(|v| v as usize);
    if got != [x0, y0, x1, y1] {
        return Err(format!(
            "layer {layer} unit ({row},{col}): traced {got:?}, perturbation {:?}, arch {:?}",
            [x0, y0, x1, y1],
            arch.layers
        ));
    }
    if rf.unclipped.map(|v| v as usize) != got {
        return Err(format!(
            "padding-free field should not need clipping: {rf:?}"
        ));
    }
    Ok(())
}

/// Full enumeration: every (image, row, col) response of every filter, best
/// position per image in row-major order, then images ranked by response
/// with ties to the lower source id.
pub fn brute_force_top_patches(
    net: &Network<f32>,
    layer: usize,
    filters: &[usize],
    refs: &[Reference],
    count: usize,
) -> Vec<Vec<PatchHit>> {
    let [_, size, _] = net.input_shape();
    let shape = net.output_shape_of(layer).to_vec();
    let (rows, cols) = (shape[1], shape[2]);
    let mut batch = Vec::new();
    for r in refs {
        for ch in 0..3 {
            for y in 0..size as u32 {
                for x in 0..size as u32 {
                    batch.push(fglab::imaging::normalize(r.image.get_pixel(x, y)[ch]));
                }
            }
        }
    }
    let acts = net
        .activations(
            &TensorBuf::from_vec(&[refs.len(), 3, size, size], batch).unwrap(),
            layer,
        )
        .unwrap();
    let per_image = shape.iter().product::<usize>();
    filters
        .iter()
        .map(|&f| {
            let mut best: Vec<(f32, usize, usize, usize)> = Vec::new();
            for (i, _) in refs.iter().enumerate() {
                let map = &acts.data()
                    [i * per_image + f * rows * cols..i * per_image + (f + 1) * rows * cols];
                let mut cand: Vec<(f32, usize, usize)> = (0..rows * cols)
                    .map(|k| (map[k], k / cols, k % cols))
                    .collect();
                cand.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
                best.push((cand[0].0, i, cand[0].1, cand[0].2));
            }
            best.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(refs[a.1].source_id.cmp(&refs[b.1].source_id))
            });
            best.into_iter()
                .take(count)
                .map(|(response, i, row, col)| PatchHit {
                    source_id: refs[i].source_id.clone(),
                    filter: f,
                    row,
                    col,
                    response,
                    field: receptive_field(net.arch(), layer, row, col).unwrap(),
                })
                .collect()
        })
        .collect()
}

/// A small synthetic corpus for fast training tests: 32x32 images, four
/// categories.
pub fn small_synth(per_category: usize) -> fglab::dataset::SynthConfig {
    fglab::dataset::SynthConfig {
        width: 32,
        height: 32,
        train_per_category: per_category,
        test_per_category: per_category / 2,
        categories: fglab::dataset::SynthConfig::paired_categories(4),
        object_side: [12, 28],
        ..Default::default()
    }
}

/// A 24x24 input network small enough to train in a blink.
pub fn small_arch(categories: usize) -> ArchSpec {
    with_head(
        [3, 24, 24],
        vec![
            conv(3, 6, 5, 2, 2),
            LayerSpec::Relu,
            LayerSpec::Maxpool { size: 2, stride: 2 },
            conv(6, 8, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::Dropout { drop_prob: 0.5 },
        ],
        categories,
    )
    .unwrap()
}

/// On-disk study inputs: `data/{fg,bg}` test variants with a roster, and
/// `nets/small.ckpt`. Returns `(data, nets)`.
pub fn study_fixture(
    root: &std::path::Path,
    per_category: usize,
) -> (std::path::PathBuf, std::path::PathBuf) {
    use fglab::dataset::{
        build_variant, synth_generate, write_variant, BgFilter, DatasetKind, Split,
    };
    let cfg = small_synth(per_category);
    let corpus = synth_generate(&cfg, 21).unwrap();
    let data = root.join("data");
    for kind in [DatasetKind::Fg, DatasetKind::Bg] {
        let test = build_variant(&corpus.test, kind, Split::Test, BgFilter::Frame).unwrap();
        write_variant(&data.join(kind.as_str()), &[&test]).unwrap();
    }
    std::fs::write(
        data.join("roster.json"),
        serde_json::to_vec(&cfg.roster()).unwrap(),
    )
    .unwrap();
    let nets = root.join("nets");
    std::fs::create_dir_all(&nets).unwrap();
    let net = Network::<f32>::init(small_arch(4), &mut seed::rng(8)).unwrap();
    fglab::nn::Checkpoint::new(net, None, Default::default(), 0, 8)
        .save(&nets.join("small.ckpt"))
        .unwrap();
    (data, nets)
}

/// A pipeline configuration that runs end to end in seconds.
pub fn tiny_pipeline(seed: u64) -> fglab::pipeline::PipelineConfig {
    use fglab::pipeline::{PipelineConfig, TrainBudget};
    PipelineConfig {
        seed,
        synth: small_synth(10),
        arch: Some(small_arch(4)),
        budget: TrainBudget {
            iterations: 12,
            batch_size: 8,
            decay_every: 8,
        },
        proposal_k: 30,
        unguided_limit: Some(8),
        vis_filters: 3,
        vis_per_filter: 4,
        vis_references: 12,
        ..PipelineConfig::default()
    }
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot_tree(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        dir: &std::path::Path,
        root: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}
