//! Desk-scale acceptance run. Prints one PASS or FAIL line per criterion and
//! exits non-zero if any fails. Pass a substring of a criterion name to run
//! only the matching ones.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use fglab::dataset::{
    build_bg, build_fg, build_variant, filter_bg_train, synth_generate, BgFilter, CategorySpec,
    DatasetKind, DatasetVariant, Glyph, Split, SynthConfig, SynthCorpus, Texture,
};
use fglab::eval::{
    cross_eval, evaluate, pre_crop_size, ratio_binned_accuracy, ratio_curve, ten_patch_predict,
    PatchProtocol,
};
use fglab::fusion::{fusion_report, weighted_sum, FusionMode, FusionSpec, MemberScores, Role};
use fglab::geometry::{enclosing_frame, iou, BoxRect, Ratio};
use fglab::nn::{ArchSpec, Network, TensorBuf};
use fglab::proposals::{propose_variant, recall_cdf, variant_recall, ProposalConfig};
use fglab::seed;
use fglab::train::{train, TrainConfig};
use rand::Rng;

const ITERATIONS: u64 = 1500;
const BATCH: usize = 32;
const DECAY_EVERY: u64 = 1100;
const RATIO_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 1.0];

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

/// Background-predictive corpus: 10 paired categories, 2000 train and 500 test.
fn main_corpus() -> &'static (SynthConfig, SynthCorpus) {
    static C: OnceLock<(SynthConfig, SynthCorpus)> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = SynthConfig::default();
        let corpus = synth_generate(&cfg, 7).unwrap();
        (cfg, corpus)
    })
}

/// Same layout with background texture drawn independently of the category.
fn neutral_corpus() -> &'static (SynthConfig, SynthCorpus) {
    static C: OnceLock<(SynthConfig, SynthCorpus)> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = SynthConfig {
            bg_informative: 0.0,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg, 8).unwrap();
        (cfg, corpus)
    })
}

/// Objects from 8 to 64 pixels, so foreground ratios cover (0, 1]. Each
/// category owns its glyph and its texture; heavy pixel noise makes small
/// objects hard to read and small backgrounds hard to classify.
fn spread_corpus() -> &'static (SynthConfig, SynthCorpus) {
    static C: OnceLock<(SynthConfig, SynthCorpus)> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = SynthConfig {
            train_per_category: 300,
            test_per_category: 150,
            categories: (0..6)
                .map(|i| CategorySpec {
                    name: format!("{:?}-{:?}", Glyph::ALL[i], Texture::ALL[i]).to_lowercase(),
                    glyph: Glyph::ALL[i],
                    texture: Texture::ALL[i],
                })
                .collect(),
            object_side: [8, 64],
            noise: 200.0,
            texture_contrast: 110.0,
            ..SynthConfig::default()
        };
        let corpus = synth_generate(&cfg, 9).unwrap();
        (cfg, corpus)
    })
}

fn test_set(corpus: &(SynthConfig, SynthCorpus), kind: DatasetKind) -> DatasetVariant {
    build_variant(&corpus.1.test, kind, Split::Test, BgFilter::Frame).unwrap()
}

fn fit(corpus: &(SynthConfig, SynthCorpus), kind: DatasetKind) -> Network<f32> {
    let t = Instant::now();
    let set = build_variant(&corpus.1.train, kind, Split::Train, BgFilter::Frame).unwrap();
    let mut cfg = TrainConfig::for_kind(kind);
    cfg.iterations = ITERATIONS;
    cfg.batch_size = BATCH;
    cfg.optimizer.decay_every = DECAY_EVERY;
    cfg.seed = 1;
    let arch = ArchSpec::tiny_net(corpus.0.categories.len(), 0.5);
    let out = train(&cfg, &arch, &set).unwrap();
    eprintln!(
        "  trained {kind} on {} images in {:.0?}",
        set.len(),
        t.elapsed()
    );
    out.checkpoint.net
}

macro_rules! net {
    ($name:ident, $corpus:expr, $kind:expr) => {
        fn $name() -> &'static Network<f32> {
            static N: OnceLock<Network<f32>> = OnceLock::new();
            N.get_or_init(|| fit($corpus, $kind))
        }
    };
}

net!(orig_net, main_corpus(), DatasetKind::Orig);
net!(fg_net, main_corpus(), DatasetKind::Fg);
net!(bg_net, main_corpus(), DatasetKind::Bg);
net!(neutral_bg_net, neutral_corpus(), DatasetKind::Bg);
net!(spread_fg_net, spread_corpus(), DatasetKind::Fg);
net!(spread_bg_net, spread_corpus(), DatasetKind::Bg);

fn top1(net: &Network<f32>, set: &DatasetVariant, protocol: PatchProtocol) -> f64 {
    evaluate(net, "net", set, protocol, false)
        .unwrap()
        .top1
        .value()
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Check {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (k, kind) in common::LAYER_KINDS.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(700 + k as u64, kind));
        for case in 0..20 {
            let (arch, x, labels) = common::gradcheck_case(kind, &mut rng);
            let err = common::gradcheck(arch, &x, &labels, case, 12);
            if err.is_nan() || err >= 1e-4 {
                return Err(format!("{kind} case {case}: relative error {err:.3e}"));
            }
            worst = worst.max(err);
            cases += 1;
        }
    }
    let arch = ArchSpec::tiny_net(3, 0.5);
    let mut rng = seed::rng(5);
    let [c, h, w] = arch.input;
    let x: Vec<f64> = (0..2 * c * h * w)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let err = common::gradcheck(
        arch,
        &TensorBuf::from_vec(&[2, c, h, w], x).unwrap(),
        &[0, 2],
        3,
        4,
    );
    worst = worst.max(err);
    ensure(
        err < 1e-4,
        format!("{cases} random cases over every layer kind plus TinyNet, worst relative error {worst:.2e} (tol 1e-4)"),
    )
}

fn dataset_invariants() -> Check {
    let (cfg, corpus) = main_corpus();
    let test = &corpus.test;
    for s in test {
        let bg = build_bg(s).map_err(|e| e.to_string())?;
        for b in &s.boxes {
            for y in b.y0()..b.y1() {
                for x in b.x0()..b.x1() {
                    if bg.get_pixel(x, y).0 != [0, 0, 0] {
                        return Err(format!("{}: non-zero BG pixel at ({x}, {y})", s.source_id));
                    }
                }
            }
        }
        let fg = build_fg(s).map_err(|e| e.to_string())?;
        let frame = enclosing_frame(&s.boxes).unwrap();
        if (fg.width(), fg.height()) != (frame.width(), frame.height()) {
            return Err(format!(
                "{}: FG is {}x{}, frame {frame}",
                s.source_id,
                fg.width(),
                fg.height()
            ));
        }
    }
    let kept: BTreeSet<&str> = filter_bg_train(test, BgFilter::Frame)
        .unwrap()
        .iter()
        .map(|s| s.source_id.as_str())
        .collect();
    let canvas = cfg.width as u64 * cfg.height as u64;
    let expect: BTreeSet<&str> = test
        .iter()
        .filter(|s| 2 * enclosing_frame(&s.boxes).unwrap().area() <= canvas)
        .map(|s| s.source_id.as_str())
        .collect();
    ensure(
        kept == expect,
        format!(
            "{} test images, BG filter keeps {} (expected {})",
            test.len(),
            kept.len(),
            expect.len()
        ),
    )
}

fn bg_learnability() -> Check {
    let chance = 1.0 / main_corpus().0.categories.len() as f64;
    let predictive = top1(
        bg_net(),
        &test_set(main_corpus(), DatasetKind::Bg),
        PatchProtocol::Ten,
    );
    let neutral = top1(
        neutral_bg_net(),
        &test_set(neutral_corpus(), DatasetKind::Bg),
        PatchProtocol::Ten,
    );
    ensure(
        predictive >= 3.0 * chance && (neutral - chance).abs() <= 0.05,
        format!(
            "predictive BG top-1 {:.1}% (need >= {:.1}%), neutral BG top-1 {:.1}% (need {:.1}% +- 5)",
            100.0 * predictive,
            300.0 * chance,
            100.0 * neutral,
            100.0 * chance
        ),
    )
}

fn cross_evaluation() -> Check {
    let sets = [
        test_set(main_corpus(), DatasetKind::Fg),
        test_set(main_corpus(), DatasetKind::Bg),
    ];
    let nets = [("fg".to_string(), fg_net()), ("bg".to_string(), bg_net())];
    let t =
        cross_eval(&nets, &[&sets[0], &sets[1]], PatchProtocol::Ten).map_err(|e| e.to_string())?;
    let v = |i: usize, j: usize| t[i][j].top1.value();
    ensure(
        v(0, 1) <= 0.5 * v(0, 0) && v(1, 0) <= 0.5 * v(1, 1),
        format!(
            "FG net {:.1}% own / {:.1}% on BG, BG net {:.1}% own / {:.1}% on FG (cross <= 0.5x own)",
            100.0 * v(0, 0),
            100.0 * v(0, 1),
            100.0 * v(1, 1),
            100.0 * v(1, 0)
        ),
    )
}

fn ratio_curves() -> Check {
    let c = ratio_curve(
        &[0.05, 0.15, 0.15, 0.4, 0.6, 0.9],
        &[true, false, true, true, false, false],
        &[0.01, 0.1, 0.2, 0.5, 1.0],
    )
    .unwrap();
    let oracle = c.counts == [0, 1, 3, 4, 6]
        && c.accuracy == [None, Some(1.0), Some(2.0 / 3.0), Some(0.75), Some(0.5)];
    if !oracle {
        return Err(format!("six-sample oracle mismatch: {c:?}"));
    }
    let curve = |net, kind| {
        let c = ratio_binned_accuracy(
            net,
            &test_set(spread_corpus(), kind),
            &RATIO_THRESHOLDS,
            PatchProtocol::Ten,
        )
        .unwrap();
        c.accuracy
            .iter()
            .map(|a| a.unwrap_or(f64::NAN))
            .collect::<Vec<_>>()
    };
    let fg = curve(spread_fg_net(), DatasetKind::Fg);
    let bg = curve(spread_bg_net(), DatasetKind::Bg);
    let fg_up = fg.windows(2).all(|w| w[0] <= w[1]);
    let bg_down = bg.windows(2).all(|w| w[0] >= w[1]);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|a| format!("{:.3}", a))
            .collect::<Vec<_>>()
            .join(" ")
    };
    ensure(
        fg_up && bg_down,
        format!(
            "oracle exact; thresholds {RATIO_THRESHOLDS:?}: FG [{}] non-decreasing {fg_up}, BG [{}] non-increasing {bg_down}",
            fmt(&fg),
            fmt(&bg)
        ),
    )
}

/// Scores of the ten crops taken one forward at a time, averaged.
fn explicit_ten_patch(net: &Network<f32>, image: &image::RgbImage) -> Vec<f32> {
    let crop = net.input_shape()[1] as u32;
    let (sx, sy) = (image.width() - crop, image.height() - crop);
    let corners = [(0, 0), (sx, 0), (0, sy), (sx, sy), (sx / 2, sy / 2)];
    let mut sum = vec![0.0f64; net.category_count()];
    for flip in [false, true] {
        for &(ox, oy) in &corners {
            let mut buf = Vec::with_capacity((3 * crop * crop) as usize);
            for ch in 0..3 {
                for y in 0..crop {
                    for x in 0..crop {
                        let xs = if flip { crop - 1 - x } else { x };
                        let v = image.get_pixel(ox + xs, oy + y).0[ch] as f32;
                        buf.push((v - 128.0) / 64.0);
                    }
                }
            }
            let input = TensorBuf::from_vec(&[1, 3, crop as usize, crop as usize], buf).unwrap();
            let out = net.forward(&input).unwrap();
            for (s, &v) in sum.iter_mut().zip(out.row(0)) {
                *s += v as f64;
            }
        }
    }
    sum.iter().map(|s| (s / 10.0) as f32).collect()
}

fn patch_protocols() -> Check {
    let mut rng = seed::rng(31);
    let mut worst = 0.0f32;
    for case in 0..50 {
        let net = Network::<f32>::init(common::small_arch(4), &mut seed::rng(900 + case)).unwrap();
        let lo = pre_crop_size(24);
        let (w, h) = (rng.gen_range(lo..lo + 12), rng.gen_range(lo..lo + 12));
        let img = common::random_image(&mut rng, w, h);
        let fast = ten_patch_predict(&net, &img).unwrap();
        let slow = explicit_ten_patch(&net, &img);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    let set = test_set(main_corpus(), DatasetKind::Orig);
    let ten = top1(orig_net(), &set, PatchProtocol::Ten);
    let hundred = top1(orig_net(), &set, PatchProtocol::Hundred);
    ensure(
        worst <= 1e-6 && (ten - hundred).abs() < 0.01,
        format!(
            "ten-patch vs explicit max |diff| {worst:.1e} (tol 1e-6) on 50 cases; Orig top-1 {:.1}% ten, {:.1}% hundred (|diff| < 1 point)",
            100.0 * ten,
            100.0 * hundred
        ),
    )
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Positive rescaling of all weights keeps every fused argmax, and a member
/// at weight zero leaves the fused scores untouched.
fn fusion_fixtures() -> Result<usize, String> {
    let mut rng = seed::rng(77);
    let mut checks = 0;
    for fixture in 0..200 {
        let members = rng.gen_range(1..5);
        let cats = rng.gen_range(2..12);
        let scores: Vec<Vec<f32>> = (0..members + 1)
            .map(|_| (0..cats).map(|_| rng.gen_range(-5.0f32..5.0)).collect())
            .collect();
        let rows: Vec<&[f32]> = scores[..members].iter().map(Vec::as_slice).collect();
        let weights: Vec<f64> = (0..members).map(|_| rng.gen_range(0.05..2.0)).collect();
        let base = weighted_sum(&weights, &rows).unwrap();
        for scale in [1e-3, 0.1, 0.5, 2.0, 3.7, 10.0, 1e3] {
            let w: Vec<f64> = weights.iter().map(|w| w * scale).collect();
            if argmax(&weighted_sum(&w, &rows).unwrap()) != argmax(&base) {
                return Err(format!(
                    "fixture {fixture}: argmax moved under scale {scale}"
                ));
            }
            checks += 1;
        }
        for slot in 0..=members {
            let mut w = weights.clone();
            w.insert(slot, 0.0);
            let mut r = rows.clone();
            r.insert(slot, &scores[members]);
            if weighted_sum(&w, &r).unwrap() != base {
                return Err(format!(
                    "fixture {fixture}: zero-weight member at {slot} changed scores"
                ));
            }
            checks += 1;
        }
    }
    Ok(checks)
}

fn fusion_gains() -> Check {
    let checks = fusion_fixtures()?;
    let test = test_set(main_corpus(), DatasetKind::Orig);
    let nets = [fg_net(), bg_net()];
    let guided = FusionSpec::equal(FusionMode::Guided, &[("fg", Role::Fg), ("bg", Role::Bg)]);
    let g = fusion_report(
        &guided,
        &MemberScores::compute(&guided, &nets, &test, None).unwrap(),
    )
    .unwrap();
    let (fg, bg, fused) = (
        g.member_top1[0].value(),
        g.member_top1[1].value(),
        g.top1.value(),
    );
    let props = propose_variant(&test, 100, &ProposalConfig::default()).unwrap();
    let unguided = FusionSpec {
        proposal_k: 100,
        ..FusionSpec::equal(FusionMode::Unguided, &[("fg", Role::Fg), ("bg", Role::Bg)])
    };
    let u = fusion_report(
        &unguided,
        &MemberScores::compute(&unguided, &nets, &test, Some(&props)).unwrap(),
    )
    .unwrap();
    let best = fg.max(bg);
    ensure(
        fused >= best - 0.005 && fused > best && u.top1.value() >= fg - 0.01,
        format!(
            "guided FG {:.1}%, BG {:.1}%, FG+BG {:.1}% (> max); unguided top-100 FG+BG {:.1}% (>= FG - 1); {checks} fixture checks",
            100.0 * fg,
            100.0 * bg,
            100.0 * fused,
            100.0 * u.top1.value()
        ),
    )
}

fn brute_recall(props: &[Vec<BoxRect>], truths: &[BoxRect], thr: f64, k: usize) -> Ratio {
    let hits = props
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.iter().take(k).any(|b| iou(b, t).value() >= thr))
        .count();
    Ratio::of(hits as u64, truths.len() as u64)
}

fn random_box(rng: &mut impl Rng, size: u32) -> BoxRect {
    let (x0, y0) = (rng.gen_range(0..size - 1), rng.gen_range(0..size - 1));
    BoxRect::new(
        x0,
        y0,
        rng.gen_range(x0 + 1..=size),
        rng.gen_range(y0 + 1..=size),
    )
    .unwrap()
}

fn proposal_machinery() -> Check {
    let b = |a: [u32; 4]| BoxRect::try_from(a).unwrap();
    // Hit at rank 2, no hit, hit at rank 1 (IoU 0.64 at the 0.5 threshold).
    let hand = recall_cdf(
        &[
            vec![b([0, 0, 4, 4]), b([10, 10, 20, 20])],
            vec![b([0, 0, 2, 2])],
            vec![b([0, 0, 8, 8]), b([0, 0, 10, 10])],
        ],
        &[b([10, 10, 20, 20]), b([5, 5, 9, 9]), b([0, 0, 10, 10])],
        0.5,
        3,
    )
    .unwrap();
    let want = [Ratio::of(1, 3), Ratio::of(2, 3), Ratio::of(2, 3)];
    if hand.recall != want {
        return Err(format!("hand-built recall {:?}", hand.recall));
    }
    let mut rng = seed::rng(88);
    for inst in 0..200 {
        let n = rng.gen_range(1..12);
        let truths: Vec<BoxRect> = (0..n).map(|_| random_box(&mut rng, 24)).collect();
        let props: Vec<Vec<BoxRect>> = (0..n)
            .map(|_| {
                (0..rng.gen_range(0..25))
                    .map(|_| random_box(&mut rng, 24))
                    .collect()
            })
            .collect();
        let thr = rng.gen_range(0.1..0.9);
        let k_max = rng.gen_range(1..30);
        let c = recall_cdf(&props, &truths, thr, k_max).unwrap();
        if c.recall.windows(2).any(|w| w[0].value() > w[1].value()) {
            return Err(format!("instance {inst}: recall decreases"));
        }
        for k in 1..=k_max {
            if c.at(k) != brute_recall(&props, &truths, thr, k) {
                return Err(format!(
                    "instance {inst}: recall@{k} differs from brute force"
                ));
            }
        }
    }
    let test = test_set(main_corpus(), DatasetKind::Orig);
    let props = propose_variant(&test, 100, &ProposalConfig::default()).unwrap();
    let r = variant_recall(&test, &props, 0.7, 100).unwrap();
    ensure(
        r.at(100).value() >= 0.8,
        format!(
            "hand cases exact, 200 random instances monotone and brute-force equal; corpus recall@1 {:.3}, @10 {:.3}, @100 {:.3} at IoU 0.7 (need >= 0.8)",
            r.at(1).value(),
            r.at(10).value(),
            r.at(100).value()
        ),
    )
}

fn receptive_fields() -> Check {
    let mut rng = seed::rng(seed::derive(2, "rf"));
    for trial in 0..100 {
        common::rf_perturbation_trial(&mut rng).map_err(|e| format!("trial {trial}: {e}"))?;
    }
    let arch = common::with_head(
        [3, 24, 24],
        vec![
            common::conv(3, 6, 5, 2, 2),
            fglab::nn::LayerSpec::Relu,
            fglab::nn::LayerSpec::Maxpool { size: 2, stride: 2 },
            common::conv(6, 5, 3, 1, 1),
            fglab::nn::LayerSpec::Relu,
        ],
        4,
    )
    .unwrap();
    let mut rng = seed::rng(12);
    let net = Network::<f32>::init(arch, &mut rng).unwrap();
    let refs: Vec<_> = (0..20)
        .map(|i| {
            fglab::visualize::Reference::new(
                format!("img{i:02}"),
                &common::random_image(&mut rng, 30, 30),
                &net,
            )
        })
        .collect();
    let layer = fglab::visualize::last_conv(net.arch()).unwrap();
    let filters = [0, 1, 2, 3, 4];
    for l in [layer, layer + 1] {
        let fast = fglab::visualize::top_patches(&net, l, &filters, &refs, 8).unwrap();
        if fast != common::brute_force_top_patches(&net, l, &filters, &refs, 8) {
            return Err(format!("top_patches differs from enumeration at layer {l}"));
        }
    }
    Ok(
        "100 perturbation trials agree; top_patches equals enumeration on 20 images, 2 layers"
            .into(),
    )
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_pipeline(17);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fglab::pipeline::run_all(&cfg, &a, |_| {}).map_err(|e| e.to_string())?;
    fglab::pipeline::run_all(&cfg, &b, |_| {}).map_err(|e| e.to_string())?;
    let (sa, sb) = (common::snapshot_tree(&a), common::snapshot_tree(&b));
    ensure(
        sa == sb,
        format!(
            "two run-all bundles, {} files, byte-identical: {}",
            sa.len(),
            sa == sb
        ),
    )
}

fn study_service() -> Check {
    use common::study::*;
    let (_d, data, nets, store) = fixture(60);
    kill_resume_trials(&data, &nets, &store, 100);
    let api = start_in_process(&data, &nets, &store);
    four_trial_oracle(&api, &data, &store);
    network_columns_match(&api, &data, &nets, &store);
    Ok(
        "100 kill-resume rounds lost nothing; 4-trial oracle exact; network columns bit-equal"
            .into(),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let checks: [Criterion; 11] = [
        ("gradient-correctness", gradients),
        ("dataset-invariants", dataset_invariants),
        ("background-learnability", bg_learnability),
        ("cross-evaluation", cross_evaluation),
        ("ratio-curves", ratio_curves),
        ("patch-protocols", patch_protocols),
        ("fusion-gains", fusion_gains),
        ("proposal-machinery", proposal_machinery),
        ("receptive-fields", receptive_fields),
        ("determinism", determinism),
        ("study-service", study_service),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS {name}: {d} [{:.0?}]", t.elapsed()),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{:.0?}]", t.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
