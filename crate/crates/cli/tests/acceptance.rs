//! Acceptance suite: one pass/fail line per criterion.
//!
//! `cargo test -p attcdc-cli --test acceptance` runs everything; pass
//! criterion numbers (`-- 1 4 9`) to run a subset. Criterion 8 reuses the
//! model trained by criterion 6 and trains it first if needed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use attcdc::autograd::{Graph, Var};
use attcdc::checkpoint::Checkpoint;
use attcdc::data::{
    generate_synthetic, split_dataset, Dataset, DatasetManifest, Normalization, Preset, Split, SplitAssignment,
    SplitFractions, SyntheticSpec,
};
use attcdc::explain::{grad_cam, grad_cam_with};
use attcdc::gradcheck::{check, GradCheckConfig, GradCheckReport};
use attcdc::loss::{cross_entropy, focal_loss, Alpha, FocalLossConfig};
use attcdc::model::{Model, ModelConfig};
use attcdc::nn::{
    Activation, AttentionBlock, BatchNorm2d, Conv2d, ConvMode, DenseLayer, DepthwiseSeparableConv, Forward, Linear,
    Mode, ParamId, ParamStore, Transition,
};
use attcdc::tensor::kernels::{self, Conv2dParams};
use attcdc::tensor::macs;
use attcdc::train::{evaluate, CsvMetricsSink, EpochRecord, EpochSink, LossKind, TrainConfig, Trainer};
use attcdc::{Result as CoreResult, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn quadrant(class: usize, size: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let h = size / 2;
    let rows = if class < 2 { 0..h } else { h..size };
    let cols = if class.is_multiple_of(2) { 0..h } else { h..size };
    (rows, cols)
}

// ---------------------------------------------------------------- 1

/// Closed-form DenseNet parameter count: stem, dense layers (bottleneck
/// 4x growth), transitions halving channels, final norm, classifier, and
/// the optional attention bottlenecks with biases.
fn densenet_param_oracle(classes: usize, separable: bool, attention_reduction: Option<usize>) -> usize {
    let (growth, bottleneck) = (32, 128);
    let mut c = 64;
    let mut total = 3 * 64 * 49 + 2 * 64;
    for (i, &layers) in [6, 12, 24, 16].iter().enumerate() {
        for _ in 0..layers {
            total += 2 * c + c * bottleneck + 2 * bottleneck;
            total += if separable { bottleneck * 9 + bottleneck * growth } else { bottleneck * growth * 9 };
            c += growth;
        }
        if let Some(r) = attention_reduction {
            let hidden = c / r;
            total += c * hidden + hidden + hidden * c + c;
        }
        if i < 3 {
            total += 2 * c + c * (c / 2);
            c /= 2;
        }
    }
    total + 2 * c + c * classes + classes
}

fn criterion_1() -> Outcome {
    let count = |cfg: ModelConfig| Model::<f32>::new(cfg, 0).map(|m| m.count_parameters()).map_err(err);
    let base4 = count(ModelConfig::baseline(4))?;
    let base1000 = count(ModelConfig::baseline(1000))?;
    let enhanced = count(ModelConfig::enhanced(4))?;
    ensure(base4 == 6_957_956, format!("baseline 4-class count {base4} != 6957956"))?;
    ensure(base1000 == 7_978_856, format!("baseline 1000-class count {base1000} != 7978856"))?;
    ensure(densenet_param_oracle(4, false, None) == base4, "oracle disagrees on the 4-class baseline")?;
    ensure(densenet_param_oracle(1000, false, None) == base1000, "oracle disagrees on the 1000-class baseline")?;
    let oracle = densenet_param_oracle(4, true, Some(16));
    ensure(oracle == enhanced, format!("enhanced count {enhanced} != oracle {oracle}"))?;
    Ok(format!("baseline 4-class {base4}, 1000-class {base1000}, enhanced {enhanced}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let configs = 32;
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let (m, n) = (rng.random_range(1..17), rng.random_range(1..33));
        let dk = [1, 3, 5, 7][rng.random_range(0..4)];
        let dp = rng.random_range(1..13);
        let x = Tensor::<f32>::ones(&[1, m, dp, dp]);
        let p = Conv2dParams::new(1, dk / 2);
        let (_, standard) = macs::measure(|| kernels::conv2d(&x, &Tensor::ones(&[n, m, dk, dk]), p));
        let (_, separable) = macs::measure(|| {
            let d = kernels::depthwise_conv2d(&x, &Tensor::ones(&[m, 1, dk, dk]), p).unwrap();
            kernels::pointwise_conv2d(&d, &Tensor::ones(&[n, m, 1, 1]))
        });
        let want_std = (n * dp * dp * dk * dk * m) as u64;
        let want_sep = (m * dp * dp * (dk * dk + n)) as u64;
        ensure(standard == want_std, format!("standard M={m} N={n} Dk={dk} Dp={dp}: {standard} != {want_std}"))?;
        ensure(separable == want_sep, format!("separable M={m} N={n} Dk={dk} Dp={dp}: {separable} != {want_sep}"))?;
        let ratio = separable as f64 / standard as f64;
        worst = worst.max((ratio - (1.0 / n as f64 + 1.0 / (dk * dk) as f64)).abs());
    }
    ensure(worst < 1e-12, format!("ratio off by {worst:e}"))?;
    Ok(format!("{configs} random configurations exact; ratio error {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

const GRAD_TOL: f64 = 1e-3;

fn project(g: &mut Graph<f64>, y: Var) -> CoreResult<Var> {
    let shape = g.value(y).shape().to_vec();
    g.weighted_sum(y, seeded(&shape, 991))
}

fn layer_report(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    mode: Mode,
    cfg: GradCheckConfig,
    body: impl Fn(&mut Forward<'_, f64>, Var) -> CoreResult<Var>,
) -> CoreResult<GradCheckReport> {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    check(&inputs, cfg, |g, v| {
        let mut local = store.clone();
        let mut f = Forward::new(g, &mut local, mode, false);
        for (&id, &var) in ids.iter().zip(&v[1..]) {
            f.bind(id, var);
        }
        let y = body(&mut f, v[0])?;
        project(g, y)
    })
}

fn criterion_3() -> Outcome {
    let d = GradCheckConfig::default;
    type Prim = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> CoreResult<Var>>;
    let x = seeded(&[2, 3, 5, 5], 1);
    let prims: Vec<(&str, Vec<Tensor<f64>>, Prim)> = vec![
        ("conv2d", vec![x.clone(), seeded(&[4, 3, 3, 3], 2)], Box::new(|g, v| g.conv2d(v[0], v[1], Conv2dParams::new(1, 1)))),
        ("conv2d stride 2", vec![x.clone(), seeded(&[4, 3, 3, 3], 3)], Box::new(|g, v| g.conv2d(v[0], v[1], Conv2dParams::new(2, 0)))),
        ("depthwise", vec![x.clone(), seeded(&[3, 1, 3, 3], 4)], Box::new(|g, v| g.depthwise_conv2d(v[0], v[1], Conv2dParams::new(1, 1)))),
        ("pointwise", vec![x.clone(), seeded(&[4, 3, 1, 1], 5)], Box::new(|g, v| g.pointwise_conv2d(v[0], v[1]))),
        ("batchnorm", vec![x.clone(), seeded(&[3], 6), seeded(&[3], 7)], Box::new(|g, v| Ok(g.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0))),
        ("relu", vec![x.clone()], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("sigmoid", vec![x.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("softmax", vec![seeded(&[3, 5], 8)], Box::new(|g, v| Ok(g.softmax(v[0])))),
        ("avg pool", vec![x.clone()], Box::new(|g, v| g.avg_pool2d(v[0], 2, 2))),
        ("max pool", vec![x.clone()], Box::new(|g, v| g.max_pool2d(v[0], 3, 2, 1))),
        ("global avg pool", vec![x.clone()], Box::new(|g, v| g.global_avg_pool(v[0]))),
        ("concat", vec![x.clone(), seeded(&[2, 2, 5, 5], 9)], Box::new(|g, v| g.channel_concat(&[v[0], v[1]]))),
        ("channel scale", vec![x.clone(), seeded(&[2, 3], 10)], Box::new(|g, v| g.channel_scale(v[0], v[1]))),
        ("linear", vec![seeded(&[3, 6], 11), seeded(&[4, 6], 12), seeded(&[4], 13)], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
    ];
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    for (name, inputs, f) in &prims {
        let r = check(inputs, d(), |g, v| {
            let y = f(g, v)?;
            project(g, y)
        })
        .map_err(err)?;
        reports.push((name.to_string(), r));
    }
    let logits = seeded(&[4, 3], 14).map(|v| 2.0 * v);
    let t = [0, 2, 1, 2];
    reports.push(("cross entropy".into(), check(std::slice::from_ref(&logits), d(), |g, v| g.cross_entropy(v[0], &t)).map_err(err)?));
    reports.push((
        "focal loss".into(),
        check(&[logits], d(), |g, v| g.focal_loss(v[0], &t, 2.0, &[0.5, 1.0, 2.0])).map_err(err)?,
    ));

    let rng = || ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let conv = Conv2d::new(&mut s, &mut rng(), "conv", 3, 4, 3, 1, 1).map_err(err)?;
    reports.push(("conv layer".into(), layer_report(&s, seeded(&[2, 3, 4, 4], 20), Mode::Train, d(), |f, x| conv.forward(f, x)).map_err(err)?));
    let mut s = ParamStore::new();
    let dws = DepthwiseSeparableConv::new(&mut s, &mut rng(), "dws", 3, 5, 3, 1, 1).map_err(err)?;
    reports.push(("separable layer".into(), layer_report(&s, seeded(&[2, 3, 4, 4], 21), Mode::Train, d(), |f, x| dws.forward(f, x)).map_err(err)?));
    let mut s = ParamStore::new();
    let bn = BatchNorm2d::new(&mut s, "bn", 3).map_err(err)?;
    s.set(bn.gamma(), seeded(&[3], 22)).map_err(err)?;
    s.set(bn.beta(), seeded(&[3], 23)).map_err(err)?;
    for mode in [Mode::Train, Mode::Eval] {
        reports.push((format!("batchnorm layer {mode:?}"), layer_report(&s, seeded(&[2, 3, 3, 3], 24), mode, d(), |f, x| bn.forward(f, x)).map_err(err)?));
    }
    let mut s = ParamStore::new();
    let att = AttentionBlock::new(&mut s, &mut rng(), "att", 8, 4, Activation::Relu).map_err(err)?;
    reports.push(("attention block".into(), layer_report(&s, seeded(&[2, 8, 3, 3], 25), Mode::Train, d(), |f, x| att.forward(f, x)).map_err(err)?));
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng(), "fc", 6, 3).map_err(err)?;
    reports.push(("linear layer".into(), layer_report(&s, seeded(&[4, 6], 26), Mode::Train, d(), |f, x| lin.forward(f, x)).map_err(err)?));
    for mode in [ConvMode::Standard, ConvMode::DepthwiseSeparable] {
        let mut s = ParamStore::new();
        let layer = DenseLayer::new(&mut s, &mut rng(), "layer", 4, 2, mode).map_err(err)?;
        let cfg = GradCheckConfig { max_probes: Some(12), ..d() };
        reports.push((format!("dense layer {mode:?}"), layer_report(&s, seeded(&[2, 4, 4, 4], 27), Mode::Train, cfg, |f, x| layer.forward(f, x)).map_err(err)?));
    }
    let mut s = ParamStore::new();
    let tr = Transition::new(&mut s, &mut rng(), "t", 6, 0.5).map_err(err)?;
    reports.push(("transition".into(), layer_report(&s, seeded(&[2, 6, 4, 5], 28), Mode::Train, d(), |f, x| tr.forward(f, x)).map_err(err)?));

    // A whole network crosses ReLU and max-pool kinks at a 1e-3 step; a
    // smaller step keeps every probe on one linear piece.
    for (attention, mode) in [(true, ConvMode::DepthwiseSeparable), (false, ConvMode::Standard)] {
        let cfg = ModelConfig {
            block_layout: vec![2, 2],
            growth_rate: 4,
            stem_channels: 8,
            attention,
            attention_reduction: 4,
            conv_mode: mode,
            input_size: 32,
            ..ModelConfig::enhanced(3)
        };
        let model = Model::<f64>::new(cfg, 11).map_err(err)?;
        let ids: Vec<ParamId> = model.store().trainable_ids().collect();
        let mut inputs = vec![seeded(&[2, 3, 32, 32], 29)];
        inputs.extend(ids.iter().map(|&id| model.store().value(id).clone()));
        let gc = GradCheckConfig { max_probes: Some(3), step: 1e-5, ..d() };
        let r = check(&inputs, gc, |g, v| {
            let mut store = model.store().clone();
            let mut f = Forward::new(g, &mut store, Mode::Train, false);
            for (&id, &var) in ids.iter().zip(&v[1..]) {
                f.bind(id, var);
            }
            let logits = model.architecture().forward(&mut f, v[0])?;
            f.graph.focal_loss(logits, &[0, 2], 2.0, &[1.0; 3])
        })
        .map_err(err)?;
        reports.push((format!("full model attention={attention}"), r));
    }

    let probes: usize = reports.iter().map(|(_, r)| r.probes).sum();
    let (worst_name, worst) = reports
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_error()))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    for (name, r) in &reports {
        ensure(r.probes > 0, format!("{name}: nothing probed"))?;
        ensure(r.passed(GRAD_TOL), format!("{name}: relative error {:.2e} (worst probe {:?})", r.max_rel_error(), r.worst))?;
    }
    Ok(format!("{} checks, {probes} probes; worst relative error {worst:.2e} ({worst_name})", reports.len()))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plain = FocalLossConfig { gamma: 0.0, alpha: Alpha::Uniform(1.0) };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..8);
        let scale = rng.random_range(0.1..10.0);
        let logits = Tensor::<f64>::from_fn(&[1, k], |_| rng.random_range(-scale..scale));
        let t = [rng.random_range(0..k)];
        let diff = (focal_loss(&logits, &t, &plain).map_err(err)? - cross_entropy(&logits, &t).map_err(err)?).abs();
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-6, format!("gamma=0 focal vs cross-entropy differs by {worst:e}"))?;
    let half = Tensor::<f64>::zeros(&[1, 2]);
    let got = focal_loss(&half, &[0], &FocalLossConfig::default()).map_err(err)?;
    let want = 0.25 * std::f64::consts::LN_2;
    ensure((got - want).abs() <= 1e-6, format!("p=0.5 gamma=2 loss {got} != {want}"))?;
    Ok(format!("1000 draws max |focal - ce| {worst:.1e}; p=0.5 loss {got:.9}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let base_cfg = ModelConfig { input_size: 32, ..ModelConfig::baseline(4) };
    let mut base = Model::<f32>::new(base_cfg.clone(), 5).map_err(err)?;
    let mut enh = Model::<f32>::new(ModelConfig { attention: true, ..base_cfg }, 6).map_err(err)?;
    let copied = enh.copy_weights_from(&base).map_err(err)?;
    ensure(copied == base.store().len(), format!("only {copied} of {} tensors shared", base.store().len()))?;
    let x = seeded(&[2, 3, 32, 32], 50).cast::<f32>();
    let mut worst = 0.0f64;
    for mode in [Mode::Eval, Mode::Train] {
        let a = base.logits(&x, mode).map_err(err)?;
        let b = enh.logits_with(&x, mode, Some(1.0)).map_err(err)?;
        worst = worst.max(a.cast::<f64>().max_abs_diff(&b.cast::<f64>()));
    }
    ensure(worst <= 1e-5, format!("max logit difference {worst:e}"))?;
    let free = enh.logits(&x, Mode::Eval).map_err(err)?;
    let moved = free.cast::<f64>().max_abs_diff(&base.logits(&x, Mode::Eval).map_err(err)?.cast::<f64>());
    ensure(moved > 1e-5, "unforced attention left the outputs unchanged")?;
    Ok(format!("max logit difference {worst:.1e} with attention forced to 1 ({moved:.2e} unforced)"))
}

// ---------------------------------------------------------------- 6 and 8

struct EasyRun {
    _dir: tempfile::TempDir,
    data: Dataset,
    split: SplitAssignment,
    history: Vec<EpochRecord>,
    best: Model<f32>,
}

fn train_easy() -> std::result::Result<EasyRun, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = SyntheticSpec::preset(Preset::Easy, 42);
    let out = generate_synthetic(&spec, &dir.path().join("data")).map_err(err)?;
    let split = split_dataset(&out.manifest, SplitFractions::default(), 42).map_err(err)?;
    let data = Dataset::new(out.manifest, spec.image_size, Normalization::default()).map_err(err)?;
    let cfg = ModelConfig { input_size: spec.image_size, ..ModelConfig::enhanced(4) };
    let mut model = Model::<f32>::new(cfg, 42).map_err(err)?;
    let train_cfg = TrainConfig { epochs: 10, seed: 42, ..TrainConfig::default() };
    let ckpt_dir = dir.path().join("run");
    let mut trainer = Trainer::new(train_cfg, &model).map_err(err)?.with_checkpoint_dir(&ckpt_dir);
    let mut progress = |r: &EpochRecord| {
        eprintln!("  easy epoch {:>2} {:<5} loss {:.4} acc {:.4}", r.epoch, r.split.as_str(), r.loss, r.accuracy);
        Ok(())
    };
    let history = trainer
        .fit(&mut model, &data, &split.indices(Split::Train), &split.indices(Split::Val), &mut [&mut progress as &mut dyn EpochSink])
        .map_err(err)?;
    let best = Checkpoint::load(&ckpt_dir.join("best.ckpt")).and_then(|c| c.to_model()).map_err(err)?;
    Ok(EasyRun { _dir: dir, data, split, history, best })
}

fn criterion_6(run: &EasyRun) -> Outcome {
    let train_loss: Vec<f64> = run.history.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
    let val_acc: Vec<f64> = run.history.iter().filter(|r| r.split == Split::Val).map(|r| r.accuracy).collect();
    ensure(train_loss.len() >= 3, "fewer than 3 epochs recorded")?;
    ensure(
        train_loss[0] > train_loss[1] && train_loss[1] > train_loss[2],
        format!("training loss not strictly decreasing over epochs 1-3: {:?}", &train_loss[..3]),
    )?;
    let hit = val_acc.iter().position(|&a| a >= 0.95);
    let best = val_acc.iter().copied().fold(0.0, f64::max);
    let losses = train_loss[..3].iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" > ");
    match hit {
        Some(e) => Ok(format!("val accuracy {:.4} at epoch {}; first train losses {losses}", val_acc[e], e + 1)),
        None => Err(format!("best val accuracy {best:.4} within 10 epochs (< 0.95); val curve {val_acc:.3?}")),
    }
}

fn criterion_8(run: &mut EasyRun) -> Outcome {
    // Analytic case: one 1x1 conv to K maps, logits = GAP of the maps. The
    // heatmap for class c is then ReLU(map_c / (h w)).
    let k = 3;
    let image = seeded(&[1, 2, 5, 4], 80);
    let w = seeded(&[k, 2, 1, 1], 81);
    let mut worst = 0.0f64;
    for class in 0..k {
        let mut store = ParamStore::new();
        let id = store.add("w", w.clone(), true).map_err(err)?;
        let heat = grad_cam_with(
            &mut store,
            |f, x| {
                let wv = f.param(id);
                let maps = f.graph.conv2d(x, wv, Conv2dParams::new(1, 0))?;
                f.tap("maps", maps);
                f.graph.global_avg_pool(maps)
            },
            &image,
            class,
            "maps",
        )
        .map_err(err)?;
        for p in 0..20 {
            let a = w.data()[class * 2] * image.data()[p] + w.data()[class * 2 + 1] * image.data()[20 + p];
            worst = worst.max((heat.raw[p] - (a / 20.0).max(0.0)).abs());
        }
    }
    ensure(worst <= 1e-5, format!("analytic heatmap off by {worst:e}"))?;

    let test = run.split.indices(Split::Test);
    let size = run.data.image_size();
    let mut localized = 0;
    let mut fractions = Vec::new();
    for &i in &test {
        let (x, labels) = run.data.batch(&[i]).map_err(err)?;
        let heat = grad_cam(&mut run.best, &x, labels[0], None).map_err(err)?;
        let (rows, cols) = quadrant(labels[0], size);
        let f = heat.mass_fraction(rows, cols);
        fractions.push(f);
        if f >= 0.7 {
            localized += 1;
        }
    }
    let share = localized as f64 / test.len() as f64;
    fractions.sort_by(f64::total_cmp);
    let median = fractions[fractions.len() / 2];
    ensure(
        share >= 0.8,
        format!(
            "only {localized}/{} test heatmaps put >= 70% of mass in the true quadrant (median {median:.3}); analytic error {worst:.1e}",
            test.len()
        ),
    )?;
    Ok(format!(
        "{localized}/{} test heatmaps localized ({:.1}%), median mass {median:.3}; analytic error {worst:.1e}",
        test.len(),
        100.0 * share
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let seeds = [1u64, 2, 3];
    let epochs = 15;
    let mut table = String::from("  seed  loss   test acc  macro recall  class 3 recall\n");
    let mut minority: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for &seed in &seeds {
        let spec = SyntheticSpec::preset(Preset::Imbalanced, seed);
        let out = generate_synthetic(&spec, &dir.path().join(format!("data{seed}"))).map_err(err)?;
        let split = split_dataset(&out.manifest, SplitFractions::default(), seed).map_err(err)?;
        let data = Dataset::new(out.manifest, spec.image_size, Normalization::default()).map_err(err)?;
        for (slot, loss) in [LossKind::Focal(FocalLossConfig::default()), LossKind::CrossEntropy].into_iter().enumerate() {
            let cfg = ModelConfig { input_size: spec.image_size, ..ModelConfig::enhanced(4) };
            let mut model = Model::<f32>::new(cfg, seed).map_err(err)?;
            let tc = TrainConfig { epochs, seed, loss: loss.clone(), ..TrainConfig::default() };
            let mut trainer = Trainer::new(tc, &model).map_err(err)?;
            let t = Instant::now();
            trainer.fit(&mut model, &data, &split.indices(Split::Train), &split.indices(Split::Val), &mut []).map_err(err)?;
            let (_, report) = evaluate(&mut model, &data, &split.indices(Split::Test), &loss, 64).map_err(err)?;
            let r3 = report.per_class_recall[3];
            minority[slot].push(r3);
            let line = format!(
                "  {seed:>4}  {:<5}  {:>8.4}  {:>12.4}  {:>14.4}\n",
                if slot == 0 { "focal" } else { "ce" },
                report.accuracy,
                report.macro_recall,
                r3
            );
            eprintln!("{line}  ({:.0} s)", t.elapsed().as_secs_f64());
            table.push_str(&line);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (focal, ce) = (median(&mut minority[0]), median(&mut minority[1]));
    println!("{table}  median class 3 recall: focal {focal:.4}, ce {ce:.4}");
    ensure(focal >= ce - 0.02, format!("focal median {focal:.4} < cross-entropy median {ce:.4} - 0.02"))?;
    Ok(format!("median class 3 recall focal {focal:.4} vs ce {ce:.4} over seeds {seeds:?}, {epochs} epochs"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = SyntheticSpec { counts: vec![30, 40, 60, 20], ..SyntheticSpec::preset(Preset::Imbalanced, 9) };
    let out = generate_synthetic(&spec, &dir.path().join("data")).map_err(err)?;
    let split = split_dataset(&out.manifest, SplitFractions::default(), 9).map_err(err)?;
    let data = Dataset::new(out.manifest, spec.image_size, Normalization::default()).map_err(err)?;
    let (train, val) = (split.indices(Split::Train), split.indices(Split::Val));
    let model_cfg = ModelConfig { input_size: spec.image_size, ..ModelConfig::enhanced(4) };
    let train_cfg = |epochs| TrainConfig { epochs, seed: 9, batch_size: 32, log_wall_time: false, ..TrainConfig::default() };

    let run = |name: &str, epochs: usize| -> std::result::Result<(Vec<u8>, Vec<EpochRecord>, Vec<u8>), String> {
        let path = dir.path().join(format!("{name}.csv"));
        let mut sink = CsvMetricsSink::create(&path).map_err(err)?;
        let mut model = Model::<f32>::new(model_cfg.clone(), 9).map_err(err)?;
        let mut trainer = Trainer::new(train_cfg(epochs), &model).map_err(err)?;
        let history = trainer.fit(&mut model, &data, &train, &val, &mut [&mut sink]).map_err(err)?;
        drop(sink);
        let bytes = trainer.checkpoint(&model).to_bytes().map_err(err)?;
        Ok((std::fs::read(&path).map_err(err)?, history, bytes))
    };
    let (csv_a, hist_a, ckpt_a) = run("a", 3)?;
    let (csv_b, _, ckpt_b) = run("b", 3)?;
    ensure(csv_a == csv_b, "metrics CSVs differ between identical runs")?;
    ensure(ckpt_a == ckpt_b, "final checkpoints differ between identical runs")?;

    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    std::fs::write(&first, &ckpt_a).map_err(err)?;
    Checkpoint::load(&first).and_then(|c| c.save(&second)).map_err(err)?;
    ensure(std::fs::read(&second).map_err(err)? == ckpt_a, "save -> load -> save changed the checkpoint bytes")?;

    let mut model = Model::<f32>::new(model_cfg.clone(), 9).map_err(err)?;
    let part_dir = dir.path().join("part");
    let mut trainer = Trainer::new(train_cfg(1), &model).map_err(err)?.with_checkpoint_dir(&part_dir);
    trainer.fit(&mut model, &data, &train, &val, &mut []).map_err(err)?;
    let ckpt = Checkpoint::load(&part_dir.join("last.ckpt")).map_err(err)?;
    let mut resumed = ckpt.to_model().map_err(err)?;
    let mut trainer = Trainer::resume(&ckpt, &resumed).map_err(err)?;
    trainer.set_epochs(3).map_err(err)?;
    let hist_r = trainer.fit(&mut resumed, &data, &train, &val, &mut []).map_err(err)?;
    ensure(hist_r == hist_a, "resumed history differs from the uninterrupted run")?;
    ensure(trainer.checkpoint(&resumed).to_bytes().map_err(err)? == ckpt_a, "resumed weights differ from the uninterrupted run")?;
    Ok(format!(
        "{} metric rows and {}-byte checkpoints identical; round trip and resume exact",
        csv_a.iter().filter(|&&b| b == b'\n').count() - 1,
        ckpt_a.len()
    ))
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_attcdc")).args(args).env("NO_COLOR", "1").output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("`attcdc {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let tree = dir.path().join("radiography");
    let run = dir.path().join("run");
    cli(&["synth", "--preset", "imbalanced", "--out", s(&tree), "--seed", "10"])?;
    // The manifest is a generator artifact, not part of an image-folder tree.
    std::fs::remove_file(tree.join("manifest.csv")).map_err(err)?;
    cli(&["train", "--data", s(&tree), "--out", s(&run), "--image-size", "32", "--epochs", "3"])?;

    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).map_err(err)?).map_err(err)?;
    let names: Vec<String> = serde_json::from_value(config["class_names"].clone()).map_err(err)?;
    ensure(names == ["COVID-19", "Lung Opacity", "Normal", "Viral Pneumonia"], format!("class names {names:?}"))?;
    let t = &config["train"];
    ensure(t["batch_size"] == 64 && t["learning_rate"] == 0.001, format!("training hyperparameters {t}"))?;
    ensure(t["adam"]["beta1"] == 0.9 && t["adam"]["beta2"] == 0.999, format!("optimizer {}", t["adam"]))?;
    ensure(t["loss"].to_string().contains("focal") || t["loss"].to_string().contains("Focal"), format!("loss {}", t["loss"]))?;
    ensure(config["model"]["attention"] == true && config["model"]["conv_mode"] == "depthwise_separable", "model is not the enhanced variant")?;

    let manifest = DatasetManifest::read_csv(&run.join("manifest.csv"), &tree).map_err(err)?;
    let fractions = SplitFractions::default();
    let split = SplitAssignment::read_csv(&manifest, &run.join("split.csv"), 42, fractions).map_err(err)?;
    for (class, &n) in manifest.class_counts().iter().enumerate() {
        let want = fractions.allocate(n);
        for (k, which) in Split::ALL.iter().enumerate() {
            let got = split.indices(*which).iter().filter(|&&i| manifest.entries[i].label == class).count();
            ensure(got == want[k], format!("class {class} {which}: {got} != {}", want[k]))?;
        }
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).map_err(err)?;
    ensure(metrics.lines().count() == 1 + 6, format!("metrics.csv has {} lines", metrics.lines().count()))?;

    let report_path = dir.path().join("test.json");
    let summary = cli(&["evaluate", "--checkpoint", s(&run.join("best.ckpt")), "--data", s(&tree), "--split", "test", "--out", s(&report_path)])?;
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).map_err(err)?).map_err(err)?;
    let test_n = split.indices(Split::Test).len();
    ensure(report["samples"] == test_n as u64, format!("report covers {} samples, test split has {test_n}", report["samples"]))?;

    let overlay = dir.path().join("overlay.png");
    let image: PathBuf = tree.join("Viral Pneumonia").join("00000.png");
    cli(&["gradcam", "--checkpoint", s(&run.join("best.ckpt")), "--image", s(&image), "--out", s(&overlay)])?;
    ensure(overlay.exists(), "no overlay written")?;
    Ok(format!("stratified split, default hyperparameters and focal loss end to end; {}", summary.trim()))
}

// ----------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        eprintln!("running criterion {n}");
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let line = match &r {
            Ok(m) => format!("criterion {n:>2}: PASS ({secs:.1} s) {m}"),
            Err(m) => format!("criterion {n:>2}: FAIL ({secs:.1} s) {m}"),
        };
        println!("{line}");
        results.push((n, r, secs));
    };
    for (n, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)] {
        if want(n) {
            timed(n, &mut || f());
        }
    }
    if want(6) || want(8) {
        let train = || {
            let t = Instant::now();
            let run = train_easy();
            eprintln!("easy-preset training took {:.0} s", t.elapsed().as_secs_f64());
            run
        };
        // Criterion 6's time includes the training that criterion 8 reuses.
        let mut trained = None;
        if want(6) {
            timed(6, &mut || {
                let run = train();
                let outcome = match &run {
                    Ok(r) => criterion_6(r),
                    Err(e) => Err(format!("training failed: {e}")),
                };
                trained = Some(run);
                outcome
            });
        }
        if want(8) {
            let mut run = trained.unwrap_or_else(train);
            timed(8, &mut || match &mut run {
                Ok(r) => criterion_8(r),
                Err(e) => Err(format!("training failed: {e}")),
            });
        }
    }
    for (n, f) in [(7, criterion_7 as fn() -> Outcome), (9, criterion_9), (10, criterion_10)] {
        if want(n) {
            timed(n, &mut || f());
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    println!("\nacceptance summary");
    for (n, r, secs) in &results {
        println!("  {n:>2} {} {secs:>7.1} s", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
