use std::fs;
use std::path::Path;

use attcdc::checkpoint::Checkpoint;
use attcdc::data::{
    generate_synthetic, load_gray, preprocess, scan_image_folder, split_dataset, Dataset, DatasetManifest,
    Normalization, Preset, Split, SplitAssignment, SplitFractions, SyntheticSpec,
};
use attcdc::explain::{export_overlay, grad_cam};
use attcdc::loss::FocalLossConfig;
use attcdc::model::{Model, ModelConfig};
use attcdc::nn::ConvMode;
use attcdc::train::{evaluate, CsvMetricsSink, EpochSink, LossKind, TrainConfig, Trainer};
use attcdc::{Error, Tensor};
use serde::Serialize;

use crate::args::{
    effective_config, parse_list, AlphaArg, ConvModeArg, EvaluateArgs, GradcamArgs, LossArg, ModelArgs, ModelKind, ParamsArgs,
    PresetArg, SplitArg, SynthArgs, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn print_effective<A: Serialize>(command: &str, args: &A) {
    eprint!("# effective configuration for `{command}`\n{}", effective_config(args));
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Easy => Preset::Easy,
        PresetArg::Imbalanced => Preset::Imbalanced,
    }
}

fn fractions(s: &str) -> CliResult<SplitFractions> {
    let v: Vec<f64> = parse_list("split fraction", s).map_err(usage)?;
    let [train, val, test] = v[..] else {
        return Err(usage(format!("expected three split fractions, got {s:?}")));
    };
    let f = SplitFractions { train, val, test };
    f.validate()?;
    Ok(f)
}

pub fn model_config(args: &ModelArgs, num_classes: usize, input_size: usize) -> CliResult<ModelConfig> {
    let mut cfg = match args.model {
        ModelKind::Enhanced => ModelConfig::enhanced(num_classes),
        ModelKind::Baseline => ModelConfig::baseline(num_classes),
    };
    if let Some(r) = args.attention_reduction {
        if args.model == ModelKind::Baseline {
            return Err(usage("--attention-reduction only applies to --model enhanced"));
        }
        cfg.attention_reduction = r;
    }
    if let Some(m) = args.conv_mode {
        cfg.conv_mode = match m {
            ConvModeArg::Standard => ConvMode::Standard,
            ConvModeArg::Separable => ConvMode::DepthwiseSeparable,
        };
    }
    cfg.block_layout = parse_list("block layout", &args.block_layout).map_err(usage)?;
    cfg.growth_rate = args.growth_rate;
    cfg.stem_channels = args.stem_channels;
    cfg.input_size = input_size;
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(args: &SynthArgs) -> CliResult {
    print_effective("synth", args);
    if !args.force && args.out.is_dir() && fs::read_dir(&args.out).map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(usage(format!("{} exists and is not empty; pass --force to write into it", args.out.display())));
    }
    let spec = SyntheticSpec::preset(preset(args.preset), args.seed);
    let out = generate_synthetic(&spec, &args.out)?;
    print_counts(&out.manifest);
    Ok(())
}

fn print_counts(manifest: &DatasetManifest) {
    for (name, n) in manifest.class_names.iter().zip(manifest.class_counts()) {
        println!("{name}: {n}");
    }
    println!("total: {}", manifest.len());
}

pub fn params(args: &ParamsArgs) -> CliResult {
    print_effective("params", args);
    let cfg = model_config(&args.model, args.classes, args.image_size)?;
    let model = Model::<f32>::new(cfg, 0)?;
    let summary = model.summarize()?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    } else {
        print!("{}", summary.to_table());
        println!("trainable parameters: {}", model.count_parameters());
    }
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a> {
    cli: &'a TrainArgs,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    class_names: &'a [String],
    split_fractions: SplitFractions,
}

pub fn train(args: &TrainArgs) -> CliResult {
    let mut args = args.clone();
    fs::create_dir_all(&args.out).map_err(|e| usage(format!("cannot create {}: {e}", args.out.display())))?;
    let manifest = match (&args.data, args.synth) {
        (Some(dir), None) => {
            if !dir.is_dir() {
                return Err(usage(format!("data directory {} does not exist", dir.display())));
            }
            scan_image_folder(dir)?
        }
        (None, Some(p)) => {
            let spec = SyntheticSpec::preset(preset(p), args.seed);
            args.image_size.get_or_insert(spec.image_size);
            generate_synthetic(&spec, &args.out.join("data"))?.manifest
        }
        _ => return Err(usage("exactly one of --data and --synth is required")),
    };
    let size = *args.image_size.get_or_insert(224);
    print_effective("train", &args);

    let fractions = fractions(&args.split)?;
    let split = split_dataset(&manifest, fractions, args.seed)?;
    manifest.write_csv(&args.out.join("manifest.csv"))?;
    split.write_csv(&manifest, &args.out.join("split.csv"))?;

    let model_cfg = model_config(&args.model, manifest.num_classes(), size)?;
    let loss = match args.loss {
        LossArg::Focal => LossKind::Focal(match args.focal_alpha {
            AlphaArg::Uniform => FocalLossConfig { gamma: args.focal_gamma, ..FocalLossConfig::default() },
            AlphaArg::InverseFrequency => {
                let labels = manifest.labels();
                let mut counts = vec![0; manifest.num_classes()];
                for &i in &split.indices(Split::Train) {
                    counts[labels[i]] += 1;
                }
                FocalLossConfig::inverse_frequency(args.focal_gamma, &counts)?
            }
        }),
        LossArg::Ce => LossKind::CrossEntropy,
    };
    let mut train_cfg = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.lr,
        epochs: args.epochs,
        loss,
        seed: args.seed,
        log_wall_time: args.log_wall_time,
        ..TrainConfig::default()
    };
    train_cfg.augment.enabled = args.augment;
    train_cfg.validate()?;

    let run = RunConfig {
        cli: &args,
        model: &model_cfg,
        train: &train_cfg,
        class_names: &manifest.class_names,
        split_fractions: fractions,
    };
    write_file(&args.out.join("config.json"), serde_json::to_string_pretty(&run).map_err(Error::from)?)?;

    let counts = |s: Split| split.indices(s).len();
    log::info!(
        "{} images in {} classes; train {} / val {} / test {}",
        manifest.len(),
        manifest.num_classes(),
        counts(Split::Train),
        counts(Split::Val),
        counts(Split::Test)
    );

    let data = Dataset::new(manifest, size, Normalization::default())?;
    let metrics_path = args.out.join("metrics.csv");
    let (mut model, trainer, mut csv) = if args.resume {
        let ckpt = Checkpoint::load(&args.out.join("last.ckpt"))?;
        if ckpt.model_config != model_cfg {
            return Err(usage("checkpoint model configuration differs from the requested one"));
        }
        let model = ckpt.to_model()?;
        let mut trainer = Trainer::resume(&ckpt, &model)?;
        let expected = TrainConfig { epochs: trainer.config().epochs, ..train_cfg.clone() };
        if trainer.config() != &expected {
            return Err(usage("checkpoint training configuration differs from the requested one"));
        }
        trainer.set_epochs(args.epochs)?;
        (model, trainer, CsvMetricsSink::append(&metrics_path)?)
    } else {
        let model = Model::new(model_cfg, args.seed)?;
        let trainer = Trainer::new(train_cfg, &model)?;
        (model, trainer, CsvMetricsSink::create(&metrics_path)?)
    };
    let mut trainer = trainer.with_checkpoint_dir(&args.out);
    let sinks: &mut [&mut dyn EpochSink] = &mut [&mut csv];
    let history = trainer.fit(&mut model, &data, &split.indices(Split::Train), &split.indices(Split::Val), sinks)?;
    let state = trainer.state();
    if let Some(last) = history.iter().rev().find(|r| r.split == Split::Val) {
        println!("final val accuracy {:.4} after {} epochs", last.accuracy, state.epochs_completed);
    }
    if let (Some(acc), Some(epoch)) = (state.best_val_accuracy, state.best_epoch) {
        println!("best val accuracy {acc:.4} at epoch {epoch}");
    }
    Ok(())
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> CliResult {
    print_effective("evaluate", args);
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut model = ckpt.to_model()?;
    let cfg = model.config().clone();
    let manifest = scan_image_folder(&args.data)?;
    if manifest.num_classes() != cfg.num_classes {
        return Err(usage(format!(
            "checkpoint has {} classes but {} has {}",
            cfg.num_classes,
            args.data.display(),
            manifest.num_classes()
        )));
    }
    let indices = match args.split {
        SplitArg::All => (0..manifest.len()).collect(),
        s => {
            let which = match s {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                _ => Split::Test,
            };
            let seed = args.seed.or(ckpt.train_state.as_ref().map(|s| s.config.seed)).unwrap_or(42);
            let fractions = fractions(&args.fractions)?;
            let assignment = match &args.split_file {
                Some(path) => SplitAssignment::read_csv(&manifest, path, seed, fractions)?,
                None => split_dataset(&manifest, fractions, seed)?,
            };
            assignment.indices(which)
        }
    };
    if indices.is_empty() {
        return Err(usage("the selected split is empty"));
    }
    let data = Dataset::new(manifest, cfg.input_size, Normalization::default())?;
    let loss = ckpt.train_state.as_ref().map_or(LossKind::CrossEntropy, |s| s.config.loss.clone());
    let (record, report) = evaluate(&mut model, &data, &indices, &loss, args.batch_size)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_file(&args.out, json + "\n")?;
    println!(
        "{} samples: accuracy {:.4} precision {:.4} recall {:.4} loss {:.4}",
        report.samples, report.accuracy, report.macro_precision, report.macro_recall, record.loss
    );
    Ok(())
}

pub fn gradcam(args: &GradcamArgs) -> CliResult {
    print_effective("gradcam", args);
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut model = ckpt.to_model()?;
    let size = model.config().input_size;
    let k = model.config().num_classes;
    let gray = load_gray(&args.image)?;
    let plane = preprocess(&gray, size, Normalization::default());
    let input = Tensor::from_fn(&[1, 3, size, size], |i| plane[i % (size * size)]);

    let logits = model.logits(&input, attcdc::nn::Mode::Eval)?;
    let predicted = attcdc::metrics::argmax_rows(logits.data(), k)[0];
    let class = match args.class.as_str() {
        "predicted" => predicted,
        s => {
            let c: usize = s.parse().map_err(|_| usage(format!("--class must be an index or `predicted`, got {s:?}")))?;
            if c >= k {
                return Err(usage(format!("class {c} out of range for {k} classes")));
            }
            c
        }
    };
    let heat = grad_cam(&mut model, &input, class, args.layer.as_deref())?;
    export_overlay(&gray, &heat.upsampled, heat.height, heat.width, &args.out)?;
    if let Some(csv) = &args.csv {
        write_file(csv, heat.to_csv())?;
    }
    let probs = softmax(&heat.logits);
    println!("predicted class {predicted} (p = {:.4}); heatmap for class {class} at {}", probs[predicted], heat.layer);
    Ok(())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
