//! DenseNet-121 assembly with optional post-block attention and
//! depthwise-separable dense-layer convolutions.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, AttentionBlock, BatchNorm2d, Conv2d, ConvMode, ConvSite, DenseBlock, FeatureShape, Forward, Linear,
    Mode, ParamStore, SummaryRow, Transition,
};
use crate::tensor::kernels::{window_output_size, Rounding};
use crate::tensor::{Element, Tensor};

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Dense layers per block.
    pub block_layout: Vec<usize>,
    pub growth_rate: usize,
    /// Channel fraction kept by each transition.
    pub compression: f64,
    /// Output channels of the 7×7 stem convolution.
    pub stem_channels: usize,
    pub num_classes: usize,
    /// Realization of every dense-layer 3×3 convolution.
    pub conv_mode: ConvMode,
    /// Per-block override of `conv_mode`.
    #[serde(default)]
    pub block_conv_modes: Option<Vec<ConvMode>>,
    pub attention: bool,
    pub attention_reduction: usize,
    #[serde(default)]
    pub attention_activation: Activation,
    pub input_channels: usize,
    pub input_size: usize,
}

impl ModelConfig {
    /// Unmodified DenseNet-121.
    pub fn baseline(num_classes: usize) -> Self {
        Self {
            block_layout: vec![6, 12, 24, 16],
            growth_rate: 32,
            compression: 0.5,
            stem_channels: 64,
            num_classes,
            conv_mode: ConvMode::Standard,
            block_conv_modes: None,
            attention: false,
            attention_reduction: 16,
            attention_activation: Activation::Relu,
            input_channels: 3,
            input_size: 224,
        }
    }

    /// Attention after every block and separable 3×3 convolutions.
    pub fn enhanced(num_classes: usize) -> Self {
        Self { conv_mode: ConvMode::DepthwiseSeparable, attention: true, ..Self::baseline(num_classes) }
    }

    pub fn block_mode(&self, block: usize) -> ConvMode {
        self.block_conv_modes.as_ref().map_or(self.conv_mode, |m| m[block])
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.block_layout.is_empty() || self.block_layout.contains(&0) {
            return Err(Error::config("block_layout needs at least one block and every block at least one layer"));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 || self.input_channels == 0 {
            return Err(Error::config("growth_rate, stem_channels and input_channels must be positive"));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(format!("compression must be in (0, 1], got {}", self.compression)));
        }
        if let Some(m) = &self.block_conv_modes {
            if m.len() != self.block_layout.len() {
                return Err(Error::config(format!(
                    "block_conv_modes has {} entries for {} blocks",
                    m.len(),
                    self.block_layout.len()
                )));
            }
        }
        if self.attention && self.attention_reduction == 0 {
            return Err(Error::config("attention_reduction must be positive"));
        }
        if self.input_size < MIN_INPUT_SIDE {
            return Err(Error::config(format!("input_size must be at least {MIN_INPUT_SIDE}, got {}", self.input_size)));
        }
        Ok(())
    }
}

/// Name of the tap holding block `i`'s output (after attention, before the
/// transition). Blocks are numbered from 1.
pub fn block_output_tap(i: usize) -> String {
    format!("block{i}.out")
}

#[derive(Clone, Debug)]
struct Stage {
    block: DenseBlock,
    attention: Option<AttentionBlock>,
    transition: Option<Transition>,
}

/// The layer structure of a model; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    stem_conv: Conv2d,
    stem_norm: BatchNorm2d,
    stages: Vec<Stage>,
    final_norm: BatchNorm2d,
    classifier: Linear,
    input_channels: usize,
}

impl Architecture {
    pub fn build<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(store, &mut rng, "stem.conv", config.input_channels, config.stem_channels, 7, 2, 3)?
            .with_rounding(Rounding::Floor);
        let stem_norm = BatchNorm2d::new(store, "stem.norm", config.stem_channels)?;
        let mut c = config.stem_channels;
        let mut stages = Vec::new();
        let last = config.block_layout.len() - 1;
        for (i, &layers) in config.block_layout.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let block = DenseBlock::new(store, &mut rng, &name, c, layers, config.growth_rate, config.block_mode(i))?;
            c = block.out_channels();
            let attention = if config.attention {
                Some(AttentionBlock::new(
                    store,
                    &mut rng,
                    &format!("{name}.attention"),
                    c,
                    config.attention_reduction,
                    config.attention_activation,
                )?)
            } else {
                None
            };
            let transition = if i < last {
                let t = Transition::new(store, &mut rng, &format!("transition{}", i + 1), c, config.compression)?;
                c = t.out_channels();
                Some(t)
            } else {
                None
            };
            stages.push(Stage { block, attention, transition });
        }
        let final_norm = BatchNorm2d::new(store, "final.norm", c)?;
        let classifier = Linear::new(store, &mut rng, "classifier", c, config.num_classes)?;
        Ok(Self { stem_conv, stem_norm, stages, final_norm, classifier, input_channels: config.input_channels })
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.stages.iter().map(|s| &s.block)
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &AttentionBlock> {
        self.stages.iter().filter_map(|s| s.attention.as_ref())
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Per-sample shapes and parameter counts, in forward order. Errors name
    /// the first stage the input is too small for.
    pub fn summarize(&self, height: usize, width: usize) -> Result<Vec<SummaryRow>> {
        if height < MIN_INPUT_SIDE || width < MIN_INPUT_SIDE {
            return Err(Error::shape(format!(
                "input: {height}×{width} is smaller than the minimum {MIN_INPUT_SIDE}×{MIN_INPUT_SIDE}"
            )));
        }
        let mut rows = Vec::new();
        let mut s: FeatureShape = [self.input_channels, height, width];
        s = self.stem_conv.summarize(s, &mut rows, false)?;
        s = self.stem_norm.summarize(s, &mut rows)?;
        let pool = |v| window_output_size(v, 3, 2, 1, Rounding::Floor);
        s = [s[0], pool(s[1])?, pool(s[2])?];
        rows.push(plain_row("stem.pool", s));
        for (i, stage) in self.stages.iter().enumerate() {
            s = stage.block.summarize(s, &mut rows)?;
            if let Some(a) = &stage.attention {
                s = a.summarize(s, &mut rows)?;
            }
            if let Some(t) = &stage.transition {
                s = t.summarize(s, &mut rows).map_err(|e| stage_error(i + 1, e))?;
            }
        }
        s = self.final_norm.summarize(s, &mut rows)?;
        rows.push(plain_row("final.pool", [s[0], 1, 1]));
        rows.push(self.classifier.summary_row());
        Ok(rows)
    }

    /// Records a forward pass from `x: [N, C, H, W]` to logits `[N, K]`.
    ///
    /// Taps: `block{i}.dense`, `block{i}.attention` (when present) and
    /// `block{i}.out`.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.graph.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.input_channels {
            return Err(Error::shape(format!(
                "input: expected [N, {}, H, W], got {shape:?}",
                self.input_channels
            )));
        }
        // Shape inference catches undersized inputs before any compute.
        self.summarize(shape[2], shape[3])?;

        let mut h = self.stem_conv.forward(f, x)?;
        h = self.stem_norm.forward(f, h)?;
        h = f.graph.relu(h);
        h = f.graph.max_pool2d(h, 3, 2, 1)?;
        for (i, stage) in self.stages.iter().enumerate() {
            let n = i + 1;
            h = stage.block.forward(f, h)?;
            f.tap(format!("block{n}.dense"), h);
            if let Some(a) = &stage.attention {
                h = a.forward(f, h)?;
                f.tap(format!("block{n}.attention"), h);
            }
            f.tap(block_output_tap(n), h);
            if let Some(t) = &stage.transition {
                h = t.forward(f, h)?;
            }
        }
        h = self.final_norm.forward(f, h)?;
        h = f.graph.relu(h);
        h = f.graph.global_avg_pool(h)?;
        self.classifier.forward(f, h)
    }
}

fn stage_error(block: usize, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::shape(format!("after block{block}: {m}")),
        other => other,
    }
}

fn plain_row(name: &str, s: FeatureShape) -> SummaryRow {
    SummaryRow {
        name: name.to_string(),
        out_shape: vec![1, s[0], s[1], s[2]],
        params: 0,
        macs_standard: 0,
        macs_separable: 0,
        site: None,
    }
}

/// An architecture together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    arch: Architecture,
    store: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model; `seed` drives weight initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Architecture::build(&config, &mut store, seed)?;
        Ok(Self { config, arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Splits the model so a [`Forward`] can borrow the parameters while the
    /// architecture drives it.
    pub fn parts(&mut self) -> (&Architecture, &mut ParamStore<T>) {
        (&self.arch, &mut self.store)
    }

    pub fn count_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Logits without recording gradients. Train mode updates batch-norm
    /// running statistics.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.logits_with(x, mode, None)
    }

    /// Like [`Model::logits`], optionally forcing every attention score.
    pub fn logits_with(&mut self, x: &Tensor<T>, mode: Mode, forced_attention: Option<f64>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut f = Forward::new(&mut g, &mut self.store, mode, false);
        f.force_attention(forced_attention);
        let xv = f.graph.constant(x.clone());
        let out = self.arch.forward(&mut f, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn summarize(&self) -> Result<ModelSummary> {
        self.summarize_at(self.config.input_size)
    }

    pub fn summarize_at(&self, input_size: usize) -> Result<ModelSummary> {
        let rows = self.arch.summarize(input_size, input_size)?;
        Ok(ModelSummary::new(rows, input_size))
    }

    /// MACs of every dense-layer 3×3 site under both realizations.
    pub fn complexity_report(&self, input_size: usize) -> Result<ComplexityReport> {
        let rows = self.arch.summarize(input_size, input_size)?;
        let sites: Vec<ComplexitySite> = rows
            .iter()
            .filter_map(|r| r.site.map(|s| (r, s)))
            .map(|(r, s)| ComplexitySite {
                name: r.name.clone(),
                site: s,
                macs_standard: s.standard_macs(),
                macs_separable: s.separable_macs(),
                ratio: s.separable_macs() as f64 / s.standard_macs() as f64,
            })
            .collect();
        let total_standard = sites.iter().map(|s| s.macs_standard).sum();
        let total_separable = sites.iter().map(|s| s.macs_separable).sum();
        Ok(ComplexityReport {
            input_size,
            total_standard,
            total_separable,
            ratio: total_separable as f64 / total_standard as f64,
            sites,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { config: self.config.clone(), arch: self.arch.clone(), store: self.store.cast() }
    }

    /// Copies every same-named tensor from `other`.
    pub fn copy_weights_from(&mut self, other: &Model<T>) -> Result<usize> {
        self.store.copy_matching(&other.store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub input_size: usize,
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
    pub total_macs_standard: u64,
    pub total_macs_separable: u64,
}

impl ModelSummary {
    fn new(rows: Vec<SummaryRow>, input_size: usize) -> Self {
        Self {
            input_size,
            total_params: rows.iter().map(|r| r.params).sum(),
            total_macs_standard: rows.iter().map(|r| r.macs_standard).sum(),
            total_macs_separable: rows.iter().map(|r| r.macs_separable).sum(),
            rows,
        }
    }

    /// The rows as a JSON array.
    pub fn rows_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:<18}  {:>10}  {:>14}  {:>14}",
            "layer", "output", "params", "macs_standard", "macs_separable"
        );
        for r in &self.rows {
            let shape = r.out_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(
                out,
                "{:<width$}  {:<18}  {:>10}  {:>14}  {:>14}",
                r.name, shape, r.params, r.macs_standard, r.macs_separable
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<18}  {:>10}  {:>14}  {:>14}",
            "total", "", self.total_params, self.total_macs_standard, self.total_macs_separable
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySite {
    pub name: String,
    pub site: ConvSite,
    pub macs_standard: u64,
    pub macs_separable: u64,
    /// `1/N + 1/Dk²`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_size: usize,
    pub sites: Vec<ComplexitySite>,
    pub total_standard: u64,
    pub total_separable: u64,
    pub ratio: f64,
}
