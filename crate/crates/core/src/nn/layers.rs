use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    fan_in_uniform, kaiming_normal, row, ConvSite, FeatureShape, Forward, Mode, ParamId,
    ParamStore, SummaryRow,
};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::kernels::{window_output_size, Conv2dParams, Rounding};
use crate::tensor::{Element, Tensor};

/// How the 3×3 convolution inside a dense layer is realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    #[default]
    Standard,
    DepthwiseSeparable,
}

/// Activation between the two attention FC layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    weight: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    params: Conv2dParams,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::config(format!("{name}: channels, kernel and stride must be positive")));
        }
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let weight = store.add(format!("{name}.weight"), w, true)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            in_channels,
            out_channels,
            kernel,
            params: Conv2dParams::new(stride, padding),
        })
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.params = self.params.with_rounding(rounding);
        self
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        if self.kernel == 1 && self.params.stride == 1 && self.params.padding == 0 {
            f.graph.pointwise_conv2d(x, w)
        } else {
            f.graph.conv2d(x, w, self.params)
        }
    }

    pub fn output_shape(&self, s: FeatureShape) -> Result<FeatureShape> {
        if s[0] != self.in_channels {
            return Err(Error::shape(format!("{}: expected {} channels, got {}", self.name, self.in_channels, s[0])));
        }
        let p = self.params;
        let side = |v| window_output_size(v, self.kernel, p.stride, p.padding, p.rounding);
        Ok([self.out_channels, side(s[1])?, side(s[2])?])
    }

    /// `substitutable` marks sites that could be made depthwise-separable.
    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>, substitutable: bool) -> Result<FeatureShape> {
        let out = self.output_shape(s)?;
        let site = ConvSite { m: self.in_channels, n: self.out_channels, dk: self.kernel, hp: out[1], wp: out[2] };
        let mut r = row(&self.name, out, self.param_count());
        r.macs_standard = site.standard_macs();
        r.macs_separable = if substitutable { site.separable_macs() } else { r.macs_standard };
        r.site = substitutable.then_some(site);
        rows.push(r);
        Ok(out)
    }
}

/// Depthwise convolution followed by a pointwise (1×1) convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparableConv {
    name: String,
    depthwise: ParamId,
    pointwise: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    params: Conv2dParams,
}

impl DepthwiseSeparableConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::config(format!("{name}: channels, kernel and stride must be positive")));
        }
        let dw = kaiming_normal(&[in_channels, 1, kernel, kernel], kernel * kernel, rng);
        let depthwise = store.add(format!("{name}.depthwise.weight"), dw, true)?;
        let pw = kaiming_normal(&[out_channels, in_channels, 1, 1], in_channels, rng);
        let pointwise = store.add(format!("{name}.pointwise.weight"), pw, true)?;
        Ok(Self {
            name: name.to_string(),
            depthwise,
            pointwise,
            in_channels,
            out_channels,
            kernel,
            params: Conv2dParams::new(stride, padding),
        })
    }

    pub fn depthwise(&self) -> ParamId {
        self.depthwise
    }

    pub fn pointwise(&self) -> ParamId {
        self.pointwise
    }

    /// `M·Dk² + M·N`.
    pub fn param_count(&self) -> usize {
        self.in_channels * self.kernel * self.kernel + self.in_channels * self.out_channels
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let dw = f.param(self.depthwise);
        let pw = f.param(self.pointwise);
        let mid = f.graph.depthwise_conv2d(x, dw, self.params)?;
        f.graph.pointwise_conv2d(mid, pw)
    }

    pub fn output_shape(&self, s: FeatureShape) -> Result<FeatureShape> {
        if s[0] != self.in_channels {
            return Err(Error::shape(format!("{}: expected {} channels, got {}", self.name, self.in_channels, s[0])));
        }
        let p = self.params;
        let side = |v| window_output_size(v, self.kernel, p.stride, p.padding, p.rounding);
        Ok([self.out_channels, side(s[1])?, side(s[2])?])
    }

    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        let out = self.output_shape(s)?;
        let site = ConvSite { m: self.in_channels, n: self.out_channels, dk: self.kernel, hp: out[1], wp: out[2] };
        let mut r = row(&self.name, out, self.param_count());
        r.macs_standard = site.standard_macs();
        r.macs_separable = site.separable_macs();
        r.site = Some(site);
        rows.push(r);
        Ok(out)
    }
}

/// A convolution site that may be standard or depthwise-separable.
#[derive(Clone, Debug)]
pub enum ConvUnit {
    Standard(Conv2d),
    Separable(DepthwiseSeparableConv),
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        mode: ConvMode,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(match mode {
            ConvMode::Standard => Self::Standard(Conv2d::new(store, rng, name, in_channels, out_channels, kernel, 1, padding)?),
            ConvMode::DepthwiseSeparable => Self::Separable(DepthwiseSeparableConv::new(
                store,
                rng,
                name,
                in_channels,
                out_channels,
                kernel,
                1,
                padding,
            )?),
        })
    }

    pub fn mode(&self) -> ConvMode {
        match self {
            Self::Standard(_) => ConvMode::Standard,
            Self::Separable(_) => ConvMode::DepthwiseSeparable,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Standard(c) => c.param_count(),
            Self::Separable(c) => c.param_count(),
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Self::Standard(c) => c.forward(f, x),
            Self::Separable(c) => c.forward(f, x),
        }
    }

    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        match self {
            Self::Standard(c) => c.summarize(s, rows, true),
            Self::Separable(c) => c.summarize(s, rows),
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    name: String,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config(format!("{name}: batch norm over zero channels")));
        }
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(&[channels]), true)?;
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true)?;
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?;
        let running_var = store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?;
        Ok(Self {
            name: name.to_string(),
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        })
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn running_stats(&self) -> (ParamId, ParamId) {
        (self.running_mean, self.running_var)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let xs = f.graph.value(x).shape().to_vec();
        if xs.len() < 2 || xs[1] != self.channels {
            return Err(Error::shape(format!("{}: expected {} channels, got shape {xs:?}", self.name, self.channels)));
        }
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.graph.batchnorm_train(x, g, b, self.eps)?;
                let count = (xs[0] * xs[2..].iter().product::<usize>()) as f64;
                let unbiased = count / (count - 1.0);
                let m = self.momentum;
                let store = f.store_mut();
                let rm = store.value_mut(self.running_mean).data_mut();
                for (r, mean) in rm.iter_mut().zip(&stats.mean) {
                    *r = T::cast((1.0 - m) * r.widen() + m * mean);
                }
                let rv = store.value_mut(self.running_var).data_mut();
                for (r, var) in rv.iter_mut().zip(&stats.var) {
                    *r = T::cast((1.0 - m) * r.widen() + m * var * unbiased);
                }
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = f.running_stats(self.running_mean, self.running_var);
                let (mean, var) = (mean.clone(), var.clone());
                f.graph.batchnorm_eval(x, g, b, &mean, &var, self.eps)
            }
        }
    }

    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        if s[0] != self.channels {
            return Err(Error::shape(format!("{}: expected {} channels, got {}", self.name, self.channels, s[0])));
        }
        rows.push(row(&self.name, s, self.param_count()));
        Ok(s)
    }
}

/// Fully connected layer `x · Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    weight: ParamId,
    bias: ParamId,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::config(format!("{name}: linear layer with zero features")));
        }
        let w = fan_in_uniform(&[out_features, in_features], in_features, rng);
        let weight = store.add(format!("{name}.weight"), w, true)?;
        let b = fan_in_uniform(&[out_features], in_features, rng);
        let bias = store.add(format!("{name}.bias"), b, true)?;
        Ok(Self { name: name.to_string(), weight, bias, in_features, out_features })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.graph.linear(x, w, Some(b))
    }

    pub fn summary_row(&self) -> SummaryRow {
        SummaryRow {
            name: self.name.clone(),
            out_shape: vec![1, self.out_features],
            params: self.param_count(),
            macs_standard: 0,
            macs_separable: 0,
            site: None,
        }
    }
}

/// Channel attention: pooled channel descriptors pass through two FC layers
/// and a sigmoid, and the resulting scores rescale each channel.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    name: String,
    fc1: Linear,
    fc2: Linear,
    channels: usize,
    reduction: usize,
    activation: Activation,
}

impl AttentionBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        activation: Activation,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
            return Err(Error::config(format!(
                "{name}: {channels} channels are not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden)?;
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels)?;
        Ok(Self { name: name.to_string(), fc1, fc2, channels, reduction, activation })
    }

    pub fn fc1(&self) -> &Linear {
        &self.fc1
    }

    pub fn fc2(&self) -> &Linear {
        &self.fc2
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// `C·(C/r) + C/r + (C/r)·C + C`.
    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    /// Records the scores as the tap `<name>.scores`.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let xs = f.graph.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(Error::shape(format!("{}: expected {} channels, got shape {xs:?}", self.name, self.channels)));
        }
        let scores = match f.attention_override() {
            Some(v) => f.graph.constant(Tensor::full(&[xs[0], self.channels], T::cast(v))),
            None => {
                let pooled = f.graph.global_avg_pool(x)?;
                let mut h = self.fc1.forward(f, pooled)?;
                if self.activation == Activation::Relu {
                    h = f.graph.relu(h);
                }
                let z = self.fc2.forward(f, h)?;
                f.graph.sigmoid(z)
            }
        };
        f.tap(format!("{}.scores", self.name), scores);
        f.graph.channel_scale(x, scores)
    }

    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        if s[0] != self.channels {
            return Err(Error::shape(format!("{}: expected {} channels, got {}", self.name, self.channels, s[0])));
        }
        rows.push(row(&self.name, s, self.param_count()));
        Ok(s)
    }
}

/// BN-ReLU-1×1 conv bottleneck followed by BN-ReLU-3×3 conv; the output is
/// the input with `growth` new channels appended.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: ConvUnit,
    in_channels: usize,
    growth: usize,
}

impl DenseLayer {
    pub const BOTTLENECK: usize = 4;

    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        growth: usize,
        mode: ConvMode,
    ) -> Result<Self> {
        let width = Self::BOTTLENECK * growth;
        Ok(Self {
            norm1: BatchNorm2d::new(store, &format!("{name}.norm1"), in_channels)?,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_channels, width, 1, 1, 0)?,
            norm2: BatchNorm2d::new(store, &format!("{name}.norm2"), width)?,
            conv2: ConvUnit::new(store, rng, &format!("{name}.conv2"), mode, width, growth, 3, 1)?,
            in_channels,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth
    }

    pub fn conv2(&self) -> &ConvUnit {
        &self.conv2
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count() + self.conv1.param_count() + self.norm2.param_count() + self.conv2.param_count()
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.norm1.forward(f, x)?;
        h = f.graph.relu(h);
        h = self.conv1.forward(f, h)?;
        h = self.norm2.forward(f, h)?;
        h = f.graph.relu(h);
        h = self.conv2.forward(f, h)?;
        f.graph.channel_concat(&[x, h])
    }

    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        let mut h = self.norm1.summarize(s, rows)?;
        h = self.conv1.summarize(h, rows, false)?;
        h = self.norm2.summarize(h, rows)?;
        h = self.conv2.summarize(h, rows)?;
        Ok([s[0] + h[0], h[1], h[2]])
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    in_channels: usize,
}

impl DenseBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        num_layers: usize,
        growth: usize,
        mode: ConvMode,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::config(format!("{name}: a dense block needs at least one layer")));
        }
        let mut layers = Vec::with_capacity(num_layers);
        let mut c = in_channels;
        for i in 0..num_layers {
            let layer = DenseLayer::new(store, rng, &format!("{name}.layer{}", i + 1), c, growth, mode)?;
            c = layer.out_channels();
            layers.push(layer);
        }
        Ok(Self { layers, in_channels })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, DenseLayer::out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        Ok(x)
    }

    pub fn summarize(&self, mut s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        for layer in &self.layers {
            s = layer.summarize(s, rows)?;
        }
        Ok(s)
    }
}

/// BN-ReLU, 1×1 compression convolution and 2×2 average pooling.
#[derive(Clone, Debug)]
pub struct Transition {
    name: String,
    norm: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        compression: f64,
    ) -> Result<Self> {
        if !(compression > 0.0 && compression <= 1.0) {
            return Err(Error::config(format!("{name}: compression must be in (0, 1], got {compression}")));
        }
        let out = (compression * in_channels as f64).floor() as usize;
        if out == 0 {
            return Err(Error::config(format!("{name}: compression leaves no channels")));
        }
        Ok(Self {
            name: name.to_string(),
            norm: BatchNorm2d::new(store, &format!("{name}.norm"), in_channels)?,
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out, 1, 1, 0)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count() + self.conv.param_count()
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = f.graph.value(x).shape().to_vec();
        if s.len() == 4 && (s[2] < 2 || s[3] < 2) {
            return Err(Error::shape(format!("{}: feature map {}×{} is too small to pool", self.name, s[2], s[3])));
        }
        let mut h = self.norm.forward(f, x)?;
        h = f.graph.relu(h);
        h = self.conv.forward(f, h)?;
        f.graph.avg_pool2d(h, 2, 2)
    }

    pub fn summarize(&self, s: FeatureShape, rows: &mut Vec<SummaryRow>) -> Result<FeatureShape> {
        if s[1] < 2 || s[2] < 2 {
            return Err(Error::shape(format!("{}: feature map {}×{} is too small to pool", self.name, s[1], s[2])));
        }
        let h = self.norm.summarize(s, rows)?;
        let h = self.conv.summarize(h, rows, false)?;
        let out = [h[0], h[1] / 2, h[2] / 2];
        rows.push(row(format!("{}.pool", self.name), out, 0));
        Ok(out)
    }
}
