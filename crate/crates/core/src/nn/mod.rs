//! Parameterized layers built on the autograd graph.
//!
//! Layers own no tensors. They hold [`ParamId`]s into a [`ParamStore`], so
//! the same architecture can be instantiated in `f32` for training and `f64`
//! for gradient checks, and weights can be moved between models by name.

mod layers;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use layers::{
    Activation, AttentionBlock, BatchNorm2d, Conv2d, ConvMode, ConvUnit, DenseBlock, DenseLayer,
    DepthwiseSeparableConv, Linear, Transition,
};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics) are not trainable.
    pub trainable: bool,
}

/// Named tensors of one model, in construction order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element = f32> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{}: expected shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies every same-named tensor from `other`; returns how many were
    /// copied. Shapes must agree.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for e in &other.entries {
            if let Some(id) = self.find(&e.name) {
                self.set(id, e.value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// State for one forward pass: the graph being recorded, the parameters it
/// reads, and named intermediate values ("taps").
pub struct Forward<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    store: &'a mut ParamStore<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    taps: Vec<(String, Var)>,
    retain: Vec<String>,
    attention_override: Option<f64>,
}

impl<'a, T: Element> Forward<'a, T> {
    /// With `track_params`, trainable parameters enter the graph as variables
    /// and receive gradients.
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode, track_params: bool) -> Self {
        let n = store.len();
        Self {
            graph,
            store,
            vars: vec![None; n],
            mode,
            track_params,
            taps: Vec::new(),
            retain: Vec::new(),
            attention_override: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Uses `var` for parameter `id` instead of the stored value.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    /// Replaces every attention score with `value` (for ablations).
    pub fn force_attention(&mut self, value: Option<f64>) {
        self.attention_override = value;
    }

    pub fn attention_override(&self) -> Option<f64> {
        self.attention_override
    }

    /// Keeps the gradient of the tap called `name` when it is recorded.
    pub fn retain_tap(&mut self, name: impl Into<String>) {
        self.retain.push(name.into());
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = if self.track_params && e.trainable {
            self.graph.variable(e.value.clone())
        } else {
            self.graph.constant(e.value.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        let name = name.into();
        if self.retain.contains(&name) {
            self.graph.retain_grad(v);
        }
        self.taps.push((name, v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn find_tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Gradients of every trainable parameter read during this pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.entries[i].trainable {
                    return None;
                }
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }

    fn running_stats(&self, mean: ParamId, var: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (self.store.value(mean), self.store.value(var))
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }
}

/// One line of a model summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    /// Per-sample output shape `[1, C, H, W]` (or `[1, K]` for the head).
    pub out_shape: Vec<usize>,
    pub params: usize,
    /// MACs per sample if this site were a standard convolution.
    pub macs_standard: u64,
    /// MACs per sample if this site were depthwise-separable; equal to
    /// `macs_standard` where no substitution applies.
    pub macs_separable: u64,
    /// Geometry of a convolution that can be either standard or separable.
    #[serde(skip)]
    pub site: Option<ConvSite>,
}

/// `M` input channels, `N` output channels, `Dk×Dk` kernel, `Hp×Wp` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSite {
    pub m: usize,
    pub n: usize,
    pub dk: usize,
    pub hp: usize,
    pub wp: usize,
}

impl ConvSite {
    pub fn standard_macs(&self) -> u64 {
        standard_macs(self.m, self.n, self.dk, self.hp, self.wp)
    }

    pub fn separable_macs(&self) -> u64 {
        separable_macs(self.m, self.n, self.dk, self.hp, self.wp)
    }
}

/// Per-sample `[C, H, W]`.
pub type FeatureShape = [usize; 3];

fn row(name: impl Into<String>, shape: FeatureShape, params: usize) -> SummaryRow {
    SummaryRow {
        name: name.into(),
        out_shape: vec![1, shape[0], shape[1], shape[2]],
        params,
        macs_standard: 0,
        macs_separable: 0,
        site: None,
    }
}

/// Standard convolution MACs: `N·Hp·Wp·Dk²·M`.
pub fn standard_macs(m: usize, n: usize, dk: usize, hp: usize, wp: usize) -> u64 {
    (n * hp * wp * dk * dk * m) as u64
}

/// Depthwise-separable MACs: `M·Hp·Wp·(Dk² + N)`.
pub fn separable_macs(m: usize, n: usize, dk: usize, hp: usize, wp: usize) -> u64 {
    (m * hp * wp * (dk * dk + n)) as u64
}

/// He-normal initialization for a kernel with the given fan-in.
pub(crate) fn kaiming_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::cast(dist.sample(rng)))
}

pub(crate) fn fan_in_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::cast(dist.sample(rng)))
}
