//! Named parameters, forward sessions and the basic layers networks are
//! assembled from.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::conv::ConvSpec;
use crate::deform::DeformSpec;
use crate::error::{invalid, shape_err};
use crate::tensor::{Real, Tensor};
use crate::Result;

/// Ordered map from parameter name to value. Iteration order is insertion
/// order, which keeps serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(invalid!("duplicate parameter {name}"));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let cur = self.get_mut(name)?;
        if cur.shape() != t.shape() {
            return Err(shape_err!("parameter {name} has shape {:?}, got {:?}", cur.shape(), t.shape()));
        }
        *cur = t;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Number of scalars in parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }
}

/// One forward pass: a fresh graph plus the parameters it has pulled in.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    vars: IndexMap<String, Var>,
    trainable: bool,
    linear_activations: bool,
}

impl<'a> Session<'a> {
    /// Session whose parameters are differentiable leaves.
    pub fn train(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            vars: IndexMap::new(),
            trainable: true,
            linear_activations: false,
        }
    }

    /// Session whose parameters are constants.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(store)
        }
    }

    /// Session over an existing graph in which the named parameters are
    /// already bound to nodes.
    pub fn bound(graph: Graph, store: &'a ParamStore, vars: IndexMap<String, Var>) -> Self {
        Self {
            graph,
            vars,
            ..Self::train(store)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Replace every GELU by the identity. Only useful for probing how a
    /// layer scales with its input.
    pub fn with_linear_activations(mut self) -> Self {
        self.linear_activations = true;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn act(&mut self, x: Var) -> Var {
        if self.linear_activations {
            self.graph.linear(x)
        } else {
            self.graph.gelu(x)
        }
    }

    /// Gradient for every parameter in the store, in store order. Parameters
    /// this session never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Uniform initialization with bound `sqrt(6 / fan_in)`, where the fan-in
/// is the number of inputs feeding each output.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let bound = (6.0 / fan_in as Real).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    Zeros,
}

/// Convolution layer owning `{name}.w` and, when biased, `{name}.b`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub init: Init,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            init: Init::HeUniform,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.spec.validate()?;
        let shape = self.spec.weight_shape();
        let w = match self.init {
            Init::HeUniform => he_uniform(&shape, rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        store.insert(&self.weight_name(), w)?;
        if self.spec.bias {
            store.insert(&self.bias_name(), Tensor::zeros(&[self.spec.out_channels]))?;
        }
        Ok(())
    }

    fn vars(&self, s: &mut Session) -> Result<(Var, Option<Var>)> {
        let w = s.param(&self.weight_name())?;
        let b = if self.spec.bias {
            Some(s.param(&self.bias_name())?)
        } else {
            None
        };
        Ok((w, b))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = self.vars(s)?;
        s.graph.conv(x, w, b, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Transpose convolution layer. Maps `spec.out_channels` to
/// `spec.in_channels`; the bias follows the output.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub name: String,
    pub spec: ConvSpec,
}

impl ConvTranspose {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self { name: name.into(), spec }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.spec.validate()?;
        // Fan-in of a transpose convolution counts the channels it reads.
        let shape = self.spec.weight_shape();
        let taps: usize = shape[2..].iter().product();
        let bound = (6.0 / (shape[0] * taps) as Real).sqrt();
        store.insert(&format!("{}.w", self.name), Tensor::uniform(&shape, -bound, bound, rng))?;
        if self.spec.bias {
            store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.spec.in_channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, y: Var, out_dims: Option<&[usize]>) -> Result<Var> {
        let w = s.param(&format!("{}.w", self.name))?;
        let b = if self.spec.bias {
            Some(s.param(&format!("{}.b", self.name))?)
        } else {
            None
        };
        s.graph.conv_transpose(y, w, b, &self.spec, out_dims)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_count() + if self.spec.bias { self.spec.in_channels } else { 0 }
    }
}

/// Deformable convolution whose offsets come from a zero-initialized
/// convolution over the same input (`{name}.offset`).
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub main: Conv,
    pub offset: Conv,
    pub spec: DeformSpec,
}

impl DeformConv {
    pub fn new(name: &str, spec: DeformSpec) -> Self {
        Self {
            main: Conv::new(name, spec.base.clone()),
            offset: Conv::new(format!("{name}.offset"), spec.offset_spec()).zero_init(),
            spec,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.spec.validate()?;
        self.main.init(store, rng)?;
        self.offset.init(store, rng)
    }

    pub fn offsets(&self, s: &mut Session, x: Var) -> Result<Var> {
        self.offset.forward(s, x)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let off = self.offsets(s, x)?;
        let (w, b) = self.main.vars(s)?;
        s.graph.deform_conv(x, w, b, off, &self.spec.base)
    }

    pub fn param_count(&self) -> usize {
        self.main.param_count() + self.offset.param_count()
    }
}

/// A convolution that is either rigid or deformable.
#[derive(Clone, Debug)]
pub enum Sampler {
    Rigid(Conv),
    Deformable(DeformConv),
}

impl Sampler {
    pub fn new(name: &str, spec: ConvSpec, deformable: bool) -> Self {
        if deformable {
            Sampler::Deformable(DeformConv::new(name, DeformSpec::new(spec)))
        } else {
            Sampler::Rigid(Conv::new(name, spec))
        }
    }

    pub fn spec(&self) -> &ConvSpec {
        match self {
            Sampler::Rigid(c) => &c.spec,
            Sampler::Deformable(d) => &d.spec.base,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            Sampler::Rigid(c) => c.init(store, rng),
            Sampler::Deformable(d) => d.init(store, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Sampler::Rigid(c) => c.forward(s, x),
            Sampler::Deformable(d) => d.forward(s, x),
        }
    }

    /// Parameters of the sampling convolution itself, excluding any offset
    /// network.
    pub fn core_param_count(&self) -> usize {
        self.spec().param_count()
    }

    pub fn offset_param_count(&self) -> usize {
        match self {
            Sampler::Rigid(_) => 0,
            Sampler::Deformable(d) => d.offset.param_count(),
        }
    }
}

/// Layer norm over channels with learned scale (`{name}.scale`, ones) and
/// shift (`{name}.shift`, zeros).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
    pub eps: Real,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: 1e-6,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&format!("{}.scale", self.name), Tensor::full(&[self.channels], 1.0))?;
        store.insert(&format!("{}.shift", self.name), Tensor::zeros(&[self.channels]))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(&format!("{}.scale", self.name))?;
        let b = s.param(&format!("{}.shift", self.name))?;
        s.graph.layer_norm(x, g, b, self.eps)
    }
}

/// Per-channel multiplier (`{name}`), zero at initialization.
#[derive(Clone, Debug)]
pub struct ChannelScale {
    pub name: String,
    pub channels: usize,
}

impl ChannelScale {
    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&self.name, Tensor::zeros(&[self.channels]))
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(&self.name)?;
        s.graph.scale_channels(x, g)
    }
}

/// Stem: two stride-2 convolutions with a GELU between them, downsampling by
/// 4 in-plane. For volumes the first convolution keeps the depth axis, so
/// depth shrinks by 2 only. No biases, so zero input maps to zero.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub first: Conv,
    pub second: Conv,
}

impl PatchEmbed {
    pub fn new(name: &str, rank: usize, in_channels: usize, out_channels: usize) -> Self {
        let s1: Vec<usize> = if rank == 3 { vec![2, 2, 1] } else { vec![2, 2] };
        let first = ConvSpec::dense(rank, in_channels, out_channels, 3)
            .with_stride(&s1)
            .with_bias(false);
        let second = ConvSpec::dense(rank, out_channels, out_channels, 3)
            .with_stride(&vec![2; rank])
            .with_bias(false);
        Self {
            first: Conv::new(format!("{name}.conv1"), first),
            second: Conv::new(format!("{name}.conv2"), second),
        }
    }

    /// Total downsampling factor per spatial axis.
    pub fn factor(&self) -> Vec<usize> {
        self.first
            .spec
            .stride
            .iter()
            .zip(&self.second.spec.stride)
            .map(|(a, b)| a * b)
            .collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.first.init(store, rng)?;
        self.second.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = s.act(h);
        self.second.forward(s, h)
    }
}

/// Upsampling by 2 along every axis with a transpose convolution, then a
/// pointwise projection halving the channels. No biases.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub up: ConvTranspose,
    pub proj: Conv,
}

impl PatchExpand {
    pub fn new(name: &str, rank: usize, channels: usize) -> Self {
        let up = ConvSpec::patch(rank, channels, channels, &vec![2; rank]).with_bias(false);
        let proj = ConvSpec::dense(rank, channels, (channels / 2).max(1), 1).with_bias(false);
        Self {
            up: ConvTranspose::new(format!("{name}.up"), up),
            proj: Conv::new(format!("{name}.proj"), proj),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.proj.spec.out_channels
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.proj.spec.in_channels < 2 || !self.proj.spec.in_channels.is_multiple_of(2) {
            return Err(invalid!("patch expand needs an even channel count, got {}", self.proj.spec.in_channels));
        }
        self.up.init(store, rng)?;
        self.proj.init(store, rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x, None)?;
        self.proj.forward(s, h)
    }
}
