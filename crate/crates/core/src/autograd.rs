//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] records every operation in execution order, so a single
//! reverse sweep visits nodes in a valid topological order.

use crate::conv::{conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvSpec};
use crate::deform::{deform_conv_backward, deform_conv_forward};
use crate::error::{invalid, shape_err};
use crate::loss::{dice_ce, dice_ce_backward, LossConfig, LossValue};
use crate::ops::{self, NormCache};
use crate::tensor::{elementwise, reduce_to_shape, BinaryOp, LabelMap, Real, Tensor};
use crate::Result;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Var, Var, BinaryOp),
    Scale(Var, Real),
    Sum(Var),
    ScaleChannels(Var, Var),
    Gelu(Var),
    /// Identity stand-in for an activation, used to probe linearity.
    Linear(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        cache: NormCache,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose {
        y: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Deform {
        x: Var,
        w: Var,
        b: Option<Var>,
        offsets: Var,
        spec: ConvSpec,
    },
    DiceCe {
        logits: Var,
        labels: LabelMap,
        cfg: LossConfig,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::param`]. Parameters that do
    /// not influence the loss get zeros; constants get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let value = elementwise(self.value(a), self.value(b), op)?;
        let g = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Binary(a, b, op), g))
    }

    /// `a + b`; `b` may broadcast along singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn scale(&mut self, a: Var, k: Real) -> Var {
        let value = self.value(a).scale(k);
        let g = self.needs_grad(a);
        self.push(value, Op::Scale(a, k), g)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.needs_grad(a);
        self.push(value, Op::Sum(a), g)
    }

    /// Multiply every channel of `x` by the matching entry of `gamma`.
    pub fn scale_channels(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let value = ops::scale_channels(self.value(x), self.value(gamma))?;
        let g = self.any_grad(&[Some(x), Some(gamma)]);
        Ok(self.push(value, Op::ScaleChannels(x, gamma), g))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = ops::gelu(self.value(x));
        let g = self.needs_grad(x);
        self.push(value, Op::Gelu(x), g)
    }

    /// Identity node, used where an activation is switched off.
    pub fn linear(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let g = self.needs_grad(x);
        self.push(value, Op::Linear(x), g)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: Real) -> Result<Var> {
        let (value, cache) = ops::layer_norm(self.value(x), self.value(scale), self.value(shift), eps)?;
        let g = self.any_grad(&[Some(x), Some(scale), Some(shift)]);
        Ok(self.push(value, Op::LayerNorm { x, scale, shift, cache }, g))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let value = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let g = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(value, Op::Conv { x, w, b, spec: spec.clone() }, g))
    }

    /// Transpose convolution; see [`conv_transpose_forward`].
    pub fn conv_transpose(
        &mut self,
        y: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
        out_dims: Option<&[usize]>,
    ) -> Result<Var> {
        let value = conv_transpose_forward(self.value(y), self.value(w), b.map(|b| self.value(b)), spec, out_dims)?;
        let g = self.any_grad(&[Some(y), Some(w), b]);
        Ok(self.push(value, Op::ConvTranspose { y, w, b, spec: spec.clone() }, g))
    }

    /// Deformable convolution sampling `x` at offsets given by `offsets`.
    pub fn deform_conv(&mut self, x: Var, w: Var, b: Option<Var>, offsets: Var, spec: &ConvSpec) -> Result<Var> {
        let value = deform_conv_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            self.value(offsets),
            spec,
        )?;
        let g = self.any_grad(&[Some(x), Some(w), b, Some(offsets)]);
        Ok(self.push(
            value,
            Op::Deform {
                x,
                w,
                b,
                offsets,
                spec: spec.clone(),
            },
            g,
        ))
    }

    /// Segmentation loss of `logits` against `labels`, as a scalar node.
    pub fn dice_ce(&mut self, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<(Var, LossValue)> {
        let (value, probs) = dice_ce(self.value(logits), labels, cfg)?;
        let g = self.needs_grad(logits);
        let v = self.push(
            Tensor::scalar(value.total),
            Op::DiceCe {
                logits,
                labels: labels.clone(),
                cfg: *cfg,
                probs,
            },
            g,
        );
        Ok((v, value))
    }

    /// Differentiate the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let is_param = matches!(node.op, Op::Leaf) && node.needs_grad;
            if is_param && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !is_param {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match grads[v.0].as_mut() {
                Some(cur) => {
                    if cur.shape() != t.shape() {
                        return Err(shape_err!("gradient shape {:?} vs {:?}", t.shape(), cur.shape()));
                    }
                    cur.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
                }
                None => grads[v.0] = Some(t),
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Binary(a, b, kind) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let ga = match kind {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => elementwise(g, bv, BinaryOp::Mul)?,
                    };
                    acc(*a, ga)?;
                }
                if wants(*b) {
                    let full = match kind {
                        BinaryOp::Add => g.clone(),
                        BinaryOp::Sub => g.scale(-1.0),
                        BinaryOp::Mul => elementwise(g, av, BinaryOp::Mul)?,
                    };
                    acc(*b, reduce_to_shape(&full, bv.shape())?)?;
                }
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k))?,
            Op::Sum(a) => {
                let gv = g.item()?;
                acc(*a, Tensor::full(nodes[a.0].value.shape(), gv))?;
            }
            Op::ScaleChannels(x, gamma) => {
                let (dx, dg) = ops::scale_channels_backward(&nodes[x.0].value, &nodes[gamma.0].value, g)?;
                if wants(*x) {
                    acc(*x, dx)?;
                }
                if wants(*gamma) {
                    acc(*gamma, dg)?;
                }
            }
            Op::Gelu(x) => acc(*x, ops::gelu_backward(&nodes[x.0].value, g)?)?,
            Op::Linear(x) => acc(*x, g.clone())?,
            Op::LayerNorm { x, scale, shift, cache } => {
                let (dx, ds, db) = ops::layer_norm_backward(cache, &nodes[scale.0].value, g)?;
                if wants(*x) {
                    acc(*x, dx)?;
                }
                if wants(*scale) {
                    acc(*scale, ds)?;
                }
                if wants(*shift) {
                    acc(*shift, db)?;
                }
            }
            Op::Conv { x, w, b, spec } => {
                let r = conv_backward(&nodes[x.0].value, &nodes[w.0].value, g, spec, wants(*x), wants(*w))?;
                add_conv_grads(&mut acc, *x, *w, *b, r.dx, r.dw, r.db, &wants)?;
            }
            Op::ConvTranspose { y, w, b, spec } => {
                let r = conv_transpose_backward(&nodes[y.0].value, &nodes[w.0].value, g, spec, wants(*y), wants(*w))?;
                add_conv_grads(&mut acc, *y, *w, *b, r.dx, r.dw, r.db, &wants)?;
            }
            Op::Deform { x, w, b, offsets, spec } => {
                let r = deform_conv_backward(
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    &nodes[offsets.0].value,
                    g,
                    spec,
                    [wants(*x), wants(*w), wants(*offsets)],
                )?;
                if let Some(d) = r.doffsets {
                    acc(*offsets, d)?;
                }
                add_conv_grads(&mut acc, *x, *w, *b, r.dx, r.dw, r.db, &wants)?;
            }
            Op::DiceCe { logits, labels, cfg, probs } => {
                let dz = dice_ce_backward(probs, labels, cfg, g.item()?)?;
                acc(*logits, dz)?;
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn add_conv_grads(
    acc: &mut impl FnMut(Var, Tensor) -> Result<()>,
    x: Var,
    w: Var,
    b: Option<Var>,
    dx: Option<Tensor>,
    dw: Option<Tensor>,
    db: Option<Tensor>,
    wants: &impl Fn(Var) -> bool,
) -> Result<()> {
    if let Some(d) = dx {
        acc(x, d)?;
    }
    if let Some(d) = dw {
        acc(w, d)?;
    }
    if let (Some(b), Some(d)) = (b, db) {
        if wants(b) {
            acc(b, d)?;
        }
    }
    Ok(())
}

/// Run `f` on a fresh graph where `inputs` are constants and return the
/// scalar it produces. Used for finite differences.
pub fn eval_scalar(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<Real> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(invalid!("expected a scalar output, got shape {:?}", v.shape()));
    }
    v.item()
}
