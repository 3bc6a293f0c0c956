use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Spatial padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `kernel / 2`, preserving extent for odd kernels.
    Same,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddPatch {
        images: NodeId,
        patch: NodeId,
        row: usize,
        col: usize,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: (usize, usize),
    },
    Relu(NodeId),
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    AvgPool2(NodeId),
    Flatten(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    SoftCrossEntropy {
        teacher: Tensor,
        log_probs: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Leaves created with [`Tape::leaf`] are differentiable; [`Tape::constant`]
/// values are not, and no gradient is ever accumulated into them. An unarmed
/// tape evaluates the same ops but refuses [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    armed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            armed: true,
        }
    }

    /// A tape for inference only.
    pub fn unarmed() -> Self {
        Self {
            nodes: Vec::new(),
            armed: false,
        }
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = self.armed;
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Moves a node's value out, leaving the tape unusable for backward.
    pub fn into_value(mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor, TensorError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(id.0))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        self.armed && ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.check(a)?.zip_map(self.check(b)?, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = self.check(a)?.zip_map(self.check(b)?, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// Adds a `[channels, h, w]` patch to every image of a
    /// `[batch, channels, H, W]` tensor with its top-left corner at
    /// `(row, col)`. Pixels outside the patch support pass through unchanged.
    pub fn add_patch(
        &mut self,
        images: NodeId,
        patch: NodeId,
        row: usize,
        col: usize,
    ) -> Result<NodeId, TensorError> {
        let value = add_patch_value(self.check(images)?, self.check(patch)?, row, col)?;
        let rg = self.any_grad(&[images, patch]);
        Ok(self.push(
            Op::AddPatch {
                images,
                patch,
                row,
                col,
            },
            value,
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        let (x, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let pad = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if w.ndim() == 4 {
                    (w.shape()[2] / 2, w.shape()[3] / 2)
                } else {
                    (0, 0)
                }
            }
        };
        let g = conv_geom(x, w, b, pad)?;
        let value = kernels::conv2d_forward(x, w, b, &g);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = self.check(x)?.map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Relu(x), value, rg))
    }

    /// `input [batch, in] -> [batch, out]` with `weight [out, in]`, `bias [out]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (x, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.shape() != [w.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "affine(bias)",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let value = kernels::affine_forward(x, w, b);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Op::Affine { input, weight, bias }, value, rg))
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.check(x)?;
        let n = t.ndim();
        if n < 2 || t.shape()[n - 2] < 2 || t.shape()[n - 1] < 2 {
            return Err(TensorError::InvalidShape {
                op: "avgpool2",
                shape: t.shape().to_vec(),
                reason: "needs trailing spatial extents >= 2".into(),
            });
        }
        let value = kernels::avgpool2_forward(t);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::AvgPool2(x), value, rg))
    }

    /// `[batch, ...] -> [batch, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.check(x)?;
        let batch = t.shape()[0];
        let value = t.clone().reshape(vec![batch, t.len() / batch])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Flatten(x), value, rg))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = kernels::softmax_last(self.check(x)?)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Softmax(x), value, rg))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = kernels::log_softmax_last(self.check(x)?)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::LogSoftmax(x), value, rg))
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let t = self.check(x)?;
        if let Some(v) = t.data().iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive entry {v}"),
            });
        }
        let value = t.map(f64::ln);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Log(x), value, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = Tensor::scalar(self.check(x)?.sum());
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Sum(x), value, rg))
    }

    /// Batch-mean soft cross-entropy against fixed teacher probabilities.
    pub fn soft_cross_entropy(&mut self, teacher: &Tensor, log_probs: NodeId) -> Result<NodeId, TensorError> {
        let l = self.check(log_probs)?;
        kernels::check_soft_targets(teacher, l)?;
        let value = Tensor::scalar(kernels::soft_cross_entropy_value(teacher, l));
        let rg = self.any_grad(&[log_probs]);
        Ok(self.push(
            Op::SoftCrossEntropy {
                teacher: teacher.clone(),
                log_probs,
            },
            value,
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`, visiting nodes in strict
    /// reverse creation order. Returns gradients for differentiable leaves only.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if !self.armed {
            return Err(TensorError::NotArmed);
        }
        let root = self.check(loss)?;
        if !root.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(root.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(NodeId(idx), g);
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *b, || g.clone());
                    self.accumulate(&mut grads, *a, || g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, || zip(&g, vb, |x, y| x * y));
                    self.accumulate(&mut grads, *b, || zip(&g, va, |x, y| x * y));
                }
                Op::AddPatch {
                    images,
                    patch,
                    row,
                    col,
                } => {
                    let pshape = self.value(*patch).shape().to_vec();
                    self.accumulate(&mut grads, *patch, || patch_grad(&g, &pshape, *row, *col));
                    self.accumulate(&mut grads, *images, || g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let (x, w, b) = (self.value(*input), self.value(*weight), self.value(*bias));
                    let geom = conv_geom(x, w, b, *pad).expect("validated in forward");
                    if self.requires_grad(*weight) || self.requires_grad(*bias) {
                        let (gw, gb) = kernels::conv2d_grad_weight(&g, x, &geom);
                        self.accumulate(&mut grads, *weight, || gw);
                        self.accumulate(&mut grads, *bias, || gb);
                    }
                    self.accumulate(&mut grads, *input, || kernels::conv2d_grad_input(&g, w, &geom));
                }
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    self.accumulate(&mut grads, *x, || {
                        zip(&g, vx, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    });
                }
                Op::Affine { input, weight, bias } => {
                    let (x, w) = (self.value(*input), self.value(*weight));
                    if self.requires_grad(*weight) || self.requires_grad(*bias) {
                        let (gw, gb) = kernels::affine_grad_params(&g, x);
                        self.accumulate(&mut grads, *weight, || gw);
                        self.accumulate(&mut grads, *bias, || gb);
                    }
                    self.accumulate(&mut grads, *input, || kernels::affine_grad_input(&g, w));
                }
                Op::AvgPool2(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, || kernels::avgpool2_backward(&g, &shape));
                }
                Op::Flatten(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, || g.reshape(shape).expect("same length"));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    self.accumulate(&mut grads, *x, || softmax_backward(&g, y));
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    self.accumulate(&mut grads, *x, || log_softmax_backward(&g, y));
                }
                Op::Log(x) => {
                    let vx = self.value(*x);
                    self.accumulate(&mut grads, *x, || zip(&g, vx, |gv, xv| gv / xv));
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let gv = g.item();
                    self.accumulate(&mut grads, *x, || Tensor::filled(&shape, gv));
                }
                Op::SoftCrossEntropy { teacher, log_probs } => {
                    let k = -g.item() / teacher.shape()[0] as f64;
                    self.accumulate(&mut grads, *log_probs, || teacher.map(|t| k * t));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, make: impl FnOnce() -> Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[id.0] {
            Some(acc) => acc.add_scaled(&g, 1.0).expect("gradient shape matches node"),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, "backward", f).expect("gradient shape matches node")
}

fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, pad: (usize, usize)) -> Result<ConvGeom, TensorError> {
    if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.shape() != [w.shape()[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d(bias)",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (h, wd) = (x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d(kernel larger than input)",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    Ok(ConvGeom {
        batch: x.shape()[0],
        cin: x.shape()[1],
        h,
        w: wd,
        cout: w.shape()[0],
        kh,
        kw,
        pad_h: pad.0,
        pad_w: pad.1,
        oh: h + 2 * pad.0 - kh + 1,
        ow: wd + 2 * pad.1 - kw + 1,
    })
}

/// Forward value of [`Tape::add_patch`] without recording.
pub(crate) fn add_patch_value(images: &Tensor, patch: &Tensor, row: usize, col: usize) -> Result<Tensor, TensorError> {
    let (is, ps) = (images.shape(), patch.shape());
    if is.len() != 4 || ps.len() != 3 || is[1] != ps[0] {
        return Err(TensorError::ShapeMismatch {
            op: "add_patch",
            left: is.to_vec(),
            right: ps.to_vec(),
        });
    }
    if row + ps[1] > is[2] || col + ps[2] > is[3] {
        return Err(TensorError::InvalidShape {
            op: "add_patch",
            shape: ps.to_vec(),
            reason: format!("anchor ({row},{col}) puts patch outside {}x{} image", is[2], is[3]),
        });
    }
    let mut out = images.clone();
    let (c, h, w) = (is[1], is[2], is[3]);
    let (ph, pw) = (ps[1], ps[2]);
    let pd = patch.data();
    let od = out.data_mut();
    for b in 0..is[0] {
        for ch in 0..c {
            for y in 0..ph {
                let dst = &mut od[((b * c + ch) * h + row + y) * w + col..][..pw];
                let src = &pd[(ch * ph + y) * pw..][..pw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    Ok(out)
}

/// Sum over the batch of `grad` restricted to a patch support.
pub(crate) fn patch_grad(grad: &Tensor, patch_shape: &[usize], row: usize, col: usize) -> Tensor {
    let gs = grad.shape();
    let (c, h, w) = (gs[1], gs[2], gs[3]);
    let (ph, pw) = (patch_shape[1], patch_shape[2]);
    let mut out = Tensor::zeros(patch_shape);
    let gd = grad.data();
    let od = out.data_mut();
    for b in 0..gs[0] {
        for ch in 0..c {
            for y in 0..ph {
                let src = &gd[((b * c + ch) * h + row + y) * w + col..][..pw];
                let dst = &mut od[(ch * ph + y) * pw..][..pw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    out
}

fn softmax_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let cols = y.shape()[1];
    let mut out = Vec::with_capacity(y.len());
    for (gr, yr) in g.data().chunks_exact(cols).zip(y.data().chunks_exact(cols)) {
        let s = kernels::dot(gr, yr);
        out.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - s)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let cols = y.shape()[1];
    let mut out = Vec::with_capacity(y.len());
    for (gr, yr) in g.data().chunks_exact(cols).zip(y.data().chunks_exact(cols)) {
        let s: f64 = gr.iter().sum();
        out.extend(gr.iter().zip(yr).map(|(gv, yv)| gv - yv.exp() * s));
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}
