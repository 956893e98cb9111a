use super::{buffers, conv, elementwise, linalg, norm_ops, pool, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation with everything its backward rule needs.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Powf(Var, T),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    ScaleBy(Var, Var),
    Reshape(Var),
    Concat(Var, Var),
    Conv2d(conv::Conv2dOp),
    ConvTranspose2x2 { x: Var, kernel: Var },
    MaxPool2x2 { x: Var, argmax: Vec<u32> },
    Bmm(linalg::BmmOp),
    AffinitySoftmax { query: Var, key: Var },
    SoftmaxLast(Var),
    BatchNorm { x: Var, inv_std: Vec<T> },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Define-by-run differentiation tape. Build a fresh tape per forward pass.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    visits: usize,
}

impl<T: Scalar> Drop for Tape<T> {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            buffers::recycle(node.value.data);
        }
        for g in self.grads.drain(..).flatten() {
            buffers::recycle(g);
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), visits: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push_node(t, Op::Leaf, needs_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        copy.set_requires_grad(true);
        self.push_node(copy, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    /// Number of node visits during the last backward pass.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate over fan-out;
    /// leaf gradients stay available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(loss_shape.to_vec()));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.visits = 0;
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.visits += 1;
            if matches!(node.op, Op::Leaf) {
                self.grads[id] = Some(g);
                continue;
            }
            let mut sink = GradSink { nodes: &self.nodes, grads: &mut self.grads };
            backward_node(&mut sink, id, &g)?;
            buffers::recycle(g);
        }
        Ok(())
    }
}

/// Accumulates gradient contributions into input nodes that require them.
pub(crate) struct GradSink<'a, T: Scalar> {
    pub(crate) nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Zero-initialized (on first touch) gradient buffer of `v`.
    pub(crate) fn buf(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| buffers::zeroed(len))
    }

    /// Adds `f(i)` into the gradient of `v` for every element.
    pub(crate) fn add_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        for (i, g) in self.buf(v).iter_mut().enumerate() {
            *g = *g + f(i);
        }
    }
}

pub(crate) fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Log(x)
        | Op::Square(x)
        | Op::Neg(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Powf(x, _)
        | Op::Clamp(x, _, _)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x)
        | Op::SoftmaxLast(x) => vec![*x],
        Op::ScaleBy(x, g) => vec![*x, *g],
        Op::Concat(a, b) => vec![*a, *b],
        Op::Conv2d(c) => {
            let mut v = vec![c.x, c.kernel];
            v.extend(c.bias);
            v
        }
        Op::ConvTranspose2x2 { x, kernel } => vec![*x, *kernel],
        Op::MaxPool2x2 { x, .. } => vec![*x],
        Op::Bmm(b) => vec![b.a, b.b],
        Op::AffinitySoftmax { query, key } => vec![*query, *key],
        Op::BatchNorm { x, .. } | Op::InstanceNorm { x, .. } => vec![*x],
        Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
    }
}

fn backward_node<T: Scalar>(sink: &mut GradSink<'_, T>, id: usize, g: &[T]) -> Result<()> {
    let nodes = sink.nodes;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d(c) => conv::conv2d_backward(sink, c, g),
        Op::ConvTranspose2x2 { x, kernel } => conv::conv_t_backward(sink, *x, *kernel, g),
        Op::MaxPool2x2 { x, argmax } => pool::maxpool_backward(sink, *x, argmax, g),
        Op::Bmm(b) => linalg::bmm_backward(sink, b, g),
        Op::AffinitySoftmax { query, key } => linalg::affinity_backward(sink, *query, *key, out, g),
        Op::SoftmaxLast(x) => linalg::softmax_last_backward(sink, *x, out, g),
        Op::BatchNorm { x, inv_std } => norm_ops::batch_norm_backward(sink, *x, out, inv_std, g),
        Op::InstanceNorm { x, inv_std } => norm_ops::instance_norm_backward(sink, *x, out, inv_std, g),
        Op::ChannelAffine { x, scale, shift } => norm_ops::channel_affine_backward(sink, *x, *scale, *shift, g),
        op => elementwise::backward(sink, op, out, g),
    }
    Ok(())
}
