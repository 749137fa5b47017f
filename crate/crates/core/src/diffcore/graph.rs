use std::collections::HashMap;

use super::ops::{compute, vjp, Op};
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in topological order. A node is evaluated as soon as
/// all of its inputs hold values; graphs built on unbound [`Graph::input`]
/// leaves stay unevaluated until [`Graph::forward`] binds them. `forward` can
/// also rebind leaves of an evaluated graph and recompute every node, which is
/// how finite-difference checks reuse one graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

/// Adjoints of the gradient-requiring leaves after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    /// Trainable leaves, in creation order.
    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a node; `None` until its leaves are bound.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    /// Value of a node that is known to be evaluated.
    pub fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("node evaluated before its leaves were bound")
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Option<Tensor>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            needs_grad: requires_grad,
        });
        self.values.push(value);
        id
    }

    /// Constant or differentiable leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_leaf(value.shape().to_vec(), Some(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Trainable leaf; reported by [`Graph::parameters`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.leaf(value, true);
        self.params.push(id);
        id
    }

    /// Unbound leaf of the given shape, filled in by [`Graph::forward`].
    pub fn input(&mut self, shape: &[usize], requires_grad: bool) -> NodeId {
        self.push_leaf(shape.to_vec(), None, requires_grad)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, DiffError> {
        let id = self.nodes.len();
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let value = if inputs.iter().all(|i| self.values[i.0].is_some()) {
            let xs: Vec<&Tensor> = inputs.iter().map(|i| self.values[i.0].as_ref().unwrap()).collect();
            Some(eval(id, &op, &xs)?)
        } else {
            None
        };
        let shape = match &value {
            Some(v) => v.shape().to_vec(),
            None => {
                // shape inference on zero-filled stand-ins
                let stand_ins: Vec<Tensor> = inputs
                    .iter()
                    .map(|i| Tensor::zeros(&self.nodes[i.0].shape))
                    .collect();
                let xs: Vec<&Tensor> = stand_ins.iter().collect();
                compute(&op, &xs)
                    .map_err(|detail| DiffError::Shape {
                        node: id,
                        op: op.name(),
                        detail,
                    })?
                    .shape()
                    .to_vec()
            }
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            needs_grad,
        });
        self.values.push(value);
        Ok(NodeId(id))
    }

    /// Binds unbound (or rebinds any) leaves and recomputes every non-leaf node.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor)]) -> Result<(), DiffError> {
        for (id, t) in bindings {
            let node = &self.nodes[id.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(DiffError::Shape {
                    node: id.0,
                    op: node.op.name(),
                    detail: "only leaves can be bound".into(),
                });
            }
            if node.shape != t.shape() {
                return Err(DiffError::Shape {
                    node: id.0,
                    op: "leaf",
                    detail: format!("bound {:?} to a {:?} leaf", t.shape(), node.shape),
                });
            }
            self.values[id.0] = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if self.values[i].is_none() {
                    return Err(DiffError::Unbound(i));
                }
                continue;
            }
            let xs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|j| self.values[j.0].as_ref().unwrap())
                .collect();
            let v = eval(i, &node.op, &xs)?;
            self.values[i] = Some(v);
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`; returns adjoints of every leaf
    /// created with `requires_grad`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = self.values[loss.0].as_ref().ok_or(DiffError::NotForwarded)?;
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar(loss.0));
        }
        if self.values[..=loss.0].iter().any(Option::is_none) {
            return Err(DiffError::NotForwarded);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.needs_grad {
                    out.grads
                        .insert(NodeId(i), Tensor::from_parts(node.shape.clone(), g));
                }
                continue;
            }
            let xs: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|j| self.values[j.0].as_ref().unwrap())
                .collect();
            let value = self.values[i].as_ref().unwrap();
            let nodes = &self.nodes;
            let inputs = &node.inputs;
            vjp(&node.op, &xs, value, &g, &mut |k, f| {
                let j = inputs[k].0;
                if !nodes[j].needs_grad {
                    return;
                }
                let slot = grads[j].get_or_insert_with(|| vec![0.0; xs[k].len()]);
                f(slot);
            });
        }
        Ok(out)
    }

    // ---- primitives ---------------------------------------------------

    /// `a @ b`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMul { trans_b: false }, vec![a, b])
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMul { trans_b: true }, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Transpose, vec![a])
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sub, vec![a, b])
    }

    /// Elementwise product with row/column broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Scale(s), vec![a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.push(Op::AddScalar(s), vec![a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Neg, vec![a])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.push(Op::Concat, parts.to_vec())
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.push(Op::Slice { start, len }, vec![a])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.push(Op::Stack, parts.to_vec())
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId, DiffError> {
        self.push(Op::Select { index }, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Log, vec![a])
    }

    /// Row softmax of `a / temp`.
    pub fn softmax(&mut self, a: NodeId, temp: f64) -> Result<NodeId, DiffError> {
        self.check_temp(temp)?;
        self.push(Op::Softmax { temp }, vec![a])
    }

    /// Row log-softmax of `a / temp`.
    pub fn log_softmax(&mut self, a: NodeId, temp: f64) -> Result<NodeId, DiffError> {
        self.check_temp(temp)?;
        self.push(Op::LogSoftmax { temp }, vec![a])
    }

    /// Row softmax restricted to positions where `mask` is true; masked
    /// entries are exactly zero. Every row needs one unmasked position.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId, DiffError> {
        self.push(Op::MaskedSoftmax { mask }, vec![a])
    }

    fn check_temp(&self, temp: f64) -> Result<(), DiffError> {
        if temp > 0.0 && temp.is_finite() {
            Ok(())
        } else {
            Err(DiffError::Shape {
                node: self.nodes.len(),
                op: "softmax",
                detail: format!("temperature must be positive, got {temp}"),
            })
        }
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mean, vec![a])
    }

    /// Row sums, `[rows, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::SumCols, vec![a])
    }

    /// Row-wise cosine similarity, `[rows, 1]`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Cosine, vec![a, b])
    }

    /// Scales each row to unit (ε-guarded) norm.
    pub fn normalize(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Normalize, vec![a])
    }

    /// Weighted cross-entropy from log-probabilities:
    /// `-Σ_r weights[r] * logp[r, targets[r]]`.
    pub fn nll(&mut self, logp: NodeId, targets: Vec<usize>, weights: Vec<f64>) -> Result<NodeId, DiffError> {
        self.push(Op::Nll { targets, weights }, vec![logp])
    }

    /// Row lookup into a `[rows, width]` table.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId, DiffError> {
        self.push(Op::Gather { ids }, vec![table])
    }

    /// Fused LSTM cell nonlinearity. `gates` is `[B, 4H]` laid out as
    /// input, forget, candidate, output; returns `[B, 2H]` = `[h | c]`.
    pub fn lstm_cell(&mut self, gates: NodeId, cell: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::LstmCell, vec![gates, cell])
    }

    /// Additive attention scores `s[b, t] = Σ_a v_a tanh(query[b, a] + keys[t, b, a])`.
    pub fn attn_scores(&mut self, query: NodeId, keys: NodeId, v: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::AttnScores, vec![query, keys, v])
    }

    /// `ctx[b, :] = Σ_t weights[b, t] * values[t, b, :]`.
    pub fn attn_context(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::AttnContext, vec![weights, values])
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }
}

fn eval(id: usize, op: &Op, xs: &[&Tensor]) -> Result<Tensor, DiffError> {
    let v = compute(op, xs).map_err(|detail| DiffError::Shape {
        node: id,
        op: op.name(),
        detail,
    })?;
    if !v.is_finite() {
        return Err(DiffError::NonFinite {
            node: id,
            op: op.name(),
        });
    }
    Ok(v)
}
