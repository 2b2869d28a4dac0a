//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Upsample2x {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean {
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Softmax {
        x: Var,
        map: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Offset {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Broadcast {
        x: Var,
    },
    /// Each index starts a run of `block` contiguous source elements.
    Take {
        x: Var,
        index: Vec<usize>,
        block: usize,
        kind: &'static str,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "bilinear_upsample_x2",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Offset { .. } => "offset",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Broadcast { .. } => "broadcast",
            Op::Take { kind, .. } => kind,
            Op::ChannelNorm { .. } => "channel_norm",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                x, weight, bias, ..
            } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::Upsample2x { x }
            | Op::MaxPool2d { x, .. }
            | Op::Mean { x, .. }
            | Op::Sum { x }
            | Op::Softmax { x, .. }
            | Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Reshape { x }
            | Op::Broadcast { x }
            | Op::Take { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::ChannelNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) is_param: bool,
    pub(crate) scope: String,
}

/// Read-only view of one recorded node, used by cost accounting.
#[derive(Debug, Clone)]
pub struct NodeInfo<'a> {
    pub var: Var,
    pub kind: &'static str,
    pub scope: &'a str,
    pub inputs: Vec<Var>,
    pub shape: &'a [usize],
    pub is_param: bool,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// A tape is single-threaded and append-only. Gradients are populated by
/// [`Tape::backward`] and must be cleared with [`Tape::zero_grad`] before
/// another backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    scope: Vec<String>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, false)
    }

    /// Records an input that receives a gradient but is not a learnable parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, false)
    }

    /// Records a learnable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, is_param: bool) -> Var {
        let scope = self.scope.join(".");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            is_param,
            scope,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward loss with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Runs `f` with `name` appended to the current scope path.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn current_scope(&self) -> String {
        self.scope.join(".")
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| NodeInfo {
            var: Var(i),
            kind: n.op.kind(),
            scope: &n.scope,
            inputs: n.op.inputs(),
            shape: n.value.shape(),
            is_param: n.is_param,
        })
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = node_op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
            is_param: false,
            scope: self.scope.join("."),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulates `dloss/dv` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                for (input, gi) in self.input_grads(i, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&gi),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        use crate::ops;
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (gx, gw, gb) = ops::conv::conv2d_backward(
                    val(x),
                    val(weight),
                    g,
                    *stride,
                    *padding,
                    (wants(x), wants(weight)),
                );
                let mut out = Vec::with_capacity(3);
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*weight, gw));
                }
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Upsample2x { x } => {
                vec![(*x, ops::resample::upsample2x_backward(val(x).shape(), g))]
            }
            Op::MaxPool2d { x, argmax } => {
                vec![(
                    *x,
                    ops::resample::maxpool_backward(val(x).shape(), argmax, g),
                )]
            }
            Op::Mean { x, map, count } => {
                let scale = 1.0 / *count as f64;
                let data = map.iter().map(|&o| g.data()[o] * scale).collect();
                vec![(*x, Tensor::from_parts(val(x).shape().to_vec(), data))]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(x).shape(), g.data()[0]))],
            Op::Softmax { x, map } => {
                vec![(*x, ops::reduce::softmax_backward(&node.value, map, g))]
            }
            Op::Add { a, b } => vec![
                (*a, ops::elementwise::reduce_to(g, val(a).shape())),
                (*b, ops::elementwise::reduce_to(g, val(b).shape())),
            ],
            Op::Sub { a, b } => vec![
                (*a, ops::elementwise::reduce_to(g, val(a).shape())),
                (
                    *b,
                    ops::elementwise::reduce_to(&g.map(|v| -v), val(b).shape()),
                ),
            ],
            Op::Mul { a, b } => {
                let (ga, gb) = ops::elementwise::mul_backward(val(a), val(b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * factor))],
            Op::Offset { x } => vec![(*x, g.clone())],
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(s, gv)| gv * s * (1.0 - s))
                    .collect();
                vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
            }
            Op::Relu { x } => {
                let data = val(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_parts(g.shape().to_vec(), data))]
            }
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| val(v).shape()).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(ops::shape::concat_backward(&shapes, *axis, g))
                    .collect()
            }
            Op::Reshape { x } => vec![(
                *x,
                Tensor::from_parts(val(x).shape().to_vec(), g.data().to_vec()),
            )],
            Op::Broadcast { x } => vec![(*x, ops::elementwise::reduce_to(g, val(x).shape()))],
            Op::Take {
                x, index, block, ..
            } => {
                let mut gx = Tensor::zeros(val(x).shape());
                let d = gx.data_mut();
                for (&src, gv) in index.iter().zip(g.data().chunks_exact(*block)) {
                    for (o, v) in d[src..src + block].iter_mut().zip(gv) {
                        *o += v;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (gx, gg, gb) = ops::norm::channel_norm_backward(xhat, inv_std, val(gamma), g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[4, 2], |i| (i as f64).sin());
        let x = tape.input(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().max_abs_diff(&xt) < 1e-15);
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[3]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss), Err(Error::BackwardTwice));
        tape.zero_grad();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::ones(&[3]));
        let loss = tape.sum(c).unwrap();
        assert_eq!(tape.backward(loss), Err(Error::Detached));
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[2], 3.0));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        // d/dx (2x * x) = 4x
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0, 12.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1], f64::MAX));
        assert_eq!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn scopes_label_nodes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1]));
        tape.scoped("a", |t| t.scoped("b", |t| t.relu(x))).unwrap();
        let last = tape.nodes().last().unwrap();
        assert_eq!(last.scope, "a.b");
        assert_eq!(last.kind, "relu");
        assert_eq!(tape.current_scope(), "");
    }
}
