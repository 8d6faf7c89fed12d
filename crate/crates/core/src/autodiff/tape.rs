//! Wengert-list reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so parents always precede their
//! children and a single reverse sweep visits every node once.

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Input or parameter; no parents.
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    /// Multiplication by a fixed constant.
    Scale(f64),
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    /// Leaky ReLU whose negative slope is the second (scalar) input.
    Prelu,
    Exp,
    Log,
    /// Row-wise softmax over the trailing axis.
    Softmax,
    LogSoftmax,
    /// `sum |x|` over all entries.
    L1Norm,
    /// `sum x^2` over all entries.
    SquaredL2,
    Sum,
    Mean,
}

impl Op {
    fn arity(self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Prelu => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Prelu => "prelu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::L1Norm => "l1_norm",
            Op::SquaredL2 => "squared_l2",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: [usize; 2],
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    /// Number of nodes the sweep stepped through.
    pub visited: usize,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, [0, 0], value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, [0, 0], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, parents: [usize; 2], value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and appends the result to the tape.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() || op == Op::Leaf {
            return Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|v| &self.nodes[v.0].value);
        let value = match op {
            Op::Leaf => unreachable!(),
            Op::MatMul => ops::matmul(a, b.unwrap())?,
            Op::Add => ops::add(a, b.unwrap())?,
            Op::Sub => ops::sub(a, b.unwrap())?,
            Op::Mul => ops::mul(a, b.unwrap())?,
            Op::Prelu => ops::prelu(a, b.unwrap())?,
            Op::Scale(c) => a.map(|v| c * v),
            Op::Sigmoid => ops::sigmoid(a),
            Op::Relu => ops::relu(a),
            Op::LeakyRelu(slope) => ops::leaky_relu(a, slope),
            Op::Exp => a.map(f64::exp),
            Op::Log => a.map(f64::ln),
            Op::Softmax => ops::softmax(a),
            Op::LogSoftmax => ops::log_softmax(a),
            Op::L1Norm => Tensor::scalar(a.data().iter().map(|v| v.abs()).sum()),
            Op::SquaredL2 => Tensor::scalar(a.data().iter().map(|v| v * v).sum()),
            Op::Sum => Tensor::scalar(a.data().iter().sum()),
            Op::Mean => {
                if a.is_empty() {
                    return Err(Error::invalid("mean of empty tensor"));
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
        }
        .check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = [inputs[0].0, inputs.get(1).map_or(0, |v| v.0)];
        Ok(self.push(op, parents, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.record(Op::LeakyRelu(slope), &[a])
    }
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        self.record(Op::Prelu, &[a, slope])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax, &[a])
    }
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::L1Norm, &[a])
    }
    pub fn squared_l2(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SquaredL2, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean, &[a])
    }

    /// `x W + 1 b` for `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let ones = self.constant(Tensor::ones(&[rows, 1]));
        let xw = self.matmul(x, w)?;
        let tiled = self.matmul(ones, b)?;
        self.add(xw, tiled)
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: value.shape().to_vec(),
                right: Vec::new(),
            });
        }
        self.backward_with_seed(loss, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// through the tape.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: out_shape.to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(seed);
        let mut visited = 0;
        for idx in (0..n).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &g)?;
            for (slot, contribution) in contributions.into_iter().enumerate() {
                let Some(contribution) = contribution else {
                    continue;
                };
                let p = node.parents[slot];
                if !self.nodes[p].requires_grad {
                    continue;
                }
                accumulate(&mut grads[p], contribution)?;
            }
            // Keep the gradient around so callers can inspect interior nodes.
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<[Option<Tensor>; 2]> {
        let a = &self.nodes[node.parents[0]].value;
        let b = &self.nodes[node.parents[1]].value;
        let y = &node.value;
        let out = match node.op {
            Op::Leaf => [None, None],
            Op::MatMul => [
                Some(ops::matmul(g, &ops::transpose(b))?),
                Some(ops::matmul(&ops::transpose(a), g)?),
            ],
            Op::Add => [Some(reduce_to(g, a)), Some(reduce_to(g, b))],
            Op::Sub => [Some(reduce_to(g, a)), Some(reduce_to(&g.map(|v| -v), b))],
            Op::Mul => [
                Some(reduce_to(&ops::mul(g, b)?, a)),
                Some(reduce_to(&ops::mul(g, a)?, b)),
            ],
            Op::Scale(c) => [Some(g.map(|v| c * v)), None],
            Op::Sigmoid => [Some(ops::zip_with("sigmoid", g, y, |g, s| g * s * (1.0 - s))?), None],
            Op::Relu => [
                Some(ops::zip_with("relu", g, a, |g, x| if x > 0.0 { g } else { 0.0 })?),
                None,
            ],
            Op::LeakyRelu(slope) => [
                Some(ops::zip_with("leaky_relu", g, a, |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                })?),
                None,
            ],
            Op::Prelu => {
                let slope = b.item();
                let gx = ops::zip_with("prelu", g, a, |g, x| if x > 0.0 { g } else { slope * g })?;
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &x)| if x > 0.0 { 0.0 } else { g * x })
                    .sum();
                [Some(gx), Some(Tensor::scalar(gs))]
            }
            Op::Exp => [Some(ops::mul(g, y)?), None],
            Op::Log => [Some(ops::zip_with("log", g, a, |g, x| g / x)?), None],
            Op::Softmax => {
                let c = y.cols().max(1);
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    out.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                [Some(Tensor::new(y.shape().to_vec(), out)?), None]
            }
            Op::LogSoftmax => {
                let c = y.cols().max(1);
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    out.extend(gr.iter().zip(yr).map(|(g, ly)| g - ly.exp() * total));
                }
                [Some(Tensor::new(y.shape().to_vec(), out)?), None]
            }
            Op::L1Norm => {
                let s = g.item();
                [Some(a.map(|x| s * sign(x))), None]
            }
            Op::SquaredL2 => {
                let s = g.item();
                [Some(a.map(|x| 2.0 * s * x)), None]
            }
            Op::Sum => [Some(Tensor::full(a.shape(), g.item())), None],
            Op::Mean => [Some(Tensor::full(a.shape(), g.item() / a.len() as f64)), None],
        };
        Ok(out)
    }
}

/// Subgradient of `|x|`, taking 0 at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Undoes scalar broadcasting: a scalar operand receives the summed gradient.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if target.is_scalar() && !g.is_scalar() {
        Tensor::scalar(g.data().iter().sum())
    } else {
        g.clone()
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        Some(existing) => *existing = ops::add(existing, &contribution)?,
        None => *slot = Some(contribution),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_is_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 3], vec![6., 5., 4., 3., 2., 1.]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[7.0; 6]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 0.25);
    }

    #[test]
    fn matmul_matches_hand_products() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 4., -1.]).unwrap());
        let b = tape.constant(Tensor::new(vec![3, 1], vec![2., 1., -3.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        // 1*2 + -2*1 + 3*-3 = -9 ; 0.5*2 + 4*1 + -1*-3 = 8
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[-9.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.7));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.exp(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
        assert!((grads.get(x).item() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let w = tape.param(Tensor::scalar(0.7));
        let h = tape.mul(x, w).unwrap();
        let h = tape.sigmoid(h).unwrap();
        let h2 = tape.mul(h, h).unwrap();
        let loss = tape.sum(h2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.visited, tape.len());
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., -1., 0., 1.]).unwrap());
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_arity_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        assert!(tape.record(Op::Add, &[x]).is_err());
        assert!(tape.record(Op::Leaf, &[]).is_err());
    }
}
