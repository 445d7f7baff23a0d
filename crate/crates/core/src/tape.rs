//! Scalar reverse-mode differentiation on an append-only tape.
//!
//! Every recorded node stores its value and the local partial derivatives
//! with respect to at most two parents. Parents always have smaller ids than
//! their children, so insertion order is a topological order and the
//! backward sweep is a single reverse pass over the node vector.
//!
//! ```
//! use bnflow::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(2.0);
//! let b = tape.leaf(5.0);
//! let ab = tape.mul(a, b);
//! let f = tape.add(ab, a);
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(a), 6.0);
//! assert_eq!(grads.wrt(b), 2.0);
//! ```

use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape. Anything else is composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Neg,
    Div,
    Exp,
    Log,
    Tanh,
    Softplus,
    Abs,
    Square,
}

impl OpKind {
    fn arity(self) -> usize {
        match self {
            OpKind::Leaf => 0,
            OpKind::Add | OpKind::Mul | OpKind::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    value: f64,
    parents: [(usize, f64); 2],
}

/// Append-only computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// d(output)/d(node).
    pub fn wrt(&self, id: NodeId) -> f64 {
        self.adjoints[id.0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adjoints
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with the subgradient convention `sign(0) = 0`.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
    }

    /// Drops every node, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].kind
    }

    /// Ids of the parents of `id`, in argument order.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        let node = &self.nodes[id.0];
        node.parents[..node.kind.arity()]
            .iter()
            .map(|&(p, _)| NodeId(p))
            .collect()
    }

    /// Records a node with an explicit value and local derivatives.
    ///
    /// This is the checked entry point; the convenience methods below compute
    /// value and derivatives themselves and assume ids come from this tape.
    pub fn record(
        &mut self,
        kind: OpKind,
        inputs: &[NodeId],
        value: f64,
        local: &[f64],
    ) -> Result<NodeId> {
        if inputs.len() != kind.arity() || local.len() != kind.arity() {
            return Err(Error::Structural(format!(
                "{:?} takes {} inputs, got {} inputs and {} derivatives",
                kind,
                kind.arity(),
                inputs.len(),
                local.len()
            )));
        }
        let mut parents = [(0usize, 0.0f64); 2];
        for (slot, (&id, &d)) in parents.iter_mut().zip(inputs.iter().zip(local)) {
            if id.0 >= self.nodes.len() {
                return Err(Error::Structural(format!(
                    "input node {} does not exist (tape has {} nodes)",
                    id.0,
                    self.nodes.len()
                )));
            }
            *slot = (id.0, d);
        }
        Ok(self.push(kind, value, parents))
    }

    fn push(&mut self, kind: OpKind, value: f64, parents: [(usize, f64); 2]) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind,
            value,
            parents,
        });
        NodeId(id)
    }

    fn unary(&mut self, kind: OpKind, a: NodeId, value: f64, da: f64) -> NodeId {
        self.push(kind, value, [(a.0, da), (0, 0.0)])
    }

    fn binary(&mut self, kind: OpKind, a: NodeId, b: NodeId, value: f64, da: f64, db: f64) -> NodeId {
        self.push(kind, value, [(a.0, da), (b.0, db)])
    }

    /// An input variable (or a constant, if its adjoint is ignored).
    pub fn leaf(&mut self, value: f64) -> NodeId {
        self.push(OpKind::Leaf, value, [(0, 0.0); 2])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.binary(OpKind::Add, a, b, v, 1.0, 1.0)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        self.binary(OpKind::Mul, a, b, va * vb, vb, va)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.unary(OpKind::Neg, a, v, -1.0)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let q = va / vb;
        self.binary(OpKind::Div, a, b, q, 1.0 / vb, -q / vb)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        self.unary(OpKind::Exp, a, v, v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        self.unary(OpKind::Log, a, va.ln(), 1.0 / va)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.unary(OpKind::Tanh, a, v, 1.0 - v * v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        self.unary(OpKind::Softplus, a, softplus(va), sigmoid(va))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        self.unary(OpKind::Abs, a, va.abs(), sign0(va))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        self.unary(OpKind::Square, a, va * va, 2.0 * va)
    }

    // Composed helpers.

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.leaf(c);
        self.add(a, k)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.leaf(c);
        self.mul(a, k)
    }

    /// `ln(Σ exp(x_i))` built from primitives, shifted by the running max.
    pub fn log_sum_exp(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "log_sum_exp of an empty set");
        let m = xs
            .iter()
            .map(|&x| self.value(x))
            .fold(f64::NEG_INFINITY, f64::max);
        let m = if m.is_finite() { m } else { 0.0 };
        let mut acc: Option<NodeId> = None;
        for &x in xs {
            let shifted = self.add_const(x, -m);
            let e = self.exp(shifted);
            acc = Some(match acc {
                None => e,
                Some(s) => self.add(s, e),
            });
        }
        let l = self.log(acc.unwrap());
        self.add_const(l, m)
    }

    /// Reverse sweep from `output`. Returns adjoints for every node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Structural(format!(
                "output node {} does not exist",
                output.0
            )));
        }
        let mut adj = vec![0.0f64; self.nodes.len()];
        adj[output.0] = 1.0;
        for i in (0..=output.0).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            if a.is_nan() {
                return Err(Error::numeric(format!("NaN adjoint at node {}", i)));
            }
            let node = &self.nodes[i];
            for &(p, d) in &node.parents[..node.kind.arity()] {
                let contrib = a * d;
                if contrib.is_nan() {
                    return Err(Error::numeric(format!(
                        "NaN while accumulating from node {} ({:?}) into node {}",
                        i, node.kind, p
                    )));
                }
                adj[p] += contrib;
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Relative error with a small absolute floor so that two zeros compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / scale
}

/// Value and gradient of a taped scalar function at `point`.
pub fn value_and_gradient<F>(f: &F, point: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::with_capacity(64);
    let inputs: Vec<NodeId> = point.iter().map(|&v| tape.leaf(v)).collect();
    let out = f(&mut tape, &inputs)?;
    let value = tape.value(out);
    if !value.is_finite() {
        return Err(Error::numeric(format!("function value is {}", value)));
    }
    let grads = tape.backward(out)?;
    Ok((value, inputs.iter().map(|&i| grads.wrt(i)).collect()))
}

/// Compares tape gradients to central differences `(f(x+h) - f(x-h)) / 2h`
/// component-wise and returns the worst [`relative_error`].
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Structural(format!("step must be positive, got {}", step)));
    }
    let (_, analytic) = value_and_gradient(&f, point)?;
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (fp, _) = value_and_gradient(&f, &probe)?;
        probe[i] = point[i] - step;
        let (fm, _) = value_and_gradient(&f, &probe)?;
        probe[i] = point[i];
        let numeric = (fp - fm) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
