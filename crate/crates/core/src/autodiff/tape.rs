use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::error::TensorError;
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Identity of a registered leaf on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafId(pub usize);

/// Recorded operation. Payloads are the input node ids plus whatever the
/// backward rule needs beyond the stored node values.
#[derive(Debug, Clone)]
pub(super) enum Op<F: Scalar> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    AddScalar(usize, F),
    /// [m,k] x [k,n] -> [m,n]
    MatMul(usize, usize),
    /// [m,k] x [k] -> [m]
    MatVec(usize, usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
}

pub(super) struct Node<F: Scalar> {
    pub op: Op<F>,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<F>>,
}

pub(super) struct TapeInner<F: Scalar> {
    pub nodes: Vec<Node<F>>,
    pub leaves: Vec<usize>,
}

/// Reverse-mode tape. Cheap to clone (shared handle); single-threaded use
/// per computation, distinct tapes may live on distinct threads.
pub struct Tape<F: Scalar> {
    pub(super) inner: Arc<Mutex<TapeInner<F>>>,
}

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, keyed by leaf id.
pub struct GradMap<F: Scalar> {
    grads: BTreeMap<LeafId, Tensor<F>>,
}

impl<F: Scalar> GradMap<F> {
    pub fn get(&self, leaf: LeafId) -> Option<&Tensor<F>> {
        self.grads.get(&leaf)
    }

    /// Gradient for a leaf tensor returned by [`Tape::leaf`].
    pub fn wrt(&self, leaf: &Tensor<F>) -> Option<&Tensor<F>> {
        leaf.node_id().and_then(|id| self.grads.get(&LeafId(id)))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LeafId, &Tensor<F>)> {
        self.grads.iter()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(Mutex::new(TapeInner {
                nodes: Vec::new(),
                leaves: Vec::new(),
            })),
        }
    }

    fn same_tape(&self, other: &Tape<F>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `t` as a differentiable leaf and returns the taped view.
    pub fn leaf(&self, t: &Tensor<F>) -> Tensor<F> {
        let mut inner = self.inner.lock().unwrap();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            value: Arc::clone(&t.data),
        });
        inner.leaves.push(id);
        Tensor::from_parts(
            t.shape.clone(),
            Arc::clone(&t.data),
            Some((self.clone(), id)),
            true,
        )
    }

    pub(super) fn record(
        &self,
        op: Op<F>,
        shape: Vec<usize>,
        value: Vec<F>,
        requires_grad: bool,
    ) -> Tensor<F> {
        let value = Arc::new(value);
        let mut inner = self.inner.lock().unwrap();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&value),
        });
        Tensor::from_parts(shape, value, Some((self.clone(), id)), requires_grad)
    }

    /// Promotes a possibly-untaped tensor to a node id on this tape.
    pub(super) fn node_of(&self, t: &Tensor<F>) -> Result<usize, TensorError> {
        match &t.node {
            Some((tape, id)) => {
                if self.same_tape(tape) {
                    Ok(*id)
                } else {
                    Err(TensorError::MixedTapes)
                }
            }
            None => {
                let mut inner = self.inner.lock().unwrap();
                let id = inner.nodes.len();
                inner.nodes.push(Node {
                    op: Op::Constant,
                    shape: t.shape.clone(),
                    value: Arc::clone(&t.data),
                });
                Ok(id)
            }
        }
    }

    /// Reverse pass from a scalar root. Returns ∂root/∂leaf for every
    /// registered leaf; leaves unreachable from the root map to zeros.
    /// A root with no tape attachment yields an empty map.
    pub fn backward(&self, root: &Tensor<F>) -> Result<GradMap<F>, TensorError> {
        if !root.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: root.shape.clone(),
            });
        }
        let root_id = match root.node_id() {
            Some(id) => id,
            None => {
                return Ok(GradMap {
                    grads: BTreeMap::new(),
                })
            }
        };
        if let Some((tape, _)) = &root.node {
            if !self.same_tape(tape) {
                return Err(TensorError::MixedTapes);
            }
        }

        let inner = self.inner.lock().unwrap();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[root_id] = Some(vec![F::one()]);

        // Insertion order is a topological order, so one reverse sweep
        // visits each node exactly once.
        for id in (0..=root_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                // Sinks; stash the gradient back for collection below.
                grads[id] = Some(g);
                continue;
            }
            let mut add = |target: usize, contrib: Vec<F>| {
                if let Some(acc) = grads[target].as_mut() {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                } else {
                    grads[target] = Some(contrib);
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    add(*a, g.clone());
                    add(*b, g);
                }
                Op::Sub(a, b) => {
                    add(*a, g.clone());
                    add(*b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    add(*a, g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi * bi).collect());
                    add(*b, g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).collect());
                }
                Op::Div(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    add(*a, g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi / bi).collect());
                    add(
                        *b,
                        g.iter()
                            .zip(av.iter().zip(bv.iter()))
                            .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                            .collect(),
                    );
                }
                Op::Scale(a, c) => {
                    add(*a, g.iter().map(|&v| v * *c).collect());
                }
                Op::AddScalar(a, _) => {
                    add(*a, g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    // gA = g . B^T
                    let mut ga = vec![F::zero(); m * k];
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = F::zero();
                            for c in 0..n {
                                s += g[i * n + c] * bv[j * n + c];
                            }
                            ga[i * k + j] = s;
                        }
                    }
                    // gB = A^T . g
                    let mut gb = vec![F::zero(); k * n];
                    for i in 0..k {
                        for j in 0..n {
                            let mut s = F::zero();
                            for r in 0..m {
                                s += av[r * k + i] * g[r * n + j];
                            }
                            gb[i * n + j] = s;
                        }
                    }
                    add(*a, ga);
                    add(*b, gb);
                }
                Op::MatVec(a, x) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let av = &nodes[*a].value;
                    let xv = &nodes[*x].value;
                    // gA = outer(g, x)
                    let mut ga = vec![F::zero(); m * k];
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] = g[i] * xv[j];
                        }
                    }
                    // gx = A^T . g
                    let mut gx = vec![F::zero(); k];
                    for j in 0..k {
                        let mut s = F::zero();
                        for i in 0..m {
                            s += av[i * k + j] * g[i];
                        }
                        gx[j] = s;
                    }
                    add(*a, ga);
                    add(*x, gx);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    add(*a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    let scale = g[0] / F::from_usize(n).unwrap();
                    add(*a, vec![scale; n]);
                }
                Op::Square(a) => {
                    let av = &nodes[*a].value;
                    let two = F::c(2.0);
                    add(
                        *a,
                        g.iter()
                            .zip(av.iter())
                            .map(|(&gi, &ai)| two * ai * gi)
                            .collect(),
                    );
                }
                Op::Sqrt(a) => {
                    let out = &node.value;
                    let half = F::c(0.5);
                    add(
                        *a,
                        g.iter()
                            .zip(out.iter())
                            .map(|(&gi, &oi)| half * gi / oi)
                            .collect(),
                    );
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    add(
                        *a,
                        g.iter().zip(out.iter()).map(|(&gi, &oi)| gi * oi).collect(),
                    );
                }
                Op::Ln(a) => {
                    let av = &nodes[*a].value;
                    add(*a, g.iter().zip(av.iter()).map(|(&gi, &ai)| gi / ai).collect());
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    add(
                        *a,
                        g.iter()
                            .zip(out.iter())
                            .map(|(&gi, &oi)| gi * (F::one() - oi * oi))
                            .collect(),
                    );
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        add(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Slice(a, start, end) => {
                    let n = nodes[*a].value.len();
                    let mut ga = vec![F::zero(); n];
                    ga[*start..*end].copy_from_slice(&g);
                    add(*a, ga);
                }
            }
        }

        let mut out = BTreeMap::new();
        for &leaf in &inner.leaves {
            let shape = nodes[leaf].shape.clone();
            let data = grads[leaf]
                .take()
                .unwrap_or_else(|| vec![F::zero(); nodes[leaf].value.len()]);
            out.insert(
                LeafId(leaf),
                Tensor::new(shape, data).expect("gradient shape matches leaf"),
            );
        }
        Ok(GradMap { grads: out })
    }
}
