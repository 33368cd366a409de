//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A `Graph` records every operation of one forward pass as a node holding
//! the output value, the parent ids and a backward closure. Creation order is
//! topological by construction (an op can only reference existing nodes), so
//! `backward` is a single reverse sweep that visits each node exactly once.
//!
//! Per-call gradients are propagated through a scratch buffer and added into
//! each node's persistent `grad` at the end, so calling `backward` twice (or
//! on two losses sharing a subgraph) accumulates additively instead of
//! double-counting stale intermediate gradients.
//!
//! Trainable parameters live outside the graph as [`Tensor`]s with
//! `requires_grad`; [`Graph::param`] interns them by buffer address so that a
//! parameter used twice in one step (e.g. an encoder applied to both a clean
//! and a masked image) maps to a single leaf and its gradients accumulate.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Values handed to a backward closure.
pub struct BackwardArgs<'a, T> {
    pub upstream: &'a [T],
    pub parents: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Which parents actually need a gradient; a closure may return an empty
    /// vec for the others.
    pub needs: &'a [bool],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Vec<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    interned: BTreeMap<usize, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Lane decomposition for reductions along `axis` of `shape`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), interned: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.idx()].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.idx()].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.idx()].parents
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn<T>>,
    ) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.idx()].requires_grad);
        debug_assert!(parents.iter().all(|p| p.idx() < self.nodes.len()));
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, parents, backward, requires_grad, grad: None });
        id
    }

    /// Records a non-trainable leaf (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Vec::new(), None)
    }

    /// Records a leaf that copies `t`, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        let mut value = t.clone();
        value.grad = None;
        let rg = t.requires_grad;
        let id = self.push(value, Vec::new(), None);
        self.nodes[id.idx()].requires_grad = rg;
        id
    }

    /// Interns a parameter leaf by buffer address: calling this twice with
    /// the same tensor returns the same node, so gradients accumulate on one
    /// leaf. Values are captured at first use; the tensor must stay in place
    /// and unmodified for the lifetime of the graph (one graph per step).
    pub fn param(&mut self, t: &Tensor<T>) -> NodeId {
        let key = t.data().as_ptr() as usize;
        if let Some(&id) = self.interned.get(&key) {
            return id;
        }
        let id = self.leaf(t);
        self.interned.insert(key, id);
        id
    }

    /// Adds the accumulated leaf gradient of the interned parameter into
    /// `t.grad`, if this graph saw it and backward produced one.
    pub fn accumulate_grad_into(&self, t: &mut Tensor<T>) {
        let key = t.data().as_ptr() as usize;
        if let Some(&id) = self.interned.get(&key) {
            if let Some(g) = self.nodes[id.idx()].grad.as_deref() {
                let g = g.to_vec();
                t.accumulate_grad(&g);
            }
        }
    }

    /// Leaf gradient of an interned parameter, if any.
    pub fn param_grad(&self, t: &Tensor<T>) -> Option<&[T]> {
        let key = t.data().as_ptr() as usize;
        self.interned.get(&key).and_then(|id| self.nodes[id.idx()].grad.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients of this call are
    /// accumulated additively into every reachable `requires_grad` node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        pending[loss.idx()] = Some(vec![T::ONE]);

        for idx in (0..=loss.idx()).rev() {
            let Some(upstream) = pending[idx].take() else { continue };
            let contribs: Option<Vec<(NodeId, Vec<T>)>> = {
                let node = &self.nodes[idx];
                node.backward.as_ref().map(|back| {
                    let parent_vals: Vec<&Tensor<T>> =
                        node.parents.iter().map(|p| &self.nodes[p.idx()].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|p| self.nodes[p.idx()].requires_grad).collect();
                    let args = BackwardArgs {
                        upstream: &upstream,
                        parents: &parent_vals,
                        output: &node.value,
                        needs: &needs,
                    };
                    let grads = back(&args);
                    debug_assert_eq!(grads.len(), node.parents.len());
                    node.parents
                        .iter()
                        .zip(grads)
                        .filter(|(p, g)| self.nodes[p.idx()].requires_grad && !g.is_empty())
                        .map(|(p, g)| (*p, g))
                        .collect()
                })
            };
            if let Some(contribs) = contribs {
                for (p, g) in contribs {
                    debug_assert_eq!(g.len(), self.nodes[p.idx()].value.numel());
                    let slot = pending[p.idx()]
                        .get_or_insert_with(|| vec![T::ZERO; self.nodes[p.idx()].value.numel()]);
                    for (a, b) in slot.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
            }
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                let grad = node.grad.get_or_insert_with(|| vec![T::ZERO; node.value.numel()]);
                for (a, b) in grad.iter_mut().zip(&upstream) {
                    *a += *b;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim {
                op,
                detail: format!(
                    "shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                vec![args.upstream.to_vec(), args.upstream.to_vec()]
            })),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x - *y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                vec![args.upstream.to_vec(), args.upstream.iter().map(|g| -*g).collect()]
            })),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                let da = args
                    .upstream
                    .iter()
                    .zip(args.parents[1].data())
                    .map(|(g, y)| *g * *y)
                    .collect();
                let db = args
                    .upstream
                    .iter()
                    .zip(args.parents[0].data())
                    .map(|(g, x)| *g * *x)
                    .collect();
                vec![da, db]
            })),
        ))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.value(a).data().iter().map(|x| *x + c).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| vec![args.upstream.to_vec()])),
        )
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.value(a).data().iter().map(|x| *x * c).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                vec![args.upstream.iter().map(|g| *g * c).collect()]
            })),
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -T::ONE)
    }

    /// Elementwise add of a constant tensor (attention masks).
    pub fn add_const(&mut self, a: NodeId, w: &Tensor<T>) -> Result<NodeId> {
        if self.value(a).shape() != w.shape() {
            return Err(Error::Dim {
                op: "add_const",
                detail: format!("shapes {:?} and {:?} differ", self.value(a).shape(), w.shape()),
            });
        }
        let data: Vec<T> =
            self.value(a).data().iter().zip(w.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| vec![args.upstream.to_vec()])),
        ))
    }

    /// Elementwise multiply by a constant tensor (loss weights, masks).
    pub fn mul_const(&mut self, a: NodeId, w: &Tensor<T>) -> Result<NodeId> {
        if self.value(a).shape() != w.shape() {
            return Err(Error::Dim {
                op: "mul_const",
                detail: format!("shapes {:?} and {:?} differ", self.value(a).shape(), w.shape()),
            });
        }
        let weights = w.data().to_vec();
        let data: Vec<T> =
            self.value(a).data().iter().zip(&weights).map(|(x, y)| *x * *y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                vec![args.upstream.iter().zip(&weights).map(|(g, w)| *g * *w).collect()]
            })),
        ))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> =
            self.value(a).data().iter().map(|x| T::ONE / (T::ONE + (-*x).exp())).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                vec![args
                    .upstream
                    .iter()
                    .zip(args.output.data())
                    .map(|(g, s)| *g * *s * (T::ONE - *s))
                    .collect()]
            })),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let inner = c * (x + k * x * x * x);
                half * x * (T::ONE + inner.tanh())
            })
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let three = T::from_f64(3.0);
                vec![args
                    .upstream
                    .iter()
                    .zip(args.parents[0].data())
                    .map(|(g, &x)| {
                        let inner = c * (x + k * x * x * x);
                        let t = inner.tanh();
                        let sech2 = T::ONE - t * t;
                        let dinner = c * (T::ONE + three * k * x * x);
                        *g * (half * (T::ONE + t) + half * x * sech2 * dinner)
                    })
                    .collect()]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.value(a).data().iter().map(|x| x.exp()).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                vec![args
                    .upstream
                    .iter()
                    .zip(args.output.data())
                    .map(|(g, e)| *g * *e)
                    .collect()]
            })),
        )
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.value(a).data().iter().map(|x| x.ln()).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                vec![args
                    .upstream
                    .iter()
                    .zip(args.parents[0].data())
                    .map(|(g, x)| *g / *x)
                    .collect()]
            })),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data: Vec<T> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| {
                vec![args
                    .upstream
                    .iter()
                    .zip(args.parents[0].data())
                    .map(|(g, x)| {
                        if *x > T::ZERO {
                            *g
                        } else if *x < T::ZERO {
                            -*g
                        } else {
                            T::ZERO
                        }
                    })
                    .collect()]
            })),
        )
    }

    /// Breaks the gradient flow: value copy with no parents.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// Inverted-dropout; `rate == 0` is the identity.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut Rng) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.uniform() < rate { T::ZERO } else { keep })
            .collect();
        let data: Vec<T> = self.value(a).data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                vec![args.upstream.iter().zip(&mask).map(|(g, m)| *g * *m).collect()]
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops
// ---------------------------------------------------------------------------

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim {
                op: "matmul",
                detail: format!("cannot multiply {sa:?} by {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut out = vec![Vec::new(), Vec::new()];
                if args.needs[0] {
                    let bt = transpose_raw(args.parents[1].data(), k, n);
                    out[0] = matmul_raw(args.upstream, &bt, m, n, k);
                }
                if args.needs[1] {
                    let at = transpose_raw(args.parents[0].data(), m, k);
                    out[1] = matmul_raw(&at, args.upstream, k, m, n);
                }
                out
            })),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Dim {
                op: "transpose",
                detail: format!("expected 2-d, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::from_vec(&[c, r], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                vec![transpose_raw(args.upstream, c, r)]
            })),
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(|args: &BackwardArgs<'_, T>| vec![args.upstream.to_vec()])),
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::Dim {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {s:?}", start + len),
            });
        }
        let cols = s[1];
        let total_rows = s[0];
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::from_vec(&[len, cols], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::ZERO; total_rows * cols];
                g[start * cols..(start + len) * cols].copy_from_slice(args.upstream);
                vec![g]
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Dim {
                op: "slice_cols",
                detail: format!("cols {start}..{} out of {s:?}", start + len),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(&[rows, len], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&args.upstream[r * len..(r + 1) * len]);
                }
                vec![g]
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows over empty list".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows_each = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::Dim {
                    op: "concat_rows",
                    detail: format!("expected {cols} cols, got {:?}", v.shape()),
                });
            }
            rows_each.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = rows_each.iter().sum();
        let value = Tensor::from_vec(&[total, cols], data)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut out = Vec::with_capacity(rows_each.len());
                let mut off = 0;
                for &r in &rows_each {
                    out.push(args.upstream[off..off + r * cols].to_vec());
                    off += r * cols;
                }
                out
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols over empty list".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols_each = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::Dim {
                    op: "concat_cols",
                    detail: format!("expected {rows} rows, got {:?}", v.shape()),
                });
            }
            cols_each.push(v.cols());
        }
        let total: usize = cols_each.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_vec(&[rows, total], data)?;
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut out: Vec<Vec<T>> =
                    cols_each.iter().map(|&c| Vec::with_capacity(rows * c)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (i, &c) in cols_each.iter().enumerate() {
                        out[i].extend_from_slice(&args.upstream[off..off + c]);
                        off += c;
                    }
                }
                out
            })),
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`. Gradients
    /// scatter-add, so a repeated id accumulates once per occurrence.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Dim {
                op: "gather_rows",
                detail: format!("table must be 2-d, got {:?}", t.shape()),
            });
        }
        let (vocab, dim) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Vocab { token_id: bad, vocab_size: vocab });
        }
        let ids: Vec<u32> = ids.to_vec();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in &ids {
            data.extend_from_slice(t.row(i as usize));
        }
        let value = Tensor::from_vec(&[ids.len(), dim], data)?;
        Ok(self.push(
            value,
            vec![table],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::ZERO; vocab * dim];
                for (pos, &i) in ids.iter().enumerate() {
                    let src = &args.upstream[pos * dim..(pos + 1) * dim];
                    let dst = &mut g[i as usize * dim..(i as usize + 1) * dim];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += *b;
                    }
                }
                vec![g]
            })),
        ))
    }

    /// Row-broadcast bias add on a 2-d tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(Error::Dim {
                op: "add_bias",
                detail: format!("cannot broadcast bias {sb:?} over {sa:?}"),
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let bdat = self.value(bias).data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(self.value(a).data()[r * cols + c] + bdat[c]);
            }
        }
        let value = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(
            value,
            vec![a, bias],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut db = vec![T::ZERO; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += args.upstream[r * cols + c];
                    }
                }
                vec![args.upstream.to_vec(), db]
            })),
        ))
    }

    /// Multiply a tensor by a scalar node (learnable temperature paths).
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dim {
                op: "scale_by",
                detail: format!("scale must be scalar, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).item();
        let data: Vec<T> = self.value(a).data().iter().map(|x| *x * sv).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(
            value,
            vec![a, s],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let da = args.upstream.iter().map(|g| *g * sv).collect();
                let mut ds = T::ZERO;
                for (g, x) in args.upstream.iter().zip(args.parents[0].data()) {
                    ds += *g * *x;
                }
                vec![da, vec![ds]]
            })),
        ))
    }

    /// `sum_i w_i * items_i` for a weight vector node and k same-shaped items.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let k = items.len();
        if self.value(weights).shape() != [k] || k == 0 {
            return Err(Error::Dim {
                op: "weighted_sum",
                detail: format!(
                    "weights {:?} do not match {k} items",
                    self.value(weights).shape()
                ),
            });
        }
        let shape = self.value(items[0]).shape().to_vec();
        for &it in items {
            if self.value(it).shape() != shape {
                return Err(Error::Dim {
                    op: "weighted_sum",
                    detail: format!(
                        "item shapes {:?} and {:?} differ",
                        shape,
                        self.value(it).shape()
                    ),
                });
            }
        }
        let w = self.value(weights).data().to_vec();
        let numel: usize = shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        for (i, &it) in items.iter().enumerate() {
            for (o, x) in data.iter_mut().zip(self.value(it).data()) {
                *o += w[i] * *x;
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        let mut parents = vec![weights];
        parents.extend_from_slice(items);
        Ok(self.push(
            value,
            parents,
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut out = Vec::with_capacity(args.parents.len());
                let mut dw = vec![T::ZERO; k];
                for i in 0..k {
                    let mut acc = T::ZERO;
                    for (g, x) in args.upstream.iter().zip(args.parents[i + 1].data()) {
                        acc += *g * *x;
                    }
                    dw[i] = acc;
                }
                out.push(dw);
                for (i, w_i) in w.iter().enumerate() {
                    if args.needs[i + 1] {
                        out.push(args.upstream.iter().map(|g| *g * *w_i).collect());
                    } else {
                        out.push(Vec::new());
                    }
                }
                out
            })),
        ))
    }

    /// Diagonal of a square matrix as a vector.
    pub fn select_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Dim {
                op: "select_diag",
                detail: format!("expected square matrix, got {s:?}"),
            });
        }
        let n = s[0];
        let data: Vec<T> = (0..n).map(|i| self.value(a).data()[i * n + i]).collect();
        let value = Tensor::from_vec(&[n], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::ZERO; n * n];
                for i in 0..n {
                    g[i * n + i] = args.upstream[i];
                }
                vec![g]
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

impl<T: Scalar> Graph<T> {
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for x in self.value(a).data() {
            s += *x;
        }
        let n = self.value(a).numel();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| vec![vec![args.upstream[0]; n]])),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let inv = T::ONE / T::from_usize(n);
        let mut s = T::ZERO;
        for x in self.value(a).data() {
            s += *x;
        }
        self.push(
            Tensor::scalar(s * inv),
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                vec![vec![args.upstream[0] * inv; n]]
            })),
        )
    }

    fn check_axis(&self, op: &'static str, a: NodeId, axis: usize) -> Result<()> {
        if axis >= self.value(a).shape().len() {
            return Err(Error::Dim {
                op,
                detail: format!("axis {axis} out of range for {:?}", self.value(a).shape()),
            });
        }
        Ok(())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.value(a).shape().to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = x[at(0)];
                for j in 1..len {
                    mx = mx.maxv(x[at(j)]);
                }
                let mut denom = T::ZERO;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    data[at(j)] /= denom;
                }
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let y = args.output.data();
                let mut g = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..len {
                            dot += args.upstream[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            g[at(j)] = y[at(j)] * (args.upstream[at(j)] - dot);
                        }
                    }
                }
                vec![g]
            })),
        ))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.value(a).shape().to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = x[at(0)];
                for j in 1..len {
                    mx = mx.maxv(x[at(j)]);
                }
                let mut denom = T::ZERO;
                for j in 0..len {
                    denom += (x[at(j)] - mx).exp();
                }
                let lse = mx + denom.ln();
                for j in 0..len {
                    data[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let y = args.output.data();
                let mut g = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut total = T::ZERO;
                        for j in 0..len {
                            total += args.upstream[at(j)];
                        }
                        for j in 0..len {
                            g[at(j)] = args.upstream[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![g]
            })),
        ))
    }

    /// Last-axis layer norm with affine gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dim {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Dim {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} do not match last extent {d}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            });
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let lanes_n = xd.len() / d;
        let inv_d = T::ONE / T::from_usize(d);
        let mut data = vec![T::ZERO; xd.len()];
        for l in 0..lanes_n {
            let s = l * d;
            let lane = &xd[s..s + d];
            let mut mean = T::ZERO;
            for v in lane {
                mean += *v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for v in lane {
                let c = *v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_std = T::ONE / (var + eps).sqrt();
            for j in 0..d {
                data[s + j] = (lane[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            value,
            vec![x, gain, bias],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let xd = args.parents[0].data();
                let gd = args.parents[1].data();
                let up = args.upstream;
                let mut dx = vec![T::ZERO; xd.len()];
                let mut dg = vec![T::ZERO; d];
                let mut db = vec![T::ZERO; d];
                let d_t = T::from_usize(d);
                for l in 0..lanes_n {
                    let s = l * d;
                    let lane = &xd[s..s + d];
                    let mut mean = T::ZERO;
                    for v in lane {
                        mean += *v;
                    }
                    mean *= inv_d;
                    let mut var = T::ZERO;
                    for v in lane {
                        let c = *v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    let inv_std = T::ONE / (var + eps).sqrt();
                    let mut dxhat = vec![T::ZERO; d];
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for j in 0..d {
                        let xhat = (lane[j] - mean) * inv_std;
                        dg[j] += up[s + j] * xhat;
                        db[j] += up[s + j];
                        dxhat[j] = up[s + j] * gd[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    for j in 0..d {
                        let xhat = (lane[j] - mean) * inv_std;
                        dx[s + j] = inv_std / d_t
                            * (d_t * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                vec![dx, dg, db]
            })),
        ))
    }

    /// Rows scaled to unit L2 norm. The denominator is `max(norm, eps)`, so
    /// nonzero rows normalize exactly and zero rows map to zero.
    pub fn l2_normalize_rows(&mut self, a: NodeId, eps: T) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Dim {
                op: "l2_normalize_rows",
                detail: format!("expected 2-d, got {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.value(a).data();
        let mut data = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut sq = T::ZERO;
            for v in row {
                sq += *v * *v;
            }
            let denom = sq.sqrt().maxv(eps);
            for c in 0..cols {
                data[r * cols + c] = row[c] / denom;
            }
        }
        let value = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let xd = args.parents[0].data();
                let up = args.upstream;
                let mut g = vec![T::ZERO; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let mut sq = T::ZERO;
                    for v in row {
                        sq += *v * *v;
                    }
                    let norm = sq.sqrt();
                    let mut dot = T::ZERO;
                    for c in 0..cols {
                        dot += up[r * cols + c] * row[c];
                    }
                    if norm > eps {
                        for c in 0..cols {
                            g[r * cols + c] =
                                up[r * cols + c] / norm - row[c] * dot / (norm * norm * norm);
                        }
                    } else {
                        for c in 0..cols {
                            g[r * cols + c] = up[r * cols + c] / eps;
                        }
                    }
                }
                vec![g]
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// Image layout ops
// ---------------------------------------------------------------------------

impl<T: Scalar> Graph<T> {
    /// Channel-to-space rearrangement:
    /// `out(c, h*r+i, w*r+j) = in(c*r^2 + i*r + j, h, w)`.
    pub fn pixel_shuffle(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(Error::Dim {
                op: "pixel_shuffle",
                detail: format!("expected [C*r^2, H, W], got {s:?}"),
            });
        }
        let (cin, h, w) = (s[0], s[1], s[2]);
        if r == 0 || cin % (r * r) != 0 {
            return Err(Error::Dim {
                op: "pixel_shuffle",
                detail: format!("channels {cin} not divisible by r^2 = {}", r * r),
            });
        }
        let cout = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        // perm[out_flat] = in_flat
        let mut perm = vec![0usize; cin * h * w];
        for c in 0..cout {
            for hh in 0..h {
                for ww in 0..w {
                    for i in 0..r {
                        for j in 0..r {
                            let dst = (c * oh + (hh * r + i)) * ow + (ww * r + j);
                            let src = ((c * r * r + i * r + j) * h + hh) * w + ww;
                            perm[dst] = src;
                        }
                    }
                }
            }
        }
        let x = self.value(a).data();
        let data: Vec<T> = perm.iter().map(|&src| x[src]).collect();
        let value = Tensor::from_vec(&[cout, oh, ow], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::ZERO; perm.len()];
                for (dst, &src) in perm.iter().enumerate() {
                    g[src] = args.upstream[dst];
                }
                vec![g]
            })),
        ))
    }

    /// Rearranges `[C, H, W]` into `[N, p^2*C]` patch vectors, row-major over
    /// the patch grid, channel-major within a patch. This is the exact graph
    /// counterpart of [`crate::image::patchify`].
    pub fn extract_patches(&mut self, a: NodeId, p: usize) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(Error::Dim {
                op: "extract_patches",
                detail: format!("expected [C, H, W], got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Dim {
                op: "extract_patches",
                detail: format!("extents {h}x{w} not divisible by patch size {p}"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let pdim = p * p * c;
        let mut perm = vec![0usize; n * pdim];
        for pr in 0..gh {
            for pc in 0..gw {
                let patch = pr * gw + pc;
                for ch in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            let dst = patch * pdim + (ch * p + i) * p + j;
                            let src = (ch * h + (pr * p + i)) * w + (pc * p + j);
                            perm[dst] = src;
                        }
                    }
                }
            }
        }
        let x = self.value(a).data();
        let data: Vec<T> = perm.iter().map(|&src| x[src]).collect();
        let value = Tensor::from_vec(&[n, pdim], data)?;
        Ok(self.push(
            value,
            vec![a],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::ZERO; perm.len()];
                for (dst, &src) in perm.iter().enumerate() {
                    g[src] = args.upstream[dst];
                }
                vec![g]
            })),
        ))
    }

    /// 1x1 convolution: per-pixel linear channel mixing.
    /// `x: [Cin, H, W]`, `kernel: [Cout, Cin, 1, 1]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if sx.len() != 3 || sk.len() != 4 || sk[2] != 1 || sk[3] != 1 || sk[1] != sx[0] {
            return Err(Error::Dim {
                op: "conv2d",
                detail: format!("cannot convolve input {sx:?} with kernel {sk:?}"),
            });
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let cout = sk[0];
        let hw = h * w;
        // out[cout, hw] = K[cout, cin] @ x[cin, hw]
        let data = matmul_raw(self.value(kernel).data(), self.value(x).data(), cout, cin, hw);
        let value = Tensor::from_vec(&[cout, h, w], data)?;
        Ok(self.push(
            value,
            vec![x, kernel],
            Some(Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut out = vec![Vec::new(), Vec::new()];
                if args.needs[0] {
                    // dX = K^T @ dOut
                    let kt = transpose_raw(args.parents[1].data(), cout, cin);
                    out[0] = matmul_raw(&kt, args.upstream, cin, cout, hw);
                }
                if args.needs[1] {
                    // dK = dOut @ X^T
                    let xt = transpose_raw(args.parents[0].data(), cin, hw);
                    out[1] = matmul_raw(args.upstream, &xt, cout, hw, cin);
                }
                out
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selection() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 5.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dim { detail, .. }) => {
                assert!(detail.contains("[2, 3]"), "{detail}");
            }
            other => panic!("expected dim error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(t(&[2], &[1000.0, 1000.0]));
        let s2 = g.softmax(b, 0).unwrap();
        assert_eq!(g.value(s2).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = g.softmax(a, 0).unwrap();
        let got = g.value(s).data();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = [0.3, -1.2, 2.5, 0.0];
        let a = g.constant(t(&[4], &x));
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
        let b = g.constant(t(&[4], &shifted));
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 1.0, -1.0]));
        let s = g.sigmoid(a);
        let out = g.value(s).data();
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 0.731059).abs() < 1e-6);
        assert!((out[1] + out[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_degenerate_and_normalized() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let gain = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let bias = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.0);
        }

        let x2 = g.constant(t(&[1, 2], &[-1.0, 1.0]));
        let gain2 = g.constant(t(&[2], &[1.0, 1.0]));
        let bias2 = g.constant(t(&[2], &[0.0, 0.0]));
        let y2 = g.layer_norm(x2, gain2, bias2, 1e-5).unwrap();
        let out = g.value(y2).data();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4, "{out:?}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]).param());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], &[3.0]).param());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).param());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]).param());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_linear_in_loss_sum() {
        // backward(a + b) == backward(a) then backward(b)
        let xt = t(&[2], &[0.5, -0.7]).param();
        let build = |g: &mut Graph<f64>| {
            let x = g.leaf(&xt);
            let sq = g.mul(x, x).unwrap();
            let a = g.sum_all(sq);
            let e = g.exp(x);
            let b = g.sum_all(e);
            (x, a, b)
        };
        let mut g1 = Graph::new();
        let (x1, a1, b1) = build(&mut g1);
        let total = g1.add(a1, b1).unwrap();
        g1.backward(total).unwrap();

        let mut g2 = Graph::new();
        let (x2, a2, b2) = build(&mut g2);
        g2.backward(a2).unwrap();
        g2.backward(b2).unwrap();

        for (p, q) in g1.grad(x1).unwrap().iter().zip(g2.grad(x2).unwrap()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn param_interning_accumulates_across_uses() {
        let w = t(&[1], &[2.0]).param();
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let prod = g.mul(a, b).unwrap(); // w^2
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[4.0]); // d(w^2)/dw = 2w
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], &[3.0]).param());
        let d = g.detach(x);
        let prod = g.mul(d, d).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn gather_rows_repeated_id_doubles_grad() {
        let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).param();
        let mut g = Graph::new();
        let tb = g.param(&table);
        let once = g.gather_rows(tb, &[1]).unwrap();
        let l1 = g.sum_all(once);
        g.backward(l1).unwrap();
        let g_once = g.grad(tb).unwrap().to_vec();

        let mut g2 = Graph::new();
        let tb2 = g2.param(&table);
        let twice = g2.gather_rows(tb2, &[1, 1]).unwrap();
        let l2 = g2.sum_all(twice);
        g2.backward(l2).unwrap();
        let g_twice = g2.grad(tb2).unwrap().to_vec();
        for (a, b) in g_twice.iter().zip(&g_once) {
            assert_eq!(*a, 2.0 * *b);
        }
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g = Graph::new();
        let tb = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(g.gather_rows(tb, &[2]), Err(Error::Vocab { token_id: 2, .. })));
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x1 = g.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y1 = g.pixel_shuffle(x1, 1).unwrap();
        assert_eq!(g.value(y1).data(), g.value(x1).data());
    }

    #[test]
    fn pixel_shuffle_indivisible_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(g.pixel_shuffle(x, 2).is_err());
    }

    #[test]
    fn conv2d_identity_and_sum() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, eye).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(t(&[1, 2, 1, 1], &[1.0, 1.0]));
        let z = g.conv2d(x, ones).unwrap();
        assert_eq!(g.value(z).data(), &[4.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
        let rows = g.slice_rows(cat, 1, 1).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 4.0, 6.0]);
    }

    #[test]
    fn weighted_sum_forward() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2], &[0.25, 0.75]));
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[1, 2], &[0.0, 1.0]));
        let y = g.weighted_sum(w, &[a, b]).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.75]);
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 2.0]));
        let y = g.l2_normalize_rows(a, 1e-8).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-7 && (out[1] - 0.8).abs() < 1e-7);
        let n1 = (out[2] * out[2] + out[3] * out[3]).sqrt();
        assert!((n1 - 1.0).abs() < 1e-6);
    }
}
