//! Small reverse-mode differentiation core over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only arena of nodes; a [`Tensor`] is a cheap
//! `Copy` handle into it. Because nodes are only ever appended, creation
//! order is a valid topological order and [`Graph::backward`] is a single
//! reverse sweep. Build one graph per forward pass and drop it afterwards.
//!
//! ```
//! use mapgr::ndgrad::Graph;
//!
//! let g = Graph::new();
//! let x = g.leaf(vec![1.0, 2.0, 3.0], &[3], true);
//! let loss = x.mul(x).unwrap().mean();
//! g.backward(loss).unwrap();
//! assert_eq!(x.grad(), vec![2.0 / 3.0, 4.0 / 3.0, 2.0]);
//! ```

mod kernels;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod params;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use kernels::{log_sum_exp, sigmoid, softmax};
pub use mlp::{apply_mlp, Activation, MlpSpec};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamStore};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, m: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize, n: usize },
    MulRow { a: usize, row: usize, n: usize },
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    SoftmaxRows { a: usize, n: usize },
    Sum(usize),
    Mean(usize),
    MeanRows { a: usize, m: usize, n: usize },
    Reshape(usize),
    ConcatCols { parts: Vec<(usize, usize)>, m: usize },
    ConcatRows(Vec<usize>),
    IndexRows { a: usize, rows: Vec<usize>, n: usize },
    RepeatRows { a: usize },
    Conv2d { x: usize, k: usize, bias: Option<usize>, dims: kernels::ConvDims },
    Upsample { x: usize, dims: kernels::UpsampleDims },
    BceLogits { z: usize, targets: Rc<Vec<f64>> },
    CrossEntropy { z: usize, targets: Vec<usize>, classes: usize },
    Weaken { a: usize, keep: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Rc<Vec<f64>>, requires_grad: bool, op: Op) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, requires_grad, op });
        Tensor { graph: self, id: nodes.len() - 1 }
    }

    fn derived(&self, shape: Vec<usize>, value: Vec<f64>, parents: &[usize], op: Op) -> Tensor<'_> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[*p].requires_grad)
        };
        self.push(shape, Rc::new(value), rg, op)
    }

    pub fn leaf(&self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor<'_> {
        assert_eq!(numel(shape), value.len(), "leaf value does not match shape {shape:?}");
        self.push(shape.to_vec(), Rc::new(value), requires_grad, Op::Leaf)
    }

    pub fn leaf_shared(&self, value: Rc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Tensor<'_> {
        assert_eq!(numel(shape), value.len(), "leaf value does not match shape {shape:?}");
        self.push(shape.to_vec(), value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Vec<f64>, shape: &[usize]) -> Tensor<'_> {
        self.leaf(value, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.leaf(vec![v], &[], false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        self.leaf(vec![0.0; numel(shape)], shape, false)
    }

    /// Trainable leaf backed by the store's buffer. Repeated lookups of the
    /// same name within one graph return the same node so gradients from
    /// every use accumulate in one place.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Tensor<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Tensor { graph: self, id });
        }
        let p = store.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let t = self.leaf_shared(p.value.clone(), &p.shape, true);
        self.params.borrow_mut().insert(name.to_string(), t.id);
        Ok(t)
    }

    /// Makes later `param(name)` lookups in this graph resolve to `t`.
    pub fn bind_param(&self, name: &str, t: Tensor<'_>) {
        assert!(std::ptr::eq(self, t.graph), "tensor belongs to a different graph");
        self.params.borrow_mut().insert(name.to_string(), t.id);
    }

    /// Runs the reverse sweep from a scalar `loss`, replacing any gradients
    /// from a previous call.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradients of every parameter reached by the last backward pass.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let grads = self.grads.borrow();
        self.params
            .borrow()
            .iter()
            .filter_map(|(name, &id)| grads.get(id).and_then(|g| g.clone()).map(|g| (name.clone(), g)))
            .collect()
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |ga| kernels::matmul_grad_a(g, bv, ga, *m, *k, *n));
            accumulate(nodes, grads, *b, |gb| kernels::matmul_grad_b(av, g, gb, *m, *k, *n));
        }
        Op::Transpose { a, m, n } => {
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..*m {
                    for j in 0..*n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).zip(bv.iter()).for_each(|((d, s), y)| *d += s * y)
            });
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).zip(av.iter()).for_each(|((d, s), x)| *d += s * x)
            });
        }
        Op::AddRow { a, row, n } => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *row, |gr| {
                for chunk in g.chunks(*n) {
                    add_into(gr, chunk);
                }
            });
        }
        Op::MulRow { a, row, n } => {
            let (av, rv) = (&nodes[*a].value, &nodes[*row].value);
            accumulate(nodes, grads, *a, |ga| {
                for (i, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                    *d += s * rv[i % n];
                }
            });
            accumulate(nodes, grads, *row, |gr| {
                for (i, s) in g.iter().enumerate() {
                    gr[i % n] += s * av[i];
                }
            });
        }
        Op::Scale(a, f) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * f));
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, |ga| {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(av.iter()) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(y.iter()) {
                    *d += s * y * (1.0 - y);
                }
            });
        }
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, |ga| {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(av.iter()) {
                    *d += s * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                }
            });
        }
        Op::SoftmaxRows { a, n } => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |ga| {
                for ((gi, yi), di) in g.chunks(*n).zip(y.chunks(*n)).zip(ga.chunks_mut(*n)) {
                    let dot: f64 = gi.iter().zip(yi).map(|(s, y)| s * y).sum();
                    for ((d, s), y) in di.iter_mut().zip(gi).zip(yi) {
                        *d += y * (s - dot);
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => {
            let inv = 1.0 / nodes[*a].value.len() as f64;
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0] * inv));
        }
        Op::MeanRows { a, m, n } => {
            let inv = 1.0 / *m as f64;
            accumulate(nodes, grads, *a, |ga| {
                for row in ga.chunks_mut(*n) {
                    for (d, s) in row.iter_mut().zip(g) {
                        *d += s * inv;
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::ConcatCols { parts, m } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, width) in parts {
                accumulate(nodes, grads, p, |gp| {
                    for i in 0..*m {
                        add_into(&mut gp[i * width..(i + 1) * width], &g[i * total + offset..i * total + offset + width]);
                    }
                });
                offset += width;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(nodes, grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::IndexRows { a, rows, n } => {
            accumulate(nodes, grads, *a, |ga| {
                for (out_i, &src) in rows.iter().enumerate() {
                    add_into(&mut ga[src * n..(src + 1) * n], &g[out_i * n..(out_i + 1) * n]);
                }
            });
        }
        Op::RepeatRows { a } => {
            let n = nodes[*a].value.len();
            accumulate(nodes, grads, *a, |ga| {
                for chunk in g.chunks(n) {
                    add_into(ga, chunk);
                }
            });
        }
        Op::Conv2d { x, k, bias, dims } => {
            let (xv, kv) = (&nodes[*x].value, &nodes[*k].value);
            accumulate(nodes, grads, *x, |gx| kernels::conv2d_grad_input(g, kv, gx, dims));
            accumulate(nodes, grads, *k, |gk| kernels::conv2d_grad_kernel(g, xv, gk, dims));
            if let Some(b) = bias {
                let plane = dims.h * dims.w;
                accumulate(nodes, grads, *b, |gb| {
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
        }
        Op::Upsample { x, dims } => {
            accumulate(nodes, grads, *x, |gx| kernels::upsample_grad(g, gx, dims));
        }
        Op::BceLogits { z, targets } => {
            let zv = &nodes[*z].value;
            let inv = g[0] / zv.len() as f64;
            accumulate(nodes, grads, *z, |gz| {
                for ((d, z), t) in gz.iter_mut().zip(zv.iter()).zip(targets.iter()) {
                    *d += inv * (kernels::sigmoid(*z) - t);
                }
            });
        }
        Op::CrossEntropy { z, targets, classes } => {
            let zv = &nodes[*z].value;
            let inv = g[0] / targets.len() as f64;
            accumulate(nodes, grads, *z, |gz| {
                for ((row, drow), t) in zv.chunks(*classes).zip(gz.chunks_mut(*classes)).zip(targets) {
                    let p = kernels::softmax(row);
                    for (j, (d, pj)) in drow.iter_mut().zip(p).enumerate() {
                        *d += inv * (pj - if j == *t { 1.0 } else { 0.0 });
                    }
                }
            });
        }
        Op::Weaken { a, keep } => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * keep));
        }
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().as_ref().clone()
    }

    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient from the last backward pass; zeros when this node was not
    /// reached or does not require gradients.
    pub fn grad(&self) -> Vec<f64> {
        self.graph
            .grads
            .borrow()
            .get(self.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    fn parts(&self) -> (Vec<usize>, Rc<Vec<f64>>) {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.clone())
    }

    fn same_graph(&self, other: &Tensor<'_>) {
        assert!(std::ptr::eq(self.graph, other.graph), "tensors belong to different graphs");
    }

    fn rows_cols(shape: &[usize]) -> (usize, usize) {
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => {
                let n = *shape.last().unwrap();
                (numel(shape) / n.max(1), n)
            }
        }
    }

    pub fn detach(&self) -> Tensor<'g> {
        let (shape, value) = self.parts();
        self.graph.push(shape, value, false, Op::Leaf)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(&other);
        let (sa, av) = self.parts();
        let (sb, bv) = other.parts();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(&av, &bv, m, k, n);
        Ok(self.graph.derived(vec![m, n], out, &[self.id, other.id], Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    pub fn transpose(&self) -> Result<Tensor<'g>> {
        let (s, v) = self.parts();
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose expects a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let out = kernels::transpose(&v, m, n);
        Ok(self.graph.derived(vec![n, m], out, &[self.id], Op::Transpose { a: self.id, m, n }))
    }

    fn zip_with(&self, other: Tensor<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor<'g>> {
        self.same_graph(&other);
        let (sa, av) = self.parts();
        let (sb, bv) = other.parts();
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let out = av.iter().zip(bv.iter()).map(|(a, b)| f(*a, *b)).collect();
        Ok(self.graph.derived(sa, out, &[self.id, other.id], op))
    }

    pub fn add(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Tensor<'g>) -> Result<Tensor<'g>> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_op(&self, row: Tensor<'g>, name: &'static str, mul: bool) -> Result<Tensor<'g>> {
        self.same_graph(&row);
        let (sa, av) = self.parts();
        let (sr, rv) = row.parts();
        let n = *sa.last().unwrap_or(&1);
        if sr != [n] {
            return Err(Error::shape(name, &[n], &sr));
        }
        let out = av
            .iter()
            .enumerate()
            .map(|(i, a)| if mul { a * rv[i % n] } else { a + rv[i % n] })
            .collect();
        let op = if mul {
            Op::MulRow { a: self.id, row: row.id, n }
        } else {
            Op::AddRow { a: self.id, row: row.id, n }
        };
        Ok(self.graph.derived(sa, out, &[self.id, row.id], op))
    }

    /// Adds a `[n]` vector to every row of `[..., n]`.
    pub fn add_row(&self, row: Tensor<'g>) -> Result<Tensor<'g>> {
        self.row_op(row, "add_row", false)
    }

    pub fn mul_row(&self, row: Tensor<'g>) -> Result<Tensor<'g>> {
        self.row_op(row, "mul_row", true)
    }

    pub fn scale(&self, f: f64) -> Tensor<'g> {
        let (s, v) = self.parts();
        let out = v.iter().map(|x| x * f).collect();
        self.graph.derived(s, out, &[self.id], Op::Scale(self.id, f))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor<'g> {
        let (s, v) = self.parts();
        let out = v.iter().map(|x| f(*x)).collect();
        self.graph.derived(s, out, &[self.id], op)
    }

    pub fn relu(&self) -> Tensor<'g> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<'g> {
        self.unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn abs(&self) -> Tensor<'g> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn softmax_rows(&self) -> Tensor<'g> {
        let (s, v) = self.parts();
        let (_, n) = Self::rows_cols(&s);
        let out: Vec<f64> = v.chunks(n).flat_map(kernels::softmax).collect();
        self.graph.derived(s, out, &[self.id], Op::SoftmaxRows { a: self.id, n })
    }

    pub fn sum(&self) -> Tensor<'g> {
        let v = self.value();
        self.graph.derived(vec![], vec![v.iter().sum()], &[self.id], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor<'g> {
        let v = self.value();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.graph.derived(vec![], vec![m], &[self.id], Op::Mean(self.id))
    }

    /// `[m, n] -> [n]`, mean over rows.
    pub fn mean_rows(&self) -> Result<Tensor<'g>> {
        let (s, v) = self.parts();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::invalid(format!("mean_rows expects a non-empty matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for row in v.chunks(n) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        Ok(self.graph.derived(vec![n], out, &[self.id], Op::MeanRows { a: self.id, m, n }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        let (s, v) = self.parts();
        if numel(shape) != v.len() {
            return Err(Error::shape("reshape", shape, &s));
        }
        let rg = self.requires_grad();
        Ok(self.graph.push(shape.to_vec(), v, rg, Op::Reshape(self.id)))
    }

    pub fn flatten(&self) -> Tensor<'g> {
        let n = self.numel();
        self.reshape(&[n]).expect("flatten preserves element count")
    }

    /// Concatenates `[m, n_i]` matrices along columns.
    pub fn concat_cols(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let graph = first.graph;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let m = shapes[0].first().copied().unwrap_or(0);
        for s in &shapes {
            if s.len() != 2 || s[0] != m {
                return Err(Error::shape("concat_cols", &[m, 0], s));
            }
        }
        let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let total: usize = widths.iter().sum();
        let values: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (v, w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::ConcatCols { parts: ids.iter().copied().zip(widths).collect(), m };
        Ok(graph.derived(vec![m, total], out, &ids, op))
    }

    /// Stacks tensors of identical shape `s` into `[k, s...]`.
    pub fn stack(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack of nothing"))?;
        let graph = first.graph;
        let s0 = first.shape();
        let mut out = Vec::with_capacity(numel(&s0) * parts.len());
        for p in parts {
            let (s, v) = p.parts();
            if s != s0 {
                return Err(Error::shape("stack", &s0, &s));
            }
            out.extend_from_slice(&v);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(graph.derived(shape, out, &ids, Op::ConcatRows(ids.clone())))
    }

    /// Concatenates `[m_i, n]` matrices along rows.
    pub fn concat_rows(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let graph = first.graph;
        let n = first.shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (s, v) = p.parts();
            if s.len() != 2 || s[1] != n {
                return Err(Error::shape("concat_rows", &[0, n], &s));
            }
            rows += s[0];
            out.extend_from_slice(&v);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(graph.derived(vec![rows, n], out, &ids, Op::ConcatRows(ids.clone())))
    }

    /// Gathers rows of `[m, n]` by index, producing `[rows.len(), n]`.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Tensor<'g>> {
        let (s, v) = self.parts();
        if s.len() != 2 {
            return Err(Error::invalid(format!("index_rows expects a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|r| **r >= m) {
            return Err(Error::invalid(format!("row {bad} out of range for {m} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&v[r * n..(r + 1) * n]);
        }
        let op = Op::IndexRows { a: self.id, rows: rows.to_vec(), n };
        Ok(self.graph.derived(vec![rows.len(), n], out, &[self.id], op))
    }

    /// `[n] -> [times, n]`
    pub fn repeat_rows(&self, times: usize) -> Tensor<'g> {
        let (_, v) = self.parts();
        let n = v.len();
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(&v);
        }
        self.graph.derived(vec![times, n], out, &[self.id], Op::RepeatRows { a: self.id })
    }

    /// Zero-padded "same" cross-correlation of `[c_in, H, W]` with a
    /// `[c_out, c_in, k, k]` kernel (odd `k`), plus optional `[c_out]` bias.
    pub fn conv2d(&self, kernel: Tensor<'g>, bias: Option<Tensor<'g>>) -> Result<Tensor<'g>> {
        self.same_graph(&kernel);
        let (sx, xv) = self.parts();
        let (sk, kv) = kernel.parts();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::shape("conv2d", &[0, 0, 0], &sx));
        }
        if sk[1] != sx[0] {
            return Err(Error::shape("conv2d", &[sk[0], sx[0], sk[2], sk[3]], &sk));
        }
        if sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(Error::invalid(format!("conv2d kernel must be square with odd size, got {sk:?}")));
        }
        let dims = kernels::ConvDims { ci: sx[0], co: sk[0], h: sx[1], w: sx[2], k: sk[2] };
        let mut out = kernels::conv2d(&xv, &kv, &dims);
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            self.same_graph(&b);
            let (sb, bv) = b.parts();
            if sb != [dims.co] {
                return Err(Error::shape("conv2d bias", &[dims.co], &sb));
            }
            let plane = dims.h * dims.w;
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[o]);
            }
            parents.push(b.id);
        }
        let op = Op::Conv2d { x: self.id, k: kernel.id, bias: bias.map(|b| b.id), dims };
        Ok(self.graph.derived(vec![dims.co, dims.h, dims.w], out, &parents, op))
    }

    /// Align-corners bilinear resize of `[c, h, w]` to `[c, out_h, out_w]`.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<'g>> {
        let (s, v) = self.parts();
        if s.len() != 3 {
            return Err(Error::invalid(format!("upsample expects [c, h, w], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if out_h < h || out_w < w {
            return Err(Error::invalid(format!("upsample target {out_h}x{out_w} smaller than {h}x{w}")));
        }
        if (out_h > h && h < 2) || (out_w > w && w < 2) {
            return Err(Error::invalid(format!("cannot interpolate a {h}x{w} map to {out_h}x{out_w}")));
        }
        let dims = kernels::UpsampleDims::new(c, h, w, out_h, out_w);
        let out = kernels::upsample(&v, &dims);
        Ok(self.graph.derived(vec![c, out_h, out_w], out, &[self.id], Op::Upsample { x: self.id, dims }))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `targets`,
    /// evaluated in log-sum-exp form.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor<'g>> {
        let (s, z) = self.parts();
        if targets.len() != z.len() {
            return Err(Error::shape("bce_with_logits", &s, &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("bce target {t} outside [0, 1]")));
        }
        let total: f64 = z.iter().zip(targets).map(|(z, t)| kernels::bce_logit(*z, *t)).sum();
        let op = Op::BceLogits { z: self.id, targets: Rc::new(targets.to_vec()) };
        Ok(self.graph.derived(vec![], vec![total / z.len() as f64], &[self.id], op))
    }

    /// Mean softmax cross-entropy of `[m, k]` logits against class indices.
    /// An empty row set yields a constant zero.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<'g>> {
        let (s, z) = self.parts();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &[targets.len(), 0], &s));
        }
        let k = s[1];
        if targets.is_empty() {
            return Ok(self.graph.scalar(0.0));
        }
        if let Some(t) = targets.iter().find(|t| **t >= k) {
            return Err(Error::invalid(format!("class {t} out of range for {k} logits")));
        }
        let total: f64 = z
            .chunks(k)
            .zip(targets)
            .map(|(row, t)| kernels::log_sum_exp(row) - row[*t])
            .sum();
        let op = Op::CrossEntropy { z: self.id, targets: targets.to_vec(), classes: k };
        Ok(self.graph.derived(vec![], vec![total / targets.len() as f64], &[self.id], op))
    }

    /// Identity forward; backward scales the incoming gradient by `1 - c`.
    /// Equivalent to `x * (1 - c) + detach(x) * c` without the rounding
    /// that the literal expression would introduce in the forward value.
    pub fn weaken(&self, c: f64) -> Result<Tensor<'g>> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("weakening coefficient {c} outside [0, 1]")));
        }
        let (s, v) = self.parts();
        let rg = self.requires_grad();
        Ok(self.graph.push(s, v, rg, Op::Weaken { a: self.id, keep: 1.0 - c }))
    }
}

pub fn apply_conv2d<'g>(kernel: Tensor<'g>, x: Tensor<'g>) -> Result<Tensor<'g>> {
    x.conv2d(kernel, None)
}

pub fn bilinear_upsample(x: Tensor<'_>, out_h: usize, out_w: usize) -> Result<Tensor<'_>> {
    x.upsample_bilinear(out_h, out_w)
}

pub fn bce_with_logits<'g>(logits: Tensor<'g>, targets: &[f64]) -> Result<Tensor<'g>> {
    logits.bce_with_logits(targets)
}

pub fn gradient_weaken(x: Tensor<'_>, c: f64) -> Result<Tensor<'_>> {
    x.weaken(c)
}

pub fn backward(loss: Tensor<'_>) -> Result<()> {
    loss.graph.backward(loss)
}
