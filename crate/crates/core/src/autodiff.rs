//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar (`1 x 1`) node returns the gradient of
//! that scalar with respect to every parameter leaf registered through
//! [`Graph::param`]. All values are two-dimensional: rows are time frames,
//! columns are channels.
//!
//! The graph uses interior mutability so expressions can nest,
//! e.g. `g.relu(g.matmul(x, w))`.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    Sum(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Unfold {
        input: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    Reshape(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// A computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    /// Euclidean norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Keeps only the listed parameters.
    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.grads.get_mut(&id)
    }

    pub fn retain(&mut self, keep: &[ParamId]) {
        self.grads.retain(|k, _| keep.contains(k));
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    /// Copy of a node's value.
    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn map1(&self, a: Var, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Array2<f64> {
        f(&self.nodes.borrow()[a.0].value)
    }

    fn map2(&self, a: Var, b: Var, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>) -> Array2<f64> {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// A constant with no gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// A trainable leaf backed by `store[id]`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes.borrow_mut()[v.0].param = Some(id);
        v
    }

    /// A constant copy of `v`'s value; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        self.constant(self.value(v))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.map2(a, b, |x, y| {
            assert_eq!(x.ncols(), y.nrows(), "matmul {:?} x {:?}", x.dim(), y.dim());
            x.dot(y)
        });
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.map1(a, |x| x.t().to_owned());
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.map2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add shape");
            x + y
        });
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.map2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "sub shape");
            x - y
        });
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.map2(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul shape");
            x * y
        });
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = self.map2(a, row, |x, r| {
            assert_eq!(r.nrows(), 1, "add_row expects a single row");
            assert_eq!(x.ncols(), r.ncols(), "add_row width");
            x + r
        });
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.map1(a, |x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.map1(a, |x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.map1(a, |x| x.mapv(f64::tanh));
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.map1(a, |x| x.mapv(|v| v.max(0.0)));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let value = self.map1(a, |x| x.mapv(|v| if v > 0.0 { v } else { slope * v }));
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.map1(a, |x| x.mapv(f64::exp));
        self.push(value, Op::Exp(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.map1(a, |x| x.mapv(|v| v * v));
        self.push(value, Op::Square(a))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&self, a: Var) -> Var {
        let value = self.map1(a, |x| Array2::from_elem((1, 1), x.sum()));
        self.push(value, Op::Sum(a))
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Column means, `1 x n` (global average pooling over time).
    pub fn mean_rows(&self, a: Var) -> Var {
        let value = self.map1(a, |x| {
            x.mean_axis(Axis(0))
                .expect("mean over empty matrix")
                .insert_axis(Axis(0))
        });
        self.push(value, Op::MeanRows(a))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&self, a: Var, rows: usize) -> Var {
        let value = self.map1(a, |x| {
            assert_eq!(x.nrows(), 1, "broadcast_rows expects a single row");
            x.broadcast((rows, x.ncols())).unwrap().to_owned()
        });
        self.push(value, Op::BroadcastRows(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols shape")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows shape")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.map1(a, |x| x.slice(s![.., start..start + len]).to_owned());
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.map1(a, |x| x.slice(s![start..start + len, ..]).to_owned());
        self.push(value, Op::SliceRows(a, start))
    }

    /// Row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let value = self.map1(a, |x| x.select(Axis(0), indices));
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    /// Frame stacking for 1-D convolution (`im2col`).
    ///
    /// Output row `m` concatenates input rows
    /// `m*stride - pad_left + j` for `j in 0..kernel`; rows outside the input
    /// read as zero.
    pub fn unfold(&self, a: Var, kernel: usize, stride: usize, pad_left: usize, out_len: usize) -> Var {
        let value = self.map1(a, |x| {
            let (t_len, c) = x.dim();
            let mut out = Array2::zeros((out_len, kernel * c));
            for m in 0..out_len {
                for j in 0..kernel {
                    let src = (m * stride + j) as isize - pad_left as isize;
                    if src >= 0 && (src as usize) < t_len {
                        out.slice_mut(s![m, j * c..(j + 1) * c])
                            .assign(&x.row(src as usize));
                    }
                }
            }
            out
        });
        self.push(
            value,
            Op::Unfold {
                input: a,
                kernel,
                stride,
                pad_left,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.map1(a, |x| {
            let flat: Vec<f64> = x.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("reshape size")
        });
        self.push(value, Op::Reshape(a))
    }

    /// Row-wise log-softmax. Entries equal to `-inf` stay `-inf` and carry no
    /// gradient, which implements masked normalization.
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = self.map1(a, |x| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.mapv_inplace(|v| v - lse);
            }
            out
        });
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Selected entries as a `1 x n` row.
    pub fn pick(&self, a: Var, entries: &[(usize, usize)]) -> Var {
        let value = self.map1(a, |x| {
            Array2::from_shape_vec((1, entries.len()), entries.iter().map(|&(r, c)| x[[r, c]]).collect())
                .unwrap()
        });
        self.push(value, Op::Pick(a, entries.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        match out.grads.get_mut(&pid) {
                            Some(e) => *e += &g,
                            None => {
                                out.grads.insert(pid, g);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    acc(&mut grads, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d *= *slope;
                            }
                        });
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Square(a) => acc(&mut grads, *a, &g * &val(*a).mapv(|x| 2.0 * x)),
                Op::Sum(a) => {
                    let d = Array2::from_elem(val(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let rows = val(*a).nrows();
                    let d = g
                        .broadcast(val(*a).raw_dim())
                        .unwrap()
                        .mapv(|v| v / rows as f64);
                    acc(&mut grads, *a, d);
                }
                Op::BroadcastRows(a) => acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    for (i, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Unfold {
                    input,
                    kernel,
                    stride,
                    pad_left,
                } => {
                    let (t_len, c) = val(*input).dim();
                    let mut d = Array2::zeros((t_len, c));
                    for m in 0..g.nrows() {
                        for j in 0..*kernel {
                            let src = (m * stride + j) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < t_len {
                                let mut row = d.row_mut(src as usize);
                                row += &g.slice(s![m, j * c..(j + 1) * c]);
                            }
                        }
                    }
                    acc(&mut grads, *input, d);
                }
                Op::Reshape(a) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let d = Array2::from_shape_vec(val(*a).raw_dim(), flat).unwrap();
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax * sum(g)
                    let mut d = g.clone();
                    for (mut drow, (grow, yrow)) in d
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(node.value.rows()))
                    {
                        let total: f64 = grow.sum();
                        for (dv, &y) in drow.iter_mut().zip(yrow.iter()) {
                            *dv -= y.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Pick(a, entries) => {
                    let mut d = Array2::zeros(val(*a).raw_dim());
                    for (i, &(r, c)) in entries.iter().enumerate() {
                        d[[r, c]] += g[[0, i]];
                    }
                    acc(&mut grads, *a, d);
                }
            }
        }
        out
    }
}
