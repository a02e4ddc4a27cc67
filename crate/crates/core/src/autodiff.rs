//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Values are recorded on a [`Tape`] in evaluation order; [`Tape::backward`]
//! walks the tape once in reverse and accumulates adjoints. Only the handful
//! of operations used by the objective are supported.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::linalg::{self, matmul};

/// Floor applied inside `ln` when computing entropies.
pub const LOG_CLAMP: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    NeighborMean(Var, Rc<Vec<Vec<usize>>>),
    ScaledSqDist(Var, Var, f64),
    RowSoftmax(Var),
    RowEntropy(Var),
    SoftmaxXent(Var, Vec<usize>),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a).view(), self.value(b).view());
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + r;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        self.push(value, Op::GatherRows(a, rows))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.nrows() as f64;
        let mut value = Array2::zeros((1, src.ncols()));
        for row in src.rows() {
            for (o, x) in value.row_mut(0).iter_mut().zip(row.iter()) {
                *o += x;
            }
        }
        value.mapv_inplace(|x| x / n);
        self.push(value, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Row `i` of the result is the unweighted mean of rows `neighbors[i]`.
    pub fn neighbor_mean(&mut self, a: Var, neighbors: Rc<Vec<Vec<usize>>>) -> Var {
        let value = neighbor_mean_value(self.value(a), &neighbors);
        self.push(value, Op::NeighborMean(a, neighbors))
    }

    /// `out[i, j] = ‖(a_i − b_j) / alpha‖²`.
    pub fn scaled_sq_dist(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        let value = crate::graph::scaled_sq_dist(self.value(a).view(), self.value(b).view(), alpha);
        self.push(value, Op::ScaledSqDist(a, b, alpha))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros(src.dim());
        for (mut out, row) in value.rows_mut().into_iter().zip(src.rows()) {
            let sm = linalg::softmax(row.as_slice().expect("standard layout"));
            out.iter_mut().zip(sm).for_each(|(o, p)| *o = p);
        }
        self.push(value, Op::RowSoftmax(a))
    }

    /// Shannon entropy of each row, as an `n×1` column.
    pub fn row_entropy(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            value[[i, 0]] = linalg::entropy(row.as_slice().expect("standard layout"));
        }
        self.push(value, Op::RowEntropy(a))
    }

    /// Per-row cross-entropy `−log softmax(logits_i)[labels_i]`, as an `n×1` column.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let src = self.value(logits);
        assert_eq!(src.nrows(), labels.len(), "one label per row");
        let mut value = Array2::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            value[[i, 0]] = linalg::cross_entropy(row.as_slice().expect("standard layout"), labels[i]);
        }
        self.push(value, Op::SoftmaxXent(logits, labels))
    }

    /// Mean of all entries, as a `1×1` matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.len() as f64;
        let mut acc = 0.0;
        for x in src.iter() {
            acc += x;
        }
        self.push(Array2::from_elem((1, 1), acc / n), Op::Mean(a))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul(g.view(), self.value(*b).t());
                    let db = matmul(self.value(*a).t(), g.view());
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, drow);
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, &g * *factor),
                Op::Relu(a) => {
                    let mut da = g.clone();
                    da.zip_mut_with(self.value(*a), |d, x| {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut target = da.row_mut(src);
                        target += &g.row(r);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let dim = self.value(*a).dim();
                    let n = dim.0 as f64;
                    let mut da = Array2::zeros(dim);
                    for mut row in da.rows_mut() {
                        row.assign(&(&g.row(0) / n));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for part in parts {
                        let rows = self.value(*part).nrows();
                        let piece = g.slice(s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads, *part, piece);
                        start += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::NeighborMean(a, neighbors) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (i, hood) in neighbors.iter().enumerate() {
                        let w = 1.0 / hood.len() as f64;
                        for &j in hood {
                            let mut target = da.row_mut(j);
                            target.scaled_add(w, &g.row(i));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ScaledSqDist(a, b, alpha) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    let k = 2.0 / (alpha * alpha);
                    for i in 0..av.nrows() {
                        for j in 0..bv.nrows() {
                            let gij = g[[i, j]];
                            for p in 0..av.ncols() {
                                let diff = k * (av[[i, p]] - bv[[j, p]]) * gij;
                                da[[i, p]] += diff;
                                db[[j, p]] -= diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let inner: f64 = (0..y.ncols()).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..y.ncols() {
                            da[[i, j]] = y[[i, j]] * (g[[i, j]] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::RowEntropy(a) => {
                    let p = self.value(*a);
                    let mut da = Array2::zeros(p.dim());
                    for i in 0..p.nrows() {
                        for j in 0..p.ncols() {
                            let x = p[[i, j]];
                            let local = if x > LOG_CLAMP {
                                -(x.ln() + 1.0)
                            } else {
                                -LOG_CLAMP.ln()
                            };
                            da[[i, j]] = g[[i, 0]] * local;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxXent(logits, labels) => {
                    let z = self.value(*logits);
                    let mut dz = Array2::zeros(z.dim());
                    for (i, row) in z.rows().into_iter().enumerate() {
                        let sm = linalg::softmax(row.as_slice().expect("standard layout"));
                        for (j, p) in sm.into_iter().enumerate() {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            dz[[i, j]] = g[[i, 0]] * (p - target);
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::Mean(a) => {
                    let dim = self.value(*a).dim();
                    let n = (dim.0 * dim.1) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]] / n));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

pub(crate) fn neighbor_mean_value(src: &Array2<f64>, neighbors: &[Vec<usize>]) -> Array2<f64> {
    let mut value = Array2::zeros((neighbors.len(), src.ncols()));
    for (i, hood) in neighbors.iter().enumerate() {
        let mut out = value.row_mut(i);
        for &j in hood {
            out += &src.row(j);
        }
        let n = hood.len() as f64;
        out.mapv_inplace(|x| x / n);
    }
    value
}

fn accumulate<G: Into<Array2<f64>>>(grads: &mut [Option<Array2<f64>>], v: Var, g: G) {
    let g = g.into();
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
