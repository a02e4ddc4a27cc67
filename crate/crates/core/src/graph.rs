//! Association graph over task, class and instance nodes.
//!
//! Node order is always `[tasks; classes; instances]`. Besides the symmetric
//! adjacency the assembled graph carries a read mask: instance nodes read from
//! task nodes, class nodes and themselves, while task and class nodes read only
//! from task and class nodes.

use ndarray::{s, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, softmax};
use crate::model::ParamStore;

pub const DEFAULT_DECAY: f64 = 0.9;

/// Running task and class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBank {
    pub task_nodes: Array2<f64>,
    pub class_nodes: Array2<f64>,
    /// Whether a node has received at least one batch; the first batch
    /// initializes the node instead of being blended in.
    pub task_seen: Vec<bool>,
    pub class_seen: Vec<bool>,
    pub decay: f64,
}

impl NodeBank {
    pub fn new(num_tasks: usize, num_classes: usize, dim: usize, decay: f64) -> Self {
        Self {
            task_nodes: Array2::zeros((num_tasks, dim)),
            class_nodes: Array2::zeros((num_classes, dim)),
            task_seen: vec![false; num_tasks],
            class_seen: vec![false; num_classes],
            decay,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_nodes.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_nodes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.task_nodes.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.task_nodes.iter().chain(self.class_nodes.iter()).all(|x| x.is_finite())
    }

    /// Moving-average update `v ← decay·v + (1 − decay)·mean(batch rows)` for
    /// every task and class present in the batch.
    pub fn update(&self, embeddings: ArrayView2<'_, f64>, task_ids: &[usize], class_ids: &[usize]) -> NodeBank {
        let mut next = self.clone();
        for t in 0..self.num_tasks() {
            let rows = rows_with(task_ids, t);
            if !rows.is_empty() {
                let mean = row_mean(embeddings, &rows);
                blend(next.task_nodes.row_mut(t), self.task_nodes.row(t), &mean, self.task_seen[t], self.decay);
                next.task_seen[t] = true;
            }
        }
        for c in 0..self.num_classes() {
            let rows = rows_with(class_ids, c);
            if !rows.is_empty() {
                let mean = row_mean(embeddings, &rows);
                blend(next.class_nodes.row_mut(c), self.class_nodes.row(c), &mean, self.class_seen[c], self.decay);
                next.class_seen[c] = true;
            }
        }
        next
    }
}

pub(crate) fn rows_with(ids: &[usize], target: usize) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, &id)| id == target)
        .map(|(i, _)| i)
        .collect()
}

fn row_mean(m: ArrayView2<'_, f64>, rows: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; m.ncols()];
    for &r in rows {
        for (a, x) in acc.iter_mut().zip(m.row(r)) {
            *a += x;
        }
    }
    let n = rows.len() as f64;
    acc.into_iter().map(|a| a / n).collect()
}

fn blend(mut out: ndarray::ArrayViewMut1<'_, f64>, old: ArrayView1<'_, f64>, mean: &[f64], seen: bool, decay: f64) {
    for ((o, prev), m) in out.iter_mut().zip(old).zip(mean) {
        *o = if seen { prev * decay + m * (1.0 - decay) } else { *m };
    }
}

/// Metric-head parameters and fixed scales for the edge families.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    pub task_weight: Vec<f64>,
    pub task_bias: f64,
    pub class_weight: Vec<f64>,
    pub class_bias: f64,
    pub alpha_task: f64,
    pub alpha_class: f64,
    pub alpha_pair: f64,
}

impl EdgeParams {
    pub fn from_store(params: &ParamStore, alpha_task: f64, alpha_class: f64, alpha_pair: f64) -> Self {
        let col = |name: &str| params.tensor(name).iter().copied().collect::<Vec<_>>();
        Self {
            task_weight: col("edge.task.weight"),
            task_bias: params.tensor("edge.task.bias")[[0, 0]],
            class_weight: col("edge.class.weight"),
            class_bias: params.tensor("edge.class.bias")[[0, 0]],
            alpha_task,
            alpha_class,
            alpha_pair,
        }
    }
}

fn metric_edge(weight: &[f64], bias: f64, alpha: f64, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for ((w, x), y) in weight.iter().zip(a).zip(b) {
        acc += w * ((x - y).abs() / alpha);
    }
    // Keep saturated values strictly inside (0, 1).
    sigmoid(acc + bias).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `σ(W_T·(|v_i − v_j| / α_T) + b_T)`.
pub fn task_edge(params: &EdgeParams, vi: ArrayView1<'_, f64>, vj: ArrayView1<'_, f64>) -> f64 {
    metric_edge(&params.task_weight, params.task_bias, params.alpha_task, vi, vj)
}

/// `σ(W_C·(|k_i − k_j| / α_C) + b_C)`, in the same affine-then-squash form as [`task_edge`].
pub fn class_edge(params: &EdgeParams, ki: ArrayView1<'_, f64>, kj: ArrayView1<'_, f64>) -> f64 {
    metric_edge(&params.class_weight, params.class_bias, params.alpha_class, ki, kj)
}

pub(crate) fn scaled_sq_dist(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, alpha: f64) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| {
                    let z = (x - y) / alpha;
                    z * z
                })
                .sum();
        }
    }
    out
}

/// Gaussian-kernel similarities between class and task nodes, normalized
/// over tasks: a `C×T` matrix whose rows lie on the simplex.
pub fn class_task_edges(class_nodes: ArrayView2<'_, f64>, task_nodes: ArrayView2<'_, f64>, alpha_pair: f64) -> Array2<f64> {
    let scores = scaled_sq_dist(class_nodes, task_nodes, alpha_pair) * -0.5;
    let mut out = Array2::zeros(scores.dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(scores.rows()) {
        let sm = softmax(row.as_slice().expect("standard layout"));
        o.iter_mut().zip(sm).for_each(|(x, p)| *x = p);
    }
    out
}

/// `softmax_t(e·v_t / √d)` over the rows of `nodes`.
pub fn instance_edges(embedding: ArrayView1<'_, f64>, nodes: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let d = embedding.len();
    if nodes.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: nodes.ncols(),
            context: "instance edge node width",
        });
    }
    let scale = (d as f64).sqrt();
    let scores: Vec<f64> = nodes.rows().into_iter().map(|v| dot(embedding, v) / scale).collect();
    Ok(softmax(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Task(usize),
    Class(usize),
    Instance(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationGraph {
    pub num_tasks: usize,
    pub num_classes: usize,
    /// `(T + C + B)×d`, ordered `[tasks; classes; instances]`.
    pub node_features: Array2<f64>,
    pub adjacency: Array2<f64>,
    /// `mask[[i, j]]`: node `i` may read messages from node `j`.
    pub mask: Array2<bool>,
    pub instance_task_ids: Vec<usize>,
}

impl AssociationGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn num_instances(&self) -> usize {
        self.num_nodes() - self.num_tasks - self.num_classes
    }

    pub fn kind(&self, i: usize) -> NodeKind {
        node_kind(self.num_tasks, self.num_classes, i)
    }

    /// Masked top-`k` neighborhoods used for message passing; `None` reads
    /// every permitted node.
    pub fn neighborhoods(&self, k: Option<usize>) -> Result<Vec<Vec<usize>>> {
        let n = self.num_nodes();
        let k = match k {
            Some(0) => return Err(Error::Config("neighbor size must be at least 1".into())),
            Some(k) => k,
            None => n,
        };
        Ok(masked_topk(&self.adjacency, &self.mask, k))
    }
}

pub fn node_kind(num_tasks: usize, num_classes: usize, i: usize) -> NodeKind {
    if i < num_tasks {
        NodeKind::Task(i)
    } else if i < num_tasks + num_classes {
        NodeKind::Class(i - num_tasks)
    } else {
        NodeKind::Instance(i - num_tasks - num_classes)
    }
}

/// Directional read mask for a graph with `n` nodes.
pub fn read_mask(num_tasks: usize, num_classes: usize, n: usize) -> Array2<bool> {
    let shared = num_tasks + num_classes;
    Array2::from_shape_fn((n, n), |(i, j)| j < shared || (i >= shared && i == j))
}

/// Builds the full association graph for a batch of instance embeddings.
pub fn assemble(
    bank: &NodeBank,
    params: &EdgeParams,
    instances: ArrayView2<'_, f64>,
    task_ids: &[usize],
) -> Result<AssociationGraph> {
    assemble_nodes(bank.task_nodes.view(), bank.class_nodes.view(), params, instances, task_ids)
}

pub(crate) fn assemble_nodes(
    tasks: ArrayView2<'_, f64>,
    classes: ArrayView2<'_, f64>,
    params: &EdgeParams,
    instances: ArrayView2<'_, f64>,
    task_ids: &[usize],
) -> Result<AssociationGraph> {
    let (t, c, b, d) = (tasks.nrows(), classes.nrows(), instances.nrows(), tasks.ncols());
    if b == 0 {
        return Err(Error::Config("association graph needs at least one instance".into()));
    }
    for (width, context) in [
        (classes.ncols(), "class node width"),
        (instances.ncols(), "instance width"),
        (params.task_weight.len(), "task metric weight"),
        (params.class_weight.len(), "class metric weight"),
    ] {
        if width != d {
            return Err(Error::Dimension { expected: d, actual: width, context });
        }
    }
    if task_ids.len() != b {
        return Err(Error::Dimension {
            expected: b,
            actual: task_ids.len(),
            context: "instance task ids",
        });
    }

    let n = t + c + b;
    let mut adj = Array2::zeros((n, n));
    for i in 0..t {
        for j in 0..t {
            adj[[i, j]] = task_edge(params, tasks.row(i), tasks.row(j));
        }
    }
    for i in 0..c {
        for j in 0..c {
            adj[[t + i, t + j]] = class_edge(params, classes.row(i), classes.row(j));
        }
    }
    let ct = class_task_edges(classes, tasks, params.alpha_pair);
    for ci in 0..c {
        for ti in 0..t {
            adj[[t + ci, ti]] = ct[[ci, ti]];
            adj[[ti, t + ci]] = ct[[ci, ti]];
        }
    }
    for x in 0..b {
        let row = t + c + x;
        let e = instances.row(x);
        for (ti, w) in instance_edges(e, tasks)?.into_iter().enumerate() {
            adj[[row, ti]] = w;
            adj[[ti, row]] = w;
        }
        for (ci, w) in instance_edges(e, classes)?.into_iter().enumerate() {
            adj[[row, t + ci]] = w;
            adj[[t + ci, row]] = w;
        }
        adj[[row, row]] = 1.0;
    }

    let mut features = Array2::zeros((n, d));
    features.slice_mut(s![..t, ..]).assign(&tasks);
    features.slice_mut(s![t..t + c, ..]).assign(&classes);
    features.slice_mut(s![t + c.., ..]).assign(&instances);

    Ok(AssociationGraph {
        num_tasks: t,
        num_classes: c,
        node_features: features,
        adjacency: adj,
        mask: read_mask(t, c, n),
        instance_task_ids: task_ids.to_vec(),
    })
}

fn topk_row(row: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<usize> {
    let mut candidates: Vec<(usize, f64)> = row.collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = candidates.into_iter().take(k).map(|(j, _)| j).collect();
    chosen.sort_unstable();
    chosen
}

/// The `k` highest-weight columns of every row, ties to the lower index,
/// returned in ascending index order. The diagonal participates.
pub fn topk_neighbors(adjacency: &Array2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = adjacency.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("neighbor size {k} outside [1, {n}]")));
    }
    Ok(adjacency
        .rows()
        .into_iter()
        .map(|row| topk_row(row.iter().copied().enumerate(), k))
        .collect())
}

/// Top-`k` restricted to permitted columns; rows with fewer than `k`
/// permitted columns keep all of them, and an empty row falls back to itself.
pub fn masked_topk(adjacency: &Array2<f64>, mask: &Array2<bool>, k: usize) -> Vec<Vec<usize>> {
    adjacency
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let hood = topk_row(
                row.iter().copied().enumerate().filter(|(j, _)| mask[[i, *j]]),
                k,
            );
            if hood.is_empty() {
                vec![i]
            } else {
                hood
            }
        })
        .collect()
}
