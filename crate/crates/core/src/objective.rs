//! Cross-entropy, assignment entropy and the combined training objective.
//!
//! The forward pass is recorded on an [`autodiff::Tape`](crate::autodiff::Tape)
//! so the same evaluation yields the loss and its exact gradient. Node-bank
//! history enters as a constant; the current batch means carry gradients into
//! the extractor.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{assemble_nodes, rows_with, EdgeParams, NodeBank};
use crate::linalg;
use crate::message_passing::propagate_on_tape;
use crate::model::{embed_on_tape, ModelKind, ModelSpec, ParamStore, ParamVars};
use crate::training::TrainConfig;

/// Raw features of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub task_ids: Vec<usize>,
    pub class_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean over tasks of the per-task mean cross-entropy.
    pub ce: f64,
    /// Mean assignment entropy over class nodes (positive).
    pub ae: f64,
    /// `ce − β·ae`.
    pub total: f64,
    pub average_assignment_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: LossBreakdown,
    /// Aligned with the [`ParamStore`] flat enumeration.
    pub grad: Vec<f64>,
    /// Node bank after this step's moving-average update.
    pub bank: NodeBank,
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    linalg::cross_entropy(logits, label)
}

/// Entropy of a class node's edge weights over tasks; `0·ln 0 = 0`.
pub fn assignment_entropy(row: &[f64]) -> Result<f64> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
        return Err(Error::Contract(format!("assignment row is not on the simplex (sums to {sum})")));
    }
    Ok(linalg::entropy(row))
}

pub(crate) struct Forward {
    pub tape: Tape,
    pub vars: ParamVars,
    pub total: Var,
    pub loss: LossBreakdown,
    pub bank: Option<NodeBank>,
}

fn check_batch(spec: &ModelSpec, batch: &Batch, observed: Option<&[Vec<usize>]>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if batch.features.ncols() != spec.extractor.input_dim {
        return Err(Error::Dimension {
            expected: spec.extractor.input_dim,
            actual: batch.features.ncols(),
            context: "batch feature width",
        });
    }
    if batch.features.nrows() != batch.len() || batch.class_ids.len() != batch.len() {
        return Err(Error::Dimension {
            expected: batch.len(),
            actual: batch.features.nrows(),
            context: "batch rows",
        });
    }
    for (&t, &c) in batch.task_ids.iter().zip(&batch.class_ids) {
        if t >= spec.num_tasks || c >= spec.num_classes {
            return Err(Error::Contract(format!("record (task {t}, class {c}) outside T×C")));
        }
        if let Some(sets) = observed {
            if sets[t].binary_search(&c).is_err() {
                return Err(Error::Contract(format!("class {c} is not observed by task {t}")));
            }
        }
    }
    Ok(())
}

/// Moving-average node update recorded on the tape; returns the stacked rows.
fn update_nodes_on_tape(
    tape: &mut Tape,
    embeddings: Var,
    old: &Array2<f64>,
    seen: &[bool],
    ids: &[usize],
    decay: f64,
) -> Var {
    let rows: Vec<Var> = (0..old.nrows())
        .map(|i| {
            let history = old.slice(s![i..i + 1, ..]).to_owned();
            let members = rows_with(ids, i);
            if members.is_empty() {
                return tape.leaf(history);
            }
            let picked = tape.gather_rows(embeddings, members);
            let mean = tape.mean_rows(picked);
            if seen[i] {
                let kept = tape.leaf(history * decay);
                let fresh = tape.scale(mean, 1.0 - decay);
                tape.add(kept, fresh)
            } else {
                mean
            }
        })
        .collect();
    tape.concat_rows(rows)
}

/// Per-task linear heads over `features`; returns the batch cross-entropy
/// averaged within each task, then across tasks present.
fn task_head_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    spec: &ModelSpec,
    features: Var,
    task_ids: &[usize],
    class_ids: &[usize],
) -> Var {
    let mut per_task = Vec::new();
    for t in 0..spec.num_tasks {
        let rows = rows_with(task_ids, t);
        if rows.is_empty() {
            continue;
        }
        let labels = rows.iter().map(|&r| class_ids[r]).collect();
        let (w, b) = spec.classifier_names(t);
        let x = tape.gather_rows(features, rows);
        let z = tape.matmul(x, vars.var(&w));
        let z = tape.add_row(z, vars.var(&b));
        let losses = tape.softmax_xent(z, labels);
        per_task.push(tape.mean(losses));
    }
    let stacked = tape.concat_rows(per_task);
    tape.mean(stacked)
}

/// Class-node assignment entropies for the current nodes, `C×1`.
fn assignment_entropies(tape: &mut Tape, class_nodes: Var, task_nodes: Var, alpha_pair: f64) -> Var {
    let d = tape.scaled_sq_dist(class_nodes, task_nodes, alpha_pair);
    let d = tape.scale(d, -0.5);
    let p = tape.row_softmax(d);
    tape.row_entropy(p)
}

pub(crate) fn forward(
    params: &ParamStore,
    spec: &ModelSpec,
    bank: Option<&NodeBank>,
    batch: &Batch,
    observed: Option<&[Vec<usize>]>,
    config: &TrainConfig,
) -> Result<Forward> {
    check_batch(spec, batch, observed)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(batch.features.clone());
    let embeddings = embed_on_tape(&mut tape, &vars, spec, x);

    if spec.kind == ModelKind::Erm {
        let (w, b) = spec.classifier_names(0);
        let z = tape.matmul(embeddings, vars.var(&w));
        let z = tape.add_row(z, vars.var(&b));
        let losses = tape.softmax_xent(z, batch.class_ids.clone());
        let total = tape.mean(losses);
        let ce = tape.scalar(total);
        let loss = LossBreakdown { ce, ae: 0.0, total: ce, average_assignment_entropy: 0.0 };
        return Ok(Forward { tape, vars, total, loss, bank: None });
    }

    let bank = bank.ok_or_else(|| Error::Contract("graph model needs a node bank".into()))?;
    let decay = bank.decay;
    let tasks = update_nodes_on_tape(&mut tape, embeddings, &bank.task_nodes, &bank.task_seen, &batch.task_ids, decay);
    let classes = update_nodes_on_tape(&mut tape, embeddings, &bank.class_nodes, &bank.class_seen, &batch.class_ids, decay);

    let mut next_bank = bank.clone();
    next_bank.task_nodes = tape.value(tasks).clone();
    next_bank.class_nodes = tape.value(classes).clone();
    for &t in &batch.task_ids {
        next_bank.task_seen[t] = true;
    }
    for &c in &batch.class_ids {
        next_bank.class_seen[c] = true;
    }

    let enhanced = if spec.num_layers == 0 {
        embeddings
    } else {
        let edges = edge_params(params, config, spec.embed_dim());
        let graph = assemble_nodes(
            tape.value(tasks).view(),
            tape.value(classes).view(),
            &edges,
            tape.value(embeddings).view(),
            &batch.task_ids,
        )?;
        let hoods = Rc::new(graph.neighborhoods(config.neighbors)?);
        let nodes = tape.concat_rows(vec![tasks, classes, embeddings]);
        let out = propagate_on_tape(&mut tape, &vars, spec.num_layers, nodes, hoods);
        let shared = spec.num_tasks + spec.num_classes;
        tape.gather_rows(out, (shared..shared + batch.len()).collect())
    };

    let ce = task_head_loss(&mut tape, &vars, spec, enhanced, &batch.task_ids, &batch.class_ids);
    let entropies = assignment_entropies(&mut tape, classes, tasks, config.alpha_pair(spec.embed_dim()));
    let ae = tape.mean(entropies);
    let total = if config.beta == 0.0 {
        ce
    } else {
        let reg = tape.scale(ae, -config.beta);
        tape.add(ce, reg)
    };
    let ae_value = tape.scalar(ae);
    let loss = LossBreakdown {
        ce: tape.scalar(ce),
        ae: ae_value,
        total: tape.scalar(total),
        average_assignment_entropy: ae_value,
    };
    Ok(Forward { tape, vars, total, loss, bank: Some(next_bank) })
}

pub(crate) fn edge_params(params: &ParamStore, config: &TrainConfig, dim: usize) -> EdgeParams {
    EdgeParams::from_store(params, config.alpha_task(dim), config.alpha_class(dim), config.alpha_pair(dim))
}

/// Loss of one training step, with the node update applied first.
pub fn total_loss(
    params: &ParamStore,
    spec: &ModelSpec,
    bank: Option<&NodeBank>,
    batch: &Batch,
    observed: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    Ok(forward(params, spec, bank, batch, Some(observed), config)?.loss)
}

/// Exact gradient of [`total_loss`] over every parameter, in flat order.
pub fn gradient(
    params: &ParamStore,
    spec: &ModelSpec,
    bank: Option<&NodeBank>,
    batch: &Batch,
    observed: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<GradientOutput> {
    let fwd = forward(params, spec, bank, batch, Some(observed), config)?;
    let grads = fwd.tape.backward(fwd.total);
    let mut flat = Vec::with_capacity(params.len());
    for ((name, var), (_, tensor)) in fwd.vars.iter().zip(params.tensors()) {
        match grads.get(*var) {
            Some(g) => {
                if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numerical {
                        param: format!("{name}[{}]", bad),
                    });
                }
                flat.extend(g.iter().copied());
            }
            None => flat.extend(std::iter::repeat_n(0.0, tensor.len())),
        }
    }
    let bank = fwd.bank.unwrap_or_else(|| NodeBank::new(0, 0, 0, 0.0));
    Ok(GradientOutput { loss: fwd.loss, grad: flat, bank })
}

/// Enhanced-feature logits for a batch against a frozen bank, computed on the
/// training path (batched graph, no node update).
pub fn frozen_logits(
    params: &ParamStore,
    spec: &ModelSpec,
    bank: &NodeBank,
    features: ArrayView2<'_, f64>,
    task_ids: &[usize],
    config: &TrainConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(features.to_owned());
    let embeddings = embed_on_tape(&mut tape, &vars, spec, x);
    let enhanced = if spec.num_layers == 0 {
        embeddings
    } else {
        let edges = edge_params(params, config, spec.embed_dim());
        let graph = assemble_nodes(
            bank.task_nodes.view(),
            bank.class_nodes.view(),
            &edges,
            tape.value(embeddings).view(),
            task_ids,
        )?;
        let hoods = Rc::new(graph.neighborhoods(config.neighbors)?);
        let tasks = tape.leaf(bank.task_nodes.clone());
        let classes = tape.leaf(bank.class_nodes.clone());
        let nodes = tape.concat_rows(vec![tasks, classes, embeddings]);
        let out = propagate_on_tape(&mut tape, &vars, spec.num_layers, nodes, hoods);
        let shared = spec.num_tasks + spec.num_classes;
        tape.gather_rows(out, (shared..shared + task_ids.len()).collect())
    };
    let feats = tape.value(enhanced).clone();
    let mut out = Array2::zeros((task_ids.len(), spec.num_classes));
    for (i, &t) in task_ids.iter().enumerate() {
        let (w, b) = spec.classifier_names(t);
        let row = feats.slice(s![i..i + 1, ..]);
        let mut z = linalg::matmul(row, params.tensor(&w).view());
        z += params.tensor(&b);
        out.row_mut(i).assign(&z.row(0));
    }
    Ok(out)
}
