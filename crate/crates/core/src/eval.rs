//! Per-instance inference and the missing/observed accuracy protocol.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::datagen::{missing_rate, DatasetManifest, LabeledRecord, Split};
use crate::error::{Error, Result};
use crate::graph::{assemble, class_task_edges};
use crate::linalg;
use crate::message_passing::{layers_from_store, propagate};
use crate::model::{classify, embed, ModelKind};
use crate::objective::edge_params;
use crate::training::TrainedModel;

/// Logits for one instance of task `task`, built on a one-instance graph
/// against the trained node bank.
pub fn predict(model: &TrainedModel, features: &[f64], task: usize) -> Result<(usize, Vec<f64>)> {
    let spec = &model.spec;
    if task >= spec.num_tasks {
        return Err(Error::Dimension { expected: spec.num_tasks, actual: task, context: "task id" });
    }
    let e = embed(&model.params, spec, features)?;
    let enhanced = match (spec.kind, &model.bank) {
        (ModelKind::Graph, Some(bank)) if spec.num_layers > 0 => {
            let edges = edge_params(&model.params, &model.config, spec.embed_dim());
            let row = ArrayView2::from_shape((1, e.len()), &e).expect("row view");
            let graph = assemble(bank, &edges, row, &[task])?;
            let layers = layers_from_store(&model.params, spec.num_layers);
            let out = propagate(&layers, &graph, model.config.neighbors)?;
            out.instances.row(0).to_vec()
        }
        (ModelKind::Graph, None) => {
            return Err(Error::Contract("graph model checkpoint lacks a node bank".into()))
        }
        _ => e,
    };
    let logits = classify(&model.params, spec, task, &enhanced)?;
    Ok((argmax(&logits), logits))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `2ab / (a + b)`, defined as 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    /// Accuracy (percent) on classes the task never trained on; `None` when the bucket is empty.
    pub a_m: Option<f64>,
    pub a_o: Option<f64>,
    pub h: Option<f64>,
    pub n_missing: usize,
    pub n_observed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub gamma: f64,
    pub a_m: Option<f64>,
    pub a_o: Option<f64>,
    /// Harmonic mean of the task-averaged `a_m` and `a_o`.
    pub h: Option<f64>,
    /// Mean class-node assignment entropy of the trained bank; `None` without a bank.
    pub avg_assignment_entropy: Option<f64>,
    /// Plain accuracy over every test record (percent).
    pub accuracy: f64,
    pub per_task: Vec<TaskMetrics>,
    /// `per_class[t][c]`: accuracy (percent) on task `t`, class `c`.
    pub per_class: Vec<Vec<Option<f64>>>,
}

fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Counts `(correct, total)` per task and class from predictions.
pub fn metrics_from_predictions(
    manifest: &DatasetManifest,
    outcomes: &[(usize, usize, usize)],
    avg_assignment_entropy: Option<f64>,
) -> MetricsReport {
    let (t_count, c_count) = (manifest.num_tasks, manifest.num_classes);
    let mut table = vec![vec![(0usize, 0usize); c_count]; t_count];
    for &(task, class, predicted) in outcomes {
        let cell = &mut table[task][class];
        cell.1 += 1;
        if predicted == class {
            cell.0 += 1;
        }
    }

    let mut per_task = Vec::with_capacity(t_count);
    for (t, row) in table.iter().enumerate() {
        let (mut miss, mut obs) = ((0, 0), (0, 0));
        for (c, &(ok, n)) in row.iter().enumerate() {
            let bucket = if manifest.is_observed(t, c) { &mut obs } else { &mut miss };
            bucket.0 += ok;
            bucket.1 += n;
        }
        let a_m = percent(miss.0, miss.1);
        let a_o = percent(obs.0, obs.1);
        per_task.push(TaskMetrics {
            a_m,
            a_o,
            h: a_m.zip(a_o).map(|(m, o)| harmonic_mean(m, o)),
            n_missing: miss.1,
            n_observed: obs.1,
        });
    }

    let a_m = mean_of(per_task.iter().map(|m| m.a_m));
    let a_o = mean_of(per_task.iter().map(|m| m.a_o));
    let total: usize = outcomes.len();
    let correct = outcomes.iter().filter(|(_, c, p)| c == p).count();
    MetricsReport {
        gamma: missing_rate(manifest),
        a_m,
        a_o,
        h: a_m.zip(a_o).map(|(m, o)| harmonic_mean(m, o)),
        avg_assignment_entropy,
        accuracy: percent(correct, total).unwrap_or(0.0),
        per_task,
        per_class: table
            .iter()
            .map(|row| row.iter().map(|&(ok, n)| percent(ok, n)).collect())
            .collect(),
    }
}

pub fn average_assignment_entropy(model: &TrainedModel) -> Option<f64> {
    let bank = model.bank.as_ref()?;
    let alpha = model.config.alpha_pair(model.spec.embed_dim());
    let rows = class_task_edges(bank.class_nodes.view(), bank.task_nodes.view(), alpha);
    let total: f64 = rows
        .rows()
        .into_iter()
        .map(|r| linalg::entropy(r.as_slice().expect("standard layout")))
        .sum();
    Some(total / rows.nrows() as f64)
}

/// Evaluates every test-split record; train-split records are ignored.
pub fn evaluate(model: &TrainedModel, manifest: &DatasetManifest, records: &[LabeledRecord]) -> Result<MetricsReport> {
    if manifest.num_tasks != model.spec.num_tasks || manifest.num_classes != model.spec.num_classes {
        return Err(Error::Contract("dataset and checkpoint disagree on T or C".into()));
    }
    let mut outcomes = Vec::new();
    for r in records.iter().filter(|r| r.split == Split::Test) {
        let (predicted, _) = predict(model, &r.features, r.task_id)?;
        outcomes.push((r.task_id, r.class_id, predicted));
    }
    Ok(metrics_from_predictions(manifest, &outcomes, average_assignment_entropy(model)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn summary_line(&self) -> String {
        format!(
            "summary\t{:.4}\t{}\t{}\t{}\t{}",
            self.gamma,
            fmt_opt(self.a_m),
            fmt_opt(self.a_o),
            fmt_opt(self.h),
            fmt_opt(self.avg_assignment_entropy)
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "gamma = {:.4}", self.gamma);
        let _ = writeln!(out, "A_m = {}", fmt_opt(self.a_m));
        let _ = writeln!(out, "A_o = {}", fmt_opt(self.a_o));
        let _ = writeln!(out, "H = {}", fmt_opt(self.h));
        let _ = writeln!(out, "avg_assignment_entropy = {}", fmt_opt(self.avg_assignment_entropy));
        let _ = writeln!(out, "accuracy = {:.4}", self.accuracy);
        out.push_str("per_task\n");
        out.push_str("task\tA_m\tA_o\tH\tn_missing\tn_observed\n");
        for (t, m) in self.per_task.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t}\t{}\t{}\t{}\t{}\t{}",
                fmt_opt(m.a_m),
                fmt_opt(m.a_o),
                fmt_opt(m.h),
                m.n_missing,
                m.n_observed
            );
        }
        out.push_str("per_class\n");
        for (t, row) in self.per_class.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(out, "{t}\t{}", cells.join("\t"));
        }
        out.push_str("summary\tgamma\tA_m\tA_o\tH\tavg_assignment_entropy\n");
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }
}
