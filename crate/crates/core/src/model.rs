//! Shared feature extractor, per-task classifiers and the flat parameter store.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::matmul;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Association graph with per-task classifiers.
    Graph,
    /// Pooled-data baseline: one shared classifier, no graph.
    Erm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Graph => "graph",
            ModelKind::Erm => "erm",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(ModelKind::Graph),
            "erm" => Ok(ModelKind::Erm),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    /// Widths of the rectified hidden layers; empty means a single linear map.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl ExtractorConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![output_dim, output_dim],
            output_dim,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Everything that fixes the shapes in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub extractor: ExtractorConfig,
    pub num_layers: usize,
    pub num_tasks: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn embed_dim(&self) -> usize {
        self.extractor.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extractor;
        if e.input_dim == 0 || e.output_dim == 0 || e.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_tasks == 0 || self.num_classes == 0 {
            return Err(Error::Config("T and C must be positive".into()));
        }
        Ok(())
    }

    /// `(name, rows, cols, fan_in)` for every tensor, in enumeration order.
    fn layout(&self) -> Vec<(String, usize, usize, usize)> {
        let d = self.embed_dim();
        let c = self.num_classes;
        let mut out = Vec::new();
        for (i, w) in self.extractor.widths().windows(2).enumerate() {
            out.push((format!("extractor.{i}.weight"), w[0], w[1], w[0]));
            out.push((format!("extractor.{i}.bias"), 1, w[1], w[0]));
        }
        match self.kind {
            ModelKind::Graph => {
                out.push(("edge.task.weight".into(), d, 1, d));
                out.push(("edge.task.bias".into(), 1, 1, d));
                out.push(("edge.class.weight".into(), d, 1, d));
                out.push(("edge.class.bias".into(), 1, 1, d));
                for l in 0..self.num_layers {
                    out.push((format!("gnn.{l}.W"), d, d, d));
                    out.push((format!("gnn.{l}.U"), 2 * d, d, 2 * d));
                }
                for t in 0..self.num_tasks {
                    out.push((format!("classifier.{t}.weight"), d, c, d));
                    out.push((format!("classifier.{t}.bias"), 1, c, d));
                }
            }
            ModelKind::Erm => {
                out.push(("classifier.shared.weight".into(), d, c, d));
                out.push(("classifier.shared.bias".into(), 1, c, d));
            }
        }
        out
    }

    pub(crate) fn classifier_names(&self, task: usize) -> (String, String) {
        match self.kind {
            ModelKind::Graph => (format!("classifier.{task}.weight"), format!("classifier.{task}.bias")),
            ModelKind::Erm => ("classifier.shared.weight".into(), "classifier.shared.bias".into()),
        }
    }
}

/// Named dense tensors with a stable flat enumeration of every scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: Vec<(String, Array2<f64>)>,
}

impl ParamStore {
    pub fn from_tensors(tensors: Vec<(String, Array2<f64>)>) -> Self {
        Self { tensors }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            tensors: spec
                .layout()
                .into_iter()
                .map(|(name, r, c, _)| (name, Array2::zeros((r, c))))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensors(&self) -> &[(String, Array2<f64>)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn tensor(&self, name: &str) -> &Array2<f64> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    /// Maps a flat index to `(tensor position, offset within tensor)`.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (pos, (_, t)) in self.tensors.iter().enumerate() {
            if index < start + t.len() {
                return Some((pos, index - start));
            }
            start += t.len();
        }
        None
    }

    /// Name of the tensor holding flat index `index`, with the row/column inside it.
    pub fn describe(&self, index: usize) -> String {
        match self.locate(index) {
            Some((pos, off)) => {
                let (name, t) = &self.tensors[pos];
                format!("{name}[{}, {}]", off / t.ncols(), off % t.ncols())
            }
            None => format!("<index {index} out of range>"),
        }
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        let (pos, off) = self.locate(index).expect("flat index out of range");
        self.tensors[pos].1.as_slice().expect("standard layout")[off]
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (pos, off) = self.locate(index).expect("flat index out of range");
        self.tensors[pos].1.as_slice_mut().expect("standard layout")[off] = value;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    /// Applies `f(index, value)` to every scalar in enumeration order.
    pub fn update_flat(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        let mut i = 0;
        for (_, t) in &mut self.tensors {
            for x in t.iter_mut() {
                *x = f(i, *x);
                i += 1;
            }
        }
    }

    /// Registers every tensor as a tape leaf, in enumeration order.
    pub(crate) fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }
}

pub(crate) struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }
}

/// Uniform(−s, s) initialization with `s = scale / √fan_in`.
pub fn init_params(spec: &ModelSpec, scale: f64, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = spec
        .layout()
        .into_iter()
        .map(|(name, r, c, fan_in)| {
            let s = scale / (fan_in as f64).sqrt();
            let t = Array2::from_shape_fn((r, c), |_| {
                if s == 0.0 {
                    0.0
                } else {
                    rng.random_range(-s..s)
                }
            });
            (name, t)
        })
        .collect();
    Ok(ParamStore { tensors })
}

/// Batched extractor forward pass: one embedding row per input row.
pub fn embed_batch(params: &ParamStore, spec: &ModelSpec, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != spec.extractor.input_dim {
        return Err(Error::Dimension {
            expected: spec.extractor.input_dim,
            actual: x.ncols(),
            context: "extractor input",
        });
    }
    let layers = spec.extractor.num_layers();
    let mut h = x.to_owned();
    for i in 0..layers {
        h = matmul(h.view(), params.tensor(&format!("extractor.{i}.weight")).view());
        h += params.tensor(&format!("extractor.{i}.bias"));
        if i + 1 < layers {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    Ok(h)
}

pub fn embed(params: &ParamStore, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    let row = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(embed_batch(params, spec, row)?.into_raw_vec_and_offset().0)
}

/// Logits over the entire label space from the classifier of `task`.
pub fn classify(params: &ParamStore, spec: &ModelSpec, task: usize, feature: &[f64]) -> Result<Vec<f64>> {
    if task >= spec.num_tasks {
        return Err(Error::Dimension {
            expected: spec.num_tasks,
            actual: task,
            context: "task id",
        });
    }
    if feature.len() != spec.embed_dim() {
        return Err(Error::Dimension {
            expected: spec.embed_dim(),
            actual: feature.len(),
            context: "classifier input",
        });
    }
    let (w, b) = spec.classifier_names(task);
    let row = ArrayView2::from_shape((1, feature.len()), feature).expect("row view");
    let mut logits = matmul(row, params.tensor(&w).view());
    logits += params.tensor(&b);
    Ok(logits.into_raw_vec_and_offset().0)
}

/// Extractor forward pass recorded on a tape.
pub(crate) fn embed_on_tape(tape: &mut Tape, vars: &ParamVars, spec: &ModelSpec, x: Var) -> Var {
    let layers = spec.extractor.num_layers();
    let mut h = x;
    for i in 0..layers {
        h = tape.matmul(h, vars.var(&format!("extractor.{i}.weight")));
        h = tape.add_row(h, vars.var(&format!("extractor.{i}.bias")));
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    h
}
