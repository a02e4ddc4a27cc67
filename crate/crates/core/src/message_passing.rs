//! GraphSAGE-style propagation over the association graph.
//!
//! One layer computes `h_i ← U·[mean_{j ∈ N(i)} ReLU(W·h_j); h_i]` with no
//! output nonlinearity. Neighborhoods are fixed for all layers.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::autodiff::{neighbor_mean_value, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::AssociationGraph;
use crate::linalg::matmul;
use crate::model::{ParamStore, ParamVars};

#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayer {
    /// `d×d` message transform, applied as `h·W`.
    pub w: Array2<f64>,
    /// `2d×d` combine transform over `[aggregate; previous]`.
    pub u: Array2<f64>,
}

impl GnnLayer {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn from_store(params: &ParamStore, layer: usize) -> Self {
        Self {
            w: params.tensor(&format!("gnn.{layer}.W")).clone(),
            u: params.tensor(&format!("gnn.{layer}.U")).clone(),
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.w.nrows();
        if self.w.ncols() != d {
            return Err(Error::Dimension { expected: d, actual: self.w.ncols(), context: "GNN W columns" });
        }
        if self.u.dim() != (2 * d, d) {
            return Err(Error::Dimension { expected: 2 * d, actual: self.u.nrows(), context: "GNN U shape" });
        }
        Ok(())
    }
}

pub fn layers_from_store(params: &ParamStore, count: usize) -> Vec<GnnLayer> {
    (0..count).map(|l| GnnLayer::from_store(params, l)).collect()
}

fn fill_empty(neighborhoods: &[Vec<usize>]) -> Vec<Vec<usize>> {
    neighborhoods
        .iter()
        .enumerate()
        .map(|(i, h)| if h.is_empty() { vec![i] } else { h.clone() })
        .collect()
}

/// One message-passing layer. An empty neighborhood aggregates the node itself.
pub fn layer_forward(layer: &GnnLayer, embeddings: ArrayView2<'_, f64>, neighborhoods: &[Vec<usize>]) -> Result<Array2<f64>> {
    layer.check()?;
    if embeddings.ncols() != layer.dim() {
        return Err(Error::Dimension {
            expected: layer.dim(),
            actual: embeddings.ncols(),
            context: "GNN input width",
        });
    }
    if neighborhoods.len() != embeddings.nrows() {
        return Err(Error::Dimension {
            expected: embeddings.nrows(),
            actual: neighborhoods.len(),
            context: "one neighborhood per node",
        });
    }
    let hoods = fill_empty(neighborhoods);
    let messages = matmul(embeddings, layer.w.view()).mapv(|x| x.max(0.0));
    let aggregate = neighbor_mean_value(&messages, &hoods);
    let joined = concatenate(Axis(1), &[aggregate.view(), embeddings]).expect("row counts match");
    Ok(matmul(joined.view(), layer.u.view()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    /// All node embeddings after the last layer.
    pub nodes: Array2<f64>,
    /// The instance rows of `nodes`: the enhanced instance features.
    pub instances: Array2<f64>,
}

/// Applies `layers` in order with neighborhoods computed once from the graph.
pub fn propagate(layers: &[GnnLayer], graph: &AssociationGraph, k: Option<usize>) -> Result<Propagated> {
    let hoods = graph.neighborhoods(k)?;
    let mut h = graph.node_features.clone();
    for layer in layers {
        h = layer_forward(layer, h.view(), &hoods)?;
    }
    let shared = graph.num_tasks + graph.num_classes;
    let instances = h.slice(s![shared.., ..]).to_owned();
    Ok(Propagated { nodes: h, instances })
}

/// Tape version of [`propagate`]'s layer stack, reading `gnn.{l}.*` from `vars`.
pub(crate) fn propagate_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    num_layers: usize,
    nodes: Var,
    neighborhoods: Rc<Vec<Vec<usize>>>,
) -> Var {
    let mut h = nodes;
    for l in 0..num_layers {
        let m = tape.matmul(h, vars.var(&format!("gnn.{l}.W")));
        let m = tape.relu(m);
        let agg = tape.neighbor_mean(m, neighborhoods.clone());
        let joined = tape.concat_cols(agg, h);
        h = tape.matmul(joined, vars.var(&format!("gnn.{l}.U")));
    }
    h
}
