//! Central finite-difference check of the analytic gradient.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{NodeBank, DEFAULT_DECAY};
use crate::model::{init_params, ExtractorConfig, ModelKind, ModelSpec, ParamStore};
use crate::objective::{gradient, total_loss, Batch};
use crate::training::TrainConfig;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Everything one loss evaluation needs.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub bank: NodeBank,
    pub batch: Batch,
    pub observed: Vec<Vec<usize>>,
    pub config: TrainConfig,
}

/// T=2, C=3, two instances per task, d=2, L=1, d_in=3. Task 0's node is
/// already initialized and class 2 is still unseen, so both the moving-average
/// and first-batch paths are exercised.
pub fn toy_problem(seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        kind: ModelKind::Graph,
        extractor: ExtractorConfig::new(3, 2),
        num_layers: 1,
        num_tasks: 2,
        num_classes: 3,
    };
    let params = init_params(&spec, 1.0, seed)?;
    let mut bank = NodeBank::new(2, 3, 2, DEFAULT_DECAY);
    bank.task_nodes = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0));
    bank.class_nodes = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
    bank.task_seen = vec![true, false];
    bank.class_seen = vec![true, true, false];
    let batch = Batch {
        features: Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
        task_ids: vec![0, 0, 1, 1],
        class_ids: vec![0, 1, 1, 2],
    };
    let config = TrainConfig {
        embed_dim: 2,
        num_layers: 1,
        beta: 0.1,
        ..TrainConfig::default()
    };
    Ok(Problem {
        spec,
        params,
        bank,
        batch,
        observed: vec![vec![0, 1], vec![1, 2]],
        config,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i − fd_i| / max(1, |fd_i|)`.
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn check(p: &Problem) -> Result<GradCheck> {
    let analytic = gradient(&p.params, &p.spec, Some(&p.bank), &p.batch, &p.observed, &p.config)?.grad;
    let loss_at = |params: &ParamStore| -> Result<f64> {
        Ok(total_loss(params, &p.spec, Some(&p.bank), &p.batch, &p.observed, &p.config)?.total)
    };
    let mut worst = (0.0, 0);
    let mut params = p.params.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let x = params.flat_get(i);
        params.flat_set(i, x + FD_STEP);
        let up = loss_at(&params)?;
        params.flat_set(i, x - FD_STEP);
        let down = loss_at(&params)?;
        params.flat_set(i, x);
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (a - fd).abs() / fd.abs().max(1.0);
        if rel > worst.0 || i == 0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst: p.params.describe(worst.1),
        checked: params.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_passes() {
        let r = check(&toy_problem(0).unwrap()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, toy_problem(0).unwrap().params.len());
    }
}
