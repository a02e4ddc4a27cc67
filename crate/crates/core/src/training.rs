//! The training loop: per-task batching, node updates, graph propagation and
//! plain gradient steps.

use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Dataset, DatasetManifest, LabeledRecord, Split};
use crate::error::{Error, Result};
use crate::graph::{NodeBank, DEFAULT_DECAY};
use crate::model::{init_params, ExtractorConfig, ModelKind, ModelSpec, ParamStore};
use crate::objective::{gradient, Batch, LossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum(f64),
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Sgd => f.write_str("sgd"),
            Optimizer::Momentum(_) => f.write_str("momentum"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Embedding width `d` shared by the extractor output and all graph nodes.
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Top-k neighborhood size; `None` reads the full graph.
    pub neighbors: Option<usize>,
    pub beta: f64,
    pub alpha_task: Option<f64>,
    pub alpha_class: Option<f64>,
    pub alpha_pair: Option<f64>,
    pub learning_rate: f64,
    /// Instances drawn per task per iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub init_scale: f64,
    pub decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Graph,
            embed_dim: 16,
            num_layers: 4,
            neighbors: None,
            beta: 0.1,
            alpha_task: None,
            alpha_class: None,
            alpha_pair: None,
            learning_rate: 0.05,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
            optimizer: Optimizer::Sgd,
            init_scale: 1.0,
            decay: DEFAULT_DECAY,
        }
    }
}

impl TrainConfig {
    pub fn alpha_task(&self, dim: usize) -> f64 {
        self.alpha_task.unwrap_or((dim as f64).sqrt())
    }

    pub fn alpha_class(&self, dim: usize) -> f64 {
        self.alpha_class.unwrap_or((dim as f64).sqrt())
    }

    pub fn alpha_pair(&self, dim: usize) -> f64 {
        self.alpha_pair.unwrap_or((dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.neighbors == Some(0) {
            return bad("neighbors must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        for a in [self.alpha_task, self.alpha_class, self.alpha_pair].into_iter().flatten() {
            if !(a > 0.0 && a.is_finite()) {
                return bad("alpha scales must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad("decay must lie in [0, 1)");
        }
        if let Optimizer::Momentum(m) = self.optimizer {
            if !(0.0..1.0).contains(&m) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, manifest: &DatasetManifest) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            extractor: ExtractorConfig::new(manifest.input_dim, self.embed_dim),
            num_layers: if self.model == ModelKind::Graph { self.num_layers } else { 0 },
            num_tasks: manifest.num_tasks,
            num_classes: manifest.num_classes,
        }
    }
}

/// A trained model: everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub params: ParamStore,
    /// `None` for the pooled baseline.
    pub bank: Option<NodeBank>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: LossBreakdown,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
            self.iter, self.loss.ce, self.loss.ae, self.loss.total, self.loss.average_assignment_entropy
        )
    }
}

pub fn format_log(log: &[LogEntry]) -> String {
    let mut out = String::from("iter\tce\tae\ttotal\tavg_entropy\n");
    for entry in log {
        out.push_str(&entry.to_string());
        out.push('\n');
    }
    out
}

/// Per-task sampling without replacement, reshuffled at every epoch boundary.
pub struct TaskSampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl TaskSampler {
    pub fn new(records: &[LabeledRecord], num_tasks: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let mut pools = vec![Vec::new(); num_tasks];
        for (i, r) in records.iter().enumerate() {
            if r.split == Split::Train {
                pools[r.task_id].push(i);
            }
        }
        if batch_size > 0 {
            if let Some(t) = pools.iter().position(Vec::is_empty) {
                return Err(Error::Config(format!("task {t} has no training records")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pool in &mut pools {
            pool.shuffle(&mut rng);
        }
        Ok(Self {
            cursors: vec![0; num_tasks],
            pools,
            batch_size,
            rng,
        })
    }

    /// Record indices for one iteration, grouped by task in ascending task order.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::new();
        for (pool, cursor) in self.pools.iter_mut().zip(&mut self.cursors) {
            let take = self.batch_size.min(pool.len());
            if *cursor + take > pool.len() {
                pool.shuffle(&mut self.rng);
                *cursor = 0;
            }
            out.extend_from_slice(&pool[*cursor..*cursor + take]);
            *cursor += take;
        }
        out
    }
}

pub fn make_batch(records: &[LabeledRecord], indices: &[usize], input_dim: usize) -> Batch {
    let mut features = Array2::zeros((indices.len(), input_dim));
    for (row, &i) in indices.iter().enumerate() {
        for (j, x) in records[i].features.iter().enumerate() {
            features[[row, j]] = *x;
        }
    }
    Batch {
        features,
        task_ids: indices.iter().map(|&i| records[i].task_id).collect(),
        class_ids: indices.iter().map(|&i| records[i].class_id).collect(),
    }
}

fn check_records(dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    for r in &dataset.records {
        if r.features.len() != m.input_dim {
            return Err(Error::Dimension {
                expected: m.input_dim,
                actual: r.features.len(),
                context: "record features",
            });
        }
        if r.split == Split::Train && !m.is_observed(r.task_id, r.class_id) {
            return Err(Error::Contract(format!(
                "training record of class {} in task {} which does not observe it",
                r.class_id, r.task_id
            )));
        }
    }
    Ok(())
}

/// Derives the sampler stream from the run seed so it never aliases the initializer.
pub fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5DEE_CE66_D1CE_5EED
}

fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<LogEntry>)> {
    config.validate()?;
    dataset.manifest.validate()?;
    check_records(dataset)?;
    let manifest = &dataset.manifest;
    let spec = config.model_spec(manifest);
    let mut params = init_params(&spec, config.init_scale, config.seed)?;
    let mut bank = match spec.kind {
        ModelKind::Graph => Some(NodeBank::new(
            manifest.num_tasks,
            manifest.num_classes,
            config.embed_dim,
            config.decay,
        )),
        ModelKind::Erm => None,
    };
    let mut sampler = TaskSampler::new(
        &dataset.records,
        manifest.num_tasks,
        config.batch_size,
        sampler_seed(config.seed),
    )?;
    let mut velocity = vec![0.0; params.len()];
    let mut log = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let indices = sampler.next_batch();
        let batch = make_batch(&dataset.records, &indices, manifest.input_dim);
        let out = gradient(&params, &spec, bank.as_ref(), &batch, &manifest.observed_classes, config)?;
        if !out.loss.total.is_finite() {
            return Err(Error::Numerical { param: format!("loss at iteration {iter}") });
        }
        let lr = config.learning_rate;
        match config.optimizer {
            Optimizer::Sgd => params.update_flat(|i, p| p - lr * out.grad[i]),
            Optimizer::Momentum(mu) => {
                for (v, g) in velocity.iter_mut().zip(&out.grad) {
                    *v = mu * *v + g;
                }
                params.update_flat(|i, p| p - lr * velocity[i]);
            }
        }
        if bank.is_some() {
            bank = Some(out.bank);
        }
        log.push(LogEntry { iter, loss: out.loss });
    }

    Ok((
        TrainedModel {
            spec,
            config: config.clone(),
            params,
            bank,
        },
        log,
    ))
}

/// Trains the association-graph model.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<LogEntry>)> {
    let config = TrainConfig { model: ModelKind::Graph, ..config.clone() };
    fit(dataset, &config)
}

/// Trains the pooled baseline: shared extractor and a single shared classifier.
pub fn train_erm_baseline(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<LogEntry>)> {
    let config = TrainConfig { model: ModelKind::Erm, ..config.clone() };
    fit(dataset, &config)
}

/// Dispatches on `config.model`.
pub fn train_model(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<LogEntry>)> {
    fit(dataset, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{apply_category_shift, generate_synthetic, SynthConfig};

    fn dataset() -> Dataset {
        let ds = generate_synthetic(&SynthConfig {
            num_tasks: 2,
            num_classes: 3,
            input_dim: 4,
            train_per_class: 5,
            test_per_class: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        apply_category_shift(&ds, &[vec![0, 1], vec![1, 2]]).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            embed_dim: 3,
            num_layers: 2,
            batch_size: 4,
            iterations: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = dataset();
        let cfg = TrainConfig { learning_rate: 0.0, ..config() };
        let (model, log) = train(&ds, &cfg).unwrap();
        let spec = cfg.model_spec(&ds.manifest);
        assert_eq!(model.params, init_params(&spec, 1.0, cfg.seed).unwrap());
        assert_eq!(log.len(), 5);
        let (erm, _) = train_erm_baseline(&ds, &cfg).unwrap();
        let erm_spec = TrainConfig { model: ModelKind::Erm, ..cfg }.model_spec(&ds.manifest);
        assert_eq!(erm.params, init_params(&erm_spec, 1.0, 0).unwrap());
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = dataset();
        let (a, la) = train(&ds, &config()).unwrap();
        let (b, lb) = train(&ds, &config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(format_log(&la), format_log(&lb));
        let (c, _) = train(&ds, &TrainConfig { seed: 1, ..config() }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let ds = dataset();
        let mut s = TaskSampler::new(&ds.records, 2, 5, 3).unwrap();
        let mut seen = s.next_batch();
        seen.extend(s.next_batch());
        // Task pools hold 10 records each: two batches of 5 exhaust them.
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn empty_task_is_config_error() {
        let mut ds = dataset();
        ds.records.retain(|r| !(r.task_id == 1 && r.split == Split::Train));
        assert!(matches!(train(&ds, &config()), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { neighbors: Some(0), ..config() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..config() }.validate().is_err());
        assert!(TrainConfig { beta: f64::NAN, ..config() }.validate().is_err());
        assert!(TrainConfig { alpha_pair: Some(0.0), ..config() }.validate().is_err());
    }

    #[test]
    fn unobserved_training_record_rejected() {
        let mut ds = dataset();
        ds.records.push(LabeledRecord { task_id: 0, class_id: 2, split: Split::Train, features: vec![0.0; 4] });
        assert!(matches!(train(&ds, &config()), Err(Error::Contract(_))));
    }
}
