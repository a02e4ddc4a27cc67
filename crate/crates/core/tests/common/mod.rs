#![allow(dead_code)]

use mtcs::datagen::{apply_category_shift, generate_synthetic, random_assignment, Dataset, SynthConfig};
use mtcs::linalg::cross_entropy;
use mtcs::model::{classify, embed_batch, ModelSpec, ParamStore};
use mtcs::objective::Batch;
use mtcs::training::TrainConfig;

pub fn shifted(num_tasks: usize, num_classes: usize, input_dim: usize, gamma: f64, seed: u64) -> Dataset {
    let full = generate_synthetic(&SynthConfig {
        num_tasks,
        num_classes,
        input_dim,
        train_per_class: 6,
        test_per_class: 4,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let a = random_assignment(num_tasks, num_classes, gamma, seed).unwrap();
    apply_category_shift(&full, &a).unwrap()
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        embed_dim: 4,
        num_layers: 2,
        batch_size: 3,
        iterations: 20,
        ..TrainConfig::default()
    }
}

/// Mean per-task cross-entropy computed with plain functions and no graph.
pub fn graph_free_ce(model_params: &ParamStore, spec: &ModelSpec, batch: &Batch) -> f64 {
    let emb = embed_batch(model_params, spec, batch.features.view()).unwrap();
    let mut per_task = Vec::new();
    for t in 0..spec.num_tasks {
        let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.task_ids[i] == t).collect();
        if rows.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &i in &rows {
            let feature: Vec<f64> = emb.row(i).to_vec();
            let logits = classify(model_params, spec, t, &feature).unwrap();
            acc += cross_entropy(&logits, batch.class_ids[i]);
        }
        per_task.push(acc / rows.len() as f64);
    }
    let mut acc = 0.0;
    for v in &per_task {
        acc += v;
    }
    acc / per_task.len() as f64
}
