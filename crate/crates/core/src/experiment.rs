//! One synthetic experiment cell and multi-seed aggregation.

use crate::config::RunConfig;
use crate::datagen::{apply_category_shift, generate_synthetic, random_assignment, Dataset};
use crate::error::Result;
use crate::eval::{evaluate, MetricsReport};
use crate::training::train_model;

/// Generates, shifts, trains and evaluates with every seed set to `seed`.
pub fn run_cell(config: &RunConfig, seed: u64) -> Result<MetricsReport> {
    let mut config = config.clone();
    config.set_seed(seed);
    let dataset = shifted_dataset(&config)?;
    let (model, _) = train_model(&dataset, &config.train)?;
    evaluate(&model, &dataset.manifest, &dataset.records)
}

pub fn shifted_dataset(config: &RunConfig) -> Result<Dataset> {
    config.validate()?;
    let full = generate_synthetic(&config.synth)?;
    let s = &config.synth;
    let assignment = random_assignment(s.num_tasks, s.num_classes, config.missing_rate, s.seed)?;
    apply_category_shift(&full, &assignment)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean ± sd over the runs that define the metric; `None` if none do.
pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Option<(f64, f64)> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    (!present.is_empty()).then(|| mean_sd(&present))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub a_m: Option<(f64, f64)>,
    pub a_o: Option<(f64, f64)>,
    pub h: Option<(f64, f64)>,
    pub entropy: Option<(f64, f64)>,
}

pub fn summarize_reports(reports: &[MetricsReport]) -> CellSummary {
    CellSummary {
        a_m: summarize(reports.iter().map(|r| r.a_m)),
        a_o: summarize(reports.iter().map(|r| r.a_o)),
        h: summarize(reports.iter().map(|r| r.h)),
        entropy: summarize(reports.iter().map(|r| r.avg_assignment_entropy)),
    }
}
