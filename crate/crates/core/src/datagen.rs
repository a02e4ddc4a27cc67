//! Synthetic multi-task data, category-shift splits and the `MTCS v1` file format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "MTCS v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub task_id: usize,
    pub class_id: usize,
    pub split: Split,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_tasks: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_names: Vec<String>,
    /// Sorted training label space of each task.
    pub observed_classes: Vec<Vec<usize>>,
}

impl DatasetManifest {
    pub fn is_observed(&self, task: usize, class: usize) -> bool {
        self.observed_classes[task].binary_search(&class).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.num_classes == 0 || self.input_dim == 0 {
            return Err(Error::Config("T, C and D must be positive".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for C={}",
                self.class_names.len(),
                self.num_classes
            )));
        }
        validate_assignment(self.num_tasks, self.num_classes, &self.observed_classes)
    }
}

/// Checks that every set is a non-empty subset of `[0, C)` and that the sets cover `[0, C)`.
pub fn validate_assignment(num_tasks: usize, num_classes: usize, sets: &[Vec<usize>]) -> Result<()> {
    if sets.len() != num_tasks {
        return Err(Error::InvalidAssignment(format!(
            "{} observed-class sets for T={num_tasks}",
            sets.len()
        )));
    }
    let mut covered = vec![false; num_classes];
    for (t, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::InvalidAssignment(format!("task {t} observes no class")));
        }
        for &c in set {
            if c >= num_classes {
                return Err(Error::InvalidAssignment(format!(
                    "task {t} lists class {c} outside [0, {num_classes})"
                )));
            }
            covered[c] = true;
        }
    }
    if let Some(c) = covered.iter().position(|&x| !x) {
        return Err(Error::InvalidAssignment(format!(
            "class {c} is not observed by any task"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<LabeledRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_tasks: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub class_separation: f64,
    /// Scale of each task's random affine distortion; 0 gives identical tasks.
    pub task_shift: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            num_classes: 8,
            input_dim: 16,
            class_separation: 1.0,
            task_shift: 0.5,
            train_per_class: 20,
            test_per_class: 20,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("T", self.num_tasks),
            ("C", self.num_classes),
            ("d_in", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.class_separation.is_finite() || !self.task_shift.is_finite() {
            return Err(Error::Config("separation and task shift must be finite".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class-conditional isotropic Gaussians pushed through a per-task affine map
/// `x ↦ (I + s·G_t/√D)·x + s·b_t`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (t_count, c_count, dim) = (config.num_tasks, config.num_classes, config.input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let means: Vec<Vec<f64>> = (0..c_count)
        .map(|_| (0..dim).map(|_| config.class_separation * normal(&mut rng)).collect())
        .collect();

    let norm = (dim as f64).sqrt();
    let transforms: Vec<(Vec<f64>, Vec<f64>)> = (0..t_count)
        .map(|_| {
            let mut a = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    let identity = if i == j { 1.0 } else { 0.0 };
                    a[i * dim + j] = identity + config.task_shift * normal(&mut rng) / norm;
                }
            }
            let b = (0..dim).map(|_| config.task_shift * normal(&mut rng)).collect();
            (a, b)
        })
        .collect();

    let mut records = Vec::with_capacity(t_count * c_count * (config.train_per_class + config.test_per_class));
    for (t, (a, b)) in transforms.iter().enumerate() {
        for (c, mean) in means.iter().enumerate() {
            for (split, n) in [(Split::Train, config.train_per_class), (Split::Test, config.test_per_class)] {
                for _ in 0..n {
                    let z: Vec<f64> = mean.iter().map(|m| m + normal(&mut rng)).collect();
                    let features = (0..dim)
                        .map(|i| b[i] + (0..dim).map(|j| a[i * dim + j] * z[j]).sum::<f64>())
                        .collect();
                    records.push(LabeledRecord {
                        task_id: t,
                        class_id: c,
                        split,
                        features,
                    });
                }
            }
        }
    }

    let manifest = DatasetManifest {
        num_tasks: t_count,
        num_classes: c_count,
        input_dim: dim,
        class_names: (0..c_count).map(|c| format!("class{c}")).collect(),
        observed_classes: vec![(0..c_count).collect(); t_count],
    };
    Ok(Dataset { manifest, records })
}

/// Drops training records of classes a task does not observe and installs the assignment.
pub fn apply_category_shift(dataset: &Dataset, assignment: &[Vec<usize>]) -> Result<Dataset> {
    let manifest = &dataset.manifest;
    validate_assignment(manifest.num_tasks, manifest.num_classes, assignment)?;
    let observed: Vec<Vec<usize>> = assignment
        .iter()
        .map(|set| set.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
        .collect();
    let records = dataset
        .records
        .iter()
        .filter(|r| r.split == Split::Test || observed[r.task_id].binary_search(&r.class_id).is_ok())
        .cloned()
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            observed_classes: observed,
            ..manifest.clone()
        },
        records,
    })
}

/// Draws `round(C·(1−γ))` observed classes per task and repairs coverage so
/// that the union of the sets is `[0, C)`.
pub fn random_assignment(
    num_tasks: usize,
    num_classes: usize,
    missing_rate: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_tasks == 0 || num_classes == 0 {
        return Err(Error::Config("T and C must be positive".into()));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!("missing rate {missing_rate} outside [0, 1)")));
    }
    let per_task = (num_classes as f64 * (1.0 - missing_rate)).round() as usize;
    if per_task == 0 {
        return Err(Error::Infeasible(format!(
            "missing rate {missing_rate} leaves no observed class out of {num_classes}"
        )));
    }
    if per_task * num_tasks < num_classes {
        return Err(Error::Infeasible(format!(
            "{num_tasks} tasks observing {per_task} classes each cannot cover {num_classes} classes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets: Vec<BTreeSet<usize>> = (0..num_tasks)
        .map(|_| {
            let mut classes: Vec<usize> = (0..num_classes).collect();
            classes.shuffle(&mut rng);
            classes.into_iter().take(per_task).collect()
        })
        .collect();

    for missing in 0..num_classes {
        let coverage = coverage_counts(&sets, num_classes);
        if coverage[missing] > 0 {
            continue;
        }
        // Swap the uncovered class into the lowest task holding a redundantly covered
        // class; the swapped-out class is the most covered one (lowest id on ties).
        let (task, donor) = sets
            .iter()
            .enumerate()
            .find_map(|(t, set)| {
                set.iter()
                    .copied()
                    .filter(|&c| coverage[c] >= 2)
                    .max_by(|&a, &b| coverage[a].cmp(&coverage[b]).then(b.cmp(&a)))
                    .map(|c| (t, c))
            })
            .expect("pigeonhole: an uncovered class implies a redundantly covered one");
        sets[task].remove(&donor);
        sets[task].insert(missing);
    }

    Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
}

fn coverage_counts(sets: &[BTreeSet<usize>], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for set in sets {
        for &c in set {
            counts[c] += 1;
        }
    }
    counts
}

/// Average fraction of the label space missing from each task's training set.
pub fn missing_rate(manifest: &DatasetManifest) -> f64 {
    let c = manifest.num_classes;
    let missing: usize = manifest
        .observed_classes
        .iter()
        .map(|set| c - set.len())
        .sum();
    missing as f64 / (manifest.num_tasks * c) as f64
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_dataset(dataset: &Dataset) -> String {
    let m = &dataset.manifest;
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    let _ = writeln!(out, "T={} C={} D={}", m.num_tasks, m.num_classes, m.input_dim);
    let _ = writeln!(out, "classes={}", m.class_names.join(","));
    for (t, set) in m.observed_classes.iter().enumerate() {
        let ids: Vec<String> = set.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "task{t}_observed={}", ids.join(","));
    }
    for r in &dataset.records {
        let feats: Vec<String> = r.features.iter().map(|x| format_float(*x)).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.task_id,
            r.split.as_str(),
            r.class_id,
            feats.join(" ")
        );
    }
    out
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, write_dataset(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

fn parse_usize(path: &Path, line: usize, field: &str, s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(path, line, format!("invalid {field} `{s}`")))
}

fn parse_id_list(path: &Path, line: usize, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| parse_usize(path, line, "class id", x)).collect()
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {what}")))
    };

    let (n, magic) = next("header")?;
    if magic != DATASET_MAGIC {
        return Err(Error::parse(path, n, format!("expected `{DATASET_MAGIC}`")));
    }

    let (n, dims) = next("dimensions")?;
    let fields: Vec<&str> = dims.split(' ').collect();
    let mut vals = [0usize; 3];
    if fields.len() != 3 {
        return Err(Error::parse(path, n, "expected `T=<int> C=<int> D=<int>`"));
    }
    for (slot, (field, key)) in vals.iter_mut().zip(fields.iter().zip(["T=", "C=", "D="])) {
        let v = field
            .strip_prefix(key)
            .ok_or_else(|| Error::parse(path, n, format!("expected `{key}<int>`")))?;
        *slot = parse_usize(path, n, key, v)?;
    }
    let [num_tasks, num_classes, input_dim] = vals;

    let (n, classes) = next("class names")?;
    let names = classes
        .strip_prefix("classes=")
        .ok_or_else(|| Error::parse(path, n, "expected `classes=`"))?;
    let class_names: Vec<String> = if names.is_empty() {
        Vec::new()
    } else {
        names.split(',').map(str::to_owned).collect()
    };
    if class_names.len() != num_classes {
        return Err(Error::parse(
            path,
            n,
            format!("{} class names for C={num_classes}", class_names.len()),
        ));
    }

    let mut observed_classes = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let (n, line) = next("observed classes")?;
        let prefix = format!("task{t}_observed=");
        let ids = line
            .strip_prefix(prefix.as_str())
            .ok_or_else(|| Error::parse(path, n, format!("expected `{prefix}`")))?;
        let ids = parse_id_list(path, n, ids)?;
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parse(path, n, "observed classes must be strictly ascending"));
        }
        observed_classes.push(ids);
    }

    let manifest = DatasetManifest {
        num_tasks,
        num_classes,
        input_dim,
        class_names,
        observed_classes,
    };
    manifest
        .validate()
        .map_err(|e| Error::parse(path, 2, e.to_string()))?;

    let mut records = Vec::new();
    for (n, line) in lines {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::parse(path, n, "expected 4 tab-separated fields"));
        }
        let task_id = parse_usize(path, n, "task id", parts[0])?;
        if task_id >= num_tasks {
            return Err(Error::parse(path, n, format!("unknown task id {task_id}")));
        }
        let split = match parts[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::parse(path, n, format!("unknown split `{other}`"))),
        };
        let class_id = parse_usize(path, n, "class id", parts[2])?;
        if class_id >= num_classes {
            return Err(Error::parse(path, n, format!("unknown class id {class_id}")));
        }
        let features = parts[3]
            .split(' ')
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|_| Error::parse(path, n, format!("invalid feature `{x}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.len() != input_dim {
            return Err(Error::parse(
                path,
                n,
                format!("{} features, expected D={input_dim}", features.len()),
            ));
        }
        records.push(LabeledRecord {
            task_id,
            class_id,
            split,
            features,
        });
    }
    Ok(Dataset { manifest, records })
}
