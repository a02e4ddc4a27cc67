//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mtcs --test acceptance -- --nocapture`.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mtcs::config::RunConfig;
use mtcs::datagen::{missing_rate, DatasetManifest};
use mtcs::eval::MetricsReport;
use mtcs::experiment::{mean_sd, run_cell, shifted_dataset};
use mtcs::gradcheck::{check, toy_problem};
use mtcs::graph::{assemble, EdgeParams, NodeBank, DEFAULT_DECAY};
use mtcs::message_passing::{layer_forward, propagate, GnnLayer};
use mtcs::model::init_params;
use mtcs::objective::{assignment_entropy, gradient};
use mtcs::training::{make_batch, sampler_seed, train, TaskSampler, TrainConfig};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

/// Criteria that do not hold for this implementation; see the README.
const KNOWN_UNMET: &[usize] = &[6, 8];

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: String) -> Verdict {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2}: {tag}  {detail}");
    Verdict { id, pass, detail }
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn random_graph(rng: &mut ChaCha8Rng, t: usize, c: usize, b: usize, d: usize) -> mtcs::graph::AssociationGraph {
    let mut bank = NodeBank::new(t, c, d, DEFAULT_DECAY);
    bank.task_nodes = random(rng, t, d, 3.0);
    bank.class_nodes = random(rng, c, d, 3.0);
    let alpha = rng.random_range(0.2..3.0);
    let p = EdgeParams {
        task_weight: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        task_bias: rng.random_range(-2.0..2.0),
        class_weight: (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        class_bias: rng.random_range(-2.0..2.0),
        alpha_task: alpha,
        alpha_class: alpha * 0.7,
        alpha_pair: alpha * 1.3,
    };
    let inst = random(rng, b, d, 3.0);
    let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..t)).collect();
    assemble(&bank, &p, inst.view(), &ids).unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let r = check(&toy_problem(0).unwrap()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        r.max_rel_error < 1e-4 && secs < 10.0,
        format!("gradient check: max rel error {:.2e} over {} parameters, {secs:.2}s", r.max_rel_error, r.checked),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0.0f64;
    let mut ok = true;
    for _ in 0..1000 {
        let (t, c, b, d) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..5));
        let g = random_graph(&mut rng, t, c, b, d);
        let a = &g.adjacency;
        let n = a.nrows();
        let mut check_sum = |s: f64| worst_sum = worst_sum.max((s - 1.0).abs());
        for ci in 0..c {
            check_sum((0..t).map(|j| a[[t + ci, j]]).sum());
        }
        for x in t + c..n {
            check_sum((0..t).map(|j| a[[x, j]]).sum());
            check_sum((t..t + c).map(|j| a[[x, j]]).sum());
        }
        for i in 0..n {
            for j in 0..n {
                ok &= a[[i, j]] == a[[j, i]];
                if i >= t + c && j >= t + c {
                    ok &= a[[i, j]] == if i == j { 1.0 } else { 0.0 };
                }
                let sigma = (i < t && j < t) || ((t..t + c).contains(&i) && (t..t + c).contains(&j));
                if sigma {
                    ok &= a[[i, j]] > 0.0 && a[[i, j]] < 1.0;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        ok && worst_sum < 1e-9 && secs < 10.0,
        format!("1000 graphs: max |row sum - 1| {worst_sum:.1e}, symmetry/identity/sigma-range {}, {secs:.2}s", if ok { "ok" } else { "violated" }),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for _ in 0..1000 {
        let t = rng.random_range(1..9);
        let raw: Vec<f64> = (0..t).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h = assignment_entropy(&row).unwrap();
        ok &= h >= 0.0 && h <= (t as f64).ln() + 1e-12;
    }
    let mut uniform_err = 0.0f64;
    let mut one_hot_exact = true;
    for t in 1..=10 {
        let h = assignment_entropy(&vec![1.0 / t as f64; t]).unwrap();
        uniform_err = uniform_err.max((h - (t as f64).ln()).abs());
        for hot in 0..t {
            let mut row = vec![0.0; t];
            row[hot] = 1.0;
            one_hot_exact &= assignment_entropy(&row).unwrap() == 0.0;
        }
    }
    verdict(
        3,
        ok && uniform_err < 1e-12 && one_hot_exact,
        format!("bounds on 1000 rows {}, uniform err {uniform_err:.1e}, one-hot exactly 0: {one_hot_exact}", if ok { "ok" } else { "violated" }),
    )
}

/// Direct double loop over the layer formula.
#[allow(clippy::needless_range_loop)]
fn oracle_layer(layer: &GnnLayer, h: &Array2<f64>, hoods: &[Vec<usize>]) -> Array2<f64> {
    let (n, d) = h.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let mut agg = vec![0.0; d];
        for &j in &hoods[i] {
            for a in 0..d {
                let mut z = 0.0;
                for b in 0..d {
                    z += h[[j, b]] * layer.w[[b, a]];
                }
                agg[a] += z.max(0.0);
            }
        }
        for v in &mut agg {
            *v /= hoods[i].len() as f64;
        }
        for o in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += agg[a] * layer.u[[a, o]] + h[[i, a]] * layer.u[[d + a, o]];
            }
            out[[i, o]] = acc;
        }
    }
    out
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(1..4);
        let c = rng.random_range(1..5);
        let b = rng.random_range(1..=10 - t - c);
        let d = rng.random_range(1..5);
        let g = random_graph(&mut rng, t, c, b, d);
        let n = g.num_nodes();
        let k = if rng.random_bool(0.5) { None } else { Some(rng.random_range(1..=n)) };
        let layers: Vec<GnnLayer> = (0..rng.random_range(1..4))
            .map(|_| GnnLayer { w: random(&mut rng, d, d, 1.0), u: random(&mut rng, 2 * d, d, 1.0) })
            .collect();
        let hoods = g.neighborhoods(k).unwrap();
        let single = layer_forward(&layers[0], g.node_features.view(), &hoods).unwrap();
        let want_single = oracle_layer(&layers[0], &g.node_features, &hoods);
        worst = worst.max((&single - &want_single).iter().fold(0.0, |m, x| m.max(x.abs())));
        let mut h = g.node_features.clone();
        for layer in &layers {
            h = oracle_layer(layer, &h, &hoods);
        }
        let got = propagate(&layers, &g, k).unwrap();
        worst = worst.max((&got.nodes - &h).iter().fold(0.0, |m, x| m.max(x.abs())));
        let inst = h.select(Axis(0), &(t + c..n).collect::<Vec<_>>());
        worst = worst.max((&got.instances - &inst).iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    verdict(4, worst < 1e-12, format!("100 graphs of <= 10 nodes: max |layer - oracle| {worst:.1e}"))
}

fn manifest(names: &[&str], sets: &[&[&str]]) -> DatasetManifest {
    let id = |n: &str| names.iter().position(|x| *x == n).unwrap();
    DatasetManifest {
        num_tasks: sets.len(),
        num_classes: names.len(),
        input_dim: 1,
        class_names: names.iter().map(|s| s.to_string()).collect(),
        observed_classes: sets
            .iter()
            .map(|s| {
                let mut v: Vec<usize> = s.iter().map(|n| id(n)).collect();
                v.sort();
                v
            })
            .collect(),
    }
}

fn criterion_5() -> Verdict {
    let office = [
        "back_pack", "bike", "calculator", "headphones", "keyboard",
        "laptop_computer", "monitor", "mouse", "mug", "projector",
    ];
    let oc = manifest(
        &office,
        &[
            &["keyboard", "laptop_computer"],
            &["calculator", "monitor", "mouse"],
            &["bike", "projector"],
            &["back_pack", "headphones", "mug"],
        ],
    );
    let skin = ["bcc", "bkl", "df", "mel", "nv", "vasc"];
    let sl = manifest(&skin, &[&["bcc", "nv"], &["mel", "vasc"], &["bkl", "df"]]);
    let (g1, g2) = (missing_rate(&oc), missing_rate(&sl));
    verdict(
        5,
        g1 == 0.75 && g2 == 2.0 / 3.0 && oc.validate().is_ok() && sl.validate().is_ok(),
        format!("Office-Caltech gamma {g1}, Skin-Lesion gamma {g2}"),
    )
}

/// Five-seed results per named cell, with the wall time of each batch.
struct Runs {
    cells: HashMap<&'static str, Vec<MetricsReport>>,
    times: HashMap<&'static str, Duration>,
}

impl Runs {
    fn run(&mut self, specs: &[(&'static str, &[(&str, &str)])]) {
        let todo: Vec<_> = specs.iter().filter(|(name, _)| !self.cells.contains_key(name)).collect();
        let start = Instant::now();
        let results: Vec<Vec<MetricsReport>> = std::thread::scope(|s| {
            let handles: Vec<Vec<_>> = todo
                .iter()
                .map(|(_, overrides)| {
                    let mut config = RunConfig::default();
                    for (k, v) in overrides.iter() {
                        config.set(k, v).unwrap();
                    }
                    (0..SEEDS)
                        .map(|seed| {
                            let c = config.clone();
                            s.spawn(move || run_cell(&c, seed).unwrap())
                        })
                        .collect()
                })
                .collect();
            handles
                .into_iter()
                .map(|hs| hs.into_iter().map(|h| h.join().unwrap()).collect())
                .collect()
        });
        let elapsed = start.elapsed();
        for ((name, _), reports) in todo.iter().zip(results) {
            self.cells.insert(name, reports);
            self.times.insert(name, elapsed);
        }
    }

    fn stat(&self, cell: &str, f: impl Fn(&MetricsReport) -> Option<f64>) -> (f64, f64) {
        let v: Vec<f64> = self.cells[cell].iter().map(|r| f(r).unwrap_or(f64::NAN)).collect();
        mean_sd(&v)
    }

    fn secs(&self, cells: &[&str]) -> f64 {
        let mut seen = Vec::new();
        let mut total = 0.0;
        for c in cells {
            let t = self.times[c];
            if !seen.contains(&t) {
                seen.push(t);
                total += t.as_secs_f64();
            }
        }
        total
    }
}

const FULL: (&str, &[(&str, &str)]) = ("full", &[]);
const NO_GRAPH: (&str, &[(&str, &str)]) = ("L=0", &[("L", "0")]);
const ERM: (&str, &[(&str, &str)]) = ("erm", &[("model", "erm")]);
const NO_AE: (&str, &[(&str, &str)]) = ("beta=0", &[("beta", "0")]);
const K1: (&str, &[(&str, &str)]) = ("k=1", &[("k", "1")]);
const K_TC: (&str, &[(&str, &str)]) = ("k=T+C", &[("k", "12")]);

fn fmt(m: (f64, f64)) -> String {
    format!("{:.2}+-{:.2}", m.0, m.1)
}

fn criterion_6(runs: &mut Runs) -> Verdict {
    runs.run(&[FULL, NO_GRAPH, ERM]);
    let h_full = runs.stat("full", |r| r.h);
    let h_none = runs.stat("L=0", |r| r.h);
    let am_full = runs.stat("full", |r| r.a_m);
    let am_erm = runs.stat("erm", |r| r.a_m);
    let secs = runs.secs(&["full", "L=0", "erm"]);
    verdict(
        6,
        h_full.0 > h_none.0 && am_full.0 > am_erm.0 && secs < 300.0,
        format!(
            "H full {} vs L=0 {}; A_m full {} vs ERM {}; {secs:.1}s",
            fmt(h_full),
            fmt(h_none),
            fmt(am_full),
            fmt(am_erm)
        ),
    )
}

fn criterion_7(runs: &mut Runs) -> Verdict {
    runs.run(&[FULL, NO_AE]);
    let ent_on = runs.stat("full", |r| r.avg_assignment_entropy);
    let ent_off = runs.stat("beta=0", |r| r.avg_assignment_entropy);
    let am_on = runs.stat("full", |r| r.a_m);
    let am_off = runs.stat("beta=0", |r| r.a_m);
    let secs = runs.secs(&["full", "beta=0"]);
    verdict(
        7,
        ent_on.0 > ent_off.0 && am_on.0 >= am_off.0 - am_off.1 && secs < 300.0,
        format!(
            "entropy beta=0.1 {:.4} vs beta=0 {:.4}; A_m {} vs {}; {secs:.1}s",
            ent_on.0,
            ent_off.0,
            fmt(am_on),
            fmt(am_off)
        ),
    )
}

fn criterion_8(runs: &mut Runs) -> Verdict {
    runs.run(&[FULL, K1, K_TC]);
    let full = runs.stat("full", |r| r.h);
    let k1 = runs.stat("k=1", |r| r.h);
    let ktc = runs.stat("k=T+C", |r| r.h);
    verdict(
        8,
        full.0 > k1.0 && full.0 > ktc.0,
        format!("H k=1 {}, k=T+C {}, full {}", fmt(k1), fmt(ktc), fmt(full)),
    )
}

fn criterion_9() -> Verdict {
    let mut config = RunConfig { missing_rate: 0.0, ..RunConfig::default() };
    config.train.iterations = 300;
    let report = run_cell(&config, 0).unwrap();
    let na = report.a_m.is_none() && report.h.is_none() && report.a_o.is_some_and(f64::is_finite);
    let text = report.to_text();
    let printed = text.contains("A_m = -") && text.contains("H = -");

    // L=0, beta=0: replay the run against the graph-free loss bit for bit.
    let mut config = RunConfig::default();
    config.train = TrainConfig { num_layers: 0, beta: 0.0, iterations: 200, ..config.train };
    let ds = shifted_dataset(&config).unwrap();
    let tc = &config.train;
    let (model, log) = train(&ds, tc).unwrap();
    let spec = tc.model_spec(&ds.manifest);
    let m = &ds.manifest;
    let mut params = init_params(&spec, tc.init_scale, tc.seed).unwrap();
    let mut bank = NodeBank::new(m.num_tasks, m.num_classes, tc.embed_dim, tc.decay);
    let mut sampler = TaskSampler::new(&ds.records, m.num_tasks, tc.batch_size, sampler_seed(tc.seed)).unwrap();
    let mut bitwise = true;
    for entry in &log {
        let batch = make_batch(&ds.records, &sampler.next_batch(), m.input_dim);
        let plain = common::graph_free_ce(&params, &spec, &batch);
        bitwise &= entry.loss.total.to_bits() == plain.to_bits();
        let out = gradient(&params, &spec, Some(&bank), &batch, &m.observed_classes, tc).unwrap();
        params.update_flat(|i, p| p - tc.learning_rate * out.grad[i]);
        bank = out.bank;
    }
    bitwise &= params == model.params;
    verdict(
        9,
        na && printed && bitwise,
        format!(
            "gamma=0: A_m/H not applicable {na}, A_o {:.2}; L=0 & beta=0 bit-identical over {} steps: {bitwise}",
            report.a_o.unwrap_or(f64::NAN),
            log.len()
        ),
    )
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "iterations = 100\nlog = train.tsv\n").unwrap();
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let steps: Vec<Vec<String>> = vec![
            vec!["generate".into(), "--out".into(), format!("data{tag}.txt")],
            vec!["split".into(), "--input".into(), format!("data{tag}.txt"), "--missing-rate".into(), "0.5".into(), "--out".into(), format!("shift{tag}.txt")],
            vec!["train".into(), "--data".into(), format!("shift{tag}.txt"), "--log".into(), format!("log{tag}.tsv"), "--out".into(), format!("m{tag}.ckpt")],
            vec!["eval".into(), "--checkpoint".into(), format!("m{tag}.ckpt"), "--data".into(), format!("shift{tag}.txt"), "--out".into(), format!("r{tag}.txt")],
            vec!["gradcheck".into(), "--out".into(), format!("g{tag}.txt")],
            vec!["sweep".into(), "--seeds".into(), "2".into(), "--vary".into(), "L=0,1".into(), "--out".into(), format!("s{tag}.tsv")],
        ];
        for args in steps {
            let status = Command::new(env!("CARGO_BIN_EXE_mtcs"))
                .current_dir(d)
                .args(["--config", "run.cfg", "--seed", "7"])
                .args(&args)
                .output()
                .unwrap();
            assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
        }
        ["data", "shift", "log", "m", "r", "g", "s"]
            .iter()
            .map(|stem| {
                let ext = match *stem {
                    "log" | "s" => "tsv",
                    "m" => "ckpt",
                    _ => "txt",
                };
                std::fs::read(Path::new(d).join(format!("{stem}{tag}.{ext}"))).unwrap()
            })
            .collect()
    };
    let a = run("a");
    let b = run("b");
    let same = a == b;
    verdict(10, same, format!("generate/split/train/eval/gradcheck/sweep outputs byte-identical: {same}"))
}

#[test]
fn acceptance() {
    let mut runs = Runs { cells: HashMap::new(), times: HashMap::new() };
    let verdicts = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(&mut runs),
        criterion_7(&mut runs),
        criterion_8(&mut runs),
        criterion_9(),
        criterion_10(),
    ];
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    let unexpected: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass && !KNOWN_UNMET.contains(&v.id))
        .map(|v| format!("{}: {}", v.id, v.detail))
        .collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:#?}");
}
