use mtcs::datagen::{missing_rate, random_assignment, validate_assignment, DatasetManifest};
use mtcs::eval::harmonic_mean;
use mtcs::graph::{assemble, class_task_edges, instance_edges, masked_topk, topk_neighbors, EdgeParams, NodeBank, DEFAULT_DECAY};
use mtcs::linalg::entropy;
use mtcs::objective::cross_entropy;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

prop_compose! {
    fn graph_inputs()(t in 1usize..4, c in 1usize..5, b in 1usize..4, d in 1usize..4)
        (tasks in matrix(t, d), classes in matrix(c, d), inst in matrix(b, d),
         w in prop::collection::vec(-2.0..2.0f64, 2 * d), bias in -1.0..1.0f64,
         ids in prop::collection::vec(0..t, b), alpha in 0.3..3.0f64)
        -> (NodeBank, EdgeParams, Array2<f64>, Vec<usize>) {
        let d = tasks.ncols();
        let mut bank = NodeBank::new(tasks.nrows(), classes.nrows(), d, DEFAULT_DECAY);
        bank.task_nodes = tasks;
        bank.class_nodes = classes;
        let p = EdgeParams {
            task_weight: w[..d].to_vec(),
            task_bias: bias,
            class_weight: w[d..].to_vec(),
            class_bias: -bias,
            alpha_task: alpha,
            alpha_class: alpha,
            alpha_pair: alpha,
        };
        (bank, p, inst, ids)
    }
}

proptest! {
    #[test]
    fn assembled_graph_invariants((bank, p, inst, ids) in graph_inputs()) {
        let g = assemble(&bank, &p, inst.view(), &ids).unwrap();
        let (t, c) = (bank.task_nodes.nrows(), bank.class_nodes.nrows());
        let n = g.num_nodes();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(g.adjacency[[i, j]], g.adjacency[[j, i]]);
            }
        }
        for i in t + c..n {
            for j in t + c..n {
                prop_assert_eq!(g.adjacency[[i, j]], if i == j { 1.0 } else { 0.0 });
            }
            let to_tasks: f64 = (0..t).map(|j| g.adjacency[[i, j]]).sum();
            let to_classes: f64 = (t..t + c).map(|j| g.adjacency[[i, j]]).sum();
            prop_assert!((to_tasks - 1.0).abs() < 1e-9 && (to_classes - 1.0).abs() < 1e-9);
        }
        for ci in 0..c {
            let s: f64 = (0..t).map(|j| g.adjacency[[t + ci, j]]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        for i in 0..t + c {
            for j in 0..t + c {
                let same_family = (i < t) == (j < t);
                if same_family {
                    prop_assert!(g.adjacency[[i, j]] > 0.0 && g.adjacency[[i, j]] < 1.0);
                }
            }
        }
    }

    #[test]
    fn neighborhoods_respect_mask((bank, p, inst, ids) in graph_inputs(), k in 1usize..12) {
        let g = assemble(&bank, &p, inst.view(), &ids).unwrap();
        let shared = bank.task_nodes.nrows() + bank.class_nodes.nrows();
        let hoods = g.neighborhoods(Some(k)).unwrap();
        for (i, h) in hoods.iter().enumerate() {
            prop_assert!(!h.is_empty() && h.len() <= k);
            prop_assert!(h.windows(2).all(|w| w[0] < w[1]));
            for &j in h {
                prop_assert!(j < shared || (i >= shared && j == i));
            }
        }
        let full = g.neighborhoods(None).unwrap();
        for (i, h) in full.iter().enumerate() {
            let expect = if i < shared { shared } else { shared + 1 };
            prop_assert_eq!(h.len(), expect);
        }
    }

    #[test]
    fn topk_picks_largest(a in matrix(5, 5), k in 1usize..=5) {
        let hoods = topk_neighbors(&a, k).unwrap();
        let all = Array2::from_elem((5, 5), true);
        prop_assert_eq!(&hoods, &masked_topk(&a, &all, k));
        for (i, h) in hoods.iter().enumerate() {
            prop_assert_eq!(h.len(), k);
            let min_in = h.iter().map(|&j| a[[i, j]]).fold(f64::INFINITY, f64::min);
            for j in 0..5 {
                if !h.contains(&j) {
                    prop_assert!(a[[i, j]] <= min_in);
                }
            }
        }
    }

    #[test]
    fn softmax_edges_shift_invariant(e in prop::collection::vec(-2.0..2.0f64, 3), nodes in matrix(4, 3), s in -5.0..5.0f64) {
        let e = ndarray::Array1::from(e);
        let w = instance_edges(e.view(), nodes.view()).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Adding a multiple of e to every node shifts every score by the same amount.
        let shifted = &nodes + &(&e * s).insert_axis(ndarray::Axis(0));
        let w2 = instance_edges(e.view(), shifted.view()).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_bounds(raw in prop::collection::vec(0.0..1.0f64, 1..8)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn class_task_rows_on_simplex(k in matrix(4, 3), v in matrix(3, 3), a in 0.1..5.0f64) {
        let rows = class_task_edges(k.view(), v.view(), a);
        for r in rows.rows() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn cross_entropy_shift_invariant(z in prop::collection::vec(-10.0..10.0f64, 2..6), s in -50.0..50.0f64, pick in 0usize..6) {
        let label = pick % z.len();
        let shifted: Vec<f64> = z.iter().map(|x| x + s).collect();
        prop_assert!((cross_entropy(&z, label) - cross_entropy(&shifted, label)).abs() < 1e-10);
    }

    #[test]
    fn random_assignments_cover_and_hit_rate(t in 1usize..6, c in 1usize..10, gamma in 0.0..0.95f64, seed in 0u64..50) {
        if let Ok(sets) = random_assignment(t, c, gamma, seed) {
            prop_assert!(validate_assignment(t, c, &sets).is_ok());
            let m = DatasetManifest {
                num_tasks: t,
                num_classes: c,
                input_dim: 1,
                class_names: (0..c).map(|i| i.to_string()).collect(),
                observed_classes: sets.clone(),
            };
            let g = missing_rate(&m);
            prop_assert!((0.0..1.0).contains(&g));
            let per_task = (c as f64 * (1.0 - gamma)).round() as usize;
            prop_assert!(sets.iter().all(|s| s.len() == per_task));
        }
    }

    #[test]
    fn harmonic_mean_properties(a in 0.0..100.0f64, b in 0.0..100.0f64) {
        let h = harmonic_mean(a, b);
        prop_assert_eq!(h, harmonic_mean(b, a));
        prop_assert!(h <= 2.0 * a.min(b) + 1e-12);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&h));
    }
}
