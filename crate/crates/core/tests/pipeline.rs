use hte_match::assess::{cross_validate_lasso, holdout_assess, make_folds, match_then_split, Method, MethodConfig};
use hte_match::data::{read_dataset, split_by_treatment, write_dataset, Schema};
use hte_match::distance::{mahalanobis_matrix, proximity_for_dataset, DistanceMatrix};
use hte_match::flow::{cost_curve, mcf_exact_pairs, min_avg_match};
use hte_match::forest::{fit_forest, ForestParams};
use hte_match::harness::{run_experiment, ExperimentConfig};
use hte_match::lasso::{default_lambdas, fit_joint_lasso};
use hte_match::prune::{components, is_star_forest, prune};
use hte_match::rng::stream;
use hte_match::synth::{generate_scenario, Setting};
use hte_match::{MatchSpec, Matrix};
use proptest::prelude::*;

fn forest(trees: usize, seed: u64) -> ForestParams {
    ForestParams {
        n_trees: trees,
        seed,
        ..ForestParams::default()
    }
}

#[test]
fn dataset_csv_round_trip() {
    let (d, _) = generate_scenario(&Setting::IV.config(50, 2)).unwrap();
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice(), &Schema::default()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn distance_csv_round_trip() {
    let (d, _) = generate_scenario(&Setting::I.config(40, 3)).unwrap();
    let m = mahalanobis_matrix(&d).unwrap();
    let mut buf = Vec::new();
    m.write_csv(&mut buf).unwrap();
    let back = DistanceMatrix::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.values(), m.values());
    assert_eq!(back.treated_ids(), m.treated_ids());
    assert_eq!(back.control_ids(), m.control_ids());
}

#[test]
fn proximity_match_prune_folds() {
    let (d, _) = generate_scenario(&Setting::I.config(200, 4)).unwrap();
    let (_, c) = split_by_treatment(&d);
    let controls = d.subset(&c);
    let f = fit_forest(controls.x(), controls.y(), &forest(100, 1)).unwrap();
    let dist = proximity_for_dataset(&f, &d).unwrap();
    assert!(dist.values().as_slice().iter().all(|&v| (0.0..=100.0).contains(&v)));
    let spec = MatchSpec::default();
    let sol = min_avg_match(&dist, &spec).unwrap();
    assert!(sol.matching.satisfies(&spec));
    let pruned = prune(&sol.matching);
    assert!(is_star_forest(&pruned));
    let folds = make_folds(&pruned, 10, &mut stream(9, 0)).unwrap();
    for p in pruned.pairs() {
        assert_eq!(folds.treated[p.treated], folds.control[p.control]);
    }
    let sizes = folds.sizes();
    let largest = components(&pruned).iter().map(|(t, c)| t.len() + c.len()).max().unwrap();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= largest);
}

#[test]
fn exact_pairs_follow_the_cost_curve() {
    let (d, _) = generate_scenario(&Setting::I.config(60, 5)).unwrap();
    let dist = mahalanobis_matrix(&d).unwrap();
    let spec = MatchSpec::default();
    let curve = cost_curve(&dist, &spec).unwrap();
    for (k, cost) in curve.iter() {
        let (total, m) = mcf_exact_pairs(&dist, &spec, k).unwrap();
        assert_eq!(m.len(), k);
        assert!((total - cost).abs() < 1e-7 * cost.max(1.0));
    }
    assert!(mcf_exact_pairs(&dist, &spec, curve.k_max() + 1).is_err());
}

#[test]
fn holdout_with_true_effect_beats_zero_effect() {
    let (d, truth) = generate_scenario(&Setting::I.config(400, 6)).unwrap();
    let mut cfg = MethodConfig::new(Method::Combo, 2, 1);
    cfg.forest = forest(200, 0);
    let good = holdout_assess(&|x| truth.tau(x), &d, &cfg).unwrap();
    let bad = holdout_assess(&|_| 0.0, &d, &cfg).unwrap();
    assert!(good < bad, "{good} vs {bad}");
}

#[test]
fn cross_validation_curves_track_the_oracle() {
    let (d, truth) = generate_scenario(&Setting::I.config(200, 8)).unwrap();
    let grid = default_lambdas();
    let mut cfg = MethodConfig::new(Method::Combo, 10, 2);
    cfg.forest = forest(200, 0);
    let report = cross_validate_lasso(&d, &grid, &cfg).unwrap();
    let path = fit_joint_lasso(&d, &grid).unwrap();
    let oracle: Vec<f64> = path
        .beta
        .iter()
        .map(|b| b.iter().zip(&truth.beta).map(|(a, t)| (a - t).powi(2)).sum())
        .collect();
    // Heavy shrinkage is worse than light shrinkage for both curves.
    assert!(report.errors[0] > report.errors[10]);
    assert!(oracle[0] > oracle[10]);
}

#[test]
fn match_then_split_depends_only_on_control_responses() {
    let (d, _) = generate_scenario(&Setting::II.config(100, 9)).unwrap();
    let (_, c) = split_by_treatment(&d);
    let y_c: Vec<f64> = c.iter().map(|&j| d.y()[j]).collect();
    for method in [Method::Combo, Method::Cvr, Method::Full] {
        let mut cfg = MethodConfig::new(method, 5, 3);
        cfg.forest = forest(50, 0);
        let a = match_then_split(d.x(), d.w(), &y_c, &cfg).unwrap();
        let b = match_then_split(d.x(), d.w(), &y_c, &cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn experiment_invariants() {
    let cfg = ExperimentConfig {
        settings: vec![Setting::III],
        methods: Method::ALL.to_vec(),
        reps: 2,
        seed: 11,
        n: 100,
        forest: forest(50, 0),
        k_folds: Some(5),
        ..ExperimentConfig::default()
    };
    let r = run_experiment(&cfg).unwrap();
    for rep in &r.reps {
        assert!(rep.error.is_none(), "{:?}", rep.error);
        assert_eq!(rep.methods.len() + rep.failures.len(), 5);
        for m in &rep.methods {
            assert!(rep.mse_oracle <= m.mse);
            assert_eq!(m.validation_curve.len(), cfg.lambdas.len());
            assert!(m.validation_curve.iter().all(|v| v.is_finite()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_respect_the_spec(
        n_t in 1usize..9,
        n_c in 1usize..9,
        cells in proptest::collection::vec(0.0f64..10.0, 64),
        big in 1usize..4,
        small in 0usize..2,
    ) {
        let rows: Vec<Vec<f64>> = (0..n_t).map(|i| cells[i * 8..i * 8 + n_c].to_vec()).collect();
        let d = DistanceMatrix::from_rows(&rows).unwrap();
        let spec = MatchSpec::new(small, small, big, big).unwrap();
        if let Ok(sol) = min_avg_match(&d, &spec) {
            prop_assert!(sol.matching.satisfies(&spec));
            let avg = sol.average.unwrap();
            prop_assert!((avg - sol.total / sol.k() as f64).abs() < 1e-9);
            let pruned = prune(&sol.matching);
            prop_assert!(is_star_forest(&pruned));
            prop_assert!(pruned.len() <= sol.matching.len());
        }
    }

    #[test]
    fn forest_leaves_are_consistent(seed in 0u64..1000) {
        let mut rng = stream(seed, 0);
        use rand::Rng as _;
        let x = Matrix::new(30, 2, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<f64> = (0..30).map(|i| x.get(i, 0) * 3.0).collect();
        let f = fit_forest(&x, &y, &forest(5, seed)).unwrap();
        let leaves = f.leaf_assignments(&x).unwrap();
        for l in 0..f.n_trees() {
            for i in 0..30 {
                prop_assert_eq!(leaves.get(i, l), f.trees()[l].leaf(x.row(i)));
            }
        }
    }
}
