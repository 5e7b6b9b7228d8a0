use rlhd_core::analytic_reference::{closed_index_bruteforce, interaction_index_bruteforce, IndexSet};
use rlhd_core::bootstrap::BootstrapConfig;
use rlhd_core::estimators::{estimate, EstimateKind, EstimatorPlan};
use rlhd_core::experiments::{evaluated_family, rmse_from_samples, rmse_study};
use rlhd_core::models::{brute_force_indices, builtin, BuiltinModel};
use rlhd_core::Error;

#[test]
fn large_designs_recover_modified_g() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let truth = model.analytic_indices().unwrap();
    for seed in [11, 12] {
        let (fam, out) = evaluated_family(&model, 10_000, seed, true).unwrap();
        for i in 0..3 {
            for kind in [EstimateKind::Oracle2Pooled, EstimateKind::Oracle1Triple] {
                let v = estimate(&fam, &out, kind, i).unwrap().value;
                assert!((v - truth.first_order[i]).abs() < 0.02, "{kind} S{}: {v}", i + 1);
            }
            // simple oracle1 is noisier on the dominant input
            let v = estimate(&fam, &out, EstimateKind::Oracle1, i).unwrap().value;
            assert!((v - truth.first_order[i]).abs() < 0.05, "oracle1 S{}: {v}", i + 1);
            let t = estimate(&fam, &out, EstimateKind::TotalOrder, i).unwrap().value;
            assert!((t - truth.total_order[i]).abs() < 0.03, "total S{}: {t}", i + 1);
        }
    }
}

#[test]
fn g_sobol_total_index() {
    let model = builtin("g-sobol-d10-a0").unwrap();
    let (fam, out) = evaluated_family(&model, 10_000, 5, true).unwrap();
    for i in [0, 4, 9] {
        let t = estimate(&fam, &out, EstimateKind::TotalOrder, i).unwrap().value;
        assert!((t - 0.2649).abs() < 0.03, "S{}^T = {t}", i + 1);
    }
}

#[test]
fn additive_total_equals_first_order() {
    let model = builtin("additive-d3").unwrap();
    let (fam, out) = evaluated_family(&model, 10_000, 8, true).unwrap();
    for i in 0..3 {
        let s = estimate(&fam, &out, EstimateKind::Oracle2Pooled, i).unwrap().value;
        let t = estimate(&fam, &out, EstimateKind::TotalOrder, i).unwrap().value;
        assert!((s - t).abs() < 0.02, "{s} vs {t}");
        assert!((s - 1.0 / 3.0).abs() < 0.02);
    }
}

#[test]
fn triple_is_mean_of_components() {
    let model = builtin("mod-g-lin-eps0.10").unwrap();
    let (fam, out) = evaluated_family(&model, 200, 3, true).unwrap();
    for i in 0..10 {
        for kind in [EstimateKind::Oracle1Triple, EstimateKind::Oracle2Triple, EstimateKind::Oracle2Averaged] {
            let e = estimate(&fam, &out, kind, i).unwrap();
            let mean = e.components.iter().sum::<f64>() / e.components.len() as f64;
            assert!((e.value - mean).abs() <= 1e-15, "{kind}: {} vs {mean}", e.value);
        }
    }
}

#[test]
fn averaged_oracle2_partners() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let (fam, out) = evaluated_family(&model, 64, 2, true).unwrap();
    let single = EstimatorPlan::averaged_oracle2(&fam, &out, 1, &["W"]).unwrap().evaluate().unwrap();
    let plain = estimate(&fam, &out, EstimateKind::Oracle2Pooled, 1).unwrap();
    assert_eq!(single.value, plain.value);
    let two = EstimatorPlan::averaged_oracle2(&fam, &out, 1, &["W", "Z1"]).unwrap().evaluate().unwrap();
    assert_eq!(two.evaluations_charged, 3 * 64);
    for bad in [&["X"][..], &["W", "W"], &["Q"]] {
        assert!(matches!(EstimatorPlan::averaged_oracle2(&fam, &out, 1, bad), Err(Error::Invariant(_))));
    }
}

#[test]
fn missing_z_is_a_precondition_error() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let (fam, out) = evaluated_family(&model, 16, 2, false).unwrap();
    assert!(matches!(estimate(&fam, &out, EstimateKind::Oracle1Triple, 0), Err(Error::Precondition(_))));
}

#[test]
fn error_shrinks_when_n_quadruples() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let truth = model.analytic_indices().unwrap();
    let median_error = |n: usize, kind: EstimateKind| {
        let mut errs: Vec<f64> = (0..50)
            .flat_map(|r| {
                let (fam, out) = evaluated_family(&model, n, 1000 + r, true).unwrap();
                let target = if kind == EstimateKind::TotalOrder { &truth.total_order } else { &truth.first_order };
                (0..3)
                    .map(|i| (estimate(&fam, &out, kind, i).unwrap().value - target[i]).abs())
                    .collect::<Vec<_>>()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        errs[errs.len() / 2]
    };
    for kind in EstimateKind::ALL {
        let (small, big) = (median_error(500, kind), median_error(2000, kind));
        assert!(big < small, "{kind}: {big} !< {small}");
    }
}

#[test]
fn triple_beats_simple_oracle1_on_a_small_index() {
    let rows = rmse_study(
        "mod-g-lin-eps0.10",
        &[EstimateKind::Oracle1, EstimateKind::Oracle1Triple],
        &[600],
        1000,
        77,
    )
    .unwrap();
    let pick = |k| rows.iter().find(|r| r.kind == k && r.input == 6).unwrap().rmse;
    assert!(pick(EstimateKind::Oracle1Triple) < pick(EstimateKind::Oracle1));
}

#[test]
fn averaged_oracle2_beats_simple_on_g_sobol() {
    let model = builtin("g-sobol-d10-a0").unwrap();
    let truth = model.analytic_indices().unwrap().first_order;
    let mut simple = Vec::new();
    let mut averaged = Vec::new();
    for r in 0..1000 {
        let (fam, out) = evaluated_family(&model, 200, 500 + r, true).unwrap();
        simple.push((0..10).map(|i| estimate(&fam, &out, EstimateKind::Oracle2Pooled, i).unwrap().value).collect());
        averaged.push((0..10).map(|i| estimate(&fam, &out, EstimateKind::Oracle2Averaged, i).unwrap().value).collect());
    }
    let (s, a) = (rmse_from_samples(&simple, &truth), rmse_from_samples(&averaged, &truth));
    for i in 0..10 {
        assert!(a[i] < s[i], "S{}: {} !< {}", i + 1, a[i], s[i]);
    }
}

#[test]
fn rmse_study_is_stable_across_seeds() {
    let kinds = [EstimateKind::Oracle2Pooled];
    let a = rmse_study("mod-g-19-9-4", &kinds, &[600], 200, 1).unwrap();
    let b = rmse_study("mod-g-19-9-4", &kinds, &[600], 200, 2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.rmse - y.rmse).abs() <= 0.25 * x.rmse.max(y.rmse), "{} vs {}", x.rmse, y.rmse);
    }
}

#[test]
fn bootstrap_interval_brackets_estimate() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let (fam, out) = evaluated_family(&model, 200, 9, true).unwrap();
    let cfg = BootstrapConfig::default();
    let plan = EstimatorPlan::for_family(&fam, &out, EstimateKind::Oracle1Triple, 2).unwrap();
    let e = plan.evaluate_with_ci(&cfg).unwrap();
    let ci = e.ci.unwrap();
    assert_eq!((ci.level, ci.replicates), (0.95, 1000));
    assert!(ci.lower < e.value && e.value < ci.upper);
    assert_eq!(plan.evaluate_with_ci(&cfg).unwrap(), e);
}

#[test]
fn brute_force_agrees_with_closed_forms() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let truth = model.analytic_indices().unwrap();
    let bf = brute_force_indices(&model, 200_000, 4).unwrap();
    for i in 0..3 {
        let (s, t) = (bf.first_order[i], bf.total_order[i]);
        assert!((s.value - truth.first_order[i]).abs() < 4.0 * s.std_error + 1e-3, "{s:?}");
        assert!((t.value - truth.total_order[i]).abs() < 4.0 * t.std_error + 1e-3, "{t:?}");
    }
    let pair = IndexSet::new(vec![0, 1], 3).unwrap();
    let inter = interaction_index_bruteforce(&model, &pair, 200_000, 5).unwrap();
    assert!(inter.value.abs() < 0.005 + 3.0 * inter.std_error, "{inter:?}");
}

#[test]
fn additive_closed_index_and_interactions() {
    let model = builtin("additive-d3").unwrap();
    let u = IndexSet::new(vec![0, 1], 3).unwrap();
    let closed = closed_index_bruteforce(&model, &u, 100_000, 6).unwrap();
    assert!((closed.value - 2.0 / 3.0).abs() < 0.01, "{closed:?}");
    let inter = interaction_index_bruteforce(&model, &u, 100_000, 7).unwrap();
    assert!(inter.value.abs() <= 2.0 * inter.std_error + 1e-12, "{inter:?}");
}

#[test]
fn two_input_closure() {
    let u = IndexSet::new(vec![0, 1], 2).unwrap();
    for model in [BuiltinModel::product2(), builtin("g-sobol-d2-a0").unwrap()] {
        let inter = interaction_index_bruteforce(&model, &u, 200_000, 8).unwrap();
        let s1 = closed_index_bruteforce(&model, &IndexSet::new(vec![0], 2).unwrap(), 200_000, 8).unwrap();
        let s2 = closed_index_bruteforce(&model, &IndexSet::new(vec![1], 2).unwrap(), 200_000, 8).unwrap();
        let se = (inter.std_error.powi(2) + s1.std_error.powi(2) + s2.std_error.powi(2)).sqrt();
        assert!((s1.value + s2.value + inter.value - 1.0).abs() < 3.0 * se + 1e-9);
        let analytic = model.analytic_indices().unwrap().first_order[0];
        assert!((inter.value - (1.0 - 2.0 * analytic)).abs() < 4.0 * inter.std_error + 0.01, "{inter:?}");
    }
}

#[test]
fn total_order_matches_complement_closed_index() {
    let model = builtin("mod-g-19-9-4").unwrap();
    let (fam, out) = evaluated_family(&model, 100_000, 10, true).unwrap();
    for i in 0..3 {
        let rest: Vec<usize> = (0..3).filter(|&k| k != i).collect();
        let c = closed_index_bruteforce(&model, &IndexSet::new(rest, 3).unwrap(), 200_000, 11).unwrap();
        let t = estimate(&fam, &out, EstimateKind::TotalOrder, i).unwrap().value;
        assert!((t - (1.0 - c.value)).abs() < 3.0 * c.std_error + 0.01, "{t} vs {c:?}");
    }
}
