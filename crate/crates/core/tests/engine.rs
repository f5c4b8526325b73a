use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use natcf::naturalness::is_epsilon_natural;
use natcf::toys::toy_scm;
use natcf::*;

fn id(s: &str) -> VariableId {
    VariableId::from(s)
}

const SIN_PI_8: f64 = 0.382_683_432_365_089_8;

#[test]
fn nonbacktracking_hand_examples() {
    let scm = toy_scm(1);
    let zero = scm.to_assignment(&[0.0, 0.0, 0.0]);
    let p = nonbacktracking_cf(&scm, &zero, &ChangeRequest::new("n2", 1.0)).unwrap();
    assert_eq!(p.kind, CounterfactualKind::NonBacktracking);
    assert!(p.fio.is_none());
    let p = p.point.unwrap();
    assert_eq!((p[&id("n1")], p[&id("n2")]), (0.0, 1.0));
    assert_abs_diff_eq!(p[&id("n3")], SIN_PI_8, epsilon = 1e-12);

    let ev = scm.to_assignment(&[1.0, -1.0, SIN_PI_8]);
    let p = nonbacktracking_cf(&scm, &ev, &ChangeRequest::new("n2", 0.0)).unwrap().point.unwrap();
    assert_abs_diff_eq!(p[&id("n3")], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-9);
    assert_eq!(p[&id("n1")], 1.0);
}

#[test]
fn null_changes_return_the_evidence() {
    let scm = toy_scm(3);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let data = scm.sample(20, 4);
    for r in 0..data.n_rows() {
        let ev = data.row_assignment(r);
        let ch = ChangeRequest::new("n2", ev[&id("n2")]);
        assert_eq!(nonbacktracking_cf(&scm, &ev, &ch).unwrap().point.unwrap(), ev);
        let nb = BTreeSet::from([id("n2")]);
        if is_epsilon_natural(&scm, &ev, &nb, NaturalnessMeasure::ConditionalCdf, 1e-4).unwrap() {
            let nat = natural_cf(&scm, &ev, &ch, &stats, &FioConfig::default()).unwrap();
            assert_eq!(nat.point.unwrap(), ev);
        }
    }
}

#[test]
fn natural_answers_are_consistent() {
    let scm = toy_scm(3);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let data = scm.sample(40, 5);
    let cfg = FioConfig::default();
    for r in 0..data.n_rows() {
        let ev = data.row_assignment(r);
        let ch = ChangeRequest::new("n3", data.row((r + 3) % 40)[2] * 1.5);
        let ans = natural_cf(&scm, &ev, &ch, &stats, &cfg).unwrap();
        assert_eq!(ans.kind, CounterfactualKind::Natural);
        let fio = ans.fio.unwrap();
        let Some(p) = ans.point else {
            assert!(!fio.is_feasible());
            continue;
        };
        assert_eq!(p[&id("n3")], ch.value);
        for (k, v) in fio.cf_ancestors.iter() {
            assert!((p[k] - v).abs() <= 1e-9, "{k}");
        }
        let an = BTreeSet::from([id("n3")]);
        assert!(is_epsilon_natural(&scm, &p, &an, cfg.measure, cfg.epsilon).unwrap());
        // non-descendants of the LBF set keep their factual values
        let g = scm.graph();
        let mut touched = vec![false; g.len()];
        for c in fio.lbf_targets.keys() {
            touched[g.index_of(c).unwrap()] = true;
            for (i, d) in g.descendant_mask(g.index_of(c).unwrap()).into_iter().enumerate() {
                touched[i] |= d;
            }
        }
        for (i, v) in g.nodes().iter().enumerate() {
            if !touched[i] {
                assert_eq!(p[v], ev[v], "{v}");
            }
        }
    }
}

#[test]
fn infeasible_answers_carry_no_point() {
    let scm = toy_scm(2);
    let ev = scm.sample(1, 0).row_assignment(0);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let ans = natural_cf(&scm, &ev, &ChangeRequest::new("n2", 3.0), &stats, &FioConfig { epsilon: 1e-2, ..FioConfig::default() })
        .unwrap();
    assert!(ans.point.is_none());
    assert_eq!(ans.fio.unwrap().status, FioStatus::Infeasible);
}

/// The reference query backtracks only once the `n2` noise it needs falls
/// outside the box: `u2 = 3(0.19 - 0.59) = -1.2`, CDF about 0.115.
#[test]
fn reference_query_backtracks_under_a_tight_box() {
    let scm = toy_scm(1);
    let (_, train, _) = bench::gen_toy(1, 10_000, 0).unwrap();
    let fitted = fit_location_scale(&train, scm.graph(), &FitConfig::default()).unwrap();
    let stats = column_stats(&train).unwrap();
    let ev = scm.to_assignment(&[-0.59, 0.71, -0.37]);
    let ch = ChangeRequest::new("n2", 0.19);

    let loose = natural_cf(&scm, &ev, &ch, &stats, &FioConfig::default()).unwrap();
    assert_eq!(loose.fio.unwrap().lbf_targets.len(), 1);

    let cfg = FioConfig { epsilon: 0.2, ..FioConfig::default() };
    let truth = natural_cf(&scm, &ev, &ch, &stats, &cfg).unwrap();
    let lbf = truth.fio.unwrap().lbf_targets;
    assert!(lbf.contains_key(&id("n1")));
    let iv = Intervention::new(lbf).unwrap();
    let true_nat = scm.counterfactual(&ev, &iv).unwrap()[&id("n3")];
    let fit_nat = fitted.counterfactual(&ev, &iv).unwrap()[&id("n3")];
    let true_nb = nonbacktracking_cf(&scm, &ev, &ch).unwrap().point.unwrap()[&id("n3")];
    let fit_nb = nonbacktracking_cf(&fitted, &ev, &ch).unwrap().point.unwrap()[&id("n3")];
    assert!((fit_nat - true_nat).abs() <= (fit_nb - true_nb).abs() + 1e-3, "{fit_nat} {true_nat} {fit_nb} {true_nb}");
}
