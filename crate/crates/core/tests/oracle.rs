use natcf::oracle::{grid_search, grid_solve, GridSpec, OracleError};
use natcf::toys::toy_scm;
use natcf::*;

fn id(s: &str) -> VariableId {
    VariableId::from(s)
}

fn cfg(epsilon: f64) -> FioConfig {
    FioConfig { epsilon, ..FioConfig::default() }
}

#[test]
fn factual_change_is_grid_adjacent() {
    let scm = toy_scm(2);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let ev = scm.sample(1, 3).row_assignment(0);
    let out = grid_search(&scm, &ev, &ChangeRequest::new("n2", ev[&id("n2")]), &stats, &cfg(1e-2), &GridSpec::default()).unwrap();
    assert!(out.result.is_feasible());
    assert!(out.result.distance <= out.cell_bound, "{} > {}", out.result.distance, out.cell_bound);
    assert_eq!(out.result.cf_ancestors[&id("n2")], ev[&id("n2")]);
}

#[test]
fn unreachable_value_is_infeasible() {
    let scm = toy_scm(2);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let ev = scm.sample(1, 3).row_assignment(0);
    let out = grid_search(&scm, &ev, &ChangeRequest::new("n2", 3.0), &stats, &cfg(1e-2), &GridSpec::default()).unwrap();
    assert_eq!(out.result.status, FioStatus::Infeasible);
    assert_eq!(out.feasible_points, 0);
    assert!(out.result.penalty_residual > 0.0);
    assert_eq!(out.result.cf_ancestors[&id("n2")], 3.0);
}

#[test]
fn bad_grids_are_rejected() {
    let scm = toy_scm(3);
    let stats = StandardizationStats::unit(scm.graph().nodes());
    let ev = scm.sample(1, 0).row_assignment(0);
    let ch = ChangeRequest::new("n4", 0.0);
    let small = GridSpec { max_dims: 2, ..GridSpec::default() };
    assert!(matches!(grid_solve(&scm, &ev, &ch, &stats, &cfg(1e-2), &small), Err(OracleError::TooManyDimensions { got: 3, max: 2 })));
    let even = GridSpec { resolution: 400, ..GridSpec::default() };
    assert!(matches!(grid_solve(&scm, &ev, &ch, &stats, &cfg(1e-2), &even), Err(OracleError::BadResolution(400))));
}

#[test]
fn refinement_is_stable() {
    let scm = toy_scm(1);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let data = scm.sample(20, 5);
    for r in 0..data.n_rows() {
        let ev = data.row_assignment(r);
        let ch = ChangeRequest::new("n3", data.row((r + 7) % 20)[2]);
        let coarse = grid_search(&scm, &ev, &ch, &stats, &cfg(1e-2), &GridSpec { resolution: 101, max_dims: 3 }).unwrap();
        let fine = grid_search(&scm, &ev, &ch, &stats, &cfg(1e-2), &GridSpec { resolution: 201, max_dims: 3 }).unwrap();
        assert_eq!(coarse.result.status, fine.result.status);
        if fine.result.is_feasible() {
            assert!(fine.result.distance <= coarse.result.distance + coarse.cell_bound);
            assert!(coarse.result.distance <= fine.result.distance + coarse.cell_bound);
        }
    }
}

#[test]
fn oracle_is_deterministic_and_seed_free() {
    let scm = toy_scm(1);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let ev = scm.sample(1, 2).row_assignment(0);
    let ch = ChangeRequest::new("n3", 1.1);
    let grid = GridSpec { resolution: 101, max_dims: 2 };
    let a = grid_search(&scm, &ev, &ch, &stats, &cfg(1e-2), &grid).unwrap();
    let b = grid_search(&scm, &ev, &ch, &stats, &FioConfig { seed: 99, restarts: 5, ..cfg(1e-2) }, &grid).unwrap();
    assert_eq!(a, b);
}

#[test]
fn solver_matches_oracle_in_two_dimensions() {
    let scm = toy_scm(1);
    let stats = column_stats(&scm.sample(5_000, 1)).unwrap();
    let data = scm.sample(30, 6);
    let c = FioConfig { restarts: 4, ..cfg(1e-2) };
    for r in 0..data.n_rows() {
        let ev = data.row_assignment(r);
        let ch = ChangeRequest::new("n3", data.row((r + 11) % 30)[2]);
        let o = grid_search(&scm, &ev, &ch, &stats, &c, &GridSpec { resolution: 201, max_dims: 2 }).unwrap();
        let s = solve(&scm, &ev, &ch, &stats, &c).unwrap();
        assert_eq!(s.status, o.result.status, "row {r}");
        if s.is_feasible() {
            assert!(s.distance <= o.result.distance + 1e-3 + o.cell_bound, "row {r}: {} vs {}", s.distance, o.result.distance);
        }
    }
}
