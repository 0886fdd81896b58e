mod support;

use support::{check_grid_properties, dense_fd_max_error, oracle_neighbors, oracle_round};
use vtrain_core::fpround::{Grid, RoundingDirection, RoundingParams};

#[test]
fn grid_properties_hold_on_a_million_values_per_precision() {
    for (bits, seed) in [(26, 1), (29, 2), (32, 3)] {
        let report = check_grid_properties(bits, 1_000_000, seed).unwrap();
        assert_eq!(report.values, 1_000_000);
        // Most perturbations stay inside the binade and get checked.
        assert!(
            report.sync_pairs > 900_000,
            "only {} sync pairs",
            report.sync_pairs
        );
    }
}

#[test]
fn oracle_agrees_with_hand_examples() {
    let e = 2f64.powi(-23);
    assert_eq!(oracle_round(1.0 + 2f64.powi(-24), 32), 1.0);
    assert_eq!(oracle_neighbors(1.0 + 0.5 * e, 32), (1.0, 1.0 + e));
    assert_eq!(oracle_neighbors(-(1.0 + 0.5 * e), 32), (-(1.0 + e), -1.0));
}

#[test]
fn direction_and_rev_examples() {
    let e = 2f64.powi(-23);
    let grid = Grid::new(32).unwrap();
    let p = RoundingParams::new(grid, 0.25 * e).unwrap();
    // Distance to the grid point above is 0.4 e, past the threshold.
    assert_eq!(p.direction(1.0 + 0.6 * e).unwrap(), RoundingDirection::Up);
    // Exactly at the threshold is not past it.
    assert_eq!(
        p.direction(1.0 + 0.75 * e).unwrap(),
        RoundingDirection::Ignore
    );
    assert_eq!(
        grid.reverse(1.0 + 0.4 * e, RoundingDirection::Up)
            .unwrap()
            .get(),
        1.0 + e
    );
    assert_eq!(
        grid.reverse(1.0 + 0.6 * e, RoundingDirection::Up)
            .unwrap()
            .get(),
        1.0 + e
    );
}

#[test]
fn coarser_grids_are_subsets() {
    let fine = Grid::new(32).unwrap();
    let mut rng = vtrain_core::simnet::Rng::new(9);
    for _ in 0..100_000 {
        let x = rng.uniform(-100.0, 100.0);
        for bits in [26, 29] {
            let coarse = Grid::new(bits).unwrap().round(x).unwrap().get();
            assert_eq!(fine.round(coarse).unwrap().get(), coarse);
        }
    }
}

#[test]
fn dense_gradients_match_finite_differences() {
    let worst = dense_fd_max_error(100, 17);
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}
