//! Shared fixtures for the benchmark suite.

use gridstore::market::{LoadGrid, PriceCurve};
use gridstore::policy::{solve_policy, PolicySolution, SolveOptions, StorageGrid};

/// The reduced-form reference system at a given storage capacity.
pub fn linear_case(capacity: f64, points: usize) -> (PriceCurve, StorageGrid, LoadGrid) {
    let curve = PriceCurve::affine(20.0, 1.5).expect("positive slope");
    let grid =
        StorageGrid::uniform(0.0, capacity, points, 1.0, 0.999).expect("valid grid");
    let loads = LoadGrid::uniform(0.0, 100.0, points).expect("valid loads");
    (curve, grid, loads)
}

/// Solve the reference system once, for benches that start from a solution.
pub fn solved_linear_case(capacity: f64, points: usize) -> PolicySolution {
    let (curve, grid, loads) = linear_case(capacity, points);
    solve_policy(&curve, &grid, &loads, &SolveOptions::default()).expect("converges")
}
