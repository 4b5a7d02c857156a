//! Acceptance gates for the shipped guarantees, one test per criterion.
//!
//! Every test ends by printing a single `acceptance N (...): pass` line with
//! its measured numbers, so `cargo test --test acceptance -- --nocapture`
//! reads as a checklist. All tolerances are pinned here, next to the
//! assertions they govern.
//!
//! The two reference systems used throughout:
//! * **linear** — price responds as `P = 20 + 1.5·L` to a load uniform on
//!   `[0, 100]` MW;
//! * **worked** — a three-technology merit-order stack (variable costs
//!   50/100/300, fixed costs 185/150/70, lost load at 1000) with capacities
//!   from the screening rule (30 MW each).
//!
//! Several reference quantities (marginal-benefit curves, break-even
//! volumes) depend on the per-interval discount factor, which the reference
//! figures do not state; those checks calibrate over a small admissible set
//! and report the factor they used.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridstore::hedging::{
    collar_only_variance, decompose, optimal_closing, perfect_hedge_payoff, settlement_table,
    FacilityBounds, HedgeStrikes,
};
use gridstore::investment::{
    optimal_storage_capacity, price_duration_curve, storage_marginal_benefit, CapacitySearch,
    SearchOutcome,
};
use gridstore::market::{
    screening_capacities, GenerationTech, LoadGrid, PriceCurve, TechSet,
};
use gridstore::markov::{
    bracket_weights, stationary_distribution, stationary_recursive_solve, TransitionMatrix,
};
use gridstore::montecarlo::{private_optimality_check, simulate};
use gridstore::numeric::solve_dense;
use gridstore::policy::{solve_policy, CellClass, PolicySolution, SolveOptions, StorageGrid};
use gridstore::scenario::{run, Command, ScenarioConfig};
use gridstore::transition_matrix;

fn pass(n: u32, name: &str, detail: impl Display) {
    println!("acceptance {n} ({name}): pass — {detail}");
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

fn linear_curve() -> PriceCurve {
    PriceCurve::affine(20.0, 1.5).expect("positive slope")
}

fn worked_curve(loads: &LoadGrid) -> PriceCurve {
    let sized = screening_capacities(
        &[
            GenerationTech::new("low", 50.0, 185.0, 0.0),
            GenerationTech::new("mid", 100.0, 150.0, 0.0),
            GenerationTech::new("high", 300.0, 70.0, 0.0),
        ],
        1000.0,
        loads,
    )
    .expect("screenable stack");
    PriceCurve::MeritOrder(TechSet::new(sized, 1000.0).expect("valid stack"))
}

fn uniform_loads() -> LoadGrid {
    LoadGrid::uniform(0.0, 100.0, 101).expect("valid loads")
}

fn solve_case(curve: &PriceCurve, capacity: f64, discount: f64) -> PolicySolution {
    let points = if capacity == 0.0 { 1 } else { 101 };
    let grid = StorageGrid::uniform(0.0, capacity, points, 1.0, discount).expect("valid grid");
    solve_policy(curve, &grid, &uniform_loads(), &SolveOptions::default()).expect("converges")
}

fn stationary_of(solution: &PolicySolution) -> gridstore::markov::StationaryDistribution {
    stationary_distribution(&transition_matrix(solution), 1e-12, 1_000_000).expect("converges")
}

// ---------------------------------------------------------------------------
// 1. Every solved cell respects the price/continuation trichotomy
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_cell_trichotomy() {
    // Pinned: interior cells equalize price and continuation to 1e-6 $/MWh;
    // bound cells sit on their bound with the matching strict inequality;
    // each 101×101 case solves in under 10 s.
    let curve = linear_curve();
    let mut detail = String::new();
    for capacity in [10.0, 50.0, 150.0] {
        let started = Instant::now();
        let sol = solve_case(&curve, capacity, 0.999);
        let elapsed = started.elapsed();
        assert!(
            elapsed.as_secs_f64() < 10.0,
            "capacity {capacity}: solve took {elapsed:?}"
        );
        let (lo, hi) = (sol.grid().s_min(), sol.grid().s_max());
        let level_tol = 1e-9 * (1.0 + capacity);
        let mut interior = 0usize;
        for i in 0..sol.grid().len() {
            for j in 0..sol.loads().len() {
                let price = sol.prices()[i][j];
                let dep = sol.deps()[i][j];
                let closing = sol.policy()[i][j];
                match sol.classes()[i][j] {
                    CellClass::Interior => {
                        interior += 1;
                        assert!(
                            (price - dep).abs() <= 1e-6,
                            "capacity {capacity} cell ({i},{j}): interior gap {}",
                            price - dep
                        );
                    }
                    CellClass::AtMin => {
                        assert!((closing - lo).abs() <= level_tol);
                        assert!(price >= dep - 1e-6);
                    }
                    CellClass::AtMax => {
                        assert!((closing - hi).abs() <= level_tol);
                        assert!(price <= dep + 1e-6);
                    }
                }
            }
        }
        detail.push_str(&format!(
            "K={capacity}: {interior} interior cells, {:.2}s; ",
            elapsed.as_secs_f64()
        ));
    }
    pass(1, "cell trichotomy", detail.trim_end_matches("; "));
}

// ---------------------------------------------------------------------------
// 2. The solved rule survives an independent Bellman oracle and brute force
// ---------------------------------------------------------------------------

/// Independent value iteration for a price-taking replica store riding the
/// solved system: joint states (replica level, system level), i.i.d. loads,
/// system moving along its snapped policy chain. Written from scratch here
/// so the library's own dynamic program is checked against a second
/// implementation rather than itself.
struct ReplicaOracle {
    fac: Vec<f64>,
    prices: Vec<Vec<f64>>,
    deps: Vec<Vec<f64>>,
    moves: Vec<Vec<[(usize, f64); 2]>>,
    probs: Vec<f64>,
    discount: f64,
}

impl ReplicaOracle {
    fn new(sol: &PolicySolution, fac: Vec<f64>) -> Self {
        let s_values = sol.grid().s_values();
        Self {
            fac,
            prices: sol.prices().to_vec(),
            deps: sol.deps().to_vec(),
            moves: sol
                .policy()
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&c| bracket_weights(s_values, c))
                        .collect()
                })
                .collect(),
            probs: sol.loads().probabilities().to_vec(),
            discount: sol.grid().discount(),
        }
    }

    /// One Bellman backup; `best` switches between the optimizing operator
    /// and the solved price/continuation rule.
    fn backup(&self, v: &[Vec<f64>], best: bool) -> Vec<Vec<f64>> {
        let (n_f, n_s) = (self.fac.len(), self.prices.len());
        let mut next = vec![vec![0.0; n_s]; n_f];
        for f in 0..n_f {
            for s in 0..n_s {
                let mut total = 0.0;
                for (l, &lp) in self.probs.iter().enumerate() {
                    let q = |act: usize| -> f64 {
                        let mut q = self.prices[s][l] * (self.fac[f] - self.fac[act]);
                        for (s_next, w) in self.moves[s][l] {
                            if w > 0.0 {
                                q += self.discount * w * v[act][s_next];
                            }
                        }
                        q
                    };
                    total += lp
                        * if best {
                            (0..n_f).map(q).fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            let (p, dep) = (self.prices[s][l], self.deps[s][l]);
                            if p > dep + 1e-7 {
                                q(0)
                            } else if p < dep - 1e-7 {
                                q(n_f - 1)
                            } else {
                                q(f)
                            }
                        };
                }
                next[f][s] = total;
            }
        }
        next
    }

    fn fixed_point(&self, best: bool) -> Vec<Vec<f64>> {
        let mut v = vec![vec![0.0; self.prices.len()]; self.fac.len()];
        for _ in 0..200_000 {
            let next = self.backup(&v, best);
            let diff = v
                .iter()
                .flatten()
                .zip(next.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if diff <= 1e-12 {
                return v;
            }
        }
        panic!("value iteration did not contract");
    }
}

#[test]
fn acceptance_2_bellman_oracle_and_brute_force() {
    // Pinned: on a 3-level store against a one-technology stack with three
    // equiprobable loads, the solved rule's value matches optimizing value
    // iteration to 1e-6 relative, no enumerated 3^9-policy beats it, and the
    // whole check finishes inside 60 s.
    let started = Instant::now();
    let curve = PriceCurve::MeritOrder(
        TechSet::new(vec![GenerationTech::new("gen", 50.0, 10.0, 50.0)], 1000.0)
            .expect("valid stack"),
    );
    let loads = LoadGrid::new(
        vec![30.0, 50.0, 70.0],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    )
    .expect("valid loads");
    let grid = StorageGrid::uniform(0.0, 20.0, 3, 1.0, 0.95).expect("valid grid");
    let sol = solve_policy(&curve, &grid, &loads, &SolveOptions::default()).expect("converges");

    let oracle = ReplicaOracle::new(&sol, vec![0.0, 10.0, 20.0]);
    let v_best = oracle.fixed_point(true);
    let v_rule = oracle.fixed_point(false);
    let scale = 1.0
        + v_best
            .iter()
            .flatten()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (row_b, row_r) in v_best.iter().zip(&v_rule) {
        for (&b, &r) in row_b.iter().zip(row_r) {
            assert!(
                b >= r - 1e-9 * scale,
                "optimizing iteration fell below the rule: {b} < {r}"
            );
            worst = worst.max((b - r).abs());
        }
    }
    assert!(
        worst <= 1e-6 * scale,
        "rule value differs from the Bellman optimum by {worst} (scale {scale})"
    );

    let report = private_optimality_check(&sol, 20.0, 3, 20_000, 7, 20_000).expect("valid model");
    assert_eq!(report.enumerated_policies, 19_683);
    let value_scale = 1.0 + report.stationary_profit.abs() / (1.0 - 0.95);
    assert!(
        report.enumeration_gap <= 1e-6 * value_scale,
        "an enumerated policy beat the rule by {}",
        report.enumeration_gap
    );
    assert!(report.deviation_margin <= 1e-6 * value_scale);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    pass(
        2,
        "Bellman oracle and brute force",
        format!(
            "rule within {worst:.2e} of the optimum; {} policies enumerated, best gap {:.2e}; {:.2}s",
            report.enumerated_policies,
            report.enumeration_gap,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Stationary distributions and the discounted-sum identity
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_stationary_identities() {
    // Pinned: solved-case stationary residual ‖xM − x‖₁ ≤ 1e-10; on 20
    // random 5-state chains the stationary shortcut E[g]/(1−δ) matches a
    // direct resolvent solve to 1e-8.
    let curve = linear_curve();
    let mut worst_residual = 0.0f64;
    for capacity in [10.0, 50.0, 150.0] {
        let sol = solve_case(&curve, capacity, 0.999);
        let x = stationary_of(&sol);
        assert!(
            x.residual() <= 1e-10,
            "capacity {capacity}: residual {}",
            x.residual()
        );
        worst_residual = worst_residual.max(x.residual());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(314159);
    let discount = 0.9;
    let mut worst_gap = 0.0f64;
    for _ in 0..20 {
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect()
            })
            .collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let m = TransitionMatrix::new(rows.clone()).expect("stochastic rows");
        let x = stationary_distribution(&m, 1e-14, 10_000_000).expect("converges");
        let shortcut = stationary_recursive_solve(&g, discount, &x).expect("valid inputs");
        // Direct route: v = (I − δM)⁻¹ g, then average v over x.
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (i == j) as u8 as f64 - discount * rows[i][j])
                    .collect()
            })
            .collect();
        let v = solve_dense(a, g.clone()).expect("nonsingular");
        let direct: f64 = x.mass().iter().zip(&v).map(|(&xi, &vi)| xi * vi).sum();
        let gap = (shortcut - direct).abs();
        assert!(gap <= 1e-8 * (1.0 + direct.abs()), "identity gap {gap}");
        worst_gap = worst_gap.max(gap);
    }
    pass(
        3,
        "stationary identities",
        format!(
            "worst case residual {worst_residual:.2e}; worst identity gap {worst_gap:.2e} over 20 random chains"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Reference marginal-benefit curves and break-even volumes
// ---------------------------------------------------------------------------

/// Reference coordinates for the marginal benefit of storage volume
/// (capacity in MWh on [0,100] load range, benefit in $ per interval).
const LINEAR_MB_REF: [(f64, f64); 6] = [
    (2.0, 17.34),
    (10.0, 12.47),
    (20.0, 8.25),
    (50.0, 3.22),
    (100.0, 1.2),
    (150.0, 0.60),
];
const WORKED_MB_REF: [(f64, f64); 4] =
    [(2.0, 84.6), (10.0, 45.44), (20.0, 32.7), (50.0, 10.8)];

fn mb_within(curve: &PriceCurve, refs: &[(f64, f64)], discount: f64, band: f64) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(refs.len());
    for &(capacity, expected) in refs {
        let sol = solve_case(curve, capacity, discount);
        let mb = storage_marginal_benefit(&sol, &stationary_of(&sol));
        if (mb - expected).abs() > band * expected {
            return None;
        }
        out.push(mb);
    }
    Some(out)
}

#[test]
fn acceptance_4_reference_curves_and_break_even() {
    // Pinned: both marginal-benefit curves within ±20% of their reference
    // coordinates at one calibrated discount factor from a small admissible
    // set; linear break-even at a 5 $/MWh-interval fixed cost inside
    // 37±10 MWh; worked break-even at the 30 $ line inside 24±10 MWh. The
    // reference data also carries a 25 $ line for the same system, so that
    // break-even is reported but not gated.
    let loads = uniform_loads();
    let linear = linear_curve();
    let worked = worked_curve(&loads);

    let mut calibrated = None;
    for discount in [0.999, 0.99, 0.9995, 0.9999] {
        if let (Some(lin), Some(wrk)) = (
            mb_within(&linear, &LINEAR_MB_REF, discount, 0.20),
            mb_within(&worked, &WORKED_MB_REF, discount, 0.20),
        ) {
            calibrated = Some((discount, lin, wrk));
            break;
        }
    }
    let (discount, lin, wrk) =
        calibrated.expect("no admissible discount factor reproduces both reference curves");

    let search = CapacitySearch {
        lower: 1.0,
        upper: 100.0,
        capacity_tol: 1.0,
        grid_points: 101,
        delta_t: 1.0,
        discount,
    };
    let opts = SolveOptions::default();
    let lin_opt =
        optimal_storage_capacity(&linear, &loads, 5.0, &search, &opts).expect("search converges");
    assert_eq!(lin_opt.outcome, SearchOutcome::Converged);
    assert!(
        (27.0..=47.0).contains(&lin_opt.capacity),
        "linear break-even {} outside 37±10",
        lin_opt.capacity
    );
    let wrk_opt =
        optimal_storage_capacity(&worked, &loads, 30.0, &search, &opts).expect("search converges");
    assert_eq!(wrk_opt.outcome, SearchOutcome::Converged);
    assert!(
        (14.0..=34.0).contains(&wrk_opt.capacity),
        "worked break-even {} outside 24±10",
        wrk_opt.capacity
    );
    let wrk_alt =
        optimal_storage_capacity(&worked, &loads, 25.0, &search, &opts).expect("search converges");

    pass(
        4,
        "reference curves and break-even",
        format!(
            "discount {discount}; linear MB {:?}; worked MB {:?}; break-evens: linear@5 {:.1} MWh, worked@30 {:.1} MWh (worked@25 {:.1} MWh, reported only)",
            lin.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            wrk.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            lin_opt.capacity,
            wrk_opt.capacity,
            wrk_alt.capacity
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Storage flattens the price-duration curve but preserves its area
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_mean_price_invariance_and_flattening() {
    // Pinned: stationary mean price constant within 1% across sizes; curve
    // maximum nonincreasing and minimum nondecreasing as capacity grows.
    let curve = linear_curve();
    let mut means = Vec::new();
    let mut maxes = Vec::new();
    let mut mins = Vec::new();
    for capacity in [10.0, 50.0, 150.0] {
        let sol = solve_case(&curve, capacity, 0.999);
        let pd = price_duration_curve(&sol, &stationary_of(&sol));
        means.push(pd.mean_price());
        maxes.push(pd.max_price());
        mins.push(pd.min_price());
    }
    let spread = (means.iter().cloned().fold(f64::MIN, f64::max)
        - means.iter().cloned().fold(f64::MAX, f64::min))
        / means[0];
    assert!(spread <= 0.01, "mean price varies by {spread:.4} across sizes");
    for w in maxes.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "maximum rose with capacity: {maxes:?}");
    }
    for w in mins.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "minimum fell with capacity: {mins:?}");
    }
    pass(
        5,
        "mean-price invariance and flattening",
        format!("means {means:?} (spread {spread:.2e}); maxes {maxes:?}; mins {mins:?}"),
    );
}

// ---------------------------------------------------------------------------
// 6. A small store lives at its bounds
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_small_store_extremity() {
    // Pinned: at 10% of the load range, at least 80% of stationary mass
    // sits on the empty and full levels.
    let sol = solve_case(&linear_curve(), 10.0, 0.999);
    let x = stationary_of(&sol);
    let mass = x.mass();
    let extreme = mass[0] + mass[mass.len() - 1];
    assert!(extreme >= 0.8, "extreme-state mass {extreme}");
    pass(
        6,
        "small-store extremity",
        format!("empty+full mass {extreme:.3} at 10% capacity"),
    );
}

// ---------------------------------------------------------------------------
// 7. The replicating hedge settles exactly
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_hedge_settlement() {
    // Pinned: over 10⁴ simulated intervals the per-interval hedged net is
    // zero to 1e-9 relative; the decomposed legs reproduce the one-line
    // hedge formula; three hand-settled reference rows come out
    // column-for-column; dropping the s-shaped leg leaves strictly positive
    // variance. All inside 5 s.
    let started = Instant::now();
    let sol = solve_case(&linear_curve(), 20.0, 0.999);
    let bounds = FacilityBounds::from_solution(&sol);
    let traj = simulate(&sol, 10_000, 4242);

    let mut worst_net = 0.0f64;
    for r in &traj.records {
        let rule_closing = optimal_closing(r.price, r.dep, bounds, r.closing, 1e-6);
        let h = perfect_hedge_payoff(r.opening, r.closing, rule_closing, r.price, r.dep);
        let net = (r.cashflow - h).abs();
        assert!(
            net <= 1e-9 * (1.0 + r.cashflow.abs()),
            "hedged net {net} at cashflow {}",
            r.cashflow
        );
        worst_net = worst_net.max(net);
    }

    let rows = settlement_table(&traj, &sol).expect("consistent trajectory");
    let mut worst_split = 0.0f64;
    for row in &rows {
        let gap = (row.cashflow - row.total).abs();
        assert!(
            gap <= 2e-9 * (1.0 + row.cashflow.abs()),
            "decomposition gap {gap} at cashflow {}",
            row.cashflow
        );
        worst_split = worst_split.max(gap);
    }
    let collar_var = collar_only_variance(&rows);
    assert!(collar_var > 0.0, "collar-only variance must be positive");

    // Hand-settled reference rows for a 20 MWh store with strikes 83/107:
    // (opening, price, continuation, cashflow, floor volume/cashflow, cap
    // volume/cashflow, s-shaped cashflow, total, s-shaped tolerance). The
    // middle row's quoted cashflow and s-shaped leg disagree with each other
    // by ~1.0 in the reference data, so only that column gets the wide band.
    let strikes = HedgeStrikes {
        floor: 83.0,
        cap: 107.0,
    };
    let reference = [
        (7.7, 89.7, 89.7, -987.7, 12.3, 0.0, 7.7, 0.0, -987.7, -987.7, 0.05),
        (18.7, 87.6, 87.6, -112.2, 1.3, 0.0, 18.7, 0.0, -111.2, -111.2, 1.05),
        (20.0, 167.0, 107.0, 3340.0, 0.0, 0.0, 20.0, 1200.0, 2140.0, 3340.0, 0.05),
    ];
    for (s, p, dep, pi, fv, fcf, cv, ccf, scf, total, scf_tol) in reference {
        let closing = s - pi / p;
        let legs = decompose(s, closing, p, dep, bounds, strikes);
        assert!((legs.floor_volume - fv).abs() < 0.05);
        assert!((legs.floor_cashflow - fcf).abs() < 0.05);
        assert!((legs.cap_volume - cv).abs() < 0.05);
        assert!((legs.cap_cashflow - ccf).abs() < 0.05);
        assert!(
            (legs.s_shaped_cashflow - scf).abs() < scf_tol,
            "s-shaped {} vs {scf}",
            legs.s_shaped_cashflow
        );
        assert!((legs.total() - total).abs() < scf_tol);
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    pass(
        7,
        "hedge settlement",
        format!(
            "worst hedged net {worst_net:.2e}, worst leg-sum gap {worst_split:.2e}, collar-only variance {collar_var:.3e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Identical configuration and seed give byte-identical artifacts
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_byte_determinism() {
    // Pinned: running the shipped single-store scenario twice produces
    // byte-identical files for every emitting command.
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/linear-hedge.cfg");
    let config = ScenarioConfig::load(&config_path).expect("shipped config parses");
    let (a, b) = (
        tempfile::tempdir().expect("tempdir"),
        tempfile::tempdir().expect("tempdir"),
    );
    let mut compared = 0usize;
    for command in [Command::Solve, Command::Stationary, Command::Simulate, Command::HedgeDemo] {
        let out_a = run(command, &config, a.path()).expect("run succeeds");
        let out_b = run(command, &config, b.path()).expect("run succeeds");
        assert!(!out_a.files.is_empty());
        for (fa, fb) in out_a.files.iter().zip(&out_b.files) {
            assert_eq!(fa.file_name(), fb.file_name());
            let (bytes_a, bytes_b) = (fs::read(fa).expect("readable"), fs::read(fb).expect("readable"));
            assert_eq!(bytes_a, bytes_b, "artifact {fa:?} differs between identical runs");
            compared += 1;
        }
    }
    pass(
        8,
        "byte determinism",
        format!("{compared} artifacts byte-identical across repeated runs"),
    );
}
