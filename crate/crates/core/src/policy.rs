//! Optimal storage operation against the price curve, solved as a fixed point.
//!
//! Storage with opening level `S` facing load `L` picks a closing level `S+`
//! on `[S_min, S_max]`. Discharging lowers net demand, `net = L - (S - S+)/Δ`,
//! and the interval clears at the curve price of that net demand. The optimal
//! action balances today's price against the discounted expected price of the
//! next interval given the closing level:
//!
//! * charge to the top while the price is below `δ·E[P+]`,
//! * discharge to the bottom while it is above,
//! * otherwise stop where the two are equal.
//!
//! `E[P+]` itself depends on the policy (through the prices the policy
//! induces), so the solver iterates: evaluate the rule cell by cell against a
//! trial `E[P+]`, average the resulting prices over the load distribution to
//! get a new `E[P+]`, and damp. Monotonicity of `E[P+]` in the closing level
//! is enforced on every trial (the cell problem is only well posed against a
//! nonincreasing continuation), and the converged solution stores the policy,
//! the price of every cell, and the `E[P+]` vector it was solved against, so
//! the three are mutually consistent to root-finding accuracy.

use rayon::prelude::*;
use thiserror::Error;

use crate::market::{LoadGrid, MarketError, PriceCurve};
use crate::numeric::{interp_linear, max_abs_diff, project_nonincreasing};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("storage grid: {0}")]
    BadGrid(String),
    #[error("solver options: {0}")]
    BadOptions(String),
    #[error(
        "no fixed point within {iterations} iterations; last residual {residual:.3e} (tol {tol:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        residual: f64,
        tol: f64,
        /// Residual after each iteration, for post-mortems.
        history: Vec<f64>,
    },
}

/// Discretized storage state space with the timing constants attached.
#[derive(Debug, Clone)]
pub struct StorageGrid {
    s_values: Vec<f64>,
    delta_t: f64,
    discount: f64,
}

impl StorageGrid {
    /// `points` equally spaced levels on `[s_min, s_max]`; `delta_t` is the
    /// interval length in hours and `discount` the per-interval factor.
    pub fn uniform(
        s_min: f64,
        s_max: f64,
        points: usize,
        delta_t: f64,
        discount: f64,
    ) -> Result<Self, SolveError> {
        if points == 0 {
            return Err(SolveError::BadGrid("need at least one level".into()));
        }
        if !s_min.is_finite() || !s_max.is_finite() || s_max < s_min {
            return Err(SolveError::BadGrid(format!(
                "need s_max >= s_min, got [{s_min}, {s_max}]"
            )));
        }
        if s_max == s_min && points != 1 {
            return Err(SolveError::BadGrid(
                "zero capacity admits exactly one level".into(),
            ));
        }
        if points == 1 && s_max != s_min {
            return Err(SolveError::BadGrid(
                "a single level needs s_max == s_min".into(),
            ));
        }
        if !(delta_t > 0.0) || !delta_t.is_finite() {
            return Err(SolveError::BadGrid(format!(
                "interval length must be positive, got {delta_t}"
            )));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(SolveError::BadGrid(format!(
                "discount factor must lie in (0, 1], got {discount}"
            )));
        }
        let s_values = if points == 1 {
            vec![s_min]
        } else {
            let step = (s_max - s_min) / (points - 1) as f64;
            let mut v: Vec<f64> = (0..points).map(|i| s_min + step * i as f64).collect();
            // Pin the endpoint: accumulated rounding must not push the top
            // level past the declared capacity.
            *v.last_mut().expect("points >= 2") = s_max;
            v
        };
        Ok(Self {
            s_values,
            delta_t,
            discount,
        })
    }

    pub fn s_values(&self) -> &[f64] {
        &self.s_values
    }

    pub fn s_min(&self) -> f64 {
        self.s_values[0]
    }

    pub fn s_max(&self) -> f64 {
        *self.s_values.last().expect("nonempty grid")
    }

    /// Usable volume `s_max - s_min` in MWh.
    pub fn capacity(&self) -> f64 {
        self.s_max() - self.s_min()
    }

    pub fn len(&self) -> usize {
        self.s_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_values.is_empty()
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Index of the middle level (rounds down for even grids).
    pub fn mid_index(&self) -> usize {
        self.len() / 2
    }
}

/// Which arm of the optimality condition a cell ends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    /// Charged to the top; price strictly below `δ·E[P+]`.
    AtMax,
    /// Discharged to the bottom; price strictly above `δ·E[P+]`.
    AtMin,
    /// Price equals `δ·E[P+]` (includes indifferent cells at a bound).
    Interior,
}

/// Solved action of one `(opening level, load)` cell.
#[derive(Debug, Clone, Copy)]
pub struct CellOutcome {
    /// Optimal closing level.
    pub closing: f64,
    /// Clearing price of the interval. On a merit-order breakpoint, where the
    /// stack alone leaves the price indeterminate, the storage bid clears the
    /// market and the price is `δ·E[P+]` clamped into the breakpoint's gap.
    pub price: f64,
    /// `δ·E[P+]` evaluated at the closing level.
    pub dep: f64,
    pub class: CellClass,
    /// Net demand went negative and was clamped to zero.
    pub floored: bool,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Stop when `E[P+]` is reproduced to this absolute tolerance ($/MWh).
    pub tol: f64,
    pub max_iter: usize,
    /// Initial step fraction toward the freshly evaluated `E[P+]`.
    pub damping: f64,
    /// Absolute price tolerance of the within-cell root find ($/MWh).
    pub root_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
            damping: 0.5,
            root_tol: 1e-9,
        }
    }
}

/// Converged policy, cell prices, and the expected-price vector they solve.
#[derive(Debug, Clone)]
pub struct PolicySolution {
    curve: PriceCurve,
    grid: StorageGrid,
    loads: LoadGrid,
    policy: Vec<Vec<f64>>,
    prices: Vec<Vec<f64>>,
    deps: Vec<Vec<f64>>,
    classes: Vec<Vec<CellClass>>,
    ep: Vec<f64>,
    residual: f64,
    iterations: usize,
    floor_cells: usize,
}

impl PolicySolution {
    pub fn curve(&self) -> &PriceCurve {
        &self.curve
    }

    pub fn grid(&self) -> &StorageGrid {
        &self.grid
    }

    pub fn loads(&self) -> &LoadGrid {
        &self.loads
    }

    /// Closing level per `(state, load)` cell.
    pub fn policy(&self) -> &[Vec<f64>] {
        &self.policy
    }

    /// Clearing price per `(state, load)` cell.
    pub fn prices(&self) -> &[Vec<f64>] {
        &self.prices
    }

    /// `δ·E[P+]` at each cell's closing level.
    pub fn deps(&self) -> &[Vec<f64>] {
        &self.deps
    }

    pub fn classes(&self) -> &[Vec<CellClass>] {
        &self.classes
    }

    /// Expected next-interval price by closing level (undiscounted), the
    /// fixed point the policy was solved against; nonincreasing.
    pub fn ep(&self) -> &[f64] {
        &self.ep
    }

    /// `E[P+]` reproduction error at convergence.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Cells whose net demand was clamped at zero.
    pub fn floor_cells(&self) -> usize {
        self.floor_cells
    }

    /// `δ·E[P+]` at an arbitrary closing level, interpolated between grid
    /// levels.
    pub fn dep_at(&self, closing: f64) -> f64 {
        self.grid.discount * interp_linear(&self.grid.s_values, &self.ep, closing)
    }

    /// Evaluate the optimal action from an arbitrary (not necessarily
    /// on-grid) opening level — the continuous-state counterpart of the
    /// solved cells, used by simulation.
    pub fn decide(&self, opening: f64, load: f64) -> CellOutcome {
        solve_cell(
            &self.curve,
            &self.grid,
            &self.ep,
            opening,
            load,
            SolveOptions::default().root_tol,
        )
    }
}

/// Bands of loads, per opening level, on which the policy pins a bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeBand {
    /// Largest load at which the cell charges all the way to `s_max`.
    pub full_charge: Option<f64>,
    /// Smallest load at which the cell discharges all the way to `s_min`.
    pub full_discharge: Option<f64>,
}

// ---------------------------------------------------------------------------
// Cell problem
// ---------------------------------------------------------------------------

/// Root-find width floor relative to the grid span.
fn width_tol(grid: &StorageGrid) -> f64 {
    1e-12 * (1.0 + grid.capacity())
}

fn solve_cell(
    curve: &PriceCurve,
    grid: &StorageGrid,
    ep: &[f64],
    opening: f64,
    load: f64,
    root_tol: f64,
) -> CellOutcome {
    let (lo, hi) = (grid.s_min(), grid.s_max());
    let dep_at = |t: f64| grid.discount * interp_linear(&grid.s_values, ep, t);
    let net_at = |t: f64| load - (opening - t) / grid.delta_t;
    // Imbalance between today's price and the discounted continuation;
    // nondecreasing in the closing level.
    let gap = |t: f64| curve.price_clamped(net_at(t)).0 - dep_at(t);

    let w_tol = width_tol(grid);
    let mut closing = if gap(lo) >= 0.0 {
        lo // discharging to the floor still beats the continuation
    } else if gap(hi) <= 0.0 {
        hi // charging to the top still beats today's price
    } else {
        let (mut a, mut b) = (lo, hi);
        let mut mid = 0.5 * (a + b);
        for _ in 0..200 {
            mid = 0.5 * (a + b);
            let g = gap(mid);
            if g.abs() <= root_tol || b - a <= w_tol {
                break;
            }
            if g < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        mid
    };
    // Snap a root that crept within rounding distance of a bound.
    if closing - lo <= 2.0 * w_tol {
        closing = lo;
    } else if hi - closing <= 2.0 * w_tol {
        closing = hi;
    }

    let net = net_at(closing);
    let floored = net < 0.0;
    let dep = dep_at(closing);
    // On a merit-order breakpoint the stack price is set-valued; the storage
    // bid itself clears the market there, so the price is the continuation
    // value clamped into the gap. Off breakpoints this reduces to the plain
    // curve price.
    let (left, right) = curve.price_bracket(net.max(0.0), 1e-9 * (1.0 + net.abs()));
    let price = dep.clamp(left, right);

    let class = if price > dep + root_tol {
        CellClass::AtMin
    } else if price < dep - root_tol {
        CellClass::AtMax
    } else {
        CellClass::Interior
    };
    // A strict price/continuation gap can only survive at the matching bound.
    debug_assert!(class != CellClass::AtMin || closing == lo);
    debug_assert!(class != CellClass::AtMax || closing == hi);

    CellOutcome {
        closing,
        price,
        dep,
        class,
        floored,
    }
}

struct Sweep {
    policy: Vec<Vec<f64>>,
    prices: Vec<Vec<f64>>,
    deps: Vec<Vec<f64>>,
    classes: Vec<Vec<CellClass>>,
    ep_next: Vec<f64>,
    floor_cells: usize,
}

/// Evaluate the cell rule for every `(state, load)` pair against `ep`.
/// Rows are solved in parallel and merged back in state order.
fn sweep(curve: &PriceCurve, grid: &StorageGrid, loads: &LoadGrid, ep: &[f64], root_tol: f64) -> Sweep {
    let rows: Vec<Vec<CellOutcome>> = grid
        .s_values
        .par_iter()
        .map(|&s| {
            loads
                .values()
                .iter()
                .map(|&l| solve_cell(curve, grid, ep, s, l, root_tol))
                .collect()
        })
        .collect();

    let n_s = grid.len();
    let mut out = Sweep {
        policy: Vec::with_capacity(n_s),
        prices: Vec::with_capacity(n_s),
        deps: Vec::with_capacity(n_s),
        classes: Vec::with_capacity(n_s),
        ep_next: Vec::with_capacity(n_s),
        floor_cells: 0,
    };
    for row in rows {
        let mut mean = 0.0;
        for (cell, &p) in row.iter().zip(loads.probabilities()) {
            mean += p * cell.price;
            out.floor_cells += cell.floored as usize;
        }
        out.ep_next.push(mean);
        out.policy.push(row.iter().map(|c| c.closing).collect());
        out.prices.push(row.iter().map(|c| c.price).collect());
        out.deps.push(row.iter().map(|c| c.dep).collect());
        out.classes.push(row.iter().map(|c| c.class).collect());
    }
    out
}

// ---------------------------------------------------------------------------
// Fixed point
// ---------------------------------------------------------------------------

/// Solve the policy fixed point by damped iteration on `E[P+]`.
pub fn solve_policy(
    curve: &PriceCurve,
    grid: &StorageGrid,
    loads: &LoadGrid,
    opts: &SolveOptions,
) -> Result<PolicySolution, SolveError> {
    if !(opts.tol > 0.0) || !(opts.root_tol > 0.0) {
        return Err(SolveError::BadOptions(format!(
            "tolerances must be positive, got tol {} root_tol {}",
            opts.tol, opts.root_tol
        )));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(SolveError::BadOptions(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    if opts.max_iter == 0 {
        return Err(SolveError::BadOptions("max_iter must be positive".into()));
    }

    // Start from the no-storage expected price at every level.
    let raw_mean = loads.expect(|l| curve.price_clamped(l).0);
    let mut ep: Vec<f64> = vec![raw_mean; grid.len()];
    let mut damping = opts.damping;
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stalled = 0usize;

    for iter in 1..=opts.max_iter {
        let ep_work = project_nonincreasing(&ep);
        let swept = sweep(curve, grid, loads, &ep_work, opts.root_tol);
        let residual = max_abs_diff(&swept.ep_next, &ep_work);
        history.push(residual);

        if residual <= opts.tol {
            return Ok(PolicySolution {
                curve: curve.clone(),
                grid: grid.clone(),
                loads: loads.clone(),
                policy: swept.policy,
                prices: swept.prices,
                deps: swept.deps,
                classes: swept.classes,
                ep: ep_work,
                residual,
                iterations: iter,
                floor_cells: swept.floor_cells,
            });
        }

        // Ease off when the residual stops improving.
        if residual < best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 25 {
                damping = (damping * 0.5).max(0.05);
                stalled = 0;
            }
        }

        for (e, (&w, &n)) in ep.iter_mut().zip(ep_work.iter().zip(&swept.ep_next)) {
            *e = w + damping * (n - w);
        }
    }

    Err(SolveError::NoConvergence {
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        tol: opts.tol,
        history,
    })
}

/// One evaluation of the cell rule against a given continuation; returns the
/// closing level per `(state, load)` cell.
pub fn policy_update(
    ep: &[f64],
    grid: &StorageGrid,
    curve: &PriceCurve,
    loads: &LoadGrid,
    root_tol: f64,
) -> Vec<Vec<f64>> {
    sweep(curve, grid, loads, ep, root_tol).policy
}

/// Clearing prices implied mechanically by a policy: the curve price at each
/// cell's net demand (right-continuous on breakpoints), with net demand
/// clamped at zero. Returns the price matrix and the number of clamped cells.
///
/// Unlike the prices stored in a [`PolicySolution`], this does not resolve
/// breakpoint indeterminacy with the continuation value, so it matches the
/// solution exactly away from merit-order breakpoints.
pub fn price_field(
    policy: &[Vec<f64>],
    grid: &StorageGrid,
    curve: &PriceCurve,
    loads: &LoadGrid,
) -> (Vec<Vec<f64>>, usize) {
    let mut floored = 0usize;
    let prices = policy
        .iter()
        .zip(grid.s_values())
        .map(|(row, &s)| {
            row.iter()
                .zip(loads.values())
                .map(|(&closing, &l)| {
                    let (p, f) = curve.price_clamped(l - (s - closing) / grid.delta_t());
                    floored += f as usize;
                    p
                })
                .collect()
        })
        .collect();
    (prices, floored)
}

/// Expected next-interval price by closing state: the load-probability mean
/// of each price row.
pub fn expected_next_price(prices: &[Vec<f64>], loads: &LoadGrid) -> Vec<f64> {
    prices
        .iter()
        .map(|row| {
            row.iter()
                .zip(loads.probabilities())
                .map(|(&p, &w)| p * w)
                .sum()
        })
        .collect()
}

/// Load bands on which each opening level pins a storage bound.
pub fn threshold_loads(solution: &PolicySolution) -> Vec<ChargeBand> {
    let (lo, hi) = (solution.grid.s_min(), solution.grid.s_max());
    solution
        .policy
        .iter()
        .map(|row| {
            let mut band = ChargeBand {
                full_charge: None,
                full_discharge: None,
            };
            for (&closing, &l) in row.iter().zip(solution.loads.values()) {
                if closing == hi {
                    band.full_charge = Some(l);
                }
                if closing == lo && band.full_discharge.is_none() {
                    band.full_discharge = Some(l);
                }
            }
            band
        })
        .collect()
}
