//! Investment-side analytics on top of a solved policy: the stationary
//! price-duration curve, per-technology energy margins, the marginal benefit
//! of storage capacity, and the break-even storage size.
//!
//! All expectations are taken under the product of the stationary storage
//! distribution and the i.i.d. load distribution, i.e. the long-run frequency
//! of `(state, load)` cells.

use thiserror::Error;

use crate::markov::{stationary_distribution, transition_matrix, ChainError, StationaryDistribution};
use crate::policy::{solve_policy, PolicySolution, SolveError, SolveOptions, StorageGrid};
use crate::market::{LoadGrid, PriceCurve};

#[derive(Debug, Error)]
pub enum InvestmentError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("capacity search: {0}")]
    BadSearch(String),
    #[error(
        "marginal benefit is not decreasing over the search bounds: {mb_lo:.4} at {lo} vs {mb_hi:.4} at {hi}"
    )]
    NotDecreasing { lo: f64, mb_lo: f64, hi: f64, mb_hi: f64 },
}

/// Stationary price-duration curve: prices in descending order against the
/// cumulative probability of meeting or exceeding them.
#[derive(Debug, Clone)]
pub struct PriceDurationCurve {
    /// `(duration, price)` pairs, price descending, duration the inclusive
    /// cumulative probability ending at 1.
    points: Vec<(f64, f64)>,
}

impl PriceDurationCurve {
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn max_price(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |&(_, p)| p)
    }

    pub fn min_price(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |&(_, p)| p)
    }

    /// Probability-weighted mean price.
    pub fn mean_price(&self) -> f64 {
        let mut prev = 0.0;
        let mut mean = 0.0;
        for &(d, p) in &self.points {
            mean += (d - prev) * p;
            prev = d;
        }
        mean
    }
}

/// Price-duration curve of the solved system under the stationary
/// `(state, load)` frequencies.
pub fn price_duration_curve(
    solution: &PolicySolution,
    x: &StationaryDistribution,
) -> PriceDurationCurve {
    let probs = solution.loads().probabilities();
    let mut cells: Vec<(f64, f64)> = Vec::with_capacity(x.mass().len() * probs.len());
    for (row, &xs) in solution.prices().iter().zip(x.mass()) {
        for (&price, &lp) in row.iter().zip(probs) {
            let w = xs * lp;
            if w > 0.0 {
                cells.push((price, w));
            }
        }
    }
    // Descending by price; ties keep cell order for a deterministic curve.
    cells.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite prices"));
    let mut points = Vec::with_capacity(cells.len());
    let mut cum = 0.0;
    for (price, w) in cells {
        cum += w;
        points.push((cum, price));
    }
    if let Some(last) = points.last_mut() {
        last.0 = 1.0; // absorb rounding in the final cumulative weight
    }
    PriceDurationCurve { points }
}

/// Stationary energy margin of one unit of capacity with variable cost `c`:
/// `E[(P − c)·1{P ≥ c}]` per interval. Covering the fixed cost is the
/// screening break-even condition.
pub fn generation_margin(variable_cost: f64, solution: &PolicySolution, x: &StationaryDistribution) -> f64 {
    let probs = solution.loads().probabilities();
    let mut margin = 0.0;
    for (row, &xs) in solution.prices().iter().zip(x.mass()) {
        for (&price, &lp) in row.iter().zip(probs) {
            if price >= variable_cost {
                margin += xs * lp * (price - variable_cost);
            }
        }
    }
    margin
}

/// Stationary marginal benefit of one extra MWh of storage volume:
/// `E[(δ·E[P+] − P)·1{δ·E[P+] ≥ P}]` per interval — the value of topping up
/// the marginal unit whenever charging is strictly profitable.
pub fn storage_marginal_benefit(solution: &PolicySolution, x: &StationaryDistribution) -> f64 {
    let probs = solution.loads().probabilities();
    let mut mb = 0.0;
    for ((prow, drow), &xs) in solution
        .prices()
        .iter()
        .zip(solution.deps())
        .zip(x.mass())
    {
        for ((&price, &dep), &lp) in prow.iter().zip(drow).zip(probs) {
            if dep >= price {
                mb += xs * lp * (dep - price);
            }
        }
    }
    mb
}

/// Margin report for every technology of a merit-order stack plus storage.
#[derive(Debug, Clone)]
pub struct MarginReport {
    pub tech_margins: Vec<TechMargin>,
    pub storage_marginal_benefit: f64,
    pub mean_price: f64,
}

#[derive(Debug, Clone)]
pub struct TechMargin {
    pub name: String,
    pub variable_cost: f64,
    pub fixed_cost: f64,
    pub margin: f64,
}

pub fn margin_report(solution: &PolicySolution, x: &StationaryDistribution) -> MarginReport {
    let tech_margins = match solution.curve() {
        PriceCurve::MeritOrder(set) => set
            .techs()
            .iter()
            .map(|t| TechMargin {
                name: t.name.clone(),
                variable_cost: t.variable_cost,
                fixed_cost: t.fixed_cost,
                margin: generation_margin(t.variable_cost, solution, x),
            })
            .collect(),
        PriceCurve::Affine { .. } => Vec::new(),
    };
    MarginReport {
        tech_margins,
        storage_marginal_benefit: storage_marginal_benefit(solution, x),
        mean_price: price_duration_curve(solution, x).mean_price(),
    }
}

/// How a capacity search ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchOutcome {
    /// Marginal benefit crossed the fixed cost inside the bounds.
    Converged,
    /// Fixed cost exceeds the marginal benefit already at the lower bound;
    /// no storage pays for itself.
    AtLowerBound,
    /// Marginal benefit still exceeds the fixed cost at the upper bound.
    AtUpperBound,
}

/// Result of the break-even storage capacity search.
#[derive(Debug, Clone)]
pub struct OptimalCapacity {
    /// Break-even volume in MWh (0 when `AtLowerBound`).
    pub capacity: f64,
    /// Marginal benefit at the returned capacity.
    pub marginal_benefit: f64,
    pub outcome: SearchOutcome,
    /// Every `(capacity, marginal benefit)` the search evaluated, in order.
    pub probes: Vec<(f64, f64)>,
}

/// Parameters of the capacity search; each probe re-solves the full policy
/// fixed point at the probed volume.
#[derive(Debug, Clone)]
pub struct CapacitySearch {
    pub lower: f64,
    pub upper: f64,
    /// Stop once the bracket is this narrow (MWh).
    pub capacity_tol: f64,
    /// Storage grid points used at every probe.
    pub grid_points: usize,
    pub delta_t: f64,
    pub discount: f64,
}

impl CapacitySearch {
    pub fn validate(&self) -> Result<(), InvestmentError> {
        if !(self.lower > 0.0) || !(self.upper > self.lower) {
            return Err(InvestmentError::BadSearch(format!(
                "need 0 < lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        if !(self.capacity_tol > 0.0) {
            return Err(InvestmentError::BadSearch(
                "capacity tolerance must be positive".into(),
            ));
        }
        if self.grid_points < 2 {
            return Err(InvestmentError::BadSearch(
                "need at least two grid points per probe".into(),
            ));
        }
        Ok(())
    }
}

/// Stationary marginal benefit at one storage volume, solving the policy from
/// scratch.
pub fn marginal_benefit_at(
    curve: &PriceCurve,
    loads: &LoadGrid,
    volume: f64,
    search: &CapacitySearch,
    opts: &SolveOptions,
) -> Result<f64, InvestmentError> {
    let grid = StorageGrid::uniform(0.0, volume, search.grid_points, search.delta_t, search.discount)?;
    let solution = solve_policy(curve, &grid, loads, opts)?;
    let x = stationary_distribution(&transition_matrix(&solution), 1e-12, 500_000)?;
    Ok(storage_marginal_benefit(&solution, &x))
}

/// Break-even storage volume: where the decreasing marginal benefit meets the
/// storage fixed cost `f_s`, by bisection with a full re-solve per probe.
pub fn optimal_storage_capacity(
    curve: &PriceCurve,
    loads: &LoadGrid,
    f_s: f64,
    search: &CapacitySearch,
    opts: &SolveOptions,
) -> Result<OptimalCapacity, InvestmentError> {
    search.validate()?;
    let mut probes = Vec::new();
    let eval = |volume: f64, probes: &mut Vec<(f64, f64)>| -> Result<f64, InvestmentError> {
        let mb = marginal_benefit_at(curve, loads, volume, search, opts)?;
        probes.push((volume, mb));
        Ok(mb)
    };

    let mb_lo = eval(search.lower, &mut probes)?;
    let mb_hi = eval(search.upper, &mut probes)?;
    if mb_lo < mb_hi {
        return Err(InvestmentError::NotDecreasing {
            lo: search.lower,
            mb_lo,
            hi: search.upper,
            mb_hi,
        });
    }
    if f_s >= mb_lo {
        return Ok(OptimalCapacity {
            capacity: 0.0,
            marginal_benefit: mb_lo,
            outcome: SearchOutcome::AtLowerBound,
            probes,
        });
    }
    if f_s <= mb_hi {
        return Ok(OptimalCapacity {
            capacity: search.upper,
            marginal_benefit: mb_hi,
            outcome: SearchOutcome::AtUpperBound,
            probes,
        });
    }

    let (mut lo, mut hi) = (search.lower, search.upper);
    let mut mid = 0.5 * (lo + hi);
    let mut mb_mid = f64::NAN;
    while hi - lo > search.capacity_tol {
        mid = 0.5 * (lo + hi);
        mb_mid = eval(mid, &mut probes)?;
        if mb_mid > f_s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if mb_mid.is_nan() {
        mid = 0.5 * (lo + hi);
        mb_mid = eval(mid, &mut probes)?;
    }
    Ok(OptimalCapacity {
        capacity: mid,
        marginal_benefit: mb_mid,
        outcome: SearchOutcome::Converged,
        probes,
    })
}
