//! The one-shot market model: a merit-order generation stack (or a reduced
//! affine form), the discrete load distribution, and the induced system price.
//!
//! Prices are marginal dispatch costs. The stack is stepwise, so the price
//! function is a right-continuous step function of load: exactly at a
//! breakpoint the next (more expensive) technology sets the price. Loads
//! beyond installed capacity are served at the value of lost load, modelled
//! as a final unbounded technology with zero fixed cost.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("load must be nonnegative, got {0}")]
    NegativeLoad(f64),
    #[error("technology `{name}`: {reason}")]
    BadTech { name: String, reason: String },
    #[error("value of lost load {voll} must exceed the dearest variable cost {max_vc}")]
    VollBelowStack { voll: f64, max_vc: f64 },
    #[error("affine price curve needs a positive slope, got {0}")]
    NonPositiveSlope(f64),
    #[error("load grid: {0}")]
    BadLoadGrid(String),
    #[error("screening needs fixed costs strictly decreasing along the merit order; `{0}` would never run")]
    ScreeningInfeasible(String),
}

/// A dispatchable generation technology: constant variable cost, a fixed cost
/// per unit of capacity and interval, and installed capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTech {
    pub name: String,
    /// $/MWh when running.
    pub variable_cost: f64,
    /// $/MWh of capacity per interval, used by the investment analysis only.
    pub fixed_cost: f64,
    /// MW of installed capacity.
    pub capacity: f64,
}

impl GenerationTech {
    pub fn new(name: &str, variable_cost: f64, fixed_cost: f64, capacity: f64) -> Self {
        Self {
            name: name.to_owned(),
            variable_cost,
            fixed_cost,
            capacity,
        }
    }
}

/// A validated merit order: technologies sorted by variable cost, ties merged,
/// closed by an unbounded value-of-lost-load step.
#[derive(Debug, Clone)]
pub struct TechSet {
    techs: Vec<GenerationTech>,
    /// Cumulative capacity through each technology; breakpoints of the stack.
    cum_capacity: Vec<f64>,
    voll: f64,
}

impl TechSet {
    pub fn new(mut techs: Vec<GenerationTech>, voll: f64) -> Result<Self, MarketError> {
        for t in &techs {
            let bad = |reason: &str| MarketError::BadTech {
                name: t.name.clone(),
                reason: reason.to_owned(),
            };
            if !t.capacity.is_finite() || t.capacity < 0.0 {
                return Err(bad("capacity must be finite and nonnegative"));
            }
            if !t.variable_cost.is_finite() || t.variable_cost < 0.0 {
                return Err(bad("variable cost must be finite and nonnegative"));
            }
            if !t.fixed_cost.is_finite() || t.fixed_cost < 0.0 {
                return Err(bad("fixed cost must be finite and nonnegative"));
            }
        }
        let max_vc = techs
            .iter()
            .map(|t| t.variable_cost)
            .fold(f64::NEG_INFINITY, f64::max);
        if !voll.is_finite() || (!techs.is_empty() && voll <= max_vc) || voll <= 0.0 {
            return Err(MarketError::VollBelowStack { voll, max_vc });
        }
        techs.sort_by(|a, b| {
            a.variable_cost
                .partial_cmp(&b.variable_cost)
                .expect("finite costs")
        });
        // Equal-cost technologies are indistinguishable to dispatch; merge them
        // so each breakpoint carries a unique price step.
        let mut merged: Vec<GenerationTech> = Vec::with_capacity(techs.len());
        for t in techs {
            match merged.last_mut() {
                Some(last) if last.variable_cost == t.variable_cost => {
                    last.capacity += t.capacity;
                    last.fixed_cost += t.fixed_cost;
                    last.name = format!("{}+{}", last.name, t.name);
                }
                _ => merged.push(t),
            }
        }
        let mut cum = Vec::with_capacity(merged.len());
        let mut acc = 0.0;
        for t in &merged {
            acc += t.capacity;
            cum.push(acc);
        }
        Ok(Self {
            techs: merged,
            cum_capacity: cum,
            voll,
        })
    }

    pub fn techs(&self) -> &[GenerationTech] {
        &self.techs
    }

    pub fn voll(&self) -> f64 {
        self.voll
    }

    /// Total dispatchable capacity, excluding the lost-load backstop.
    pub fn total_capacity(&self) -> f64 {
        self.cum_capacity.last().copied().unwrap_or(0.0)
    }

    /// Least-cost dispatch cost of serving `load`, filling the stack in merit
    /// order and pricing any shortfall at the value of lost load.
    pub fn dispatch_cost(&self, load: f64) -> Result<f64, MarketError> {
        if !(load >= 0.0) {
            return Err(MarketError::NegativeLoad(load));
        }
        let mut remaining = load;
        let mut cost = 0.0;
        for t in &self.techs {
            if remaining <= 0.0 {
                break;
            }
            let q = remaining.min(t.capacity);
            cost += t.variable_cost * q;
            remaining -= q;
        }
        if remaining > 0.0 {
            cost += self.voll * remaining;
        }
        Ok(cost)
    }

    /// Marginal cost of the stack at `load`, right-continuous at breakpoints.
    fn marginal_cost(&self, load: f64) -> f64 {
        // First technology whose cumulative capacity strictly exceeds `load`;
        // at a breakpoint this lands on the next step.
        let idx = self.cum_capacity.partition_point(|&c| c <= load);
        match self.techs.get(idx) {
            Some(t) => t.variable_cost,
            None => self.voll,
        }
    }

    /// Left and right marginal cost at `load`; they differ only when `load`
    /// sits (within `tol`) on a stack breakpoint, where the bracket spans the
    /// steps on both sides of the breakpoint.
    fn marginal_cost_bracket(&self, load: f64, tol: f64) -> (f64, f64) {
        let on_break = self
            .cum_capacity
            .iter()
            .any(|&c| (c - load).abs() <= tol && c > tol);
        if !on_break || load <= tol {
            let p = self.marginal_cost(load);
            return (p, p);
        }
        (
            self.marginal_cost(load - 2.0 * tol),
            self.marginal_cost(load + 2.0 * tol),
        )
    }
}

/// System price as a function of load.
#[derive(Debug, Clone)]
pub enum PriceCurve {
    /// Step function from a merit-order stack.
    MeritOrder(TechSet),
    /// Reduced form `intercept + slope * load`.
    Affine { intercept: f64, slope: f64 },
}

/// Result of inverting the price curve in load space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseLoad {
    pub load: f64,
    /// Set when the requested price sits below the price of serving zero load.
    pub at_floor: bool,
}

impl PriceCurve {
    pub fn affine(intercept: f64, slope: f64) -> Result<Self, MarketError> {
        if !(slope > 0.0) || !slope.is_finite() || !intercept.is_finite() {
            return Err(MarketError::NonPositiveSlope(slope));
        }
        Ok(Self::Affine { intercept, slope })
    }

    /// System price at a nonnegative load.
    pub fn price(&self, load: f64) -> Result<f64, MarketError> {
        if !(load >= 0.0) {
            return Err(MarketError::NegativeLoad(load));
        }
        Ok(self.price_unchecked(load))
    }

    fn price_unchecked(&self, load: f64) -> f64 {
        match self {
            Self::MeritOrder(set) => set.marginal_cost(load),
            Self::Affine { intercept, slope } => intercept + slope * load,
        }
    }

    /// Price at a net demand that may have been pushed below zero by storage
    /// charging against negative residual load; clamps to the zero-load price
    /// and reports the clamp.
    pub fn price_clamped(&self, net_load: f64) -> (f64, bool) {
        if net_load < 0.0 {
            (self.price_unchecked(0.0), true)
        } else {
            (self.price_unchecked(net_load), false)
        }
    }

    /// Left and right price limits at `load`. For an affine curve both sides
    /// agree; a merit-order stack opens a gap exactly on a breakpoint, where
    /// the clearing price is any value in between.
    pub fn price_bracket(&self, load: f64, tol: f64) -> (f64, f64) {
        match self {
            Self::MeritOrder(set) => set.marginal_cost_bracket(load, tol),
            Self::Affine { .. } => {
                let p = self.price_unchecked(load.max(0.0));
                (p, p)
            }
        }
    }

    /// Price of serving zero load: the cheapest step of the stack.
    pub fn price_floor(&self) -> f64 {
        self.price_unchecked(0.0)
    }

    /// Largest price the curve can produce (the lost-load value for a stack;
    /// unbounded for the affine form).
    pub fn price_cap(&self) -> f64 {
        match self {
            Self::MeritOrder(set) => set.voll,
            Self::Affine { .. } => f64::INFINITY,
        }
    }

    /// Generalized inverse: the largest load served at a price of at most `p`.
    ///
    /// Below the zero-load price this returns load 0 with `at_floor` set. For
    /// a stack, prices inside a step map to the step's upper breakpoint, and
    /// `p` at or above the lost-load value maps to unbounded load.
    pub fn inverse_price(&self, p: f64) -> InverseLoad {
        match self {
            Self::Affine { intercept, slope } => {
                if p < *intercept {
                    InverseLoad {
                        load: 0.0,
                        at_floor: true,
                    }
                } else {
                    InverseLoad {
                        load: (p - intercept) / slope,
                        at_floor: false,
                    }
                }
            }
            Self::MeritOrder(set) => {
                if set.techs.is_empty() || p < set.techs[0].variable_cost {
                    return InverseLoad {
                        load: 0.0,
                        at_floor: true,
                    };
                }
                if p >= set.voll {
                    return InverseLoad {
                        load: f64::INFINITY,
                        at_floor: false,
                    };
                }
                // Last technology still willing to run at price p.
                let idx = set.techs.partition_point(|t| t.variable_cost <= p);
                InverseLoad {
                    load: set.cum_capacity[idx - 1],
                    at_floor: false,
                }
            }
        }
    }
}

/// Profit-maximizing output of a price-taking generator with marginal cost
/// `variable_cost` and capacity `capacity` facing `price`. Indifferent at
/// `price == variable_cost`; full output by convention.
pub fn generator_optimal_output(price: f64, variable_cost: f64, capacity: f64) -> f64 {
    if price >= variable_cost {
        capacity
    } else {
        0.0
    }
}

/// Discrete load distribution: strictly increasing support with probabilities
/// summing to one.
#[derive(Debug, Clone)]
pub struct LoadGrid {
    values: Vec<f64>,
    probabilities: Vec<f64>,
}

impl LoadGrid {
    pub fn new(values: Vec<f64>, probabilities: Vec<f64>) -> Result<Self, MarketError> {
        if values.is_empty() || values.len() != probabilities.len() {
            return Err(MarketError::BadLoadGrid(format!(
                "need matching nonempty values/probabilities, got {}/{}",
                values.len(),
                probabilities.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MarketError::BadLoadGrid(
                "load values must be finite and nonnegative".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MarketError::BadLoadGrid(
                "load values must be strictly increasing".into(),
            ));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MarketError::BadLoadGrid(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MarketError::BadLoadGrid(format!(
                "probabilities sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self {
            values,
            probabilities,
        })
    }

    /// `n` equally spaced points on `[lo, hi]`, each with probability `1/n` —
    /// the discretization of a uniform load used throughout.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self, MarketError> {
        if n == 0 {
            return Err(MarketError::BadLoadGrid("need at least one point".into()));
        }
        if n == 1 {
            if lo != hi {
                return Err(MarketError::BadLoadGrid(
                    "a single-point grid needs lo == hi".into(),
                ));
            }
            return Self::new(vec![lo], vec![1.0]);
        }
        if !(hi > lo) {
            return Err(MarketError::BadLoadGrid(format!(
                "need hi > lo, got [{lo}, {hi}]"
            )));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let values = (0..n).map(|i| lo + step * i as f64).collect();
        let probabilities = vec![1.0 / n as f64; n];
        Self::new(values, probabilities)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Expectation of `f` over the load distribution.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.values
            .iter()
            .zip(&self.probabilities)
            .map(|(&v, &p)| p * f(v))
            .sum()
    }
}

/// Capacities that make each technology's energy margin cover exactly its
/// fixed cost under `loads`, ignoring storage: classic screening. Capacity of
/// each step extends to the load quantile where the duration of running falls
/// to the ratio of fixed-cost savings to variable-cost increase against the
/// next step (the lost-load backstop closes the stack).
///
/// Input technologies need positive, strictly decreasing fixed costs along
/// increasing variable cost; their `capacity` fields are ignored.
pub fn screening_capacities(
    techs: &[GenerationTech],
    voll: f64,
    loads: &LoadGrid,
) -> Result<Vec<GenerationTech>, MarketError> {
    if techs.is_empty() {
        return Ok(Vec::new());
    }
    let mut sorted = techs.to_vec();
    sorted.sort_by(|a, b| {
        a.variable_cost
            .partial_cmp(&b.variable_cost)
            .expect("finite costs")
    });
    let max_vc = sorted.last().expect("nonempty").variable_cost;
    if voll <= max_vc {
        return Err(MarketError::VollBelowStack { voll, max_vc });
    }
    // Duration of load at or above v under the discrete distribution.
    let duration = |v: f64| -> f64 {
        loads
            .values
            .iter()
            .zip(&loads.probabilities)
            .filter(|(&x, _)| x >= v)
            .map(|(_, &p)| p)
            .sum()
    };
    let mut out = Vec::with_capacity(sorted.len());
    let mut prev_break = 0.0;
    for i in 0..sorted.len() {
        let (next_vc, next_fc) = match sorted.get(i + 1) {
            Some(t) => (t.variable_cost, t.fixed_cost),
            None => (voll, 0.0),
        };
        let t = &sorted[i];
        if next_vc <= t.variable_cost || next_fc >= t.fixed_cost {
            return Err(MarketError::ScreeningInfeasible(t.name.clone()));
        }
        // Run duration at which this step and the next break even.
        let crossover = (t.fixed_cost - next_fc) / (next_vc - t.variable_cost);
        // Largest load still exceeded with at least that duration.
        let brk = loads
            .values
            .iter()
            .rev()
            .find(|&&v| duration(v) >= crossover)
            .copied()
            .unwrap_or(0.0)
            .max(prev_break);
        out.push(GenerationTech {
            capacity: brk - prev_break,
            ..t.clone()
        });
        prev_break = brk;
    }
    Ok(out)
}
