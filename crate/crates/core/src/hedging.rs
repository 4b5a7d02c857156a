//! Replicating hedge for storage cashflows.
//!
//! The energy revenue of an optimally run store, `π = P·(s − s+)`, is exactly
//! replicated interval by interval by a static portfolio read off the solved
//! policy:
//!
//! * a **cap** on the volume below the store (`s − s_min`), struck at the
//!   discounted expected price of an *empty* store — the level above which
//!   the store discharges completely,
//! * a **floor** on the headroom above the store (`s_max − s`), struck at the
//!   discounted expected price of a *full* store — the level below which it
//!   charges completely,
//! * an **s-shaped** leg paying `(s − s+)·δE[P+]` — the energy moved, settled
//!   at the continuation value rather than the spot price.
//!
//! Caps and floors alone cannot do it: the s-shaped leg carries the interior
//! trades where price equals continuation, and dropping it leaves residual
//! variance. Both facts are exercised in the tests and the acceptance suite.

use thiserror::Error;

use crate::montecarlo::Trajectory;
use crate::policy::PolicySolution;

#[derive(Debug, Error)]
pub enum HedgeError {
    #[error("record {index}: {detail}")]
    PolicyMismatch { index: usize, detail: String },
}

/// One-sided option payoffs on the interval price.
///
/// The cap pays `(P − strike)·volume` when `P ≥ strike`; the floor pays
/// `(strike − P)·volume` when `P < strike`. At `P == strike` both legs pay
/// zero, so the closed/open boundary choice never moves money.
pub fn cap_payoff(price: f64, strike: f64, volume: f64) -> f64 {
    debug_assert!(volume >= 0.0);
    if price >= strike {
        (price - strike) * volume
    } else {
        0.0
    }
}

pub fn floor_payoff(price: f64, strike: f64, volume: f64) -> f64 {
    debug_assert!(volume >= 0.0);
    if price < strike {
        (strike - price) * volume
    } else {
        0.0
    }
}

/// Strikes of the replicating collar, from the ends of the solved
/// expected-price vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedgeStrikes {
    /// `δ·E[P+ | full]`: below this the store charges to the top.
    pub floor: f64,
    /// `δ·E[P+ | empty]`: above this the store discharges to the bottom.
    pub cap: f64,
}

impl HedgeStrikes {
    pub fn from_solution(solution: &PolicySolution) -> Self {
        let discount = solution.grid().discount();
        let ep = solution.ep();
        Self {
            floor: discount * ep.last().expect("nonempty grid"),
            cap: discount * ep[0],
        }
    }
}

/// Volume bounds of the hedged facility (the whole system store in the
/// demos, but any price-taking store with the same rule works).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacilityBounds {
    pub s_min: f64,
    pub s_max: f64,
}

impl FacilityBounds {
    pub fn from_solution(solution: &PolicySolution) -> Self {
        Self {
            s_min: solution.grid().s_min(),
            s_max: solution.grid().s_max(),
        }
    }
}

/// The closing level the price/continuation rule mandates; `realized` breaks
/// the tie when price and continuation coincide (any choice is then
/// revenue-neutral).
pub fn optimal_closing(
    price: f64,
    dep: f64,
    bounds: FacilityBounds,
    realized: f64,
    tie: f64,
) -> f64 {
    if price > dep + tie {
        bounds.s_min
    } else if price < dep - tie {
        bounds.s_max
    } else {
        realized.clamp(bounds.s_min, bounds.s_max)
    }
}

/// Exact per-interval hedge payoff: `P·(s − s*) − δE[P+]·(s+ − s*)`, where
/// `s*` is the rule's closing level. Along an optimal path (`s+ == s*`) this
/// collapses to the cashflow `π` itself; any feasible deviation leaves the
/// hedged net `π − H = (s* − s+)·(P − δE[P+])`, which never rewards straying
/// from the rule.
pub fn perfect_hedge_payoff(
    opening: f64,
    closing: f64,
    rule_closing: f64,
    price: f64,
    dep: f64,
) -> f64 {
    price * (opening - rule_closing) - dep * (closing - rule_closing)
}

/// The same payoff split into tradable legs.
#[derive(Debug, Clone, Copy)]
pub struct HedgeComponents {
    pub floor_volume: f64,
    pub floor_cashflow: f64,
    pub cap_volume: f64,
    pub cap_cashflow: f64,
    pub s_shaped_cashflow: f64,
}

impl HedgeComponents {
    pub fn total(&self) -> f64 {
        self.floor_cashflow + self.cap_cashflow + self.s_shaped_cashflow
    }
}

/// Decompose the interval hedge into floor + cap + s-shaped legs.
///
/// Given a cell of the solved policy (`price`, `dep` at the realized closing
/// level), the sum of the legs reproduces [`perfect_hedge_payoff`]
/// identically: on a discharge-to-empty interval only the cap is in the
/// money and `dep` equals the cap strike, on a charge-to-full interval only
/// the floor pays and `dep` equals the floor strike, and on interior
/// intervals both options lapse while the s-shaped leg settles the energy
/// moved at `dep == price`.
pub fn decompose(
    opening: f64,
    closing: f64,
    price: f64,
    dep: f64,
    bounds: FacilityBounds,
    strikes: HedgeStrikes,
) -> HedgeComponents {
    let floor_volume = bounds.s_max - opening;
    let cap_volume = opening - bounds.s_min;
    HedgeComponents {
        floor_volume,
        floor_cashflow: floor_payoff(price, strikes.floor, floor_volume),
        cap_volume,
        cap_cashflow: cap_payoff(price, strikes.cap, cap_volume),
        s_shaped_cashflow: (opening - closing) * dep,
    }
}

/// One settled interval: state, market outcome, and every hedge leg.
#[derive(Debug, Clone, Copy)]
pub struct SettlementRow {
    pub opening: f64,
    pub load: f64,
    pub price: f64,
    /// `δ·E[P+]` at the interval's closing level.
    pub dep: f64,
    /// Energy revenue `price · (opening − closing)`.
    pub cashflow: f64,
    pub floor_volume: f64,
    pub floor_cashflow: f64,
    pub cap_volume: f64,
    pub cap_cashflow: f64,
    pub s_shaped_cashflow: f64,
    /// Sum of the three hedge legs.
    pub total: f64,
}

/// Settle every interval of a simulated trajectory against the replicating
/// portfolio of the solved policy.
///
/// Fails if the trajectory contradicts the policy the solution prescribes
/// (wrong bound on a strict-inequality interval, broken level chaining, or a
/// cashflow that does not match its own price and energy).
pub fn settlement_table(
    traj: &Trajectory,
    solution: &PolicySolution,
) -> Result<Vec<SettlementRow>, HedgeError> {
    let bounds = FacilityBounds::from_solution(solution);
    let strikes = HedgeStrikes::from_solution(solution);
    let tie = 1e-6;
    let mut rows = Vec::with_capacity(traj.records.len());
    let mut expected_opening = traj.initial;
    for (index, r) in traj.records.iter().enumerate() {
        let mismatch = |detail: String| HedgeError::PolicyMismatch { index, detail };
        if (r.opening - expected_opening).abs() > 1e-9 {
            return Err(mismatch(format!(
                "opening level {} does not chain from previous closing {expected_opening}",
                r.opening
            )));
        }
        if r.price > r.dep + tie && (r.closing - bounds.s_min).abs() > tie {
            return Err(mismatch(format!(
                "price {} above continuation {} requires discharge to {}, got {}",
                r.price, r.dep, bounds.s_min, r.closing
            )));
        }
        if r.price < r.dep - tie && (bounds.s_max - r.closing).abs() > tie {
            return Err(mismatch(format!(
                "price {} below continuation {} requires charge to {}, got {}",
                r.price, r.dep, bounds.s_max, r.closing
            )));
        }
        let pi = r.price * (r.opening - r.closing);
        if (pi - r.cashflow).abs() > 1e-6 * (1.0 + pi.abs()) {
            return Err(mismatch(format!(
                "cashflow {} inconsistent with price and energy ({pi})",
                r.cashflow
            )));
        }
        let legs = decompose(r.opening, r.closing, r.price, r.dep, bounds, strikes);
        rows.push(SettlementRow {
            opening: r.opening,
            load: r.load,
            price: r.price,
            dep: r.dep,
            cashflow: r.cashflow,
            floor_volume: legs.floor_volume,
            floor_cashflow: legs.floor_cashflow,
            cap_volume: legs.cap_volume,
            cap_cashflow: legs.cap_cashflow,
            s_shaped_cashflow: legs.s_shaped_cashflow,
            total: legs.total(),
        });
        expected_opening = r.closing;
    }
    Ok(rows)
}

/// Population variance of the hedged net when only the collar (cap + floor)
/// is held, without the s-shaped leg. Strictly positive whenever the store
/// trades in the interior band — the reason the collar alone cannot
/// replicate storage.
pub fn collar_only_variance(rows: &[SettlementRow]) -> f64 {
    variance(
        rows.iter()
            .map(|r| r.cashflow - r.floor_cashflow - r.cap_cashflow),
    )
}

/// Population variance of the fully hedged net `π − total`; zero up to
/// root-finding accuracy.
pub fn hedged_net_variance(rows: &[SettlementRow]) -> f64 {
    variance(rows.iter().map(|r| r.cashflow - r.total))
}

fn variance(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}
