//! Monte Carlo validation: simulate the solved system forward with i.i.d.
//! load draws, and check that a small price-taking store following the same
//! price/continuation rule is privately optimal against the solved prices.
//!
//! Simulation deliberately does *not* snap storage levels to the grid: every
//! step re-solves the cell problem at the continuous opening level against
//! the converged expected-price vector, so grid resolution enters only
//! through that vector. Randomness comes from ChaCha8 streams seeded
//! explicitly, so every trajectory is reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::markov::{bracket_weights, ChainError};
use crate::numeric::solve_dense;
use crate::policy::PolicySolution;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial level {0} outside the storage bounds [{1}, {2}]")]
    BadInitial(f64, f64, f64),
    #[error("facility: {0}")]
    BadFacility(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("joint value system is singular (discount {0})")]
    SingularValue(f64),
}

/// One simulated interval.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRecord {
    /// Storage level entering the interval.
    pub opening: f64,
    pub load: f64,
    /// Storage level leaving the interval.
    pub closing: f64,
    /// Clearing price of the interval.
    pub price: f64,
    /// `δ·E[P+]` at the closing level.
    pub dep: f64,
    /// Energy revenue `price · (opening − closing)`.
    pub cashflow: f64,
}

/// A simulated path of the solved system.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed: u64,
    pub initial: f64,
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    /// Name of the generator behind `seed`, recorded in summaries.
    pub const RNG: &'static str = "chacha8";

    pub fn mean_price(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        self.records.iter().map(|r| r.price).sum::<f64>() / self.records.len() as f64
    }

    pub fn mean_cashflow(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        self.records.iter().map(|r| r.cashflow).sum::<f64>() / self.records.len() as f64
    }
}

/// Draw a load index by inverting the cumulative distribution.
fn draw_index(cum: &[f64], r: f64) -> usize {
    cum.partition_point(|&c| c <= r).min(cum.len() - 1)
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|&p| {
            acc += p;
            acc
        })
        .collect()
}

/// Simulate `intervals` steps from the middle storage level.
pub fn simulate(solution: &PolicySolution, intervals: usize, seed: u64) -> Trajectory {
    let mid = 0.5 * (solution.grid().s_min() + solution.grid().s_max());
    simulate_from(solution, intervals, seed, mid).expect("midpoint is always in bounds")
}

/// Simulate from an explicit initial level.
pub fn simulate_from(
    solution: &PolicySolution,
    intervals: usize,
    seed: u64,
    initial: f64,
) -> Result<Trajectory, SimError> {
    let (lo, hi) = (solution.grid().s_min(), solution.grid().s_max());
    if !(initial >= lo && initial <= hi) {
        return Err(SimError::BadInitial(initial, lo, hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cum = cumulative(solution.loads().probabilities());
    let values = solution.loads().values();
    let mut level = initial;
    let mut records = Vec::with_capacity(intervals);
    for _ in 0..intervals {
        let load = values[draw_index(&cum, rng.gen::<f64>())];
        let cell = solution.decide(level, load);
        records.push(TrajectoryRecord {
            opening: level,
            load,
            closing: cell.closing,
            price: cell.price,
            dep: cell.dep,
            cashflow: cell.price * (level - cell.closing),
        });
        level = cell.closing;
    }
    Ok(Trajectory {
        seed,
        initial,
        records,
    })
}

/// Empirical distribution of closing levels over the grid, with off-grid
/// levels split across their bracketing grid levels (mean-preserving, the
/// same convention as the transition matrix).
pub fn empirical_state_histogram(traj: &Trajectory, solution: &PolicySolution) -> Vec<f64> {
    let s_values = solution.grid().s_values();
    let mut mass = vec![0.0; s_values.len()];
    if traj.records.is_empty() {
        return mass;
    }
    let w = 1.0 / traj.records.len() as f64;
    for r in &traj.records {
        for (idx, frac) in bracket_weights(s_values, r.closing) {
            if frac > 0.0 {
                mass[idx] += w * frac;
            }
        }
    }
    mass
}

/// Total variation distance between two distributions on the same support.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Private optimality of a small price-taking store
// ---------------------------------------------------------------------------

/// Exact joint model of (facility level, system level) under the solved
/// prices, with the system moving on its snapped chain.
struct JointModel<'a> {
    solution: &'a PolicySolution,
    fac_values: Vec<f64>,
    /// Per (system state, load): snapped successor states and weights.
    sys_moves: Vec<Vec<[(usize, f64); 2]>>,
    /// Tie width for "price equals continuation".
    tie: f64,
}

impl<'a> JointModel<'a> {
    fn new(solution: &'a PolicySolution, fac_values: Vec<f64>) -> Self {
        let s_values = solution.grid().s_values();
        let sys_moves = solution
            .policy()
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&closing| bracket_weights(s_values, closing))
                    .collect()
            })
            .collect();
        Self {
            solution,
            fac_values,
            sys_moves,
            tie: 1e-7,
        }
    }

    fn n_f(&self) -> usize {
        self.fac_values.len()
    }

    fn n_s(&self) -> usize {
        self.solution.grid().len()
    }

    fn joint(&self, f: usize, s: usize) -> usize {
        f * self.n_s() + s
    }

    /// The price/continuation rule: empty when the price beats `δ·E[P+]`,
    /// fill when it falls short, hold when they tie.
    fn rule_action(&self, f: usize, s: usize, l: usize) -> usize {
        let price = self.solution.prices()[s][l];
        let dep = self.solution.deps()[s][l];
        if price > dep + self.tie {
            0
        } else if price < dep - self.tie {
            self.n_f() - 1
        } else {
            f
        }
    }

    /// Exact discounted value of a stationary facility policy on the joint
    /// chain, by dense linear solve of `(I − δP)v = r`.
    fn policy_value(&self, action: &dyn Fn(usize, usize, usize) -> usize) -> Result<Vec<f64>, SimError> {
        let (n_f, n_s) = (self.n_f(), self.n_s());
        let n = n_f * n_s;
        let discount = self.solution.grid().discount();
        let probs = self.solution.loads().probabilities();
        let mut a = vec![vec![0.0; n]; n];
        let mut r = vec![0.0; n];
        for f in 0..n_f {
            for s in 0..n_s {
                let row = self.joint(f, s);
                a[row][row] += 1.0;
                for (l, &lp) in probs.iter().enumerate() {
                    let act = action(f, s, l);
                    let price = self.solution.prices()[s][l];
                    r[row] += lp * price * (self.fac_values[f] - self.fac_values[act]);
                    for (s_next, w) in self.sys_moves[s][l] {
                        if w > 0.0 {
                            a[row][self.joint(act, s_next)] -= discount * lp * w;
                        }
                    }
                }
            }
        }
        solve_dense(a, r).ok_or(SimError::SingularValue(discount))
    }

    /// Stationary distribution of the joint chain under the rule, from the
    /// uniform start (transient interior facility levels simply drain).
    fn rule_stationary(&self) -> Vec<f64> {
        let (n_f, n_s) = (self.n_f(), self.n_s());
        let n = n_f * n_s;
        let probs = self.solution.loads().probabilities();
        let mut x = vec![1.0 / n as f64; n];
        for _ in 0..2_000_000 {
            let mut next = vec![0.0; n];
            for f in 0..n_f {
                for s in 0..n_s {
                    let mass = x[self.joint(f, s)];
                    if mass == 0.0 {
                        continue;
                    }
                    for (l, &lp) in probs.iter().enumerate() {
                        let act = self.rule_action(f, s, l);
                        for (s_next, w) in self.sys_moves[s][l] {
                            if w > 0.0 {
                                next[self.joint(act, s_next)] += mass * lp * w;
                            }
                        }
                    }
                }
            }
            let residual: f64 = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            x = next;
            if residual <= 1e-13 {
                break;
            }
        }
        x
    }

    /// Largest one-shot improvement any single-cell deviation from the rule
    /// can achieve against the rule's value function. Policy iteration stops
    /// exactly when this is nonpositive, so a vanishing margin certifies the
    /// rule against *every* stationary policy, not just the enumerated ones.
    fn deviation_margin(&self, v_rule: &[f64]) -> f64 {
        let discount = self.solution.grid().discount();
        let probs = self.solution.loads().probabilities();
        let mut margin = f64::NEG_INFINITY;
        for f in 0..self.n_f() {
            for s in 0..self.n_s() {
                for (l, _) in probs.iter().enumerate() {
                    let q = |act: usize| -> f64 {
                        let price = self.solution.prices()[s][l];
                        let mut q = price * (self.fac_values[f] - self.fac_values[act]);
                        for (s_next, w) in self.sys_moves[s][l] {
                            if w > 0.0 {
                                q += discount * w * v_rule[self.joint(act, s_next)];
                            }
                        }
                        q
                    };
                    let q_rule = q(self.rule_action(f, s, l));
                    for act in 0..self.n_f() {
                        margin = margin.max(q(act) - q_rule);
                    }
                }
            }
        }
        margin
    }
}

/// Outcome of the private-optimality validation of a small store of volume
/// `k` against the solved system.
#[derive(Debug, Clone)]
pub struct PrivateOptimalityReport {
    /// Long-run per-interval profit of the rule, `(1−δ)·E[V]` under the joint
    /// stationary distribution.
    pub stationary_profit: f64,
    /// Profit of one extra MWh of facility volume, `(1−δ)·d E[V]/dk`.
    pub marginal_profit: f64,
    /// Largest single-deviation improvement against the rule's value
    /// function; nonpositive (within rounding) certifies optimality.
    pub deviation_margin: f64,
    /// Stationary policies enumerated exhaustively (0 when the class was too
    /// large to enumerate).
    pub enumerated_policies: usize,
    /// Largest statewise value advantage of any enumerated policy over the
    /// rule.
    pub enumeration_gap: f64,
    /// Monte Carlo mean per-interval profit of the rule on the joint chain.
    pub empirical_profit: f64,
    /// Standard error of `empirical_profit`.
    pub empirical_se: f64,
}

/// Validate that a price-taking store of volume `facility_volume` can do no
/// better than the solved price/continuation rule, and measure the marginal
/// value of its capacity.
///
/// `facility_points` sets the facility grid used for the deviation
/// certificate and the enumeration; enumeration runs only when the policy
/// class `facility_points^(facility_points · #loads)` has at most
/// `enum_limit` members. `intervals`/`seed` drive the Monte Carlo cross-check
/// on the joint chain.
pub fn private_optimality_check(
    solution: &PolicySolution,
    facility_volume: f64,
    facility_points: usize,
    intervals: usize,
    seed: u64,
    enum_limit: usize,
) -> Result<PrivateOptimalityReport, SimError> {
    if !(facility_volume > 0.0) || facility_points < 2 {
        return Err(SimError::BadFacility(format!(
            "need positive volume and at least two levels, got {facility_volume} over {facility_points}"
        )));
    }
    let fac_values: Vec<f64> = (0..facility_points)
        .map(|i| facility_volume * i as f64 / (facility_points - 1) as f64)
        .collect();
    let model = JointModel::new(solution, fac_values);
    let discount = solution.grid().discount();

    let v_rule = model.policy_value(&|f, s, l| model.rule_action(f, s, l))?;
    let x_joint = model.rule_stationary();
    let e_v: f64 = x_joint.iter().zip(&v_rule).map(|(x, v)| x * v).sum();
    let stationary_profit = (1.0 - discount) * e_v;

    // Marginal value of capacity: difference quotient against a one-MWh
    // larger facility (values are exactly linear in volume, so the step size
    // does not matter).
    let bigger: Vec<f64> = (0..2).map(|i| (facility_volume + 1.0) * i as f64).collect();
    let two: Vec<f64> = (0..2).map(|i| facility_volume * i as f64).collect();
    let model_k = JointModel::new(solution, two);
    let model_k1 = JointModel::new(solution, bigger);
    let v_k = model_k.policy_value(&|f, s, l| model_k.rule_action(f, s, l))?;
    let v_k1 = model_k1.policy_value(&|f, s, l| model_k1.rule_action(f, s, l))?;
    let x_k = model_k.rule_stationary();
    let x_k1 = model_k1.rule_stationary();
    let e_k: f64 = x_k.iter().zip(&v_k).map(|(x, v)| x * v).sum();
    let e_k1: f64 = x_k1.iter().zip(&v_k1).map(|(x, v)| x * v).sum();
    let marginal_profit = (1.0 - discount) * (e_k1 - e_k);

    let deviation_margin = model.deviation_margin(&v_rule);

    // Exhaustive enumeration of facility policies conditioned on (own level,
    // load), evaluated exactly on the joint chain.
    let n_l = solution.loads().len();
    let cells = facility_points * n_l;
    let count = (facility_points as f64).powi(cells as i32);
    let (enumerated_policies, enumeration_gap) = if count <= enum_limit as f64 {
        let total = count as usize;
        let gap = (0..total)
            .into_par_iter()
            .map(|code| {
                // Mixed-radix decode: one action digit per (level, load) cell.
                let mut digits = vec![0usize; cells];
                let mut rest = code;
                for d in digits.iter_mut() {
                    *d = rest % facility_points;
                    rest /= facility_points;
                }
                let action = |f: usize, _s: usize, l: usize| digits[f * n_l + l];
                let v = model
                    .policy_value(&action)
                    .expect("policy chain shares the rule's discount");
                v.iter()
                    .zip(&v_rule)
                    .map(|(a, b)| a - b)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .reduce(|| f64::NEG_INFINITY, f64::max);
        (total, gap)
    } else {
        (0, f64::NEG_INFINITY)
    };

    // Monte Carlo on the joint chain itself: same model, pure sampling error.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cum = cumulative(solution.loads().probabilities());
    let (mut f, mut s) = (0usize, solution.grid().mid_index());
    let (mut total, mut total_sq) = (0.0, 0.0);
    for _ in 0..intervals {
        let l = draw_index(&cum, rng.gen::<f64>());
        let act = model.rule_action(f, s, l);
        let pi = solution.prices()[s][l] * (model.fac_values[f] - model.fac_values[act]);
        total += pi;
        total_sq += pi * pi;
        let moves = model.sys_moves[s][l];
        let r = rng.gen::<f64>();
        s = if r < moves[0].1 { moves[0].0 } else { moves[1].0 };
        f = act;
    }
    let n = intervals.max(1) as f64;
    let empirical_profit = total / n;
    let variance = (total_sq / n - empirical_profit * empirical_profit).max(0.0);
    let empirical_se = (variance / n).sqrt();

    Ok(PrivateOptimalityReport {
        stationary_profit,
        marginal_profit,
        deviation_margin,
        enumerated_policies,
        enumeration_gap,
        empirical_profit,
        empirical_se,
    })
}
