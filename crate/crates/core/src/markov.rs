//! The Markov chain the optimal policy induces on storage levels, its
//! stationary distribution, and the discounted-sum identity used to turn
//! stationary means into present values.

use thiserror::Error;

use crate::policy::PolicySolution;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("transition matrix must be square and row-stochastic: {0}")]
    NotStochastic(String),
    #[error("power iteration stalled after {iterations} steps, residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("discount factor must lie strictly inside (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Row-stochastic transition matrix over storage grid levels.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ChainError> {
        let n = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ChainError::NotStochastic(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0) || p > 1.0 + 1e-12) {
                return Err(ChainError::NotStochastic(format!(
                    "row {i} has entries outside [0, 1]"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(ChainError::NotStochastic(format!(
                    "row {i} sums to {total}"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Left action `x ↦ xM`.
    pub fn propagate(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n];
        for (xi, row) in x.iter().zip(&self.rows) {
            if *xi == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(row) {
                *o += xi * p;
            }
        }
        out
    }

    /// Whether every state communicates with every other along positive-
    /// probability edges.
    pub fn is_irreducible(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return false;
        }
        // Strong connectivity == everything reachable from state 0, and state
        // 0 reachable from everything.
        let reach = |forward: bool| -> usize {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 1;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let p = if forward {
                        self.rows[i][j]
                    } else {
                        self.rows[j][i]
                    };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        count += 1;
                        stack.push(j);
                    }
                }
            }
            count
        };
        reach(true) == n && reach(false) == n
    }
}

/// Stationary distribution over grid levels, with solve diagnostics.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    mass: Vec<f64>,
    residual: f64,
    iterations: usize,
    /// The chain is not irreducible; the distribution returned is the one
    /// reached by power iteration from the uniform start.
    pub reducible: bool,
}

impl StationaryDistribution {
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `‖xM − x‖₁` at the returned distribution.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Expectation of `g` over the distribution.
    pub fn expect(&self, g: &[f64]) -> f64 {
        debug_assert_eq!(g.len(), self.mass.len());
        self.mass.iter().zip(g).map(|(&x, &v)| x * v).sum()
    }
}

/// Split a closing level across the two bracketing grid levels so that the
/// expected level is preserved exactly; levels on the grid keep unit mass.
/// Returns up to two `(index, weight)` pairs.
pub fn bracket_weights(s_values: &[f64], closing: f64) -> [(usize, f64); 2] {
    let n = s_values.len();
    if n == 1 || closing <= s_values[0] {
        return [(0, 1.0), (0, 0.0)];
    }
    if closing >= s_values[n - 1] {
        return [(n - 1, 1.0), (n - 1, 0.0)];
    }
    let hi = s_values.partition_point(|&v| v <= closing);
    let (lo_v, hi_v) = (s_values[hi - 1], s_values[hi]);
    let w_hi = (closing - lo_v) / (hi_v - lo_v);
    [(hi - 1, 1.0 - w_hi), (hi, w_hi)]
}

/// Transition matrix of the solved policy: the load-probability mixture of
/// each cell's closing level, with off-grid closing levels split across their
/// bracketing grid levels (mean-preserving).
pub fn transition_matrix(solution: &PolicySolution) -> TransitionMatrix {
    let s_values = solution.grid().s_values();
    let probs = solution.loads().probabilities();
    let rows = solution
        .policy()
        .iter()
        .map(|row| {
            let mut out = vec![0.0; s_values.len()];
            for (&closing, &p) in row.iter().zip(probs) {
                for (idx, w) in bracket_weights(s_values, closing) {
                    if w > 0.0 {
                        out[idx] += p * w;
                    }
                }
            }
            out
        })
        .collect();
    TransitionMatrix::new(rows).expect("policy rows are stochastic by construction")
}

/// Stationary distribution by power iteration from the uniform start, run to
/// `‖xM − x‖₁ ≤ tol`. A reducible chain is reported, not rejected: the
/// distribution returned is then the limit from the uniform start.
pub fn stationary_distribution(
    m: &TransitionMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryDistribution, ChainError> {
    let n = m.len();
    if n == 0 {
        return Err(ChainError::NotStochastic("empty matrix".into()));
    }
    let mut x = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let next = m.propagate(&x);
        residual = x
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        x = next;
        if residual <= tol {
            // Kill accumulated rounding drift in the total mass.
            let total: f64 = x.iter().sum();
            for v in &mut x {
                *v /= total;
            }
            return Ok(StationaryDistribution {
                mass: x,
                residual,
                iterations: iter,
                reducible: !m.is_irreducible(),
            });
        }
    }
    Err(ChainError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Expected discounted sum of `g` along the stationary chain started from its
/// stationary distribution: `E_x[Σ δ^t g] = E_x[g] / (1 − δ)`.
///
/// This is the identity that lets stationary means stand in for present
/// values; it needs `δ` strictly inside `(0, 1)`.
pub fn stationary_recursive_solve(
    g: &[f64],
    discount: f64,
    x: &StationaryDistribution,
) -> Result<f64, ChainError> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(ChainError::BadDiscount(discount));
    }
    if g.len() != x.mass().len() {
        return Err(ChainError::Dimension(format!(
            "{} values against {} states",
            g.len(),
            x.mass().len()
        )));
    }
    Ok(x.expect(g) / (1.0 - discount))
}
