//! Storage-aware power market analysis.
//!
//! Everything runs on a small discrete model: an i.i.d. load distribution, a
//! price curve from a merit-order stack (or its affine reduction), and a
//! volume-limited, lossless, non-rate-limited store. On top of the solved
//! storage policy the crate derives the induced Markov chain and stationary
//! distribution, screening-style investment signals, a replicating hedge
//! portfolio for storage cashflows, and Monte Carlo simulation for
//! validation. The `scenario` module binds it all to config files and CSV
//! artifacts for the command-line front end.

pub mod hedging;
pub mod investment;
pub mod market;
pub mod markov;
pub mod montecarlo;
pub mod numeric;
pub mod policy;
pub mod scenario;

pub use hedging::{
    cap_payoff, decompose, floor_payoff, perfect_hedge_payoff, settlement_table, FacilityBounds,
    HedgeError, HedgeStrikes, SettlementRow,
};
pub use investment::{
    margin_report, optimal_storage_capacity, price_duration_curve, storage_marginal_benefit,
    CapacitySearch, InvestmentError, OptimalCapacity, PriceDurationCurve, SearchOutcome,
};
pub use market::{
    generator_optimal_output, screening_capacities, GenerationTech, InverseLoad, LoadGrid,
    MarketError, PriceCurve, TechSet,
};
pub use markov::{
    bracket_weights, stationary_distribution, stationary_recursive_solve, transition_matrix,
    ChainError, StationaryDistribution, TransitionMatrix,
};
pub use montecarlo::{
    private_optimality_check, simulate, simulate_from, PrivateOptimalityReport, SimError,
    Trajectory, TrajectoryRecord,
};
pub use policy::{
    expected_next_price, policy_update, price_field, solve_policy, threshold_loads, CellClass,
    CellOutcome, ChargeBand, PolicySolution, SolveError, SolveOptions, StorageGrid,
};
pub use scenario::{Command, RunError, RunOutput, ScenarioConfig};
