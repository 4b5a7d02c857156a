//! Config-driven scenario runner: parse a flat key/value scenario file,
//! solve the requested pieces, and write plot-ready CSV tables and reports.
//!
//! The file format is deliberately minimal — `key = value` lines, `#`
//! comments, dotted section prefixes (`market.`, `load.`, `storage.`,
//! `solver.`, `sim.`, `mb.`, `search.`, `stationary.`) — and strict:
//! unknown or duplicate keys are rejected before anything is solved, so a
//! typo can never silently fall back to a default. All artifacts are plain
//! CSV or `key = value` text, written with the shortest round-trip float
//! representation so identical inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hedging::{collar_only_variance, hedged_net_variance, settlement_table, HedgeStrikes};
use crate::investment::{
    optimal_storage_capacity, price_duration_curve, storage_marginal_benefit, CapacitySearch,
    InvestmentError, SearchOutcome,
};
use crate::market::{screening_capacities, GenerationTech, LoadGrid, PriceCurve, TechSet};
use crate::markov::{stationary_distribution, transition_matrix, StationaryDistribution};
use crate::montecarlo::{simulate_from, Trajectory};
use crate::policy::{
    solve_policy, CellClass, PolicySolution, SolveError, SolveOptions, StorageGrid,
};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum RunError {
    /// Bad configuration or validation failure; nothing was written.
    #[error("config: {0}")]
    Config(String),
    /// A fixed point did not converge; the residual history file named in
    /// the message was written before giving up.
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code the runner maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::NonConvergence(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the system price responds to load.
#[derive(Debug, Clone)]
pub enum MarketModel {
    Affine {
        intercept: f64,
        slope: f64,
    },
    Merit {
        techs: Vec<GenerationTech>,
        voll: f64,
        /// Derive capacities from the screening rule instead of taking them
        /// from the config.
        screening: bool,
    },
}

/// Break-even storage capacity search parameters.
#[derive(Debug, Clone)]
pub struct SearchSettings {
    pub lower: f64,
    pub upper: f64,
    pub capacity_tol: f64,
    /// Storage fixed cost the marginal benefit must cover ($/MWh per h).
    pub fixed_cost: f64,
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Output file prefix.
    pub case: String,
    pub seed: u64,
    pub market: MarketModel,
    pub load_min: f64,
    pub load_max: f64,
    pub load_points: usize,
    /// Storage capacities (MWh); multi-valued commands emit one file each.
    pub sizes: Vec<f64>,
    pub storage_points: usize,
    pub delta_t: f64,
    pub discount: f64,
    pub solve: SolveOptions,
    pub stationary_tol: f64,
    pub stationary_max_iter: usize,
    pub sim_intervals: usize,
    /// Starting level for simulations; defaults to mid-store.
    pub sim_initial: Option<f64>,
    /// Capacities of the marginal-benefit sweep.
    pub mb_sizes: Vec<f64>,
    pub search: Option<SearchSettings>,
}

/// Key/value pairs with take-and-check-leftovers semantics.
struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn parse(text: &str) -> Result<Self, RunError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(cut) => &raw[..cut],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RunError::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    idx + 1
                )));
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() || value.is_empty() {
                return Err(RunError::Config(format!(
                    "line {}: empty key or value",
                    idx + 1
                )));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(RunError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    idx + 1
                )));
            }
        }
        Ok(Self(map))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>, RunError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                RunError::Config(format!("key `{key}`: not a number: {v:?}"))
            }),
        }
    }

    fn req_f64(&mut self, key: &str) -> Result<f64, RunError> {
        self.take_f64(key)?
            .ok_or_else(|| RunError::Config(format!("missing required key `{key}`")))
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>, RunError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                RunError::Config(format!("key `{key}`: not a nonnegative integer: {v:?}"))
            }),
        }
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>, RunError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                RunError::Config(format!("key `{key}`: not a nonnegative integer: {v:?}"))
            }),
        }
    }

    fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>, RunError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|_| {
                        RunError::Config(format!(
                            "key `{key}`: not a comma-separated number list: {v:?}"
                        ))
                    })
                })
                .collect::<Result<Vec<f64>, _>>()
                .map(Some),
        }
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.0.keys().any(|k| k.starts_with(prefix))
    }

    /// Fail on anything not consumed, so typos never pass silently.
    fn finish(self) -> Result<(), RunError> {
        match self.0.into_iter().next() {
            Some((key, _)) => Err(RunError::Config(format!("unknown key `{key}`"))),
            None => Ok(()),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, RunError> {
        let mut p = Pairs::parse(text)?;

        let case = p
            .take("case")
            .ok_or_else(|| RunError::Config("missing required key `case`".into()))?;
        if case.is_empty()
            || !case
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(RunError::Config(format!(
                "case name must be alphanumeric with - or _, got {case:?}"
            )));
        }
        let seed = p.take_u64("seed")?.unwrap_or(0);

        let market = Self::parse_market(&mut p)?;

        let load_min = p.take_f64("load.min")?.unwrap_or(0.0);
        let load_max = p.req_f64("load.max")?;
        let load_points = p
            .take_usize("load.points")?
            .ok_or_else(|| RunError::Config("missing required key `load.points`".into()))?;
        if !(load_max > load_min) {
            return Err(RunError::Config(format!(
                "need load.max > load.min, got [{load_min}, {load_max}]"
            )));
        }
        if load_points < 2 {
            return Err(RunError::Config("load.points must be at least 2".into()));
        }

        let single = p.take_f64("storage.size")?;
        let many = p.take_f64_list("storage.sizes")?;
        let sizes = match (single, many) {
            (Some(_), Some(_)) => {
                return Err(RunError::Config(
                    "give either `storage.size` or `storage.sizes`, not both".into(),
                ))
            }
            (Some(k), None) => vec![k],
            (None, Some(list)) => list,
            (None, None) => {
                return Err(RunError::Config(
                    "missing `storage.size` (or `storage.sizes`)".into(),
                ))
            }
        };
        if sizes.is_empty() {
            return Err(RunError::Config("`storage.sizes` must be nonempty".into()));
        }
        for &k in &sizes {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(RunError::Config(format!(
                    "storage sizes must be finite and nonnegative, got {k}"
                )));
            }
        }
        let storage_points = p.take_usize("storage.points")?.unwrap_or(101);
        if storage_points < 2 {
            return Err(RunError::Config("storage.points must be at least 2".into()));
        }
        let delta_t = p.take_f64("storage.delta_t")?.unwrap_or(1.0);
        if !(delta_t > 0.0) {
            return Err(RunError::Config(format!(
                "storage.delta_t must be positive, got {delta_t}"
            )));
        }
        let discount = p.req_f64("storage.discount")?;
        if !(discount > 0.0 && discount < 1.0) {
            return Err(RunError::Config(format!(
                "storage.discount must lie strictly inside (0, 1), got {discount}"
            )));
        }

        let defaults = SolveOptions::default();
        let solve = SolveOptions {
            tol: p.take_f64("solver.tol")?.unwrap_or(defaults.tol),
            max_iter: p
                .take_usize("solver.max_iter")?
                .unwrap_or(defaults.max_iter),
            damping: p.take_f64("solver.damping")?.unwrap_or(defaults.damping),
            root_tol: p.take_f64("solver.root_tol")?.unwrap_or(defaults.root_tol),
        };
        if !(solve.tol > 0.0) || !(solve.root_tol > 0.0) {
            return Err(RunError::Config(
                "solver tolerances must be positive".into(),
            ));
        }
        if !(solve.damping > 0.0 && solve.damping <= 1.0) {
            return Err(RunError::Config(format!(
                "solver.damping must lie in (0, 1], got {}",
                solve.damping
            )));
        }

        let stationary_tol = p.take_f64("stationary.tol")?.unwrap_or(1e-12);
        let stationary_max_iter = p.take_usize("stationary.max_iter")?.unwrap_or(1_000_000);
        if !(stationary_tol > 0.0) {
            return Err(RunError::Config("stationary.tol must be positive".into()));
        }

        let sim_intervals = p.take_usize("sim.intervals")?.unwrap_or(10_000);
        if sim_intervals == 0 {
            return Err(RunError::Config("sim.intervals must be at least 1".into()));
        }
        let sim_initial = p.take_f64("sim.initial")?;

        let mb_sizes = p.take_f64_list("mb.sizes")?.unwrap_or_default();
        for &k in &mb_sizes {
            if !(k >= 0.0) || !k.is_finite() {
                return Err(RunError::Config(format!(
                    "mb.sizes entries must be finite and nonnegative, got {k}"
                )));
            }
        }

        let search = if p.has_prefix("search.") {
            let lower = p.req_f64("search.lower")?;
            let upper = p.req_f64("search.upper")?;
            let fixed_cost = p.req_f64("search.fixed_cost")?;
            let capacity_tol = p
                .take_f64("search.capacity_tol")?
                .unwrap_or(0.01 * (load_max - load_min));
            if !(lower > 0.0 && upper > lower) {
                return Err(RunError::Config(format!(
                    "need 0 < search.lower < search.upper, got [{lower}, {upper}]"
                )));
            }
            if !(capacity_tol > 0.0) {
                return Err(RunError::Config(
                    "search.capacity_tol must be positive".into(),
                ));
            }
            if !(fixed_cost > 0.0) {
                return Err(RunError::Config(
                    "search.fixed_cost must be positive".into(),
                ));
            }
            Some(SearchSettings {
                lower,
                upper,
                capacity_tol,
                fixed_cost,
            })
        } else {
            None
        };

        p.finish()?;
        Ok(Self {
            case,
            seed,
            market,
            load_min,
            load_max,
            load_points,
            sizes,
            storage_points,
            delta_t,
            discount,
            solve,
            stationary_tol,
            stationary_max_iter,
            sim_intervals,
            sim_initial,
            mb_sizes,
            search,
        })
    }

    fn parse_market(p: &mut Pairs) -> Result<MarketModel, RunError> {
        let kind = p
            .take("market.kind")
            .ok_or_else(|| RunError::Config("missing required key `market.kind`".into()))?;
        match kind.as_str() {
            "affine" => {
                let intercept = p.req_f64("market.intercept")?;
                let slope = p.req_f64("market.slope")?;
                if !(slope > 0.0) {
                    return Err(RunError::Config(format!(
                        "market.slope must be positive, got {slope}"
                    )));
                }
                Ok(MarketModel::Affine { intercept, slope })
            }
            "merit" => {
                let voll = p.req_f64("market.voll")?;
                let screening = match p.take("market.capacities").as_deref() {
                    None | Some("explicit") => false,
                    Some("screening") => true,
                    Some(other) => {
                        return Err(RunError::Config(format!(
                            "market.capacities must be `explicit` or `screening`, got {other:?}"
                        )))
                    }
                };
                let mut techs = Vec::new();
                for i in 0.. {
                    let prefix = format!("market.tech.{i}.");
                    if !p.has_prefix(&prefix) {
                        break;
                    }
                    let name = p
                        .take(&format!("{prefix}name"))
                        .unwrap_or_else(|| format!("tech{i}"));
                    let variable_cost = p.req_f64(&format!("{prefix}variable_cost"))?;
                    let fixed_cost = p.req_f64(&format!("{prefix}fixed_cost"))?;
                    let capacity = match (screening, p.take_f64(&format!("{prefix}capacity"))?) {
                        (true, Some(_)) => {
                            return Err(RunError::Config(format!(
                                "{prefix}capacity conflicts with market.capacities = screening"
                            )))
                        }
                        (true, None) => 0.0,
                        (false, Some(c)) => c,
                        (false, None) => {
                            return Err(RunError::Config(format!(
                                "missing required key `{prefix}capacity`"
                            )))
                        }
                    };
                    techs.push(GenerationTech::new(&name, variable_cost, fixed_cost, capacity));
                }
                if techs.is_empty() {
                    return Err(RunError::Config(
                        "merit market needs at least `market.tech.0.*`".into(),
                    ));
                }
                Ok(MarketModel::Merit {
                    techs,
                    voll,
                    screening,
                })
            }
            other => Err(RunError::Config(format!(
                "market.kind must be `affine` or `merit`, got {other:?}"
            ))),
        }
    }

    pub fn load_grid(&self) -> Result<LoadGrid, RunError> {
        LoadGrid::uniform(self.load_min, self.load_max, self.load_points)
            .map_err(|e| RunError::Config(e.to_string()))
    }

    /// Materialize the price curve, running the screening rule if asked.
    /// Notes report derived capacities so runs are self-documenting.
    pub fn build_curve(&self, loads: &LoadGrid) -> Result<(PriceCurve, Vec<String>), RunError> {
        match &self.market {
            MarketModel::Affine { intercept, slope } => {
                let curve = PriceCurve::affine(*intercept, *slope)
                    .map_err(|e| RunError::Config(e.to_string()))?;
                Ok((curve, Vec::new()))
            }
            MarketModel::Merit {
                techs,
                voll,
                screening,
            } => {
                let mut notes = Vec::new();
                let sized = if *screening {
                    let sized = screening_capacities(techs, *voll, loads)
                        .map_err(|e| RunError::Config(e.to_string()))?;
                    for t in &sized {
                        notes.push(format!("screening capacity {} = {} MW", t.name, t.capacity));
                    }
                    sized
                } else {
                    techs.clone()
                };
                let set = TechSet::new(sized, *voll)
                    .map_err(|e| RunError::Config(e.to_string()))?;
                Ok((PriceCurve::MeritOrder(set), notes))
            }
        }
    }

    fn grid_for(&self, size: f64) -> Result<StorageGrid, RunError> {
        let points = if size == 0.0 { 1 } else { self.storage_points };
        StorageGrid::uniform(0.0, size, points, self.delta_t, self.discount)
            .map_err(|e| RunError::Config(e.to_string()))
    }

    /// The single capacity commands like `simulate` operate on.
    fn single_size(&self, command: Command) -> Result<f64, RunError> {
        match self.sizes.as_slice() {
            [k] => Ok(*k),
            many => Err(RunError::Config(format!(
                "{} needs exactly one storage size, got {}",
                command.name(),
                many.len()
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Solve the policy; emit the per-state price/continuation CSV and the
    /// full policy table.
    Solve,
    /// Stationary storage-level distribution.
    Stationary,
    /// Stationary price-duration curve.
    PdCurve,
    /// Marginal benefit of capacity across a sweep of sizes.
    MarginalBenefit,
    /// Break-even capacity against the storage fixed cost.
    OptimalCapacity,
    /// Simulate and settle the replicating hedge.
    HedgeDemo,
    /// Simulate a trajectory.
    Simulate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Stationary => "stationary",
            Command::PdCurve => "pd-curve",
            Command::MarginalBenefit => "marginal-benefit",
            Command::OptimalCapacity => "optimal-capacity",
            Command::HedgeDemo => "hedge-demo",
            Command::Simulate => "simulate",
        }
    }
}

/// Artifacts written by a run plus human-readable notes.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl RunOutput {
    fn write(&mut self, path: PathBuf, content: String) -> Result<(), RunError> {
        fs::write(&path, content)?;
        self.files.push(path);
        Ok(())
    }
}

/// Execute one command of a validated scenario, writing artifacts under
/// `out_dir` (created if missing).
pub fn run(command: Command, config: &ScenarioConfig, out_dir: &Path) -> Result<RunOutput, RunError> {
    fs::create_dir_all(out_dir)?;
    let loads = config.load_grid()?;
    let (curve, notes) = config.build_curve(&loads)?;
    let mut out = RunOutput {
        files: Vec::new(),
        notes,
    };
    match command {
        Command::Solve => {
            for &size in &config.sizes {
                let sol = solve_size(config, &curve, &loads, size, out_dir)?;
                out.notes.push(format!(
                    "size {size}: converged in {} iterations, residual {:e}",
                    sol.iterations(),
                    sol.residual()
                ));
                out.write(artifact(out_dir, config, size, ".csv"), state_csv(&sol))?;
                out.write(artifact(out_dir, config, size, "-policy.csv"), policy_csv(&sol))?;
            }
        }
        Command::Stationary => {
            for &size in &config.sizes {
                let sol = solve_size(config, &curve, &loads, size, out_dir)?;
                let x = stationary(config, &sol)?;
                if x.reducible {
                    out.notes
                        .push(format!("size {size}: chain is reducible (expected at 0)"));
                }
                out.write(artifact(out_dir, config, size, "-sd.csv"), sd_csv(&sol, &x))?;
            }
        }
        Command::PdCurve => {
            for &size in &config.sizes {
                let sol = solve_size(config, &curve, &loads, size, out_dir)?;
                let x = stationary(config, &sol)?;
                let pd = price_duration_curve(&sol, &x);
                out.notes.push(format!(
                    "size {size}: price range [{}, {}], mean {}",
                    pd.min_price(),
                    pd.max_price(),
                    pd.mean_price()
                ));
                out.write(artifact(out_dir, config, size, "-pd.csv"), pd_csv(&pd))?;
            }
        }
        Command::MarginalBenefit => {
            if config.mb_sizes.is_empty() {
                return Err(RunError::Config(
                    "marginal-benefit needs `mb.sizes` in the config".into(),
                ));
            }
            let mut csv = String::from("k_s,mb\n");
            for &size in &config.mb_sizes {
                let sol = solve_size(config, &curve, &loads, size, out_dir)?;
                let x = stationary(config, &sol)?;
                let mb = storage_marginal_benefit(&sol, &x);
                writeln!(csv, "{size},{mb}").expect("string write");
            }
            let path = out_dir.join(format!("{}-mb.csv", config.case));
            out.write(path, csv)?;
        }
        Command::OptimalCapacity => {
            let Some(settings) = &config.search else {
                return Err(RunError::Config(
                    "optimal-capacity needs the `search.*` keys in the config".into(),
                ));
            };
            let search = CapacitySearch {
                lower: settings.lower,
                upper: settings.upper,
                capacity_tol: settings.capacity_tol,
                grid_points: config.storage_points,
                delta_t: config.delta_t,
                discount: config.discount,
            };
            let found =
                optimal_storage_capacity(&curve, &loads, settings.fixed_cost, &search, &config.solve)
                    .map_err(|e| map_investment_error(e, config, out_dir))?;
            out.notes.push(format!(
                "break-even capacity {} MWh at marginal benefit {}",
                found.capacity, found.marginal_benefit
            ));
            let mut report = String::new();
            push_kv(&mut report, "case", &config.case);
            push_kv(&mut report, "command", command.name());
            push_kv(&mut report, "fixed_cost", settings.fixed_cost);
            push_kv(&mut report, "lower", settings.lower);
            push_kv(&mut report, "upper", settings.upper);
            push_kv(&mut report, "capacity_tol", settings.capacity_tol);
            push_kv(&mut report, "grid_points", config.storage_points);
            push_kv(&mut report, "capacity", found.capacity);
            push_kv(&mut report, "marginal_benefit", found.marginal_benefit);
            let outcome = match found.outcome {
                SearchOutcome::Converged => "converged",
                SearchOutcome::AtLowerBound => "at_lower_bound",
                SearchOutcome::AtUpperBound => "at_upper_bound",
            };
            push_kv(&mut report, "outcome", outcome);
            push_kv(&mut report, "probes", found.probes.len());
            for (i, (k, mb)) in found.probes.iter().enumerate() {
                push_kv(&mut report, &format!("probe.{i}"), format_args!("{k},{mb}"));
            }
            let path = out_dir.join(format!("{}-optimal-capacity.txt", config.case));
            out.write(path, report)?;
        }
        Command::HedgeDemo => {
            let size = config.single_size(command)?;
            let sol = solve_size(config, &curve, &loads, size, out_dir)?;
            let traj = simulate_config(config, &sol)?;
            let rows = settlement_table(&traj, &sol)
                .map_err(|e| RunError::Config(format!("settlement: {e}")))?;
            let strikes = HedgeStrikes::from_solution(&sol);
            out.notes.push(format!(
                "floor strike {}, cap strike {}",
                strikes.floor, strikes.cap
            ));
            let mut csv = String::from("SoC,L,P,dEP,pi,FV,FCF,CV,CCF,SCF,Total\n");
            for r in &rows {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.opening,
                    r.load,
                    r.price,
                    r.dep,
                    r.cashflow,
                    r.floor_volume,
                    r.floor_cashflow,
                    r.cap_volume,
                    r.cap_cashflow,
                    r.s_shaped_cashflow,
                    r.total
                )
                .expect("string write");
            }
            out.write(artifact(out_dir, config, size, "-settlement.csv"), csv)?;
            let mut report = String::new();
            push_kv(&mut report, "case", &config.case);
            push_kv(&mut report, "command", command.name());
            push_kv(&mut report, "capacity", size);
            push_kv(&mut report, "intervals", rows.len());
            push_kv(&mut report, "seed", config.seed);
            push_kv(&mut report, "rng", Trajectory::RNG);
            push_kv(&mut report, "floor_strike", strikes.floor);
            push_kv(&mut report, "cap_strike", strikes.cap);
            push_kv(&mut report, "hedged_net_variance", hedged_net_variance(&rows));
            push_kv(
                &mut report,
                "collar_only_variance",
                collar_only_variance(&rows),
            );
            out.write(artifact(out_dir, config, size, "-hedge.txt"), report)?;
        }
        Command::Simulate => {
            let size = config.single_size(command)?;
            let sol = solve_size(config, &curve, &loads, size, out_dir)?;
            let traj = simulate_config(config, &sol)?;
            let mut csv = String::from("t,S,L,Splus,P,pi\n");
            for (t, r) in traj.records.iter().enumerate() {
                writeln!(
                    csv,
                    "{t},{},{},{},{},{}",
                    r.opening, r.load, r.closing, r.price, r.cashflow
                )
                .expect("string write");
            }
            out.write(artifact(out_dir, config, size, "-trajectory.csv"), csv)?;
            let mut report = String::new();
            push_kv(&mut report, "case", &config.case);
            push_kv(&mut report, "command", command.name());
            push_kv(&mut report, "capacity", size);
            push_kv(&mut report, "intervals", traj.records.len());
            push_kv(&mut report, "seed", traj.seed);
            push_kv(&mut report, "rng", Trajectory::RNG);
            push_kv(&mut report, "initial", traj.initial);
            let last = traj.records.last().map_or(traj.initial, |r| r.closing);
            push_kv(&mut report, "final", last);
            push_kv(&mut report, "mean_price", traj.mean_price());
            push_kv(&mut report, "mean_cashflow", traj.mean_cashflow());
            out.write(artifact(out_dir, config, size, "-sim.txt"), report)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Solve plumbing
// ---------------------------------------------------------------------------

/// Solve at one capacity; a failed fixed point dumps its residual history to
/// `<case>-Smax<k>-residuals.csv` before surfacing the error.
fn solve_size(
    config: &ScenarioConfig,
    curve: &PriceCurve,
    loads: &LoadGrid,
    size: f64,
    out_dir: &Path,
) -> Result<PolicySolution, RunError> {
    let grid = config.grid_for(size)?;
    match solve_policy(curve, &grid, loads, &config.solve) {
        Ok(sol) => Ok(sol),
        Err(SolveError::NoConvergence {
            iterations,
            residual,
            tol,
            history,
        }) => {
            let path = artifact(out_dir, config, size, "-residuals.csv");
            fs::write(&path, residual_csv(&history))?;
            Err(RunError::NonConvergence(format!(
                "size {size}: {iterations} iterations, residual {residual:e} > tol {tol:e}; history in {}",
                path.display()
            )))
        }
        Err(e) => Err(RunError::Config(e.to_string())),
    }
}

fn stationary(
    config: &ScenarioConfig,
    solution: &PolicySolution,
) -> Result<StationaryDistribution, RunError> {
    stationary_distribution(
        &transition_matrix(solution),
        config.stationary_tol,
        config.stationary_max_iter,
    )
    .map_err(|e| RunError::NonConvergence(format!("stationary distribution: {e}")))
}

fn simulate_config(config: &ScenarioConfig, sol: &PolicySolution) -> Result<Trajectory, RunError> {
    let initial = config
        .sim_initial
        .unwrap_or_else(|| 0.5 * (sol.grid().s_min() + sol.grid().s_max()));
    simulate_from(sol, config.sim_intervals, config.seed, initial)
        .map_err(|e| RunError::Config(e.to_string()))
}

fn map_investment_error(e: InvestmentError, config: &ScenarioConfig, out_dir: &Path) -> RunError {
    match e {
        InvestmentError::Solve(SolveError::NoConvergence {
            iterations,
            residual,
            tol,
            history,
        }) => {
            let path = out_dir.join(format!("{}-search-residuals.csv", config.case));
            if let Err(io) = fs::write(&path, residual_csv(&history)) {
                return RunError::Io(io);
            }
            RunError::NonConvergence(format!(
                "capacity probe: {iterations} iterations, residual {residual:e} > tol {tol:e}; history in {}",
                path.display()
            ))
        }
        InvestmentError::Chain(e) => RunError::NonConvergence(format!("capacity probe: {e}")),
        other => RunError::Config(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Artifact formatting
// ---------------------------------------------------------------------------

/// `<out>/<case>-Smax<k><suffix>`; sizes print in shortest form (10, 33.5).
fn artifact(out_dir: &Path, config: &ScenarioConfig, size: f64, suffix: &str) -> PathBuf {
    out_dir.join(format!("{}-Smax{size}{suffix}", config.case))
}

fn push_kv(buf: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(buf, "{key} = {value}").expect("string write");
}

fn residual_csv(history: &[f64]) -> String {
    let mut csv = String::from("iteration,residual\n");
    for (i, r) in history.iter().enumerate() {
        writeln!(csv, "{},{r}", i + 1).expect("string write");
    }
    csv
}

/// Price and continuation value against load at the empty, middle, and full
/// storage levels — the shape of the policy in one table.
fn state_csv(sol: &PolicySolution) -> String {
    let mut csv = String::from("Load,PSmin,EPSmin,PSmid,EPSmid,PSmax,EPSmax\n");
    let rows = [0, sol.grid().mid_index(), sol.grid().len() - 1];
    for (j, &load) in sol.loads().values().iter().enumerate() {
        let mut line = format!("{load}");
        for &i in &rows {
            write!(line, ",{},{}", sol.prices()[i][j], sol.deps()[i][j]).expect("string write");
        }
        csv.push_str(&line);
        csv.push('\n');
    }
    csv
}

fn class_name(class: CellClass) -> &'static str {
    match class {
        CellClass::AtMin => "at_min",
        CellClass::AtMax => "at_max",
        CellClass::Interior => "interior",
    }
}

fn policy_csv(sol: &PolicySolution) -> String {
    let mut csv = String::from("S,L,Splus,P,dEP,class\n");
    for (i, &s) in sol.grid().s_values().iter().enumerate() {
        for (j, &load) in sol.loads().values().iter().enumerate() {
            writeln!(
                csv,
                "{s},{load},{},{},{},{}",
                sol.policy()[i][j],
                sol.prices()[i][j],
                sol.deps()[i][j],
                class_name(sol.classes()[i][j])
            )
            .expect("string write");
        }
    }
    csv
}

/// Stationary mass per level, level expressed as percent of capacity (raw
/// level for a zero-capacity store).
fn sd_csv(sol: &PolicySolution, x: &StationaryDistribution) -> String {
    let capacity = sol.grid().capacity();
    let mut csv = String::from("s,xs\n");
    for (&s, &mass) in sol.grid().s_values().iter().zip(x.mass()) {
        let axis = if capacity > 0.0 {
            100.0 * (s - sol.grid().s_min()) / capacity
        } else {
            s
        };
        writeln!(csv, "{axis},{mass}").expect("string write");
    }
    csv
}

fn pd_csv(pd: &crate::investment::PriceDurationCurve) -> String {
    let mut csv = String::from("prob,price\n");
    for &(prob, price) in pd.points() {
        writeln!(csv, "{prob},{price}").expect("string write");
    }
    csv
}
