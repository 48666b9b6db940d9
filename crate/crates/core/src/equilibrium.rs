//! Market equilibria by block Gauss–Seidel over supplying agents.
//!
//! An agent controls either every unit at a node (price-taking and
//! welfare-maximising dispatch) or one producer's units at a node
//! (strategic behaviour). Each agent in turn moves to the root of its
//! stationarity condition with everybody else held fixed; units inside an
//! agent are split in merit order.
//!
//! Stationarity conditions are supplied by a [`StationarityRule`]. Along
//! the agent's own direction, prices are piecewise affine, so every root is
//! located exactly by walking the affine pieces reported by the network.

use crate::market::{adjusted_cost, marginal_damage, profit_at_prices, welfare_with, GenerationProfile, MarketError, MarketScenario};
use crate::network::{Allocator, DemandAllocation, NetworkError, Side};
use crate::piecewise::{CurveError, MarginalSegment, MeritSplit, PiecewiseCurve, Shape};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("no convergence after {sweeps} sweeps (last step sizes {trace:?})")]
    NotConverged { sweeps: usize, trace: Vec<f64> },
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// Which units move together in one Gauss–Seidel step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Node,
    NodeProducer,
}

/// Quantities an agent's marginal benefit may depend on, all at the agent's
/// node: the marginal network utility, the realised price, and
/// `sum_m dP_m/dq_node * q_m` over the owning producer's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MarginalContext {
    pub utility_gradient: f64,
    pub price: f64,
    pub market_power: f64,
}

impl MarginalContext {
    fn advance(&self, rate: &MarginalContext, dt: f64) -> Self {
        Self {
            utility_gradient: self.utility_gradient + rate.utility_gradient * dt,
            price: self.price + rate.price * dt,
            market_power: self.market_power + rate.market_power * dt,
        }
    }
}

/// First-order condition of one solution concept.
///
/// The condition reads `marginal_benefit(ctx) - marginal cost = 0`, where the
/// marginal cost includes the marginal damage when
/// [`StationarityRule::internalizes_damage`] is set. `marginal_benefit` must
/// be affine in the context.
pub trait StationarityRule: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn grouping(&self) -> Grouping;
    fn internalizes_damage(&self) -> bool;
    /// Nodal price caps applied to the realised price, if any.
    fn caps(&self) -> Option<&[f64]> {
        None
    }
    fn marginal_benefit(&self, ctx: &MarginalContext) -> f64;
}

/// Terms present in each solution concept's condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionTerms {
    pub price: bool,
    pub marginal_cost: bool,
    pub marginal_damage: bool,
    pub market_power: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EquilibriumKind {
    Optimal,
    Competitive,
    Oligopolistic,
}

impl EquilibriumKind {
    pub fn terms(self) -> ConditionTerms {
        ConditionTerms {
            price: true,
            marginal_cost: true,
            marginal_damage: self == Self::Optimal,
            market_power: self == Self::Oligopolistic,
        }
    }

    pub fn rule(self) -> Box<dyn StationarityRule> {
        match self {
            Self::Optimal => Box::new(OptimalRule),
            Self::Competitive => Box::new(CompetitiveRule),
            Self::Oligopolistic => Box::new(OligopolisticRule::default()),
        }
    }
}

impl fmt::Display for EquilibriumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Optimal => "optimal",
            Self::Competitive => "competitive",
            Self::Oligopolistic => "oligopolistic",
        })
    }
}

/// Welfare maximisation: marginal utility equals marginal cost plus damage.
#[derive(Debug, Clone, Copy, Default)]
pub struct OptimalRule;

impl StationarityRule for OptimalRule {
    fn name(&self) -> String {
        "optimal".into()
    }
    fn grouping(&self) -> Grouping {
        Grouping::Node
    }
    fn internalizes_damage(&self) -> bool {
        true
    }
    fn marginal_benefit(&self, ctx: &MarginalContext) -> f64 {
        ctx.utility_gradient
    }
}

/// Price taking without pollution costs.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompetitiveRule;

impl StationarityRule for CompetitiveRule {
    fn name(&self) -> String {
        "competitive".into()
    }
    fn grouping(&self) -> Grouping {
        Grouping::Node
    }
    fn internalizes_damage(&self) -> bool {
        false
    }
    fn marginal_benefit(&self, ctx: &MarginalContext) -> f64 {
        ctx.price
    }
}

/// Cournot behaviour: each producer accounts for its effect on prices at
/// every node where it sells. `caps` turns it into the capped variant.
#[derive(Debug, Clone, Default)]
pub struct OligopolisticRule {
    pub caps: Option<Vec<f64>>,
}

impl StationarityRule for OligopolisticRule {
    fn name(&self) -> String {
        match &self.caps {
            None => "oligopolistic".into(),
            Some(c) => format!("oligopolistic capped at {c:?}"),
        }
    }
    fn grouping(&self) -> Grouping {
        Grouping::NodeProducer
    }
    fn internalizes_damage(&self) -> bool {
        false
    }
    fn caps(&self) -> Option<&[f64]> {
        self.caps.as_deref()
    }
    fn marginal_benefit(&self, ctx: &MarginalContext) -> f64 {
        ctx.price + ctx.market_power
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialProfile {
    Zero,
    /// Start from the competitive equilibrium.
    Competitive,
    /// Per-unit quantities in scenario unit order.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Largest per-sweep change in any agent's output accepted as converged.
    pub tolerance: f64,
    /// Largest stationarity violation accepted at convergence.
    pub residual_tolerance: f64,
    pub max_sweeps: usize,
    /// Initial step fraction; halved whenever a sweep moves at least as far as the last.
    pub damping: f64,
    pub initial: InitialProfile,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            residual_tolerance: 1e-6,
            max_sweeps: 10_000,
            damping: 1.0,
            initial: InitialProfile::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub kind: String,
    pub profile: GenerationProfile,
    pub allocation: DemandAllocation,
    /// Uncapped nodal prices.
    pub nodal_prices: Vec<f64>,
    /// Prices actually paid, after caps.
    pub prices: Vec<f64>,
    pub welfare: f64,
    /// Profit per producer at the paid prices.
    pub profits: Vec<f64>,
    /// `sum_n price_n * (demand_n - injection_n)` at the paid prices.
    pub congestion_rent: f64,
    pub residual: f64,
    pub sweeps: usize,
    /// Largest unit-level gap between zero-start and competitive-start
    /// solutions, where both were computed.
    pub start_gap: Option<f64>,
}

/// Curve a producer states in place of its merged cost, with the split
/// used to spread its output over its units.
#[derive(Debug, Clone, PartialEq)]
pub struct SuppliedCurve {
    pub node: usize,
    pub producer: usize,
    pub curve: PiecewiseCurve,
    pub split: MeritSplit,
}

#[derive(Debug, Clone)]
struct Agent {
    node: usize,
    producer: Option<usize>,
    units: Vec<usize>,
    supplied: Option<usize>,
}

/// Affine description of the marginal context on one side of a point.
#[derive(Debug, Clone)]
pub(crate) struct LocalContext {
    pub to: f64,
    pub at: f64,
    pub ctx: MarginalContext,
    pub rate: MarginalContext,
}

impl LocalContext {
    pub fn ctx_at(&self, t: f64) -> MarginalContext {
        self.ctx.advance(&self.rate, t - self.at)
    }
}

/// Context along `base + t * e_node` on the given side of `t`. `own` holds
/// the owning producer's outputs with the entry at `node` excluded.
pub(crate) fn local_context(
    alloc: &Allocator,
    caps: Option<&[f64]>,
    base: &[f64],
    node: usize,
    t: f64,
    side: Side,
    own: Option<&[f64]>,
) -> Result<LocalContext, NetworkError> {
    let ray = alloc.ray(base, node, t, side)?;
    let (mut from, mut to) = (ray.from, ray.to);
    let n = base.len();
    let mut price = ray.price.clone();
    let mut jac = ray.slope.clone();
    if let Some(caps) = caps {
        let dir = if side == Side::Right { 1.0 } else { -1.0 };
        for m in 0..n {
            let (p, s, cap) = (ray.price[m], ray.slope[m], caps[m]);
            let tol = 1e-10 * (1.0 + cap.abs());
            if s != 0.0 && cap.is_finite() {
                let cross = t + (cap - p) / s;
                if side == Side::Right && cross > t + 1e-12 && cross < to {
                    to = cross;
                }
                if side == Side::Left && cross < t - 1e-12 && cross > from {
                    from = cross;
                }
            }
            let above = p > cap + tol || ((p - cap).abs() <= tol && dir * s >= 0.0);
            if above {
                price[m] = cap;
                jac[m] = 0.0;
            }
        }
    }
    let own_at = |m: usize| own.map_or(0.0, |o| o[m]) + if m == node { t } else { 0.0 };
    let ctx = MarginalContext {
        utility_gradient: ray.price[node],
        price: price[node],
        market_power: if own.is_some() {
            (0..n).map(|m| jac[m] * own_at(m)).sum()
        } else {
            0.0
        },
    };
    let rate = MarginalContext {
        utility_gradient: ray.slope[node],
        price: jac[node],
        market_power: if own.is_some() { jac[node] } else { 0.0 },
    };
    Ok(LocalContext { to, at: t, ctx, rate })
}

/// Realised prices: nodal prices with caps applied.
pub fn capped_prices(prices: &[f64], caps: Option<&[f64]>) -> Vec<f64> {
    match caps {
        None => prices.to_vec(),
        Some(c) => prices.iter().zip(c).map(|(p, cap)| p.min(*cap)).collect(),
    }
}

struct Solver<'a> {
    scenario: &'a MarketScenario,
    alloc: &'a Allocator,
    rule: &'a dyn StationarityRule,
    supplied: &'a [SuppliedCurve],
    agents: Vec<Agent>,
}

impl<'a> Solver<'a> {
    fn new(
        scenario: &'a MarketScenario,
        alloc: &'a Allocator,
        rule: &'a dyn StationarityRule,
        supplied: &'a [SuppliedCurve],
    ) -> Result<Self, SolveError> {
        if let Some(c) = rule.caps() {
            if c.len() != scenario.node_count() {
                return Err(SolveError::Invalid(format!("{} caps for {} nodes", c.len(), scenario.node_count())));
            }
        }
        let mut agents = Vec::new();
        for node in 0..scenario.node_count() {
            match rule.grouping() {
                Grouping::Node => {
                    let units = scenario.units_at(node, None);
                    if !units.is_empty() {
                        agents.push(Agent {
                            node,
                            producer: None,
                            units,
                            supplied: None,
                        });
                    }
                }
                Grouping::NodeProducer => {
                    for producer in 0..scenario.producer_count {
                        let units = scenario.units_at(node, Some(producer));
                        if !units.is_empty() {
                            let supplied = supplied.iter().position(|s| s.node == node && s.producer == producer);
                            agents.push(Agent {
                                node,
                                producer: Some(producer),
                                units,
                                supplied,
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            scenario,
            alloc,
            rule,
            supplied,
            agents,
        })
    }

    fn totals(&self, q: &[f64]) -> Result<GenerationProfile, MarketError> {
        GenerationProfile::new(self.scenario, q.to_vec())
    }

    /// Curve and split the agent optimises against at the current profile.
    fn agent_curve(&self, agent: &Agent, profile: &GenerationProfile) -> Result<(PiecewiseCurve, MeritSplit), SolveError> {
        if let Some(k) = agent.supplied {
            let s = &self.supplied[k];
            return Ok((s.curve.clone(), s.split.clone()));
        }
        let mu = if self.rule.internalizes_damage() {
            marginal_damage(self.scenario, profile, agent.node)?
        } else {
            Vec::new()
        };
        let split = adjusted_cost(self.scenario, agent.node, agent.producer, &mu)?;
        Ok((split.aggregate().clone(), split))
    }

    fn own_outputs(&self, agent: &Agent, profile: &GenerationProfile) -> Option<Vec<f64>> {
        agent.producer.map(|p| {
            let mut own = profile.producer_totals(p);
            own[agent.node] = 0.0;
            own
        })
    }

    /// Smallest output at which the agent's condition turns negative, or its
    /// capacity when it never does.
    fn root(&self, base: &[f64], node: usize, own: Option<&[f64]>, curve: &PiecewiseCurve, capacity: f64) -> Result<f64, SolveError> {
        let mut t = 0.0;
        let ftol = 1e-10;
        while t < capacity - 1e-12 {
            let local = local_context(self.alloc, self.rule.caps(), base, node, t, Side::Right, own)?;
            let k = curve.pieces().iter().rposition(|p| p.start <= t + 1e-12).unwrap_or(0);
            let piece = curve.pieces()[k];
            let end = local.to.min(curve.piece_end(k)).min(capacity).max(t + 1e-12);
            let mc = |x: f64| piece.slope + piece.slope_rate * (x - piece.start);
            let f0 = self.rule.marginal_benefit(&local.ctx) - mc(t);
            if f0 < -ftol {
                return Ok(t);
            }
            let f1 = self.rule.marginal_benefit(&local.ctx_at(end)) - mc(end);
            if f1 < -ftol {
                let s = if f0 <= 0.0 { 0.0 } else { f0 / (f0 - f1) * (end - t) };
                return Ok((t + s).min(end));
            }
            t = end;
        }
        Ok(capacity)
    }

    fn run(&self, config: &SolverConfig, start: Vec<f64>) -> Result<(Vec<f64>, usize), SolveError> {
        let mut q = start;
        let mut omega = config.damping.clamp(1e-3, 1.0);
        let mut trace: Vec<f64> = Vec::new();
        for sweep in 1..=config.max_sweeps {
            let mut delta = 0.0f64;
            for agent in &self.agents {
                let profile = self.totals(&q)?;
                let (curve, split) = self.agent_curve(agent, &profile)?;
                let current: f64 = agent.units.iter().map(|&u| q[u]).sum();
                let mut base = profile.node_totals().to_vec();
                base[agent.node] -= current;
                base[agent.node] = base[agent.node].max(0.0);
                let own = self.own_outputs(agent, &profile);
                let capacity = split.total_capacity();
                let target = self.root(&base, agent.node, own.as_deref(), &curve, capacity)?;
                let next = (current + omega * (target - current)).clamp(0.0, capacity);
                delta = delta.max((next - current).abs());
                for (&u, x) in agent.units.iter().zip(split.disaggregate(next)?) {
                    q[u] = x;
                }
            }
            // A sweep that fails to shrink the step signals overshoot or a cycle.
            if trace.last().is_some_and(|&last| delta >= 0.999 * last && sweep > 2) {
                omega = (omega * 0.5).max(1.0 / 64.0);
            }
            trace.push(delta);
            if delta <= config.tolerance {
                return Ok((q, sweep));
            }
        }
        let keep = trace.len().saturating_sub(10);
        Err(SolveError::NotConverged {
            sweeps: config.max_sweeps,
            trace: trace.split_off(keep),
        })
    }

    /// Worst violation of the agents' generalized stationarity conditions:
    /// at zero output the right-hand condition must be nonpositive, at
    /// capacity the left-hand one nonnegative, in between both.
    fn residual(&self, profile: &GenerationProfile) -> Result<f64, SolveError> {
        let mut worst = 0.0f64;
        for agent in &self.agents {
            let (curve, split) = self.agent_curve(agent, profile)?;
            let x: f64 = agent.units.iter().map(|&u| profile.quantity(u)).sum();
            let tol = 1e-9;
            // Summing unit outputs can land a rounding error short of a kink.
            let x = curve.breakpoints().find(|b| (b - x).abs() <= tol).unwrap_or(x);
            let capacity = split.total_capacity();
            let mut base = profile.node_totals().to_vec();
            base[agent.node] -= x;
            let own = self.own_outputs(agent, profile);
            if x < capacity - tol {
                let right = local_context(self.alloc, self.rule.caps(), &base, agent.node, x, Side::Right, own.as_deref())?;
                let f = self.rule.marginal_benefit(&right.ctx) - curve.right_derivative(x)?;
                worst = worst.max(f);
            }
            if x > tol {
                let left = local_context(self.alloc, self.rule.caps(), &base, agent.node, x, Side::Left, own.as_deref())?;
                let f = self.rule.marginal_benefit(&left.ctx) - curve.left_derivative(x)?;
                worst = worst.max(-f);
            }
        }
        Ok(worst)
    }

    fn report(&self, q: Vec<f64>, sweeps: usize) -> Result<EquilibriumReport, SolveError> {
        let profile = self.totals(&q)?;
        let residual = self.residual(&profile)?;
        build_report(self.scenario, self.alloc, self.rule, profile, residual, sweeps)
    }
}

pub(crate) fn build_report(
    scenario: &MarketScenario,
    alloc: &Allocator,
    rule: &dyn StationarityRule,
    profile: GenerationProfile,
    residual: f64,
    sweeps: usize,
) -> Result<EquilibriumReport, SolveError> {
    let totals = profile.node_totals().to_vec();
    let allocation = alloc.allocate(&totals)?;
    let nodal_prices = alloc.prices(&totals)?;
    let prices = capped_prices(&nodal_prices, rule.caps());
    let welfare = welfare_with(alloc, scenario, &profile)?;
    let profits = (0..scenario.producer_count)
        .map(|i| profit_at_prices(scenario, &profile, i, &prices))
        .collect::<Result<Vec<_>, _>>()?;
    let congestion_rent = prices
        .iter()
        .zip(allocation.demand.iter().zip(&totals))
        .map(|(p, (d, q))| p * (d - q))
        .sum();
    Ok(EquilibriumReport {
        kind: rule.name(),
        profile,
        allocation,
        nodal_prices,
        prices,
        welfare,
        profits,
        congestion_rent,
        residual,
        sweeps,
        start_gap: None,
    })
}

fn start_vector(rule: &dyn StationarityRule, scenario: &MarketScenario, config: &SolverConfig) -> Result<Vec<f64>, SolveError> {
    match &config.initial {
        InitialProfile::Zero => Ok(vec![0.0; scenario.units.len()]),
        InitialProfile::Explicit(q) => Ok(GenerationProfile::new(scenario, q.clone())?.quantities().to_vec()),
        InitialProfile::Competitive => {
            if rule.grouping() == Grouping::Node && !rule.internalizes_damage() && rule.caps().is_none() {
                return Ok(vec![0.0; scenario.units.len()]);
            }
            let cfg = SolverConfig {
                initial: InitialProfile::Zero,
                ..config.clone()
            };
            Ok(solve(&CompetitiveRule, scenario, &cfg)?.profile.quantities().to_vec())
        }
    }
}

/// Solves for the fixed point of `rule`.
pub fn solve(rule: &dyn StationarityRule, scenario: &MarketScenario, config: &SolverConfig) -> Result<EquilibriumReport, SolveError> {
    let alloc = scenario.allocator()?;
    solve_with(&alloc, rule, scenario, config, &[])
}

/// Solves with some producers' merged costs replaced by supplied curves.
pub fn solve_with(
    alloc: &Allocator,
    rule: &dyn StationarityRule,
    scenario: &MarketScenario,
    config: &SolverConfig,
    supplied: &[SuppliedCurve],
) -> Result<EquilibriumReport, SolveError> {
    let solver = Solver::new(scenario, alloc, rule, supplied)?;
    let start = start_vector(rule, scenario, config)?;
    let (q, sweeps) = solver.run(config, start)?;
    let report = solver.report(q, sweeps)?;
    if report.residual > config.residual_tolerance {
        return Err(SolveError::NotConverged {
            sweeps,
            trace: vec![report.residual],
        });
    }
    Ok(report)
}

/// Solves one of the three standard concepts. For the oligopolistic case
/// the solution is also computed from the other starting point and the
/// gap between the two recorded.
pub fn solve_equilibrium(kind: EquilibriumKind, scenario: &MarketScenario, config: &SolverConfig) -> Result<EquilibriumReport, SolveError> {
    let rule = kind.rule();
    let mut report = solve(rule.as_ref(), scenario, config)?;
    if kind == EquilibriumKind::Oligopolistic && !matches!(config.initial, InitialProfile::Explicit(_)) {
        let other = match config.initial {
            InitialProfile::Zero => InitialProfile::Competitive,
            _ => InitialProfile::Zero,
        };
        let alt = solve(
            rule.as_ref(),
            scenario,
            &SolverConfig {
                initial: other,
                ..config.clone()
            },
        );
        report.start_gap = alt.ok().map(|alt| {
            alt.profile
                .quantities()
                .iter()
                .zip(report.profile.quantities())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        });
    }
    Ok(report)
}

/// Left and right values of one unit's stationarity condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitCondition {
    pub left: Option<f64>,
    pub right: f64,
}

/// Unit-level condition: marginal benefit under `rule` minus the unit's
/// marginal cost, plus marginal damage when the rule internalises it.
/// `right` uses right derivatives throughout; `left` approaches from below
/// and is absent at zero output.
pub fn stationarity(
    rule: &dyn StationarityRule,
    scenario: &MarketScenario,
    profile: &GenerationProfile,
    unit: usize,
) -> Result<UnitCondition, SolveError> {
    let alloc = scenario.allocator()?;
    let u = &scenario.units[unit];
    let node = u.id.node;
    let base = profile.node_totals().to_vec();
    let own = match rule.grouping() {
        Grouping::NodeProducer => {
            let mut own = profile.producer_totals(u.id.producer);
            own[node] = 0.0;
            Some(own)
        }
        Grouping::Node => None,
    };
    let mut probe = base.clone();
    let t = match &own {
        Some(_) => profile.node_producer_total(node, u.id.producer),
        None => base[node],
    };
    probe[node] -= t;
    let mu = if rule.internalizes_damage() {
        marginal_damage(scenario, profile, node)?
    } else {
        vec![0.0; scenario.channel_count()]
    };
    let x = profile.quantity(unit);
    let marginal = |left: bool| -> Result<f64, CurveError> {
        let d = |c: &PiecewiseCurve| if left { c.left_derivative(x) } else { c.right_derivative(x) };
        let mut m = d(&u.cost)?;
        for (mu, p) in mu.iter().zip(&u.pollution) {
            m += mu * d(p)?;
        }
        Ok(m)
    };
    let right = local_context(&alloc, rule.caps(), &probe, node, t, Side::Right, own.as_deref())?;
    let right = rule.marginal_benefit(&right.ctx) - marginal(false)?;
    let left = if x > 1e-9 {
        let l = local_context(&alloc, rule.caps(), &probe, node, t, Side::Left, own.as_deref())?;
        Some(rule.marginal_benefit(&l.ctx) - marginal(true)?)
    } else {
        None
    };
    Ok(UnitCondition { left, right })
}

/// `-sum_m dP_m/dq_node * q_m` over the producer's outputs, with right derivatives.
pub fn market_power_index(scenario: &MarketScenario, profile: &GenerationProfile, producer: usize, node: usize) -> Result<f64, SolveError> {
    let alloc = scenario.allocator()?;
    let jac = alloc.jacobian(profile.node_totals())?;
    Ok(-(0..scenario.node_count())
        .map(|m| jac[m][node] * profile.node_producer_total(m, producer))
        .sum::<f64>())
}

/// Cost curve whose marginal equals the producer's true merged marginal
/// plus its market-power markup, traced along its own output at `node`
/// with every other output frozen at the reported equilibrium.
pub fn declared_cost_market_power(
    scenario: &MarketScenario,
    report: &EquilibriumReport,
    producer: usize,
    node: usize,
) -> Result<PiecewiseCurve, SolveError> {
    let alloc = scenario.allocator()?;
    let profile = &report.profile;
    let split = adjusted_cost(scenario, node, Some(producer), &[])?;
    let curve = split.aggregate();
    let capacity = split.total_capacity();
    let mut base = profile.node_totals().to_vec();
    base[node] -= profile.node_producer_total(node, producer);
    let mut own = profile.producer_totals(producer);
    own[node] = 0.0;
    let mut segments = Vec::new();
    let mut t = 0.0;
    if capacity <= 0.0 {
        return Ok(PiecewiseCurve::linear(0.0, Some(f64::MIN_POSITIVE))?);
    }
    while t < capacity - 1e-12 {
        let local = local_context(&alloc, None, &base, node, t, Side::Right, Some(&own))?;
        let k = curve.pieces().iter().rposition(|p| p.start <= t + 1e-12).unwrap_or(0);
        let end = local.to.min(curve.piece_end(k)).min(capacity).max(t + 1e-12);
        let piece = curve.pieces()[k];
        segments.push(MarginalSegment {
            start: t,
            marginal: piece.slope + piece.slope_rate * (t - piece.start) - local.ctx.market_power,
            rate: piece.slope_rate - local.rate.market_power,
        });
        t = end;
    }
    let declared = PiecewiseCurve::from_marginals(0.0, &segments, Some(capacity), Shape::Convex)?;
    let shape = if declared.check_shape(Shape::Convex).is_ok() {
        Shape::Convex
    } else {
        Shape::Irregular
    };
    Ok(PiecewiseCurve::from_pieces(declared.pieces().to_vec(), Some(capacity), shape)?)
}

/// Price-taking clearing in which each listed producer is dispatched
/// against its supplied curve instead of its true cost.
pub fn dispatch_supplied(
    scenario: &MarketScenario,
    curves: &[SuppliedCurve],
    config: &SolverConfig,
) -> Result<EquilibriumReport, SolveError> {
    let alloc = scenario.allocator()?;
    solve_with(&alloc, &PriceTakingProducers, scenario, config, curves)
}

/// Price taking at producer granularity, used for dispatch against stated curves.
#[derive(Debug, Clone, Copy, Default)]
struct PriceTakingProducers;

impl StationarityRule for PriceTakingProducers {
    fn name(&self) -> String {
        "dispatch".into()
    }
    fn grouping(&self) -> Grouping {
        Grouping::NodeProducer
    }
    fn internalizes_damage(&self) -> bool {
        false
    }
    fn marginal_benefit(&self, ctx: &MarginalContext) -> f64 {
        ctx.price
    }
}
