//! Subsidy-and-tax payments that align producers with social welfare.
//!
//! Each producer is paid the network utility its output adds, net of the
//! revenue it already earns, and taxed the pollution damage its output adds.
//! Its profit plus payment then equals its marginal welfare contribution,
//! whatever the prices. The ISO computes payments from producer totals only.

use crate::equilibrium::Grouping;
use crate::equilibrium::{
    dispatch_supplied, solve, EquilibriumReport, MarginalContext, OptimalRule, SolveError, SolverConfig, StationarityRule, SuppliedCurve,
};
use crate::market::{adjusted_cost, production_cost, GenerationProfile, MarketError, MarketScenario, ObservableTotals};
use crate::network::Allocator;
use crate::piecewise::CurveError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IncentiveError {
    #[error("incentive compatibility fails: worst unit gap {}", .0.worst_gap())]
    NotCompatible(Box<CompatibilityReport>),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

impl From<MarketError> for IncentiveError {
    fn from(e: MarketError) -> Self {
        Self::Solve(e.into())
    }
}

impl From<CurveError> for IncentiveError {
    fn from(e: CurveError) -> Self {
        Self::Solve(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProducerPayment {
    pub producer: usize,
    /// Total payment including the offset.
    pub payment: f64,
    /// Utility added by the producer minus its revenue.
    pub subsidy: f64,
    /// Damage added by the producer's pollution.
    pub tax: f64,
    pub offset: f64,
    /// Smallest offset keeping the producer's net position nonnegative at this profile.
    pub participation_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncentiveSchedule {
    pub payments: Vec<ProducerPayment>,
    /// Net payout of the ISO, `sum_i payment_i`.
    pub budget: f64,
}

/// Joint damage at a node as a function of its per-channel pollution totals.
pub type JointDamage<'a> = &'a dyn Fn(usize, &[f64]) -> f64;

fn without(values: &[f64], removed: &[f64]) -> Vec<f64> {
    values.iter().zip(removed).map(|(a, b)| (a - b).max(0.0)).collect()
}

/// Subsidy and tax of `producer` computed from observable totals.
fn subsidy_and_tax(
    alloc: &Allocator,
    totals: &ObservableTotals,
    prices: &[f64],
    producer: usize,
    damage: JointDamage,
) -> Result<(f64, f64), SolveError> {
    let q = totals.node_totals();
    let own = totals.producer_totals(producer);
    let revenue: f64 = prices.iter().zip(&own).map(|(p, x)| p * x).sum();
    let subsidy = alloc.utility(&q)? - alloc.utility(&without(&q, &own))? - revenue;
    let mut tax = 0.0;
    for n in 0..q.len() {
        let x = totals.node_pollution(n);
        let mine: Vec<f64> = totals.pollution[n][producer].clone();
        tax += damage(n, &x) - damage(n, &without(&x, &mine));
    }
    Ok((subsidy, tax))
}

fn separable_damage(scenario: &MarketScenario) -> impl Fn(usize, &[f64]) -> f64 + '_ {
    move |n, x| {
        scenario.damages[n]
            .iter()
            .zip(x)
            .map(|(e, &v)| e.eval(v).expect("pollution totals lie in the damage domain"))
            .sum()
    }
}

/// Payment to `producer` at the uncapped prices of `profile`.
pub fn incentive_payment(scenario: &MarketScenario, profile: &GenerationProfile, producer: usize, offset: f64) -> Result<f64, SolveError> {
    let alloc = scenario.allocator()?;
    let prices = alloc.prices(profile.node_totals())?;
    let (s, t) = subsidy_and_tax(
        &alloc,
        &profile.observable(scenario),
        &prices,
        producer,
        &separable_damage(scenario),
    )?;
    Ok(s - t + offset)
}

/// Payment with a joint damage function over all channels at each node.
pub fn incentive_payment_multi(
    scenario: &MarketScenario,
    profile: &GenerationProfile,
    producer: usize,
    offset: f64,
    damage: JointDamage,
) -> Result<f64, SolveError> {
    let alloc = scenario.allocator()?;
    let prices = alloc.prices(profile.node_totals())?;
    let (s, t) = subsidy_and_tax(&alloc, &profile.observable(scenario), &prices, producer, damage)?;
    Ok(s - t + offset)
}

/// Smallest offset that leaves `producer` with a nonnegative net position
/// (profit plus payment) at `profile`, using its actual unit costs.
pub fn participation_bound(scenario: &MarketScenario, profile: &GenerationProfile, producer: usize) -> Result<f64, SolveError> {
    let alloc = scenario.allocator()?;
    let q = profile.node_totals();
    let own = profile.producer_totals(producer);
    let totals = profile.observable(scenario);
    let damage = separable_damage(scenario);
    let mut added_damage = 0.0;
    for n in 0..q.len() {
        let x = totals.node_pollution(n);
        added_damage += damage(n, &x) - damage(n, &without(&x, &totals.pollution[n][producer]));
    }
    let added_utility = alloc.utility(q)? - alloc.utility(&without(q, &own))?;
    Ok(-added_utility + production_cost(scenario, profile, Some(producer))? + added_damage)
}

/// Payments to every producer at `profile` and `prices`, with the
/// scenario's offsets.
pub fn incentive_schedule(scenario: &MarketScenario, profile: &GenerationProfile, prices: &[f64]) -> Result<IncentiveSchedule, SolveError> {
    let alloc = scenario.allocator()?;
    let totals = profile.observable(scenario);
    let damage = separable_damage(scenario);
    let mut payments = Vec::with_capacity(scenario.producer_count);
    for i in 0..scenario.producer_count {
        let (subsidy, tax) = subsidy_and_tax(&alloc, &totals, prices, i, &damage)?;
        let offset = scenario.offsets[i];
        payments.push(ProducerPayment {
            producer: i,
            payment: subsidy - tax + offset,
            subsidy,
            tax,
            offset,
            participation_bound: participation_bound(scenario, profile, i)?,
        });
    }
    let budget = iso_budget(&payments);
    Ok(IncentiveSchedule { payments, budget })
}

pub fn iso_budget(payments: &[ProducerPayment]) -> f64 {
    payments.iter().map(|p| p.payment).sum()
}

/// Producers maximising profit plus payment. The payment's gradient cancels
/// price and market power, leaving marginal utility against marginal cost
/// plus the taxed marginal damage.
#[derive(Debug, Clone, Default)]
pub struct MechanismRule {
    pub caps: Option<Vec<f64>>,
}

impl StationarityRule for MechanismRule {
    fn name(&self) -> String {
        "mechanism".into()
    }
    fn grouping(&self) -> Grouping {
        Grouping::NodeProducer
    }
    fn internalizes_damage(&self) -> bool {
        true
    }
    fn caps(&self) -> Option<&[f64]> {
        self.caps.as_deref()
    }
    fn marginal_benefit(&self, ctx: &MarginalContext) -> f64 {
        let payment_gradient = ctx.utility_gradient - ctx.price - ctx.market_power;
        ctx.price + ctx.market_power + payment_gradient
    }
}

/// Equilibrium under the mechanism together with the resulting payments.
pub fn solve_mechanism(
    scenario: &MarketScenario,
    caps: Option<Vec<f64>>,
    config: &SolverConfig,
) -> Result<(EquilibriumReport, IncentiveSchedule), SolveError> {
    let report = solve(&MechanismRule { caps }, scenario, config)?;
    let schedule = incentive_schedule(scenario, &report.profile, &report.prices)?;
    Ok((report, schedule))
}

/// Cost a producer states under the mechanism: its least-cost combination
/// of true cost and the damage its pollution adds at `node`, evaluated at
/// the marginal damage of the observed pollution total. Exact when damage
/// is affine over the producer's range.
pub fn declared_cost_under_mechanism(
    scenario: &MarketScenario,
    totals: &ObservableTotals,
    producer: usize,
    node: usize,
) -> Result<SuppliedCurve, SolveError> {
    let x = totals.node_pollution(node);
    let mu = scenario.damages[node]
        .iter()
        .zip(&x)
        .map(|(e, &v)| e.right_derivative(v))
        .collect::<Result<Vec<_>, _>>()?;
    let split = adjusted_cost(scenario, node, Some(producer), &mu)?;
    Ok(SuppliedCurve {
        node,
        producer,
        curve: split.aggregate().clone(),
        split,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    pub optimal: EquilibriumReport,
    pub mechanism: EquilibriumReport,
    pub dispatch: EquilibriumReport,
    /// Per-unit gap between the mechanism equilibrium and the optimum.
    pub mechanism_gap: Vec<f64>,
    /// Per-unit gap between dispatch on stated costs and the optimum.
    pub dispatch_gap: Vec<f64>,
    pub tolerance: f64,
}

impl CompatibilityReport {
    pub fn worst_gap(&self) -> f64 {
        self.mechanism_gap.iter().chain(&self.dispatch_gap).fold(0.0f64, |m, g| m.max(*g))
    }

    pub fn compatible(&self) -> bool {
        self.worst_gap() <= self.tolerance
    }
}

fn unit_gaps(a: &GenerationProfile, b: &GenerationProfile) -> Vec<f64> {
    a.quantities().iter().zip(b.quantities()).map(|(x, y)| (x - y).abs()).collect()
}

/// Checks that both the mechanism equilibrium and the ISO dispatch on
/// stated costs reproduce the welfare optimum within `tolerance` per unit.
pub fn verify_incentive_compatibility(
    scenario: &MarketScenario,
    config: &SolverConfig,
    tolerance: f64,
) -> Result<CompatibilityReport, IncentiveError> {
    let optimal = solve(&OptimalRule, scenario, config)?;
    let mechanism = solve(&MechanismRule::default(), scenario, config)?;
    let totals = optimal.profile.observable(scenario);
    let mut curves = Vec::new();
    for n in 0..scenario.node_count() {
        for i in 0..scenario.producer_count {
            if !scenario.units_at(n, Some(i)).is_empty() {
                curves.push(declared_cost_under_mechanism(scenario, &totals, i, n)?);
            }
        }
    }
    let dispatch = dispatch_supplied(scenario, &curves, config)?;
    let report = CompatibilityReport {
        mechanism_gap: unit_gaps(&mechanism.profile, &optimal.profile),
        dispatch_gap: unit_gaps(&dispatch.profile, &optimal.profile),
        optimal,
        mechanism,
        dispatch,
        tolerance,
    };
    if report.compatible() {
        Ok(report)
    } else {
        Err(IncentiveError::NotCompatible(Box::new(report)))
    }
}
