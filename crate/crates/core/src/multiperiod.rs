//! Several dispatch intervals coupled by energy budgets and other linear
//! constraints on unit outputs.
//!
//! Coupling constraints are priced out: a multiplier on each constraint is
//! added to the marginal cost of every unit output it involves, after which
//! the intervals are solved independently. Multipliers are found by
//! bisection, one constraint at a time, until none of them moves.

use crate::equilibrium::{build_report, solve, EquilibriumReport, SolveError, SolverConfig, StationarityRule};
use crate::incentive::incentive_payment;
use crate::market::{GenerationProfile, MarketScenario};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiError {
    #[error("inconsistent intervals: {0}")]
    Structure(String),
    #[error("constraint {constraint} cannot be met for any multiplier up to {limit}")]
    Unbracketed { constraint: usize, limit: f64 },
    #[error("multipliers did not settle after {0} rounds")]
    NotConverged(usize),
    #[error("interval {interval}: {source}")]
    Interval { interval: usize, source: SolveError },
}

/// Total output of `unit` over all intervals may not exceed `limit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyLimit {
    pub unit: usize,
    pub limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTerm {
    pub interval: usize,
    pub unit: usize,
    pub coefficient: f64,
}

/// `sum coefficient * output <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalConstraint {
    pub terms: Vec<LinearTerm>,
    pub bound: f64,
}

impl IntervalConstraint {
    pub fn value(&self, profiles: &[GenerationProfile]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coefficient * profiles[t.interval].quantity(t.unit))
            .sum::<f64>()
            - self.bound
    }

    fn intervals(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.terms.iter().map(|t| t.interval).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIntervalScenario {
    pub intervals: Vec<MarketScenario>,
    pub energy_limits: Vec<EnergyLimit>,
    pub constraints: Vec<IntervalConstraint>,
}

impl MultiIntervalScenario {
    pub fn new(
        intervals: Vec<MarketScenario>,
        energy_limits: Vec<EnergyLimit>,
        constraints: Vec<IntervalConstraint>,
    ) -> Result<Self, MultiError> {
        let first = intervals.first().ok_or_else(|| MultiError::Structure("no intervals".into()))?;
        for (t, s) in intervals.iter().enumerate() {
            let same = s.node_count() == first.node_count()
                && s.units.len() == first.units.len()
                && s.units.iter().zip(&first.units).all(|(a, b)| a.id == b.id);
            if !same {
                return Err(MultiError::Structure(format!("interval {} has a different unit set", t + 1)));
            }
        }
        for e in &energy_limits {
            if e.unit >= first.units.len() {
                return Err(MultiError::Structure(format!("energy limit on unknown unit {}", e.unit)));
            }
        }
        for c in &constraints {
            for term in &c.terms {
                if term.interval >= intervals.len() || term.unit >= first.units.len() {
                    return Err(MultiError::Structure("constraint term out of range".into()));
                }
            }
        }
        Ok(Self {
            intervals,
            energy_limits,
            constraints,
        })
    }

    /// Energy limits first, then the general constraints.
    pub fn all_constraints(&self) -> Vec<IntervalConstraint> {
        let periods = self.intervals.len();
        self.energy_limits
            .iter()
            .map(|e| IntervalConstraint {
                terms: (0..periods)
                    .map(|t| LinearTerm {
                        interval: t,
                        unit: e.unit,
                        coefficient: 1.0,
                    })
                    .collect(),
                bound: e.limit,
            })
            .chain(self.constraints.iter().cloned())
            .collect()
    }

    /// Intervals with each unit's cost shifted by the multipliers of the
    /// constraints it appears in.
    pub fn priced_intervals(&self, multipliers: &[f64]) -> Vec<MarketScenario> {
        let constraints = self.all_constraints();
        let mut out = self.intervals.clone();
        let mut shift = vec![vec![0.0; self.intervals[0].units.len()]; self.intervals.len()];
        for (c, nu) in constraints.iter().zip(multipliers) {
            for term in &c.terms {
                shift[term.interval][term.unit] += nu * term.coefficient;
            }
        }
        for (market, row) in out.iter_mut().zip(&shift) {
            for (unit, &s) in market.units.iter_mut().zip(row) {
                if s != 0.0 {
                    unit.cost = unit.cost.add_marginal_offset(s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiConfig {
    pub inner: SolverConfig,
    /// Width at which a multiplier bracket is considered closed.
    pub multiplier_tolerance: f64,
    pub max_rounds: usize,
}

impl Default for MultiConfig {
    fn default() -> Self {
        Self {
            inner: SolverConfig::default(),
            multiplier_tolerance: 1e-11,
            max_rounds: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIntervalReport {
    pub intervals: Vec<EquilibriumReport>,
    /// One multiplier per constraint, energy limits first.
    pub multipliers: Vec<f64>,
    /// Largest constraint violation.
    pub feasibility_residual: f64,
    /// Largest `multiplier * |slack|`.
    pub slackness_residual: f64,
    /// `payments[t][i]` with zero offsets.
    pub payments: Vec<Vec<f64>>,
}

struct Search<'a> {
    scenario: &'a MultiIntervalScenario,
    rule: &'a dyn StationarityRule,
    config: &'a MultiConfig,
    constraints: Vec<IntervalConstraint>,
}

impl Search<'_> {
    fn solve_intervals(&self, multipliers: &[f64], which: &[usize], out: &mut [EquilibriumReport]) -> Result<(), MultiError> {
        let priced = self.scenario.priced_intervals(multipliers);
        for &t in which {
            out[t] = solve(self.rule, &priced[t], &self.config.inner).map_err(|source| MultiError::Interval { interval: t, source })?;
        }
        Ok(())
    }

    fn violation(&self, c: usize, reports: &[EquilibriumReport]) -> f64 {
        let profiles: Vec<GenerationProfile> = reports.iter().map(|r| r.profile.clone()).collect();
        self.constraints[c].value(&profiles)
    }

    /// Bisection on one multiplier; returns the closed bracket `(lo, hi)`
    /// with the constraint violated at `lo` and met at `hi`.
    fn bracket(&self, c: usize, multipliers: &mut [f64], reports: &mut [EquilibriumReport]) -> Result<(f64, f64), MultiError> {
        let which = self.constraints[c].intervals();
        let tol = 1e-9;
        let eval = |nu: f64, m: &mut [f64], r: &mut [EquilibriumReport]| -> Result<f64, MultiError> {
            m[c] = nu;
            self.solve_intervals(m, &which, r)?;
            Ok(self.violation(c, r))
        };
        if eval(0.0, multipliers, reports)? <= tol {
            return Ok((0.0, 0.0));
        }
        let mut lo = 0.0;
        let mut hi = multipliers[c].max(1.0);
        let mut doublings = 0;
        while eval(hi, multipliers, reports)? > tol {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > 60 {
                return Err(MultiError::Unbracketed { constraint: c, limit: hi });
            }
        }
        while hi - lo > self.config.multiplier_tolerance * (1.0 + hi) {
            let mid = 0.5 * (lo + hi);
            if eval(mid, multipliers, reports)? > tol {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        eval(hi, multipliers, reports)?;
        Ok((lo, hi))
    }
}

/// Solves all intervals jointly under `rule` with every coupling constraint priced out.
pub fn solve_multi(
    rule: &dyn StationarityRule,
    scenario: &MultiIntervalScenario,
    config: &MultiConfig,
) -> Result<MultiIntervalReport, MultiError> {
    let search = Search {
        scenario,
        rule,
        config,
        constraints: scenario.all_constraints(),
    };
    let count = search.constraints.len();
    let periods = scenario.intervals.len();
    let mut multipliers = vec![0.0; count];
    let mut reports: Vec<EquilibriumReport> = Vec::with_capacity(periods);
    for (t, s) in scenario.intervals.iter().enumerate() {
        reports.push(solve(rule, s, &config.inner).map_err(|source| MultiError::Interval { interval: t, source })?);
    }
    let mut brackets = vec![(0.0, 0.0); count];
    let mut settled = count == 0;
    for _ in 0..config.max_rounds.max(1) {
        if settled {
            break;
        }
        let mut moved = 0.0f64;
        for c in 0..count {
            let before = multipliers[c];
            brackets[c] = search.bracket(c, &mut multipliers, &mut reports)?;
            multipliers[c] = brackets[c].1;
            moved = moved.max((multipliers[c] - before).abs());
        }
        settled = moved <= 10.0 * config.multiplier_tolerance * (1.0 + multipliers.iter().fold(0.0f64, |a, b| a.max(*b)));
    }
    if !settled {
        return Err(MultiError::NotConverged(config.max_rounds));
    }
    let all: Vec<usize> = (0..periods).collect();
    search.solve_intervals(&multipliers, &all, &mut reports)?;

    // A multiplier sitting on a jump of the constraint value leaves slack.
    // Both one-sided solutions are optimal at that multiplier, so a convex
    // combination restores complementary slackness.
    let priced = scenario.priced_intervals(&multipliers);
    for c in 0..count {
        let (lo, hi) = brackets[c];
        let slack = search.violation(c, &reports);
        if hi <= 0.0 || slack >= -1e-9 {
            continue;
        }
        let mut low = multipliers.clone();
        low[c] = lo;
        let mut below = reports.clone();
        let which = search.constraints[c].intervals();
        search.solve_intervals(&low, &which, &mut below)?;
        let over = search.violation(c, &below);
        if over <= 0.0 {
            continue;
        }
        let theta = -slack / (over - slack);
        for &t in &which {
            let mixed: Vec<f64> = below[t]
                .profile
                .quantities()
                .iter()
                .zip(reports[t].profile.quantities())
                .map(|(a, b)| theta * a + (1.0 - theta) * b)
                .collect();
            let market = &priced[t];
            let profile = GenerationProfile::new(market, mixed).map_err(|e| MultiError::Interval {
                interval: t,
                source: e.into(),
            })?;
            let alloc = market.allocator().map_err(|e| MultiError::Interval {
                interval: t,
                source: e.into(),
            })?;
            let residual = below[t].residual.max(reports[t].residual);
            reports[t] = build_report(market, &alloc, rule, profile, residual, reports[t].sweeps)
                .map_err(|source| MultiError::Interval { interval: t, source })?;
        }
    }

    // Reports carry priced costs; restate welfare and profits on true costs.
    for (t, report) in reports.iter_mut().enumerate() {
        let market = &scenario.intervals[t];
        let alloc = market.allocator().map_err(|e| MultiError::Interval {
            interval: t,
            source: e.into(),
        })?;
        let profile = GenerationProfile::new(market, report.profile.quantities().to_vec()).map_err(|e| MultiError::Interval {
            interval: t,
            source: e.into(),
        })?;
        let (residual, sweeps) = (report.residual, report.sweeps);
        *report =
            build_report(market, &alloc, rule, profile, residual, sweeps).map_err(|source| MultiError::Interval { interval: t, source })?;
    }

    let profiles: Vec<GenerationProfile> = reports.iter().map(|r| r.profile.clone()).collect();
    let mut feasibility: f64 = 0.0;
    let mut slackness: f64 = 0.0;
    for (c, nu) in search.constraints.iter().zip(&multipliers) {
        let v = c.value(&profiles);
        feasibility = feasibility.max(v);
        slackness = slackness.max(nu * v.abs());
    }
    let mut payments = Vec::with_capacity(periods);
    for (t, market) in scenario.intervals.iter().enumerate() {
        let row = (0..market.producer_count)
            .map(|i| incentive_payment(market, &profiles[t], i, 0.0))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| MultiError::Interval { interval: t, source })?;
        payments.push(row);
    }
    Ok(MultiIntervalReport {
        intervals: reports,
        multipliers,
        feasibility_residual: feasibility,
        slackness_residual: slackness,
        payments,
    })
}
