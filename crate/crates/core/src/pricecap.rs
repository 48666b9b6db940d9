//! Nodal price caps under oligopolistic supply.
//!
//! With a cap the realised price is `min(P_n, cap_n)`. Producers behave as
//! Cournot competitors against the capped price: where the cap binds the
//! price no longer responds to their output, so they act as price takers at
//! the cap. Demand that would be served at the cap but is not supplied is
//! reported as load shedding.

use crate::equilibrium::{
    declared_cost_market_power, solve, solve_equilibrium, EquilibriumKind, EquilibriumReport, OligopolisticRule, SolveError, SolverConfig,
};
use crate::market::{adjusted_cost, MarketScenario};
use crate::network::{Allocator, NetworkError, Side};
use crate::piecewise::{MarginalSegment, PiecewiseCurve, Shape};

/// Quantity that may be unbounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantity {
    Finite(f64),
    Unbounded,
}

impl Quantity {
    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            Self::Unbounded => None,
        }
    }
}

/// Piecewise cost a producer states under a cap: its market-power curve up
/// to `declared_limit`, flat at the cap up to `true_limit`, and its true
/// merged cost beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct CapRegions {
    pub node: usize,
    pub producer: usize,
    pub cap: f64,
    pub declared_limit: f64,
    pub true_limit: f64,
    pub curve: PiecewiseCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CappedReport {
    pub report: EquilibriumReport,
    pub caps: Vec<f64>,
    /// Whether the uncapped price reaches the cap at each node.
    pub binding: Vec<bool>,
    pub desired_demand: Vec<Quantity>,
    pub load_shed: Vec<Quantity>,
    /// Regions per producer and node, when the uncapped oligopolistic
    /// equilibrium needed to build them could be computed.
    pub regions: Vec<CapRegions>,
}

pub fn capped_price(alloc: &Allocator, q: &[f64], caps: &[f64]) -> Result<Vec<f64>, NetworkError> {
    Ok(alloc.prices(q)?.iter().zip(caps).map(|(p, c)| p.min(*c)).collect())
}

/// Largest injection at `node`, others held at `q`, at which the nodal
/// price still reaches `cap`.
pub fn desired_demand(alloc: &Allocator, q: &[f64], node: usize, cap: f64) -> Result<Quantity, NetworkError> {
    let mut base = q.to_vec();
    base[node] = 0.0;
    let tol = 1e-10 * (1.0 + cap.abs());
    let mut t = 0.0;
    loop {
        let piece = alloc.ray(&base, node, t, Side::Right)?;
        let p = piece.price[node];
        let s = piece.slope[node];
        if p < cap - tol {
            return Ok(Quantity::Finite(t));
        }
        if s < 0.0 {
            let cross = t + (p - cap) / -s;
            if cross < piece.to {
                return Ok(Quantity::Finite(cross));
            }
        }
        if !piece.to.is_finite() {
            return Ok(Quantity::Unbounded);
        }
        t = piece.to;
    }
}

/// Regions of the stated cost of `producer` at `node` under `cap`, built
/// from an uncapped oligopolistic equilibrium.
pub fn cap_regions(
    scenario: &MarketScenario,
    oligopolistic: &EquilibriumReport,
    producer: usize,
    node: usize,
    cap: f64,
) -> Result<CapRegions, SolveError> {
    let declared = declared_cost_market_power(scenario, oligopolistic, producer, node)?;
    let split = adjusted_cost(scenario, node, Some(producer), &[])?;
    let truth = split.aggregate();
    let capacity = split.total_capacity();
    let true_limit = truth.quantity_at_marginal(cap, capacity);
    let declared_limit = declared.quantity_at_marginal(cap, capacity).min(true_limit);
    let mut segments: Vec<MarginalSegment> = declared
        .marginal_segments()
        .into_iter()
        .filter(|s| s.start < declared_limit)
        .collect();
    if true_limit > declared_limit {
        segments.push(MarginalSegment {
            start: declared_limit,
            marginal: cap,
            rate: 0.0,
        });
    }
    for (k, p) in truth.pieces().iter().enumerate() {
        let end = truth.piece_end(k);
        if end <= true_limit || p.start >= capacity {
            continue;
        }
        let start = p.start.max(true_limit);
        if segments.last().is_some_and(|s| s.start >= start) {
            continue;
        }
        segments.push(MarginalSegment {
            start,
            marginal: p.slope + p.slope_rate * (start - p.start),
            rate: p.slope_rate,
        });
    }
    if segments.is_empty() || capacity <= 0.0 {
        segments = vec![MarginalSegment {
            start: 0.0,
            marginal: cap,
            rate: 0.0,
        }];
    }
    let end = capacity.max(segments.last().map_or(0.0, |s| s.start) + f64::EPSILON);
    let curve = PiecewiseCurve::from_marginals(0.0, &segments, Some(end), Shape::Irregular)?;
    Ok(CapRegions {
        node,
        producer,
        cap,
        declared_limit,
        true_limit,
        curve,
    })
}

/// Oligopolistic equilibrium under nodal caps.
pub fn solve_capped(scenario: &MarketScenario, caps: &[f64], config: &SolverConfig) -> Result<CappedReport, SolveError> {
    if caps.len() != scenario.node_count() {
        return Err(SolveError::Invalid(format!(
            "{} caps for {} nodes",
            caps.len(),
            scenario.node_count()
        )));
    }
    let rule = OligopolisticRule { caps: Some(caps.to_vec()) };
    let report = solve(&rule, scenario, config)?;
    let alloc = scenario.allocator()?;
    let totals = report.profile.node_totals().to_vec();
    let binding = report.nodal_prices.iter().zip(caps).map(|(p, c)| *p >= c - 1e-9).collect();
    let mut desired = Vec::with_capacity(caps.len());
    let mut shed = Vec::with_capacity(caps.len());
    for (n, &cap) in caps.iter().enumerate() {
        let d = desired_demand(&alloc, &totals, n, cap)?;
        shed.push(match d {
            Quantity::Finite(v) => Quantity::Finite((v - totals[n]).max(0.0)),
            Quantity::Unbounded => Quantity::Unbounded,
        });
        desired.push(d);
    }
    let mut regions = Vec::new();
    if let Ok(olig) = solve_equilibrium(EquilibriumKind::Oligopolistic, scenario, config) {
        for n in 0..scenario.node_count() {
            for i in 0..scenario.producer_count {
                if !scenario.units_at(n, Some(i)).is_empty() {
                    regions.push(cap_regions(scenario, &olig, i, n, caps[n])?);
                }
            }
        }
    }
    Ok(CappedReport {
        report,
        caps: caps.to_vec(),
        binding,
        desired_demand: desired,
        load_shed: shed,
        regions,
    })
}
