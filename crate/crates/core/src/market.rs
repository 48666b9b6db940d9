//! Market data: nodes, producers, generation units, pollution and damages.
//!
//! Nodes, producers and units are addressed by zero-based indices. Units are
//! kept sorted by `(node, producer, index)`, so within a node they appear in
//! the producer-then-unit order used to break merit-order ties.

use crate::network::{Allocator, Grid, NetworkError};
use crate::piecewise::{merit_merge, CurveError, MeritSplit, PiecewiseCurve, Shape};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("unit {unit} refers to node {node} but the grid has {nodes} nodes")]
    UnknownNode { unit: UnitId, node: usize, nodes: usize },
    #[error("unit {unit} refers to producer {producer} but there are {producers} producers")]
    UnknownProducer { unit: UnitId, producer: usize, producers: usize },
    #[error("unit {0} is defined twice")]
    DuplicateUnit(UnitId),
    #[error("unit {unit} has {got} pollution curves, expected {expected}")]
    PollutionChannels { unit: UnitId, got: usize, expected: usize },
    #[error("damage table has the wrong shape: expected {nodes} nodes x {channels} channels")]
    DamageShape { nodes: usize, channels: usize },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("quantity {quantity} of unit {unit} is outside [0, {capacity}]")]
    QuantityOutOfRange { unit: UnitId, quantity: f64, capacity: f64 },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// `(node, producer, unit)` triple, shown one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitId {
    pub node: usize,
    pub producer: usize,
    pub index: usize,
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.node + 1, self.producer + 1, self.index + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: UnitId,
    pub capacity: f64,
    pub cost: PiecewiseCurve,
    /// One pollution curve per pollutant channel.
    pub pollution: Vec<PiecewiseCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketScenario {
    pub grid: Grid,
    pub utilities: Vec<PiecewiseCurve>,
    pub producer_count: usize,
    pub units: Vec<Unit>,
    /// `damages[node][channel]`: social cost of the pollution at that node.
    pub damages: Vec<Vec<PiecewiseCurve>>,
    pub price_caps: Option<Vec<f64>>,
    /// Lump-sum offsets added to each producer's incentive payment.
    pub offsets: Vec<f64>,
}

impl MarketScenario {
    /// Checks structural consistency and sorts units. Curve shapes are
    /// checked separately by [`validate`].
    pub fn new(
        grid: Grid,
        utilities: Vec<PiecewiseCurve>,
        producer_count: usize,
        mut units: Vec<Unit>,
        damages: Vec<Vec<PiecewiseCurve>>,
    ) -> Result<Self, MarketError> {
        let nodes = grid.node_count;
        if utilities.len() != nodes {
            return Err(MarketError::Dimension {
                expected: nodes,
                got: utilities.len(),
            });
        }
        let channels = damages.first().map_or(0, |d| d.len());
        if damages.len() != nodes || damages.iter().any(|d| d.len() != channels) {
            return Err(MarketError::DamageShape { nodes, channels });
        }
        for u in &units {
            if u.id.node >= nodes {
                return Err(MarketError::UnknownNode {
                    unit: u.id,
                    node: u.id.node,
                    nodes,
                });
            }
            if u.id.producer >= producer_count {
                return Err(MarketError::UnknownProducer {
                    unit: u.id,
                    producer: u.id.producer,
                    producers: producer_count,
                });
            }
            if u.pollution.len() != channels {
                return Err(MarketError::PollutionChannels {
                    unit: u.id,
                    got: u.pollution.len(),
                    expected: channels,
                });
            }
        }
        units.sort_by_key(|u| u.id);
        if let Some(w) = units.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(MarketError::DuplicateUnit(w[0].id));
        }
        Ok(Self {
            grid,
            utilities,
            producer_count,
            units,
            damages,
            price_caps: None,
            offsets: vec![0.0; producer_count],
        })
    }

    pub fn with_price_caps(mut self, caps: Vec<f64>) -> Result<Self, MarketError> {
        if caps.len() != self.node_count() {
            return Err(MarketError::Dimension {
                expected: self.node_count(),
                got: caps.len(),
            });
        }
        self.price_caps = Some(caps);
        Ok(self)
    }

    pub fn with_offsets(mut self, offsets: Vec<f64>) -> Result<Self, MarketError> {
        if offsets.len() != self.producer_count {
            return Err(MarketError::Dimension {
                expected: self.producer_count,
                got: offsets.len(),
            });
        }
        self.offsets = offsets;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count
    }

    pub fn channel_count(&self) -> usize {
        self.damages.first().map_or(0, |d| d.len())
    }

    pub fn allocator(&self) -> Result<Allocator, NetworkError> {
        Allocator::new(&self.grid, &self.utilities)
    }

    /// Indices of units at `node`, optionally restricted to one producer, in
    /// tie-breaking order.
    pub fn units_at(&self, node: usize, producer: Option<usize>) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.id.node == node && producer.is_none_or(|p| u.id.producer == p))
            .map(|(k, _)| k)
            .collect()
    }

    pub fn unit_index(&self, id: UnitId) -> Option<usize> {
        self.units.binary_search_by_key(&id, |u| u.id).ok()
    }

    /// Capacity of producer `producer` at `node`.
    pub fn capacity(&self, node: usize, producer: usize) -> f64 {
        self.units_at(node, Some(producer)).iter().map(|&k| self.units[k].capacity).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "{}: {}", i.location, i.message)?;
        }
        Ok(())
    }
}

/// Checks curve shapes, domains, capacities and limits.
pub fn validate(scenario: &MarketScenario) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (n, u) in scenario.utilities.iter().enumerate() {
        if let Err(e) = u.check_shape(Shape::Concave) {
            report.push(format!("utility at node {}", n + 1), e.to_string());
        }
    }
    for unit in &scenario.units {
        let at = |what: &str| format!("{what} of unit {}", unit.id);
        if !(unit.capacity.is_finite() && unit.capacity >= 0.0) {
            report.push(at("capacity"), format!("invalid capacity {}", unit.capacity));
        }
        let mut curves = vec![("cost", &unit.cost)];
        curves.extend(unit.pollution.iter().map(|p| ("pollution", p)));
        for (what, curve) in curves {
            if let Err(e) = curve.check_shape(Shape::Convex) {
                report.push(at(what), e.to_string());
            }
            match curve.domain_end() {
                Some(end) if end + 1e-12 >= unit.capacity => {}
                Some(end) => report.push(at(what), format!("domain ends at {end}, before the capacity {}", unit.capacity)),
                None => report.push(at(what), "domain must be bounded by the unit capacity"),
            }
            if curve.pieces()[0].value.abs() > 1e-12 {
                report.push(at(what), "value at zero must be 0");
            }
        }
        for p in &unit.pollution {
            if p.pieces()[0].slope < 0.0 {
                report.push(at("pollution"), "pollution must not decrease with output");
            }
        }
    }
    for (n, row) in scenario.damages.iter().enumerate() {
        for (c, e) in row.iter().enumerate() {
            if let Err(err) = e.check_shape(Shape::Convex) {
                report.push(format!("damage at node {} channel {}", n + 1, c + 1), err.to_string());
            }
        }
    }
    for (l, line) in scenario.grid.lines.iter().enumerate() {
        if !(line.capacity >= 0.0) {
            report.push(format!("line {}", l + 1), format!("negative capacity {}", line.capacity));
        }
    }
    if let Some(caps) = &scenario.price_caps {
        for (n, c) in caps.iter().enumerate() {
            if !(*c >= 0.0) {
                report.push(format!("price cap at node {}", n + 1), format!("invalid cap {c}"));
            }
        }
    }
    report
}

/// Per-unit output together with the totals derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationProfile {
    quantities: Vec<f64>,
    node_producer: Vec<Vec<f64>>,
    node: Vec<f64>,
    pollution: Vec<Vec<Vec<f64>>>,
    node_pollution: Vec<Vec<f64>>,
}

impl GenerationProfile {
    pub fn new(scenario: &MarketScenario, quantities: Vec<f64>) -> Result<Self, MarketError> {
        if quantities.len() != scenario.units.len() {
            return Err(MarketError::Dimension {
                expected: scenario.units.len(),
                got: quantities.len(),
            });
        }
        let (n, p, c) = (scenario.node_count(), scenario.producer_count, scenario.channel_count());
        let mut node_producer = vec![vec![0.0; p]; n];
        let mut pollution = vec![vec![vec![0.0; c]; p]; n];
        let mut quantities = quantities;
        for (unit, q) in scenario.units.iter().zip(quantities.iter_mut()) {
            if q.is_nan() || *q < -1e-9 || *q > unit.capacity + 1e-9 {
                return Err(MarketError::QuantityOutOfRange {
                    unit: unit.id,
                    quantity: *q,
                    capacity: unit.capacity,
                });
            }
            *q = q.clamp(0.0, unit.capacity);
            node_producer[unit.id.node][unit.id.producer] += *q;
            for (ch, curve) in unit.pollution.iter().enumerate() {
                pollution[unit.id.node][unit.id.producer][ch] += curve.eval(*q)?;
            }
        }
        let node = node_producer.iter().map(|r| r.iter().sum()).collect();
        let node_pollution = pollution
            .iter()
            .map(|by_producer| (0..c).map(|ch| by_producer.iter().map(|x| x[ch]).sum()).collect())
            .collect();
        Ok(Self {
            quantities,
            node_producer,
            node,
            pollution,
            node_pollution,
        })
    }

    pub fn zero(scenario: &MarketScenario) -> Self {
        Self::new(scenario, vec![0.0; scenario.units.len()]).expect("zero output is always admissible")
    }

    pub fn quantities(&self) -> &[f64] {
        &self.quantities
    }

    pub fn quantity(&self, unit: usize) -> f64 {
        self.quantities[unit]
    }

    /// Total injection per node.
    pub fn node_totals(&self) -> &[f64] {
        &self.node
    }

    pub fn node_producer_total(&self, node: usize, producer: usize) -> f64 {
        self.node_producer[node][producer]
    }

    /// Output of `producer` at every node.
    pub fn producer_totals(&self, producer: usize) -> Vec<f64> {
        self.node_producer.iter().map(|r| r[producer]).collect()
    }

    pub fn pollution(&self, node: usize, producer: usize, channel: usize) -> f64 {
        self.pollution[node][producer][channel]
    }

    pub fn node_pollution(&self, node: usize) -> &[f64] {
        &self.node_pollution[node]
    }

    /// The totals an ISO may observe: nodal injections, pollution and
    /// capacities per producer, never unit-level data.
    pub fn observable(&self, scenario: &MarketScenario) -> ObservableTotals {
        let capacity = (0..scenario.node_count())
            .map(|n| (0..scenario.producer_count).map(|i| scenario.capacity(n, i)).collect())
            .collect();
        ObservableTotals {
            injection: self.node_producer.clone(),
            pollution: self.pollution.clone(),
            capacity,
        }
    }
}

/// Producer-level totals visible to the ISO, indexed `[node][producer]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableTotals {
    pub injection: Vec<Vec<f64>>,
    /// `[node][producer][channel]`.
    pub pollution: Vec<Vec<Vec<f64>>>,
    pub capacity: Vec<Vec<f64>>,
}

impl ObservableTotals {
    pub fn node_totals(&self) -> Vec<f64> {
        self.injection.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn node_pollution(&self, node: usize) -> Vec<f64> {
        let channels = self.pollution[node].first().map_or(0, |v| v.len());
        (0..channels).map(|c| self.pollution[node].iter().map(|x| x[c]).sum()).collect()
    }

    pub fn producer_totals(&self, producer: usize) -> Vec<f64> {
        self.injection.iter().map(|r| r[producer]).collect()
    }
}

/// Least-cost combination of one producer's units at a node.
pub fn merged_cost(scenario: &MarketScenario, producer: usize, node: usize) -> Result<MeritSplit, CurveError> {
    adjusted_cost(scenario, node, Some(producer), &[])
}

/// Least-cost combination of all units at a node, ties broken by producer then unit.
pub fn node_merged_cost(scenario: &MarketScenario, node: usize) -> Result<MeritSplit, CurveError> {
    adjusted_cost(scenario, node, None, &[])
}

/// Merge of unit costs plus `marginal_damage[c]` times each unit's pollution
/// in channel `c`. An empty slice means true costs.
pub fn adjusted_cost(
    scenario: &MarketScenario,
    node: usize,
    producer: Option<usize>,
    marginal_damage: &[f64],
) -> Result<MeritSplit, CurveError> {
    let components: Vec<(PiecewiseCurve, f64)> = scenario
        .units_at(node, producer)
        .into_iter()
        .map(|k| {
            let u = &scenario.units[k];
            let curve = marginal_damage
                .iter()
                .zip(&u.pollution)
                .fold(u.cost.clone(), |acc, (&mu, x)| if mu == 0.0 { acc } else { acc.add_scaled(x, mu) });
            (curve, u.capacity)
        })
        .collect();
    merit_merge(&components)
}

/// Right derivative of each channel's damage at the node's current pollution.
pub fn marginal_damage(scenario: &MarketScenario, profile: &GenerationProfile, node: usize) -> Result<Vec<f64>, CurveError> {
    scenario.damages[node]
        .iter()
        .zip(profile.node_pollution(node))
        .map(|(e, &x)| e.right_derivative(x))
        .collect()
}

pub fn production_cost(scenario: &MarketScenario, profile: &GenerationProfile, producer: Option<usize>) -> Result<f64, CurveError> {
    let mut total = 0.0;
    for (u, &q) in scenario.units.iter().zip(profile.quantities()) {
        if producer.is_none_or(|p| p == u.id.producer) {
            total += u.cost.eval(q)?;
        }
    }
    Ok(total)
}

pub fn total_damage(scenario: &MarketScenario, profile: &GenerationProfile) -> Result<f64, CurveError> {
    let mut total = 0.0;
    for (n, row) in scenario.damages.iter().enumerate() {
        for (e, &x) in row.iter().zip(profile.node_pollution(n)) {
            total += e.eval(x)?;
        }
    }
    Ok(total)
}

/// Network utility minus production cost minus pollution damage.
pub fn welfare_with(alloc: &Allocator, scenario: &MarketScenario, profile: &GenerationProfile) -> Result<f64, MarketError> {
    Ok(alloc.utility(profile.node_totals())? - production_cost(scenario, profile, None)? - total_damage(scenario, profile)?)
}

pub fn social_welfare(scenario: &MarketScenario, profile: &GenerationProfile) -> Result<f64, MarketError> {
    welfare_with(&scenario.allocator()?, scenario, profile)
}

/// Revenue at the given nodal prices minus production cost.
pub fn profit_at_prices(
    scenario: &MarketScenario,
    profile: &GenerationProfile,
    producer: usize,
    prices: &[f64],
) -> Result<f64, MarketError> {
    let revenue: f64 = prices.iter().zip(profile.producer_totals(producer)).map(|(p, q)| p * q).sum();
    Ok(revenue - production_cost(scenario, profile, Some(producer))?)
}

/// Profit at the uncapped nodal prices of the profile.
pub fn producer_profit(scenario: &MarketScenario, profile: &GenerationProfile, producer: usize) -> Result<f64, MarketError> {
    let prices = scenario.allocator()?.prices(profile.node_totals())?;
    profit_at_prices(scenario, profile, producer, &prices)
}
