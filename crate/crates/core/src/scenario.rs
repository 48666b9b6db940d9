//! JSON scenario files.
//!
//! Identifiers in files are one-based. Curves are given by their marginals
//! as `[start, marginal]` or `[start, marginal, rate]` rows, or for
//! utilities by the `quadratic` shorthand `-a*d^2 + b*d` flattening at
//! `saturation`.

use crate::equilibrium::{InitialProfile, SolverConfig};
use crate::market::{validate, MarketError, MarketScenario, Unit, UnitId, ValidationReport};
use crate::multiperiod::{EnergyLimit, IntervalConstraint, LinearTerm, MultiIntervalScenario};
use crate::network::{Grid, IsoConstraint, Line};
use crate::piecewise::{CurveError, MarginalSegment, PiecewiseCurve, Shape};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    Schema(u32),
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("scenario failed validation:\n{0}")]
    Validation(ValidationReport),
    #[error(transparent)]
    Market(#[from] MarketError),
}

fn invalid(location: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        location: location.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub a: f64,
    pub b: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_at_zero: Option<f64>,
    /// Domain end; defaults to the unit capacity for costs and pollution and
    /// to an unbounded domain otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<f64>,
}

impl CurveSpec {
    pub fn build(&self, default_end: Option<f64>, shape: Shape, location: &str) -> Result<PiecewiseCurve, ScenarioError> {
        let wrap = |e: CurveError| invalid(location, e);
        match (&self.marginals, &self.quadratic) {
            (Some(rows), None) => {
                let segments = rows
                    .iter()
                    .map(|r| match r.as_slice() {
                        [s, m] => Ok(MarginalSegment {
                            start: *s,
                            marginal: *m,
                            rate: 0.0,
                        }),
                        [s, m, r] => Ok(MarginalSegment {
                            start: *s,
                            marginal: *m,
                            rate: *r,
                        }),
                        _ => Err(invalid(location, "marginal rows need 2 or 3 numbers")),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                PiecewiseCurve::from_marginals(self.value_at_zero.unwrap_or(0.0), &segments, self.end.or(default_end), shape).map_err(wrap)
            }
            (None, Some(q)) => {
                if self.end.is_some() || self.value_at_zero.is_some() {
                    return Err(invalid(location, "the quadratic shorthand takes no other fields"));
                }
                PiecewiseCurve::saturating_quadratic(q.a, q.b, q.saturation).map_err(wrap)
            }
            _ => Err(invalid(location, "give exactly one of `marginals` or `quadratic`")),
        }
    }

    pub fn from_curve(curve: &PiecewiseCurve, default_end: Option<f64>) -> Self {
        let rows = curve
            .marginal_segments()
            .iter()
            .map(|s| {
                if s.rate == 0.0 {
                    vec![s.start, s.marginal]
                } else {
                    vec![s.start, s.marginal, s.rate]
                }
            })
            .collect();
        let v0 = curve.pieces()[0].value;
        Self {
            marginals: Some(rows),
            quadratic: None,
            value_at_zero: (v0 != 0.0).then_some(v0),
            end: if curve.domain_end() == default_end {
                None
            } else {
                curve.domain_end()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub utility: CurveSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitSpec {
    pub node: usize,
    pub producer: usize,
    pub unit: usize,
    pub capacity: f64,
    pub cost: CurveSpec,
    #[serde(default)]
    pub pollution: Vec<CurveSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sweeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    /// `"zero"` or `"competitive"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalSpec {
    /// Replacement utilities, one per node; the base utilities when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utilities: Option<Vec<CurveSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyLimitSpec {
    /// `[node, producer, unit]`.
    pub unit: [usize; 3],
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub interval: usize,
    pub unit: [usize; 3],
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub terms: Vec<TermSpec>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiIntervalSpec {
    pub intervals: Vec<IntervalSpec>,
    #[serde(default)]
    pub energy_limits: Vec<EnergyLimitSpec>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub lines: Vec<Line>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iso_constraints: Vec<IsoConstraint>,
    pub producers: usize,
    #[serde(default)]
    pub channels: usize,
    pub units: Vec<UnitSpec>,
    /// `damages[node][channel]`.
    #[serde(default)]
    pub damages: Vec<Vec<CurveSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_caps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_interval: Option<MultiIntervalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
}

fn unit_id(raw: [usize; 3], location: &str) -> Result<UnitId, ScenarioError> {
    if raw.contains(&0) {
        return Err(invalid(location, "identifiers are one-based"));
    }
    Ok(UnitId {
        node: raw[0] - 1,
        producer: raw[1] - 1,
        index: raw[2] - 1,
    })
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: Self = serde_json::from_str(text)?;
        if file.schema != SCHEMA_VERSION {
            return Err(ScenarioError::Schema(file.schema));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario files always serialize")
    }

    fn utilities(&self, specs: &[CurveSpec]) -> Result<Vec<PiecewiseCurve>, ScenarioError> {
        specs
            .iter()
            .enumerate()
            .map(|(n, s)| s.build(None, Shape::Concave, &format!("utility at node {}", n + 1)))
            .collect()
    }

    /// Builds the market without checking curve shapes.
    pub fn to_market(&self) -> Result<MarketScenario, ScenarioError> {
        let n = self.nodes.len();
        let grid = Grid {
            node_count: n,
            lines: self.lines.clone(),
            constraints: self.iso_constraints.clone(),
        };
        for (l, line) in grid.lines.iter().enumerate() {
            if line.ptdf.len() != n {
                return Err(invalid(
                    format!("line {}", l + 1),
                    format!("ptdf has {} entries for {n} nodes", line.ptdf.len()),
                ));
            }
        }
        for (k, c) in grid.constraints.iter().enumerate() {
            if c.injection.len() != n || c.demand.len() != n {
                return Err(invalid(
                    format!("iso constraint {}", k + 1),
                    "coefficient vectors must have one entry per node",
                ));
            }
        }
        let specs: Vec<CurveSpec> = self.nodes.iter().map(|s| s.utility.clone()).collect();
        let utilities = self.utilities(&specs)?;
        let mut units = Vec::with_capacity(self.units.len());
        for spec in &self.units {
            let id = unit_id([spec.node, spec.producer, spec.unit], "unit")?;
            let at = format!("unit {id}");
            if spec.pollution.len() != self.channels {
                return Err(invalid(
                    &at,
                    format!("{} pollution curves for {} channels", spec.pollution.len(), self.channels),
                ));
            }
            let end = Some(spec.capacity);
            let cost = spec.cost.build(end, Shape::Convex, &format!("cost of {at}"))?;
            let pollution = spec
                .pollution
                .iter()
                .map(|p| p.build(end, Shape::Convex, &format!("pollution of {at}")))
                .collect::<Result<Vec<_>, _>>()?;
            units.push(Unit {
                id,
                capacity: spec.capacity,
                cost,
                pollution,
            });
        }
        let damages = if self.damages.is_empty() && self.channels == 0 {
            vec![Vec::new(); n]
        } else {
            if self.damages.len() != n {
                return Err(invalid("damages", format!("{} rows for {n} nodes", self.damages.len())));
            }
            self.damages
                .iter()
                .enumerate()
                .map(|(node, row)| {
                    if row.len() != self.channels {
                        return Err(invalid(format!("damages at node {}", node + 1), "one curve per channel required"));
                    }
                    row.iter()
                        .enumerate()
                        .map(|(c, s)| s.build(None, Shape::Convex, &format!("damage at node {} channel {}", node + 1, c + 1)))
                        .collect()
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        let mut market = MarketScenario::new(grid, utilities, self.producers, units, damages)?;
        if let Some(caps) = &self.price_caps {
            market = market.with_price_caps(caps.clone())?;
        }
        if let Some(offsets) = &self.offsets {
            market = market.with_offsets(offsets.clone())?;
        }
        Ok(market)
    }

    /// Builds and validates the market.
    pub fn to_validated_market(&self) -> Result<MarketScenario, ScenarioError> {
        let market = self.to_market()?;
        let report = validate(&market);
        if !report.is_ok() {
            return Err(ScenarioError::Validation(report));
        }
        Ok(market)
    }

    pub fn solver_config(&self) -> Result<SolverConfig, ScenarioError> {
        let mut cfg = SolverConfig::default();
        if let Some(s) = &self.solver {
            if let Some(v) = s.tolerance {
                cfg.tolerance = v;
            }
            if let Some(v) = s.residual_tolerance {
                cfg.residual_tolerance = v;
            }
            if let Some(v) = s.max_sweeps {
                cfg.max_sweeps = v;
            }
            if let Some(v) = s.damping {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(invalid("solver.damping", "must lie in (0, 1]"));
                }
                cfg.damping = v;
            }
            cfg.initial = match s.initial.as_deref() {
                None | Some("zero") => InitialProfile::Zero,
                Some("competitive") => InitialProfile::Competitive,
                Some(other) => return Err(invalid("solver.initial", format!("unknown start `{other}`"))),
            };
        }
        Ok(cfg)
    }

    /// Multi-interval problem described by the file, if any.
    pub fn multi_interval(&self) -> Result<Option<MultiIntervalScenario>, ScenarioError> {
        let Some(spec) = &self.multi_interval else { return Ok(None) };
        let base = self.to_validated_market()?;
        let mut intervals = Vec::with_capacity(spec.intervals.len());
        for (t, iv) in spec.intervals.iter().enumerate() {
            let mut market = base.clone();
            if let Some(u) = &iv.utilities {
                if u.len() != base.node_count() {
                    return Err(invalid(format!("interval {}", t + 1), "one utility per node required"));
                }
                market.utilities = self.utilities(u)?;
            }
            intervals.push(market);
        }
        let locate = |raw: [usize; 3], at: &str| -> Result<usize, ScenarioError> {
            let id = unit_id(raw, at)?;
            base.unit_index(id).ok_or_else(|| invalid(at, format!("unknown unit {id}")))
        };
        let energy_limits = spec
            .energy_limits
            .iter()
            .map(|e| {
                Ok(EnergyLimit {
                    unit: locate(e.unit, "energy limit")?,
                    limit: e.limit,
                })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        let constraints = spec
            .constraints
            .iter()
            .map(|c| {
                let terms = c
                    .terms
                    .iter()
                    .map(|t| {
                        if t.interval == 0 || t.interval > intervals.len() {
                            return Err(invalid("constraint term", format!("unknown interval {}", t.interval)));
                        }
                        Ok(LinearTerm {
                            interval: t.interval - 1,
                            unit: locate(t.unit, "constraint term")?,
                            coefficient: t.coefficient,
                        })
                    })
                    .collect::<Result<Vec<_>, ScenarioError>>()?;
                Ok(IntervalConstraint { terms, bound: c.bound })
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        MultiIntervalScenario::new(intervals, energy_limits, constraints)
            .map(Some)
            .map_err(|e| invalid("multi_interval", e))
    }

    /// File form of a market, using explicit marginal rows throughout.
    pub fn from_market(market: &MarketScenario) -> Self {
        let nodes = market
            .utilities
            .iter()
            .enumerate()
            .map(|(n, u)| NodeSpec {
                name: Some(format!("{}", n + 1)),
                utility: CurveSpec::from_curve(u, None),
            })
            .collect();
        let units = market
            .units
            .iter()
            .map(|u| UnitSpec {
                node: u.id.node + 1,
                producer: u.id.producer + 1,
                unit: u.id.index + 1,
                capacity: u.capacity,
                cost: CurveSpec::from_curve(&u.cost, Some(u.capacity)),
                pollution: u.pollution.iter().map(|p| CurveSpec::from_curve(p, Some(u.capacity))).collect(),
            })
            .collect();
        let damages = market
            .damages
            .iter()
            .map(|row| row.iter().map(|e| CurveSpec::from_curve(e, None)).collect())
            .collect();
        Self {
            schema: SCHEMA_VERSION,
            name: None,
            nodes,
            lines: market.grid.lines.clone(),
            iso_constraints: market.grid.constraints.clone(),
            producers: market.producer_count,
            channels: market.channel_count(),
            units,
            damages,
            price_caps: market.price_caps.clone(),
            offsets: market.offsets.iter().any(|&o| o != 0.0).then(|| market.offsets.clone()),
            multi_interval: None,
            solver: None,
        }
    }
}

/// Reads, parses and validates a market scenario file.
pub fn load_market(path: &Path) -> Result<MarketScenario, ScenarioError> {
    ScenarioFile::read(path)?.to_validated_market()
}

/// Text of the bundled two-node, two-producer example.
pub const TWO_NODE_EXAMPLE: &str = include_str!("../data/two_node.json");

/// The bundled two-node, two-producer example.
pub fn two_node_example() -> MarketScenario {
    ScenarioFile::parse(TWO_NODE_EXAMPLE)
        .and_then(|f| f.to_validated_market())
        .expect("bundled example is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_loads() {
        let m = two_node_example();
        assert_eq!(m.units.len(), 8);
        assert_eq!(
            m.units[3].id,
            UnitId {
                node: 0,
                producer: 1,
                index: 1
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TWO_NODE_EXAMPLE.replacen("\"producers\"", "\"bogus\": 1, \"producers\"", 1);
        assert!(matches!(ScenarioFile::parse(&text), Err(ScenarioError::Json(_))));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let text = TWO_NODE_EXAMPLE.replacen("\"schema\": 1", "\"schema\": 2", 1);
        assert!(matches!(ScenarioFile::parse(&text), Err(ScenarioError::Schema(2))));
    }

    #[test]
    fn round_trip_preserves_market() {
        let m = two_node_example();
        let again = ScenarioFile::parse(&ScenarioFile::from_market(&m).to_json())
            .unwrap()
            .to_market()
            .unwrap();
        assert_eq!(m, again);
    }
}
