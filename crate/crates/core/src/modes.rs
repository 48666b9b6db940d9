//! Named solution modes selectable at run time.
//!
//! A mode specification is a name optionally followed by `=` or `:` and an
//! argument, e.g. `optimal`, `cap=8` or `cap=8/6` for per-node caps.

use crate::equilibrium::{solve_equilibrium, EquilibriumKind, EquilibriumReport, SolveError, SolverConfig};
use crate::incentive::{solve_mechanism, IncentiveSchedule};
use crate::market::MarketScenario;
use crate::pricecap::{solve_capped, Quantity};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("unknown mode `{0}`")]
    Unknown(String),
    #[error("mode `{mode}`: {message}")]
    BadArgument { mode: String, message: String },
}

/// Cap-specific results.
#[derive(Debug, Clone, PartialEq)]
pub struct CapSummary {
    pub caps: Vec<f64>,
    pub binding: Vec<bool>,
    pub desired_demand: Vec<Quantity>,
    pub load_shed: Vec<Quantity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeOutcome {
    pub report: EquilibriumReport,
    pub cap: Option<CapSummary>,
    pub incentives: Option<IncentiveSchedule>,
}

impl From<EquilibriumReport> for ModeOutcome {
    fn from(report: EquilibriumReport) -> Self {
        Self {
            report,
            cap: None,
            incentives: None,
        }
    }
}

pub trait SolutionMode: Send + Sync {
    fn label(&self) -> String;
    fn solve(&self, scenario: &MarketScenario, config: &SolverConfig) -> Result<ModeOutcome, SolveError>;
}

struct Standard(EquilibriumKind);

impl SolutionMode for Standard {
    fn label(&self) -> String {
        self.0.to_string()
    }
    fn solve(&self, scenario: &MarketScenario, config: &SolverConfig) -> Result<ModeOutcome, SolveError> {
        Ok(solve_equilibrium(self.0, scenario, config)?.into())
    }
}

struct Capped(Vec<f64>);

impl SolutionMode for Capped {
    fn label(&self) -> String {
        let first = self.0[0];
        if self.0.iter().all(|&c| c == first) {
            format!("cap={first}")
        } else {
            format!("cap={}", self.0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("/"))
        }
    }
    fn solve(&self, scenario: &MarketScenario, config: &SolverConfig) -> Result<ModeOutcome, SolveError> {
        let r = solve_capped(scenario, &self.0, config)?;
        Ok(ModeOutcome {
            report: r.report,
            cap: Some(CapSummary {
                caps: r.caps,
                binding: r.binding,
                desired_demand: r.desired_demand,
                load_shed: r.load_shed,
            }),
            incentives: None,
        })
    }
}

struct Mechanism;

impl SolutionMode for Mechanism {
    fn label(&self) -> String {
        "mechanism".into()
    }
    fn solve(&self, scenario: &MarketScenario, config: &SolverConfig) -> Result<ModeOutcome, SolveError> {
        let (report, schedule) = solve_mechanism(scenario, None, config)?;
        Ok(ModeOutcome {
            report,
            cap: None,
            incentives: Some(schedule),
        })
    }
}

pub type ModeFactory = Box<dyn Fn(Option<&str>, &MarketScenario) -> Result<Box<dyn SolutionMode>, ModeError> + Send + Sync>;

pub struct ModeRegistry {
    factories: BTreeMap<String, ModeFactory>,
}

impl Default for ModeRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

fn no_argument(mode: &str, arg: Option<&str>) -> Result<(), ModeError> {
    match arg {
        None => Ok(()),
        Some(a) => Err(ModeError::BadArgument {
            mode: mode.into(),
            message: format!("takes no argument, got `{a}`"),
        }),
    }
}

fn parse_caps(arg: Option<&str>, scenario: &MarketScenario) -> Result<Vec<f64>, ModeError> {
    let bad = |message: String| ModeError::BadArgument {
        mode: "cap".into(),
        message,
    };
    let n = scenario.node_count();
    let caps = match arg {
        None => scenario
            .price_caps
            .clone()
            .ok_or_else(|| bad("no cap given and the scenario defines none".into()))?,
        Some(text) => {
            let values = text
                .split('/')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("`{v}` is not a number"))))
                .collect::<Result<Vec<_>, _>>()?;
            match values.len() {
                1 => vec![values[0]; n],
                k if k == n => values,
                k => return Err(bad(format!("{k} caps for {n} nodes"))),
            }
        }
    };
    if let Some(c) = caps.iter().find(|c| !(**c >= 0.0)) {
        return Err(bad(format!("invalid cap {c}")));
    }
    Ok(caps)
}

impl ModeRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding `optimal`, `competitive`, `oligopolistic`, `cap` and `mechanism`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for kind in [
            EquilibriumKind::Optimal,
            EquilibriumKind::Competitive,
            EquilibriumKind::Oligopolistic,
        ] {
            let name = kind.to_string();
            let mode = name.clone();
            r.register(
                &name,
                Box::new(move |arg, _| {
                    no_argument(&mode, arg)?;
                    Ok(Box::new(Standard(kind)))
                }),
            );
        }
        r.register("cap", Box::new(|arg, scenario| Ok(Box::new(Capped(parse_caps(arg, scenario)?)))));
        r.register(
            "mechanism",
            Box::new(|arg, _| {
                no_argument("mechanism", arg)?;
                Ok(Box::new(Mechanism))
            }),
        );
        r
    }

    pub fn register(&mut self, name: &str, factory: ModeFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &str, scenario: &MarketScenario) -> Result<Box<dyn SolutionMode>, ModeError> {
        let spec = spec.trim();
        let (name, arg) = match spec.find(['=', ':']) {
            Some(k) => (&spec[..k], Some(&spec[k + 1..])),
            None => (spec, None),
        };
        let factory = self.factories.get(name).ok_or_else(|| ModeError::Unknown(name.to_string()))?;
        factory(arg, scenario)
    }

    /// Parses a comma-separated list of mode specifications.
    pub fn create_all(&self, list: &str, scenario: &MarketScenario) -> Result<Vec<Box<dyn SolutionMode>>, ModeError> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| self.create(s, scenario))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::two_node_example;

    #[test]
    fn specs_resolve_to_modes() {
        let s = two_node_example();
        let r = ModeRegistry::builtin();
        let modes = r.create_all("optimal,cap=8,cap:3/4,mechanism", &s).unwrap();
        let labels: Vec<String> = modes.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["optimal", "cap=8", "cap=3/4", "mechanism"]);
        assert!(matches!(r.create("bogus", &s), Err(ModeError::Unknown(_))));
        assert!(r.create("cap=1/2/3", &s).is_err());
        assert!(r.create("optimal=2", &s).is_err());
        assert!(r.create("cap", &s).is_err());
    }
}
