//! Commands behind the `spotmarket` binary: comparison tables across
//! solution modes, marginal-curve dumps and scenario checks.

use spotmarket_core::equilibrium::{
    declared_cost_market_power, solve, solve_equilibrium, EquilibriumKind, OptimalRule, SolveError, SolverConfig,
};
use spotmarket_core::market::{adjusted_cost, marginal_damage, validate, MarketScenario, UnitId};
use spotmarket_core::modes::{ModeOutcome, ModeRegistry};
use spotmarket_core::network::NetworkError;
use spotmarket_core::piecewise::{merit_merge, PiecewiseCurve, Shape};
use spotmarket_core::pricecap::Quantity;
use spotmarket_core::scenario::{ScenarioError, ScenarioFile};
use std::fmt::Write;
use std::path::Path;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const NOT_CONVERGED: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Mode(#[from] spotmarket_core::modes::ModeError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Solve(e) => solve_exit_code(e),
            _ => exit::VALIDATION,
        }
    }
}

fn solve_exit_code(e: &SolveError) -> i32 {
    match e {
        SolveError::Network(NetworkError::Infeasible { .. }) => exit::INFEASIBLE,
        SolveError::Invalid(_) => exit::VALIDATION,
        _ => exit::NOT_CONVERGED,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
}

/// `%g`-style formatting with `digits` significant digits.
pub fn significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    if magnitude < -5 || magnitude >= digits as i32 {
        return format!("{:.*e}", digits.saturating_sub(1), x);
    }
    let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub struct Column {
    pub label: String,
    pub outcome: Result<ModeOutcome, SolveError>,
}

/// One column per mode; unit outputs first, then summary rows.
pub struct ComparisonTable {
    pub units: Vec<UnitId>,
    pub nodes: usize,
    pub producers: usize,
    pub channels: usize,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Value(f64),
    Unbounded,
    Empty,
}

impl ComparisonTable {
    pub fn build(scenario: &MarketScenario, modes: &str, config: &SolverConfig) -> Result<Self, CliError> {
        let registry = ModeRegistry::builtin();
        let modes = registry.create_all(modes, scenario)?;
        if modes.is_empty() {
            return Err(CliError::Usage("no modes selected".into()));
        }
        let columns = modes
            .iter()
            .map(|m| Column {
                label: m.label(),
                outcome: m.solve(scenario, config),
            })
            .collect();
        Ok(Self {
            units: scenario.units.iter().map(|u| u.id).collect(),
            nodes: scenario.node_count(),
            producers: scenario.producer_count,
            channels: scenario.channel_count(),
            columns,
        })
    }

    /// Worst exit code among the columns.
    pub fn exit_code(&self) -> i32 {
        self.columns
            .iter()
            .filter_map(|c| c.outcome.as_ref().err())
            .map(solve_exit_code)
            .max()
            .unwrap_or(exit::OK)
    }

    fn rows(&self) -> Vec<(String, Vec<Cell>)> {
        let mut rows: Vec<(String, Vec<Cell>)> = Vec::new();
        let mut add = |label: String, f: &dyn Fn(&ModeOutcome) -> Cell| {
            let cells = self
                .columns
                .iter()
                .map(|c| match &c.outcome {
                    Ok(o) => f(o),
                    Err(_) => Cell::Empty,
                })
                .collect();
            rows.push((label, cells));
        };
        for (k, id) in self.units.iter().enumerate() {
            add(format!("q{id}"), &|o| Cell::Value(o.report.profile.quantity(k)));
        }
        add("welfare".into(), &|o| Cell::Value(o.report.welfare));
        for n in 0..self.nodes {
            add(format!("price {}", n + 1), &|o| Cell::Value(o.report.prices[n]));
        }
        for i in 0..self.producers {
            add(format!("profit {}", i + 1), &|o| Cell::Value(o.report.profits[i]));
        }
        for i in 0..self.producers {
            add(format!("payment {}", i + 1), &|o| match &o.incentives {
                Some(s) => Cell::Value(s.payments[i].payment),
                None => Cell::Empty,
            });
        }
        add("iso budget".into(), &|o| match &o.incentives {
            Some(s) => Cell::Value(s.budget),
            None => Cell::Empty,
        });
        for n in 0..self.nodes {
            for c in 0..self.channels {
                let label = if self.channels == 1 {
                    format!("pollution {}", n + 1)
                } else {
                    format!("pollution {},{}", n + 1, c + 1)
                };
                add(label, &|o| Cell::Value(o.report.profile.node_pollution(n)[c]));
            }
        }
        add("congestion rent".into(), &|o| Cell::Value(o.report.congestion_rent));
        for n in 0..self.nodes {
            add(format!("load shed {}", n + 1), &|o| match &o.cap {
                Some(c) => match c.load_shed[n] {
                    Quantity::Finite(v) => Cell::Value(v),
                    Quantity::Unbounded => Cell::Unbounded,
                },
                None => Cell::Empty,
            });
        }
        add("residual".into(), &|o| Cell::Value(o.report.residual));
        rows
    }

    fn headers(&self) -> Vec<String> {
        self.columns
            .iter()
            .map(|c| match &c.outcome {
                Ok(_) => c.label.clone(),
                Err(e) if solve_exit_code(e) == exit::INFEASIBLE => format!("{} (infeasible)", c.label),
                Err(_) => format!("{} (not converged)", c.label),
            })
            .collect()
    }

    pub fn render(&self, format: Format) -> String {
        let render_cell = |cell: &Cell| match (cell, format) {
            (Cell::Value(v), Format::Text) => significant(*v + 0.0, 6),
            (Cell::Value(v), Format::Csv) => (*v + 0.0).to_string(),
            (Cell::Unbounded, _) => "unbounded".into(),
            (Cell::Empty, Format::Text) => "-".into(),
            (Cell::Empty, Format::Csv) => String::new(),
        };
        let headers = self.headers();
        let rows: Vec<(String, Vec<String>)> = self
            .rows()
            .into_iter()
            .map(|(label, cells)| (label, cells.iter().map(render_cell).collect()))
            .collect();
        let mut out = String::new();
        match format {
            Format::Csv => {
                let header = std::iter::once("row".to_string()).chain(headers);
                let body = rows.into_iter().map(|(label, cells)| std::iter::once(label).chain(cells));
                out = csv_text(std::iter::once(header.collect()).chain(body.map(Iterator::collect)));
            }
            Format::Text => {
                let first = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(4);
                let widths: Vec<usize> = (0..headers.len())
                    .map(|c| {
                        rows.iter()
                            .map(|(_, cells)| cells[c].len())
                            .chain([headers[c].len()])
                            .max()
                            .unwrap_or(0)
                    })
                    .collect();
                let _ = write!(out, "{:first$}", "");
                for (h, w) in headers.iter().zip(&widths) {
                    let _ = write!(out, "  {h:>w$}");
                }
                out.push('\n');
                for (label, cells) in &rows {
                    let _ = write!(out, "{label:first$}");
                    for (c, w) in cells.iter().zip(&widths) {
                        let _ = write!(out, "  {c:>w$}");
                    }
                    out.push('\n');
                }
                for c in &self.columns {
                    if let Err(e) = &c.outcome {
                        let _ = writeln!(out, "{}: {e}", c.label);
                    }
                }
            }
        }
        out
    }
}

fn csv_text(records: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn load(path: &Path) -> Result<(MarketScenario, SolverConfig), CliError> {
    let file = ScenarioFile::read(path)?;
    Ok((file.to_validated_market()?, file.solver_config()?))
}

/// Default modes: the three standard concepts and the mechanism, plus the
/// scenario's caps when it defines any.
pub fn default_modes(scenario: &MarketScenario) -> String {
    let mut modes = String::from("optimal,competitive,oligopolistic");
    if scenario.price_caps.is_some() {
        modes.push_str(",cap");
    }
    modes.push_str(",mechanism");
    modes
}

/// Builds and renders the comparison table; returns the text and exit code.
pub fn run(path: &Path, modes: Option<&str>, format: Format) -> Result<(String, i32), CliError> {
    let (scenario, config) = load(path)?;
    let modes = modes.map(str::to_string).unwrap_or_else(|| default_modes(&scenario));
    let table = ComparisonTable::build(&scenario, &modes, &config)?;
    Ok((table.render(format), table.exit_code()))
}

/// CSV of marginal curves for a node, or one producer at a node, sampled
/// every `step` from zero up to the capacity. Cells are empty where a curve
/// is unavailable (no cap, or market-power curves that cannot be merged).
pub fn emit_curves(path: &Path, node: usize, producer: Option<usize>, step: f64) -> Result<String, CliError> {
    let (scenario, config) = load(path)?;
    curves_csv(&scenario, &config, node, producer, step)
}

pub fn curves_csv(
    scenario: &MarketScenario,
    config: &SolverConfig,
    node: usize,
    producer: Option<usize>,
    step: f64,
) -> Result<String, CliError> {
    if node == 0 || node > scenario.node_count() {
        return Err(CliError::Usage(format!("node {node} does not exist")));
    }
    if producer.is_some_and(|i| i == 0 || i > scenario.producer_count) {
        return Err(CliError::Usage(format!("producer {} does not exist", producer.unwrap_or(0))));
    }
    if !(step > 0.0) {
        return Err(CliError::Usage("step must be positive".into()));
    }
    let n = node - 1;
    let producer = producer.map(|i| i - 1);
    let truth = adjusted_cost(scenario, n, producer, &[]).map_err(SolveError::from)?;
    let capacity = truth.total_capacity();
    let alloc = scenario.allocator().map_err(SolveError::from)?;

    let optimal = solve(&OptimalRule, scenario, config).ok();
    let reference = match &optimal {
        Some(r) => r.profile.node_totals().to_vec(),
        None => vec![0.0; scenario.node_count()],
    };
    let mu = match &optimal {
        Some(r) => marginal_damage(scenario, &r.profile, n).map_err(SolveError::from)?,
        None => vec![0.0; scenario.channel_count()],
    };
    let mechanism = adjusted_cost(scenario, n, producer, &mu).map_err(SolveError::from)?;

    let market_power: Option<PiecewiseCurve> = match solve_equilibrium(EquilibriumKind::Oligopolistic, scenario, config) {
        Err(_) => None,
        Ok(olig) => match producer {
            Some(i) => Some(declared_cost_market_power(scenario, &olig, i, n)?),
            None => {
                let mut parts = Vec::new();
                for i in 0..scenario.producer_count {
                    if !scenario.units_at(n, Some(i)).is_empty() {
                        parts.push((declared_cost_market_power(scenario, &olig, i, n)?, scenario.capacity(n, i)));
                    }
                }
                if parts.iter().all(|(c, _)| c.shape() == Shape::Convex) {
                    merit_merge(&parts).ok().map(|s| s.aggregate().clone())
                } else {
                    None
                }
            }
        },
    };
    let cap = scenario.price_caps.as_ref().map(|c| c[n]);

    let header = [
        "q",
        "marginal_true_cost",
        "marginal_declared_market_power",
        "marginal_declared_mechanism",
        "marginal_utility",
        "price_cap",
    ];
    let mut records = vec![header.map(String::from).to_vec()];
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let count = (capacity / step + 1e-9).floor() as usize;
    for k in 0..=count {
        let q = (k as f64 * step).min(capacity);
        let declared = match &market_power {
            Some(c) => Some(c.right_derivative(q).map_err(SolveError::from)?),
            None => None,
        };
        let mut at = reference.clone();
        at[n] = q;
        let row = [
            Some(q),
            Some(truth.aggregate().right_derivative(q).map_err(SolveError::from)?),
            declared,
            Some(mechanism.aggregate().right_derivative(q).map_err(SolveError::from)?),
            Some(alloc.price(&at, n).map_err(SolveError::from)?),
            cap,
        ];
        records.push(row.map(cell).to_vec());
    }
    Ok(csv_text(records))
}

/// Validates a scenario and probes the properties the solvers rely on.
pub fn verify(path: &Path) -> Result<(String, i32), CliError> {
    let file = ScenarioFile::read(path)?;
    let scenario = file.to_market()?;
    let mut out = String::new();
    let mut failed = false;
    let report = validate(&scenario);
    if report.is_ok() {
        out.push_str("ok: curve shapes, domains and limits\n");
    } else {
        failed = true;
        for issue in &report.issues {
            let _ = writeln!(out, "fail: {}: {}", issue.location, issue.message);
        }
    }
    if !failed {
        for n in 0..scenario.node_count() {
            match adjusted_cost(&scenario, n, None, &[]) {
                Ok(_) => {}
                Err(e) => {
                    failed = true;
                    let _ = writeln!(out, "fail: merged cost at node {}: {e}", n + 1);
                }
            }
        }
        match scenario.allocator() {
            Err(e) => {
                failed = true;
                let _ = writeln!(out, "fail: network: {e}");
            }
            Ok(alloc) => {
                // Own-price responses must not increase along each node's injection.
                let caps: Vec<f64> = (0..scenario.node_count())
                    .map(|n| adjusted_cost(&scenario, n, None, &[]).map_or(0.0, |s| s.total_capacity()))
                    .collect();
                let mut worst: Option<String> = None;
                'probe: for k in 0..=8 {
                    let q: Vec<f64> = caps.iter().map(|c| c * k as f64 / 8.0).collect();
                    for n in 0..q.len() {
                        let mut next = q.clone();
                        next[n] += (caps[n] / 8.0).max(1e-3);
                        match (alloc.price(&q, n), alloc.price(&next, n)) {
                            (Ok(a), Ok(b)) if b > a + 1e-9 => {
                                worst = Some(format!("price at node {} rises from {a} to {b}", n + 1));
                                break 'probe;
                            }
                            (Err(e), _) | (_, Err(e)) => {
                                worst = Some(e.to_string());
                                break 'probe;
                            }
                            _ => {}
                        }
                    }
                }
                match worst {
                    None => out.push_str("ok: allocation feasible and prices non-increasing on probe points\n"),
                    Some(msg) => {
                        failed = true;
                        let _ = writeln!(out, "fail: {msg}");
                    }
                }
            }
        }
    }
    if file.multi_interval.is_some() {
        match file.multi_interval() {
            Ok(_) => out.push_str("ok: multi-interval block\n"),
            Err(e) => {
                failed = true;
                let _ = writeln!(out, "fail: multi-interval block: {e}");
            }
        }
    }
    Ok((out, if failed { exit::VALIDATION } else { exit::OK }))
}
