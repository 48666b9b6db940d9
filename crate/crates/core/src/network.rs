//! Transmission network and the ISO's welfare-maximising demand allocation.
//!
//! For a vector of nodal injections the ISO splits total supply across
//! nodal demands so as to maximise the sum of concave nodal utilities
//! subject to energy balance, line limits expressed through a PTDF matrix,
//! nonnegative demand and optional extra linear constraints. The optimal
//! value as a function of injections is the network utility; its right
//! derivatives are the nodal prices.
//!
//! The allocation problem is a separable concave quadratic program. Every
//! combination of utility pieces and active constraint set whose KKT system
//! is nonsingular is factored once up front; demand and multipliers are then
//! affine in the injections on each such branch, which makes utility values,
//! prices and price slopes exact.

use crate::piecewise::{CurveError, PiecewiseCurve, Shape};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the number of KKT branches enumerated for one network.
const MAX_BRANCHES: usize = 500_000;
const PIVOT_TOL: f64 = 1e-11;
const SLOPE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("expected {expected} nodal values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("utility curve at node {node} is not concave: {source}")]
    NonConcaveUtility { node: usize, source: CurveError },
    #[error("no demand vector is feasible for the injections; violated: {violated:?}")]
    Infeasible { violated: Vec<Limit> },
    #[error("network too large for exact allocation ({0} branches)")]
    TooLarge(usize),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    /// Flow on the line per unit of net injection at each node.
    pub ptdf: Vec<f64>,
    pub capacity: f64,
}

/// Extra ISO constraint `injection . q + demand . d <= bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoConstraint {
    pub injection: Vec<f64>,
    pub demand: Vec<f64>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub node_count: usize,
    pub lines: Vec<Line>,
    pub constraints: Vec<IsoConstraint>,
}

impl Grid {
    /// Uncongested grid without lines.
    pub fn copper_plate(node_count: usize) -> Self {
        Self {
            node_count,
            lines: Vec::new(),
            constraints: Vec::new(),
        }
    }

    pub fn flows(&self, q: &[f64], d: &[f64]) -> Vec<f64> {
        self.lines
            .iter()
            .map(|l| l.ptdf.iter().zip(q.iter().zip(d)).map(|(h, (a, b))| h * (a - b)).sum())
            .collect()
    }
}

/// Constraint of the allocation problem, used to report binding sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Limit {
    Balance,
    /// Flow reached `+capacity` on line `l`.
    LineForward(usize),
    /// Flow reached `-capacity` on line `l`.
    LineBackward(usize),
    Iso(usize),
    /// Demand at node `n` is zero.
    DemandFloor(usize),
    /// Demand at node `n` reached the end of its utility domain.
    DemandCeiling(usize),
    /// Boundary between two utility pieces; never reported as binding.
    PieceBoundary(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandAllocation {
    pub demand: Vec<f64>,
    pub flows: Vec<f64>,
    pub utility: f64,
    pub binding: Vec<Limit>,
}

/// Which side of a point along a ray a local description refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Right,
    Left,
}

/// Exact local description of all nodal prices along `base + t * e_node`
/// on the open interval `(from, to)`.
///
/// `price[m] + slope[m] * (t - at)` is the price at node `m`; `slope[m]` is
/// the derivative of that price with respect to the injection at `node`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPiece {
    pub from: f64,
    pub to: f64,
    pub at: f64,
    pub price: Vec<f64>,
    pub slope: Vec<f64>,
}

impl RayPiece {
    pub fn price_at(&self, m: usize, t: f64) -> f64 {
        self.price[m] + self.slope[m] * (t - self.at)
    }
}

#[derive(Debug, Clone)]
struct Row {
    demand: Vec<f64>,
    rhs: f64,
    rhs_q: Vec<f64>,
    limit: Limit,
    /// Drop in marginal utility across a piece boundary; bounds the
    /// boundary row's multiplier.
    jump: Option<f64>,
}

/// Affine condition `constant + gradient . q >= 0` that keeps a branch valid.
#[derive(Debug, Clone)]
struct Condition {
    constant: f64,
    gradient: Vec<f64>,
    /// Row whose slack this is, `None` for multiplier signs.
    slack_of: Option<usize>,
}

impl Condition {
    fn value(&self, q: &[f64]) -> f64 {
        self.constant + dot(&self.gradient, q)
    }
}

#[derive(Debug, Clone)]
struct Branch {
    assignment: usize,
    active: Vec<usize>,
    d0: Vec<f64>,
    dq: Vec<Vec<f64>>,
    p0: Vec<f64>,
    pq: Vec<Vec<f64>>,
    conditions: Vec<Condition>,
}

impl Branch {
    fn demand(&self, q: &[f64]) -> Vec<f64> {
        self.d0.iter().zip(&self.dq).map(|(a, row)| a + dot(row, q)).collect()
    }

    fn price(&self, m: usize, q: &[f64]) -> f64 {
        self.p0[m] + dot(&self.pq[m], q)
    }

    /// Lexicographic violation of the branch at `q` along `directions`.
    /// Entry 0 is the worst primal/dual infeasibility at `q`, entry `k` the
    /// worst first-order violation along direction `k` among conditions that
    /// are tight up to that order.
    fn violation(&self, q: &[f64], directions: &[Vec<f64>], tol: f64) -> Vec<f64> {
        let mut worst = vec![0.0; directions.len() + 1];
        for c in &self.conditions {
            let v = c.value(q);
            if v < -tol {
                worst[0] = f64::max(worst[0], -v);
                continue;
            }
            if v > tol {
                continue;
            }
            for (k, dir) in directions.iter().enumerate() {
                let g = dot(&c.gradient, dir);
                if g < -SLOPE_TOL {
                    worst[k + 1] = f64::max(worst[k + 1], -g);
                    break;
                }
                if g > SLOPE_TOL {
                    break;
                }
            }
        }
        worst
    }
}

/// Precomputed allocation problem for a fixed grid and utility set.
#[derive(Debug, Clone)]
pub struct Allocator {
    grid: Grid,
    utilities: Vec<PiecewiseCurve>,
    assignments: Vec<(Vec<usize>, Vec<Row>)>,
    branches: Vec<Branch>,
}

impl Allocator {
    pub fn new(grid: &Grid, utilities: &[PiecewiseCurve]) -> Result<Self, NetworkError> {
        let n = grid.node_count;
        if utilities.len() != n {
            return Err(NetworkError::Dimension {
                expected: n,
                got: utilities.len(),
            });
        }
        for (node, u) in utilities.iter().enumerate() {
            u.check_shape(Shape::Concave)
                .map_err(|source| NetworkError::NonConcaveUtility { node, source })?;
        }
        for l in &grid.lines {
            if l.ptdf.len() != n {
                return Err(NetworkError::Dimension {
                    expected: n,
                    got: l.ptdf.len(),
                });
            }
        }
        for c in &grid.constraints {
            if c.injection.len() != n || c.demand.len() != n {
                return Err(NetworkError::Dimension {
                    expected: n,
                    got: c.injection.len().min(c.demand.len()),
                });
            }
        }

        let shared = shared_rows(grid);
        let piece_counts: Vec<usize> = utilities.iter().map(|u| u.pieces().len()).collect();
        let mut assignments = Vec::new();
        let mut pieces = vec![0usize; n];
        loop {
            let mut rows = shared.clone();
            for (m, &k) in pieces.iter().enumerate() {
                let u = &utilities[m];
                let lo = u.pieces()[k].start;
                let mut demand = vec![0.0; n];
                demand[m] = -1.0;
                let (floor, jump) = if k == 0 {
                    (Limit::DemandFloor(m), None)
                } else {
                    (Limit::PieceBoundary(m), Some(kink_drop(u, k)))
                };
                rows.push(Row {
                    demand: demand.clone(),
                    rhs: -lo,
                    rhs_q: vec![0.0; n],
                    limit: floor,
                    jump,
                });
                let hi = u.piece_end(k);
                if hi.is_finite() {
                    demand[m] = 1.0;
                    let (ceiling, jump) = if k + 1 == u.pieces().len() {
                        (Limit::DemandCeiling(m), None)
                    } else {
                        (Limit::PieceBoundary(m), Some(kink_drop(u, k + 1)))
                    };
                    rows.push(Row {
                        demand,
                        rhs: hi,
                        rhs_q: vec![0.0; n],
                        limit: ceiling,
                        jump,
                    });
                }
            }
            assignments.push((pieces.clone(), rows));
            if !advance(&mut pieces, &piece_counts) {
                break;
            }
        }

        let mut estimate = 0usize;
        for (_, rows) in &assignments {
            let m = rows.len() - 1;
            estimate = estimate.saturating_add((0..n).map(|k| binomial(m, k)).fold(0usize, |a, b| a.saturating_add(b)));
        }
        if estimate > MAX_BRANCHES {
            return Err(NetworkError::TooLarge(estimate));
        }

        let mut branches = Vec::new();
        for (index, (pieces, rows)) in assignments.iter().enumerate() {
            let inequalities: Vec<usize> = (1..rows.len()).collect();
            for size in 0..n {
                for subset in combinations(&inequalities, size) {
                    let mut active = vec![0usize];
                    active.extend(subset);
                    if let Some(b) = factor_branch(index, pieces, rows, &active, utilities, n) {
                        branches.push(b);
                    }
                }
            }
        }
        Ok(Self {
            grid: grid.clone(),
            utilities: utilities.to_vec(),
            assignments,
            branches,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn utilities(&self) -> &[PiecewiseCurve] {
        &self.utilities
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count
    }

    fn check(&self, q: &[f64]) -> Result<(), NetworkError> {
        if q.len() != self.grid.node_count {
            return Err(NetworkError::Dimension {
                expected: self.grid.node_count,
                got: q.len(),
            });
        }
        Ok(())
    }

    fn tolerance(q: &[f64]) -> f64 {
        1e-9 * (1.0 + q.iter().fold(0.0f64, |a, b| a.max(b.abs())))
    }

    /// Best branch at `q` along `directions`, preferring valid branches.
    /// Without directions, ties between valid branches go to the
    /// lexicographically smallest demand vector.
    fn select(&self, q: &[f64], directions: &[Vec<f64>]) -> Result<&Branch, NetworkError> {
        let tol = Self::tolerance(q);
        let mut best: Option<(&Branch, Vec<f64>, Vec<f64>)> = None;
        for b in &self.branches {
            let v = b.violation(q, directions, tol);
            let valid = v[0] <= tol && v[1..].iter().all(|&x| x <= SLOPE_TOL);
            let d = if directions.is_empty() && valid { b.demand(q) } else { Vec::new() };
            let better = match &best {
                None => true,
                Some((_, bv, bd)) => {
                    let best_valid = bv[0] <= tol && bv[1..].iter().all(|&x| x <= SLOPE_TOL);
                    match (valid, best_valid) {
                        (true, false) => true,
                        (false, true) => false,
                        (false, false) => lex_less(&v, bv, 0.0),
                        (true, true) => directions.is_empty() && lex_less(&d, bd, tol),
                    }
                }
            };
            if better {
                best = Some((b, v, d));
            }
        }
        let (branch, violation, _) = best.expect("at least one branch exists");
        if violation[0] > 1e-6 * (1.0 + q.iter().fold(0.0f64, |a, b| a.max(b.abs()))) {
            let rows = &self.assignments[branch.assignment].1;
            let violated = branch
                .conditions
                .iter()
                .filter(|c| c.value(q) < -tol)
                .filter_map(|c| c.slack_of.map(|r| rows[r].limit))
                .filter(|l| !matches!(l, Limit::PieceBoundary(_)))
                .collect();
            return Err(NetworkError::Infeasible { violated });
        }
        Ok(branch)
    }

    pub fn allocate(&self, q: &[f64]) -> Result<DemandAllocation, NetworkError> {
        self.check(q)?;
        let branch = self.select(q, &[])?;
        let demand: Vec<f64> = branch.demand(q).into_iter().map(|d| d.max(0.0)).collect();
        let mut utility = 0.0;
        for (u, &d) in self.utilities.iter().zip(&demand) {
            utility += u.eval(d)?;
        }
        let rows = &self.assignments[branch.assignment].1;
        let tol = Self::tolerance(q);
        let mut binding: Vec<Limit> = branch
            .conditions
            .iter()
            .filter_map(|c| c.slack_of.filter(|_| c.value(q).abs() <= tol))
            .chain(branch.active.iter().copied())
            .map(|r| rows[r].limit)
            .filter(|l| !matches!(l, Limit::PieceBoundary(_) | Limit::Balance))
            .collect();
        binding.sort_by_key(|l| format!("{l:?}"));
        binding.dedup();
        let flows = self.grid.flows(q, &demand);
        Ok(DemandAllocation {
            demand,
            flows,
            utility,
            binding,
        })
    }

    pub fn utility(&self, q: &[f64]) -> Result<f64, NetworkError> {
        Ok(self.allocate(q)?.utility)
    }

    /// Right derivative of the network utility with respect to the injection at `node`.
    pub fn price(&self, q: &[f64], node: usize) -> Result<f64, NetworkError> {
        self.check(q)?;
        let branch = self.select(q, &[unit(self.node_count(), node, 1.0)])?;
        Ok(branch.price(node, q))
    }

    pub fn prices(&self, q: &[f64]) -> Result<Vec<f64>, NetworkError> {
        (0..self.node_count()).map(|n| self.price(q, n)).collect()
    }

    /// `jacobian[m][n]` is the right derivative of the price at `m` with
    /// respect to the injection at `n`.
    pub fn jacobian(&self, q: &[f64]) -> Result<Vec<Vec<f64>>, NetworkError> {
        self.check(q)?;
        let n = self.node_count();
        let mut jac = vec![vec![0.0; n]; n];
        for col in 0..n {
            for (m, row) in jac.iter_mut().enumerate() {
                let branch = self.select(q, &[unit(n, col, 1.0), unit(n, m, 1.0)])?;
                row[col] = branch.pq[m][col];
            }
        }
        Ok(jac)
    }

    /// Local price description on the side of `base + t * e_node` given by `side`.
    pub fn ray(&self, base: &[f64], node: usize, t: f64, side: Side) -> Result<RayPiece, NetworkError> {
        self.check(base)?;
        let n = self.node_count();
        let mut q = base.to_vec();
        q[node] += t;
        let sign = if side == Side::Right { 1.0 } else { -1.0 };
        let dir = unit(n, node, sign);
        let tol = Self::tolerance(&q);
        let mut price = vec![0.0; n];
        let mut slope = vec![0.0; n];
        let mut reach = f64::INFINITY;
        for m in 0..n {
            let branch = self.select(&q, &[dir.clone(), unit(n, m, 1.0)])?;
            price[m] = branch.price(m, &q);
            slope[m] = branch.pq[m][node];
            for c in &branch.conditions {
                let g = sign * c.gradient[node];
                if g < -SLOPE_TOL {
                    let v = c.value(&q).max(0.0);
                    if v > tol {
                        reach = reach.min(v / -g);
                    }
                }
            }
        }
        let (from, to) = match side {
            Side::Right => (t, t + reach),
            Side::Left => (t - reach, t),
        };
        Ok(RayPiece {
            from,
            to,
            at: t,
            price,
            slope,
        })
    }
}

/// Left minus right marginal utility where piece `k` starts.
fn kink_drop(u: &PiecewiseCurve, k: usize) -> f64 {
    let prev = u.pieces()[k - 1];
    let next = u.pieces()[k];
    (prev.slope + prev.slope_rate * (next.start - prev.start) - next.slope).max(0.0)
}

fn shared_rows(grid: &Grid) -> Vec<Row> {
    let n = grid.node_count;
    let mut rows = vec![Row {
        demand: vec![1.0; n],
        rhs: 0.0,
        rhs_q: vec![1.0; n],
        limit: Limit::Balance,
        jump: None,
    }];
    for (l, line) in grid.lines.iter().enumerate() {
        // flow = H (q - d) <= f  <=>  -H d <= f - H q
        rows.push(Row {
            demand: line.ptdf.iter().map(|h| -h).collect(),
            rhs: line.capacity,
            rhs_q: line.ptdf.iter().map(|h| -h).collect(),
            limit: Limit::LineForward(l),
            jump: None,
        });
        rows.push(Row {
            demand: line.ptdf.clone(),
            rhs: line.capacity,
            rhs_q: line.ptdf.clone(),
            limit: Limit::LineBackward(l),
            jump: None,
        });
    }
    for (k, c) in grid.constraints.iter().enumerate() {
        rows.push(Row {
            demand: c.demand.clone(),
            rhs: c.bound,
            rhs_q: c.injection.iter().map(|a| -a).collect(),
            limit: Limit::Iso(k),
            jump: None,
        });
    }
    rows
}

/// Solves the KKT system of one branch for the affine maps of demand and
/// multipliers in the injections. Returns `None` when singular.
fn factor_branch(
    assignment: usize,
    pieces: &[usize],
    rows: &[Row],
    active: &[usize],
    utilities: &[PiecewiseCurve],
    n: usize,
) -> Option<Branch> {
    let a = active.len();
    let size = n + a;
    let mut mat = vec![vec![0.0; size]; size];
    // Right-hand sides: column 0 is the constant part, column k+1 the
    // coefficient of q_k.
    let mut rhs = vec![vec![0.0; n + 1]; size];
    for m in 0..n {
        let p = utilities[m].pieces()[pieces[m]];
        mat[m][m] = -p.slope_rate;
        rhs[m][0] = p.slope - p.slope_rate * p.start;
    }
    for (i, &r) in active.iter().enumerate() {
        for m in 0..n {
            mat[m][n + i] = rows[r].demand[m];
            mat[n + i][m] = rows[r].demand[m];
        }
        rhs[n + i][0] = rows[r].rhs;
        for k in 0..n {
            rhs[n + i][k + 1] = rows[r].rhs_q[k];
        }
    }
    let sol = solve_dense(mat, rhs)?;
    let d0: Vec<f64> = (0..n).map(|m| sol[m][0]).collect();
    let dq: Vec<Vec<f64>> = (0..n).map(|m| sol[m][1..].to_vec()).collect();
    let lam0: Vec<f64> = (0..a).map(|i| sol[n + i][0]).collect();
    let lamq: Vec<Vec<f64>> = (0..a).map(|i| sol[n + i][1..].to_vec()).collect();

    let mut conditions = Vec::new();
    for (r, row) in rows.iter().enumerate().skip(1) {
        if let Some(i) = active.iter().position(|&x| x == r) {
            conditions.push(Condition {
                constant: lam0[i],
                gradient: lamq[i].clone(),
                slack_of: None,
            });
            if let Some(jump) = row.jump {
                let gradient = lamq[i].iter().map(|g| -g).collect();
                conditions.push(Condition {
                    constant: jump - lam0[i],
                    gradient,
                    slack_of: None,
                });
            }
        } else {
            let constant = row.rhs - dot(&row.demand, &d0);
            let gradient = (0..n)
                .map(|k| row.rhs_q[k] - (0..n).map(|m| row.demand[m] * dq[m][k]).sum::<f64>())
                .collect();
            conditions.push(Condition {
                constant,
                gradient,
                slack_of: Some(r),
            });
        }
    }
    // Price at m is sum over active rows of rhs_q[m] * multiplier.
    let mut p0 = vec![0.0; n];
    let mut pq = vec![vec![0.0; n]; n];
    for (i, &r) in active.iter().enumerate() {
        for m in 0..n {
            let w = rows[r].rhs_q[m];
            if w != 0.0 {
                p0[m] += w * lam0[i];
                for k in 0..n {
                    pq[m][k] += w * lamq[i][k];
                }
            }
        }
    }
    Some(Branch {
        assignment,
        active: active.to_vec(),
        d0,
        dq,
        p0,
        pq,
        conditions,
    })
}

/// Solves `a x = b` for several right-hand sides at once; `None` when `a`
/// is numerically singular.
fn solve_dense(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let width = b.first().map_or(0, |r| r.len());
    let m = DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let scale = m.amax().max(1.0);
    let lu = m.lu();
    if lu.u().diagonal().iter().any(|p| p.abs() <= PIVOT_TOL * scale) {
        return None;
    }
    let x = lu.solve(&DMatrix::from_fn(n, width, |i, j| b[i][j]))?;
    Some(x.row_iter().map(|r| r.iter().copied().collect()).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(n: usize, k: usize, sign: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = sign;
    v
}

fn lex_less(a: &[f64], b: &[f64], tol: f64) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < &(y - tol) {
            return true;
        }
        if x > &(y + tol) {
            return false;
        }
    }
    false
}

fn advance(digits: &mut [usize], bases: &[usize]) -> bool {
    for (d, &b) in digits.iter_mut().zip(bases).rev() {
        *d += 1;
        if *d < b {
            return true;
        }
        *d = 0;
    }
    false
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(items: &[usize], k: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..items.len() {
            current.push(items[i]);
            rec(items, k, i + 1, current, out);
            current.pop();
        }
    }
    rec(items, k, 0, &mut current, &mut out);
    out
}

/// One-shot allocation; builds an [`Allocator`] internally.
pub fn allocate_demand(grid: &Grid, utilities: &[PiecewiseCurve], q: &[f64]) -> Result<DemandAllocation, NetworkError> {
    Allocator::new(grid, utilities)?.allocate(q)
}

pub fn utility_value(grid: &Grid, utilities: &[PiecewiseCurve], q: &[f64]) -> Result<f64, NetworkError> {
    Allocator::new(grid, utilities)?.utility(q)
}

pub fn nodal_price(grid: &Grid, utilities: &[PiecewiseCurve], q: &[f64], node: usize) -> Result<f64, NetworkError> {
    Allocator::new(grid, utilities)?.price(q, node)
}

pub fn price_jacobian(grid: &Grid, utilities: &[PiecewiseCurve], q: &[f64]) -> Result<Vec<Vec<f64>>, NetworkError> {
    Allocator::new(grid, utilities)?.jacobian(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node() -> Allocator {
        let grid = Grid {
            node_count: 2,
            lines: vec![Line {
                ptdf: vec![1.0, 0.0],
                capacity: 5.0,
            }],
            constraints: vec![],
        };
        let u = vec![
            PiecewiseCurve::saturating_quadratic(1.0, 44.0, 22.0).unwrap(),
            PiecewiseCurve::linear(6.0, None).unwrap(),
        ];
        Allocator::new(&grid, &u).unwrap()
    }

    #[test]
    fn congested_allocation() {
        let a = two_node();
        let r = a.allocate(&[25.0, 15.0]).unwrap();
        assert!((r.demand[0] - 20.0).abs() < 1e-12 && (r.demand[1] - 20.0).abs() < 1e-12);
        assert!((r.utility - 600.0).abs() < 1e-9);
        assert!(r.binding.contains(&Limit::LineForward(0)));
        let p = a.prices(&[25.0, 15.0]).unwrap();
        assert!((p[0] - 4.0).abs() < 1e-12 && (p[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn flat_utility_ties_take_smallest_demand() {
        let grid = Grid::copper_plate(2);
        let u = vec![
            PiecewiseCurve::linear(3.0, None).unwrap(),
            PiecewiseCurve::linear(3.0, None).unwrap(),
        ];
        let r = Allocator::new(&grid, &u).unwrap().allocate(&[2.0, 3.0]).unwrap();
        assert_eq!(r.demand, vec![0.0, 5.0]);
    }

    #[test]
    fn price_jump_uses_right_side() {
        let a = two_node();
        // Node 2 price drops from 8 to 6 once its injection passes 5 with q1 = 13.
        assert!((a.price(&[13.0, 5.0], 1).unwrap() - 6.0).abs() < 1e-12);
        let left = a.ray(&[13.0, 0.0], 1, 5.0, Side::Left).unwrap();
        assert!((left.price[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn ray_pieces_cover_breakpoints() {
        let a = two_node();
        let r = a.ray(&[0.0, 0.0], 0, 0.0, Side::Right).unwrap();
        assert!((r.to - 19.0).abs() < 1e-9);
        assert!((r.slope[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_injections_report_limits() {
        let grid = Grid {
            node_count: 2,
            lines: vec![Line {
                ptdf: vec![1.0, 0.0],
                capacity: 1.0,
            }],
            constraints: vec![],
        };
        let u = vec![
            PiecewiseCurve::from_marginals(
                0.0,
                &[crate::piecewise::MarginalSegment {
                    start: 0.0,
                    marginal: 1.0,
                    rate: 0.0,
                }],
                Some(10.0),
                Shape::Concave,
            )
            .unwrap(),
            PiecewiseCurve::from_marginals(
                0.0,
                &[crate::piecewise::MarginalSegment {
                    start: 0.0,
                    marginal: 1.0,
                    rate: 0.0,
                }],
                Some(1.0),
                Shape::Concave,
            )
            .unwrap(),
        ];
        let err = Allocator::new(&grid, &u).unwrap().allocate(&[0.0, 5.0]).unwrap_err();
        assert!(matches!(err, NetworkError::Infeasible { .. }));
    }
}
