//! Piecewise-quadratic curves on a half line and merit-order merging.
//!
//! A curve is a list of pieces, each a polynomial of degree at most two
//! anchored at its start point. Costs, pollution, damages and utilities
//! all use this representation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when comparing breakpoints and marginal levels.
pub const BREAKPOINT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("curve has no pieces")]
    Empty,
    #[error("first piece must start at 0, found {0}")]
    BadOrigin(f64),
    #[error("breakpoints must be strictly increasing (piece {index} starts at {start})")]
    UnorderedBreakpoints { index: usize, start: f64 },
    #[error("domain end {end} does not lie beyond the last breakpoint {last}")]
    BadDomainEnd { end: f64, last: f64 },
    #[error("non-finite coefficient in piece {0}")]
    NonFinite(usize),
    #[error("{x} lies outside the curve domain [0, {end}]")]
    OutOfDomain { x: f64, end: f64 },
    #[error("curve is not {expected:?}: marginal falls from {before} to {after} at {at}")]
    ShapeViolation { expected: Shape, at: f64, before: f64, after: f64 },
    #[error("component {index} has capacity {capacity} beyond its domain end {end}")]
    CapacityBeyondDomain { index: usize, capacity: f64, end: f64 },
    #[error("component {index} has invalid capacity {capacity}")]
    BadCapacity { index: usize, capacity: f64 },
}

/// Declared shape of a curve.
///
/// Costs, pollution and damages are convex, utilities concave. Curves derived
/// from equilibrium data (declared costs) may be neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Convex,
    Concave,
    Irregular,
}

/// One polynomial piece: `value + slope*(x-start) + 0.5*slope_rate*(x-start)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub start: f64,
    pub value: f64,
    pub slope: f64,
    pub slope_rate: f64,
}

impl Piece {
    fn eval(&self, x: f64) -> f64 {
        let h = x - self.start;
        self.value + h * (self.slope + 0.5 * self.slope_rate * h)
    }

    fn marginal(&self, x: f64) -> f64 {
        self.slope + self.slope_rate * (x - self.start)
    }
}

/// Marginal description of a piece used to build curves: the marginal at
/// `start` and its rate of change up to the next breakpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalSegment {
    pub start: f64,
    pub marginal: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseCurve {
    pieces: Vec<Piece>,
    end: Option<f64>,
    shape: Shape,
}

impl PiecewiseCurve {
    /// Builds a curve from raw pieces. Piece values are taken as given.
    pub fn from_pieces(pieces: Vec<Piece>, end: Option<f64>, shape: Shape) -> Result<Self, CurveError> {
        let first = pieces.first().ok_or(CurveError::Empty)?;
        if first.start != 0.0 {
            return Err(CurveError::BadOrigin(first.start));
        }
        for (index, p) in pieces.iter().enumerate() {
            if ![p.start, p.value, p.slope, p.slope_rate].iter().all(|v| v.is_finite()) {
                return Err(CurveError::NonFinite(index));
            }
            if index > 0 && p.start <= pieces[index - 1].start {
                return Err(CurveError::UnorderedBreakpoints { index, start: p.start });
            }
        }
        let last = pieces[pieces.len() - 1].start;
        if let Some(end) = end {
            if !(end > last) || !end.is_finite() {
                return Err(CurveError::BadDomainEnd { end, last });
            }
        }
        Ok(Self { pieces, end, shape })
    }

    /// Builds a continuous curve by integrating marginal segments from
    /// `value_at_zero`.
    pub fn from_marginals(value_at_zero: f64, segments: &[MarginalSegment], end: Option<f64>, shape: Shape) -> Result<Self, CurveError> {
        let mut pieces: Vec<Piece> = Vec::with_capacity(segments.len());
        for (index, s) in segments.iter().enumerate() {
            let value = match pieces.last() {
                None => value_at_zero,
                Some(prev) => {
                    if s.start <= prev.start {
                        return Err(CurveError::UnorderedBreakpoints { index, start: s.start });
                    }
                    prev.eval(s.start)
                }
            };
            pieces.push(Piece {
                start: s.start,
                value,
                slope: s.marginal,
                slope_rate: s.rate,
            });
        }
        Self::from_pieces(pieces, end, shape)
    }

    /// `slope * x` on `[0, end]`.
    pub fn linear(slope: f64, end: Option<f64>) -> Result<Self, CurveError> {
        Self::from_marginals(
            0.0,
            &[MarginalSegment {
                start: 0.0,
                marginal: slope,
                rate: 0.0,
            }],
            end,
            Shape::Convex,
        )
    }

    /// Curve whose marginal is `marginal + rate * x`. Shape follows the sign
    /// of `rate`.
    pub fn affine_marginal(marginal: f64, rate: f64, end: Option<f64>) -> Result<Self, CurveError> {
        let shape = if rate < 0.0 { Shape::Concave } else { Shape::Convex };
        Self::from_marginals(
            0.0,
            &[MarginalSegment {
                start: 0.0,
                marginal,
                rate,
            }],
            end,
            shape,
        )
    }

    /// Utility `-a*d^2 + b*d` up to `saturation`, constant afterwards, unbounded domain.
    pub fn saturating_quadratic(a: f64, b: f64, saturation: f64) -> Result<Self, CurveError> {
        Self::from_marginals(
            0.0,
            &[
                MarginalSegment {
                    start: 0.0,
                    marginal: b,
                    rate: -2.0 * a,
                },
                MarginalSegment {
                    start: saturation,
                    marginal: 0.0,
                    rate: 0.0,
                },
            ],
            None,
            Shape::Concave,
        )
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn domain_end(&self) -> Option<f64> {
        self.end
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.pieces.iter().map(|p| p.start)
    }

    /// Marginal segments, i.e. the inverse of [`PiecewiseCurve::from_marginals`].
    pub fn marginal_segments(&self) -> Vec<MarginalSegment> {
        self.pieces
            .iter()
            .map(|p| MarginalSegment {
                start: p.start,
                marginal: p.slope,
                rate: p.slope_rate,
            })
            .collect()
    }

    /// End of piece `k`: the next breakpoint, the domain end, or infinity.
    pub fn piece_end(&self, k: usize) -> f64 {
        self.pieces.get(k + 1).map(|p| p.start).or(self.end).unwrap_or(f64::INFINITY)
    }

    fn check_domain(&self, x: f64) -> Result<f64, CurveError> {
        let end = self.end.unwrap_or(f64::INFINITY);
        if x.is_nan() || x < -BREAKPOINT_TOL || x > end + BREAKPOINT_TOL {
            return Err(CurveError::OutOfDomain { x, end });
        }
        Ok(x.clamp(0.0, end))
    }

    /// Index of the piece governing `x` from the right.
    fn piece_index(&self, x: f64) -> usize {
        match self.pieces.binary_search_by(|p| p.start.partial_cmp(&x).unwrap()) {
            Ok(k) => k,
            Err(k) => k.saturating_sub(1),
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64, CurveError> {
        let x = self.check_domain(x)?;
        Ok(self.pieces[self.piece_index(x)].eval(x))
    }

    /// Right derivative; at a finite domain end this is the last piece's slope there.
    pub fn right_derivative(&self, x: f64) -> Result<f64, CurveError> {
        let x = self.check_domain(x)?;
        Ok(self.pieces[self.piece_index(x)].marginal(x))
    }

    /// Left derivative; at zero this equals the right derivative.
    pub fn left_derivative(&self, x: f64) -> Result<f64, CurveError> {
        let x = self.check_domain(x)?;
        let mut k = self.piece_index(x);
        if k > 0 && self.pieces[k].start == x {
            k -= 1;
        }
        Ok(self.pieces[k].marginal(x))
    }

    /// Checks that the marginal never decreases (convex) or never increases
    /// (concave) over the domain, including across breakpoints.
    pub fn check_shape(&self, expected: Shape) -> Result<(), CurveError> {
        let sign = match expected {
            Shape::Convex => 1.0,
            Shape::Concave => -1.0,
            Shape::Irregular => return Ok(()),
        };
        let tol = 1e-12;
        for (k, p) in self.pieces.iter().enumerate() {
            if sign * p.slope_rate < -tol {
                return Err(CurveError::ShapeViolation {
                    expected,
                    at: p.start,
                    before: p.slope,
                    after: p.marginal(p.start + 1.0),
                });
            }
            if let Some(next) = self.pieces.get(k + 1) {
                let before = p.marginal(next.start);
                if sign * (next.slope - before) < -tol * (1.0 + before.abs()) {
                    return Err(CurveError::ShapeViolation {
                        expected,
                        at: next.start,
                        before,
                        after: next.slope,
                    });
                }
            }
        }
        Ok(())
    }

    /// Same curve with `offset * x` added; shifts every marginal by `offset`.
    pub fn add_marginal_offset(&self, offset: f64) -> Self {
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                start: p.start,
                value: p.value + offset * p.start,
                slope: p.slope + offset,
                slope_rate: p.slope_rate,
            })
            .collect();
        Self {
            pieces,
            end: self.end,
            shape: self.shape,
        }
    }

    /// `self + weight * other` on the common domain.
    pub fn add_scaled(&self, other: &PiecewiseCurve, weight: f64) -> Self {
        let end = match (self.end, other.end) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let limit = end.unwrap_or(f64::INFINITY);
        let mut starts: Vec<f64> = self.breakpoints().chain(other.breakpoints()).filter(|&s| s < limit).collect();
        starts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        starts.dedup();
        let pieces = starts
            .iter()
            .map(|&s| {
                let a = &self.pieces[self.piece_index(s)];
                let b = &other.pieces[other.piece_index(s)];
                Piece {
                    start: s,
                    value: a.eval(s) + weight * b.eval(s),
                    slope: a.marginal(s) + weight * b.marginal(s),
                    slope_rate: a.slope_rate + weight * b.slope_rate,
                }
            })
            .collect();
        let shape = if self.shape == other.shape && weight >= 0.0 {
            self.shape
        } else {
            Shape::Irregular
        };
        Self { pieces, end, shape }
    }

    /// Largest `x` in `[0, limit]` whose right marginal does not exceed `level`
    /// (0 when the marginal at zero already exceeds it). Assumes convexity.
    pub fn quantity_at_marginal(&self, level: f64, limit: f64) -> f64 {
        let mut best = 0.0;
        for (k, p) in self.pieces.iter().enumerate() {
            if p.start >= limit {
                break;
            }
            let hi = self.piece_end(k).min(limit);
            if p.slope > level + BREAKPOINT_TOL {
                return best;
            }
            let at_hi = p.marginal(hi);
            if at_hi <= level + BREAKPOINT_TOL {
                best = hi;
                continue;
            }
            // Rising piece crossing `level` inside (start, hi).
            return (p.start + (level - p.slope) / p.slope_rate).clamp(p.start, hi);
        }
        best
    }

    /// Smallest `x` in `[0, limit]` whose marginal reaches `level`; `limit`
    /// when it never does. Assumes convexity.
    fn quantity_reaching_marginal(&self, level: f64, limit: f64) -> f64 {
        for (k, p) in self.pieces.iter().enumerate() {
            if p.start >= limit {
                break;
            }
            if p.slope >= level - BREAKPOINT_TOL {
                return p.start;
            }
            let hi = self.piece_end(k).min(limit);
            if p.marginal(hi) >= level - BREAKPOINT_TOL && p.slope_rate > 0.0 {
                return (p.start + (level - p.slope) / p.slope_rate).clamp(p.start, hi);
            }
        }
        limit
    }

    /// Marginal levels at which the curve's marginal changes regime on `[0, limit]`.
    fn marginal_levels(&self, limit: f64, out: &mut Vec<f64>) {
        for (k, p) in self.pieces.iter().enumerate() {
            if p.start >= limit {
                break;
            }
            out.push(p.slope);
            out.push(p.marginal(self.piece_end(k).min(limit)));
        }
    }
}

/// Result of merging capacity-limited convex components in merit order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeritSplit {
    aggregate: PiecewiseCurve,
    capacities: Vec<f64>,
    segments: Vec<SplitSegment>,
}

/// On `[from, to]` component `c` supplies `base[c] + rate[c] * (q - from)`.
#[derive(Debug, Clone, PartialEq)]
struct SplitSegment {
    from: f64,
    to: f64,
    base: Vec<f64>,
    rate: Vec<f64>,
}

impl MeritSplit {
    /// Least-cost aggregate of the components together with the split that
    /// attains it.
    pub fn aggregate(&self) -> &PiecewiseCurve {
        &self.aggregate
    }

    pub fn total_capacity(&self) -> f64 {
        self.capacities.iter().sum()
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    /// Component quantities producing the aggregate `total` at least cost.
    pub fn disaggregate(&self, total: f64) -> Result<Vec<f64>, CurveError> {
        let cap = self.total_capacity();
        if total.is_nan() || total < -BREAKPOINT_TOL || total > cap + BREAKPOINT_TOL {
            return Err(CurveError::OutOfDomain { x: total, end: cap });
        }
        let total = total.clamp(0.0, cap);
        let seg = self.segments.iter().find(|s| total < s.to).or(self.segments.last());
        Ok(match seg {
            None => vec![0.0; self.capacities.len()],
            Some(s) => s
                .base
                .iter()
                .zip(&s.rate)
                .zip(&self.capacities)
                .map(|((b, r), k)| (b + r * (total - s.from)).clamp(0.0, *k))
                .collect(),
        })
    }
}

/// Merges convex components with capacities into the least-cost aggregate.
///
/// Components supply in order of rising marginal; ties at a flat marginal
/// level are filled in the order the components are given.
pub fn merit_merge(components: &[(PiecewiseCurve, f64)]) -> Result<MeritSplit, CurveError> {
    let n = components.len();
    let mut capacities = Vec::with_capacity(n);
    let mut levels = Vec::new();
    for (index, (curve, capacity)) in components.iter().enumerate() {
        if !(capacity.is_finite() && *capacity >= 0.0) {
            return Err(CurveError::BadCapacity {
                index,
                capacity: *capacity,
            });
        }
        if let Some(end) = curve.domain_end() {
            if *capacity > end + BREAKPOINT_TOL {
                return Err(CurveError::CapacityBeyondDomain {
                    index,
                    capacity: *capacity,
                    end,
                });
            }
        }
        curve.check_shape(Shape::Convex)?;
        capacities.push(*capacity);
        if *capacity > 0.0 {
            curve.marginal_levels(*capacity, &mut levels);
        }
    }
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup_by(|a, b| (*a - *b).abs() <= BREAKPOINT_TOL);

    let low = |c: usize, level: f64| -> f64 {
        if capacities[c] == 0.0 {
            0.0
        } else {
            components[c].0.quantity_reaching_marginal(level, capacities[c])
        }
    };
    let high = |c: usize, level: f64| -> f64 {
        if capacities[c] == 0.0 {
            0.0
        } else {
            components[c].0.quantity_at_marginal(level, capacities[c])
        }
    };

    let mut segments: Vec<SplitSegment> = Vec::new();
    let mut marginals: Vec<MarginalSegment> = Vec::new();
    let mut current = vec![0.0; n];
    let mut supplied = 0.0;
    let mut previous: Option<f64> = None;
    for &level in &levels {
        if let Some(prev) = previous {
            // Continuous rise of every component on an increasing piece.
            let target: Vec<f64> = (0..n).map(|c| low(c, level).max(current[c])).collect();
            let moved: f64 = target.iter().zip(&current).map(|(t, x)| t - x).sum();
            if moved > BREAKPOINT_TOL {
                let rate: Vec<f64> = target.iter().zip(&current).map(|(t, x)| (t - x) / moved).collect();
                marginals.push(MarginalSegment {
                    start: supplied,
                    marginal: prev,
                    rate: (level - prev) / moved,
                });
                segments.push(SplitSegment {
                    from: supplied,
                    to: supplied + moved,
                    base: current.clone(),
                    rate,
                });
                supplied += moved;
                current = target;
            }
        }
        // Flat stretch at `level`, filled component by component.
        for c in 0..n {
            let top = high(c, level).max(current[c]);
            let moved = top - current[c];
            if moved > BREAKPOINT_TOL {
                let mut rate = vec![0.0; n];
                rate[c] = 1.0;
                marginals.push(MarginalSegment {
                    start: supplied,
                    marginal: level,
                    rate: 0.0,
                });
                segments.push(SplitSegment {
                    from: supplied,
                    to: supplied + moved,
                    base: current.clone(),
                    rate,
                });
                supplied += moved;
                current[c] = top;
            }
        }
        previous = Some(level);
    }

    let value_at_zero: f64 = components.iter().map(|(c, _)| c.pieces[0].value).sum();
    let total: f64 = capacities.iter().sum();
    let aggregate = if marginals.is_empty() {
        PiecewiseCurve {
            pieces: vec![Piece {
                start: 0.0,
                value: value_at_zero,
                slope: 0.0,
                slope_rate: 0.0,
            }],
            end: Some(total.max(f64::MIN_POSITIVE)),
            shape: Shape::Convex,
        }
    } else {
        // Anchor each piece's value on the components themselves to avoid
        // accumulating integration error.
        let mut pieces = Vec::with_capacity(marginals.len());
        for (m, s) in marginals.iter().zip(&segments) {
            let value = components
                .iter()
                .zip(&s.base)
                .map(|((curve, _), &x)| curve.pieces[curve.piece_index(x)].eval(x))
                .sum();
            pieces.push(Piece {
                start: m.start,
                value,
                slope: m.marginal,
                slope_rate: m.rate,
            });
        }
        if let Some(last) = segments.last_mut() {
            last.to = total;
        }
        PiecewiseCurve {
            pieces,
            end: Some(total),
            shape: Shape::Convex,
        }
    };
    Ok(MeritSplit {
        aggregate,
        capacities,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(m: f64, k: f64) -> (PiecewiseCurve, f64) {
        (PiecewiseCurve::linear(m, Some(k)).unwrap(), k)
    }

    #[test]
    fn two_linear_units_merge_in_merit_order() {
        let split = merit_merge(&[lin(2.0, 5.0), lin(1.0, 5.0)]).unwrap();
        let agg = split.aggregate();
        assert_eq!(agg.eval(3.0).unwrap(), 3.0);
        assert_eq!(agg.eval(8.0).unwrap(), 11.0);
        assert_eq!(split.disaggregate(7.0).unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn equal_marginals_fill_in_given_order() {
        let split = merit_merge(&[lin(3.0, 4.0), lin(3.0, 4.0)]).unwrap();
        assert_eq!(split.disaggregate(5.0).unwrap(), vec![4.0, 1.0]);
    }

    #[test]
    fn rising_marginals_share_the_increment() {
        let a = PiecewiseCurve::affine_marginal(1.0, 1.0, Some(10.0)).unwrap();
        let b = PiecewiseCurve::affine_marginal(1.0, 2.0, Some(10.0)).unwrap();
        let split = merit_merge(&[(a, 10.0), (b, 10.0)]).unwrap();
        let x = split.disaggregate(3.0).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!((split.aggregate().right_derivative(3.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn offset_shifts_marginal_and_keeps_origin() {
        let c = PiecewiseCurve::linear(2.0, Some(5.0)).unwrap().add_marginal_offset(1.5);
        assert_eq!(c.eval(0.0).unwrap(), 0.0);
        assert_eq!(c.right_derivative(2.0).unwrap(), 3.5);
    }

    #[test]
    fn saturating_quadratic_flattens() {
        let u = PiecewiseCurve::saturating_quadratic(1.0, 44.0, 22.0).unwrap();
        assert_eq!(u.eval(30.0).unwrap(), 484.0);
        assert_eq!(u.right_derivative(22.0).unwrap(), 0.0);
        assert_eq!(u.left_derivative(22.0).unwrap(), 0.0);
        assert_eq!(u.right_derivative(10.0).unwrap(), 24.0);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let c = PiecewiseCurve::linear(1.0, Some(5.0)).unwrap();
        assert!(matches!(c.eval(6.0), Err(CurveError::OutOfDomain { .. })));
        assert!(c.eval(-1.0).is_err());
    }

    #[test]
    fn shape_check_catches_falling_marginal() {
        let c = PiecewiseCurve::from_marginals(
            0.0,
            &[
                MarginalSegment {
                    start: 0.0,
                    marginal: 3.0,
                    rate: 0.0,
                },
                MarginalSegment {
                    start: 2.0,
                    marginal: 1.0,
                    rate: 0.0,
                },
            ],
            Some(4.0),
            Shape::Convex,
        )
        .unwrap();
        assert!(c.check_shape(Shape::Convex).is_err());
        assert!(merit_merge(&[(c, 4.0)]).is_err());
    }
}
