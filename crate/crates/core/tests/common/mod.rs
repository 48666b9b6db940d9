//! Random instance builders and brute-force oracles shared by the
//! integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotmarket_core::market::{GenerationProfile, MarketScenario, Unit, UnitId};
use spotmarket_core::network::{Grid, Line};
use spotmarket_core::piecewise::PiecewiseCurve;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(node: usize, producer: usize, index: usize, capacity: f64, marginal: f64, rate: f64, pollution: f64) -> Unit {
    Unit {
        id: UnitId { node, producer, index },
        capacity,
        cost: PiecewiseCurve::affine_marginal(marginal, rate, Some(capacity)).unwrap(),
        pollution: vec![PiecewiseCurve::linear(pollution, Some(capacity)).unwrap()],
    }
}

/// `b*d - a*d^2` saturating at its peak.
pub fn quadratic_utility(a: f64, b: f64) -> PiecewiseCurve {
    PiecewiseCurve::saturating_quadratic(a, b, b / (2.0 * a)).unwrap()
}

/// One node, two producers with two units each, affine marginals and
/// linear pollution.
pub fn single_node(rng: &mut impl Rng) -> MarketScenario {
    let mut units = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            let capacity = rng.gen_range(2.0..8.0f64).round();
            units.push(unit(
                0,
                i,
                j,
                capacity,
                rng.gen_range(0.5..5.0),
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.5..4.0),
            ));
        }
    }
    let utility = quadratic_utility(rng.gen_range(0.2..1.0), rng.gen_range(15.0..40.0));
    let damage = PiecewiseCurve::linear(rng.gen_range(0.25..1.5), None).unwrap();
    MarketScenario::new(Grid::copper_plate(1), vec![utility], 2, units, vec![vec![damage]]).unwrap()
}

/// At most three units on one or two nodes; the two-node case has a single
/// line of random capacity and convex damage at each node.
pub fn small_instance(rng: &mut impl Rng) -> MarketScenario {
    let nodes = rng.gen_range(1..=2usize);
    let count = if nodes == 1 { rng.gen_range(1..=3usize) } else { 2 };
    let mut units = Vec::new();
    for k in 0..count {
        let node = if nodes == 2 { k } else { 0 };
        let producer = rng.gen_range(0..2usize);
        let index = units
            .iter()
            .filter(|u: &&Unit| u.id.node == node && u.id.producer == producer)
            .count();
        let capacity = rng.gen_range(2.0..6.0f64).round();
        units.push(unit(
            node,
            producer,
            index,
            capacity,
            rng.gen_range(0.5..5.0),
            rng.gen_range(0.0..0.8),
            rng.gen_range(0.5..3.0),
        ));
    }
    let utilities = (0..nodes)
        .map(|_| quadratic_utility(rng.gen_range(0.2..1.0), rng.gen_range(10.0..30.0)))
        .collect();
    let damages = (0..nodes)
        .map(|_| vec![PiecewiseCurve::affine_marginal(rng.gen_range(0.2..1.5), rng.gen_range(0.0..0.1), None).unwrap()])
        .collect();
    let grid = if nodes == 1 {
        Grid::copper_plate(1)
    } else {
        Grid {
            node_count: 2,
            lines: vec![Line {
                ptdf: vec![1.0, 0.0],
                capacity: rng.gen_range(1.0..4.0),
            }],
            constraints: vec![],
        }
    };
    MarketScenario::new(grid, utilities, 2, units, damages).unwrap()
}

/// Maximum of a concave function on `[lo, hi]` by ternary search.
pub fn concave_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..100 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    f(0.5 * (lo + hi))
}

/// Consumer utility at injections `q` computed without the allocator: a
/// single node consumes everything, two nodes joined by one line split the
/// total subject to the line limit.
pub fn utility_oracle(scenario: &MarketScenario, q: &[f64]) -> f64 {
    let u = &scenario.utilities;
    match q.len() {
        1 => u[0].eval(q[0]).unwrap(),
        2 => {
            let total = q[0] + q[1];
            let line = &scenario.grid.lines[0];
            assert_eq!(line.ptdf, vec![1.0, 0.0]);
            let lo = (q[0] - line.capacity).max(0.0);
            let hi = (q[0] + line.capacity).min(total);
            concave_max(|d1| u[0].eval(d1).unwrap() + u[1].eval(total - d1).unwrap(), lo, hi)
        }
        _ => unimplemented!("oracle covers one or two nodes"),
    }
}

pub fn welfare_oracle(scenario: &MarketScenario, quantities: &[f64]) -> f64 {
    let mut injection = vec![0.0; scenario.node_count()];
    let mut pollution = vec![0.0; scenario.node_count()];
    let mut cost = 0.0;
    for (u, &x) in scenario.units.iter().zip(quantities) {
        injection[u.id.node] += x;
        pollution[u.id.node] += u.pollution[0].eval(x).unwrap();
        cost += u.cost.eval(x).unwrap();
    }
    let damage: f64 = scenario.damages.iter().zip(&pollution).map(|(d, &x)| d[0].eval(x).unwrap()).sum();
    utility_oracle(scenario, &injection) - cost - damage
}

/// Best welfare over every profile on a grid of spacing `step`.
pub fn grid_max_welfare(scenario: &MarketScenario, step: f64) -> (f64, Vec<f64>) {
    let levels: Vec<usize> = scenario.units.iter().map(|u| (u.capacity / step).round() as usize).collect();
    let mut idx = vec![0usize; levels.len()];
    let mut best = (f64::NEG_INFINITY, vec![]);
    loop {
        let q: Vec<f64> = idx
            .iter()
            .zip(&scenario.units)
            .map(|(&k, u)| (k as f64 * step).min(u.capacity))
            .collect();
        let w = welfare_oracle(scenario, &q);
        if w > best.0 {
            best = (w, q);
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= levels[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

pub fn profile(scenario: &MarketScenario, q: &[f64]) -> GenerationProfile {
    GenerationProfile::new(scenario, q.to_vec()).unwrap()
}
