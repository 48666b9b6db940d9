//! Acceptance checks on the bundled two-node scenario and randomized
//! instances. Prints one PASS/FAIL line per check and fails if any check
//! fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use rand::Rng;
use spotmarket_core::equilibrium::{
    declared_cost_market_power, solve, solve_equilibrium, stationarity, CompetitiveRule, EquilibriumKind, OligopolisticRule, OptimalRule,
    SolverConfig, StationarityRule,
};
use spotmarket_core::incentive::{declared_cost_under_mechanism, incentive_payment, solve_mechanism, verify_incentive_compatibility};
use spotmarket_core::market::{adjusted_cost, marginal_damage, merged_cost, MarketScenario, Unit, UnitId};
use spotmarket_core::multiperiod::{solve_multi, EnergyLimit, MultiConfig, MultiIntervalScenario};
use spotmarket_core::network::{nodal_price, price_jacobian, utility_value, Grid};
use spotmarket_core::piecewise::PiecewiseCurve;
use spotmarket_core::pricecap::{capped_price, solve_capped, Quantity};
use spotmarket_core::scenario::two_node_example;
use std::panic;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

type Check = Result<(), String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(what: &str, got: &[f64], want: &[f64], tol: f64) -> Check {
    ensure!(got.len() == want.len(), "{what}: {} entries, expected {}", got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        ensure!((g - w).abs() <= tol, "{what}: got {got:?}, want {want:?} within {tol}");
    }
    Ok(())
}

fn config() -> SolverConfig {
    SolverConfig::default()
}

fn optimal_column() -> Check {
    let start = Instant::now();
    let r = solve_equilibrium(EquilibriumKind::Optimal, &two_node_example(), &config()).map_err(|e| e.to_string())?;
    close(
        "quantities",
        r.profile.quantities(),
        &[5.0, 5.0, 10.0, 5.0, 5.0, 0.0, 10.0, 0.0],
        1e-9,
    )?;
    close("welfare", &[r.welfare], &[425.0], 1e-9)?;
    close("prices", &r.prices, &[4.0, 6.0], 1e-9)?;
    ensure!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());
    Ok(())
}

fn competitive_column() -> Check {
    let start = Instant::now();
    let r = solve_equilibrium(EquilibriumKind::Competitive, &two_node_example(), &config()).map_err(|e| e.to_string())?;
    close(
        "quantities",
        r.profile.quantities(),
        &[5.0, 5.0, 6.0, 10.0, 5.0, 5.0, 10.0, 10.0],
        1e-9,
    )?;
    close("welfare", &[r.welfare], &[390.0], 1e-9)?;
    close("prices", &r.prices, &[2.0, 6.0], 1e-9)?;
    ensure!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());
    Ok(())
}

fn oligopolistic_column() -> Check {
    let start = Instant::now();
    let r = solve_equilibrium(EquilibriumKind::Oligopolistic, &two_node_example(), &config()).map_err(|e| e.to_string())?;
    close("welfare", &[r.welfare], &[286.1724], 1e-3)?;
    close("prices", &r.prices, &[23.48, 23.48], 0.01)?;
    close(
        "quantities",
        r.profile.quantities(),
        &[0.0, 2.76, 0.0, 2.76, 0.0, 2.37, 0.0, 2.37],
        0.01,
    )?;
    ensure!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());
    Ok(())
}

fn cap_8_column() -> Check {
    let start = Instant::now();
    let r = solve_capped(&two_node_example(), &[8.0, 8.0], &config()).map_err(|e| e.to_string())?;
    close(
        "quantities",
        r.report.profile.quantities(),
        &[0.0, 5.0, 0.0, 8.0, 0.0, 2.5, 0.0, 2.5],
        1e-9,
    )?;
    close("welfare", &[r.report.welfare], &[376.0], 1e-9)?;
    close("prices", &r.report.prices, &[8.0, 8.0], 1e-6)?;
    ensure!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());
    Ok(())
}

fn cap_1_column() -> Check {
    let start = Instant::now();
    let r = solve_capped(&two_node_example(), &[1.0, 1.0], &config()).map_err(|e| e.to_string())?;
    close(
        "quantities",
        r.report.profile.quantities(),
        &[0.0, 5.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0],
        1e-9,
    )?;
    close("welfare", &[r.report.welfare], &[375.0], 1e-9)?;
    close("prices", &r.report.prices, &[1.0, 1.0], 1e-9)?;
    let d1 = r.desired_demand[0].finite().ok_or("node 1 desired demand unbounded")?;
    close("node 1 desired demand", &[d1], &[26.5], 1e-9)?;
    ensure!(
        r.desired_demand[1] == Quantity::Unbounded,
        "node 2 desired demand {:?}",
        r.desired_demand[1]
    );
    ensure!(start.elapsed() < Duration::from_secs(1), "took {:?}", start.elapsed());
    Ok(())
}

fn incentive_payments() -> Check {
    let (_, schedule) = solve_mechanism(&two_node_example(), None, &config()).map_err(|e| e.to_string())?;
    let payments: Vec<f64> = schedule.payments.iter().map(|p| p.payment).collect();
    close("payments", &payments, &[-11.0, 0.0], 1e-6)?;
    close("iso budget", &[schedule.budget], &[-11.0], 1e-6)
}

fn incentive_compatibility() -> Check {
    let report = verify_incentive_compatibility(&two_node_example(), &config(), 1e-5).map_err(|e| e.to_string())?;
    ensure!(report.compatible(), "two-node example: gap {}", report.worst_gap());
    let mut rng = common::rng(301);
    for case in 0..25 {
        let s = common::single_node(&mut rng);
        let start = Instant::now();
        let report = verify_incentive_compatibility(&s, &config(), 1e-5).map_err(|e| format!("case {case}: {e}"))?;
        let elapsed = start.elapsed();
        ensure!(report.compatible(), "case {case}: gap {}", report.worst_gap());
        ensure!(elapsed < Duration::from_millis(100), "case {case}: took {elapsed:?}");
    }
    Ok(())
}

/// `low*q` up to `kink`, then slope `high`.
fn two_slope(low: f64, high: f64, kink: f64) -> impl Fn(f64) -> f64 {
    move |q| if q < kink { low * q } else { high * q - (high - low) * kink }
}

fn check_curve(what: &str, curve: &PiecewiseCurve, expected: impl Fn(f64) -> f64, capacity: f64) -> Check {
    for k in 0..100 {
        let q = capacity * k as f64 / 99.0;
        let got = curve.eval(q).map_err(|e| e.to_string())?;
        ensure!((got - expected(q)).abs() <= 1e-12, "{what} at {q}: {got} vs {}", expected(q));
    }
    Ok(())
}

fn closed_form_curves() -> Check {
    let s = two_node_example();
    let truth = [
        (0, 0, 1.0, 2.0, 5.0, 10.0),
        (0, 1, 1.0, 2.0, 10.0, 20.0),
        (1, 0, 2.0, 4.0, 5.0, 10.0),
        (1, 1, 2.0, 4.0, 10.0, 20.0),
    ];
    for (n, i, low, high, kink, cap) in truth {
        let split = merged_cost(&s, i, n).map_err(|e| e.to_string())?;
        check_curve(
            &format!("merged cost ({}, {})", n + 1, i + 1),
            split.aggregate(),
            two_slope(low, high, kink),
            cap,
        )?;
    }
    let optimal = solve_equilibrium(EquilibriumKind::Optimal, &s, &config()).map_err(|e| e.to_string())?;
    let adjusted = [
        (0, 0, 3.0, 4.0, 5.0, 10.0),
        (0, 1, 3.0, 4.0, 10.0, 20.0),
        (1, 0, 6.0, 8.0, 5.0, 10.0),
        (1, 1, 6.0, 8.0, 10.0, 20.0),
    ];
    for (n, i, low, high, kink, cap) in adjusted {
        let mu = marginal_damage(&s, &optimal.profile, n).map_err(|e| e.to_string())?;
        let split = adjusted_cost(&s, n, Some(i), &mu).map_err(|e| e.to_string())?;
        check_curve(
            &format!("adjusted cost ({}, {})", n + 1, i + 1),
            split.aggregate(),
            two_slope(low, high, kink),
            cap,
        )?;
    }
    Ok(())
}

fn stationary(rule: &dyn StationarityRule, s: &MarketScenario, q: &[f64]) -> Check {
    let profile = common::profile(s, q);
    for (k, u) in s.units.iter().enumerate() {
        let c = stationarity(rule, s, &profile, k).map_err(|e| e.to_string())?;
        if q[k] < u.capacity - 1e-9 {
            ensure!(c.right <= 1e-6, "{} unit {}: right condition {}", rule.name(), u.id, c.right);
        }
        if q[k] > 1e-9 {
            let left = c.left.ok_or("missing left condition")?;
            ensure!(left >= -1e-6, "{} unit {}: left condition {left}", rule.name(), u.id);
        }
    }
    Ok(())
}

fn welfare_oracle() -> Check {
    let mut rng = common::rng(501);
    for case in 0..10 {
        let s = common::small_instance(&mut rng);
        let r = solve(&OptimalRule, &s, &config()).map_err(|e| format!("case {case}: {e}"))?;
        let (best, _) = common::grid_max_welfare(&s, 0.05);
        ensure!(r.welfare >= best - 0.02, "case {case}: welfare {} below grid {best}", r.welfare);
        let c = solve(&CompetitiveRule, &s, &config()).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(c.residual <= 1e-6, "case {case}: competitive residual {}", c.residual);
        stationary(&CompetitiveRule, &s, c.profile.quantities())?;
        let o = solve(&OligopolisticRule::default(), &s, &config()).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(o.residual <= 1e-6, "case {case}: oligopolistic residual {}", o.residual);
        stationary(&OligopolisticRule::default(), &s, o.profile.quantities())?;
    }
    Ok(())
}

fn price_gradients() -> Check {
    let s = two_node_example();
    let (grid, utilities): (&Grid, &[PiecewiseCurve]) = (&s.grid, &s.utilities);
    let alloc = s.allocator().map_err(|e| e.to_string())?;
    let err = |e: spotmarket_core::network::NetworkError| e.to_string();
    let mut rng = common::rng(601);
    let h = 1e-6;
    for _ in 0..200 {
        let q = [rng.gen_range(0.1..30.0), rng.gen_range(0.1..30.0)];
        let base = utility_value(grid, utilities, &q).map_err(err)?;
        for n in 0..2 {
            let mut up = q;
            up[n] += h;
            let fd = (utility_value(grid, utilities, &up).map_err(err)? - base) / h;
            let p = nodal_price(grid, utilities, &q, n).map_err(err)?;
            ensure!((p - fd).abs() <= 5e-6, "price at {q:?} node {}: {p} vs {fd}", n + 1);
        }
    }
    let mut checked = 0;
    while checked < 200 {
        let q = [rng.gen_range(0.1..30.0), rng.gen_range(0.1..30.0)];
        let j0 = alloc.jacobian(&q).map_err(err)?;
        let mut near_boundary = false;
        for n in 0..2 {
            for d in [1e-3, 2e-3] {
                let mut a = q;
                a[n] += d;
                near_boundary |= alloc.jacobian(&a).map_err(err)? != j0;
            }
        }
        if near_boundary {
            continue;
        }
        let jac = price_jacobian(grid, utilities, &q).map_err(err)?;
        for n in 0..2 {
            let mut up = q;
            up[n] += h;
            for m in 0..2 {
                let fd = (nodal_price(grid, utilities, &up, m).map_err(err)? - nodal_price(grid, utilities, &q, m).map_err(err)?) / h;
                ensure!(
                    (jac[m][n] - fd).abs() <= 1e-4,
                    "jacobian at {q:?} ({m}, {n}): {} vs {fd}",
                    jac[m][n]
                );
            }
        }
        checked += 1;
    }
    Ok(())
}

fn declared_marginals_dominate() -> Check {
    let mut rng = common::rng(701);
    let mut covered = 0;
    while covered < 50 {
        let s = common::small_instance(&mut rng);
        // Some congested instances have no stationary oligopoly.
        let Ok(olig) = solve_equilibrium(EquilibriumKind::Oligopolistic, &s, &config()) else {
            continue;
        };
        let (optimal, _) = solve_mechanism(&s, None, &config()).map_err(|e| e.to_string())?;
        let totals = optimal.profile.observable(&s);
        for n in 0..s.node_count() {
            for i in 0..s.producer_count {
                if s.units_at(n, Some(i)).is_empty() {
                    continue;
                }
                let truth = merged_cost(&s, i, n).map_err(|e| e.to_string())?;
                let power = declared_cost_market_power(&s, &olig, i, n).map_err(|e| e.to_string())?;
                let mechanism = declared_cost_under_mechanism(&s, &totals, i, n).map_err(|e| e.to_string())?;
                for k in 0..40 {
                    let q = truth.total_capacity() * k as f64 / 40.0;
                    let t = truth.aggregate().right_derivative(q).map_err(|e| e.to_string())?;
                    let p = power.right_derivative(q).map_err(|e| e.to_string())?;
                    let m = mechanism.curve.right_derivative(q).map_err(|e| e.to_string())?;
                    ensure!(p >= t - 1e-9, "market power below truth at {q}: {p} < {t}");
                    ensure!(m >= t - 1e-9, "mechanism below truth at {q}: {m} < {t}");
                }
            }
        }
        covered += 1;
    }
    Ok(())
}

fn prices_respect_caps() -> Check {
    let mut rng = common::rng(702);
    for _ in 0..50 {
        let s = common::small_instance(&mut rng);
        let caps = vec![rng.gen_range(0.5..20.0); s.node_count()];
        let alloc = s.allocator().map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let q: Vec<f64> = (0..s.node_count()).map(|_| rng.gen_range(0.0..12.0)).collect();
            for (p, c) in capped_price(&alloc, &q, &caps).map_err(|e| e.to_string())?.iter().zip(&caps) {
                ensure!(p <= c, "price {p} above cap {c}");
            }
        }
        if let Ok(r) = solve_capped(&s, &caps, &config()) {
            for (p, c) in r.report.prices.iter().zip(&caps) {
                ensure!(*p <= c + 1e-12, "equilibrium price {p} above cap {c}");
            }
        }
    }
    Ok(())
}

fn payment_ignores_rival_grouping() -> Check {
    let mut rng = common::rng(703);
    for _ in 0..50 {
        let s = common::single_node(&mut rng);
        let share = rng.gen_range(0.1..0.9);
        let q: Vec<f64> = s.units.iter().map(|u| rng.gen_range(0.0..=u.capacity)).collect();
        let before = incentive_payment(&s, &common::profile(&s, &q), 0, 0.0).map_err(|e| e.to_string())?;
        let k = s.units.iter().position(|u| u.id.producer == 1).unwrap();
        let old = &s.units[k];
        let slope = old.pollution[0].right_derivative(0.0).map_err(|e| e.to_string())?;
        let extra = UnitId {
            node: 0,
            producer: 1,
            index: s.units_at(0, Some(1)).len(),
        };
        let mut units: Vec<Unit> = s.units.clone();
        units[k] = common::unit(0, 1, old.id.index, old.capacity * share, 3.0, 0.0, slope);
        units.push(common::unit(0, 1, extra.index, old.capacity * (1.0 - share), 1.0, 0.2, slope));
        let regrouped = MarketScenario::new(s.grid.clone(), s.utilities.clone(), 2, units, s.damages.clone()).map_err(|e| e.to_string())?;
        let q2: Vec<f64> = regrouped
            .units
            .iter()
            .map(|u| match u.id {
                id if id == old.id => q[k] * share,
                id if id == extra => q[k] * (1.0 - share),
                id => q[s.unit_index(id).unwrap()],
            })
            .collect();
        let after = incentive_payment(&regrouped, &common::profile(&regrouped, &q2), 0, 0.0).map_err(|e| e.to_string())?;
        ensure!((before - after).abs() < 1e-9, "payment {before} became {after}");
    }
    Ok(())
}

fn energy_limited_intervals() -> Check {
    let start = Instant::now();
    let interval = |peak: f64| {
        let a = common::unit(0, 0, 0, 10.0, 2.0, 1.0, 1.0);
        let b = common::unit(0, 0, 1, 10.0, 6.0, 0.0, 2.0);
        let utility = PiecewiseCurve::saturating_quadratic(0.5, peak, peak).unwrap();
        let damage = PiecewiseCurve::linear(1.0, None).unwrap();
        MarketScenario::new(Grid::copper_plate(1), vec![utility], 1, vec![a, b], vec![vec![damage]]).unwrap()
    };
    let intervals = vec![interval(20.0), interval(14.0)];
    let scenario =
        MultiIntervalScenario::new(intervals.clone(), vec![EnergyLimit { unit: 0, limit: 8.0 }], vec![]).map_err(|e| e.to_string())?;
    let report = solve_multi(&OptimalRule, &scenario, &MultiConfig::default()).map_err(|e| e.to_string())?;
    let got: Vec<f64> = report.intervals.iter().flat_map(|r| r.profile.quantities().to_vec()).collect();

    // Joint 0.1 grid over both intervals' outputs of both units.
    let grid: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
    let best_reply = |s: &MarketScenario, a: f64| {
        grid.iter()
            .map(|&b| (common::welfare_oracle(s, &[a, b]), b))
            .fold((f64::NEG_INFINITY, 0.0), |x, y| if y.0 > x.0 + 1e-12 { y } else { x })
    };
    let replies: Vec<Vec<(f64, f64)>> = intervals.iter().map(|s| grid.iter().map(|&a| best_reply(s, a)).collect()).collect();
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            let w = replies[0][i].0 + replies[1][j].0;
            if grid[i] + grid[j] <= 8.0 + 1e-9 && w > best.0 + 1e-12 {
                best = (w, i, j);
            }
        }
    }
    let want = [grid[best.1], replies[0][best.1].1, grid[best.2], replies[1][best.2].1];
    close("interval outputs", &got, &want, 0.02)?;
    ensure!(
        report.slackness_residual <= 1e-6,
        "slackness residual {}",
        report.slackness_residual
    );
    ensure!(start.elapsed() < Duration::from_secs(5), "took {:?}", start.elapsed());
    Ok(())
}

fn main() {
    let checks: [(&str, CheckFn); 14] = [
        ("1 optimal column", optimal_column),
        ("1 competitive column", competitive_column),
        ("1 oligopolistic column", oligopolistic_column),
        ("1 cap 8 column", cap_8_column),
        ("1 cap 1 column", cap_1_column),
        ("2 incentive payments", incentive_payments),
        ("3 incentive compatibility", incentive_compatibility),
        ("4 closed-form curves", closed_form_curves),
        ("5 brute-force welfare and stationarity", welfare_oracle),
        ("6 prices and jacobians against differences", price_gradients),
        ("7 declared marginals dominate true ones", declared_marginals_dominate),
        ("7 prices respect caps", prices_respect_caps),
        ("7 payments ignore rival grouping", payment_ignores_rival_grouping),
        ("8 energy-limited intervals", energy_limited_intervals),
    ];
    let last_panic = Arc::new(Mutex::new(String::new()));
    let sink = Arc::clone(&last_panic);
    panic::set_hook(Box::new(move |info| *sink.lock().unwrap() = info.to_string()));

    let mut failed = 0;
    for (name, check) in checks {
        let outcome = panic::catch_unwind(check).unwrap_or_else(|_| Err(format!("panicked: {}", last_panic.lock().unwrap())));
        match outcome {
            Ok(()) => println!("criterion {name}: PASS"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
