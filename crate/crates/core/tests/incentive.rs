//! Mechanism equilibria against the welfare optimum on random instances.

mod common;

use spotmarket_core::equilibrium::SolverConfig;
use spotmarket_core::incentive::{solve_mechanism, verify_incentive_compatibility};
use spotmarket_core::scenario::two_node_example;
use std::time::{Duration, Instant};

#[test]
fn two_node_mechanism_reproduces_optimum() {
    let report = verify_incentive_compatibility(&two_node_example(), &SolverConfig::default(), 1e-5).unwrap();
    assert!(report.compatible(), "gap {}", report.worst_gap());
}

#[test]
fn random_single_node_instances() {
    let mut rng = common::rng(31);
    for case in 0..25 {
        let s = common::single_node(&mut rng);
        let start = Instant::now();
        let report = verify_incentive_compatibility(&s, &SolverConfig::default(), 1e-5).unwrap();
        let elapsed = start.elapsed();
        assert!(report.compatible(), "case {case}: gap {}", report.worst_gap());
        assert!(elapsed < Duration::from_millis(100), "case {case}: {elapsed:?}");
    }
}

#[test]
fn payments_net_out_with_zero_offsets() {
    // Each producer is paid the welfare it adds minus its profit, so
    // profit plus payment equals its marginal contribution.
    let mut rng = common::rng(32);
    for _ in 0..10 {
        let s = common::single_node(&mut rng);
        let (report, schedule) = solve_mechanism(&s, None, &SolverConfig::default()).unwrap();
        let total: f64 = schedule.payments.iter().map(|p| p.payment).sum();
        assert!((total - schedule.budget).abs() < 1e-9);
        for p in &schedule.payments {
            let mut without = report.profile.quantities().to_vec();
            for (k, u) in s.units.iter().enumerate() {
                if u.id.producer == p.producer {
                    without[k] = 0.0;
                }
            }
            let contribution = common::welfare_oracle(&s, report.profile.quantities()) - common::welfare_oracle(&s, &without);
            let net = report.profits[p.producer] + p.payment;
            assert!((net - contribution).abs() < 1e-6, "net {net} vs contribution {contribution}");
        }
    }
}
