//! Nodal electricity spot markets with pollution externalities.
//!
//! The crate computes welfare-optimal, competitive and oligopolistic
//! equilibria on a transmission network, equilibria under nodal price caps,
//! and the payments of a subsidy-and-tax scheme under which profit-seeking
//! producers reproduce the welfare optimum. A multi-interval layer prices
//! out energy budgets and other coupling constraints.

pub mod equilibrium;
pub mod incentive;
pub mod market;
pub mod modes;
pub mod multiperiod;
pub mod network;
pub mod piecewise;
pub mod pricecap;
pub mod scenario;
