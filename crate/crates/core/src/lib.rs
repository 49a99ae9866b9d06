//! Peer-to-peer energy trading for residential communities: device models,
//! bidding agents, a uniform-price double auction, a simulated permissioned
//! ledger running the market contract, and a community scenario simulator.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auction;
pub mod bidding;
pub mod der;
pub mod ids;
pub mod ledger;
pub mod sim;
pub mod units;
