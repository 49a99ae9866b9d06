//! Simulated permissioned ledger: per-community channels, endorsed
//! transactions, hash-linked blocks and the market contract.

pub mod block;
pub mod channel;
pub mod codec;
pub mod config;
pub mod contract;
pub mod digest;
pub mod store;
pub mod tx;

pub use block::{verify_blocks, verify_encoded, Block, ChainFault, FaultKind};
pub use channel::{Channel, ChannelError, Committed, Peer};
pub use config::{ChannelConfig, DeviceKind, DeviceRegistration, Registry};
pub use contract::{ContractError, ContractState, IntervalRecord, Phase, Rules};
pub use digest::Digest;
pub use store::ChainStore;
pub use tx::{Measurement, OpenInterval, Payload, Reading, Transaction, TxKind};
