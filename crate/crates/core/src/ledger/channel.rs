//! A channel: one community's ledger, replicated across its member peers.
//!
//! Submissions are endorsed by simulating them against the channel's pending
//! state; a transaction needs a quorum of endorsements before it is ordered.
//! Ordering is arrival order. On commit every peer applies the block to its
//! own copy of the world state, so divergence shows up as a failed apply or
//! a differing state digest.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use super::block::{verify_blocks, verify_encoded, Block, ChainFault};
use super::config::{ChannelConfig, Registry};
use super::contract::{ContractError, ContractState, Rules};
use super::digest::Digest;
use super::store::{read_dir, ChainStore};
use super::tx::{Payload, Transaction};
use crate::ids::{ChannelId, PeerId};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("{0} is not a member of channel {1}")]
    NotMember(PeerId, ChannelId),
    #[error("transaction addressed to channel {got}, expected {expected}")]
    WrongChannel { expected: ChannelId, got: ChannelId },
    #[error("transaction id does not match its contents")]
    BadId,
    #[error("duplicate transaction {0}")]
    Duplicate(Digest),
    #[error("rejected: {0}")]
    Rejected(#[from] ContractError),
    #[error("only {got} of {needed} endorsements")]
    NoQuorum { got: usize, needed: usize },
    #[error("peer {peer} diverged at height {height}: {reason}")]
    Divergence {
        peer: PeerId,
        height: u64,
        reason: String,
    },
    #[error("invalid stored chain: {0}")]
    Chain(#[from] ChainFault),
    #[error("stored configuration differs from the requested one")]
    ConfigMismatch,
    #[error("invalid channel configuration: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Peer {
    pub id: PeerId,
    pub state: ContractState,
    /// A faulty peer neither endorses nor answers.
    pub faulty: bool,
}

/// What a commit appended.
#[derive(Debug, Clone)]
pub struct Committed {
    pub height: u64,
    pub block_hash: Digest,
    pub txs: Vec<Transaction>,
}

#[derive(Debug)]
pub struct Channel {
    config: ChannelConfig,
    registry: Registry,
    peers: Vec<Peer>,
    blocks: Vec<Block>,
    anchors: Vec<Digest>,
    pending: Vec<Transaction>,
    pending_state: ContractState,
    seen: HashSet<Digest>,
    store: Option<ChainStore>,
}

impl Channel {
    /// In-memory channel with a genesis block.
    pub fn new(config: ChannelConfig) -> Result<Channel, ChannelError> {
        let mut channel = Channel::empty(config, None)?;
        channel.append(Block::genesis())?;
        Ok(channel)
    }

    /// Opens the channel persisted in `dir`, replaying and verifying its
    /// chain, or creates it there when the directory holds no channel.
    pub fn open(config: ChannelConfig, dir: impl AsRef<Path>) -> Result<Channel, ChannelError> {
        let dir = dir.as_ref();
        match ChainStore::load_config(dir)? {
            Some(stored) if stored != config => return Err(ChannelError::ConfigMismatch),
            Some(_) => {}
            None => ChainStore::save_config(dir, &config)?,
        }
        let stored = read_dir(dir)?;
        let blocks = verify_encoded(&stored.records, &stored.anchors)?;
        let store = ChainStore::open(dir)?;
        let mut channel = Channel::empty(config, Some(store))?;
        if blocks.is_empty() {
            channel.append(Block::genesis())?;
        } else {
            for block in blocks {
                channel.replay(block)?;
            }
            channel.pending_state = channel.peers[0].state.clone();
        }
        Ok(channel)
    }

    /// Opens a channel using the configuration stored in `dir`.
    pub fn reopen(dir: impl AsRef<Path>) -> Result<Channel, ChannelError> {
        let config = ChainStore::load_config(dir.as_ref())?
            .ok_or_else(|| ChannelError::Config("no channel.json".into()))?;
        Channel::open(config, dir)
    }

    fn empty(config: ChannelConfig, store: Option<ChainStore>) -> Result<Channel, ChannelError> {
        if !config.is_member(&config.operator) {
            return Err(ChannelError::Config("operator must be a member".into()));
        }
        let registry = config.registry();
        let peers = config
            .members
            .iter()
            .map(|id| Peer {
                id: id.clone(),
                state: ContractState::default(),
                faulty: false,
            })
            .collect();
        Ok(Channel {
            config,
            registry,
            peers,
            blocks: Vec::new(),
            anchors: Vec::new(),
            pending: Vec::new(),
            pending_state: ContractState::default(),
            seen: HashSet::new(),
            store,
        })
    }

    pub fn id(&self) -> &ChannelId {
        &self.config.id
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn rules(&self) -> Rules<'_> {
        Rules {
            config: &self.config,
            registry: &self.registry,
        }
    }

    /// Committed world state as seen by the first peer.
    pub fn state(&self) -> &ContractState {
        &self.peers[0].state
    }

    /// Committed state plus every transaction waiting for the next block.
    pub fn pending_state(&self) -> &ContractState {
        &self.pending_state
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn peers(&self) -> &[Peer] {
        &self.peers
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn tip_hash(&self) -> Digest {
        self.blocks.last().map_or(Digest::ZERO, |b| b.block_hash)
    }

    pub fn set_faulty(&mut self, peer: &PeerId, faulty: bool) {
        for p in &mut self.peers {
            if &p.id == peer {
                p.faulty = faulty;
            }
        }
    }

    pub fn peer_digests(&self) -> Vec<(PeerId, Digest)> {
        self.peers
            .iter()
            .map(|p| (p.id.clone(), p.state.digest()))
            .collect()
    }

    /// True when every peer holds the same world state.
    pub fn peers_agree(&self) -> bool {
        let first = self.peers[0].state.digest();
        self.peers[1..].iter().all(|p| p.state.digest() == first)
    }

    /// Validates, endorses and queues a transaction. The block is cut when
    /// the pending batch reaches the configured size.
    pub fn submit(
        &mut self,
        submitter: impl Into<PeerId>,
        payload: Payload,
    ) -> Result<Digest, ChannelError> {
        let tx = Transaction::new(self.config.id.clone(), submitter.into(), payload);
        self.submit_tx(tx)
    }

    pub fn submit_tx(&mut self, mut tx: Transaction) -> Result<Digest, ChannelError> {
        if tx.channel != self.config.id {
            return Err(ChannelError::WrongChannel {
                expected: self.config.id.clone(),
                got: tx.channel,
            });
        }
        if !self.config.is_member(&tx.submitter) {
            return Err(ChannelError::NotMember(
                tx.submitter,
                self.config.id.clone(),
            ));
        }
        if !tx.id_matches_content() {
            return Err(ChannelError::BadId);
        }
        if self.seen.contains(&tx.id) {
            return Err(ChannelError::Duplicate(tx.id));
        }
        self.pending_state.validate(&self.rules(), &tx)?;
        tx.endorsements = self
            .peers
            .iter()
            .filter(|p| !p.faulty)
            .map(|p| p.id.clone())
            .collect();
        let needed = self.config.quorum();
        if tx.endorsements.len() < needed {
            return Err(ChannelError::NoQuorum {
                got: tx.endorsements.len(),
                needed,
            });
        }
        let rules = Rules {
            config: &self.config,
            registry: &self.registry,
        };
        self.pending_state.apply(&rules, &tx)?;
        let id = tx.id;
        self.seen.insert(id);
        self.pending.push(tx);
        if self.pending.len() >= self.config.block_tx_limit {
            self.commit_block()?;
        }
        Ok(id)
    }

    /// Orders the pending batch into a block and applies it on every peer.
    /// Returns `None` when nothing is pending.
    pub fn commit_block(&mut self) -> Result<Option<Committed>, ChannelError> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let txs = std::mem::take(&mut self.pending);
        let block = Block::new(self.height(), self.tip_hash(), txs);
        let committed = Committed {
            height: block.height,
            block_hash: block.block_hash,
            txs: block.txs.clone(),
        };
        self.append(block)?;
        Ok(Some(committed))
    }

    /// Applies an already-ordered block to every peer and records it.
    fn append(&mut self, block: Block) -> Result<(), ChannelError> {
        self.apply_to_peers(&block)?;
        if let Some(store) = &mut self.store {
            store.append(&block)?;
        }
        self.anchors.push(block.block_hash);
        // The pending state already holds every transaction of the block.
        self.blocks.push(block);
        Ok(())
    }

    /// Replays a stored block during recovery.
    fn replay(&mut self, block: Block) -> Result<(), ChannelError> {
        self.apply_to_peers(&block)?;
        self.anchors.push(block.block_hash);
        self.blocks.push(block);
        Ok(())
    }

    fn apply_to_peers(&mut self, block: &Block) -> Result<(), ChannelError> {
        let needed = self.config.quorum();
        for tx in &block.txs {
            let endorsed = tx
                .endorsements
                .iter()
                .filter(|p| self.config.is_member(p))
                .count();
            if endorsed < needed || !tx.id_matches_content() || tx.channel != self.config.id {
                return Err(ChannelError::Divergence {
                    peer: self.peers[0].id.clone(),
                    height: block.height,
                    reason: format!("transaction {} is not admissible", tx.id),
                });
            }
            self.seen.insert(tx.id);
        }
        let rules = Rules {
            config: &self.config,
            registry: &self.registry,
        };
        for peer in &mut self.peers {
            for tx in &block.txs {
                peer.state
                    .apply(&rules, tx)
                    .map_err(|e| ChannelError::Divergence {
                        peer: peer.id.clone(),
                        height: block.height,
                        reason: e.to_string(),
                    })?;
            }
        }
        Ok(())
    }

    /// Verifies the in-memory chain against the commit anchors.
    pub fn verify_chain(&self) -> Result<(), ChainFault> {
        verify_blocks(&self.blocks, &self.anchors)
    }

    /// Verifies the persisted chain, if any, byte for byte.
    pub fn verify_stored(&self) -> Result<(), ChannelError> {
        if let Some(store) = &self.store {
            let stored = store.read()?;
            verify_encoded(&stored.records, &stored.anchors)?;
        }
        Ok(())
    }

    /// Blocks from `height` on, or `None` when `height` is past the tip.
    pub fn blocks_from(&self, height: u64) -> Option<&[Block]> {
        let h = usize::try_from(height).ok()?;
        (h <= self.blocks.len()).then(|| &self.blocks[h..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::HomeId;
    use crate::ledger::config::DeviceKind;
    use crate::ledger::tx::OpenInterval;
    use crate::units::Price;

    fn config() -> ChannelConfig {
        let homes = [HomeId::from("h1"), HomeId::from("h2"), HomeId::from("h3")];
        let mut cfg = ChannelConfig::new("c1", "op", &homes);
        for h in &homes {
            cfg.register(h.clone(), "load", DeviceKind::Load);
        }
        cfg
    }

    fn open(id: u64) -> Payload {
        Payload::OpenInterval(OpenInterval {
            interval: id,
            start_minute: 0,
            length_minutes: 15,
            grid_price: Price(82),
        })
    }

    #[test]
    fn commit_applies_on_all_peers() {
        let mut ch = Channel::new(config()).unwrap();
        assert_eq!(ch.height(), 1);
        ch.submit("op", open(1)).unwrap();
        assert!(ch.state().open.is_none());
        assert_eq!(ch.pending_state().open, Some(1));
        let c = ch.commit_block().unwrap().unwrap();
        assert_eq!(c.height, 1);
        assert_eq!(ch.state().open, Some(1));
        assert!(ch.peers_agree());
        ch.verify_chain().unwrap();
        assert!(ch.commit_block().unwrap().is_none());
    }

    #[test]
    fn duplicates_and_outsiders_rejected() {
        let mut ch = Channel::new(config()).unwrap();
        ch.submit("op", open(1)).unwrap();
        assert!(matches!(
            ch.submit("op", open(1)),
            Err(ChannelError::Duplicate(_))
        ));
        assert!(matches!(
            ch.submit("mallory", open(2)),
            Err(ChannelError::NotMember(..))
        ));
        let foreign = Transaction::new("c2".into(), "op".into(), open(2));
        assert!(matches!(
            ch.submit_tx(foreign),
            Err(ChannelError::WrongChannel { .. })
        ));
    }

    #[test]
    fn quorum_needs_majority() {
        let mut ch = Channel::new(config()).unwrap();
        // Four members, majority three.
        ch.set_faulty(&"h1".into(), true);
        ch.submit("op", open(1)).unwrap();
        ch.commit_block().unwrap();
        ch.set_faulty(&"h2".into(), true);
        assert!(matches!(
            ch.submit("op", Payload::CloseInterval { interval: 1 }),
            Err(ChannelError::NoQuorum { got: 2, needed: 3 })
        ));
    }

    #[test]
    fn block_cut_at_limit() {
        let mut cfg = config();
        cfg.block_tx_limit = 2;
        let mut ch = Channel::new(cfg).unwrap();
        ch.submit("op", open(1)).unwrap();
        ch.submit("op", Payload::CloseInterval { interval: 1 })
            .unwrap();
        assert_eq!(ch.height(), 2);
        assert!(ch.pending().is_empty());
    }

    #[test]
    fn reopen_replays_state() {
        let dir = tempfile::tempdir().unwrap();
        let digest = {
            let mut ch = Channel::open(config(), dir.path()).unwrap();
            ch.submit("op", open(1)).unwrap();
            ch.commit_block().unwrap();
            ch.submit("op", Payload::CloseInterval { interval: 1 })
                .unwrap();
            ch.commit_block().unwrap();
            ch.state().digest()
        };
        let ch = Channel::reopen(dir.path()).unwrap();
        assert_eq!(ch.height(), 3);
        assert_eq!(ch.state().digest(), digest);
        ch.verify_stored().unwrap();
        let mut other = config();
        other.price_cap = Price(5);
        assert!(matches!(
            Channel::open(other, dir.path()),
            Err(ChannelError::ConfigMismatch)
        ));
    }
}
