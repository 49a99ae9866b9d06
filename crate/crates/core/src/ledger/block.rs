use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::codec;
use super::digest::Digest;
use super::tx::Transaction;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub txs: Vec<Transaction>,
    pub block_hash: Digest,
}

impl Block {
    pub fn genesis() -> Block {
        Block::new(0, Digest::ZERO, Vec::new())
    }

    pub fn new(height: u64, prev_hash: Digest, txs: Vec<Transaction>) -> Block {
        let block_hash = Self::compute_hash(height, &prev_hash, &txs);
        Block {
            height,
            prev_hash,
            txs,
            block_hash,
        }
    }

    pub fn compute_hash(height: u64, prev_hash: &Digest, txs: &[Transaction]) -> Digest {
        Digest::of(&(height, prev_hash, txs))
    }

    pub fn hash_is_valid(&self) -> bool {
        self.block_hash == Self::compute_hash(self.height, &self.prev_hash, &self.txs)
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Block, bincode::Error> {
        codec::decode(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Stored bytes do not decode to a block.
    Undecodable,
    /// Height field does not match the block's position.
    Height,
    /// Stored hash differs from the hash of the contents.
    Hash,
    /// `prev_hash` does not point at the previous block.
    Link,
    /// Contents are self-consistent but differ from the hash recorded at
    /// commit time (a rewritten suffix).
    Anchor,
    /// Chain is shorter or longer than the commit record.
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("chain fault at height {height}: {kind:?}")]
pub struct ChainFault {
    pub height: u64,
    pub kind: FaultKind,
}

/// Checks hashes, heights and links of `blocks`, then compares every block
/// hash with the digest recorded when it was committed. Reports the lowest
/// height at which anything disagrees.
pub fn verify_blocks(blocks: &[Block], anchors: &[Digest]) -> Result<(), ChainFault> {
    verify_prefix(blocks, anchors)?;
    if anchors.len() != blocks.len() {
        return Err(ChainFault {
            height: blocks.len().min(anchors.len()) as u64,
            kind: FaultKind::Length,
        });
    }
    Ok(())
}

fn verify_prefix(blocks: &[Block], anchors: &[Digest]) -> Result<(), ChainFault> {
    let fault = |height: usize, kind| ChainFault {
        height: height as u64,
        kind,
    };
    for (i, block) in blocks.iter().enumerate() {
        if block.height != i as u64 {
            return Err(fault(i, FaultKind::Height));
        }
        if !block.hash_is_valid() {
            return Err(fault(i, FaultKind::Hash));
        }
        let expected_prev = if i == 0 {
            Digest::ZERO
        } else {
            blocks[i - 1].block_hash
        };
        if block.prev_hash != expected_prev {
            return Err(fault(i, FaultKind::Link));
        }
        match anchors.get(i) {
            Some(anchor) if *anchor == block.block_hash => {}
            Some(_) => return Err(fault(i, FaultKind::Anchor)),
            None => return Err(fault(i, FaultKind::Length)),
        }
    }
    Ok(())
}

/// Like [`verify_blocks`] over encoded records, treating undecodable bytes
/// as a fault at that height.
pub fn verify_encoded(records: &[Vec<u8>], anchors: &[Digest]) -> Result<Vec<Block>, ChainFault> {
    let mut blocks = Vec::with_capacity(records.len());
    for (i, bytes) in records.iter().enumerate() {
        match Block::decode(bytes) {
            Ok(b) => blocks.push(b),
            Err(_) => {
                verify_prefix(&blocks, anchors)?;
                return Err(ChainFault {
                    height: i as u64,
                    kind: FaultKind::Undecodable,
                });
            }
        }
    }
    verify_blocks(&blocks, anchors)?;
    Ok(blocks)
}
