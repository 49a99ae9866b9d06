//! On-disk chain: `chain.log` holds length-prefixed encoded blocks,
//! `anchors.bin` the 32-byte hash recorded for each committed height, and
//! `channel.json` the channel configuration.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::block::Block;
use super::config::ChannelConfig;
use super::digest::Digest;

pub const CHAIN_FILE: &str = "chain.log";
pub const ANCHOR_FILE: &str = "anchors.bin";
pub const CONFIG_FILE: &str = "channel.json";

#[derive(Debug)]
pub struct ChainStore {
    dir: PathBuf,
    chain: File,
    anchors: File,
}

/// Raw contents of a store, before verification.
#[derive(Debug, Default)]
pub struct StoredChain {
    pub records: Vec<Vec<u8>>,
    pub anchors: Vec<Digest>,
}

impl ChainStore {
    /// Opens or creates a store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> io::Result<ChainStore> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let append = |name: &str| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(name))
        };
        Ok(ChainStore {
            chain: append(CHAIN_FILE)?,
            anchors: append(ANCHOR_FILE)?,
            dir,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn chain_path(&self) -> PathBuf {
        self.dir.join(CHAIN_FILE)
    }

    pub fn anchor_path(&self) -> PathBuf {
        self.dir.join(ANCHOR_FILE)
    }

    pub fn append(&mut self, block: &Block) -> io::Result<()> {
        let bytes = block.encode();
        let len = u32::try_from(bytes.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "block too large"))?;
        let mut record = Vec::with_capacity(4 + bytes.len());
        record.extend_from_slice(&len.to_le_bytes());
        record.extend_from_slice(&bytes);
        self.chain.write_all(&record)?;
        self.chain.flush()?;
        self.anchors.write_all(&block.block_hash.0)?;
        self.anchors.flush()
    }

    pub fn read(&self) -> io::Result<StoredChain> {
        read_dir(&self.dir)
    }

    pub fn load_config(dir: impl AsRef<Path>) -> io::Result<Option<ChannelConfig>> {
        let path = dir.as_ref().join(CONFIG_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn save_config(dir: impl AsRef<Path>, config: &ChannelConfig) -> io::Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        let json = serde_json::to_vec_pretty(config).map_err(io::Error::other)?;
        fs::write(dir.as_ref().join(CONFIG_FILE), json)
    }
}

/// Reads the raw records and anchors of the store in `dir`. A record whose
/// length prefix runs past the end of the file is returned as-is, so that
/// verification reports it as undecodable at its height.
pub fn read_dir(dir: &Path) -> io::Result<StoredChain> {
    let chain = read_or_empty(&dir.join(CHAIN_FILE))?;
    let anchor_bytes = read_or_empty(&dir.join(ANCHOR_FILE))?;
    Ok(StoredChain {
        records: split_records(&chain),
        anchors: split_anchors(&anchor_bytes),
    })
}

fn read_or_empty(path: &Path) -> io::Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

pub fn split_records(mut bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            out.push(bytes.to_vec());
            break;
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[4..];
        if len > rest.len() {
            out.push(rest.to_vec());
            break;
        }
        out.push(rest[..len].to_vec());
        bytes = &rest[len..];
    }
    out
}

/// Splits the anchor file into digests; a trailing partial digest is kept
/// zero-padded so it cannot match any real hash.
pub fn split_anchors(bytes: &[u8]) -> Vec<Digest> {
    bytes
        .chunks(32)
        .map(|c| {
            let mut d = [0u8; 32];
            d[..c.len()].copy_from_slice(c);
            Digest(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ChainStore::open(dir.path()).unwrap();
        let g = Block::genesis();
        let b1 = Block::new(1, g.block_hash, Vec::new());
        store.append(&g).unwrap();
        store.append(&b1).unwrap();
        let stored = store.read().unwrap();
        assert_eq!(stored.records.len(), 2);
        assert_eq!(stored.anchors, vec![g.block_hash, b1.block_hash]);
        assert_eq!(Block::decode(&stored.records[1]).unwrap(), b1);
    }

    #[test]
    fn overlong_prefix_yields_one_record() {
        let mut bytes = 2u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[1, 2]);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.push(7);
        assert_eq!(split_records(&bytes), vec![vec![1, 2], vec![7]]);
    }
}
