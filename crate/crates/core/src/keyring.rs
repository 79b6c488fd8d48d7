//! Merkle-authenticated store of smart-meter initialization keys.
//!
//! The control enclave keeps only the tree root (and the fixed leaf count).
//! Leaves and interior nodes live in [`KeyringStorage`], which is untrusted:
//! every read is checked against the root and every status change moves the
//! root forward, so a stale leaf can never be replayed.
//!
//! Tree format:
//! * leaf  = H(0x00 ‖ meter_id (u64 BE) ‖ status (u8) ‖ H(init_key))
//! * inner = H(0x01 ‖ left ‖ right)
//! * an odd node at the end of a level is paired with itself
//! * the root of an empty tree is 32 zero bytes
//! * H is SHA-256

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::crypto::{self, CipherEnvelope, SymKey};
use crate::enclave::{Enclave, SealedRecord};

pub type Digest = [u8; 32];

pub const EMPTY_ROOT: Digest = [0u8; 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyStatus {
    Active,
    Void,
}

impl KeyStatus {
    fn byte(self) -> u8 {
        match self {
            KeyStatus::Active => 0,
            KeyStatus::Void => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(KeyStatus::Active),
            1 => Some(KeyStatus::Void),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyringError {
    #[error("meter {0} is listed more than once")]
    DuplicateMeter(u64),
    #[error("meter {0} has no initialization key")]
    NotFound(u64),
    #[error("initialization key of meter {0} was already used")]
    AlreadyVoid(u64),
    #[error("keyring storage failed verification against the root")]
    IntegrityViolation,
}

pub fn leaf_hash(meter_id: u64, status: KeyStatus, init_key: &SymKey) -> Digest {
    let mut buf = Vec::with_capacity(1 + 8 + 1 + 32);
    buf.push(0x00);
    buf.extend_from_slice(&meter_id.to_be_bytes());
    buf.push(status.byte());
    buf.extend_from_slice(&crypto::sha256(init_key.as_bytes()));
    crypto::sha256(&buf)
}

pub fn inner_hash(left: &Digest, right: &Digest) -> Digest {
    let mut buf = [0u8; 65];
    buf[0] = 0x01;
    buf[1..33].copy_from_slice(left);
    buf[33..].copy_from_slice(right);
    crypto::sha256(&buf)
}

/// Audit path from a leaf to the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleProof {
    pub index: usize,
    pub leaf_count: usize,
    pub siblings: Vec<Digest>,
}

fn level_widths(leaf_count: usize) -> Vec<usize> {
    let mut widths = Vec::new();
    let mut w = leaf_count;
    while w > 1 {
        widths.push(w);
        w = w.div_ceil(2);
    }
    widths
}

/// Recomputes the root implied by `leaf` and `proof`, or `None` if the
/// proof is structurally inconsistent with its claimed position.
fn root_from_path(leaf: &Digest, proof: &MerkleProof) -> Option<Digest> {
    if proof.leaf_count == 0 || proof.index >= proof.leaf_count {
        return None;
    }
    let widths = level_widths(proof.leaf_count);
    if widths.len() != proof.siblings.len() {
        return None;
    }
    let mut node = *leaf;
    let mut idx = proof.index;
    for (width, sibling) in widths.iter().zip(&proof.siblings) {
        let duplicated = idx.is_multiple_of(2) && idx + 1 == *width;
        node = if duplicated {
            if sibling != &node {
                return None;
            }
            inner_hash(&node, &node)
        } else if idx.is_multiple_of(2) {
            inner_hash(&node, sibling)
        } else {
            inner_hash(sibling, &node)
        };
        idx /= 2;
    }
    Some(node)
}

/// Standard audit-path check.
pub fn verify_leaf_proof(root: &Digest, leaf: &Digest, proof: &MerkleProof) -> bool {
    root_from_path(leaf, proof).is_some_and(|r| &r == root)
}

/// Recomputes a root from scratch. Used at build time and by tests.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    build_levels(leaves).last().and_then(|top| top.first().copied()).unwrap_or(EMPTY_ROOT)
}

fn build_levels(leaves: &[Digest]) -> Vec<Vec<Digest>> {
    if leaves.is_empty() {
        return Vec::new();
    }
    let mut levels = vec![leaves.to_vec()];
    while levels.last().unwrap().len() > 1 {
        let prev = levels.last().unwrap();
        let next = prev
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => inner_hash(l, r),
                [l] => inner_hash(l, l),
                _ => unreachable!(),
            })
            .collect();
        levels.push(next);
    }
    levels
}

/// Leaf record as kept in untrusted storage:
/// `meter_id (u64 BE) ‖ status (u8) ‖ sealed init key envelope`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafRecord {
    pub meter_id: u64,
    pub status: KeyStatus,
    pub sealed_key: CipherEnvelope,
}

fn key_label(meter_id: u64) -> String {
    format!("keyring/{meter_id}")
}

impl LeafRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.meter_id.to_be_bytes().to_vec();
        out.push(self.status.byte());
        out.extend_from_slice(&self.sealed_key.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 9 {
            return None;
        }
        let meter_id = u64::from_be_bytes(bytes[..8].try_into().ok()?);
        let status = KeyStatus::from_byte(bytes[8])?;
        let sealed_key = CipherEnvelope::decode(&bytes[9..], key_label(meter_id).as_bytes()).ok()?;
        Some(LeafRecord { meter_id, status, sealed_key })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyringSnapshot {
    leaves: Vec<Vec<u8>>,
    levels: Vec<Vec<Digest>>,
    index: BTreeMap<u64, usize>,
}

/// Untrusted leaf and node storage. Cloning shares the same storage.
#[derive(Clone, Debug, Default)]
pub struct KeyringStorage {
    inner: Arc<Mutex<KeyringSnapshot>>,
}

impl KeyringStorage {
    fn lookup(&self, meter_id: u64) -> Option<(Vec<u8>, MerkleProof)> {
        let data = self.inner.lock().unwrap();
        let index = *data.index.get(&meter_id)?;
        let leaf = data.leaves.get(index)?.clone();
        let leaf_count = data.leaves.len();
        let mut siblings = Vec::new();
        let mut idx = index;
        for level in data.levels.iter().take(data.levels.len().saturating_sub(1)) {
            let sib = idx ^ 1;
            siblings.push(*level.get(sib).or_else(|| level.get(idx))?);
            idx /= 2;
        }
        Some((leaf, MerkleProof { index, leaf_count, siblings }))
    }

    fn write_path(&self, index: usize, leaf_bytes: Vec<u8>, path: &[Digest]) {
        let mut data = self.inner.lock().unwrap();
        data.leaves[index] = leaf_bytes;
        let mut idx = index;
        for (level, node) in path.iter().enumerate() {
            data.levels[level][idx] = *node;
            idx /= 2;
        }
    }

    pub fn snapshot(&self) -> KeyringSnapshot {
        self.inner.lock().unwrap().clone()
    }

    /// Adversary hook: replace everything with an earlier snapshot.
    pub fn restore(&self, snapshot: KeyringSnapshot) {
        *self.inner.lock().unwrap() = snapshot;
    }

    /// Adversary hook: serve arbitrary bytes for one leaf slot.
    pub fn set_leaf_raw(&self, index: usize, bytes: Vec<u8>) {
        self.inner.lock().unwrap().leaves[index] = bytes;
    }

    /// Adversary hook: overwrite one node hash.
    pub fn set_node(&self, level: usize, index: usize, node: Digest) {
        self.inner.lock().unwrap().levels[level][index] = node;
    }

    pub fn wipe(&self) {
        *self.inner.lock().unwrap() = KeyringSnapshot::default();
    }

    pub fn leaf_count(&self) -> usize {
        self.inner.lock().unwrap().leaves.len()
    }
}

/// Trusted half of the keyring, held inside the control enclave.
#[derive(Debug)]
pub struct MerkleKeyStore {
    root: Digest,
    leaf_count: usize,
    storage: KeyringStorage,
}

impl MerkleKeyStore {
    /// Seals every init key to `enclave`, writes leaves to fresh untrusted
    /// storage and keeps the root.
    pub fn build(enclave: &mut Enclave, records: &[(u64, SymKey)]) -> Result<Self, KeyringError> {
        let mut seen = HashSet::new();
        for (id, _) in records {
            if !seen.insert(*id) {
                return Err(KeyringError::DuplicateMeter(*id));
            }
        }
        let mut leaves = Vec::with_capacity(records.len());
        let mut hashes = Vec::with_capacity(records.len());
        let mut index = BTreeMap::new();
        for (i, (id, key)) in records.iter().enumerate() {
            let sealed = enclave
                .seal(&key_label(*id), key.as_bytes())
                .map_err(|_| KeyringError::IntegrityViolation)?;
            let record = LeafRecord { meter_id: *id, status: KeyStatus::Active, sealed_key: sealed.envelope };
            leaves.push(record.encode());
            hashes.push(leaf_hash(*id, KeyStatus::Active, key));
            index.insert(*id, i);
        }
        let levels = build_levels(&hashes);
        let root = merkle_root(&hashes);
        let storage = KeyringStorage { inner: Arc::new(Mutex::new(KeyringSnapshot { leaves, levels, index })) };
        Ok(MerkleKeyStore { root, leaf_count: records.len(), storage })
    }

    pub fn root(&self) -> Digest {
        self.root
    }

    pub fn storage(&self) -> KeyringStorage {
        self.storage.clone()
    }

    /// Returns the init key iff its leaf verifies and is still active, then
    /// marks it void and advances the root.
    pub fn get_and_void(&mut self, enclave: &Enclave, meter_id: u64) -> Result<SymKey, KeyringError> {
        let Some((leaf_bytes, proof)) = self.storage.lookup(meter_id) else {
            if self.storage.leaf_count() != self.leaf_count {
                return Err(KeyringError::IntegrityViolation);
            }
            return Err(KeyringError::NotFound(meter_id));
        };
        if proof.leaf_count != self.leaf_count {
            return Err(KeyringError::IntegrityViolation);
        }
        let record = LeafRecord::decode(&leaf_bytes).ok_or(KeyringError::IntegrityViolation)?;
        if record.meter_id != meter_id {
            return Err(KeyringError::IntegrityViolation);
        }
        let sealed = SealedRecord { label: key_label(meter_id), envelope: record.sealed_key.clone() };
        let key_bytes = enclave.unseal(&sealed).map_err(|_| KeyringError::IntegrityViolation)?;
        let key = SymKey::from_slice(&key_bytes).map_err(|_| KeyringError::IntegrityViolation)?;

        let leaf = leaf_hash(meter_id, record.status, &key);
        if !verify_leaf_proof(&self.root, &leaf, &proof) {
            return Err(KeyringError::IntegrityViolation);
        }
        if record.status == KeyStatus::Void {
            return Err(KeyringError::AlreadyVoid(meter_id));
        }

        let void_leaf = leaf_hash(meter_id, KeyStatus::Void, &key);
        let path = path_nodes(&void_leaf, &proof);
        let new_root = *path.last().unwrap_or(&void_leaf);
        let void_record = LeafRecord { status: KeyStatus::Void, ..record };
        self.storage.write_path(proof.index, void_record.encode(), &path);
        self.root = new_root;
        Ok(key)
    }
}

/// Node values from the (new) leaf up to and including the root.
fn path_nodes(leaf: &Digest, proof: &MerkleProof) -> Vec<Digest> {
    let widths = level_widths(proof.leaf_count);
    let mut nodes = vec![*leaf];
    let mut node = *leaf;
    let mut idx = proof.index;
    for (width, sibling) in widths.iter().zip(&proof.siblings) {
        node = if idx.is_multiple_of(2) && idx + 1 == *width {
            inner_hash(&node, &node)
        } else if idx.is_multiple_of(2) {
            inner_hash(&node, sibling)
        } else {
            inner_hash(sibling, &node)
        };
        nodes.push(node);
        idx /= 2;
    }
    nodes
}
