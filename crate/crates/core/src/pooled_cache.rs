//! Cache of fully pooled vectors keyed by the whole index sequence.
//!
//! The key is order-invariant but multiplicity-sensitive: every index is
//! salted with its table, pushed through a 64-bit avalanche mix, and the
//! mixed values are combined by wrapping addition. The sequence length is
//! folded into the hash and kept alongside it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use parking_lot::{Mutex, RwLock};

use crate::embedding::PooledVector;
use crate::lru::LruMap;

/// Fixed per-entry overhead charged on top of the vector payload.
pub const POOLED_META_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PooledKey {
    pub table_id: u32,
    pub seq_hash: u64,
    pub seq_len: u32,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sequence_key(table_id: u32, indices: &[u64]) -> PooledKey {
    let salt = mix64(0x7ab1_e5a1_7000_0000 ^ table_id as u64);
    let sum = indices
        .iter()
        .fold(0u64, |acc, &i| acc.wrapping_add(mix64(mix64(i) ^ salt)));
    let len = indices.len() as u64;
    PooledKey {
        table_id,
        seq_hash: mix64(sum ^ mix64(len ^ mix64(salt))),
        seq_len: indices.len() as u32,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledConfig {
    pub capacity_bytes: usize,
    /// Sequences must be strictly longer than this to be cached.
    pub len_threshold: usize,
    pub partitions: usize,
}

impl Default for PooledConfig {
    fn default() -> Self {
        Self {
            capacity_bytes: 16 << 20,
            len_threshold: 1,
            partitions: 16,
        }
    }
}

impl PooledConfig {
    pub fn entry_charge(elem_count: usize) -> usize {
        elem_count * 4 + POOLED_META_BYTES
    }

    pub fn eligible(&self, seq_len: usize) -> bool {
        seq_len > self.len_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreOutcome {
    Stored,
    BelowThreshold,
    TooLarge,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PooledStats {
    pub probes: u64,
    pub hits: u64,
    pub stores: u64,
    pub refused: u64,
    pub evictions: u64,
    pub bytes_resident: usize,
    pub entries: usize,
    /// Distinct multisets observed sharing a key (audit mode only).
    pub collisions: u64,
}

impl PooledStats {
    pub fn hit_rate(&self) -> f64 {
        if self.probes == 0 {
            0.0
        } else {
            self.hits as f64 / self.probes as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Resident {
    key: PooledKey,
    generation: u32,
}

#[derive(Debug, Clone)]
struct Entry {
    pooled: PooledVector,
    source_len: u32,
}

#[derive(Debug)]
pub struct PooledCache {
    config: PooledConfig,
    partitions: Vec<Mutex<LruMap<Resident, Entry>>>,
    generations: RwLock<HashMap<u32, u32>>,
    probes: AtomicU64,
    hits: AtomicU64,
    stores: AtomicU64,
    refused: AtomicU64,
    evictions: AtomicU64,
    audit: Option<Mutex<HashMap<PooledKey, Vec<u64>>>>,
    collisions: AtomicU64,
}

impl PooledCache {
    pub fn new(config: PooledConfig) -> Self {
        let parts = config.partitions.max(1);
        let partitions = (0..parts)
            .map(|_| Mutex::new(LruMap::new(config.capacity_bytes / parts)))
            .collect();
        Self {
            config,
            partitions,
            generations: RwLock::new(HashMap::new()),
            probes: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            stores: AtomicU64::new(0),
            refused: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            audit: None,
            collisions: AtomicU64::new(0),
        }
    }

    /// Keeps the sorted source sequence of every stored key and counts
    /// distinct multisets that hash to the same key.
    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Mutex::new(HashMap::new()));
        self
    }

    pub fn config(&self) -> &PooledConfig {
        &self.config
    }

    fn resident(&self, key: PooledKey) -> Resident {
        let generation = self
            .generations
            .read()
            .get(&key.table_id)
            .copied()
            .unwrap_or(0);
        Resident { key, generation }
    }

    fn partition(&self, key: &PooledKey) -> &Mutex<LruMap<Resident, Entry>> {
        &self.partitions[(key.seq_hash % self.partitions.len() as u64) as usize]
    }

    pub fn lookup(&self, key: &PooledKey) -> Option<PooledVector> {
        self.probes.fetch_add(1, Relaxed);
        let res = self.resident(*key);
        let found = self
            .partition(key)
            .lock()
            .get(&res)
            .map(|e| e.pooled.clone());
        if found.is_some() {
            self.hits.fetch_add(1, Relaxed);
        }
        found
    }

    pub fn store(&self, key: PooledKey, pooled: PooledVector) -> StoreOutcome {
        if !self.config.eligible(key.seq_len as usize) {
            self.refused.fetch_add(1, Relaxed);
            return StoreOutcome::BelowThreshold;
        }
        let charge = PooledConfig::entry_charge(pooled.len());
        let entry = Entry {
            pooled,
            source_len: key.seq_len,
        };
        debug_assert!(entry.source_len as usize > self.config.len_threshold);
        let res = self.resident(key);
        match self.partition(&key).lock().insert(res, entry, charge) {
            Ok(evicted) => {
                self.stores.fetch_add(1, Relaxed);
                self.evictions.fetch_add(evicted.len() as u64, Relaxed);
                StoreOutcome::Stored
            }
            Err(_) => {
                self.refused.fetch_add(1, Relaxed);
                StoreOutcome::TooLarge
            }
        }
    }

    /// Records the source sequence for `key` when auditing is enabled.
    pub fn audit_sequence(&self, key: &PooledKey, indices: &[u64]) {
        if let Some(audit) = &self.audit {
            let mut sorted = indices.to_vec();
            sorted.sort_unstable();
            let mut map = audit.lock();
            match map.get(key) {
                Some(prev) if *prev != sorted => {
                    self.collisions.fetch_add(1, Relaxed);
                }
                Some(_) => {}
                None => {
                    map.insert(*key, sorted);
                }
            }
        }
    }

    /// Makes every entry of the table unreachable; LRU reclaims the space.
    pub fn invalidate_table(&self, table_id: u32) {
        let mut g = self.generations.write();
        let e = g.entry(table_id).or_insert(0);
        *e = e.wrapping_add(1);
    }

    pub fn clear(&self) {
        for p in &self.partitions {
            p.lock().clear();
        }
    }

    pub fn reset_stats(&self) {
        for c in [
            &self.probes,
            &self.hits,
            &self.stores,
            &self.refused,
            &self.evictions,
        ] {
            c.store(0, Relaxed);
        }
    }

    pub fn stats(&self) -> PooledStats {
        let (mut bytes, mut entries) = (0, 0);
        for p in &self.partitions {
            let p = p.lock();
            bytes += p.charged();
            entries += p.len();
        }
        PooledStats {
            probes: self.probes.load(Relaxed),
            hits: self.hits.load(Relaxed),
            stores: self.stores.load(Relaxed),
            refused: self.refused.load(Relaxed),
            evictions: self.evictions.load(Relaxed),
            bytes_resident: bytes,
            entries,
            collisions: self.collisions.load(Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn v(x: f32) -> PooledVector {
        PooledVector { values: vec![x; 4] }
    }

    #[test]
    fn permutation_invariant() {
        assert_eq!(sequence_key(3, &[1, 2, 3]), sequence_key(3, &[3, 1, 2]));
    }

    #[test]
    fn multiplicity_and_length_matter() {
        let a = sequence_key(0, &[1, 1, 2]);
        assert_ne!(a, sequence_key(0, &[1, 2]));
        assert_ne!(a, sequence_key(0, &[1, 2, 2]));
    }

    #[test]
    fn small_multisets_do_not_collide() {
        // every multiset of size 1..=3 over 0..64, for two table salts
        let mut seen = HashSet::new();
        let mut count = 0usize;
        for table in [7u32, 8] {
            for a in 0..64u64 {
                let mut push = |s: &[u64]| {
                    count += 1;
                    assert!(
                        seen.insert(sequence_key(table, s).seq_hash),
                        "collision {s:?}"
                    );
                };
                push(&[a]);
                for b in a..64 {
                    push(&[a, b]);
                    for c in b..64 {
                        push(&[a, b, c]);
                    }
                }
            }
        }
        assert_eq!(count, 2 * (64 + 2080 + 45760));
    }

    #[test]
    fn lookup_before_store_misses() {
        let c = PooledCache::new(PooledConfig::default());
        assert_eq!(c.lookup(&sequence_key(0, &[1, 2])), None);
        assert_eq!(c.stats().probes, 1);
    }

    #[test]
    fn store_then_lookup_is_exact() {
        let c = PooledCache::new(PooledConfig::default());
        let k = sequence_key(0, &[4, 5, 6]);
        let p = PooledVector {
            values: vec![-0.0, 1.5, f32::MIN_POSITIVE, 3.25],
        };
        assert_eq!(c.store(k, p.clone()), StoreOutcome::Stored);
        assert!(c.lookup(&k).unwrap().bit_eq(&p));
    }

    #[test]
    fn threshold_is_strict() {
        let c = PooledCache::new(PooledConfig {
            len_threshold: 8,
            ..PooledConfig::default()
        });
        let eight: Vec<u64> = (0..8).collect();
        let nine: Vec<u64> = (0..9).collect();
        assert_eq!(
            c.store(sequence_key(0, &eight), v(1.0)),
            StoreOutcome::BelowThreshold
        );
        assert_eq!(
            c.store(sequence_key(0, &nine), v(1.0)),
            StoreOutcome::Stored
        );
        assert_eq!(c.stats().entries, 1);
    }

    #[test]
    fn single_entry_capacity_evicts() {
        let c = PooledCache::new(PooledConfig {
            capacity_bytes: PooledConfig::entry_charge(4),
            len_threshold: 1,
            partitions: 1,
        });
        let k1 = sequence_key(0, &[1, 2]);
        let k2 = sequence_key(0, &[3, 4]);
        c.store(k1, v(1.0));
        c.store(k2, v(2.0));
        assert_eq!(c.lookup(&k1), None);
        assert_eq!(c.lookup(&k2), Some(v(2.0)));
    }

    #[test]
    fn table_invalidation_is_wholesale() {
        let c = PooledCache::new(PooledConfig::default());
        let a = sequence_key(1, &[1, 2]);
        let b = sequence_key(2, &[1, 2]);
        c.store(a, v(1.0));
        c.store(b, v(2.0));
        c.invalidate_table(1);
        assert_eq!(c.lookup(&a), None);
        assert_eq!(c.lookup(&b), Some(v(2.0)));
    }

    #[test]
    fn audit_counts_distinct_multisets_only() {
        let c = PooledCache::new(PooledConfig::default()).with_audit();
        let k = sequence_key(0, &[1, 2, 3]);
        c.audit_sequence(&k, &[3, 2, 1]);
        c.audit_sequence(&k, &[1, 2, 3]);
        assert_eq!(c.stats().collisions, 0);
        c.audit_sequence(&k, &[9, 9, 9]);
        assert_eq!(c.stats().collisions, 1);
    }

    proptest! {
        #[test]
        fn key_is_permutation_invariant(
            mut s in prop::collection::vec(0u64..1_000_000, 1..64),
            seed in any::<u64>(),
            table in 0u32..1000,
        ) {
            let k = sequence_key(table, &s);
            // Fisher-Yates with a tiny LCG so the permutation depends on `seed`
            let mut x = seed | 1;
            for i in (1..s.len()).rev() {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                s.swap(i, (x >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(sequence_key(table, &s), k);
        }

        #[test]
        fn nothing_below_threshold_is_resident(lens in prop::collection::vec(1usize..12, 1..100)) {
            let c = PooledCache::new(PooledConfig { len_threshold: 5, ..PooledConfig::default() });
            for (i, n) in lens.iter().enumerate() {
                let seq: Vec<u64> = (0..*n as u64).map(|j| j + 100 * i as u64).collect();
                let out = c.store(sequence_key(0, &seq), v(1.0));
                prop_assert_eq!(out == StoreOutcome::Stored, *n > 5);
            }
        }
    }
}
