//! Unified fast-memory row cache.
//!
//! One cache serves every table. Rows are routed by their table's row size:
//! rows up to the threshold (255 B by default) go to a memory-optimized
//! sub-cache of fixed-size slots with compact metadata, larger rows to a
//! CPU-optimized sub-cache of exact-fit allocations with richer metadata.
//! Both sub-caches are split into hash partitions, each behind its own lock
//! and evicting in strict LRU order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};

use parking_lot::{Mutex, RwLock};

use crate::lru::LruMap;

/// Per-entry metadata charged by the memory-optimized sub-cache.
pub const MEM_OPT_META_BYTES: usize = 8;
/// Per-entry metadata charged by the CPU-optimized sub-cache.
pub const CPU_OPT_META_BYTES: usize = 48;
pub const DEFAULT_ROUTE_THRESHOLD: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub table_id: u32,
    pub row_id: u64,
}

impl CacheKey {
    pub fn new(table_id: u32, row_id: u64) -> Self {
        Self { table_id, row_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubCache {
    MemoryOptimized,
    CpuOptimized,
}

/// Routing rule: rows no larger than the threshold are memory-optimized.
pub fn route(row_bytes: usize, threshold: usize) -> SubCache {
    if row_bytes <= threshold {
        SubCache::MemoryOptimized
    } else {
        SubCache::CpuOptimized
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    pub mem_opt_capacity_bytes: usize,
    pub cpu_opt_capacity_bytes: usize,
    pub partitions: usize,
    pub dim_route_threshold_bytes: usize,
    pub per_table_enabled: HashMap<u32, bool>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            mem_opt_capacity_bytes: 64 << 20,
            cpu_opt_capacity_bytes: 64 << 20,
            partitions: 16,
            dim_route_threshold_bytes: DEFAULT_ROUTE_THRESHOLD,
            per_table_enabled: HashMap::new(),
        }
    }
}

impl CacheConfig {
    pub fn with_capacity(mem_opt: usize, cpu_opt: usize, partitions: usize) -> Self {
        Self {
            mem_opt_capacity_bytes: mem_opt,
            cpu_opt_capacity_bytes: cpu_opt,
            partitions,
            ..Self::default()
        }
    }

    /// Bytes one resident row of `row_bytes` is charged in its sub-cache.
    pub fn entry_charge(&self, row_bytes: usize) -> usize {
        match route(row_bytes, self.dim_route_threshold_bytes) {
            SubCache::MemoryOptimized => self.dim_route_threshold_bytes + MEM_OPT_META_BYTES,
            SubCache::CpuOptimized => row_bytes + CPU_OPT_META_BYTES,
        }
    }

    /// Rows of `row_bytes` that fit in one partition of the matching
    /// sub-cache, times the partition count.
    pub fn rows_capacity(&self, row_bytes: usize) -> usize {
        let cap = match route(row_bytes, self.dim_route_threshold_bytes) {
            SubCache::MemoryOptimized => self.mem_opt_capacity_bytes,
            SubCache::CpuOptimized => self.cpu_opt_capacity_bytes,
        };
        let parts = self.partitions.max(1);
        (cap / parts / self.entry_charge(row_bytes)) * parts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Row larger than a partition of its sub-cache.
    Refused,
    /// Table disabled.
    Bypassed,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubCacheStats {
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub evictions: u64,
    pub bytes_resident: usize,
    pub capacity_bytes: usize,
    pub entries: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub evictions: u64,
    pub refused: u64,
    pub bypassed: u64,
    pub bytes_resident: usize,
    pub mem_opt: SubCacheStats,
    pub cpu_opt: SubCacheStats,
    /// `(table_id, hits, misses)`, sorted by table.
    pub per_table: Vec<(u32, u64, u64)>,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups() == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups() as f64
        }
    }

    pub fn table_hit_rate(&self, table_id: u32) -> Option<f64> {
        self.per_table
            .iter()
            .find(|(t, ..)| *t == table_id)
            .map(|&(_, h, m)| {
                if h + m == 0 {
                    0.0
                } else {
                    h as f64 / (h + m) as f64
                }
            })
    }
}

#[derive(Debug, Clone, Copy)]
struct TableState {
    row_bytes: usize,
    enabled: bool,
    generation: u32,
}

/// Resident key: the table generation makes entries of a disabled or
/// invalidated table unreachable until LRU reclaims them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Resident {
    table_id: u32,
    generation: u32,
    row_id: u64,
}

/// Fixed-size slots in one contiguous arena.
#[derive(Debug)]
struct SlotArena {
    lru: LruMap<Resident, u32>,
    arena: Vec<u8>,
    lens: Vec<u16>,
    free: Vec<u32>,
    slot_bytes: usize,
}

impl SlotArena {
    fn new(capacity: usize, slot_bytes: usize) -> Self {
        Self {
            lru: LruMap::new(capacity),
            arena: Vec::new(),
            lens: Vec::new(),
            free: Vec::new(),
            slot_bytes,
        }
    }

    fn get(&mut self, key: &Resident) -> Option<Vec<u8>> {
        let slot = *self.lru.get(key)? as usize;
        let start = slot * self.slot_bytes;
        Some(self.arena[start..start + self.lens[slot] as usize].to_vec())
    }

    fn insert(&mut self, key: Resident, row: &[u8]) -> Result<usize, ()> {
        let charge = self.slot_bytes + MEM_OPT_META_BYTES;
        if charge > self.lru.capacity() || row.len() > self.slot_bytes {
            return Err(());
        }
        if let Some((_, slot)) = self.lru.remove(&key) {
            self.free.push(slot);
        }
        let mut evicted = 0;
        while self.lru.charged() + charge > self.lru.capacity() {
            let (_, slot) = self.lru.pop_lru().expect("over budget implies entries");
            self.free.push(slot);
            evicted += 1;
        }
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                self.arena.resize(self.arena.len() + self.slot_bytes, 0);
                self.lens.push(0);
                (self.lens.len() - 1) as u32
            }
        };
        let start = slot as usize * self.slot_bytes;
        self.arena[start..start + row.len()].copy_from_slice(row);
        self.lens[slot as usize] = row.len() as u16;
        let ev = self.lru.insert(key, slot, charge).map_err(|_| ())?;
        debug_assert!(ev.is_empty());
        Ok(evicted)
    }

    fn remove(&mut self, key: &Resident) {
        if let Some((_, slot)) = self.lru.remove(key) {
            self.free.push(slot);
        }
    }
}

#[derive(Debug)]
struct Partition {
    mem: SlotArena,
    cpu: LruMap<Resident, Box<[u8]>>,
}

#[derive(Debug, Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    insertions: AtomicU64,
    evictions: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> (u64, u64, u64, u64) {
        (
            self.hits.load(Relaxed),
            self.misses.load(Relaxed),
            self.insertions.load(Relaxed),
            self.evictions.load(Relaxed),
        )
    }

    fn reset(&self) {
        self.hits.store(0, Relaxed);
        self.misses.store(0, Relaxed);
        self.insertions.store(0, Relaxed);
        self.evictions.store(0, Relaxed);
    }
}

#[derive(Debug)]
pub struct RowCache {
    config: CacheConfig,
    tables: RwLock<HashMap<u32, TableState>>,
    partitions: Vec<Mutex<Partition>>,
    mem_counters: Counters,
    cpu_counters: Counters,
    refused: AtomicU64,
    bypassed: AtomicU64,
    unrouted_misses: AtomicU64,
    per_table: Mutex<HashMap<u32, (u64, u64)>>,
}

fn partition_hash(table_id: u32, row_id: u64) -> u64 {
    let mut z = row_id ^ ((table_id as u64) << 40) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RowCache {
    pub fn new(config: CacheConfig) -> Self {
        let parts = config.partitions.max(1);
        let threshold = config.dim_route_threshold_bytes.max(1);
        let partitions = (0..parts)
            .map(|_| {
                Mutex::new(Partition {
                    mem: SlotArena::new(config.mem_opt_capacity_bytes / parts, threshold),
                    cpu: LruMap::new(config.cpu_opt_capacity_bytes / parts),
                })
            })
            .collect();
        let tables = config
            .per_table_enabled
            .iter()
            .map(|(&t, &enabled)| {
                (
                    t,
                    TableState {
                        row_bytes: 0,
                        enabled,
                        generation: 0,
                    },
                )
            })
            .collect();
        Self {
            config,
            tables: RwLock::new(tables),
            partitions,
            mem_counters: Counters::default(),
            cpu_counters: Counters::default(),
            refused: AtomicU64::new(0),
            bypassed: AtomicU64::new(0),
            unrouted_misses: AtomicU64::new(0),
            per_table: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Declares a table's row size, which fixes its sub-cache.
    pub fn register_table(&self, table_id: u32, row_bytes: usize) {
        let mut tables = self.tables.write();
        let st = tables.entry(table_id).or_insert(TableState {
            row_bytes,
            enabled: true,
            generation: 0,
        });
        if st.row_bytes != row_bytes {
            st.row_bytes = row_bytes;
            st.generation = st.generation.wrapping_add(1);
        }
    }

    pub fn route_table(&self, table_id: u32) -> Option<SubCache> {
        self.tables
            .read()
            .get(&table_id)
            .filter(|s| s.row_bytes > 0)
            .map(|s| route(s.row_bytes, self.config.dim_route_threshold_bytes))
    }

    pub fn set_table_enabled(&self, table_id: u32, enabled: bool) {
        let mut tables = self.tables.write();
        let st = tables.entry(table_id).or_insert(TableState {
            row_bytes: 0,
            enabled: true,
            generation: 0,
        });
        if enabled && !st.enabled {
            st.generation = st.generation.wrapping_add(1);
        }
        st.enabled = enabled;
    }

    pub fn is_table_enabled(&self, table_id: u32) -> bool {
        self.tables.read().get(&table_id).is_none_or(|s| s.enabled)
    }

    /// Drops every resident row of a table (lazily).
    pub fn invalidate_table(&self, table_id: u32) {
        if let Some(st) = self.tables.write().get_mut(&table_id) {
            st.generation = st.generation.wrapping_add(1);
        }
    }

    fn resolve(&self, key: &CacheKey) -> Option<(Resident, SubCache)> {
        let tables = self.tables.read();
        let st = tables.get(&key.table_id)?;
        if !st.enabled || st.row_bytes == 0 {
            return None;
        }
        Some((
            Resident {
                table_id: key.table_id,
                generation: st.generation,
                row_id: key.row_id,
            },
            route(st.row_bytes, self.config.dim_route_threshold_bytes),
        ))
    }

    fn partition(&self, key: &CacheKey) -> &Mutex<Partition> {
        let i = partition_hash(key.table_id, key.row_id) % self.partitions.len() as u64;
        &self.partitions[i as usize]
    }

    fn counters(&self, sub: SubCache) -> &Counters {
        match sub {
            SubCache::MemoryOptimized => &self.mem_counters,
            SubCache::CpuOptimized => &self.cpu_counters,
        }
    }

    pub fn get(&self, key: &CacheKey) -> Option<Vec<u8>> {
        let Some((res, sub)) = self.resolve(key) else {
            if !self.is_table_enabled(key.table_id) {
                self.bypassed.fetch_add(1, Relaxed);
            } else {
                self.note_lookup(key.table_id, false);
                self.unrouted_misses.fetch_add(1, Relaxed);
            }
            return None;
        };
        let found = {
            let mut p = self.partition(key).lock();
            match sub {
                SubCache::MemoryOptimized => p.mem.get(&res),
                SubCache::CpuOptimized => p.cpu.get(&res).map(|b| b.to_vec()),
            }
        };
        let c = self.counters(sub);
        if found.is_some() {
            c.hits.fetch_add(1, Relaxed);
        } else {
            c.misses.fetch_add(1, Relaxed);
        }
        self.note_lookup(key.table_id, found.is_some());
        found
    }

    fn note_lookup(&self, table_id: u32, hit: bool) {
        let mut pt = self.per_table.lock();
        let e = pt.entry(table_id).or_insert((0, 0));
        if hit {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }

    pub fn insert(&self, key: CacheKey, row: &[u8]) -> InsertOutcome {
        if !self.is_table_enabled(key.table_id) {
            self.bypassed.fetch_add(1, Relaxed);
            return InsertOutcome::Bypassed;
        }
        if self.route_table(key.table_id).is_none() {
            self.register_table(key.table_id, row.len());
        }
        let Some((res, sub)) = self.resolve(&key) else {
            self.bypassed.fetch_add(1, Relaxed);
            return InsertOutcome::Bypassed;
        };
        let outcome = {
            let mut p = self.partition(&key).lock();
            match sub {
                SubCache::MemoryOptimized => p.mem.insert(res, row),
                SubCache::CpuOptimized => p
                    .cpu
                    .insert(res, row.into(), row.len() + CPU_OPT_META_BYTES)
                    .map(|ev| ev.len())
                    .map_err(|_| ()),
            }
        };
        let c = self.counters(sub);
        match outcome {
            Ok(evicted) => {
                c.insertions.fetch_add(1, Relaxed);
                c.evictions.fetch_add(evicted as u64, Relaxed);
                InsertOutcome::Inserted
            }
            Err(()) => {
                self.refused.fetch_add(1, Relaxed);
                InsertOutcome::Refused
            }
        }
    }

    pub fn invalidate(&self, key: &CacheKey) {
        if let Some((res, sub)) = self.resolve(key) {
            let mut p = self.partition(key).lock();
            match sub {
                SubCache::MemoryOptimized => p.mem.remove(&res),
                SubCache::CpuOptimized => {
                    p.cpu.remove(&res);
                }
            }
        }
    }

    pub fn clear(&self) {
        for p in &self.partitions {
            let mut p = p.lock();
            let slot_bytes = p.mem.slot_bytes;
            let cap = p.mem.lru.capacity();
            p.mem = SlotArena::new(cap, slot_bytes);
            p.cpu.clear();
        }
    }

    pub fn reset_stats(&self) {
        self.mem_counters.reset();
        self.cpu_counters.reset();
        self.refused.store(0, Relaxed);
        self.bypassed.store(0, Relaxed);
        self.unrouted_misses.store(0, Relaxed);
        self.per_table.lock().clear();
    }

    pub fn stats(&self) -> CacheStats {
        let (mut mem_bytes, mut cpu_bytes, mut mem_n, mut cpu_n) = (0, 0, 0, 0);
        for p in &self.partitions {
            let p = p.lock();
            mem_bytes += p.mem.lru.charged();
            mem_n += p.mem.lru.len();
            cpu_bytes += p.cpu.charged();
            cpu_n += p.cpu.len();
        }
        let parts = self.partitions.len();
        let (mh, mm, mi, me) = self.mem_counters.snapshot();
        let (ch, cm, ci, ce) = self.cpu_counters.snapshot();
        let mut per_table: Vec<_> = self
            .per_table
            .lock()
            .iter()
            .map(|(&t, &(h, m))| (t, h, m))
            .collect();
        per_table.sort_unstable();
        let unrouted_misses = self.unrouted_misses.load(Relaxed);
        CacheStats {
            hits: mh + ch,
            misses: mm + cm + unrouted_misses,
            insertions: mi + ci,
            evictions: me + ce,
            refused: self.refused.load(Relaxed),
            bypassed: self.bypassed.load(Relaxed),
            bytes_resident: mem_bytes + cpu_bytes,
            mem_opt: SubCacheStats {
                hits: mh,
                misses: mm,
                insertions: mi,
                evictions: me,
                bytes_resident: mem_bytes,
                capacity_bytes: self.config.mem_opt_capacity_bytes / parts * parts,
                entries: mem_n,
            },
            cpu_opt: SubCacheStats {
                hits: ch,
                misses: cm,
                insertions: ci,
                evictions: ce,
                bytes_resident: cpu_bytes,
                capacity_bytes: self.config.cpu_opt_capacity_bytes / parts * parts,
                entries: cpu_n,
            },
            per_table,
        }
    }
}
