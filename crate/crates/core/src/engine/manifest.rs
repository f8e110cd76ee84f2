//! Model manifest: table metadata, pruning maps and placement hints.
//!
//! Text format, one table per line:
//!
//! ```text
//! # table_id role num_rows elem_count avg_pf pruned idx_type
//! 0 user 1000 64 42 0 4
//! 1 user 500 64 20 1 4
//! deny 3
//! uncached 1
//! ```
//!
//! `num_rows` is the physical row count. A pruned table's map lives in a
//! sidecar `<stem>.t<id>.prune` next to the manifest.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{EmbeddingTable, PruningMap, Role, TableMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelManifest {
    pub tables: Vec<TableMeta>,
    pub pruning: HashMap<u32, PruningMap>,
    /// Tables that must stay in fast memory.
    pub deny_list: BTreeSet<u32>,
    /// Tables with too little temporal locality to cache.
    pub uncached: BTreeSet<u32>,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for t in &self.tables {
            t.validate()?;
            if !ids.insert(t.table_id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate table id {}",
                    t.table_id
                )));
            }
            match (t.pruned, self.pruning.get(&t.table_id)) {
                (true, None) => {
                    return Err(Error::InvalidArgument(format!(
                        "table {} is pruned but has no map",
                        t.table_id
                    )))
                }
                (true, Some(m)) if m.pruned_num_rows() != t.num_rows => {
                    return Err(Error::InvalidArgument(format!(
                        "table {}: map targets {} rows, table has {}",
                        t.table_id,
                        m.pruned_num_rows(),
                        t.num_rows
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::InvalidArgument(format!(
                        "table {} has a map but is not marked pruned",
                        t.table_id
                    )))
                }
                _ => {}
            }
        }
        for id in self.deny_list.iter().chain(&self.uncached) {
            if !ids.contains(id) {
                return Err(Error::UnknownTable(*id));
            }
        }
        Ok(())
    }

    pub fn table(&self, table_id: u32) -> Option<&TableMeta> {
        self.tables.iter().find(|t| t.table_id == table_id)
    }

    /// Quantized bytes over all tables.
    pub fn total_size(&self) -> u64 {
        self.tables.iter().map(TableMeta::quantized_size).sum()
    }

    pub fn mapping_bytes(&self) -> u64 {
        self.pruning.values().map(PruningMap::mapping_bytes).sum()
    }

    /// Synthetic row contents for every table, with pruning maps attached.
    pub fn synthesize_tables(&self, seed: u64) -> Result<Vec<EmbeddingTable>> {
        self.validate()?;
        self.tables
            .iter()
            .map(|m| {
                let mut meta = m.clone();
                meta.pruned = false;
                let t = EmbeddingTable::synthetic(meta, seed)?;
                match self.pruning.get(&m.table_id) {
                    Some(map) => t.with_pruning(map.clone()),
                    None => Ok(t),
                }
            })
            .collect()
    }

    pub fn sidecar_path(manifest: &Path, table_id: u32) -> PathBuf {
        let stem = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        manifest.with_file_name(format!("{stem}.t{table_id}.prune"))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# table_id role num_rows elem_count avg_pf pruned idx_type\n");
        for t in &self.tables {
            let idx = self
                .pruning
                .get(&t.table_id)
                .map_or(4, PruningMap::idx_type_bytes);
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                t.table_id,
                t.role,
                t.num_rows,
                t.elem_count,
                t.avg_pooling_factor,
                t.pruned as u8,
                idx
            );
        }
        let ids =
            |set: &BTreeSet<u32>| set.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        if !self.deny_list.is_empty() {
            let _ = writeln!(s, "deny {}", ids(&self.deny_list));
        }
        if !self.uncached.is_empty() {
            let _ = writeln!(s, "uncached {}", ids(&self.uncached));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        for (id, map) in &self.pruning {
            std::fs::write(Self::sidecar_path(path, *id), map.to_sidecar())?;
        }
        Ok(())
    }

    /// Parses manifest text. Pruned tables get their maps from `sidecar`.
    pub fn parse_with<F>(text: &str, mut sidecar: F) -> Result<Self>
    where
        F: FnMut(u32) -> Result<Vec<u8>>,
    {
        let mut m = ModelManifest::default();
        let mut idx_types = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse { line: n + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if let ("deny" | "uncached", Some(list)) = (fields[0], fields.get(1)) {
                let ids: BTreeSet<u32> = list
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| perr(format!("bad table id `{x}`")))
                    })
                    .collect::<Result<_>>()?;
                if fields[0] == "deny" {
                    m.deny_list.extend(ids);
                } else {
                    m.uncached.extend(ids);
                }
                continue;
            }
            if fields.len() != 7 {
                return Err(perr(format!("expected 7 fields, found {}", fields.len())));
            }
            let num = |i: usize, what: &str| -> Result<u64> {
                fields[i]
                    .parse()
                    .map_err(|_| perr(format!("bad {what} `{}`", fields[i])))
            };
            let table_id = num(0, "table id")? as u32;
            let role: Role = fields[1].parse().map_err(|e: Error| perr(e.to_string()))?;
            let num_rows = num(2, "num_rows")?;
            let elem_count = num(3, "elem_count")? as usize;
            let pf: f64 = fields[4]
                .parse()
                .map_err(|_| perr(format!("bad avg_pf `{}`", fields[4])))?;
            let pruned = match fields[5] {
                "0" | "false" => false,
                "1" | "true" => true,
                x => return Err(perr(format!("bad pruned flag `{x}`"))),
            };
            let idx = num(6, "idx_type")? as u8;
            if idx != 4 && idx != 8 {
                return Err(perr(format!("idx_type must be 4 or 8, got {idx}")));
            }
            let mut meta = TableMeta::new(table_id, role, num_rows, elem_count, pf);
            meta.pruned = pruned;
            meta.validate().map_err(|e| perr(e.to_string()))?;
            idx_types.push((table_id, pruned, idx, num_rows));
            m.tables.push(meta);
        }
        for (id, pruned, idx, rows) in idx_types {
            if pruned {
                let bytes = sidecar(id)?;
                m.pruning
                    .insert(id, PruningMap::from_sidecar(&bytes, idx, rows)?);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with(&text, |id| {
            let p = Self::sidecar_path(path, id);
            std::fs::read(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
        })
    }
}

/// A run of identically shaped tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGroup {
    pub count: usize,
    pub role: Role,
    /// Row count before pruning.
    pub rows: u64,
    pub elem_count: usize,
    pub pooling: f64,
    pub prune_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub groups: Vec<TableGroup>,
    pub idx_type_bytes: u8,
    pub seed: u64,
}

impl SyntheticModel {
    /// Manifest for the groups, ids assigned in order. Pruned rows are a
    /// seeded random subset.
    pub fn manifest(&self) -> Result<ModelManifest> {
        let mut m = ModelManifest::default();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x005e_ed0f_9a11);
        let mut id = 0u32;
        for g in &self.groups {
            if !(0.0..1.0).contains(&g.prune_fraction) {
                return Err(Error::InvalidArgument(format!(
                    "prune fraction {} outside [0, 1)",
                    g.prune_fraction
                )));
            }
            for _ in 0..g.count {
                let drop = (g.rows as f64 * g.prune_fraction).round() as usize;
                let mut meta = TableMeta::new(id, g.role, g.rows, g.elem_count, g.pooling);
                if drop > 0 {
                    let mut keep = vec![true; g.rows as usize];
                    keep[..drop].fill(false);
                    keep.shuffle(&mut rng);
                    let map = PruningMap::from_keep_mask(&keep, self.idx_type_bytes)?;
                    meta.num_rows = map.pruned_num_rows();
                    meta.pruned = true;
                    m.pruning.insert(id, map);
                }
                m.tables.push(meta);
                id += 1;
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn build(&self) -> Result<(ModelManifest, Vec<EmbeddingTable>)> {
        let m = self.manifest()?;
        let tables = m.synthesize_tables(self.seed)?;
        Ok((m, tables))
    }
}
