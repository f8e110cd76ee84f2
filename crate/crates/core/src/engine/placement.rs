use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    FmDirect,
    SmCached,
    SmUncached,
}

impl Placement {
    pub fn on_sm(self) -> bool {
        self != Placement::FmDirect
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::FmDirect => "fm_direct",
            Placement::SmCached => "sm_cached",
            Placement::SmUncached => "sm_uncached",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    SmOnly,
    FixedFm,
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementPolicy::SmOnly => "sm_only",
            PlacementPolicy::FixedFm => "fixed_fm",
        })
    }
}

impl FromStr for PlacementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sm_only" => Ok(Self::SmOnly),
            "fixed_fm" => Ok(Self::FixedFm),
            _ => Err(Error::InvalidArgument(format!(
                "unknown policy `{s}` (expected sm_only or fixed_fm)"
            ))),
        }
    }
}

/// What the planner needs to know about one table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementInput {
    pub table_id: u32,
    /// Bytes the table occupies once loaded.
    pub size_bytes: u64,
    pub pooling_factor: f64,
    pub row_bytes: usize,
}

impl PlacementInput {
    /// Bandwidth per byte of capacity.
    pub fn score(&self) -> f64 {
        self.pooling_factor * self.row_bytes as f64 / self.size_bytes.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub assignments: BTreeMap<u32, Placement>,
    pub fm_budget_bytes: u64,
    pub policy: PlacementPolicy,
    /// Direct tables plus `reserved_bytes`.
    pub fm_bytes_used: u64,
    /// Charged up front, e.g. pruning maps kept in fast memory.
    pub reserved_bytes: u64,
}

impl PlacementPlan {
    pub fn get(&self, table_id: u32) -> Option<Placement> {
        self.assignments.get(&table_id).copied()
    }

    pub fn count(&self, p: Placement) -> usize {
        self.assignments.values().filter(|&&x| x == p).count()
    }
}

pub fn plan_placement(
    tables: &[PlacementInput],
    policy: PlacementPolicy,
    fm_budget_bytes: u64,
    reserved_bytes: u64,
    deny_list: &BTreeSet<u32>,
    low_locality: &BTreeSet<u32>,
) -> Result<PlacementPlan> {
    let mut used = reserved_bytes;
    let mut assignments = BTreeMap::new();
    for t in tables.iter().filter(|t| deny_list.contains(&t.table_id)) {
        used += t.size_bytes;
        assignments.insert(t.table_id, Placement::FmDirect);
    }
    if used > fm_budget_bytes {
        return Err(Error::Capacity(format!(
            "deny-listed tables and reserved bytes need {used} B, fast-memory budget is {fm_budget_bytes} B"
        )));
    }
    if let Some(id) = deny_list
        .iter()
        .find(|id| !tables.iter().any(|t| t.table_id == **id))
    {
        return Err(Error::UnknownTable(*id));
    }
    if policy == PlacementPolicy::FixedFm {
        let mut ranked: Vec<&PlacementInput> = tables
            .iter()
            .filter(|t| !assignments.contains_key(&t.table_id))
            .collect();
        ranked.sort_by(|a, b| {
            b.score()
                .total_cmp(&a.score())
                .then(a.table_id.cmp(&b.table_id))
        });
        for t in ranked {
            if used + t.size_bytes <= fm_budget_bytes {
                used += t.size_bytes;
                assignments.insert(t.table_id, Placement::FmDirect);
            }
        }
    }
    for t in tables {
        assignments
            .entry(t.table_id)
            .or_insert(if low_locality.contains(&t.table_id) {
                Placement::SmUncached
            } else {
                Placement::SmCached
            });
    }
    Ok(PlacementPlan {
        assignments,
        fm_budget_bytes,
        policy,
        fm_bytes_used: used,
        reserved_bytes,
    })
}
