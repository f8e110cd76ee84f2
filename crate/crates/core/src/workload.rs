//! Synthetic traces and the locality analyzers.
//!
//! Indices are drawn Zipf-distributed over ranks and mapped to rows through
//! a seeded permutation, so popular rows are scattered across the table.
//! A per-table reservoir of earlier sequences can be replayed with a fixed
//! probability to give the pooled cache something to hit.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Poisson};

use crate::embedding::Role;
use crate::error::{Error, Result};

const RESERVOIR: usize = 1024;
pub const DEFAULT_WINDOW: usize = 100_000;
pub const SPATIAL_BLOCK_BYTES: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingDist {
    Fixed(usize),
    /// Poisson with the given mean, truncated below at 1.
    Poisson(f64),
}

impl PoolingDist {
    pub fn mean(&self) -> f64 {
        match *self {
            PoolingDist::Fixed(n) => n as f64,
            PoolingDist::Poisson(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableWorkload {
    pub table_id: u32,
    pub num_rows: u64,
    pub role: Role,
    /// Zipf exponent; 0 is uniform.
    pub s: f64,
    pub pooling: PoolingDist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfSpec {
    pub tables: Vec<TableWorkload>,
    pub repeat_rate: f64,
    /// Item lists per query.
    pub batch_items: usize,
    pub seed: u64,
}

impl ZipfSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.repeat_rate) {
            return Err(Error::InvalidArgument(format!(
                "repeat rate {} outside [0, 1]",
                self.repeat_rate
            )));
        }
        if self.batch_items == 0 {
            return Err(Error::InvalidArgument("batch_items must be >= 1".into()));
        }
        let mut ids = HashSet::new();
        for t in &self.tables {
            if !ids.insert(t.table_id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate table {}",
                    t.table_id
                )));
            }
            if t.num_rows == 0 || t.num_rows > u32::MAX as u64 {
                return Err(Error::InvalidArgument(format!(
                    "table {}: num_rows {} unsupported",
                    t.table_id, t.num_rows
                )));
            }
            if !(t.s >= 0.0) || !t.s.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "table {}: bad exponent",
                    t.table_id
                )));
            }
            let ok = match t.pooling {
                PoolingDist::Fixed(n) => n >= 1,
                PoolingDist::Poisson(m) => m > 0.0 && m.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "table {}: pooling must be positive",
                    t.table_id
                )));
            }
        }
        Ok(())
    }
}

/// Zipf draw over ranks, returned as row ids through a seeded permutation.
pub struct ZipfSampler {
    alias: WeightedAliasIndex<f64>,
    perm: Vec<u32>,
}

impl ZipfSampler {
    pub fn new(num_rows: u64, s: f64, seed: u64) -> Result<Self> {
        if num_rows == 0 || num_rows > u32::MAX as u64 {
            return Err(Error::InvalidArgument(format!(
                "num_rows {num_rows} unsupported"
            )));
        }
        let weights: Vec<f64> = (1..=num_rows).map(|k| (k as f64).powf(-s)).collect();
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::InvalidArgument(format!("zipf weights: {e}")))?;
        let mut perm: Vec<u32> = (0..num_rows as u32).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { alias, perm })
    }

    pub fn num_rows(&self) -> u64 {
        self.perm.len() as u64
    }

    /// Row holding popularity rank `rank` (0 is hottest).
    pub fn row_of_rank(&self, rank: usize) -> u64 {
        self.perm[rank] as u64
    }

    pub fn sample_rank<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.alias.sample(rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.perm[self.alias.sample(rng)] as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableLookup {
    pub table_id: u32,
    /// One list for user tables, `batch_items` lists for item tables.
    pub lists: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub query_id: u64,
    pub lookups: Vec<TableLookup>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub tables: Vec<u32>,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    /// All accesses to `table_id` in trace order.
    pub fn accesses(&self, table_id: u32) -> impl Iterator<Item = u64> + '_ {
        self.records
            .iter()
            .flat_map(|r| r.lookups.iter())
            .filter(move |l| l.table_id == table_id)
            .flat_map(|l| l.lists.iter().flatten().copied())
    }

    pub fn total_lookups(&self) -> u64 {
        self.records
            .iter()
            .flat_map(|r| &r.lookups)
            .flat_map(|l| &l.lists)
            .map(|l| l.len() as u64)
            .sum()
    }
}

/// Seed of the per-table sampler inside [`generate_trace`].
pub fn table_seed(seed: u64, table_id: u32) -> u64 {
    let mut z = seed ^ (table_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

struct TableGen<'a> {
    spec: &'a TableWorkload,
    sampler: ZipfSampler,
    poisson: Option<Poisson<f64>>,
    reservoir: Vec<Vec<u64>>,
    seen: u64,
}

impl TableGen<'_> {
    fn draw(&mut self, rng: &mut ChaCha8Rng, repeat_rate: f64) -> Vec<u64> {
        if !self.reservoir.is_empty() && repeat_rate > 0.0 && rng.random_bool(repeat_rate) {
            let pick = rng.random_range(0..self.reservoir.len());
            let mut seq = self.reservoir[pick].clone();
            seq.shuffle(rng);
            return seq;
        }
        let n = match (self.spec.pooling, &self.poisson) {
            (PoolingDist::Fixed(n), _) => n,
            (_, Some(p)) => (p.sample(rng) as usize).max(1),
            _ => 1,
        };
        let seq: Vec<u64> = (0..n).map(|_| self.sampler.sample(rng)).collect();
        self.seen += 1;
        if self.reservoir.len() < RESERVOIR {
            self.reservoir.push(seq.clone());
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < RESERVOIR {
                self.reservoir[j as usize] = seq.clone();
            }
        }
        seq
    }
}

pub fn generate_trace(spec: &ZipfSpec, num_queries: u64) -> Result<Trace> {
    spec.validate()?;
    let mut gens = Vec::with_capacity(spec.tables.len());
    for t in &spec.tables {
        let poisson = match t.pooling {
            PoolingDist::Poisson(m) => {
                Some(Poisson::new(m).map_err(|e| Error::InvalidArgument(format!("poisson: {e}")))?)
            }
            PoolingDist::Fixed(_) => None,
        };
        gens.push(TableGen {
            spec: t,
            sampler: ZipfSampler::new(t.num_rows, t.s, table_seed(spec.seed, t.table_id))?,
            poisson,
            reservoir: Vec::new(),
            seen: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(num_queries as usize);
    for q in 0..num_queries {
        let lookups = gens
            .iter_mut()
            .map(|g| {
                let copies = match g.spec.role {
                    Role::User => 1,
                    Role::Item => spec.batch_items,
                };
                TableLookup {
                    table_id: g.spec.table_id,
                    lists: (0..copies)
                        .map(|_| g.draw(&mut rng, spec.repeat_rate))
                        .collect(),
                }
            })
            .collect();
        records.push(TraceRecord {
            query_id: q,
            lookups,
        });
    }
    Ok(Trace {
        tables: spec.tables.iter().map(|t| t.table_id).collect(),
        records,
    })
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

pub fn format_record(r: &TraceRecord) -> String {
    let mut s = format!("Q {} |", r.query_id);
    for l in &r.lookups {
        let lists: Vec<String> = l.lists.iter().map(|x| join(x, ",")).collect();
        let _ = write!(s, " {}:{}", l.table_id, lists.join(";"));
        if l.lists.len() != 1 {
            let _ = write!(s, " x{}", l.lists.len());
        }
        s.push_str(" |");
    }
    s
}

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    writeln!(out, "TABLES {}", join(&trace.tables, ","))?;
    for r in &trace.records {
        writeln!(out, "{}", format_record(r))?;
    }
    Ok(())
}

pub fn write_trace_file(trace: &Trace, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_u64(tok: &str, what: &str) -> std::result::Result<u64, String> {
    tok.trim()
        .parse()
        .map_err(|_| format!("bad {what} `{}`", tok.trim()))
}

fn parse_lookup(seg: &str) -> std::result::Result<TableLookup, String> {
    let seg = seg.trim();
    let (body, copies) = match seg.rsplit_once(" x") {
        Some((b, n)) => (b, Some(parse_u64(n, "batch count")? as usize)),
        None => (seg, None),
    };
    let (tid, lists) = body
        .split_once(':')
        .ok_or_else(|| format!("missing `:` in `{seg}`"))?;
    let table_id = parse_u64(tid, "table id")? as u32;
    let lists: Vec<Vec<u64>> = lists
        .split(';')
        .map(|l| {
            let l = l.trim();
            if l.is_empty() {
                Ok(Vec::new())
            } else {
                l.split(',').map(|i| parse_u64(i, "index")).collect()
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    if let Some(n) = copies {
        if n != lists.len() {
            return Err(format!("`x{n}` but {} lists", lists.len()));
        }
    }
    Ok(TableLookup { table_id, lists })
}

fn parse_record(line: &str) -> std::result::Result<TraceRecord, String> {
    let rest = line.strip_prefix("Q ").ok_or("expected `Q <id> |`")?;
    let mut parts = rest.split('|');
    let query_id = parse_u64(parts.next().unwrap_or(""), "query id")?;
    if !line.trim_end().ends_with('|') {
        return Err(format!("truncated record at byte {}", line.len()));
    }
    let lookups = parts
        .filter(|p| !p.trim().is_empty())
        .map(parse_lookup)
        .collect::<std::result::Result<_, _>>()?;
    Ok(TraceRecord { query_id, lookups })
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Trace> {
    let mut trace = Trace::default();
    let mut have_header = false;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let err = |msg: String| Error::Parse { line: lineno, msg };
        if line.trim().is_empty() {
            continue;
        }
        if !have_header {
            let ids = line
                .strip_prefix("TABLES")
                .ok_or_else(|| err("expected `TABLES` header".into()))?
                .trim();
            if !ids.is_empty() {
                trace.tables = ids
                    .split(',')
                    .map(|t| parse_u64(t, "table id").map(|v| v as u32))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(err)?;
            }
            have_header = true;
            continue;
        }
        let rec = parse_record(&line).map_err(err)?;
        if let Some(l) = rec
            .lookups
            .iter()
            .find(|l| !trace.tables.contains(&l.table_id))
        {
            return Err(err(format!("table {} not in header", l.table_id)));
        }
        trace.records.push(rec);
    }
    Ok(trace)
}

pub fn read_trace_file(path: &Path) -> Result<Trace> {
    let f = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfPoint {
    pub row_fraction: f64,
    pub access_share: f64,
}

/// Cumulative access share over rows sorted hottest first. With
/// `num_rows`, rows never touched are included as zero-count rows.
pub fn temporal_cdf(trace: &Trace, table_id: u32, num_rows: Option<u64>) -> Vec<CdfPoint> {
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for r in trace.accesses(table_id) {
        *counts.entry(r).or_default() += 1;
    }
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut c: Vec<u64> = counts.into_values().collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    let rows = num_rows.unwrap_or(c.len() as u64).max(c.len() as u64);
    c.resize(rows as usize, 0);
    let mut acc = 0u64;
    c.iter()
        .enumerate()
        .map(|(i, &n)| {
            acc += n;
            CdfPoint {
                row_fraction: (i + 1) as f64 / rows as f64,
                access_share: acc as f64 / total as f64,
            }
        })
        .collect()
}

/// Largest |share - fraction| over the curve.
pub fn diagonal_deviation(cdf: &[CdfPoint]) -> f64 {
    cdf.iter()
        .map(|p| (p.access_share - p.row_fraction).abs())
        .fold(0.0, f64::max)
}

/// Share of accesses carried by the hottest `fraction` of rows.
pub fn share_at(cdf: &[CdfPoint], fraction: f64) -> f64 {
    let i = cdf.partition_point(|p| p.row_fraction < fraction - 1e-12);
    cdf.get(i).or(cdf.last()).map_or(0.0, |p| p.access_share)
}

pub fn rows_per_block(dim_bytes: u64) -> u64 {
    (SPATIAL_BLOCK_BYTES / dim_bytes.max(1)).max(1)
}

/// Unique rows per unique 4 KiB block, normalized by rows per block.
pub fn spatial_metric(rows: &[u64], dim_bytes: u64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let unique: HashSet<u64> = rows.iter().copied().collect();
    let blocks: HashSet<u64> = unique
        .iter()
        .map(|r| r * dim_bytes / SPATIAL_BLOCK_BYTES)
        .collect();
    (unique.len() as f64 / blocks.len() as f64) / rows_per_block(dim_bytes) as f64
}

pub fn spatial_locality(
    trace: &Trace,
    table_id: u32,
    dim_bytes: u64,
    window: usize,
) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    if dim_bytes == 0 {
        return Err(Error::InvalidArgument("dim_bytes must be >= 1".into()));
    }
    let all: Vec<u64> = trace.accesses(table_id).collect();
    Ok(all
        .chunks(window)
        .map(|w| spatial_metric(w, dim_bytes))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityReport {
    pub table_id: u32,
    pub window: usize,
    pub cdf: Vec<CdfPoint>,
    pub spatial: Vec<f64>,
}

impl LocalityReport {
    pub fn mean_spatial(&self) -> f64 {
        if self.spatial.is_empty() {
            0.0
        } else {
            self.spatial.iter().sum::<f64>() / self.spatial.len() as f64
        }
    }
}

pub fn analyze(
    trace: &Trace,
    table_id: u32,
    num_rows: Option<u64>,
    dim_bytes: u64,
    window: usize,
) -> Result<LocalityReport> {
    Ok(LocalityReport {
        table_id,
        window,
        cdf: temporal_cdf(trace, table_id, num_rows),
        spatial: spatial_locality(trace, table_id, dim_bytes, window)?,
    })
}
