//! Embedding-table data model, row-wise int8 quantization and pooling.
//!
//! Rows use the asymmetric min/max scheme: a little-endian `f32` scale, a
//! little-endian `f32` bias and one code byte per element, so a 64-element
//! row occupies 72 bytes. Dequantized element `j` is `scale * code_j + bias`
//! evaluated in `f32`. Pooling is an unweighted sum accumulated in `f32` in
//! input order; every path in the crate uses the same accumulation so pooled
//! outputs are reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Bytes of per-row quantization parameters (scale + bias).
pub const QPARAM_BYTES: usize = 8;

/// Smallest legal quantized row: parameters plus one code.
pub const MIN_DIM_BYTES: usize = QPARAM_BYTES + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    User,
    Item,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::User => f.write_str("user"),
            Role::Item => f.write_str("item"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "user" | "u" => Ok(Role::User),
            "item" | "i" => Ok(Role::Item),
            other => Err(Error::InvalidArgument(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableMeta {
    pub table_id: u32,
    /// Physical (post-hash, post-pruning) row count.
    pub num_rows: u64,
    /// Quantized row payload including the 8 parameter bytes.
    pub dim_bytes: usize,
    pub elem_count: usize,
    pub role: Role,
    pub avg_pooling_factor: f64,
    pub pruned: bool,
}

impl TableMeta {
    pub fn new(
        table_id: u32,
        role: Role,
        num_rows: u64,
        elem_count: usize,
        avg_pooling_factor: f64,
    ) -> Self {
        Self {
            table_id,
            num_rows,
            dim_bytes: elem_count + QPARAM_BYTES,
            elem_count,
            role,
            avg_pooling_factor,
            pruned: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rows == 0 {
            return Err(Error::InvalidArgument(format!(
                "table {}: num_rows must be >= 1",
                self.table_id
            )));
        }
        if self.elem_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "table {}: elem_count must be >= 1",
                self.table_id
            )));
        }
        if self.dim_bytes != self.elem_count + QPARAM_BYTES {
            return Err(Error::InvalidArgument(format!(
                "table {}: dim_bytes {} != elem_count {} + {}",
                self.table_id, self.dim_bytes, self.elem_count, QPARAM_BYTES
            )));
        }
        if !(self.avg_pooling_factor > 0.0) || !self.avg_pooling_factor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "table {}: avg_pooling_factor must be > 0",
                self.table_id
            )));
        }
        Ok(())
    }

    pub fn quantized_size(&self) -> u64 {
        self.num_rows * self.dim_bytes as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    pub scale: f32,
    pub bias: f32,
    pub codes: Vec<u8>,
}

impl QuantizedRow {
    pub fn zero(elem_count: usize) -> Self {
        Self {
            scale: 0.0,
            bias: 0.0,
            codes: vec![0; elem_count],
        }
    }

    pub fn elem_count(&self) -> usize {
        self.codes.len()
    }

    pub fn serialized_len(&self) -> usize {
        self.codes.len() + QPARAM_BYTES
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.bias.to_le_bytes());
        out.extend_from_slice(&self.codes);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MIN_DIM_BYTES {
            return Err(Error::InvalidArgument(format!(
                "quantized row needs at least {MIN_DIM_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let scale = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let bias = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        Ok(Self {
            scale,
            bias,
            codes: bytes[QPARAM_BYTES..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f32>,
}

impl PooledVector {
    pub fn zeros(elem_count: usize) -> Self {
        Self {
            values: vec![0.0; elem_count],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &PooledVector) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn quantize_row(values: &[f32]) -> Result<QuantizedRow> {
    if values.is_empty() {
        return Err(Error::Empty("quantize_row values"));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(pos));
    }
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scale = (max - min) / 255.0;
    let bias = min;
    let codes = if scale == 0.0 {
        vec![0; values.len()]
    } else {
        values
            .iter()
            .map(|&v| ((v - bias) / scale).round().clamp(0.0, 255.0) as u8)
            .collect()
    };
    Ok(QuantizedRow { scale, bias, codes })
}

pub fn dequantize_row(row: &QuantizedRow) -> Vec<f32> {
    row.codes
        .iter()
        .map(|&c| row.scale * c as f32 + row.bias)
        .collect()
}

pub fn pool_rows(rows: &[QuantizedRow], elem_count: usize) -> Result<PooledVector> {
    let mut out = PooledVector::zeros(elem_count);
    for row in rows {
        if row.elem_count() != elem_count {
            return Err(Error::ElemMismatch {
                expected: elem_count,
                actual: row.elem_count(),
            });
        }
        for (acc, v) in out.values.iter_mut().zip(dequantize_row(row)) {
            *acc += v;
        }
    }
    Ok(out)
}

/// Storage format of rows on the device and in caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowFormat {
    /// `scale | bias | codes`, `elem_count + 8` bytes.
    Quantized,
    /// Little-endian `f32` values, `elem_count * 4` bytes.
    Raw,
}

impl RowFormat {
    pub fn row_bytes(self, elem_count: usize) -> usize {
        match self {
            RowFormat::Quantized => elem_count + QPARAM_BYTES,
            RowFormat::Raw => elem_count * 4,
        }
    }
}

/// Adds one encoded row into `acc`. Same arithmetic as [`dequantize_row`]
/// followed by an element-wise add.
pub fn accumulate_row(format: RowFormat, bytes: &[u8], acc: &mut [f32]) {
    match format {
        RowFormat::Quantized => {
            let scale = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
            let bias = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
            for (a, &c) in acc.iter_mut().zip(&bytes[QPARAM_BYTES..]) {
                *a += scale * c as f32 + bias;
            }
        }
        RowFormat::Raw => {
            for (a, chunk) in acc.iter_mut().zip(bytes.chunks_exact(4)) {
                *a += f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
}

/// Index remap from un-pruned row space to pruned row space.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningMap {
    mapping: Vec<u64>,
    pruned_num_rows: u64,
    idx_type_bytes: u8,
}

impl PruningMap {
    pub const PRUNED: u64 = u64::MAX;

    pub fn new(mapping: Vec<u64>, pruned_num_rows: u64, idx_type_bytes: u8) -> Result<Self> {
        if idx_type_bytes != 4 && idx_type_bytes != 8 {
            return Err(Error::InvalidArgument(format!(
                "idx_type_bytes must be 4 or 8, got {idx_type_bytes}"
            )));
        }
        if mapping.is_empty() {
            return Err(Error::Empty("pruning map"));
        }
        let mut seen = vec![false; pruned_num_rows as usize];
        for (i, &m) in mapping.iter().enumerate() {
            if m == Self::PRUNED {
                continue;
            }
            if m >= pruned_num_rows {
                return Err(Error::OutOfRange(format!(
                    "pruning map entry {i} -> {m} outside pruned space {pruned_num_rows}"
                )));
            }
            if std::mem::replace(&mut seen[m as usize], true) {
                return Err(Error::InvalidArgument(format!(
                    "pruning map entry {i} duplicates target {m}"
                )));
            }
        }
        Ok(Self {
            mapping,
            pruned_num_rows,
            idx_type_bytes,
        })
    }

    /// Keeps every row whose `keep` flag is set, in order.
    pub fn from_keep_mask(keep: &[bool], idx_type_bytes: u8) -> Result<Self> {
        let mut next = 0u64;
        let mapping = keep
            .iter()
            .map(|&k| {
                if k {
                    next += 1;
                    next - 1
                } else {
                    Self::PRUNED
                }
            })
            .collect();
        Self::new(mapping, next, idx_type_bytes)
    }

    pub fn unpruned_rows(&self) -> u64 {
        self.mapping.len() as u64
    }

    pub fn pruned_num_rows(&self) -> u64 {
        self.pruned_num_rows
    }

    pub fn idx_type_bytes(&self) -> u8 {
        self.idx_type_bytes
    }

    pub fn get(&self, unpruned: u64) -> Option<u64> {
        match self.mapping.get(unpruned as usize) {
            Some(&m) if m != Self::PRUNED => Some(m),
            _ => None,
        }
    }

    pub fn is_pruned(&self, unpruned: u64) -> bool {
        self.mapping
            .get(unpruned as usize)
            .is_some_and(|&m| m == Self::PRUNED)
    }

    pub fn mapping(&self) -> &[u64] {
        &self.mapping
    }

    /// Fast-memory footprint of the mapping tensor.
    pub fn mapping_bytes(&self) -> u64 {
        self.unpruned_rows() * self.idx_type_bytes as u64
    }

    /// Sidecar encoding: little-endian entries of `idx_type_bytes` each,
    /// all-ones for pruned rows.
    pub fn to_sidecar(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.mapping_bytes() as usize);
        for &m in &self.mapping {
            match self.idx_type_bytes {
                4 => {
                    let v = if m == Self::PRUNED {
                        u32::MAX
                    } else {
                        m as u32
                    };
                    out.extend_from_slice(&v.to_le_bytes());
                }
                _ => out.extend_from_slice(&m.to_le_bytes()),
            }
        }
        out
    }

    pub fn from_sidecar(bytes: &[u8], idx_type_bytes: u8, pruned_num_rows: u64) -> Result<Self> {
        let width = idx_type_bytes as usize;
        if width != 4 && width != 8 {
            return Err(Error::InvalidArgument(format!(
                "idx_type_bytes must be 4 or 8, got {idx_type_bytes}"
            )));
        }
        if !bytes.len().is_multiple_of(width) {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "sidecar length {} is not a multiple of {width} (truncated at offset {})",
                    bytes.len(),
                    bytes.len() - bytes.len() % width
                ),
            });
        }
        let mapping = bytes
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    let v = u32::from_le_bytes(c.try_into().unwrap());
                    if v == u32::MAX {
                        Self::PRUNED
                    } else {
                        v as u64
                    }
                } else {
                    u64::from_le_bytes(c.try_into().unwrap())
                }
            })
            .collect();
        Self::new(mapping, pruned_num_rows, idx_type_bytes)
    }
}

/// A table's rows laid out contiguously in row-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub meta: TableMeta,
    pub format: RowFormat,
    data: Vec<u8>,
    pub pruning: Option<PruningMap>,
}

impl EmbeddingTable {
    pub fn from_rows(meta: TableMeta, rows: &[QuantizedRow]) -> Result<Self> {
        meta.validate()?;
        if rows.len() as u64 != meta.num_rows {
            return Err(Error::InvalidArgument(format!(
                "table {}: {} rows supplied, meta says {}",
                meta.table_id,
                rows.len(),
                meta.num_rows
            )));
        }
        let mut data = Vec::with_capacity(meta.quantized_size() as usize);
        for row in rows {
            if row.elem_count() != meta.elem_count {
                return Err(Error::ElemMismatch {
                    expected: meta.elem_count,
                    actual: row.elem_count(),
                });
            }
            row.write_to(&mut data);
        }
        Ok(Self {
            meta,
            format: RowFormat::Quantized,
            data,
            pruning: None,
        })
    }

    /// Random table with values in `[-1, 1)`, deterministic in `seed`.
    pub fn synthetic(meta: TableMeta, seed: u64) -> Result<Self> {
        meta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((meta.table_id as u64) << 32));
        let mut values = vec![0f32; meta.elem_count];
        let mut data = Vec::with_capacity(meta.quantized_size() as usize);
        for _ in 0..meta.num_rows {
            for v in values.iter_mut() {
                *v = rng.random_range(-1.0f32..1.0);
            }
            quantize_row(&values)?.write_to(&mut data);
        }
        Ok(Self {
            meta,
            format: RowFormat::Quantized,
            data,
            pruning: None,
        })
    }

    pub fn with_pruning(mut self, map: PruningMap) -> Result<Self> {
        if map.pruned_num_rows() != self.meta.num_rows {
            return Err(Error::InvalidArgument(format!(
                "table {}: pruning map targets {} rows, table has {}",
                self.meta.table_id,
                map.pruned_num_rows(),
                self.meta.num_rows
            )));
        }
        self.meta.pruned = true;
        self.pruning = Some(map);
        Ok(self)
    }

    pub fn row_bytes(&self) -> usize {
        self.format.row_bytes(self.meta.elem_count)
    }

    /// Number of addressable indices seen by queries (un-pruned space).
    pub fn index_space(&self) -> u64 {
        self.pruning
            .as_ref()
            .map_or(self.meta.num_rows, |m| m.unpruned_rows())
    }

    pub fn row(&self, row_id: u64) -> Option<&[u8]> {
        if row_id >= self.meta.num_rows {
            return None;
        }
        let rb = self.row_bytes();
        let start = row_id as usize * rb;
        Some(&self.data[start..start + rb])
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn serialized_size(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn quantized_row(&self, row_id: u64) -> Option<QuantizedRow> {
        match self.format {
            RowFormat::Quantized => self
                .row(row_id)
                .map(|b| QuantizedRow::from_bytes(b).unwrap()),
            RowFormat::Raw => None,
        }
    }

    /// Overwrites one row with `row`, re-encoding into the table's format.
    pub fn set_row(&mut self, row_id: u64, row: &QuantizedRow) -> Result<()> {
        if row_id >= self.meta.num_rows {
            return Err(Error::OutOfRange(format!(
                "table {}: row {row_id} >= {}",
                self.meta.table_id, self.meta.num_rows
            )));
        }
        if row.elem_count() != self.meta.elem_count {
            return Err(Error::ElemMismatch {
                expected: self.meta.elem_count,
                actual: row.elem_count(),
            });
        }
        let encoded = encode_row(self.format, row);
        let rb = self.row_bytes();
        let start = row_id as usize * rb;
        self.data[start..start + rb].copy_from_slice(&encoded);
        Ok(())
    }

    /// Expands every row to raw `f32`. Values are the exact outputs of
    /// [`dequantize_row`], so pooling over the result is bit-identical.
    pub fn dequantize_at_load(&self) -> EmbeddingTable {
        if self.format == RowFormat::Raw {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.meta.num_rows as usize * self.meta.elem_count * 4);
        for chunk in self.data.chunks_exact(self.meta.dim_bytes) {
            let row = QuantizedRow::from_bytes(chunk).unwrap();
            for v in dequantize_row(&row) {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        EmbeddingTable {
            meta: self.meta.clone(),
            format: RowFormat::Raw,
            data,
            pruning: self.pruning.clone(),
        }
    }

    /// Rewrites a pruned table densely over the un-pruned row space, with
    /// zero rows where the map holds the pruned sentinel. Unpruned tables
    /// are returned unchanged.
    pub fn deprune(&self) -> EmbeddingTable {
        let Some(map) = &self.pruning else {
            return self.clone();
        };
        let rb = self.row_bytes();
        let zero = encode_row(self.format, &QuantizedRow::zero(self.meta.elem_count));
        let mut data = Vec::with_capacity(map.unpruned_rows() as usize * rb);
        for i in 0..map.unpruned_rows() {
            match map.get(i) {
                Some(src) => data.extend_from_slice(self.row(src).unwrap()),
                None => data.extend_from_slice(&zero),
            }
        }
        let mut meta = self.meta.clone();
        meta.num_rows = map.unpruned_rows();
        meta.pruned = false;
        EmbeddingTable {
            meta,
            format: self.format,
            data,
            pruning: None,
        }
    }
}

pub fn encode_row(format: RowFormat, row: &QuantizedRow) -> Vec<u8> {
    match format {
        RowFormat::Quantized => row.to_bytes(),
        RowFormat::Raw => dequantize_row(row)
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
    }
}
