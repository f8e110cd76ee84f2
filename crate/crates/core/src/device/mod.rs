//! Slow-memory block devices.
//!
//! [`SimDevice`] is a discrete-event model of an NVMe SSD with a virtual
//! clock: parallel service channels with FIFO queues, lognormal service
//! times, a bus transfer term and host-side outstanding-IO throttles.
//! [`FileDevice`] backs the same interface with a real file opened for
//! unbuffered IO.

mod file;
mod profile;
mod sim;

pub use file::FileDevice;
pub use profile::DeviceProfile;
pub use sim::{batch_latency_sweep, load_sweep, SimDevice, SweepPoint};

use crate::error::{Error, Result};
use crate::stats::LatencySummary;

/// Sub-block reads are issued at dword granularity.
pub const SUBBLOCK_ALIGN: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRequest {
    pub table_id: u32,
    pub byte_offset: u64,
    pub length: u64,
    pub subblock: bool,
}

impl IoRequest {
    pub fn new(table_id: u32, byte_offset: u64, length: u64, subblock: bool) -> Self {
        Self {
            table_id,
            byte_offset,
            length,
            subblock,
        }
    }

    /// Dword-aligned request covering `[offset, offset + len)`, and the
    /// position of the wanted bytes inside it.
    pub fn subblock_covering(table_id: u32, offset: u64, len: u64) -> (Self, usize) {
        let start = offset / SUBBLOCK_ALIGN * SUBBLOCK_ALIGN;
        let end = (offset + len).div_ceil(SUBBLOCK_ALIGN) * SUBBLOCK_ALIGN;
        (
            Self::new(table_id, start, end - start, true),
            (offset - start) as usize,
        )
    }

    /// Bytes moved over the bus to satisfy this request.
    pub fn transfer_bytes(&self, block_bytes: u64) -> u64 {
        if self.subblock {
            self.length.div_ceil(SUBBLOCK_ALIGN) * SUBBLOCK_ALIGN
        } else {
            blocks_spanned(self.byte_offset, self.length, block_bytes) * block_bytes
        }
    }
}

pub fn blocks_spanned(offset: u64, length: u64, block_bytes: u64) -> u64 {
    if length == 0 {
        return 0;
    }
    let first = offset / block_bytes;
    let last = (offset + length - 1) / block_bytes;
    last - first + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoCompletion {
    pub request: IoRequest,
    pub data: Vec<u8>,
    /// Device latency: issue to completion.
    pub latency_us: f64,
    /// Host-side wait behind the outstanding-IO throttle.
    pub queued_us: f64,
    /// Virtual time at which the data is available.
    pub complete_at_us: f64,
    pub bytes_transferred: u64,
    pub error: Option<Error>,
}

impl IoCompletion {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Completions for one submission. The simulated backend resolves them at
/// submit time; callers may still wait on the whole batch or poll by time.
#[derive(Debug, Clone, Default)]
pub struct CompletionHandle {
    completions: Vec<IoCompletion>,
}

impl CompletionHandle {
    pub fn new(completions: Vec<IoCompletion>) -> Self {
        Self { completions }
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    /// Completions whose data is available at virtual time `now_us`.
    pub fn poll(&self, now_us: f64) -> impl Iterator<Item = &IoCompletion> {
        self.completions
            .iter()
            .filter(move |c| c.complete_at_us <= now_us)
    }

    /// Time the last completion lands; `None` for an empty batch.
    pub fn done_at(&self) -> Option<f64> {
        self.completions
            .iter()
            .map(|c| c.complete_at_us)
            .reduce(f64::max)
    }

    pub fn wait(self) -> Vec<IoCompletion> {
        self.completions
    }

    pub fn completions(&self) -> &[IoCompletion] {
        &self.completions
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceStats {
    pub reads: u64,
    pub writes: u64,
    pub bytes_transferred: u64,
    pub bytes_requested: u64,
    /// Bytes written since creation; the endurance counter.
    pub bytes_written: u64,
    pub read_latency: LatencySummary,
    /// Try-submissions refused because a throttle cap was reached.
    pub rejected_for_queue_full: u64,
    /// Requests held back by the throttle and issued later.
    pub deferred: u64,
    pub errors: u64,
    /// Reads per second over the virtual span between first and last submit.
    pub offered_iops: f64,
}

impl DeviceStats {
    /// Transferred over requested bytes.
    pub fn read_amplification(&self) -> f64 {
        if self.bytes_requested == 0 {
            1.0
        } else {
            self.bytes_transferred as f64 / self.bytes_requested as f64
        }
    }
}

pub trait BlockDevice: Send + Sync {
    fn profile(&self) -> &DeviceProfile;

    fn capacity(&self) -> u64;

    /// Submits a batch of reads at virtual time `at_us`. Requests over the
    /// throttle caps are deferred, never dropped.
    fn submit_reads(&self, requests: &[IoRequest], at_us: f64) -> Result<CompletionHandle>;

    /// Like [`BlockDevice::submit_reads`] but refuses the whole batch with
    /// [`Error::QueueFull`] instead of deferring.
    fn try_submit_reads(&self, requests: &[IoRequest], at_us: f64) -> Result<CompletionHandle> {
        self.submit_reads(requests, at_us)
    }

    fn write_region(&self, byte_offset: u64, data: &[u8]) -> Result<()>;

    /// Untimed, unaccounted read of the stored image.
    fn read_image(&self, byte_offset: u64, length: u64) -> Result<Vec<u8>>;

    fn throttle_config(
        &self,
        max_outstanding_per_table: usize,
        max_tables_in_flight: usize,
    ) -> Result<()>;

    fn stats(&self) -> DeviceStats;

    fn reset_stats(&self);

    /// Latest virtual time seen by the device.
    fn clock_us(&self) -> f64 {
        0.0
    }
}

/// `365 * model_size / (pdwpd * capacity)`, applied literally. Units are
/// whatever the caller uses for both sizes; the result is dimensionless.
pub fn endurance_report(model_size: f64, capacity: f64, pdwpd: f64) -> Result<f64> {
    if !(capacity > 0.0) || !(pdwpd > 0.0) {
        return Err(Error::InvalidArgument(
            "capacity and pdwpd must be positive".into(),
        ));
    }
    if !(model_size > 0.0) {
        return Err(Error::InvalidArgument("model size must be positive".into()));
    }
    Ok(365.0 * model_size / (pdwpd * capacity))
}
