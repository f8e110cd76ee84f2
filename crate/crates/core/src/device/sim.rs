use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal};

use super::{
    blocks_spanned, BlockDevice, CompletionHandle, DeviceProfile, DeviceStats, IoCompletion,
    IoRequest, SUBBLOCK_ALIGN,
};
use crate::error::{Error, Result};
use crate::stats::{LatencyRecorder, LatencySummary};

const PAGE_BYTES: u64 = 64 * 1024;

#[derive(Debug, Clone, Copy)]
struct InFlight {
    finish: f64,
    table: u32,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for InFlight {}
impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> Ordering {
        self.finish
            .total_cmp(&other.finish)
            .then(self.table.cmp(&other.table))
    }
}

/// Sparse byte image: 64 KiB pages, all-zero pages are not stored.
#[derive(Debug, Default)]
struct PageStore {
    pages: HashMap<u64, Box<[u8]>>,
}

impl PageStore {
    fn read(&self, offset: u64, out: &mut [u8]) {
        let mut pos = 0usize;
        while pos < out.len() {
            let abs = offset + pos as u64;
            let page = abs / PAGE_BYTES;
            let in_page = (abs % PAGE_BYTES) as usize;
            let n = (PAGE_BYTES as usize - in_page).min(out.len() - pos);
            match self.pages.get(&page) {
                Some(p) => out[pos..pos + n].copy_from_slice(&p[in_page..in_page + n]),
                None => out[pos..pos + n].fill(0),
            }
            pos += n;
        }
    }

    fn write(&mut self, offset: u64, data: &[u8]) {
        let mut pos = 0usize;
        while pos < data.len() {
            let abs = offset + pos as u64;
            let page = abs / PAGE_BYTES;
            let in_page = (abs % PAGE_BYTES) as usize;
            let n = (PAGE_BYTES as usize - in_page).min(data.len() - pos);
            let chunk = &data[pos..pos + n];
            match self.pages.get_mut(&page) {
                Some(p) => {
                    p[in_page..in_page + n].copy_from_slice(chunk);
                    if p.iter().all(|&b| b == 0) {
                        self.pages.remove(&page);
                    }
                }
                None if chunk.iter().all(|&b| b == 0) => {}
                None => {
                    let mut p = vec![0u8; PAGE_BYTES as usize].into_boxed_slice();
                    p[in_page..in_page + n].copy_from_slice(chunk);
                    self.pages.insert(page, p);
                }
            }
            pos += n;
        }
    }
}

#[derive(Debug)]
struct SimState {
    store: PageStore,
    rng: ChaCha8Rng,
    unit_service: LogNormal<f64>,
    channel_free: Vec<f64>,
    inflight: BinaryHeap<Reverse<InFlight>>,
    per_table: HashMap<u32, usize>,
    per_table_cap: usize,
    max_tables: usize,
    clock: f64,
    first_submit: Option<f64>,
    last_submit: f64,
    read_latency: LatencyRecorder,
    reads: u64,
    writes: u64,
    bytes_transferred: u64,
    bytes_requested: u64,
    bytes_written: u64,
    rejected: u64,
    deferred: u64,
    errors: u64,
}

impl SimState {
    fn drain(&mut self, t: f64) {
        while let Some(Reverse(top)) = self.inflight.peek().copied() {
            if top.finish > t {
                break;
            }
            self.inflight.pop();
            self.release(top.table);
        }
    }

    fn release(&mut self, table: u32) {
        if let Some(n) = self.per_table.get_mut(&table) {
            *n -= 1;
            if *n == 0 {
                self.per_table.remove(&table);
            }
        }
    }

    fn blocked(&self, table: u32, max_outstanding: usize) -> bool {
        let mine = self.per_table.get(&table).copied().unwrap_or(0);
        self.inflight.len() >= max_outstanding
            || mine >= self.per_table_cap
            || (mine == 0 && self.per_table.len() >= self.max_tables)
    }

    fn service_sample(&mut self, mean: f64) -> f64 {
        mean * self.unit_service.sample(&mut self.rng)
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Discrete-event SSD model with a virtual microsecond clock.
///
/// Each request is striped to a channel by its block address and queues
/// FIFO (in submission order) behind earlier work on that channel. Latency
/// is queue wait plus a lognormal service time plus bus transfer. Requests
/// beyond the outstanding caps wait on the host side for the earliest
/// in-flight completion.
#[derive(Debug)]
pub struct SimDevice {
    profile: DeviceProfile,
    capacity: u64,
    state: Mutex<SimState>,
}

impl SimDevice {
    pub fn new(profile: DeviceProfile, capacity: u64, seed: u64) -> Result<Self> {
        profile.validate()?;
        if capacity == 0 {
            return Err(Error::InvalidArgument("device capacity must be > 0".into()));
        }
        let sigma = profile.sigma;
        let unit_service = LogNormal::new(-sigma * sigma / 2.0, sigma)
            .map_err(|e| Error::InvalidArgument(format!("sigma: {e}")))?;
        let state = SimState {
            store: PageStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            unit_service,
            channel_free: vec![0.0; profile.channels],
            inflight: BinaryHeap::new(),
            per_table: HashMap::new(),
            per_table_cap: profile.max_outstanding,
            max_tables: usize::MAX,
            clock: 0.0,
            first_submit: None,
            last_submit: 0.0,
            read_latency: LatencyRecorder::new(),
            reads: 0,
            writes: 0,
            bytes_transferred: 0,
            bytes_requested: 0,
            bytes_written: 0,
            rejected: 0,
            deferred: 0,
            errors: 0,
        };
        Ok(Self {
            profile,
            capacity,
            state: Mutex::new(state),
        })
    }

    fn channel_of(&self, offset: u64) -> usize {
        (mix64(offset / self.profile.block_bytes) % self.profile.channels as u64) as usize
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(Error::OutOfRange(format!(
                "[{offset}, +{len}) outside device capacity {}",
                self.capacity
            ))),
        }
    }

    fn validate_request(&self, r: &IoRequest) -> Result<()> {
        self.check_range(r.byte_offset, r.length)?;
        if r.subblock {
            if !self.profile.supports_subblock {
                return Err(Error::Unsupported(format!(
                    "profile {} has no sub-block reads",
                    self.profile.name
                )));
            }
            if !r.byte_offset.is_multiple_of(SUBBLOCK_ALIGN) || !r.length.is_multiple_of(SUBBLOCK_ALIGN) {
                return Err(Error::InvalidArgument(
                    "sub-block reads must be dword aligned".into(),
                ));
            }
        }
        Ok(())
    }

    fn issue_read(&self, st: &mut SimState, req: &IoRequest, at_us: f64) -> IoCompletion {
        if let Err(e) = self.validate_request(req) {
            st.errors += 1;
            return IoCompletion {
                request: req.clone(),
                data: Vec::new(),
                latency_us: 0.0,
                queued_us: 0.0,
                complete_at_us: at_us,
                bytes_transferred: 0,
                error: Some(e),
            };
        }
        st.drain(at_us);
        let mut issue = at_us;
        let mut deferred = false;
        while st.blocked(req.table_id, self.profile.max_outstanding) {
            let Reverse(done) = st.inflight.pop().expect("blocked implies in-flight work");
            st.release(done.table);
            issue = issue.max(done.finish);
            deferred = true;
        }
        if deferred {
            st.deferred += 1;
        }

        let transfer = req.transfer_bytes(self.profile.block_bytes);
        let mean = if req.subblock {
            self.profile.base_latency_us * self.profile.subblock_service_factor
        } else {
            self.profile.base_latency_us
        };
        let service = st.service_sample(mean);
        let ch = self.channel_of(req.byte_offset);
        let start = issue.max(st.channel_free[ch]);
        st.channel_free[ch] = start + service;
        let finish = start + service + self.profile.transfer_us(transfer);

        st.inflight.push(Reverse(InFlight {
            finish,
            table: req.table_id,
        }));
        *st.per_table.entry(req.table_id).or_insert(0) += 1;

        let mut data = vec![0u8; req.length as usize];
        st.store.read(req.byte_offset, &mut data);
        st.reads += 1;
        st.bytes_transferred += transfer;
        st.bytes_requested += req.length;
        st.read_latency.record(finish - issue);

        IoCompletion {
            request: req.clone(),
            data,
            latency_us: finish - issue,
            queued_us: issue - at_us,
            complete_at_us: finish,
            bytes_transferred: transfer,
            error: None,
        }
    }

    fn note_submit(st: &mut SimState, at_us: f64) {
        st.clock = st.clock.max(at_us);
        st.first_submit.get_or_insert(at_us);
        st.last_submit = st.last_submit.max(at_us);
    }

    /// Timed write: occupies the channels of every block it touches with
    /// write service time. Returns the completion time.
    pub fn write_region_at(&self, byte_offset: u64, data: &[u8], at_us: f64) -> Result<f64> {
        self.check_range(byte_offset, data.len() as u64)?;
        let mut st = self.state.lock();
        Self::note_submit(&mut st, at_us);
        st.store.write(byte_offset, data);
        st.writes += 1;
        st.bytes_written += data.len() as u64;
        let bb = self.profile.block_bytes;
        let first = byte_offset / bb;
        let mut done = at_us;
        for b in first..first + blocks_spanned(byte_offset, data.len() as u64, bb) {
            let service = st.service_sample(self.profile.write_latency_us);
            let ch = self.channel_of(b * bb);
            let start = at_us.max(st.channel_free[ch]);
            st.channel_free[ch] = start + service;
            done = done.max(start + service + self.profile.transfer_us(bb));
        }
        Ok(done)
    }
}

impl BlockDevice for SimDevice {
    fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn submit_reads(&self, requests: &[IoRequest], at_us: f64) -> Result<CompletionHandle> {
        let mut st = self.state.lock();
        Self::note_submit(&mut st, at_us);
        let completions = requests
            .iter()
            .map(|r| self.issue_read(&mut st, r, at_us))
            .collect();
        Ok(CompletionHandle::new(completions))
    }

    fn try_submit_reads(&self, requests: &[IoRequest], at_us: f64) -> Result<CompletionHandle> {
        let mut st = self.state.lock();
        st.drain(at_us);
        let total = st.inflight.len() + requests.len();
        if total > self.profile.max_outstanding {
            st.rejected += 1;
            return Err(Error::QueueFull {
                outstanding: st.inflight.len(),
                cap: self.profile.max_outstanding,
            });
        }
        let mut wanted: HashMap<u32, usize> = HashMap::new();
        for r in requests {
            *wanted.entry(r.table_id).or_insert(0) += 1;
        }
        let new_tables = wanted
            .keys()
            .filter(|t| !st.per_table.contains_key(t))
            .count();
        for (t, n) in &wanted {
            let have = st.per_table.get(t).copied().unwrap_or(0);
            if have + n > st.per_table_cap {
                st.rejected += 1;
                return Err(Error::QueueFull {
                    outstanding: have,
                    cap: st.per_table_cap,
                });
            }
        }
        if st.per_table.len() + new_tables > st.max_tables {
            st.rejected += 1;
            return Err(Error::QueueFull {
                outstanding: st.per_table.len(),
                cap: st.max_tables,
            });
        }
        Self::note_submit(&mut st, at_us);
        let completions = requests
            .iter()
            .map(|r| self.issue_read(&mut st, r, at_us))
            .collect();
        Ok(CompletionHandle::new(completions))
    }

    fn write_region(&self, byte_offset: u64, data: &[u8]) -> Result<()> {
        self.check_range(byte_offset, data.len() as u64)?;
        let mut st = self.state.lock();
        st.store.write(byte_offset, data);
        st.writes += 1;
        st.bytes_written += data.len() as u64;
        Ok(())
    }

    fn read_image(&self, byte_offset: u64, length: u64) -> Result<Vec<u8>> {
        self.check_range(byte_offset, length)?;
        let st = self.state.lock();
        let mut out = vec![0u8; length as usize];
        st.store.read(byte_offset, &mut out);
        Ok(out)
    }

    fn throttle_config(&self, per_table: usize, max_tables: usize) -> Result<()> {
        if per_table == 0 || max_tables == 0 {
            return Err(Error::InvalidArgument(
                "throttle caps must be positive".into(),
            ));
        }
        let mut st = self.state.lock();
        st.per_table_cap = per_table;
        st.max_tables = max_tables;
        Ok(())
    }

    fn stats(&self) -> DeviceStats {
        let mut st = self.state.lock();
        let span_us = st.first_submit.map_or(0.0, |f| st.last_submit - f);
        DeviceStats {
            reads: st.reads,
            writes: st.writes,
            bytes_transferred: st.bytes_transferred,
            bytes_requested: st.bytes_requested,
            bytes_written: st.bytes_written,
            read_latency: st.read_latency.summary(),
            rejected_for_queue_full: st.rejected,
            deferred: st.deferred,
            errors: st.errors,
            offered_iops: if span_us > 0.0 {
                st.reads as f64 / (span_us * 1e-6)
            } else {
                0.0
            },
        }
    }

    fn reset_stats(&self) {
        let mut st = self.state.lock();
        st.read_latency = LatencyRecorder::new();
        st.first_submit = None;
        st.last_submit = 0.0;
        st.reads = 0;
        st.writes = 0;
        st.bytes_transferred = 0;
        st.bytes_requested = 0;
        st.rejected = 0;
        st.deferred = 0;
        st.errors = 0;
        // bytes_written is the endurance counter and survives resets
    }

    fn clock_us(&self) -> f64 {
        self.state.lock().clock
    }
}

/// One point of a latency-vs-load curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub offered_iops: f64,
    pub latency: LatencySummary,
}

/// Open-loop Poisson load of single reads against a fresh device.
///
/// Arrival gaps and service draws come from fixed seeds, so points at
/// different loads share their random numbers and latency grows pathwise
/// with load. With `throttled = false` the outstanding caps are lifted.
/// `write_iops > 0` interleaves a second Poisson stream of block writes.
pub fn load_sweep(
    profile: &DeviceProfile,
    offered_iops: f64,
    requests: usize,
    request_bytes: u64,
    subblock: bool,
    throttled: bool,
    write_iops: f64,
    seed: u64,
) -> Result<SweepPoint> {
    if !(offered_iops > 0.0) {
        return Err(Error::InvalidArgument("offered load must be > 0".into()));
    }
    let mut profile = profile.clone();
    if !throttled {
        profile.max_outstanding = usize::MAX;
    }
    let capacity = 1u64 << 36;
    let dev = SimDevice::new(profile.clone(), capacity, seed)?;
    let mut arrivals = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_da11);
    let mut writes = ChaCha8Rng::seed_from_u64(seed ^ 0x00b1_17e5);
    let slots = capacity / request_bytes;
    let rate_per_us = offered_iops * 1e-6;
    let write_rate = write_iops * 1e-6;
    let mut t = 0.0;
    let mut next_write = if write_rate > 0.0 {
        Distribution::<f64>::sample(&Exp1, &mut writes) / write_rate
    } else {
        f64::INFINITY
    };
    let block = vec![0xa5u8; profile.block_bytes as usize];
    let wslots = capacity / profile.block_bytes;
    let mut lat = LatencyRecorder::new();
    for _ in 0..requests {
        let gap: f64 = Exp1.sample(&mut arrivals);
        t += gap / rate_per_us;
        while next_write <= t {
            let off = writes.random_range(0..wslots) * profile.block_bytes;
            dev.write_region_at(off, &block, next_write)?;
            next_write += Distribution::<f64>::sample(&Exp1, &mut writes) / write_rate;
        }
        let off = arrivals.random_range(0..slots) * request_bytes;
        let req = IoRequest::new(0, off, request_bytes, subblock);
        let h = dev.submit_reads(std::slice::from_ref(&req), t)?;
        for c in h.completions() {
            lat.record(c.latency_us);
        }
    }
    Ok(SweepPoint {
        offered_iops,
        latency: lat.summary(),
    })
}

/// Batches of `lookups_per_io` reads arriving as a Poisson stream; the
/// recorded latency is submit to last completion of each batch.
pub fn batch_latency_sweep(
    profile: &DeviceProfile,
    offered_iops: f64,
    batches: usize,
    lookups_per_io: usize,
    request_bytes: u64,
    subblock: bool,
    seed: u64,
) -> Result<SweepPoint> {
    let mut profile = profile.clone();
    profile.max_outstanding = usize::MAX;
    let capacity = 1u64 << 36;
    let dev = SimDevice::new(profile, capacity, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
    let slots = capacity / request_bytes;
    let rate_per_us = offered_iops * 1e-6 / lookups_per_io as f64;
    let mut t = 0.0;
    let mut lat = LatencyRecorder::new();
    for _ in 0..batches {
        let gap: f64 = Exp1.sample(&mut rng);
        t += gap / rate_per_us;
        let reqs: Vec<_> = (0..lookups_per_io)
            .map(|_| {
                IoRequest::new(
                    0,
                    rng.random_range(0..slots) * request_bytes,
                    request_bytes,
                    subblock,
                )
            })
            .collect();
        let h = dev.submit_reads(&reqs, t)?;
        lat.record(h.done_at().unwrap_or(t) - t);
    }
    Ok(SweepPoint {
        offered_iops,
        latency: lat.summary(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(p: DeviceProfile) -> SimDevice {
        SimDevice::new(p, 1 << 30, 42).unwrap()
    }

    #[test]
    fn readback_identity() {
        let d = dev(DeviceProfile::optane());
        let row: Vec<u8> = (0..72u8).collect();
        d.write_region(1000, &row).unwrap();
        let h = d
            .submit_reads(&[IoRequest::new(0, 1000, 72, false)], 0.0)
            .unwrap();
        assert_eq!(h.completions()[0].data, row);
        assert_eq!(d.read_image(1000, 72).unwrap(), row);
    }

    #[test]
    fn out_of_range_is_error_completion() {
        let d = SimDevice::new(DeviceProfile::optane(), 4096, 1).unwrap();
        let h = d
            .submit_reads(&[IoRequest::new(0, 4090, 72, false)], 0.0)
            .unwrap();
        assert!(matches!(
            h.completions()[0].error,
            Some(Error::OutOfRange(_))
        ));
        assert_eq!(d.stats().errors, 1);
        assert!(d.write_region(4090, &[1; 10]).is_err());
    }

    #[test]
    fn subblock_rules() {
        let nand = dev(DeviceProfile::nand());
        let h = nand
            .submit_reads(&[IoRequest::new(0, 0, 128, true)], 0.0)
            .unwrap();
        assert!(matches!(
            h.completions()[0].error,
            Some(Error::Unsupported(_))
        ));
        let opt = dev(DeviceProfile::optane());
        let h = opt
            .submit_reads(&[IoRequest::new(0, 2, 128, true)], 0.0)
            .unwrap();
        assert!(h.completions()[0].error.is_some());
    }

    #[test]
    fn twenty_subblock_reads_on_optane() {
        let d = dev(DeviceProfile::optane());
        let reqs: Vec<_> = (0..20)
            .map(|i| IoRequest::new(0, i * 4096 * 7, 128, true))
            .collect();
        let h = d.submit_reads(&reqs, 0.0).unwrap();
        let batch = h.done_at().unwrap();
        assert!((5.0..50.0).contains(&batch), "batch latency {batch}");
        assert_eq!(d.stats().bytes_transferred, 20 * 128);
    }

    #[test]
    fn twenty_block_reads_on_nand_amplify_32x() {
        let d = dev(DeviceProfile::nand());
        let reqs: Vec<_> = (0..20)
            .map(|i| IoRequest::new(0, i * 4096, 128, false))
            .collect();
        d.submit_reads(&reqs, 0.0).unwrap();
        let s = d.stats();
        assert_eq!(s.bytes_transferred, 20 * 4096);
        assert_eq!(s.read_amplification(), 32.0);
    }

    #[test]
    fn per_table_cap_serializes() {
        let d = dev(DeviceProfile::optane());
        d.throttle_config(1, 8).unwrap();
        let reqs: Vec<_> = (0..10)
            .map(|i| IoRequest::new(3, i * 512, 64, false))
            .collect();
        let h = d.submit_reads(&reqs, 0.0).unwrap();
        let mut spans: Vec<(f64, f64)> = h
            .completions()
            .iter()
            .map(|c| (c.complete_at_us - c.latency_us, c.complete_at_us))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            assert!(w[1].0 >= w[0].1, "overlap {:?}", w);
        }
        assert_eq!(d.stats().deferred, 9);
    }

    #[test]
    fn total_cap_defers_without_loss() {
        let mut p = DeviceProfile::optane();
        p.max_outstanding = 64;
        let d = SimDevice::new(p, 1 << 30, 3).unwrap();
        let reqs: Vec<_> = (0..128)
            .map(|i| IoRequest::new(i as u32, i * 512, 64, false))
            .collect();
        let h = d.submit_reads(&reqs, 0.0).unwrap();
        assert_eq!(h.len(), 128);
        assert!(h.completions().iter().all(|c| c.is_ok()));
        assert_eq!(d.stats().deferred, 64);
    }

    #[test]
    fn try_submit_signals_backpressure() {
        let mut p = DeviceProfile::optane();
        p.max_outstanding = 4;
        let d = SimDevice::new(p, 1 << 30, 3).unwrap();
        let reqs: Vec<_> = (0..4)
            .map(|i| IoRequest::new(0, i * 512, 64, false))
            .collect();
        d.try_submit_reads(&reqs, 0.0).unwrap();
        let err = d.try_submit_reads(&reqs[..1], 0.0).unwrap_err();
        assert!(matches!(err, Error::QueueFull { .. }));
        assert_eq!(d.stats().rejected_for_queue_full, 1);
        // once the first batch completes there is room again
        d.try_submit_reads(&reqs[..1], 1_000.0).unwrap();
    }

    #[test]
    fn throttle_rejects_zero() {
        let d = dev(DeviceProfile::nand());
        assert!(d.throttle_config(0, 1).is_err());
        assert!(d.throttle_config(1, 0).is_err());
    }

    #[test]
    fn sparse_endurance_counter() {
        let d = SimDevice::new(DeviceProfile::nand(), 2 << 30, 1).unwrap();
        let chunk = vec![0u8; 1 << 20];
        for i in 0..1024u64 {
            d.write_region(i << 20, &chunk).unwrap();
        }
        assert_eq!(d.stats().bytes_written, 1 << 30);
        d.reset_stats();
        assert_eq!(d.stats().bytes_written, 1 << 30);
    }

    #[test]
    fn unloaded_latency_is_base_plus_transfer() {
        let p = DeviceProfile::nand();
        let pt = load_sweep(&p, 1_000.0, 20_000, 128, false, false, 0.0, 9).unwrap();
        let expect = p.base_latency_us + p.transfer_us(4096);
        assert!(
            (pt.latency.mean / expect - 1.0).abs() < 0.03,
            "mean {} vs {}",
            pt.latency.mean,
            expect
        );
    }

    #[test]
    fn same_seed_same_samples() {
        let p = DeviceProfile::nand();
        let a = load_sweep(&p, 2e5, 5_000, 128, false, true, 0.0, 5).unwrap();
        let b = load_sweep(&p, 2e5, 5_000, 128, false, true, 0.0, 5).unwrap();
        assert_eq!(a, b);
    }
}
