use std::alloc::{alloc_zeroed, dealloc, Layout};
use std::fs::{File, OpenOptions};
use std::os::unix::fs::{FileExt, OpenOptionsExt};
use std::path::Path;
use std::time::Instant;

use parking_lot::Mutex;

use super::{
    blocks_spanned, BlockDevice, CompletionHandle, DeviceProfile, DeviceStats, IoCompletion,
    IoRequest,
};
use crate::error::{Error, Result};
use crate::stats::LatencyRecorder;

/// Block-aligned heap buffer, required by `O_DIRECT`.
struct AlignedBuf {
    ptr: *mut u8,
    layout: Layout,
}

impl AlignedBuf {
    fn new(len: usize, align: usize) -> Self {
        let layout = Layout::from_size_align(len.max(align), align).expect("valid layout");
        // SAFETY: layout has non-zero size.
        let ptr = unsafe { alloc_zeroed(layout) };
        assert!(!ptr.is_null(), "allocation failed");
        Self { ptr, layout }
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        // SAFETY: ptr is valid for layout.size() bytes and uniquely owned.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.layout.size()) }
    }
}

impl Drop for AlignedBuf {
    fn drop(&mut self) {
        // SAFETY: allocated with the same layout in `new`.
        unsafe { dealloc(self.ptr, self.layout) }
    }
}

#[derive(Default)]
struct FileStats {
    lat: LatencyRecorder,
    reads: u64,
    writes: u64,
    bytes_transferred: u64,
    bytes_requested: u64,
    bytes_written: u64,
    errors: u64,
}

/// Device image in a regular file, read with `O_DIRECT` at block
/// granularity. Sub-block requests are served by reading whole blocks and
/// discarding the rest, so transfer accounting is always whole-block.
/// Latencies are wall-clock; `at_us` only offsets completion times.
pub struct FileDevice {
    file: File,
    profile: DeviceProfile,
    capacity: u64,
    stats: Mutex<FileStats>,
    // serializes read-modify-write of partial blocks
    write_lock: Mutex<()>,
}

impl FileDevice {
    /// Creates (or reuses) `path` sized to `capacity`, rounded up to whole
    /// blocks. Fails with [`Error::Unsupported`] when the filesystem
    /// refuses unbuffered IO.
    pub fn open(path: &Path, profile: DeviceProfile, capacity: u64) -> Result<Self> {
        profile.validate()?;
        let bb = profile.block_bytes;
        let capacity = capacity.div_ceil(bb) * bb;
        {
            let f = OpenOptions::new()
                .create(true)
                .truncate(false)
                .read(true)
                .write(true)
                .open(path)?;
            if f.metadata()?.len() < capacity {
                f.set_len(capacity)?;
            }
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .custom_flags(libc::O_DIRECT)
            .open(path)
            .map_err(|e| Error::Unsupported(format!("O_DIRECT open of {}: {e}", path.display())))?;
        let dev = Self {
            file,
            profile,
            capacity,
            stats: Mutex::new(FileStats::default()),
            write_lock: Mutex::new(()),
        };
        // some filesystems accept the flag but fail the first aligned read
        let mut probe = AlignedBuf::new(bb as usize, bb as usize);
        dev.file
            .read_exact_at(probe.as_mut_slice(), 0)
            .map_err(|e| Error::Unsupported(format!("O_DIRECT read: {e}")))?;
        Ok(dev)
    }

    fn read_blocks(&self, offset: u64, len: u64) -> Result<(Vec<u8>, u64)> {
        let bb = self.profile.block_bytes;
        let first = offset / bb;
        let n = blocks_spanned(offset, len, bb);
        let mut buf = AlignedBuf::new((n * bb) as usize, bb as usize);
        let slice = &mut buf.as_mut_slice()[..(n * bb) as usize];
        self.file.read_exact_at(slice, first * bb)?;
        let skip = (offset - first * bb) as usize;
        Ok((slice[skip..skip + len as usize].to_vec(), n * bb))
    }
}

impl BlockDevice for FileDevice {
    fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn submit_reads(&self, requests: &[IoRequest], at_us: f64) -> Result<CompletionHandle> {
        let mut out = Vec::with_capacity(requests.len());
        for r in requests {
            let t0 = Instant::now();
            let res = if r
                .byte_offset
                .checked_add(r.length)
                .is_none_or(|e| e > self.capacity)
            {
                Err(Error::OutOfRange(format!(
                    "[{}, +{}) outside {}",
                    r.byte_offset, r.length, self.capacity
                )))
            } else {
                self.read_blocks(r.byte_offset, r.length)
            };
            let us = t0.elapsed().as_secs_f64() * 1e6;
            let mut st = self.stats.lock();
            match res {
                Ok((data, transferred)) => {
                    st.reads += 1;
                    st.bytes_requested += r.length;
                    st.bytes_transferred += transferred;
                    st.lat.record(us);
                    out.push(IoCompletion {
                        request: r.clone(),
                        data,
                        latency_us: us,
                        queued_us: 0.0,
                        complete_at_us: at_us + us,
                        bytes_transferred: transferred,
                        error: None,
                    });
                }
                Err(e) => {
                    st.errors += 1;
                    out.push(IoCompletion {
                        request: r.clone(),
                        data: Vec::new(),
                        latency_us: 0.0,
                        queued_us: 0.0,
                        complete_at_us: at_us,
                        bytes_transferred: 0,
                        error: Some(e),
                    });
                }
            }
        }
        Ok(CompletionHandle::new(out))
    }

    fn write_region(&self, byte_offset: u64, data: &[u8]) -> Result<()> {
        let end = byte_offset
            .checked_add(data.len() as u64)
            .filter(|&e| e <= self.capacity)
            .ok_or_else(|| Error::OutOfRange(format!("write end beyond {}", self.capacity)))?;
        if data.is_empty() {
            return Ok(());
        }
        let bb = self.profile.block_bytes;
        let first = byte_offset / bb;
        let n = blocks_spanned(byte_offset, end - byte_offset, bb);
        let _guard = self.write_lock.lock();
        let mut buf = AlignedBuf::new((n * bb) as usize, bb as usize);
        let slice = &mut buf.as_mut_slice()[..(n * bb) as usize];
        self.file.read_exact_at(slice, first * bb)?;
        let skip = (byte_offset - first * bb) as usize;
        slice[skip..skip + data.len()].copy_from_slice(data);
        self.file.write_all_at(slice, first * bb)?;
        let mut st = self.stats.lock();
        st.writes += 1;
        st.bytes_written += data.len() as u64;
        Ok(())
    }

    fn read_image(&self, byte_offset: u64, length: u64) -> Result<Vec<u8>> {
        if byte_offset
            .checked_add(length)
            .is_none_or(|e| e > self.capacity)
        {
            return Err(Error::OutOfRange(format!("read beyond {}", self.capacity)));
        }
        if length == 0 {
            return Ok(Vec::new());
        }
        self.read_blocks(byte_offset, length).map(|(d, _)| d)
    }

    fn throttle_config(&self, per_table: usize, max_tables: usize) -> Result<()> {
        if per_table == 0 || max_tables == 0 {
            return Err(Error::InvalidArgument(
                "throttle caps must be positive".into(),
            ));
        }
        // reads are synchronous; at most one is outstanding
        Ok(())
    }

    fn stats(&self) -> DeviceStats {
        let mut st = self.stats.lock();
        DeviceStats {
            reads: st.reads,
            writes: st.writes,
            bytes_transferred: st.bytes_transferred,
            bytes_requested: st.bytes_requested,
            bytes_written: st.bytes_written,
            read_latency: st.lat.summary(),
            errors: st.errors,
            ..DeviceStats::default()
        }
    }

    fn reset_stats(&self) {
        let mut st = self.stats.lock();
        let written = st.bytes_written;
        *st = FileStats {
            bytes_written: written,
            ..FileStats::default()
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_readback_when_direct_io_available() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("image.bin");
        let dev = match FileDevice::open(&path, DeviceProfile::nand(), 1 << 20) {
            Ok(d) => d,
            Err(Error::Unsupported(msg)) => {
                eprintln!("skipping: {msg}");
                return;
            }
            Err(e) => panic!("{e}"),
        };
        let row: Vec<u8> = (0..72u8).collect();
        dev.write_region(4090, &row).unwrap();
        let h = dev
            .submit_reads(&[IoRequest::new(0, 4090, 72, true)], 0.0)
            .unwrap();
        let c = &h.completions()[0];
        assert_eq!(c.data, row);
        assert_eq!(c.bytes_transferred, 8192);
        assert_eq!(dev.read_image(4090, 72).unwrap(), row);
    }
}
