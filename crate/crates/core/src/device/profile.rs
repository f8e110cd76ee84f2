use crate::error::{Error, Result};

/// Parametric description of a slow-memory device.
///
/// Channels are parallel service units. The mean read service time equals
/// `base_latency_us`, so `channels / base_latency` is the saturation rate;
/// [`DeviceProfile::validate`] holds the two within 5%.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub saturation_iops: f64,
    pub base_latency_us: f64,
    /// Mean service time of one block-sized write.
    pub write_latency_us: f64,
    pub block_bytes: u64,
    pub supports_subblock: bool,
    pub link_bytes_per_us: f64,
    pub pdwpd: f64,
    pub max_outstanding: usize,
    pub channels: usize,
    /// Lognormal shape of the service-time distribution.
    pub sigma: f64,
    /// Service-time multiplier applied to sub-block reads.
    pub subblock_service_factor: f64,
}

impl DeviceProfile {
    /// PCIe Nand flash: 0.5M IOPS, O(100) us, 4 KiB blocks, pDWPD ~5.
    pub fn nand() -> Self {
        let mut p = Self {
            name: "nand".into(),
            saturation_iops: 0.5e6,
            base_latency_us: 100.0,
            write_latency_us: 400.0,
            block_bytes: 4096,
            supports_subblock: false,
            link_bytes_per_us: 3500.0,
            pdwpd: 5.0,
            max_outstanding: 0,
            channels: 0,
            sigma: 0.35,
            subblock_service_factor: 0.96,
        };
        p.channels = p.calibrated_channels();
        // throttle at 75% of saturation
        p.max_outstanding = ((p.channels as f64) * 0.75).ceil() as usize;
        p
    }

    /// PCIe 3DXP (Optane): 4M IOPS, O(10) us, 512 B blocks, pDWPD 100.
    pub fn optane() -> Self {
        let mut p = Self {
            name: "optane".into(),
            saturation_iops: 4.0e6,
            base_latency_us: 10.0,
            write_latency_us: 12.0,
            block_bytes: 512,
            supports_subblock: true,
            link_bytes_per_us: 3500.0,
            pdwpd: 100.0,
            max_outstanding: 1024,
            channels: 0,
            sigma: 0.1,
            subblock_service_factor: 0.96,
        };
        p.channels = p.calibrated_channels();
        p
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nand" => Ok(Self::nand()),
            "optane" => Ok(Self::optane()),
            other => Err(Error::InvalidArgument(format!(
                "unknown device profile `{other}` (expected nand or optane)"
            ))),
        }
    }

    /// Channel count that makes `channels / base_latency` hit saturation.
    pub fn calibrated_channels(&self) -> usize {
        ((self.saturation_iops * self.base_latency_us * 1e-6).round() as usize).max(1)
    }

    pub fn transfer_us(&self, bytes: u64) -> f64 {
        bytes as f64 / self.link_bytes_per_us
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::InvalidArgument(format!(
                "profile {}: {m}",
                self.name
            )))
        };
        if !(self.saturation_iops > 0.0) {
            return bad("saturation_iops must be > 0");
        }
        if !(self.base_latency_us > 0.0) || !(self.write_latency_us > 0.0) {
            return bad("latencies must be > 0");
        }
        if self.block_bytes != 512 && self.block_bytes != 4096 {
            return bad("block_bytes must be 512 or 4096");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        if self.max_outstanding == 0 {
            return bad("max_outstanding must be >= 1");
        }
        if !(self.link_bytes_per_us > 0.0) || !(self.pdwpd > 0.0) {
            return bad("link rate and pdwpd must be > 0");
        }
        if !(self.sigma >= 0.0) || !(self.subblock_service_factor > 0.0) {
            return bad("sigma must be >= 0 and subblock factor > 0");
        }
        let implied = self.channels as f64 / (self.base_latency_us * 1e-6);
        if (implied / self.saturation_iops - 1.0).abs() > 0.05 {
            return bad(&format!(
                "channels/service time gives {implied:.0} IOPS, not within 5% of {}",
                self.saturation_iops
            ));
        }
        Ok(())
    }
}
