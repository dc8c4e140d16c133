//! Memory devices, test patterns, flip records and the memory-region
//! abstraction shared by the simulator and the scanner.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU8, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datafiles::{self, DataError, DataSource};
use crate::physics::{EmissionLine, Particle};

pub const GIB: u64 = 1 << 30;

/// Highest energy at which legacy parts are known to upset.
pub const LEGACY_MAX_THRESHOLD_MEV: f64 = 1.4;
/// Lowest energy modern parts need before they upset at all.
pub const MODERN_MIN_THRESHOLD_MEV: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum MemError {
    #[error("invalid device: {0}")]
    InvalidDevice(String),
    #[error("unknown device preset `{0}`")]
    UnknownPreset(String),
    #[error("byte offset {offset} outside region of {len} bytes")]
    OffsetOutOfRange { offset: u64, len: u64 },
    #[error("bit index {0} outside 0..=7")]
    BitOutOfRange(u8),
    #[error("flip direction {direction} inconsistent with pattern {pattern} at bit {bit}")]
    InconsistentDirection {
        direction: FlipDirection,
        pattern: TestPattern,
        bit: u8,
    },
    #[error("invalid flip time {0}")]
    InvalidTime(f64),
    #[error("cannot allocate {bytes} bytes: {reason}")]
    Allocation { bytes: usize, reason: String },
    #[error("cannot lock {bytes} bytes in RAM ({reason}); raise RLIMIT_MEMLOCK (ulimit -l) or run with CAP_IPC_LOCK")]
    Lock { bytes: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Era {
    /// Parts from around 2003.
    Legacy,
    /// Dense parts from 2018 onward.
    Modern,
}

impl fmt::Display for Era {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Era::Legacy => "legacy",
            Era::Modern => "modern",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDevice {
    pub label: String,
    pub capacity_bytes: u64,
    /// Portion filled with the pattern and scanned, starting at offset 0.
    pub test_region_bytes: u64,
    pub era: Era,
    pub susceptibility_threshold_mev: f64,
    pub susceptible_particles: Vec<Particle>,
    pub refresh_interval_ms: f64,
}

impl MemoryDevice {
    pub fn new(spec: DeviceSpec) -> Result<Self, MemError> {
        let bad = |m: String| Err(MemError::InvalidDevice(m));
        if spec.capacity_bytes == 0 {
            return bad("capacity must be positive".into());
        }
        let test_region_bytes = spec.test_region_bytes.unwrap_or(spec.capacity_bytes);
        if test_region_bytes == 0 || test_region_bytes > spec.capacity_bytes {
            return bad(format!(
                "test region {test_region_bytes} must lie in 1..={}",
                spec.capacity_bytes
            ));
        }
        if !(spec.susceptibility_threshold_mev > 0.0) {
            return bad("susceptibility threshold must be positive".into());
        }
        if !(spec.refresh_interval_ms > 0.0) {
            return bad("refresh interval must be positive".into());
        }
        match spec.era {
            Era::Legacy if spec.susceptibility_threshold_mev > LEGACY_MAX_THRESHOLD_MEV => {
                return bad(format!(
                    "legacy threshold {} MeV above {LEGACY_MAX_THRESHOLD_MEV} MeV",
                    spec.susceptibility_threshold_mev
                ));
            }
            Era::Modern => {
                if spec.susceptibility_threshold_mev < MODERN_MIN_THRESHOLD_MEV {
                    return bad(format!(
                        "modern threshold {} MeV below {MODERN_MIN_THRESHOLD_MEV} MeV",
                        spec.susceptibility_threshold_mev
                    ));
                }
                if spec
                    .susceptible_particles
                    .iter()
                    .any(|p| *p != Particle::Neutron)
                {
                    return bad("modern parts only upset from neutrons".into());
                }
            }
            _ => {}
        }
        Ok(Self {
            label: spec.label,
            capacity_bytes: spec.capacity_bytes,
            test_region_bytes,
            era: spec.era,
            susceptibility_threshold_mev: spec.susceptibility_threshold_mev,
            susceptible_particles: spec.susceptible_particles,
            refresh_interval_ms: spec.refresh_interval_ms,
        })
    }

    pub fn test_region_gib(&self) -> f64 {
        self.test_region_bytes as f64 / GIB as f64
    }

    /// Whether the line can upset a cell of this device.
    pub fn is_susceptible(&self, line: &EmissionLine) -> bool {
        self.susceptible_particles.contains(&line.particle)
            && line.energy_mev >= self.susceptibility_threshold_mev
    }

    /// Copy of the device with a different test region size.
    pub fn with_test_region(&self, bytes: u64) -> Result<Self, MemError> {
        let mut spec = DeviceSpec::from(self.clone());
        spec.test_region_bytes = Some(bytes);
        Self::new(spec)
    }
}

/// Unvalidated device fields, as they appear in data files and configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    #[serde(default)]
    pub label: String,
    pub capacity_bytes: u64,
    #[serde(default)]
    pub test_region_bytes: Option<u64>,
    pub era: Era,
    pub susceptibility_threshold_mev: f64,
    pub susceptible_particles: Vec<Particle>,
    pub refresh_interval_ms: f64,
}

impl From<MemoryDevice> for DeviceSpec {
    fn from(d: MemoryDevice) -> Self {
        Self {
            label: d.label,
            capacity_bytes: d.capacity_bytes,
            test_region_bytes: Some(d.test_region_bytes),
            era: d.era,
            susceptibility_threshold_mev: d.susceptibility_threshold_mev,
            susceptible_particles: d.susceptible_particles,
            refresh_interval_ms: d.refresh_interval_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevicePreset {
    T41p1gb,
    Rpi4_4gb,
    Rpi4b8gb,
}

impl DevicePreset {
    pub const ALL: [DevicePreset; 3] = [Self::T41p1gb, Self::Rpi4_4gb, Self::Rpi4b8gb];

    pub fn key(self) -> &'static str {
        match self {
            Self::T41p1gb => "t41p_1gb",
            Self::Rpi4_4gb => "rpi4_4gb",
            Self::Rpi4b8gb => "rpi4b_8gb",
        }
    }
}

impl FromStr for DevicePreset {
    type Err = MemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| MemError::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct PresetRecord {
    preset: String,
    #[serde(flatten)]
    spec: DeviceSpec,
}

#[derive(Debug, Deserialize)]
struct DeviceFile {
    device: Vec<PresetRecord>,
}

/// Device presets keyed by name.
#[derive(Debug, Clone)]
pub struct DeviceCatalog {
    devices: Vec<(String, MemoryDevice)>,
}

impl DeviceCatalog {
    pub fn builtin() -> Self {
        Self::load(&DataSource::embedded()).expect("embedded device presets are valid")
    }

    pub fn load(source: &DataSource) -> Result<Self, DataError> {
        let file: DeviceFile = source.parse(datafiles::DEVICES)?;
        let devices = file
            .device
            .into_iter()
            .map(|r| {
                MemoryDevice::new(r.spec)
                    .map(|d| (r.preset, d))
                    .map_err(|e| DataError::Invalid {
                        file: datafiles::DEVICES.into(),
                        message: e.to_string(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { devices })
    }

    pub fn get(&self, preset: &str) -> Result<&MemoryDevice, MemError> {
        self.devices
            .iter()
            .find(|(name, _)| name == preset)
            .map(|(_, d)| d)
            .ok_or_else(|| MemError::UnknownPreset(preset.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.devices.iter().map(|(n, _)| n.as_str())
    }
}

pub fn make_device(preset: DevicePreset) -> MemoryDevice {
    DeviceCatalog::builtin()
        .get(preset.key())
        .expect("every preset has a data record")
        .clone()
}

/// Byte value a region is filled with before exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestPattern(pub u8);

impl TestPattern {
    pub const ONES: TestPattern = TestPattern(0xFF);
    pub const ZEROS: TestPattern = TestPattern(0x00);
    pub const LETTER_A: TestPattern = TestPattern(0x41);
    pub const CANONICAL: [TestPattern; 3] = [Self::ONES, Self::ZEROS, Self::LETTER_A];

    pub fn byte(self) -> u8 {
        self.0
    }

    pub fn bit(self, bit_index: u8) -> bool {
        self.0 >> bit_index & 1 == 1
    }
}

impl fmt::Display for TestPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02X}", self.0)
    }
}

impl FromStr for TestPattern {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let v = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(hex) => u8::from_str_radix(hex, 16)?,
            None => s.parse()?,
        };
        Ok(TestPattern(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    OneToZero,
    ZeroToOne,
}

impl fmt::Display for FlipDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipDirection::OneToZero => "one_to_zero",
            FlipDirection::ZeroToOne => "zero_to_one",
        })
    }
}

pub fn expected_direction(pattern: TestPattern, bit_index: u8) -> FlipDirection {
    debug_assert!(bit_index < 8);
    if pattern.bit(bit_index) {
        FlipDirection::OneToZero
    } else {
        FlipDirection::ZeroToOne
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionStatus {
    Pending,
    Detected,
    Missed,
}

/// One single-event upset.
///
/// `direction` names the transition away from the pattern value of the
/// struck bit. Consumers apply each event as a toggle of the cell's
/// current state, so a second strike on an already flipped bit restores
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipEvent {
    t_s: f64,
    byte_offset: u64,
    bit_index: u8,
    direction: FlipDirection,
    detected: DetectionStatus,
}

impl FlipEvent {
    /// Flip with the direction implied by `pattern`.
    pub fn new(
        t_s: f64,
        byte_offset: u64,
        bit_index: u8,
        pattern: TestPattern,
        region_len: u64,
    ) -> Result<Self, MemError> {
        if bit_index > 7 {
            return Err(MemError::BitOutOfRange(bit_index));
        }
        Self::with_direction(
            t_s,
            byte_offset,
            bit_index,
            expected_direction(pattern, bit_index),
            pattern,
            region_len,
        )
    }

    pub fn with_direction(
        t_s: f64,
        byte_offset: u64,
        bit_index: u8,
        direction: FlipDirection,
        pattern: TestPattern,
        region_len: u64,
    ) -> Result<Self, MemError> {
        let ev = Self {
            t_s,
            byte_offset,
            bit_index,
            direction,
            detected: DetectionStatus::Pending,
        };
        ev.validate(pattern, region_len)?;
        Ok(ev)
    }

    /// Checks the record against the pattern and region it claims to
    /// belong to. Deserialized events go through here before use.
    pub fn validate(&self, pattern: TestPattern, region_len: u64) -> Result<(), MemError> {
        if !(self.t_s >= 0.0 && self.t_s.is_finite()) {
            return Err(MemError::InvalidTime(self.t_s));
        }
        if self.byte_offset >= region_len {
            return Err(MemError::OffsetOutOfRange {
                offset: self.byte_offset,
                len: region_len,
            });
        }
        if self.bit_index > 7 {
            return Err(MemError::BitOutOfRange(self.bit_index));
        }
        if expected_direction(pattern, self.bit_index) != self.direction {
            return Err(MemError::InconsistentDirection {
                direction: self.direction,
                pattern,
                bit: self.bit_index,
            });
        }
        Ok(())
    }

    pub fn t_s(&self) -> f64 {
        self.t_s
    }

    pub fn byte_offset(&self) -> u64 {
        self.byte_offset
    }

    pub fn bit_index(&self) -> u8 {
        self.bit_index
    }

    pub fn mask(&self) -> u8 {
        1 << self.bit_index
    }

    pub fn direction(&self) -> FlipDirection {
        self.direction
    }

    pub fn status(&self) -> DetectionStatus {
        self.detected
    }

    pub fn with_status(self, detected: DetectionStatus) -> Self {
        Self { detected, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backing {
    RealBuffer,
    Simulated,
}

/// Byte-addressable memory that the scanner fills and reads.
///
/// One owner mutates a region at a time. `read` after `write` at the same
/// offset returns the written value unless a flip was injected between.
pub trait MemoryRegion {
    fn len(&self) -> usize;
    fn backing(&self) -> Backing;
    fn read(&self, offset: usize) -> u8;
    fn write(&mut self, offset: usize, value: u8);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fill_with(&mut self, value: u8) {
        for i in 0..self.len() {
            self.write(i, value);
        }
    }

    fn toggle_bit(&mut self, offset: usize, bit: u8) {
        let v = self.read(offset);
        self.write(offset, v ^ (1 << bit));
    }
}

/// Sparse in-memory region: a uniform fill plus the bytes that differ.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRegion {
    len: usize,
    fill: u8,
    diffs: HashMap<usize, u8>,
}

impl SimulatedRegion {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            fill: 0,
            diffs: HashMap::new(),
        }
    }

    /// Offsets whose value differs from the last uniform fill, ascending.
    pub fn dirty_offsets(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.diffs.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

impl MemoryRegion for SimulatedRegion {
    fn len(&self) -> usize {
        self.len
    }

    fn backing(&self) -> Backing {
        Backing::Simulated
    }

    fn read(&self, offset: usize) -> u8 {
        assert!(offset < self.len, "offset {offset} out of range");
        self.diffs.get(&offset).copied().unwrap_or(self.fill)
    }

    fn write(&mut self, offset: usize, value: u8) {
        assert!(offset < self.len, "offset {offset} out of range");
        if value == self.fill {
            self.diffs.remove(&offset);
        } else {
            self.diffs.insert(offset, value);
        }
    }

    fn fill_with(&mut self, value: u8) {
        self.fill = value;
        self.diffs.clear();
    }
}

/// Heap allocation scanned in place. Bytes are atomics so a second
/// thread may toggle pre-agreed bytes while the owner scans.
pub struct RealBuffer {
    bytes: Box<[AtomicU8]>,
    locked: bool,
}

impl fmt::Debug for RealBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RealBuffer")
            .field("len", &self.bytes.len())
            .field("locked", &self.locked)
            .finish()
    }
}

impl RealBuffer {
    pub fn allocate(len: usize) -> Result<Self, MemError> {
        if let Some(phys) = physical_memory_bytes() {
            if len as u64 > phys {
                return Err(MemError::Allocation {
                    bytes: len,
                    reason: format!("exceeds the {phys} bytes of physical memory"),
                });
            }
        }
        let mut v: Vec<AtomicU8> = Vec::new();
        v.try_reserve_exact(len).map_err(|e| MemError::Allocation {
            bytes: len,
            reason: e.to_string(),
        })?;
        v.extend((0..len).map(|_| AtomicU8::new(0)));
        Ok(Self {
            bytes: v.into_boxed_slice(),
            locked: false,
        })
    }

    /// Pins the buffer in RAM so the pages cannot be swapped out mid-scan.
    pub fn lock(&mut self) -> Result<(), MemError> {
        if self.locked || self.bytes.is_empty() {
            return Ok(());
        }
        // SAFETY: the pointer and length describe our own live allocation.
        let rc = unsafe { libc::mlock(self.bytes.as_ptr().cast(), self.bytes.len()) };
        if rc != 0 {
            return Err(MemError::Lock {
                bytes: self.bytes.len(),
                reason: std::io::Error::last_os_error().to_string(),
            });
        }
        self.locked = true;
        Ok(())
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    /// Toggle through a shared reference, used by the self-test writer.
    pub fn toggle_shared(&self, offset: usize, bit: u8) {
        self.bytes[offset].fetch_xor(1 << bit, Ordering::SeqCst);
    }

    pub fn load(&self, offset: usize) -> u8 {
        self.bytes[offset].load(Ordering::Relaxed)
    }

    pub fn store_shared(&self, offset: usize, value: u8) {
        self.bytes[offset].store(value, Ordering::Relaxed);
    }
}

fn physical_memory_bytes() -> Option<u64> {
    // SAFETY: sysconf has no preconditions.
    let (pages, size) = unsafe { (libc::sysconf(libc::_SC_PHYS_PAGES), libc::sysconf(libc::_SC_PAGESIZE)) };
    (pages > 0 && size > 0).then(|| pages as u64 * size as u64)
}

impl Drop for RealBuffer {
    fn drop(&mut self) {
        if self.locked {
            // SAFETY: same range that was locked in `lock`.
            unsafe {
                libc::munlock(self.bytes.as_ptr().cast(), self.bytes.len());
            }
        }
    }
}

impl MemoryRegion for RealBuffer {
    fn len(&self) -> usize {
        self.bytes.len()
    }

    fn backing(&self) -> Backing {
        Backing::RealBuffer
    }

    fn read(&self, offset: usize) -> u8 {
        self.bytes[offset].load(Ordering::Relaxed)
    }

    fn write(&mut self, offset: usize, value: u8) {
        self.bytes[offset].store(value, Ordering::Relaxed);
    }
}
