//! A deterministic miniature machine: physical pages, single-level page
//! tables and a handful of processes.
//!
//! Page-table entries are 8 bytes, little endian:
//!
//! | bits             | meaning                         |
//! |------------------|---------------------------------|
//! | 0                | present                         |
//! | 1                | writable                        |
//! | 2                | user accessible                 |
//! | 3..12            | reserved, must be zero          |
//! | 12..12+F         | frame number (F = frame bits)   |
//! | 12+F..64         | reserved, must be zero          |
//!
//! A process's page table is a list of page-table frames; virtual page
//! `v` lives in entry `v % 512` of frame `page_table[v / 512]`. The list
//! itself sits outside physical memory and cannot be hit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabError;
use crate::datafiles::{self, DataError, DataSource};

pub const PAGE_SIZE: u64 = 4096;
pub const PTE_SIZE: u64 = 8;
pub const PTES_PER_PAGE: u64 = PAGE_SIZE / PTE_SIZE;
pub const DEFAULT_PHYS_BYTES: u64 = 16 << 20;

pub const PTE_PRESENT: u64 = 1 << 0;
pub const PTE_WRITABLE: u64 = 1 << 1;
pub const PTE_USER: u64 = 1 << 2;
pub const PTE_FLAGS: u64 = PTE_PRESENT | PTE_WRITABLE | PTE_USER;
pub const FRAME_SHIFT: u32 = 12;

/// Physical byte offset of the unlock flag word in the bare-metal image.
pub const BARE_METAL_FLAG_OFFSET: u64 = 0x0020_0040;
/// Bit of the flag word that the boot code tests before unlocking.
pub const BARE_METAL_UNLOCK_BIT: u8 = 0;
/// Locked value of the flag word.
pub const BARE_METAL_LOCKED_WORD: u32 = 0xA5A5_5A5A;

const PING_CODE_PAGES: u64 = 8;
const PING_DATA_PAGES: u64 = 4;
const PING_STACK_PAGES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageTag {
    Unallocated,
    PtPage,
    CodePage,
    DataPage,
    /// Holds the bare-metal unlock flag.
    FlagPage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeKind {
    Code,
    Data,
    Stack,
    Spray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappedRange {
    pub kind: RangeKind,
    pub first_vpage: u64,
    pub pages: u64,
}

impl MappedRange {
    pub fn contains(&self, vpage: u64) -> bool {
        vpage >= self.first_vpage && vpage < self.first_vpage + self.pages
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Process {
    pub pid: u32,
    pub name: String,
    pub privileged: bool,
    /// Page-table frames, in virtual order.
    pub page_table: Vec<u64>,
    pub ranges: Vec<MappedRange>,
}

impl Process {
    /// Virtual pages the process touches while it runs. Only the
    /// privileged target has one.
    pub fn on_execution_path(&self, vpage: u64) -> bool {
        self.privileged
            && self
                .ranges
                .iter()
                .any(|r| r.kind != RangeKind::Spray && r.contains(vpage))
    }

    pub fn range(&self, kind: RangeKind) -> Option<&MappedRange> {
        self.ranges.iter().find(|r| r.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureName {
    SuidPing,
    BareMetalFirmware,
}

impl FixtureName {
    pub fn key(self) -> &'static str {
        match self {
            FixtureName::SuidPing => "suid_ping",
            FixtureName::BareMetalFirmware => "bare_metal_firmware",
        }
    }
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for FixtureName {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "suid_ping" => Ok(FixtureName::SuidPing),
            "bare_metal_firmware" => Ok(FixtureName::BareMetalFirmware),
            other => Err(LabError::UnknownFixture(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureParams {
    #[serde(default = "default_phys")]
    pub phys_bytes: u64,
    /// Share of the free frames the attacker turns into page tables.
    #[serde(default)]
    pub spray_fraction: f64,
    #[serde(default)]
    pub layout_seed: u64,
}

fn default_phys() -> u64 {
    DEFAULT_PHYS_BYTES
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            phys_bytes: DEFAULT_PHYS_BYTES,
            spray_fraction: 0.0,
            layout_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NamedFixture {
    pub name: FixtureName,
    #[serde(flatten)]
    pub params: FixtureParams,
}

#[derive(Deserialize)]
struct FixtureFile {
    fixture: BTreeMap<String, NamedFixture>,
}

/// Named fixture parameter sets from `fixtures.toml`.
pub fn load_fixtures(source: &DataSource) -> Result<BTreeMap<String, NamedFixture>, DataError> {
    Ok(source.parse::<FixtureFile>(datafiles::FIXTURES)?.fixture)
}

/// Decoded page-table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pte {
    pub present: bool,
    pub writable: bool,
    pub user: bool,
    pub frame: u64,
    /// Any must-be-zero bit set.
    pub reserved: bool,
}

/// Immutable part of a machine, shared between all its variants.
#[derive(Debug, PartialEq)]
struct Layout {
    fixture: FixtureName,
    params: FixtureParams,
    frame_bits: u32,
    tags: Vec<PageTag>,
    processes: Vec<Process>,
    /// page-table frame -> (process index, index within its page table)
    pt_owner: Vec<Option<(usize, u64)>>,
    baseline: Vec<u8>,
    flag_offset: Option<u64>,
    attacker_target_frame: Option<u64>,
}

/// A fixture plus the bytes flipped since it was built.
#[derive(Debug, Clone)]
pub struct ToyMachine {
    layout: Arc<Layout>,
    overlay: BTreeMap<u64, u8>,
}

impl PartialEq for ToyMachine {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout)
            && self.overlay == other.overlay
    }
}

impl ToyMachine {
    pub fn fixture(&self) -> FixtureName {
        self.layout.fixture
    }

    pub fn params(&self) -> FixtureParams {
        self.layout.params
    }

    pub fn phys_bytes(&self) -> u64 {
        self.layout.baseline.len() as u64
    }

    pub fn frames(&self) -> u64 {
        self.layout.tags.len() as u64
    }

    pub fn frame_bits(&self) -> u32 {
        self.layout.frame_bits
    }

    pub fn tags(&self) -> &[PageTag] {
        &self.layout.tags
    }

    pub fn tag(&self, frame: u64) -> PageTag {
        self.layout.tags[frame as usize]
    }

    pub fn frames_tagged(&self, tag: PageTag) -> impl Iterator<Item = u64> + '_ {
        self.layout
            .tags
            .iter()
            .enumerate()
            .filter(move |(_, t)| **t == tag)
            .map(|(i, _)| i as u64)
    }

    pub fn processes(&self) -> &[Process] {
        &self.layout.processes
    }

    /// The privileged program under attack.
    pub fn target(&self) -> &Process {
        self.layout
            .processes
            .iter()
            .find(|p| p.privileged)
            .expect("every fixture has a privileged target")
    }

    pub fn attacker(&self) -> Option<&Process> {
        self.layout.processes.iter().find(|p| !p.privileged)
    }

    /// Frame every sprayed entry maps.
    pub fn attacker_target_frame(&self) -> Option<u64> {
        self.layout.attacker_target_frame
    }

    pub fn flag_offset(&self) -> Option<u64> {
        self.layout.flag_offset
    }

    /// Which process owns a page-table frame, and its slot in that table.
    pub fn pt_owner(&self, frame: u64) -> Option<(&Process, u64)> {
        self.layout.pt_owner[frame as usize].map(|(p, idx)| (&self.layout.processes[p], idx))
    }

    /// Bytes that differ from the fixture as built.
    pub fn flipped_bytes(&self) -> &BTreeMap<u64, u8> {
        &self.overlay
    }

    pub fn is_pristine(&self) -> bool {
        self.overlay.is_empty()
    }

    pub fn read_byte(&self, offset: u64) -> u8 {
        self.overlay
            .get(&offset)
            .copied()
            .unwrap_or(self.layout.baseline[offset as usize])
    }

    pub fn baseline_byte(&self, offset: u64) -> u8 {
        self.layout.baseline[offset as usize]
    }

    pub fn read_u64(&self, offset: u64) -> u64 {
        let mut b = [0u8; 8];
        for (i, byte) in b.iter_mut().enumerate() {
            *byte = self.read_byte(offset + i as u64);
        }
        u64::from_le_bytes(b)
    }

    fn baseline_u64(&self, offset: u64) -> u64 {
        let o = offset as usize;
        u64::from_le_bytes(self.layout.baseline[o..o + 8].try_into().unwrap())
    }

    pub fn decode_pte(&self, raw: u64) -> Pte {
        let frame_mask = (1u64 << self.layout.frame_bits) - 1;
        let known = PTE_FLAGS | (frame_mask << FRAME_SHIFT);
        Pte {
            present: raw & PTE_PRESENT != 0,
            writable: raw & PTE_WRITABLE != 0,
            user: raw & PTE_USER != 0,
            frame: (raw >> FRAME_SHIFT) & frame_mask,
            reserved: raw & !known != 0,
        }
    }

    pub fn pte(&self, entry_offset: u64) -> Pte {
        self.decode_pte(self.read_u64(entry_offset))
    }

    pub fn baseline_pte(&self, entry_offset: u64) -> Pte {
        self.decode_pte(self.baseline_u64(entry_offset))
    }

    /// Physical byte offset of the entry translating `vpage` for `pid`.
    pub fn pte_offset(&self, pid: u32, vpage: u64) -> Option<u64> {
        let p = self.layout.processes.iter().find(|p| p.pid == pid)?;
        let frame = *p.page_table.get((vpage / PTES_PER_PAGE) as usize)?;
        Some(frame * PAGE_SIZE + (vpage % PTES_PER_PAGE) * PTE_SIZE)
    }

    /// Copy of the machine with one bit inverted.
    pub fn inject_flip(&self, phys_byte: u64, bit: u8) -> Result<ToyMachine, LabError> {
        let mut m = self.clone();
        m.toggle(phys_byte, bit)?;
        Ok(m)
    }

    /// In-place variant of [`inject_flip`](Self::inject_flip).
    pub fn toggle(&mut self, phys_byte: u64, bit: u8) -> Result<(), LabError> {
        if phys_byte >= self.phys_bytes() {
            return Err(LabError::AddressOutOfRange {
                offset: phys_byte,
                len: self.phys_bytes(),
            });
        }
        if bit > 7 {
            return Err(LabError::BitOutOfRange(bit));
        }
        let v = self.read_byte(phys_byte) ^ (1 << bit);
        if v == self.baseline_byte(phys_byte) {
            self.overlay.remove(&phys_byte);
        } else {
            self.overlay.insert(phys_byte, v);
        }
        Ok(())
    }

    /// Sum of sensitive entry bits over the attacker's sprayed tables:
    /// frame-number bits whose flip turns the shared target frame into a
    /// page-table frame.
    pub fn sensitive_bits_per_sprayed_pte(&self) -> u32 {
        let Some(target) = self.layout.attacker_target_frame else {
            return 0;
        };
        (0..self.layout.frame_bits)
            .filter(|&j| self.tag(target ^ (1 << j)) == PageTag::PtPage)
            .count() as u32
    }
}

pub fn build_fixture(name: FixtureName, params: FixtureParams) -> Result<ToyMachine, LabError> {
    let frames = validate_params(name, &params)?;
    let layout = match name {
        FixtureName::SuidPing => suid_ping(params, frames),
        FixtureName::BareMetalFirmware => bare_metal(params, frames),
    };
    Ok(ToyMachine {
        layout: Arc::new(layout),
        overlay: BTreeMap::new(),
    })
}

fn validate_params(name: FixtureName, p: &FixtureParams) -> Result<u64, LabError> {
    let bad = |m: String| Err(LabError::InvalidFixture(m));
    if p.phys_bytes == 0 || !p.phys_bytes.is_multiple_of(PAGE_SIZE) {
        return bad(format!("physical size {} is not a whole number of pages", p.phys_bytes));
    }
    let frames = p.phys_bytes / PAGE_SIZE;
    if !frames.is_power_of_two() {
        return bad(format!("frame count {frames} must be a power of two"));
    }
    if frames > 1 << 40 {
        return bad("physical memory too large".into());
    }
    if !(0.0..=1.0).contains(&p.spray_fraction) {
        return bad(format!("spray fraction {} outside [0, 1]", p.spray_fraction));
    }
    let min = match name {
        FixtureName::SuidPing => 64,
        FixtureName::BareMetalFirmware => (BARE_METAL_FLAG_OFFSET / PAGE_SIZE + 1) * 2,
    };
    if frames < min {
        return bad(format!("{name} needs at least {min} frames, got {frames}"));
    }
    Ok(frames)
}

fn write_u64(mem: &mut [u8], offset: u64, v: u64) {
    let o = offset as usize;
    mem[o..o + 8].copy_from_slice(&v.to_le_bytes());
}

fn fill_random(mem: &mut [u8], frame: u64, rng: &mut ChaCha8Rng) {
    let o = (frame * PAGE_SIZE) as usize;
    rng.fill(&mut mem[o..o + PAGE_SIZE as usize]);
}

/// Privileged `ping` plus an unprivileged attacker that has sprayed page
/// tables mapping one data frame over and over.
///
/// Frames are drawn from a seeded permutation in a fixed order: ping's
/// pages, then a target frame whose bit-0 neighbour becomes the
/// attacker's first page table, then spray tables. Larger spray fractions
/// with the same seed therefore only add page tables.
fn suid_ping(params: FixtureParams, frames: u64) -> Layout {
    let frame_bits = frames.trailing_zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(params.layout_seed);
    // popped from the back
    let mut order: Vec<u64> = (1..frames).collect();
    order.shuffle(&mut rng);

    let mut tags = vec![PageTag::Unallocated; frames as usize];
    let mut mem = vec![0u8; params.phys_bytes as usize];
    let mut pt_owner = vec![None; frames as usize];

    let take = |tag: PageTag, tags: &mut Vec<PageTag>, order: &mut Vec<u64>| -> u64 {
        let f = order.pop().expect("fixture fits in memory");
        tags[f as usize] = tag;
        f
    };

    // ping: one page table, code, data, stack
    let ping_pt = take(PageTag::PtPage, &mut tags, &mut order);
    let mut vpage = 0;
    let mut ranges = Vec::new();
    for (kind, count, tag, flags) in [
        (RangeKind::Code, PING_CODE_PAGES, PageTag::CodePage, PTE_PRESENT | PTE_USER),
        (RangeKind::Data, PING_DATA_PAGES, PageTag::DataPage, PTE_FLAGS),
        (RangeKind::Stack, PING_STACK_PAGES, PageTag::DataPage, PTE_FLAGS),
    ] {
        ranges.push(MappedRange {
            kind,
            first_vpage: vpage,
            pages: count,
        });
        for _ in 0..count {
            let f = take(tag, &mut tags, &mut order);
            fill_random(&mut mem, f, &mut rng);
            write_u64(
                &mut mem,
                ping_pt * PAGE_SIZE + vpage * PTE_SIZE,
                flags | (f << FRAME_SHIFT),
            );
            vpage += 1;
        }
    }
    pt_owner[ping_pt as usize] = Some((0, 0));
    let ping = Process {
        pid: 1,
        name: "ping".into(),
        privileged: true,
        page_table: vec![ping_pt],
        ranges,
    };

    // attacker target frame with a free bit-0 neighbour for its first table
    let target_idx = order
        .iter()
        .rposition(|&f| (f ^ 1) != 0 && tags[(f ^ 1) as usize] == PageTag::Unallocated)
        .expect("a free neighbour pair exists");
    let target = order.remove(target_idx);
    tags[target as usize] = PageTag::DataPage;
    fill_random(&mut mem, target, &mut rng);
    let first_pt = target ^ 1;
    order.retain(|&f| f != first_pt);
    tags[first_pt as usize] = PageTag::PtPage;

    let free = order.len() as u64;
    let spray = ((params.spray_fraction * (free + 1) as f64).ceil() as u64)
        .saturating_sub(1)
        .min(free);
    let mut attacker_pts = vec![first_pt];
    for _ in 0..spray {
        attacker_pts.push(take(PageTag::PtPage, &mut tags, &mut order));
    }
    let entry = PTE_FLAGS | (target << FRAME_SHIFT);
    for (idx, &pt) in attacker_pts.iter().enumerate() {
        pt_owner[pt as usize] = Some((1, idx as u64));
        for e in 0..PTES_PER_PAGE {
            write_u64(&mut mem, pt * PAGE_SIZE + e * PTE_SIZE, entry);
        }
    }
    let total_vpages = attacker_pts.len() as u64 * PTES_PER_PAGE;
    let attacker = Process {
        pid: 1000,
        name: "attacker".into(),
        privileged: false,
        page_table: attacker_pts,
        ranges: vec![
            MappedRange {
                kind: RangeKind::Data,
                first_vpage: 0,
                pages: 1,
            },
            MappedRange {
                kind: RangeKind::Spray,
                first_vpage: 1,
                pages: total_vpages - 1,
            },
        ],
    };

    Layout {
        fixture: FixtureName::SuidPing,
        params,
        frame_bits,
        tags,
        processes: vec![ping, attacker],
        pt_owner,
        baseline: mem,
        flag_offset: None,
        attacker_target_frame: Some(target),
    }
}

/// Flat firmware image with no MMU: code, data and one flag page whose
/// unlock bit gates access. Models a target located by reading the
/// firmware rather than by spraying.
fn bare_metal(params: FixtureParams, frames: u64) -> Layout {
    let frame_bits = frames.trailing_zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(params.layout_seed);
    let mut tags = vec![PageTag::Unallocated; frames as usize];
    let mut mem = vec![0u8; params.phys_bytes as usize];

    let flag_frame = BARE_METAL_FLAG_OFFSET / PAGE_SIZE;
    // code below the flag page, data above it, the top half left free
    for f in 1..flag_frame / 2 {
        tags[f as usize] = PageTag::CodePage;
        fill_random(&mut mem, f, &mut rng);
    }
    for f in (flag_frame / 2..flag_frame).chain(flag_frame + 1..flag_frame * 2) {
        tags[f as usize] = PageTag::DataPage;
        fill_random(&mut mem, f, &mut rng);
    }
    tags[flag_frame as usize] = PageTag::FlagPage;
    let o = BARE_METAL_FLAG_OFFSET as usize;
    mem[o..o + 4].copy_from_slice(&BARE_METAL_LOCKED_WORD.to_le_bytes());

    let firmware = Process {
        pid: 0,
        name: "firmware".into(),
        privileged: true,
        page_table: Vec::new(),
        ranges: Vec::new(),
    };
    Layout {
        fixture: FixtureName::BareMetalFirmware,
        params,
        frame_bits,
        tags,
        processes: vec![firmware],
        pt_owner: vec![None; frames as usize],
        baseline: mem,
        flag_offset: Some(BARE_METAL_FLAG_OFFSET),
        attacker_target_frame: None,
    }
}
