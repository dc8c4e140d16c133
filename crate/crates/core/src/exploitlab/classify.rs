use std::collections::BTreeSet;

use super::machine::{PageTag, ToyMachine, PAGE_SIZE, PTES_PER_PAGE, PTE_SIZE};
use super::Outcome;

/// Classifies the machine by what its flipped bytes now break.
///
/// Only bytes that differ from the fixture matter, so an untouched machine
/// is always `NoEffect`. With several flips the strongest effect wins.
pub fn classify_outcome(m: &ToyMachine) -> Outcome {
    let mut worst = Outcome::NoEffect;
    let mut entries = BTreeSet::new();
    for &offset in m.flipped_bytes().keys() {
        let outcome = match m.tag(offset / PAGE_SIZE) {
            PageTag::Unallocated => Outcome::NoEffect,
            PageTag::CodePage => Outcome::CrashSegfault,
            PageTag::DataPage => Outcome::SilentCorruption,
            PageTag::FlagPage => flag_outcome(m, offset),
            PageTag::PtPage => {
                // judge whole entries, once each
                entries.insert(offset - offset % PTE_SIZE);
                continue;
            }
        };
        worst = worst.max(outcome);
    }
    for entry in entries {
        worst = worst.max(pte_outcome(m, entry));
    }
    worst
}

fn flag_outcome(m: &ToyMachine, offset: u64) -> Outcome {
    let Some(flag) = m.flag_offset() else {
        return Outcome::SilentCorruption;
    };
    if offset == flag {
        let unlock = 1 << super::BARE_METAL_UNLOCK_BIT;
        if (m.read_byte(offset) ^ m.baseline_byte(offset)) & unlock != 0 {
            return Outcome::PrivilegeEscalation;
        }
    }
    Outcome::SilentCorruption
}

fn pte_outcome(m: &ToyMachine, entry: u64) -> Outcome {
    let frame = entry / PAGE_SIZE;
    let Some((owner, table_index)) = m.pt_owner(frame) else {
        return Outcome::SilentCorruption;
    };
    let now = m.pte(entry);
    let before = m.baseline_pte(entry);

    if !owner.privileged {
        // user-writable mapping onto any page table: the process can now
        // rewrite translations
        let usable = now.present && now.user && now.writable && !now.reserved;
        if usable && now.frame < m.frames() && m.tag(now.frame) == PageTag::PtPage {
            return Outcome::PrivilegeEscalation;
        }
        return Outcome::SilentCorruption;
    }

    let vpage = table_index * PTES_PER_PAGE + (entry % PAGE_SIZE) / PTE_SIZE;
    if !owner.on_execution_path(vpage) {
        return Outcome::SilentCorruption;
    }
    let faults = !now.present
        || !now.user
        || now.reserved
        || now.frame != before.frame
        || (before.writable && !now.writable);
    if faults {
        Outcome::CrashSegfault
    } else {
        Outcome::SilentCorruption
    }
}
