// SPDX-License-Identifier: Apache-2.0

//! Guest page tables (GVA -> GPA), nested page tables (GPA -> HPA), the
//! composed translation function, and a TLB model with explicit flush
//! semantics.
//!
//! Tables are flat maps: the security argument is about which mappings exist,
//! not about radix walk mechanics. Permission checks intersect both levels,
//! matching hardware nested paging. Unmap and permission narrowing leave a
//! shootdown obligation on the address space; translating with an
//! undischarged obligation is a hard error so that a missed flush becomes a
//! deterministic test failure instead of a silent hole.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::addr::{
    hpa_to_frame, is_canonical, is_page_aligned, FrameNumber, GuestVirtAddr, HostPhysAddr,
    PAGE_SIZE,
};
use crate::error::{Error, Result};

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Perms: u8 {
        const R = 0b001;
        const W = 0b010;
        const X = 0b100;
    }
}

impl Perms {
    pub fn allows(self, access: Access) -> bool {
        self.contains(match access {
            Access::Read => Perms::R,
            Access::Write => Perms::W,
            Access::Execute => Perms::X,
        })
    }

    pub fn as_str(self) -> String {
        let mut s = String::new();
        if self.contains(Perms::R) {
            s.push('r');
        }
        if self.contains(Perms::W) {
            s.push('w');
        }
        if self.contains(Perms::X) {
            s.push('x');
        }
        s
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut p = Perms::empty();
        for c in s.chars() {
            match c {
                'r' => p |= Perms::R,
                'w' => p |= Perms::W,
                'x' => p |= Perms::X,
                '-' => {}
                _ => return Err(Error::ParseError(format!("bad perms string {s:?}"))),
            }
        }
        Ok(p)
    }
}

impl Serialize for Perms {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_str())
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Perms::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
    Execute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultLevel {
    Gpt,
    Npt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Unmapped,
    PermissionDenied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableOwner {
    PrimaryOs,
    Monitor,
    Enclave(GuestVirtAddr),
}

#[derive(Debug, Clone, Copy)]
pub struct Entry {
    pub target: u64,
    pub perms: Perms,
    pub pinned: bool,
}

/// A flat single-level translation table.
#[derive(Debug, Clone)]
pub struct PageTable {
    pub owner_tag: TableOwner,
    entries: BTreeMap<u64, Entry>,
}

impl PageTable {
    pub fn new(owner_tag: TableOwner) -> Self {
        Self {
            owner_tag,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, addr: u64) -> Option<&Entry> {
        self.entries.get(&addr)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &Entry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_pair(addr: u64, target: u64) -> Result<()> {
        if !is_page_aligned(addr) || !is_canonical(addr) {
            return Err(Error::BadAddress(addr));
        }
        if !is_page_aligned(target) || !is_canonical(target) {
            return Err(Error::BadAddress(target));
        }
        Ok(())
    }

    pub fn insert(&mut self, addr: u64, target: u64, perms: Perms, pinned: bool) -> Result<()> {
        Self::check_pair(addr, target)?;
        if self.entries.contains_key(&addr) {
            return Err(Error::AlreadyMapped(addr));
        }
        self.entries.insert(
            addr,
            Entry {
                target,
                perms,
                pinned,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, addr: u64) -> Result<Entry> {
        let entry = self.entries.get(&addr).ok_or(Error::NotMapped(addr))?;
        if entry.pinned {
            return Err(Error::PinnedEntry(addr));
        }
        Ok(self.entries.remove(&addr).unwrap())
    }

    /// Force-removes an entry regardless of pinning. Only teardown paths use
    /// this, once the pin's lifetime (the enclave's) has ended.
    pub fn remove_at_teardown(&mut self, addr: u64) -> Option<Entry> {
        self.entries.remove(&addr)
    }

    pub fn set_perms(&mut self, addr: u64, perms: Perms) -> Result<Perms> {
        let entry = self.entries.get_mut(&addr).ok_or(Error::NotMapped(addr))?;
        if entry.pinned {
            return Err(Error::PinnedEntry(addr));
        }
        let old = entry.perms;
        entry.perms = perms;
        Ok(old)
    }
}

/// Identifier of an address space; key for TLB entries and flushes.
pub type SpaceId = u64;

/// A two-level (or, for host-user enclaves, single-level) address space.
#[derive(Debug, Clone)]
pub struct AddressSpace {
    pub id: SpaceId,
    pub gpt: PageTable,
    pub npt: PageTable,
    pub level_count: u8,
}

impl AddressSpace {
    pub fn two_level(id: SpaceId, gpt_owner: TableOwner) -> Self {
        Self {
            id,
            gpt: PageTable::new(gpt_owner),
            npt: PageTable::new(TableOwner::Monitor),
            level_count: 2,
        }
    }

    pub fn single_level(id: SpaceId) -> Self {
        Self {
            id,
            gpt: PageTable::new(TableOwner::Monitor),
            npt: PageTable::new(TableOwner::Monitor),
            level_count: 1,
        }
    }

    /// The exact set of frames reachable through the composed walk with any
    /// access kind. This is the oracle behind the confinement checks.
    pub fn reachable_hpas(&self) -> BTreeSet<FrameNumber> {
        let mut out = BTreeSet::new();
        for (_gva, ge) in self.gpt.iter() {
            if ge.perms.is_empty() {
                continue;
            }
            if self.level_count == 1 {
                out.insert(hpa_to_frame(ge.target));
            } else if let Some(ne) = self.npt.get(ge.target) {
                if !(ge.perms & ne.perms).is_empty() {
                    out.insert(hpa_to_frame(ne.target));
                }
            }
        }
        out
    }

    /// Every frame the NPT can emit, independent of the GPT. The confinement
    /// property says reachable_hpas is always a subset of this.
    pub fn npt_targets(&self) -> BTreeSet<FrameNumber> {
        if self.level_count == 1 {
            // single-level spaces have no separate NPT; the mapped set is its
            // own identity image
            self.gpt.iter().map(|(_, e)| hpa_to_frame(e.target)).collect()
        } else {
            self.npt.iter().map(|(_, e)| hpa_to_frame(e.target)).collect()
        }
    }
}

/// Fully-associative TLB keyed by (space, page). Capacity bounding is a test
/// knob; staleness, not eviction pressure, is the property under test.
#[derive(Debug, Clone)]
pub struct Tlb {
    cached: BTreeMap<(SpaceId, GuestVirtAddr), (HostPhysAddr, Perms)>,
    order: VecDeque<(SpaceId, GuestVirtAddr)>,
    capacity: Option<usize>,
    pending_shootdown: BTreeSet<SpaceId>,
    /// Test hook: when false, flushes become no-ops and the shootdown
    /// detector is bypassed, so stale entries stay live.
    pub flush_enabled: bool,
}

impl Default for Tlb {
    fn default() -> Self {
        Self::new(None)
    }
}

impl Tlb {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            cached: BTreeMap::new(),
            order: VecDeque::new(),
            capacity,
            pending_shootdown: BTreeSet::new(),
            flush_enabled: true,
        }
    }

    pub fn lookup(&self, space: SpaceId, page: GuestVirtAddr) -> Option<(HostPhysAddr, Perms)> {
        self.cached.get(&(space, page)).copied()
    }

    fn insert(&mut self, space: SpaceId, page: GuestVirtAddr, hpa: HostPhysAddr, perms: Perms) {
        if let Some(cap) = self.capacity {
            while self.cached.len() >= cap {
                if let Some(victim) = self.order.pop_front() {
                    self.cached.remove(&victim);
                } else {
                    break;
                }
            }
        }
        if self.cached.insert((space, page), (hpa, perms)).is_none() {
            self.order.push_back((space, page));
        }
    }

    pub fn note_shootdown(&mut self, space: SpaceId) {
        self.pending_shootdown.insert(space);
    }

    pub fn has_pending_shootdown(&self, space: SpaceId) -> bool {
        self.pending_shootdown.contains(&space)
    }

    /// Removes all cached entries for the space and discharges its pending
    /// shootdown. With the test hook off this is a no-op, modelling a monitor
    /// that forgets to flush.
    pub fn flush_space(&mut self, space: SpaceId) {
        if !self.flush_enabled {
            return;
        }
        self.cached.retain(|(s, _), _| *s != space);
        self.order.retain(|(s, _)| *s != space);
        self.pending_shootdown.remove(&space);
    }

    pub fn entry_count(&self) -> usize {
        self.cached.len()
    }
}

/// Composed two-level translation with TLB. Returns the HPA for `gva` (with
/// its page offset) or the first fault the walk hits.
pub fn translate(
    space: &AddressSpace,
    gva: GuestVirtAddr,
    access: Access,
    tlb: &mut Tlb,
) -> Result<HostPhysAddr> {
    if tlb.flush_enabled && tlb.has_pending_shootdown(space.id) {
        return Err(Error::PendingShootdown(space.id));
    }
    let page = gva & !(PAGE_SIZE as u64 - 1);
    let offset = gva - page;

    if let Some((hpa, perms)) = tlb.lookup(space.id, page) {
        if perms.allows(access) {
            return Ok(hpa + offset);
        }
        // insufficient cached permissions: fall through to a fresh walk
    }

    let fault = |level, kind| Error::PageFault {
        gva,
        access,
        level,
        kind,
    };

    let ge = space
        .gpt
        .get(page)
        .ok_or(fault(FaultLevel::Gpt, FaultKind::Unmapped))?;
    if !ge.perms.allows(access) {
        return Err(fault(FaultLevel::Gpt, FaultKind::PermissionDenied));
    }

    let (hpa_page, effective) = if space.level_count == 1 {
        (ge.target, ge.perms)
    } else {
        let ne = space
            .npt
            .get(ge.target)
            .ok_or(fault(FaultLevel::Npt, FaultKind::Unmapped))?;
        let effective = ge.perms & ne.perms;
        if !effective.allows(access) {
            return Err(fault(FaultLevel::Npt, FaultKind::PermissionDenied));
        }
        (ne.target, effective)
    };

    tlb.insert(space.id, page, hpa_page, effective);
    Ok(hpa_page + offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> AddressSpace {
        AddressSpace::two_level(7, TableOwner::Monitor)
    }

    #[test]
    fn straight_line_walk() {
        let mut s = space();
        let mut tlb = Tlb::default();
        s.gpt.insert(0x1000, 0x2000, Perms::R | Perms::W, false).unwrap();
        s.npt.insert(0x2000, 0x5000, Perms::R | Perms::W, false).unwrap();
        assert_eq!(translate(&s, 0x1000, Access::Read, &mut tlb).unwrap(), 0x5000);
        assert_eq!(translate(&s, 0x1234, Access::Write, &mut tlb).unwrap(), 0x5234);
    }

    #[test]
    fn permission_intersection_faults_at_gpt() {
        let mut s = space();
        let mut tlb = Tlb::default();
        s.gpt.insert(0x1000, 0x2000, Perms::R | Perms::W, false).unwrap();
        s.npt.insert(0x2000, 0x5000, Perms::R | Perms::W, false).unwrap();
        match translate(&s, 0x1000, Access::Execute, &mut tlb) {
            Err(Error::PageFault { level: FaultLevel::Gpt, kind: FaultKind::PermissionDenied, .. }) => {}
            other => panic!("expected GPT permission fault, got {other:?}"),
        }
    }

    #[test]
    fn npt_can_only_narrow() {
        let mut s = space();
        let mut tlb = Tlb::default();
        s.gpt.insert(0x1000, 0x2000, Perms::R | Perms::W, false).unwrap();
        s.npt.insert(0x2000, 0x5000, Perms::R, false).unwrap();
        assert!(translate(&s, 0x1000, Access::Read, &mut tlb).is_ok());
        match translate(&s, 0x1000, Access::Write, &mut tlb) {
            Err(Error::PageFault { level: FaultLevel::Npt, kind: FaultKind::PermissionDenied, .. }) => {}
            other => panic!("expected NPT permission fault, got {other:?}"),
        }
    }

    #[test]
    fn map_unmap_translate_faults_after_flush() {
        let mut s = space();
        let mut tlb = Tlb::default();
        s.gpt.insert(0x1000, 0x2000, Perms::R, false).unwrap();
        s.npt.insert(0x2000, 0x5000, Perms::R, false).unwrap();
        translate(&s, 0x1000, Access::Read, &mut tlb).unwrap();

        s.gpt.remove(0x1000).unwrap();
        tlb.note_shootdown(s.id);
        tlb.flush_space(s.id);
        assert!(matches!(
            translate(&s, 0x1000, Access::Read, &mut tlb),
            Err(Error::PageFault { kind: FaultKind::Unmapped, .. })
        ));
    }

    #[test]
    fn undischarged_shootdown_is_a_hard_error() {
        let mut s = space();
        let mut tlb = Tlb::default();
        s.gpt.insert(0x1000, 0x2000, Perms::R, false).unwrap();
        s.npt.insert(0x2000, 0x5000, Perms::R, false).unwrap();
        translate(&s, 0x1000, Access::Read, &mut tlb).unwrap();
        s.gpt.set_perms(0x1000, Perms::empty()).unwrap();
        tlb.note_shootdown(s.id);
        assert_eq!(
            translate(&s, 0x1000, Access::Read, &mut tlb),
            Err(Error::PendingShootdown(s.id))
        );
    }

    #[test]
    fn stale_entry_survives_when_flush_is_suppressed() {
        // Demonstrates why flush-on-switch is mandatory: with the hook off,
        // a since-unmapped GVA still resolves through the stale TLB entry.
        let mut s = space();
        let mut tlb = Tlb::default();
        tlb.flush_enabled = false;
        s.gpt.insert(0x1000, 0x2000, Perms::R | Perms::W, false).unwrap();
        s.npt.insert(0x2000, 0x5000, Perms::R | Perms::W, false).unwrap();
        assert_eq!(translate(&s, 0x1000, Access::Read, &mut tlb).unwrap(), 0x5000);

        s.gpt.remove(0x1000).unwrap();
        tlb.note_shootdown(s.id);
        tlb.flush_space(s.id); // no-op under the hook
        assert_eq!(translate(&s, 0x1000, Access::Read, &mut tlb).unwrap(), 0x5000);
    }

    #[test]
    fn set_perms_on_pinned_entry_is_rejected() {
        let mut s = space();
        s.gpt.insert(0x1000, 0x2000, Perms::R | Perms::W, true).unwrap();
        assert_eq!(
            s.gpt.set_perms(0x1000, Perms::R),
            Err(Error::PinnedEntry(0x1000))
        );
        assert_eq!(s.gpt.remove(0x1000), Err(Error::PinnedEntry(0x1000)));
    }

    #[test]
    fn flush_is_keyed_by_space() {
        let mut a = space();
        let mut b = AddressSpace::two_level(8, TableOwner::Monitor);
        let mut tlb = Tlb::default();
        for s in [&mut a, &mut b] {
            s.gpt.insert(0x1000, 0x2000, Perms::R, false).unwrap();
            s.npt.insert(0x2000, 0x5000, Perms::R, false).unwrap();
        }
        translate(&a, 0x1000, Access::Read, &mut tlb).unwrap();
        translate(&b, 0x1000, Access::Read, &mut tlb).unwrap();
        assert_eq!(tlb.entry_count(), 2);
        tlb.flush_space(a.id);
        assert_eq!(tlb.entry_count(), 1);
        assert!(tlb.lookup(b.id, 0x1000).is_some());
        // flushing an already-empty space is a no-op
        tlb.flush_space(a.id);
        assert_eq!(tlb.entry_count(), 1);
    }

    #[test]
    fn reachable_hpas_empty_and_singleton() {
        let mut s = space();
        assert!(s.reachable_hpas().is_empty());
        s.gpt.insert(0x1000, 0x2000, Perms::R, false).unwrap();
        assert!(s.reachable_hpas().is_empty()); // no NPT entry yet
        s.npt.insert(0x2000, 0x5000, Perms::R, false).unwrap();
        assert_eq!(s.reachable_hpas(), BTreeSet::from([5]));
    }

    #[test]
    fn gpt_edits_cannot_widen_reach_beyond_npt() {
        // Exhaustive sweep on a 16-frame toy space: whatever single GPT entry
        // an adversary installs, the reachable set stays inside NPT targets.
        let mut s = space();
        for gpa in [0x2000u64, 0x3000] {
            s.npt.insert(gpa, gpa + 0x10000, Perms::R | Perms::W, false).unwrap();
        }
        let npt_targets = s.npt_targets();
        for gva_page in 0..16u64 {
            for gpa_page in 0..16u64 {
                let gva = gva_page * PAGE_SIZE as u64;
                let gpa = gpa_page * PAGE_SIZE as u64;
                let mut edited = s.clone();
                // adversarial GPT edit: arbitrary mapping with full perms
                edited
                    .gpt
                    .insert(gva, gpa, Perms::R | Perms::W | Perms::X, false)
                    .unwrap();
                assert!(
                    edited.reachable_hpas().is_subset(&npt_targets),
                    "gva {gva:#x} -> gpa {gpa:#x} escaped the NPT"
                );
            }
        }
    }

    #[test]
    fn bounded_tlb_evicts_fifo() {
        let mut s = space();
        let mut tlb = Tlb::new(Some(2));
        for i in 0..3u64 {
            let gva = 0x1000 * (i + 1);
            let gpa = 0x10000 + 0x1000 * i;
            s.gpt.insert(gva, gpa, Perms::R, false).unwrap();
            s.npt.insert(gpa, 0x20000 + 0x1000 * i, Perms::R, false).unwrap();
            translate(&s, gva, Access::Read, &mut tlb).unwrap();
        }
        assert_eq!(tlb.entry_count(), 2);
        assert!(tlb.lookup(s.id, 0x1000).is_none(), "oldest entry evicted");
        assert!(tlb.lookup(s.id, 0x3000).is_some());
    }
}
