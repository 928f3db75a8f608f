// SPDX-License-Identifier: Apache-2.0

//! Simulated physical address space.
//!
//! The frame table is the ground truth every isolation claim reduces to: each
//! frame has exactly one owner, monitor and enclave frames are encrypted at
//! rest, and the three frame ranges (monitor, EPC, normal) partition the
//! space. The EPCM mirrors SGX's per-EPC-page metadata.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::addr::{FrameNumber, GuestVirtAddr, PAGE_SIZE};
use crate::crypto;
use crate::error::{Error, Result};
use crate::paging::Perms;

/// Owner of a physical frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOwner {
    Free,
    Monitor,
    Normal,
    Enclave(GuestVirtAddr),
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub owner: FrameOwner,
    pub content: Vec<u8>,
    pub encrypted: bool,
}

impl Frame {
    fn new(owner: FrameOwner, encrypted: bool) -> Self {
        Self {
            owner,
            content: vec![0u8; PAGE_SIZE],
            encrypted,
        }
    }
}

/// EPC page type, mirroring the SGX EPCM role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageType {
    Secs,
    Tcs,
    Reg,
    Ssa,
}

/// Per-EPC-page metadata entry.
#[derive(Debug, Clone)]
pub struct EpcmEntry {
    pub frame: FrameNumber,
    pub page_type: PageType,
    pub perms: Perms,
    pub owner_enclave: GuestVirtAddr,
    pub linear_addr: GuestVirtAddr,
    pub in_use: bool,
}

/// EPCM table, keyed by frame number so there is at most one in-use entry per
/// frame by construction. A secondary index resolves (enclave, gva) lookups.
#[derive(Debug, Default, Clone)]
pub struct EpcmTable {
    by_frame: BTreeMap<FrameNumber, EpcmEntry>,
    by_linear: BTreeMap<(GuestVirtAddr, GuestVirtAddr), FrameNumber>,
}

impl EpcmTable {
    pub fn insert(&mut self, entry: EpcmEntry) {
        self.by_linear
            .insert((entry.owner_enclave, entry.linear_addr), entry.frame);
        self.by_frame.insert(entry.frame, entry);
    }

    pub fn remove_frame(&mut self, frame: FrameNumber) {
        if let Some(e) = self.by_frame.remove(&frame) {
            self.by_linear.remove(&(e.owner_enclave, e.linear_addr));
        }
    }

    pub fn get(&self, frame: FrameNumber) -> Option<&EpcmEntry> {
        self.by_frame.get(&frame).filter(|e| e.in_use)
    }

    pub fn get_mut(&mut self, frame: FrameNumber) -> Option<&mut EpcmEntry> {
        self.by_frame.get_mut(&frame).filter(|e| e.in_use)
    }

    pub fn lookup(&self, enclave: GuestVirtAddr, gva: GuestVirtAddr) -> Option<&EpcmEntry> {
        self.by_linear
            .get(&(enclave, gva))
            .and_then(|f| self.get(*f))
    }

    pub fn frames_of(&self, enclave: GuestVirtAddr) -> impl Iterator<Item = &EpcmEntry> {
        self.by_frame
            .values()
            .filter(move |e| e.in_use && e.owner_enclave == enclave)
    }
}

/// Configuration for carving the physical space into the three ranges.
#[derive(Debug, Clone, Copy)]
pub struct MemoryLayout {
    pub monitor_frames: usize,
    pub epc_frames: usize,
    pub normal_frames: usize,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        Self {
            monitor_frames: 16,
            epc_frames: 1024,
            normal_frames: 256,
        }
    }
}

/// The simulated physical memory.
#[derive(Debug, Clone)]
pub struct FrameTable {
    frames: Vec<Frame>,
    pub monitor_range: std::ops::Range<FrameNumber>,
    pub epc_range: std::ops::Range<FrameNumber>,
    pub normal_range: std::ops::Range<FrameNumber>,
    free_epc: VecDeque<FrameNumber>,
    encryption_enabled: bool,
    atrest_key: [u8; 16],
    iommu: BTreeMap<u32, BTreeSet<FrameNumber>>,
}

impl FrameTable {
    /// Builds the partitioned space. Monitor frames come first, then the EPC,
    /// then normal memory; the EPC free list starts in frame-number order.
    pub fn new(layout: MemoryLayout, encryption_enabled: bool, atrest_key: [u8; 16]) -> Self {
        let monitor_range = 0..layout.monitor_frames;
        let epc_range = monitor_range.end..monitor_range.end + layout.epc_frames;
        let normal_range = epc_range.end..epc_range.end + layout.normal_frames;

        let mut frames = Vec::with_capacity(normal_range.end);
        for i in 0..normal_range.end {
            let (owner, encrypted) = if monitor_range.contains(&i) {
                (FrameOwner::Monitor, encryption_enabled)
            } else if epc_range.contains(&i) {
                (FrameOwner::Free, false)
            } else {
                (FrameOwner::Normal, false)
            };
            frames.push(Frame::new(owner, encrypted));
        }

        Self {
            frames,
            free_epc: epc_range.clone().collect(),
            monitor_range,
            epc_range,
            normal_range,
            encryption_enabled,
            atrest_key,
            iommu: BTreeMap::new(),
        }
    }

    pub fn total_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn free_epc_count(&self) -> usize {
        self.free_epc.len()
    }

    pub fn owner(&self, frame: FrameNumber) -> Result<FrameOwner> {
        self.frames
            .get(frame)
            .map(|f| f.owner)
            .ok_or(Error::FrameOutOfRange(frame))
    }

    /// Pulls a free frame from the EPC pool (FIFO), zeroed, owned by the
    /// given enclave. Monitor/enclave frames are encrypted at rest when the
    /// encryption feature is on.
    pub fn alloc_epc_frame(&mut self, owner: GuestVirtAddr) -> Result<FrameNumber> {
        let frame = self.free_epc.pop_front().ok_or(Error::EpcExhausted)?;
        let f = &mut self.frames[frame];
        debug_assert_eq!(f.owner, FrameOwner::Free);
        f.owner = FrameOwner::Enclave(owner);
        f.encrypted = self.encryption_enabled;
        f.content.fill(0);
        Ok(frame)
    }

    /// Claims a specific EPC frame, modelling the untrusted kernel proposing
    /// a page. Rejected if the frame belongs to anyone.
    pub fn claim_epc_frame(&mut self, frame: FrameNumber, owner: GuestVirtAddr) -> Result<FrameNumber> {
        if !self.epc_range.contains(&frame) {
            return Err(Error::NotEpcFrame(frame));
        }
        if self.frames[frame].owner != FrameOwner::Free {
            return Err(Error::FrameInUse(frame));
        }
        self.free_epc.retain(|&f| f != frame);
        let f = &mut self.frames[frame];
        f.owner = FrameOwner::Enclave(owner);
        f.encrypted = self.encryption_enabled;
        f.content.fill(0);
        Ok(frame)
    }

    /// Scrubs and returns an EPC frame to the pool. Content is zeroed before
    /// the ownership transition so a later owner can never observe old bytes.
    pub fn free_epc_frame(&mut self, frame: FrameNumber) -> Result<()> {
        if !self.epc_range.contains(&frame) {
            return Err(Error::NotEpcFrame(frame));
        }
        let f = &mut self.frames[frame];
        match f.owner {
            FrameOwner::Enclave(_) => {}
            FrameOwner::Free => return Err(Error::FrameFree(frame)),
            _ => return Err(Error::NotEpcFrame(frame)),
        }
        f.content.fill(0);
        f.encrypted = false;
        f.owner = FrameOwner::Free;
        self.free_epc.push_back(frame);
        Ok(())
    }

    /// Raw physical view. A snooper (bus probe, cold boot) observes the
    /// at-rest transform of encrypted frames; trusted readers see plaintext.
    pub fn raw_read(&self, frame: FrameNumber, as_snooper: bool) -> Result<Vec<u8>> {
        let f = self
            .frames
            .get(frame)
            .ok_or(Error::FrameOutOfRange(frame))?;
        if as_snooper && f.encrypted {
            Ok(crypto::frame_transform(&self.atrest_key, frame, &f.content))
        } else {
            Ok(f.content.clone())
        }
    }

    pub fn read(&self, frame: FrameNumber, offset: usize, len: usize) -> Result<&[u8]> {
        let f = self
            .frames
            .get(frame)
            .ok_or(Error::FrameOutOfRange(frame))?;
        if offset + len > PAGE_SIZE {
            return Err(Error::BadAddress((offset + len) as u64));
        }
        Ok(&f.content[offset..offset + len])
    }

    pub fn write(&mut self, frame: FrameNumber, offset: usize, data: &[u8]) -> Result<()> {
        let f = self
            .frames
            .get_mut(frame)
            .ok_or(Error::FrameOutOfRange(frame))?;
        if offset + data.len() > PAGE_SIZE {
            return Err(Error::BadAddress((offset + data.len()) as u64));
        }
        f.content[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn register_device(&mut self, device: u32, allowed: BTreeSet<FrameNumber>) {
        self.iommu.insert(device, allowed);
    }

    /// Device access through the IOMMU. Only normal frames inside the
    /// device's allow-set are reachable; everything else is denied with no
    /// state change.
    pub fn dma_access(
        &mut self,
        device: u32,
        frame: FrameNumber,
        write: Option<&[u8]>,
    ) -> Result<Option<Vec<u8>>> {
        let allowed = self.iommu.get(&device).ok_or(Error::UnknownDevice(device))?;
        let owner = self.owner(frame)?;
        if owner != FrameOwner::Normal || !allowed.contains(&frame) {
            return Err(Error::IommuDenied { device, frame });
        }
        match write {
            Some(data) => {
                let n = data.len().min(PAGE_SIZE);
                self.frames[frame].content[..n].copy_from_slice(&data[..n]);
                Ok(None)
            }
            None => Ok(Some(self.frames[frame].content.clone())),
        }
    }

    /// Partition sanity: every frame number belongs to exactly one range and
    /// owners are consistent with their range.
    pub fn check_partition(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            let in_monitor = self.monitor_range.contains(&i);
            let in_epc = self.epc_range.contains(&i);
            let in_normal = self.normal_range.contains(&i);
            if (in_monitor as u8 + in_epc as u8 + in_normal as u8) != 1 {
                return Err(Error::InvariantViolation(format!(
                    "frame {i} is in {} ranges",
                    in_monitor as u8 + in_epc as u8 + in_normal as u8
                )));
            }
            let ok = match f.owner {
                FrameOwner::Monitor => in_monitor,
                FrameOwner::Free | FrameOwner::Enclave(_) => in_epc,
                FrameOwner::Normal => in_normal,
            };
            if !ok {
                return Err(Error::InvariantViolation(format!(
                    "frame {i} owner {:?} outside its range",
                    f.owner
                )));
            }
            if f.owner == FrameOwner::Free && f.content.iter().any(|&b| b != 0) {
                return Err(Error::InvariantViolation(format!(
                    "free frame {i} has nonzero content"
                )));
            }
            if self.encryption_enabled
                && matches!(f.owner, FrameOwner::Monitor | FrameOwner::Enclave(_))
                && !f.encrypted
            {
                return Err(Error::InvariantViolation(format!(
                    "protected frame {i} is not encrypted"
                )));
            }
        }
        Ok(())
    }
}
