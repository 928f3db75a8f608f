// SPDX-License-Identifier: Apache-2.0

//! Address types shared across the simulator.
//!
//! All three address kinds are 48-bit page-aligned integers; pages are 4 KiB.

/// Guest virtual address.
pub type GuestVirtAddr = u64;
/// Guest physical address.
pub type GuestPhysAddr = u64;
/// Host physical address.
pub type HostPhysAddr = u64;
/// Index into the simulated frame table (HPA = frame number * PAGE_SIZE).
pub type FrameNumber = usize;

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_SHIFT: u32 = 12;
/// Addresses are confined to the canonical low 48 bits.
pub const ADDR_MASK: u64 = (1 << 48) - 1;

pub fn is_page_aligned(addr: u64) -> bool {
    addr & (PAGE_SIZE as u64 - 1) == 0
}

pub fn is_canonical(addr: u64) -> bool {
    addr & !ADDR_MASK == 0
}

pub fn frame_to_hpa(frame: FrameNumber) -> HostPhysAddr {
    (frame as u64) << PAGE_SHIFT
}

pub fn hpa_to_frame(hpa: HostPhysAddr) -> FrameNumber {
    (hpa >> PAGE_SHIFT) as FrameNumber
}
