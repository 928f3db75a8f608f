// SPDX-License-Identifier: Apache-2.0

//! The security monitor: a serialized dispatcher that owns the frame table,
//! all enclave page tables and NPTs, the TLB, and the vCPU states. It
//! emulates the SGX leaf operations, routes exceptions, performs world
//! switches under the three enclave operation modes, and accounts
//! world-switch costs.
//!
//! Every operation executes atomically in submission order. The monitor
//! value can move between threads, but there is no interior mutability;
//! concurrent mutation is forbidden by construction.

pub mod cost;
mod lifecycle;
mod world;

pub use cost::{CostEvent, CostModel, CostTable, ModeCosts};
pub use world::ExceptionDisposition;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addr::{
    frame_to_hpa, is_canonical, is_page_aligned, FrameNumber, GuestVirtAddr, PAGE_SIZE,
};
use crate::attest::MeasurementCtx;
use crate::boot::BootKeys;
use crate::crypto::KeyPair;
use crate::error::{Error, Result};
use crate::harness::trace::{args_digest, TraceEvent, TraceLog};
use crate::paging::{self, Access, AddressSpace, Perms, SpaceId, TableOwner, Tlb};
use crate::physmem::{EpcmTable, FrameOwner, FrameTable, MemoryLayout, PageType};

pub type EnclaveId = GuestVirtAddr;

pub const NORMAL_SPACE: SpaceId = 0;
/// Registers that carry declared return values across EEXIT; all other GPRs
/// are scrubbed to zero.
pub const RETURN_REGS: [usize; 2] = [0, 1];
pub const GPR_COUNT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnclaveMode {
    Gu,
    Hu,
    P,
}

impl EnclaveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EnclaveMode::Gu => "gu",
            EnclaveMode::Hu => "hu",
            EnclaveMode::P => "p",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveState {
    Created,
    Loading,
    Initialized,
    Dead,
}

impl EnclaveState {
    pub fn name(self) -> &'static str {
        match self {
            EnclaveState::Created => "created",
            EnclaveState::Loading => "loading",
            EnclaveState::Initialized => "initialized",
            EnclaveState::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExceptionVector {
    De,
    Bp,
    Ud,
    Gp,
    Pf,
}

impl ExceptionVector {
    pub fn as_str(self) -> &'static str {
        match self {
            ExceptionVector::De => "de",
            ExceptionVector::Bp => "bp",
            ExceptionVector::Ud => "ud",
            ExceptionVector::Gp => "gp",
            ExceptionVector::Pf => "pf",
        }
    }
}

/// Enclave control structure. The marshalling-buffer size is part of the
/// attested attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Secs {
    pub attributes: u64,
    pub elrange_base: GuestVirtAddr,
    pub elrange_size: u64,
    pub marshalling_size: u64,
    pub ssa_frame_count: usize,
    #[serde(default)]
    pub mrenclave: [u8; 32],
}

impl Secs {
    pub fn validate(&self) -> Result<()> {
        if !self.elrange_size.is_power_of_two() {
            return Err(Error::InvalidSecs("elrange_size is not a power of two"));
        }
        if self.elrange_size < PAGE_SIZE as u64 {
            return Err(Error::InvalidSecs("elrange_size smaller than a page"));
        }
        if self.elrange_base % self.elrange_size != 0 {
            return Err(Error::InvalidSecs("elrange_base not aligned to elrange_size"));
        }
        if !is_canonical(self.elrange_base) || !is_canonical(self.elrange_base + self.elrange_size - 1)
        {
            return Err(Error::InvalidSecs("elrange exceeds the canonical range"));
        }
        if self.ssa_frame_count == 0 {
            return Err(Error::InvalidSecs("ssa_frame_count must be at least 1"));
        }
        if self.marshalling_size % PAGE_SIZE as u64 != 0 {
            return Err(Error::InvalidSecs("marshalling_size not page aligned"));
        }
        Ok(())
    }

    pub fn contains(&self, gva: GuestVirtAddr) -> bool {
        gva >= self.elrange_base && gva < self.elrange_base + self.elrange_size
    }

    pub fn elrange_end(&self) -> GuestVirtAddr {
        self.elrange_base + self.elrange_size
    }

    /// Byte image stored in the SECS page.
    pub fn to_page_bytes(&self) -> Vec<u8> {
        let mut page = vec![0u8; PAGE_SIZE];
        page[0..8].copy_from_slice(&self.attributes.to_le_bytes());
        page[8..16].copy_from_slice(&self.elrange_base.to_le_bytes());
        page[16..24].copy_from_slice(&self.elrange_size.to_le_bytes());
        page[24..32].copy_from_slice(&self.marshalling_size.to_le_bytes());
        page[32..40].copy_from_slice(&(self.ssa_frame_count as u64).to_le_bytes());
        page[40..72].copy_from_slice(&self.mrenclave);
        page
    }
}

/// Region committed on demand after initialization (EDMM): a declared heap
/// plus a stack at the top of the linear range. Faults outside it abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DynamicRegion {
    pub heap_base: GuestVirtAddr,
    pub heap_size: u64,
    pub stack_size: u64,
}

impl DynamicRegion {
    pub fn contains(&self, secs: &Secs, gva: GuestVirtAddr) -> bool {
        let in_heap = gva >= self.heap_base && gva < self.heap_base + self.heap_size;
        let stack_base = secs.elrange_end() - self.stack_size;
        let in_stack = self.stack_size > 0 && gva >= stack_base && gva < secs.elrange_end();
        in_heap || in_stack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcsState {
    Available,
    Active,
}

/// Thread control structure. The page content fixes the entry point and SSA
/// base at offsets 0 and 8; runtime state lives here, not in the page.
#[derive(Debug, Clone)]
pub struct Tcs {
    pub oentry: GuestVirtAddr,
    pub state: TcsState,
    pub ssa_pages: Vec<GuestVirtAddr>,
    pub current_ssa_index: usize,
    pub saved_aep: Option<GuestVirtAddr>,
}

pub const TCS_OENTRY_OFFSET: usize = 0;
pub const TCS_SSA_BASE_OFFSET: usize = 8;

/// Builds the byte image of a TCS page from its two configuration fields.
pub fn tcs_page_bytes(oentry: GuestVirtAddr, ssa_base: GuestVirtAddr) -> Vec<u8> {
    let mut page = vec![0u8; PAGE_SIZE];
    page[TCS_OENTRY_OFFSET..TCS_OENTRY_OFFSET + 8].copy_from_slice(&oentry.to_le_bytes());
    page[TCS_SSA_BASE_OFFSET..TCS_SSA_BASE_OFFSET + 8].copy_from_slice(&ssa_base.to_le_bytes());
    page
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcpuMode {
    MonitorMode,
    NormalMode,
    SecureMode(EnclaveId),
}

#[derive(Debug, Clone)]
pub struct VcpuState {
    pub mode: VcpuMode,
    pub gprs: [u64; GPR_COUNT],
    pub rip: GuestVirtAddr,
    pub saved_normal_ctx: Option<([u64; GPR_COUNT], GuestVirtAddr)>,
    pub current_tcs: Option<(EnclaveId, GuestVirtAddr)>,
}

impl VcpuState {
    fn new() -> Self {
        Self {
            mode: VcpuMode::MonitorMode,
            gprs: [0; GPR_COUNT],
            rip: 0,
            saved_normal_ctx: None,
            current_tcs: None,
        }
    }
}

/// Per-TCS slice of the marshalling buffer with a stack of bump-allocation
/// frames, one frame per nested edge call.
#[derive(Debug, Clone)]
pub struct MsbufPartition {
    pub base: GuestVirtAddr,
    pub size: u64,
    pub cursor: u64,
    pub frame_stack: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Enclave {
    pub id: EnclaveId,
    pub secs: Secs,
    pub state: EnclaveState,
    pub mode: EnclaveMode,
    pub space: SpaceId,
    pub tcs: BTreeMap<GuestVirtAddr, Tcs>,
    pub marshalling: Option<(GuestVirtAddr, u64)>,
    pub marshalling_frames: BTreeSet<FrameNumber>,
    pub measurement: MeasurementCtx,
    pub dynamic: DynamicRegion,
    pub frames: BTreeSet<FrameNumber>,
    pub secs_frame: FrameNumber,
    pub exception_whitelist: BTreeSet<ExceptionVector>,
    pub exception_handlers: BTreeMap<ExceptionVector, GuestVirtAddr>,
    pub msbuf: BTreeMap<GuestVirtAddr, MsbufPartition>,
}

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub layout: MemoryLayout,
    pub encryption_enabled: bool,
    pub vcpu_count: usize,
    pub tlb_capacity: Option<usize>,
    pub cost_table: CostTable,
    /// When false the marshalling buffer is not enforced and enclaves may
    /// read application memory directly. Test-only; insecure by design, used
    /// to reproduce the copy-count comparison.
    pub buffer_enforced: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            layout: MemoryLayout::default(),
            encryption_enabled: true,
            vcpu_count: 2,
            tlb_capacity: None,
            cost_table: CostTable::default(),
            buffer_enforced: true,
        }
    }
}

pub struct Monitor {
    pub cfg: MonitorConfig,
    pub frames: FrameTable,
    pub epcm: EpcmTable,
    spaces: BTreeMap<SpaceId, AddressSpace>,
    pub tlb: Tlb,
    enclaves: BTreeMap<EnclaveId, Enclave>,
    vcpus: Vec<VcpuState>,
    pub cost: CostModel,
    pub trace: TraceLog,
    pub(crate) k_root: [u8; 32],
    pub(crate) hask: KeyPair,
    pub hapk: [u8; 32],
    violations: Vec<String>,
    next_space: SpaceId,
}

impl Monitor {
    /// Builds the demoted post-launch world: the normal NPT maps exactly the
    /// normal range, monitor and EPC frames are unreachable from normal mode,
    /// and all vCPUs start in normal mode.
    pub fn new(cfg: MonitorConfig, keys: &BootKeys, atrest_key: [u8; 16]) -> Self {
        let frames = FrameTable::new(cfg.layout, cfg.encryption_enabled, atrest_key);
        let mut normal = AddressSpace::two_level(NORMAL_SPACE, TableOwner::PrimaryOs);
        for f in frames.normal_range.clone() {
            let hpa = frame_to_hpa(f);
            normal
                .npt
                .insert(hpa, hpa, Perms::R | Perms::W | Perms::X, false)
                .expect("normal identity mapping");
        }
        let mut spaces = BTreeMap::new();
        spaces.insert(NORMAL_SPACE, normal);

        let mut vcpus = vec![VcpuState::new(); cfg.vcpu_count.max(1)];
        for v in &mut vcpus {
            v.mode = VcpuMode::NormalMode;
        }

        Self {
            tlb: Tlb::new(cfg.tlb_capacity),
            cost: CostModel::new(cfg.cost_table),
            cfg,
            frames,
            epcm: EpcmTable::default(),
            spaces,
            enclaves: BTreeMap::new(),
            vcpus,
            trace: TraceLog::default(),
            k_root: keys.k_root,
            hask: keys.hask.clone(),
            hapk: keys.hapk,
            violations: Vec::new(),
            next_space: NORMAL_SPACE + 1,
        }
    }

    pub fn enclave(&self, e: EnclaveId) -> Result<&Enclave> {
        self.enclaves.get(&e).ok_or(Error::UnknownEnclave(e))
    }

    pub(crate) fn enclave_mut(&mut self, e: EnclaveId) -> Result<&mut Enclave> {
        self.enclaves.get_mut(&e).ok_or(Error::UnknownEnclave(e))
    }

    pub fn enclaves(&self) -> impl Iterator<Item = &Enclave> {
        self.enclaves.values()
    }

    pub(crate) fn insert_enclave(&mut self, enclave: Enclave) {
        self.enclaves.insert(enclave.id, enclave);
    }

    pub(crate) fn remove_enclave(&mut self, e: EnclaveId) {
        self.enclaves.remove(&e);
    }

    pub fn space(&self, id: SpaceId) -> &AddressSpace {
        &self.spaces[&id]
    }

    pub(crate) fn space_mut(&mut self, id: SpaceId) -> &mut AddressSpace {
        self.spaces.get_mut(&id).expect("space exists")
    }

    pub(crate) fn alloc_space_id(&mut self) -> SpaceId {
        let id = self.next_space;
        self.next_space += 1;
        id
    }

    pub(crate) fn insert_space(&mut self, space: AddressSpace) {
        self.spaces.insert(space.id, space);
    }

    pub(crate) fn remove_space(&mut self, id: SpaceId) {
        self.spaces.remove(&id);
    }

    pub fn vcpu(&self, idx: usize) -> &VcpuState {
        &self.vcpus[idx]
    }

    pub(crate) fn vcpu_mut(&mut self, idx: usize) -> &mut VcpuState {
        &mut self.vcpus[idx]
    }

    pub fn vcpu_count(&self) -> usize {
        self.vcpus.len()
    }

    /// Scripted enclave code setting its register file. Secure mode only.
    pub fn set_secure_gprs(&mut self, vcpu: usize, gprs: [u64; GPR_COUNT]) -> Result<()> {
        match self.vcpus[vcpu].mode {
            VcpuMode::SecureMode(_) => {
                self.vcpus[vcpu].gprs = gprs;
                Ok(())
            }
            _ => Err(Error::NotInSecureMode),
        }
    }

    pub fn buffer_enforced(&self) -> bool {
        self.cfg.buffer_enforced
    }

    /// Test hook for the stale-TLB experiments.
    pub fn set_flush_enabled(&mut self, enabled: bool) {
        self.tlb.flush_enabled = enabled;
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub(crate) fn record_violation(&mut self, text: String) {
        self.violations.push(text);
    }

    pub(crate) fn log_op(&mut self, name: &str, args: String, disposition: String, cost: u64) {
        self.trace.push(TraceEvent::Op {
            name: name.to_string(),
            args: args_digest(&args),
            disposition,
            cost,
        });
    }

    pub(crate) fn disposition<T>(res: &Result<T>) -> String {
        match res {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("err:{e}"),
        }
    }

    /// Flushes a space's TLB entries and logs it. Under the disabled-flush
    /// test hook nothing happens and nothing is logged.
    pub(crate) fn flush_space(&mut self, space: SpaceId) {
        if self.tlb.flush_enabled {
            self.tlb.flush_space(space);
            self.trace.push(TraceEvent::TlbFlush { space });
        }
    }

    // ----- primary OS surface (untrusted) ------------------------------

    /// The primary OS edits its own guest page table. The mapping may target
    /// any GPA, including enclave frames: the NPT decides what is reachable.
    pub fn normal_map(
        &mut self,
        gva: GuestVirtAddr,
        frame: FrameNumber,
        perms: Perms,
        pinned: bool,
    ) -> Result<()> {
        let target = frame_to_hpa(frame);
        let space = self.spaces.get_mut(&NORMAL_SPACE).unwrap();
        space.gpt.insert(gva, target, perms, pinned)?;
        self.trace.push(TraceEvent::Map {
            space: NORMAL_SPACE,
            gva,
            target,
            perms: perms.as_str(),
            pinned,
        });
        Ok(())
    }

    pub fn normal_unmap(&mut self, gva: GuestVirtAddr) -> Result<()> {
        let space = self.spaces.get_mut(&NORMAL_SPACE).unwrap();
        space.gpt.remove(gva)?;
        self.trace.push(TraceEvent::Unmap {
            space: NORMAL_SPACE,
            gva,
        });
        self.tlb.note_shootdown(NORMAL_SPACE);
        self.flush_space(NORMAL_SPACE);
        Ok(())
    }

    /// Memory access from normal mode (primary OS or application). Checked
    /// against the frame table: reaching a non-normal frame is recorded as an
    /// isolation violation, which the NPT construction makes unreachable.
    pub fn normal_access(
        &mut self,
        gva: GuestVirtAddr,
        access: Access,
        data: Option<&[u8]>,
    ) -> Result<Option<Vec<u8>>> {
        let space = &self.spaces[&NORMAL_SPACE];
        let hpa = match paging::translate(space, gva, access, &mut self.tlb) {
            Ok(hpa) => hpa,
            Err(e) => {
                if let Error::PageFault { gva, access, level, .. } = &e {
                    self.trace.push(TraceEvent::PageFault {
                        space: NORMAL_SPACE,
                        gva: *gva,
                        access: format!("{access:?}").to_lowercase(),
                        level: format!("{level:?}").to_lowercase(),
                    });
                }
                return Err(e);
            }
        };
        let frame = (hpa as usize) / PAGE_SIZE;
        let offset = (hpa as usize) % PAGE_SIZE;
        if self.frames.owner(frame)? != FrameOwner::Normal {
            self.record_violation(format!(
                "R-1: normal mode reached frame {frame} owned by {:?}",
                self.frames.owner(frame)?
            ));
            return Err(Error::IllegalAccess(gva));
        }
        match data {
            Some(bytes) => {
                self.frames.write(frame, offset, bytes)?;
                Ok(None)
            }
            None => Ok(Some(self.frames.read(frame, offset, PAGE_SIZE - offset)?.to_vec())),
        }
    }

    pub fn normal_write(&mut self, gva: GuestVirtAddr, data: &[u8]) -> Result<()> {
        let mut off = 0usize;
        while off < data.len() {
            let page_off = ((gva + off as u64) as usize) % PAGE_SIZE;
            let chunk = (PAGE_SIZE - page_off).min(data.len() - off);
            self.normal_access(gva + off as u64, Access::Write, Some(&data[off..off + chunk]))?;
            off += chunk;
        }
        Ok(())
    }

    pub fn normal_read(&mut self, gva: GuestVirtAddr, len: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let cur = gva + out.len() as u64;
            let page_off = (cur as usize) % PAGE_SIZE;
            let chunk = (PAGE_SIZE - page_off).min(len - out.len());
            let bytes = self
                .normal_access(cur, Access::Read, None)?
                .expect("read returns data");
            out.extend_from_slice(&bytes[..chunk]);
        }
        Ok(out)
    }

    /// Device DMA, mediated by the IOMMU.
    pub fn dma_access(
        &mut self,
        device: u32,
        frame: FrameNumber,
        write: Option<&[u8]>,
    ) -> Result<Option<Vec<u8>>> {
        let res = self.frames.dma_access(device, frame, write);
        match &res {
            Ok(_) => self.trace.push(TraceEvent::DmaOk {
                device,
                frame,
                write: write.is_some(),
            }),
            Err(_) => self.trace.push(TraceEvent::DmaDenied { device, frame }),
        }
        res
    }

    // ----- invariant oracles -------------------------------------------

    /// Frames owned by an enclave plus its marshalling-buffer frames: the
    /// only frames its address space may ever reach (R-2).
    pub fn allowed_frames(&self, e: &Enclave) -> BTreeSet<FrameNumber> {
        let mut set = e.frames.clone();
        set.extend(&e.marshalling_frames);
        set
    }

    /// Sweeps every live enclave's address space against the reachability
    /// oracle, and the frame table against the partition invariant. Any
    /// failure is recorded and returned.
    pub fn check_invariants(&mut self) -> Result<()> {
        self.frames.check_partition().map_err(|e| {
            self.violations.push(e.to_string());
            e
        })?;
        let mut failures = Vec::new();
        for enclave in self.enclaves.values() {
            let space = &self.spaces[&enclave.space];
            let reachable = space.reachable_hpas();
            let allowed = self.allowed_frames(enclave);
            if !reachable.is_subset(&allowed) {
                let escaped: Vec<_> = reachable.difference(&allowed).collect();
                failures.push(format!(
                    "R-2: enclave {:#x} can reach frames {escaped:?} outside its allowance",
                    enclave.id
                ));
            }
            if !reachable.is_subset(&space.npt_targets()) {
                failures.push(format!(
                    "confinement: enclave {:#x} reach exceeds NPT targets",
                    enclave.id
                ));
            }
        }
        for f in failures {
            self.violations.push(f.clone());
        }
        match self.violations.is_empty() {
            true => Ok(()),
            false => Err(Error::InvariantViolation(self.violations[0].clone())),
        }
    }

    pub(crate) fn page_of(gva: GuestVirtAddr) -> GuestVirtAddr {
        gva & !(PAGE_SIZE as u64 - 1)
    }

    pub(crate) fn check_page_arg(gva: GuestVirtAddr) -> Result<()> {
        if !is_page_aligned(gva) || !is_canonical(gva) {
            return Err(Error::BadAddress(gva));
        }
        Ok(())
    }
}

/// Key derivation selector for EGETKEY.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyType {
    Seal,
    Report,
}

impl KeyType {
    pub fn label(self) -> &'static [u8] {
        match self {
            KeyType::Seal => b"seal:",
            KeyType::Report => b"report:",
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::attest::Sigstruct;
    use crate::physmem::PageType;

    pub fn test_monitor(epc_frames: usize) -> Monitor {
        let hask = KeyPair::from_seed(&[8u8; 32]);
        let keys = BootKeys {
            k_root: [7u8; 32],
            hapk: hask.public(),
            hask,
            first_boot: true,
        };
        Monitor::new(
            MonitorConfig {
                layout: MemoryLayout {
                    monitor_frames: 2,
                    epc_frames,
                    normal_frames: 16,
                },
                ..Default::default()
            },
            &keys,
            [0xAA; 16],
        )
    }

    pub fn small_secs_at(elrange_base: GuestVirtAddr) -> Secs {
        Secs {
            attributes: 0,
            elrange_base,
            elrange_size: 1 << 20,
            marshalling_size: 0,
            ssa_frame_count: 1,
            mrenclave: [0u8; 32],
        }
    }

    pub fn small_secs() -> Secs {
        small_secs_at(0x100000)
    }

    pub fn small_dynamic() -> DynamicRegion {
        DynamicRegion {
            heap_base: 0x110000,
            heap_size: 16 * PAGE_SIZE as u64,
            stack_size: 2 * PAGE_SIZE as u64,
        }
    }

    pub const TEST_OENTRY: GuestVirtAddr = 0x100000;
    pub const TEST_TCS: GuestVirtAddr = 0x101000;
    pub const TEST_SSA_BASE: GuestVirtAddr = 0x103000;
    pub const TEST_MSBUF: GuestVirtAddr = 0x4000_0000;
    pub const TEST_SCRATCH: GuestVirtAddr = 0x5000_0000;

    /// Like `build_basic_enclave` but with a pinned marshalling buffer of
    /// `msbuf_pages` pages and a mapped app scratch region for baseline-mode
    /// comparisons.
    pub fn build_edge_enclave(
        m: &mut Monitor,
        secs_gva: GuestVirtAddr,
        mode: EnclaveMode,
        msbuf_pages: usize,
    ) -> EnclaveId {
        let mut secs = small_secs();
        secs.marshalling_size = (msbuf_pages * PAGE_SIZE) as u64;
        let e = m.ecreate(secs_gva, secs, mode, small_dynamic()).unwrap();
        let code = vec![0u8; PAGE_SIZE];
        m.eadd(e, &code, TEST_OENTRY, Perms::R | Perms::W | Perms::X, PageType::Reg, None)
            .unwrap();
        m.eextend(e, TEST_OENTRY).unwrap();
        let tcs = tcs_page_bytes(TEST_OENTRY, TEST_SSA_BASE);
        m.eadd(e, &tcs, TEST_TCS, Perms::empty(), PageType::Tcs, None)
            .unwrap();
        let ssa = vec![0u8; PAGE_SIZE];
        m.eadd(e, &ssa, TEST_SSA_BASE, Perms::R | Perms::W, PageType::Ssa, None)
            .unwrap();
        // pinned, populated buffer pages plus unpinned scratch pages
        for i in 0..msbuf_pages {
            let frame = m.frames.normal_range.start + i;
            m.normal_map(TEST_MSBUF + (i * PAGE_SIZE) as u64, frame, Perms::R | Perms::W, true)
                .unwrap();
        }
        for i in 0..4 {
            let frame = m.frames.normal_range.start + msbuf_pages + i;
            m.normal_map(TEST_SCRATCH + (i * PAGE_SIZE) as u64, frame, Perms::R | Perms::W, false)
                .unwrap();
        }
        let signer = KeyPair::from_seed(&[9u8; 32]);
        let sig = Sigstruct::sign(&signer, m.enclave(e).unwrap().measurement.current(), 0);
        m.einit(e, &sig, TEST_MSBUF, (msbuf_pages * PAGE_SIZE) as u64)
            .unwrap();
        e
    }

    /// Builds and initializes a one-page enclave with a single TCS and SSA.
    pub fn build_basic_enclave(m: &mut Monitor, secs_gva: GuestVirtAddr, mode: EnclaveMode) -> EnclaveId {
        let e = m
            .ecreate(secs_gva, small_secs(), mode, small_dynamic())
            .unwrap();
        let code = vec![0u8; PAGE_SIZE];
        m.eadd(e, &code, TEST_OENTRY, Perms::R | Perms::W | Perms::X, PageType::Reg, None)
            .unwrap();
        m.eextend(e, TEST_OENTRY).unwrap();
        let tcs = tcs_page_bytes(TEST_OENTRY, TEST_SSA_BASE);
        m.eadd(e, &tcs, TEST_TCS, Perms::empty(), PageType::Tcs, None)
            .unwrap();
        let ssa = vec![0u8; PAGE_SIZE];
        m.eadd(e, &ssa, TEST_SSA_BASE, Perms::R | Perms::W, PageType::Ssa, None)
            .unwrap();
        let signer = KeyPair::from_seed(&[9u8; 32]);
        let sig = Sigstruct::sign(&signer, m.enclave(e).unwrap().measurement.current(), 0);
        m.einit(e, &sig, 0, 0).unwrap();
        e
    }
}
