// SPDX-License-Identifier: Apache-2.0

//! World switches and in-enclave execution: EENTER/EEXIT, AEX/ERESUME,
//! exception routing with the P-Enclave white-list, page-fault-driven memory
//! commit (EDMM), permission-change hypercalls, and checked enclave memory
//! access.
//!
//! Every world switch flushes the departing address space's TLB entries and
//! discharges its pending shootdowns. Registers crossing from secure to
//! normal mode are scrubbed: EEXIT preserves only the two declared
//! return-value registers, AEX preserves none.

use super::cost::CostEvent;
use super::{
    EnclaveId, EnclaveMode, EnclaveState, ExceptionVector, Monitor, TcsState, VcpuMode, GPR_COUNT,
    RETURN_REGS,
};
use crate::addr::{FrameNumber, GuestVirtAddr, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::harness::trace::TraceEvent;
use crate::paging::{self, Access, FaultKind, Perms};
use crate::physmem::{EpcmEntry, PageType};

/// Where an injected interrupt or exception ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionDisposition {
    /// Raised in normal mode; the primary OS handles it without the monitor.
    HandledByPrimaryOs,
    /// White-listed vector delivered to the P-Enclave's registered handler;
    /// no AEX, no normal-mode involvement.
    InEnclave { handler: GuestVirtAddr },
    /// AEX performed and the event forwarded to the primary OS.
    Forwarded,
}

const SSA_CTX_LEN: usize = (GPR_COUNT + 1) * 8;

impl Monitor {
    fn secure_enclave_of(&self, vcpu: usize) -> Result<EnclaveId> {
        match self.vcpu(vcpu).mode {
            VcpuMode::SecureMode(e) => Ok(e),
            _ => Err(Error::NotInSecureMode),
        }
    }

    fn expect_secure(&self, vcpu: usize, e: EnclaveId) -> Result<()> {
        match self.vcpu(vcpu).mode {
            VcpuMode::SecureMode(cur) if cur == e => Ok(()),
            _ => Err(Error::NotInSecureMode),
        }
    }

    /// EENTER: snapshot the normal context, activate the TCS, move the vCPU
    /// into the enclave at OENTRY, flush the departing space.
    pub fn eenter(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        tcs_gva: GuestVirtAddr,
        aep: GuestVirtAddr,
    ) -> Result<()> {
        let res = self.eenter_inner(vcpu, e, tcs_gva, aep);
        let cost = match &res {
            Ok(cost) => *cost,
            Err(_) => 0,
        };
        let disposition = Self::disposition(&res);
        self.log_op("eenter", format!("{e:#x},{tcs_gva:#x},{aep:#x}"), disposition, cost);
        res.map(|_| ())
    }

    fn eenter_inner(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        tcs_gva: GuestVirtAddr,
        aep: GuestVirtAddr,
    ) -> Result<u64> {
        if self.vcpu(vcpu).mode != VcpuMode::NormalMode {
            return Err(Error::NotInNormalMode);
        }
        let enclave = self.enclave(e)?;
        if enclave.state != EnclaveState::Initialized {
            return Err(Error::WrongState(enclave.state.name()));
        }
        let mode = enclave.mode;
        let tcs = enclave.tcs.get(&tcs_gva).ok_or(Error::UnknownTcs(tcs_gva))?;
        if tcs.state == TcsState::Active {
            return Err(Error::TcsBusy(tcs_gva));
        }
        let oentry = tcs.oentry;

        let enclave = self.enclave_mut(e)?;
        let tcs = enclave.tcs.get_mut(&tcs_gva).unwrap();
        tcs.state = TcsState::Active;
        tcs.saved_aep = Some(aep);

        let v = self.vcpu_mut(vcpu);
        v.saved_normal_ctx = Some((v.gprs, v.rip));
        v.rip = oentry;
        v.mode = VcpuMode::SecureMode(e);
        v.current_tcs = Some((e, tcs_gva));

        self.flush_space(super::NORMAL_SPACE);
        Ok(self.cost.charge(mode, CostEvent::Eenter))
    }

    /// EEXIT: only accepted when the exit target equals the AEP recorded at
    /// EENTER; an arbitrary target is the enclave-malware jump this check
    /// defeats. On success the normal-mode register view carries only the
    /// declared return values.
    pub fn eexit(&mut self, vcpu: usize, e: EnclaveId, target: GuestVirtAddr) -> Result<()> {
        let res = self.eexit_inner(vcpu, e, target);
        let cost = *res.as_ref().unwrap_or(&0);
        let disposition = Self::disposition(&res);
        self.log_op("eexit", format!("{e:#x},{target:#x}"), disposition, cost);
        res.map(|_| ())
    }

    fn eexit_inner(&mut self, vcpu: usize, e: EnclaveId, target: GuestVirtAddr) -> Result<u64> {
        self.expect_secure(vcpu, e)?;
        let (_, tcs_gva) = self.vcpu(vcpu).current_tcs.ok_or(Error::NotInSecureMode)?;
        let enclave = self.enclave(e)?;
        let mode = enclave.mode;
        let space = enclave.space;
        let aep = enclave
            .tcs
            .get(&tcs_gva)
            .and_then(|t| t.saved_aep)
            .ok_or(Error::NotInSecureMode)?;
        if target != aep {
            return Err(Error::IllegalExitTarget { target, aep });
        }

        let enclave = self.enclave_mut(e)?;
        let tcs = enclave.tcs.get_mut(&tcs_gva).unwrap();
        tcs.state = TcsState::Available;
        tcs.saved_aep = None;
        tcs.current_ssa_index = 0;

        let v = self.vcpu_mut(vcpu);
        let returns = RETURN_REGS.map(|r| v.gprs[r]);
        v.gprs = [0; GPR_COUNT];
        for (slot, value) in RETURN_REGS.iter().zip(returns) {
            v.gprs[*slot] = value;
        }
        v.rip = target;
        v.mode = VcpuMode::NormalMode;
        v.saved_normal_ctx = None;
        v.current_tcs = None;

        self.flush_space(space);
        Ok(self.cost.charge(mode, CostEvent::Eexit))
    }

    fn ssa_push(&mut self, e: EnclaveId, tcs_gva: GuestVirtAddr, ctx: ([u64; GPR_COUNT], u64)) -> Result<()> {
        let enclave = self.enclave(e)?;
        let ssa_frame_count = enclave.secs.ssa_frame_count;
        let tcs = enclave.tcs.get(&tcs_gva).ok_or(Error::UnknownTcs(tcs_gva))?;
        if tcs.current_ssa_index >= ssa_frame_count {
            return Err(Error::SsaOverflow);
        }
        let ssa_gva = tcs.ssa_pages[tcs.current_ssa_index];
        let entry = self.epcm.lookup(e, ssa_gva).ok_or(Error::NotMapped(ssa_gva))?;
        if entry.page_type != PageType::Ssa {
            return Err(Error::IllegalAccess(ssa_gva));
        }
        let frame = entry.frame;

        let mut bytes = [0u8; SSA_CTX_LEN];
        for (i, g) in ctx.0.iter().enumerate() {
            bytes[i * 8..i * 8 + 8].copy_from_slice(&g.to_le_bytes());
        }
        bytes[GPR_COUNT * 8..].copy_from_slice(&ctx.1.to_le_bytes());
        self.frames.write(frame, 0, &bytes)?;

        self.enclave_mut(e)?.tcs.get_mut(&tcs_gva).unwrap().current_ssa_index += 1;
        Ok(())
    }

    fn ssa_pop(&mut self, e: EnclaveId, tcs_gva: GuestVirtAddr) -> Result<([u64; GPR_COUNT], u64)> {
        let enclave = self.enclave(e)?;
        let tcs = enclave.tcs.get(&tcs_gva).ok_or(Error::UnknownTcs(tcs_gva))?;
        if tcs.current_ssa_index == 0 {
            return Err(Error::NoSavedState);
        }
        let index = tcs.current_ssa_index - 1;
        let ssa_gva = tcs.ssa_pages[index];
        let frame = self
            .epcm
            .lookup(e, ssa_gva)
            .ok_or(Error::NotMapped(ssa_gva))?
            .frame;
        let bytes = self.frames.read(frame, 0, SSA_CTX_LEN)?.to_vec();
        let mut gprs = [0u64; GPR_COUNT];
        for (i, g) in gprs.iter_mut().enumerate() {
            *g = u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        }
        let rip = u64::from_le_bytes(bytes[GPR_COUNT * 8..].try_into().unwrap());
        self.enclave_mut(e)?.tcs.get_mut(&tcs_gva).unwrap().current_ssa_index = index;
        Ok((gprs, rip))
    }

    /// AEX: save the full register file into the current SSA slot, scrub the
    /// register view, restore the vCPU to normal mode at the AEP.
    pub fn aex(&mut self, vcpu: usize, e: EnclaveId) -> Result<()> {
        let res = self.aex_inner(vcpu, e);
        let cost = *res.as_ref().unwrap_or(&0);
        let disposition = Self::disposition(&res);
        self.log_op("aex", format!("{e:#x}"), disposition, cost);
        res.map(|_| ())
    }

    fn aex_inner(&mut self, vcpu: usize, e: EnclaveId) -> Result<u64> {
        self.expect_secure(vcpu, e)?;
        let (_, tcs_gva) = self.vcpu(vcpu).current_tcs.ok_or(Error::NotInSecureMode)?;
        let enclave = self.enclave(e)?;
        let mode = enclave.mode;
        let space = enclave.space;
        let aep = enclave
            .tcs
            .get(&tcs_gva)
            .and_then(|t| t.saved_aep)
            .ok_or(Error::NoSavedState)?;

        let ctx = {
            let v = self.vcpu(vcpu);
            (v.gprs, v.rip)
        };
        self.ssa_push(e, tcs_gva, ctx)?;

        let v = self.vcpu_mut(vcpu);
        v.gprs = [0; GPR_COUNT];
        v.rip = aep;
        v.mode = VcpuMode::NormalMode;
        v.current_tcs = None;

        self.flush_space(space);
        Ok(self.cost.charge(mode, CostEvent::Aex))
    }

    /// ERESUME: pop the SSA slot and restore the enclave context bit-exact.
    pub fn eresume(&mut self, vcpu: usize, e: EnclaveId, tcs_gva: GuestVirtAddr) -> Result<()> {
        let res = self.eresume_inner(vcpu, e, tcs_gva);
        let cost = *res.as_ref().unwrap_or(&0);
        let disposition = Self::disposition(&res);
        self.log_op("eresume", format!("{e:#x},{tcs_gva:#x}"), disposition, cost);
        res.map(|_| ())
    }

    fn eresume_inner(&mut self, vcpu: usize, e: EnclaveId, tcs_gva: GuestVirtAddr) -> Result<u64> {
        if self.vcpu(vcpu).mode != VcpuMode::NormalMode {
            return Err(Error::NotInNormalMode);
        }
        let enclave = self.enclave(e)?;
        let mode = enclave.mode;
        let tcs = enclave.tcs.get(&tcs_gva).ok_or(Error::UnknownTcs(tcs_gva))?;
        if tcs.state != TcsState::Active || tcs.current_ssa_index == 0 {
            return Err(Error::NoSavedState);
        }

        let (gprs, rip) = self.ssa_pop(e, tcs_gva)?;
        let v = self.vcpu_mut(vcpu);
        v.gprs = gprs;
        v.rip = rip;
        v.mode = VcpuMode::SecureMode(e);
        v.current_tcs = Some((e, tcs_gva));

        self.flush_space(super::NORMAL_SPACE);
        Ok(self.cost.charge(mode, CostEvent::Eresume))
    }

    /// P-Enclaves register in-enclave handlers for white-listed vectors.
    pub fn register_exception_handler(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        vector: ExceptionVector,
        handler: GuestVirtAddr,
    ) -> Result<()> {
        self.expect_secure(vcpu, e)?;
        let enclave = self.enclave_mut(e)?;
        if enclave.mode != EnclaveMode::P {
            return Err(Error::UnsupportedInMode(enclave.mode.as_str()));
        }
        enclave.exception_handlers.insert(vector, handler);
        Ok(())
    }

    /// Routes an interrupt or exception. All events trap to the monitor
    /// first: white-listed vectors with a registered handler are delivered
    /// inside a P-Enclave (context pushed to the SSA, no world switch);
    /// everything else raised in secure mode triggers an AEX and is
    /// forwarded to the primary OS.
    pub fn deliver_exception(
        &mut self,
        vcpu: usize,
        vector: ExceptionVector,
    ) -> Result<ExceptionDisposition> {
        let res = self.deliver_exception_inner(vcpu, vector);
        let (disposition, cost) = match &res {
            Ok((d, cost)) => (format!("{d:?}"), *cost),
            Err(e) => (format!("err:{e}"), 0),
        };
        self.log_op("deliver_exception", format!("{vector:?}"), disposition, cost);
        res.map(|(d, _)| d)
    }

    fn deliver_exception_inner(
        &mut self,
        vcpu: usize,
        vector: ExceptionVector,
    ) -> Result<(ExceptionDisposition, u64)> {
        let e = match self.vcpu(vcpu).mode {
            VcpuMode::SecureMode(e) => e,
            _ => return Ok((ExceptionDisposition::HandledByPrimaryOs, 0)),
        };
        let enclave = self.enclave(e)?;
        let in_enclave = enclave.mode == EnclaveMode::P
            && enclave.exception_whitelist.contains(&vector)
            && enclave.exception_handlers.contains_key(&vector);
        if in_enclave {
            let handler = enclave.exception_handlers[&vector];
            let (_, tcs_gva) = self.vcpu(vcpu).current_tcs.ok_or(Error::NotInSecureMode)?;
            let ctx = {
                let v = self.vcpu(vcpu);
                (v.gprs, v.rip)
            };
            self.ssa_push(e, tcs_gva, ctx)?;
            self.vcpu_mut(vcpu).rip = handler;
            let cost = self.cost.charge(EnclaveMode::P, CostEvent::ExceptionInEnclave);
            return Ok((ExceptionDisposition::InEnclave { handler }, cost));
        }
        let mode = self.enclave(e)?.mode;
        self.aex(vcpu, e)?;
        let cost = self.cost.charge(mode, CostEvent::ExceptionForward);
        Ok((ExceptionDisposition::Forwarded, cost))
    }

    /// Return from an in-enclave exception handler: pop the SSA slot and
    /// resume the interrupted context without any world switch.
    pub fn p_exception_return(&mut self, vcpu: usize, e: EnclaveId) -> Result<()> {
        let res = (|| {
            self.expect_secure(vcpu, e)?;
            let (_, tcs_gva) = self.vcpu(vcpu).current_tcs.ok_or(Error::NotInSecureMode)?;
            let (gprs, rip) = self.ssa_pop(e, tcs_gva)?;
            let v = self.vcpu_mut(vcpu);
            v.gprs = gprs;
            v.rip = rip;
            Ok(())
        })();
        let disposition = Self::disposition(&res);
        self.log_op("p_exception_return", format!("{e:#x}"), disposition, 0);
        res
    }

    /// EDMM commit: a fault inside the declared dynamic region gets a fresh
    /// zeroed read-write page, mapped without consulting the primary OS.
    /// Faults outside it abort.
    pub fn handle_page_fault(
        &mut self,
        e: EnclaveId,
        gva: GuestVirtAddr,
        access: Access,
    ) -> Result<FrameNumber> {
        let res = self.handle_page_fault_inner(e, gva, access);
        let disposition = Self::disposition(&res);
        self.log_op("handle_page_fault", format!("{e:#x},{gva:#x}"), disposition, 0);
        res
    }

    fn handle_page_fault_inner(
        &mut self,
        e: EnclaveId,
        gva: GuestVirtAddr,
        _access: Access,
    ) -> Result<FrameNumber> {
        let page = Self::page_of(gva);
        let enclave = self.enclave(e)?;
        if enclave.state != EnclaveState::Initialized {
            return Err(Error::WrongState(enclave.state.name()));
        }
        if !enclave.secs.contains(page) {
            return Err(Error::IllegalAccess(gva));
        }
        if !enclave.dynamic.contains(&enclave.secs, page) {
            return Err(Error::IllegalAccess(gva));
        }
        if self.epcm.lookup(e, page).is_some() {
            // the linear address already has a page (possibly unmapped
            // SECS/TCS); committing over it would alias
            return Err(Error::IllegalAccess(gva));
        }
        let space_id = enclave.space;
        if self.space(space_id).gpt.get(page).is_some() {
            return Err(Error::IllegalAccess(gva));
        }

        let frame = self.frames.alloc_epc_frame(e)?;
        self.trace.push(TraceEvent::FrameAlloc {
            frame,
            owner: format!("enclave:{e:#x}"),
        });
        self.epcm.insert(EpcmEntry {
            frame,
            page_type: PageType::Reg,
            perms: Perms::R | Perms::W,
            owner_enclave: e,
            linear_addr: page,
            in_use: true,
        });
        let hpa = crate::addr::frame_to_hpa(frame);
        let space = self.space_mut(space_id);
        if space.level_count == 1 {
            space.gpt.insert(page, hpa, Perms::R | Perms::W, false)?;
        } else {
            space.gpt.insert(page, hpa, Perms::R | Perms::W, false)?;
            space.npt.insert(hpa, hpa, Perms::R | Perms::W, false)?;
        }
        self.trace.push(TraceEvent::Map {
            space: space_id,
            gva: page,
            target: hpa,
            perms: "rw".into(),
            pinned: false,
        });
        self.enclave_mut(e)?.frames.insert(frame);
        Ok(frame)
    }

    /// Permission-change hypercall for GU/HU enclaves; the shootdown is
    /// discharged before returning. P-Enclaves edit their own level-1 table
    /// instead.
    pub fn mprotect_hypercall(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        gva: GuestVirtAddr,
        new_perms: Perms,
    ) -> Result<()> {
        let res = self.mprotect_inner(vcpu, e, gva, new_perms);
        let cost = *res.as_ref().unwrap_or(&0);
        let disposition = Self::disposition(&res);
        self.log_op(
            "mprotect_hypercall",
            format!("{e:#x},{gva:#x},{}", new_perms.as_str()),
            disposition,
            cost,
        );
        res.map(|_| ())
    }

    fn mprotect_inner(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        gva: GuestVirtAddr,
        new_perms: Perms,
    ) -> Result<u64> {
        self.expect_secure(vcpu, e)?;
        let enclave = self.enclave(e)?;
        if enclave.mode == EnclaveMode::P {
            return Err(Error::UnsupportedInMode("p"));
        }
        let mode = enclave.mode;
        let space_id = enclave.space;
        let page = Self::page_of(gva);

        let space = self.space_mut(space_id);
        space.gpt.set_perms(page, new_perms)?;
        if let Some(entry) = self.epcm.lookup(e, page).map(|en| en.frame) {
            if let Some(en) = self.epcm.get_mut(entry) {
                en.perms = new_perms;
            }
        }
        self.trace.push(TraceEvent::SetPerms {
            space: space_id,
            gva: page,
            perms: new_perms.as_str(),
        });
        self.tlb.note_shootdown(space_id);
        self.flush_space(space_id);
        Ok(self.cost.charge(mode, CostEvent::MprotectHypercall))
    }

    /// P-Enclave self-managed level-1 page table edit: permission change on
    /// its own GPT, no monitor page-table call, no world switch.
    pub fn p_set_perms(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        gva: GuestVirtAddr,
        new_perms: Perms,
    ) -> Result<()> {
        let res: Result<u64> = (|| {
            self.expect_secure(vcpu, e)?;
            let enclave = self.enclave(e)?;
            if enclave.mode != EnclaveMode::P {
                return Err(Error::UnsupportedInMode(enclave.mode.as_str()));
            }
            let space_id = enclave.space;
            let page = Self::page_of(gva);
            self.space_mut(space_id).gpt.set_perms(page, new_perms)?;
            self.trace.push(TraceEvent::SetPerms {
                space: space_id,
                gva: page,
                perms: new_perms.as_str(),
            });
            self.tlb.note_shootdown(space_id);
            self.flush_space(space_id);
            Ok(self.cost.charge(EnclaveMode::P, CostEvent::SelfPageTableEdit))
        })();
        let cost = *res.as_ref().unwrap_or(&0);
        let disposition = Self::disposition(&res);
        self.log_op(
            "p_set_perms",
            format!("{e:#x},{gva:#x},{}", new_perms.as_str()),
            disposition,
            cost,
        );
        res.map(|_| ())
    }

    /// Adversarial-capable P-Enclave GPT edit: map an arbitrary GPA into its
    /// own level-1 table. The NPT still confines what is reachable.
    pub fn p_map(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        gva: GuestVirtAddr,
        gpa: u64,
        perms: Perms,
    ) -> Result<()> {
        let res: Result<u64> = (|| {
            self.expect_secure(vcpu, e)?;
            let enclave = self.enclave(e)?;
            if enclave.mode != EnclaveMode::P {
                return Err(Error::UnsupportedInMode(enclave.mode.as_str()));
            }
            let space_id = enclave.space;
            self.space_mut(space_id).gpt.insert(gva, gpa, perms, false)?;
            self.trace.push(TraceEvent::Map {
                space: space_id,
                gva,
                target: gpa,
                perms: perms.as_str(),
                pinned: false,
            });
            Ok(self.cost.charge(EnclaveMode::P, CostEvent::SelfPageTableEdit))
        })();
        let cost = *res.as_ref().unwrap_or(&0);
        let disposition = Self::disposition(&res);
        self.log_op("p_map", format!("{e:#x},{gva:#x},{gpa:#x}"), disposition, cost);
        res.map(|_| ())
    }

    /// Checked memory access from secure mode. Translation runs in the
    /// enclave's own space; unmapped faults inside the dynamic region commit
    /// memory on demand. The resolved frame is checked against the R-2
    /// allowance (own frames plus marshalling buffer).
    pub fn enclave_memory_access(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        gva: GuestVirtAddr,
        access: Access,
        data: Option<&[u8]>,
    ) -> Result<Option<Vec<u8>>> {
        self.expect_secure(vcpu, e)?;
        let enclave = self.enclave(e)?;
        let space_id = enclave.space;

        let mut attempts = 0;
        let hpa = loop {
            attempts += 1;
            let space = self.spaces.get(&space_id).expect("space exists");
            match paging::translate(space, gva, access, &mut self.tlb) {
                Ok(hpa) => break hpa,
                Err(err @ Error::PageFault { kind, level, .. }) => {
                    self.trace.push(TraceEvent::PageFault {
                        space: space_id,
                        gva,
                        access: format!("{access:?}").to_lowercase(),
                        level: format!("{level:?}").to_lowercase(),
                    });
                    if kind == FaultKind::Unmapped && attempts == 1 {
                        // EDMM path; surfaces IllegalAccess/EpcExhausted when
                        // the fault is not a legal dynamic commit
                        self.handle_page_fault(e, gva, access)?;
                        continue;
                    }
                    return Err(err);
                }
                Err(other) => return Err(other),
            }
        };

        let frame = (hpa as usize) / PAGE_SIZE;
        let offset = (hpa as usize) % PAGE_SIZE;
        let enclave = self.enclave(e)?;
        if self.cfg.buffer_enforced {
            let allowed =
                enclave.frames.contains(&frame) || enclave.marshalling_frames.contains(&frame);
            if !allowed {
                self.record_violation(format!(
                    "R-2: enclave {e:#x} access to gva {gva:#x} resolved to foreign frame {frame}"
                ));
                return Err(Error::IllegalAccess(gva));
            }
        }
        match data {
            Some(bytes) => {
                if offset + bytes.len() > PAGE_SIZE {
                    return Err(Error::BadAddress(gva));
                }
                self.frames.write(frame, offset, bytes)?;
                Ok(None)
            }
            None => Ok(Some(
                self.frames.read(frame, offset, PAGE_SIZE - offset)?.to_vec(),
            )),
        }
    }

    /// Multi-page enclave write.
    pub fn enclave_write(&mut self, vcpu: usize, e: EnclaveId, gva: GuestVirtAddr, data: &[u8]) -> Result<()> {
        let mut off = 0usize;
        while off < data.len() {
            let cur = gva + off as u64;
            let page_off = (cur as usize) % PAGE_SIZE;
            let chunk = (PAGE_SIZE - page_off).min(data.len() - off);
            self.enclave_memory_access(vcpu, e, cur, Access::Write, Some(&data[off..off + chunk]))?;
            off += chunk;
        }
        Ok(())
    }

    /// Multi-page enclave read.
    pub fn enclave_read(&mut self, vcpu: usize, e: EnclaveId, gva: GuestVirtAddr, len: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let cur = gva + out.len() as u64;
            let page_off = (cur as usize) % PAGE_SIZE;
            let chunk = (PAGE_SIZE - page_off).min(len - out.len());
            let bytes = self
                .enclave_memory_access(vcpu, e, cur, Access::Read, None)?
                .expect("read returns data");
            out.extend_from_slice(&bytes[..chunk]);
        }
        Ok(out)
    }

    /// Direct application-memory access from the enclave, available only in
    /// the insecure baseline mode used for the copy-count comparison.
    pub fn baseline_enclave_app_access(
        &mut self,
        vcpu: usize,
        e: EnclaveId,
        gva: GuestVirtAddr,
        access: Access,
        data: Option<&[u8]>,
    ) -> Result<Option<Vec<u8>>> {
        self.expect_secure(vcpu, e)?;
        if self.cfg.buffer_enforced {
            return Err(Error::IllegalAccess(gva));
        }
        let space = self.spaces.get(&super::NORMAL_SPACE).expect("normal space");
        let hpa = paging::translate(space, gva, access, &mut self.tlb)?;
        let frame = (hpa as usize) / PAGE_SIZE;
        let offset = (hpa as usize) % PAGE_SIZE;
        match data {
            Some(bytes) => {
                self.frames.write(frame, offset, bytes)?;
                Ok(None)
            }
            None => Ok(Some(
                self.frames.read(frame, offset, PAGE_SIZE - offset)?.to_vec(),
            )),
        }
    }

    // ----- marshalling buffer allocation (per-TCS bump frames) ----------

    pub fn msbuf_push_frame(&mut self, e: EnclaveId, tcs: GuestVirtAddr) -> Result<()> {
        let enclave = self.enclave_mut(e)?;
        let part = enclave.msbuf.get_mut(&tcs).ok_or(Error::UnknownTcs(tcs))?;
        part.frame_stack.push(part.cursor);
        Ok(())
    }

    pub fn msbuf_pop_frame(&mut self, e: EnclaveId, tcs: GuestVirtAddr) -> Result<()> {
        let enclave = self.enclave_mut(e)?;
        let part = enclave.msbuf.get_mut(&tcs).ok_or(Error::UnknownTcs(tcs))?;
        part.cursor = part.frame_stack.pop().ok_or(Error::NoSavedState)?;
        Ok(())
    }

    /// Bump allocation inside the calling TCS's buffer slice. Zero-length
    /// allocations return the current cursor without advancing it.
    pub fn msbuf_alloc(&mut self, e: EnclaveId, tcs: GuestVirtAddr, n: u64) -> Result<GuestVirtAddr> {
        let enclave = self.enclave_mut(e)?;
        let part = enclave.msbuf.get_mut(&tcs).ok_or(Error::UnknownTcs(tcs))?;
        let available = part.size - part.cursor;
        if n > available {
            return Err(Error::BufferOverflow {
                requested: n,
                available,
            });
        }
        let gva = part.base + part.cursor;
        part.cursor += n;
        Ok(gva)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::testutil::{self, test_monitor, TEST_TCS};
    use crate::monitor::DynamicRegion;

    const AEP: GuestVirtAddr = 0x5000;

    fn entered(mode: EnclaveMode) -> (Monitor, EnclaveId) {
        let mut m = test_monitor(16);
        let e = testutil::build_basic_enclave(&mut m, 0x7000_0000, mode);
        m.eenter(0, e, TEST_TCS, AEP).unwrap();
        (m, e)
    }

    #[test]
    fn eenter_charges_per_mode_instruction_cost() {
        for (mode, expected) in [
            (EnclaveMode::Gu, 1_704),
            (EnclaveMode::Hu, 1_163),
            (EnclaveMode::P, 1_649),
        ] {
            let mut m = test_monitor(16);
            let e = testutil::build_basic_enclave(&mut m, 0x7000_0000, mode);
            let before = m.cost.accumulated();
            m.eenter(0, e, TEST_TCS, AEP).unwrap();
            assert_eq!(m.cost.accumulated() - before, expected, "{mode:?}");
        }
    }

    #[test]
    fn second_eenter_on_active_tcs_is_busy() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        assert_eq!(
            m.eenter(1, e, TEST_TCS, AEP),
            Err(Error::TcsBusy(TEST_TCS))
        );
    }

    #[test]
    fn eexit_rejects_arbitrary_target() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        assert_eq!(
            m.eexit(0, e, 0xDEAD_0000),
            Err(Error::IllegalExitTarget {
                target: 0xDEAD_0000,
                aep: AEP
            })
        );
        // still in secure mode; the legitimate exit works
        m.eexit(0, e, AEP).unwrap();
        assert_eq!(m.vcpu(0).mode, VcpuMode::NormalMode);
        assert_eq!(m.vcpu(0).rip, AEP);
    }

    #[test]
    fn eexit_scrubs_all_but_return_registers() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        let mut gprs = [0u64; GPR_COUNT];
        for (i, g) in gprs.iter_mut().enumerate() {
            *g = 0x1111_1111_0000_0000 + i as u64;
        }
        m.set_secure_gprs(0, gprs).unwrap();
        m.eexit(0, e, AEP).unwrap();
        let view = m.vcpu(0).gprs;
        assert_eq!(view[0], gprs[0]);
        assert_eq!(view[1], gprs[1]);
        for r in 2..GPR_COUNT {
            assert_eq!(view[r], 0, "gpr {r} leaked");
        }
    }

    #[test]
    fn aex_eresume_roundtrip_is_bit_exact_and_scrubbed() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        let gprs = [0xAB5E_55ED_u64.wrapping_mul(7); GPR_COUNT];
        m.set_secure_gprs(0, gprs).unwrap();
        let rip_before = m.vcpu(0).rip;

        m.aex(0, e).unwrap();
        assert_eq!(m.vcpu(0).mode, VcpuMode::NormalMode);
        assert!(m.vcpu(0).gprs.iter().all(|&g| g == 0), "AEX must scrub");
        assert_eq!(m.vcpu(0).rip, AEP);

        m.eresume(0, e, TEST_TCS).unwrap();
        assert_eq!(m.vcpu(0).mode, VcpuMode::SecureMode(e));
        assert_eq!(m.vcpu(0).gprs, gprs);
        assert_eq!(m.vcpu(0).rip, rip_before);
    }

    #[test]
    fn nested_context_saves_overflow_the_ssa() {
        // ssa_frame_count = 1: one in-enclave delivery fills the SSA, the
        // nested one overflows.
        let (mut m, e) = entered(EnclaveMode::P);
        m.register_exception_handler(0, e, ExceptionVector::Ud, 0x100200)
            .unwrap();
        assert!(matches!(
            m.deliver_exception(0, ExceptionVector::Ud).unwrap(),
            ExceptionDisposition::InEnclave { .. }
        ));
        assert_eq!(
            m.deliver_exception(0, ExceptionVector::Ud),
            Err(Error::SsaOverflow)
        );
    }

    #[test]
    fn p_enclave_handles_whitelisted_ud_in_enclave() {
        let (mut m, e) = entered(EnclaveMode::P);
        m.register_exception_handler(0, e, ExceptionVector::Ud, 0x100200)
            .unwrap();
        let before = m.cost.accumulated();
        let d = m.deliver_exception(0, ExceptionVector::Ud).unwrap();
        assert_eq!(d, ExceptionDisposition::InEnclave { handler: 0x100200 });
        assert_eq!(m.cost.accumulated() - before, 258);
        assert_eq!(m.vcpu(0).rip, 0x100200);
        // handler returns to the interrupted context
        m.p_exception_return(0, e).unwrap();
        assert_eq!(m.vcpu(0).mode, VcpuMode::SecureMode(e));
    }

    #[test]
    fn gu_exception_forwards_with_aex_at_table_cost() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        let before = m.cost.accumulated();
        let d = m.deliver_exception(0, ExceptionVector::Ud).unwrap();
        assert_eq!(d, ExceptionDisposition::Forwarded);
        assert_eq!(m.vcpu(0).mode, VcpuMode::NormalMode);
        m.eresume(0, e, TEST_TCS).unwrap();
        // aex + forward + eresume equals the measured GU #UD round trip
        assert_eq!(m.cost.accumulated() - before, 17_490);
    }

    #[test]
    fn edmm_commits_first_touch_of_heap() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        let heap = m.enclave(e).unwrap().dynamic.heap_base;
        let data = m
            .enclave_memory_access(0, e, heap, Access::Read, None)
            .unwrap()
            .unwrap();
        assert!(data.iter().all(|&b| b == 0));
        m.enclave_memory_access(0, e, heap, Access::Write, Some(b"heap!"))
            .unwrap();
        assert_eq!(
            &m.enclave_memory_access(0, e, heap, Access::Read, None)
                .unwrap()
                .unwrap()[..5],
            b"heap!"
        );
        m.check_invariants().unwrap();
    }

    #[test]
    fn edmm_outside_dynamic_region_aborts() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        // inside ELRANGE but outside heap/stack
        assert_eq!(
            m.enclave_memory_access(0, e, 0x180000, Access::Read, None),
            Err(Error::IllegalAccess(0x180000))
        );
        // outside ELRANGE entirely
        assert_eq!(
            m.enclave_memory_access(0, e, 0x9000_0000, Access::Read, None),
            Err(Error::IllegalAccess(0x9000_0000))
        );
    }

    #[test]
    fn edmm_surfaces_epc_exhaustion() {
        let mut m = test_monitor(5); // exactly the frames the basic enclave needs
        let e = testutil::build_basic_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu);
        m.eenter(0, e, TEST_TCS, AEP).unwrap();
        let heap = m.enclave(e).unwrap().dynamic.heap_base;
        // first heap page consumes the last free frame
        m.enclave_memory_access(0, e, heap, Access::Read, None)
            .unwrap();
        assert_eq!(
            m.enclave_memory_access(0, e, heap + PAGE_SIZE as u64, Access::Read, None),
            Err(Error::EpcExhausted)
        );
    }

    #[test]
    fn mprotect_narrow_then_write_faults_then_widen_succeeds() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        let page = testutil::TEST_OENTRY;
        m.mprotect_hypercall(0, e, page, Perms::R).unwrap();
        assert!(matches!(
            m.enclave_memory_access(0, e, page, Access::Write, Some(b"x")),
            Err(Error::PageFault { .. })
        ));
        m.mprotect_hypercall(0, e, page, Perms::R | Perms::W).unwrap();
        m.enclave_memory_access(0, e, page, Access::Write, Some(b"x"))
            .unwrap();
    }

    #[test]
    fn mprotect_costs_differ_between_gu_and_p_self_edit() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        let before = m.cost.accumulated();
        m.mprotect_hypercall(0, e, testutil::TEST_OENTRY, Perms::R).unwrap();
        assert_eq!(m.cost.accumulated() - before, 2_660);

        let (mut mp, ep) = entered(EnclaveMode::P);
        let before = mp.cost.accumulated();
        mp.p_set_perms(0, ep, testutil::TEST_OENTRY, Perms::R).unwrap();
        assert_eq!(mp.cost.accumulated() - before, 1_132);

        // the hypercall path is not for P-Enclaves
        assert_eq!(
            mp.mprotect_hypercall(0, ep, testutil::TEST_OENTRY, Perms::R),
            Err(Error::UnsupportedInMode("p"))
        );
    }

    #[test]
    fn tcs_pages_are_not_accessible_from_the_enclave() {
        let (mut m, e) = entered(EnclaveMode::Gu);
        // TCS gva is inside ELRANGE but outside the dynamic region and was
        // never mapped: access aborts without creating a mapping
        assert_eq!(
            m.enclave_memory_access(0, e, TEST_TCS, Access::Read, None),
            Err(Error::IllegalAccess(TEST_TCS))
        );
    }

    #[test]
    fn p_enclave_cannot_escape_via_own_gpt() {
        let (mut m, e) = entered(EnclaveMode::P);
        // map a monitor-owned frame's address into the P-Enclave's own GPT
        let monitor_frame_gpa = 0u64; // frame 0 is monitor-owned
        m.p_map(0, e, 0x10F000, monitor_frame_gpa, Perms::R | Perms::W)
            .unwrap();
        // the NPT has no such entry: translation faults, nothing readable
        assert!(matches!(
            m.enclave_memory_access(0, e, 0x10F000, Access::Read, None),
            Err(Error::PageFault { .. }) | Err(Error::IllegalAccess(_))
        ));
        m.check_invariants().unwrap();
    }

    #[test]
    fn msbuf_frames_nest_and_overflow_cleanly() {
        let mut m = test_monitor(16);
        // build an enclave with a marshalling buffer
        let mut secs = testutil::small_secs();
        secs.marshalling_size = 2 * PAGE_SIZE as u64;
        let e = m
            .ecreate(0x7000_0000, secs, EnclaveMode::Gu, testutil::small_dynamic())
            .unwrap();
        let code = vec![0u8; PAGE_SIZE];
        m.eadd(e, &code, 0x100000, Perms::R | Perms::X, crate::physmem::PageType::Reg, None)
            .unwrap();
        let tcs = crate::monitor::tcs_page_bytes(0x100000, testutil::TEST_SSA_BASE);
        m.eadd(e, &tcs, TEST_TCS, Perms::empty(), crate::physmem::PageType::Tcs, None)
            .unwrap();
        let ssa = vec![0u8; PAGE_SIZE];
        m.eadd(e, &ssa, testutil::TEST_SSA_BASE, Perms::R | Perms::W, crate::physmem::PageType::Ssa, None)
            .unwrap();
        // pin two normal pages as the buffer
        let base_frame = m.frames.normal_range.start;
        m.normal_map(0x4000_0000, base_frame, Perms::R | Perms::W, true).unwrap();
        m.normal_map(0x4000_1000, base_frame + 1, Perms::R | Perms::W, true).unwrap();
        let signer = crate::crypto::KeyPair::from_seed(&[9u8; 32]);
        let sig = crate::attest::Sigstruct::sign(&signer, m.enclave(e).unwrap().measurement.current(), 0);
        m.einit(e, &sig, 0x4000_0000, 2 * PAGE_SIZE as u64).unwrap();

        m.msbuf_push_frame(e, TEST_TCS).unwrap();
        let a = m.msbuf_alloc(e, TEST_TCS, 100).unwrap();
        let zero = m.msbuf_alloc(e, TEST_TCS, 0).unwrap();
        assert_eq!(zero, a + 100);
        m.msbuf_push_frame(e, TEST_TCS).unwrap();
        let b = m.msbuf_alloc(e, TEST_TCS, 100).unwrap();
        assert_eq!(b, a + 100);
        m.msbuf_pop_frame(e, TEST_TCS).unwrap();
        // outer frame cursor preserved
        let c = m.msbuf_alloc(e, TEST_TCS, 10).unwrap();
        assert_eq!(c, a + 100);
        assert!(matches!(
            m.msbuf_alloc(e, TEST_TCS, 2 * PAGE_SIZE as u64),
            Err(Error::BufferOverflow { .. })
        ));
    }

    #[test]
    fn dynamic_region_stack_is_at_top_of_elrange() {
        let secs = testutil::small_secs();
        let dyn_region = DynamicRegion {
            heap_base: 0x110000,
            heap_size: PAGE_SIZE as u64,
            stack_size: PAGE_SIZE as u64,
        };
        assert!(dyn_region.contains(&secs, 0x110000));
        assert!(!dyn_region.contains(&secs, 0x111000));
        assert!(dyn_region.contains(&secs, secs.elrange_end() - PAGE_SIZE as u64));
        assert!(!dyn_region.contains(&secs, secs.elrange_end() - 2 * PAGE_SIZE as u64));
    }
}
