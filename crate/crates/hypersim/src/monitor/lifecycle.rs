// SPDX-License-Identifier: Apache-2.0

//! Enclave lifecycle emulation: ECREATE, EADD, EEXTEND, EINIT, EREMOVE.
//!
//! State transitions are strictly Created -> Loading -> Initialized -> Dead.
//! Pages land in EPC frames chosen by the monitor (or proposed by the
//! untrusted kernel and validated here), are mapped into the enclave's own
//! GPT/NPT pair, and every add/extend feeds the running measurement.

use std::collections::BTreeMap;

use super::{
    Enclave, EnclaveId, EnclaveMode, EnclaveState, Monitor, MsbufPartition, Secs, Tcs, TcsState,
    TCS_OENTRY_OFFSET, TCS_SSA_BASE_OFFSET,
};
use crate::addr::{frame_to_hpa, FrameNumber, GuestVirtAddr, PAGE_SIZE};
use crate::attest::{self, MeasurementCtx, Sigstruct, EEXTEND_CHUNK};
use crate::error::{Error, Result};
use crate::harness::trace::TraceEvent;
use crate::monitor::DynamicRegion;
use crate::paging::{AddressSpace, Perms, TableOwner};
use crate::physmem::{EpcmEntry, FrameOwner, PageType};

impl Monitor {
    /// ECREATE: sets up the enclave instance. The GVA of the SECS page
    /// doubles as the enclave id. The dynamic region fixes where post-init
    /// page faults may commit memory.
    pub fn ecreate(
        &mut self,
        secs_gva: GuestVirtAddr,
        secs: Secs,
        mode: EnclaveMode,
        dynamic: DynamicRegion,
    ) -> Result<EnclaveId> {
        let res = self.ecreate_inner(secs_gva, secs, mode, dynamic);
        let disposition = Self::disposition(&res);
        self.log_op(
            "ecreate",
            format!("{secs_gva:#x},{mode:?},{:#x}+{:#x}", secs.elrange_base, secs.elrange_size),
            disposition,
            0,
        );
        res
    }

    fn ecreate_inner(
        &mut self,
        secs_gva: GuestVirtAddr,
        secs: Secs,
        mode: EnclaveMode,
        dynamic: DynamicRegion,
    ) -> Result<EnclaveId> {
        Self::check_page_arg(secs_gva)?;
        secs.validate()?;
        if self.enclave(secs_gva).is_ok() {
            return Err(Error::AlreadyMapped(secs_gva));
        }

        let secs_frame = self.frames.alloc_epc_frame(secs_gva)?;
        self.trace.push(TraceEvent::FrameAlloc {
            frame: secs_frame,
            owner: format!("enclave:{secs_gva:#x}"),
        });
        self.frames.write(secs_frame, 0, &secs.to_page_bytes())?;
        self.epcm.insert(EpcmEntry {
            frame: secs_frame,
            page_type: PageType::Secs,
            perms: Perms::empty(),
            owner_enclave: secs_gva,
            linear_addr: secs_gva,
            in_use: true,
        });

        let space_id = self.alloc_space_id();
        let space = match mode {
            EnclaveMode::Hu => AddressSpace::single_level(space_id),
            EnclaveMode::Gu => AddressSpace::two_level(space_id, TableOwner::Monitor),
            EnclaveMode::P => AddressSpace::two_level(space_id, TableOwner::Enclave(secs_gva)),
        };
        self.insert_space(space);

        let mut measurement = MeasurementCtx::new();
        measurement.extend(&attest::ecreate_record(
            secs.elrange_size,
            secs.attributes,
            secs.marshalling_size,
        ));

        let exception_whitelist = match mode {
            EnclaveMode::P => [
                super::ExceptionVector::Pf,
                super::ExceptionVector::Ud,
                super::ExceptionVector::Gp,
            ]
            .into_iter()
            .collect(),
            _ => Default::default(),
        };

        let enclave = Enclave {
            id: secs_gva,
            secs,
            state: EnclaveState::Created,
            mode,
            space: space_id,
            tcs: BTreeMap::new(),
            marshalling: None,
            marshalling_frames: Default::default(),
            measurement,
            dynamic,
            frames: [secs_frame].into_iter().collect(),
            secs_frame,
            exception_whitelist,
            exception_handlers: BTreeMap::new(),
            msbuf: BTreeMap::new(),
        };
        self.insert_enclave(enclave);
        Ok(secs_gva)
    }

    /// EADD: copies a source page into a fresh EPC frame, maps it, and
    /// extends the measurement with the page's offset, permissions and type.
    /// The untrusted kernel may propose the frame; a frame in use by anyone
    /// is rejected.
    pub fn eadd(
        &mut self,
        e: EnclaveId,
        src: &[u8],
        gva: GuestVirtAddr,
        perms: Perms,
        page_type: PageType,
        proposed_frame: Option<FrameNumber>,
    ) -> Result<()> {
        let res = self.eadd_inner(e, src, gva, perms, page_type, proposed_frame);
        let disposition = Self::disposition(&res);
        self.log_op(
            "eadd",
            format!("{e:#x},{gva:#x},{},{page_type:?}", perms.as_str()),
            disposition,
            0,
        );
        res
    }

    fn eadd_inner(
        &mut self,
        e: EnclaveId,
        src: &[u8],
        gva: GuestVirtAddr,
        perms: Perms,
        page_type: PageType,
        proposed_frame: Option<FrameNumber>,
    ) -> Result<()> {
        Self::check_page_arg(gva)?;
        if src.len() != PAGE_SIZE {
            return Err(Error::BadAddress(src.len() as u64));
        }
        if page_type == PageType::Secs {
            return Err(Error::InvalidSecs("cannot add a second SECS page"));
        }
        let enclave = self.enclave(e)?;
        if !matches!(enclave.state, EnclaveState::Created | EnclaveState::Loading) {
            return Err(Error::WrongState(enclave.state.name()));
        }
        if !enclave.secs.contains(gva) {
            return Err(Error::OutsideElrange(gva));
        }
        if self.epcm.lookup(e, gva).is_some() {
            return Err(Error::AlreadyMapped(gva));
        }
        let secs = enclave.secs;
        let space_id = enclave.space;

        let frame = match proposed_frame {
            Some(f) => self.frames.claim_epc_frame(f, e)?,
            None => self.frames.alloc_epc_frame(e)?,
        };
        self.trace.push(TraceEvent::FrameAlloc {
            frame,
            owner: format!("enclave:{e:#x}"),
        });
        self.frames.write(frame, 0, src)?;
        self.epcm.insert(EpcmEntry {
            frame,
            page_type,
            perms,
            owner_enclave: e,
            linear_addr: gva,
            in_use: true,
        });

        // SECS and TCS pages are never mapped: not reachable from the
        // enclave or the primary OS.
        if matches!(page_type, PageType::Reg | PageType::Ssa) {
            let hpa = frame_to_hpa(frame);
            let space = self.space_mut(space_id);
            if space.level_count == 1 {
                space.gpt.insert(gva, hpa, perms, false)?;
            } else {
                space.gpt.insert(gva, hpa, perms, false)?;
                space
                    .npt
                    .insert(hpa, hpa, Perms::R | Perms::W | Perms::X, false)?;
            }
            self.trace.push(TraceEvent::Map {
                space: space_id,
                gva,
                target: hpa,
                perms: perms.as_str(),
                pinned: false,
            });
        }

        let offset = gva - secs.elrange_base;
        let record = attest::eadd_record(offset, perms, page_type);
        let enclave = self.enclave_mut(e)?;
        enclave.measurement.extend(&record);
        enclave.frames.insert(frame);
        enclave.state = EnclaveState::Loading;

        if page_type == PageType::Tcs {
            let oentry = u64::from_le_bytes(
                src[TCS_OENTRY_OFFSET..TCS_OENTRY_OFFSET + 8]
                    .try_into()
                    .unwrap(),
            );
            let ssa_base = u64::from_le_bytes(
                src[TCS_SSA_BASE_OFFSET..TCS_SSA_BASE_OFFSET + 8]
                    .try_into()
                    .unwrap(),
            );
            let ssa_pages = (0..secs.ssa_frame_count)
                .map(|i| ssa_base + (i * PAGE_SIZE) as u64)
                .collect();
            enclave.tcs.insert(
                gva,
                Tcs {
                    oentry,
                    state: TcsState::Available,
                    ssa_pages,
                    current_ssa_index: 0,
                    saved_aep: None,
                },
            );
        }
        Ok(())
    }

    /// EEXTEND: measures a previously added page's content in 256-byte
    /// chunks, each tagged with its offset inside the linear range.
    pub fn eextend(&mut self, e: EnclaveId, gva: GuestVirtAddr) -> Result<()> {
        let res = self.eextend_inner(e, gva);
        let disposition = Self::disposition(&res);
        self.log_op("eextend", format!("{e:#x},{gva:#x}"), disposition, 0);
        res
    }

    fn eextend_inner(&mut self, e: EnclaveId, gva: GuestVirtAddr) -> Result<()> {
        Self::check_page_arg(gva)?;
        let enclave = self.enclave(e)?;
        if enclave.state != EnclaveState::Loading {
            return Err(Error::WrongState(enclave.state.name()));
        }
        let elrange_base = enclave.secs.elrange_base;
        let entry = self.epcm.lookup(e, gva).ok_or(Error::NotMapped(gva))?;
        let frame = entry.frame;
        let page = self.frames.read(frame, 0, PAGE_SIZE)?.to_vec();

        let base_offset = gva - elrange_base;
        let enclave = self.enclave_mut(e)?;
        for (i, chunk) in page.chunks(EEXTEND_CHUNK).enumerate() {
            let record = attest::eextend_record(base_offset + (i * EEXTEND_CHUNK) as u64, chunk);
            enclave.measurement.extend(&record);
        }
        Ok(())
    }

    /// EINIT: verifies the SIGSTRUCT against the finalized measurement, then
    /// binds the marshalling buffer. Every buffer page must already be a
    /// pinned, populated normal mapping, the range must lie outside the
    /// linear range, and it is mapped read-write (never executable) and
    /// pinned for the enclave's lifetime.
    pub fn einit(
        &mut self,
        e: EnclaveId,
        sig: &Sigstruct,
        marshalling_base: GuestVirtAddr,
        marshalling_size: u64,
    ) -> Result<()> {
        let res = self.einit_inner(e, sig, marshalling_base, marshalling_size);
        let disposition = Self::disposition(&res);
        self.log_op(
            "einit",
            format!("{e:#x},{marshalling_base:#x}+{marshalling_size:#x}"),
            disposition,
            0,
        );
        res
    }

    fn einit_inner(
        &mut self,
        e: EnclaveId,
        sig: &Sigstruct,
        marshalling_base: GuestVirtAddr,
        marshalling_size: u64,
    ) -> Result<()> {
        let enclave = self.enclave(e)?;
        if enclave.state != EnclaveState::Loading {
            return Err(Error::WrongState(enclave.state.name()));
        }
        if !sig.verify() {
            return Err(Error::BadSignature);
        }
        let measured = enclave.measurement.current();
        if sig.mrenclave != measured || sig.attributes != enclave.secs.attributes {
            return Err(Error::MeasurementMismatch);
        }
        if marshalling_size != enclave.secs.marshalling_size {
            return Err(Error::MarshallingSizeMismatch);
        }
        let secs = enclave.secs;
        let space_id = enclave.space;
        let tcs_gvas: Vec<GuestVirtAddr> = enclave.tcs.keys().copied().collect();

        let mut marshalling_frames = Vec::new();
        if marshalling_size > 0 {
            Self::check_page_arg(marshalling_base)?;
            let m_end = marshalling_base + marshalling_size;
            if marshalling_base < secs.elrange_end() && m_end > secs.elrange_base {
                return Err(Error::MarshallingOverlapsElrange);
            }
            // every page: pinned in the primary OS table and resolving to a
            // populated normal frame
            let normal = self.space(super::NORMAL_SPACE);
            let mut gva = marshalling_base;
            while gva < m_end {
                let ge = normal
                    .gpt
                    .get(gva)
                    .filter(|entry| entry.pinned)
                    .ok_or(Error::MarshallingNotPinned(gva))?;
                let ne = normal
                    .npt
                    .get(ge.target)
                    .ok_or(Error::MarshallingNotPinned(gva))?;
                let frame = (ne.target as usize) / PAGE_SIZE;
                if self.frames.owner(frame)? != FrameOwner::Normal {
                    return Err(Error::MarshallingNotPinned(gva));
                }
                marshalling_frames.push((gva, frame));
                gva += PAGE_SIZE as u64;
            }
            // map into the enclave space: RW only, pinned
            for &(gva, frame) in &marshalling_frames {
                let hpa = frame_to_hpa(frame);
                let space = self.space_mut(space_id);
                if space.level_count == 1 {
                    space.gpt.insert(gva, hpa, Perms::R | Perms::W, true)?;
                } else {
                    space.gpt.insert(gva, hpa, Perms::R | Perms::W, true)?;
                    space.npt.insert(hpa, hpa, Perms::R | Perms::W, true)?;
                }
                self.trace.push(TraceEvent::Map {
                    space: space_id,
                    gva,
                    target: hpa,
                    perms: "rw".into(),
                    pinned: true,
                });
            }
        }

        // static per-TCS split of the buffer for edge-call frames
        let mut partitions = BTreeMap::new();
        if !tcs_gvas.is_empty() && marshalling_size > 0 {
            let slice = marshalling_size / tcs_gvas.len() as u64;
            for (i, tcs) in tcs_gvas.iter().enumerate() {
                partitions.insert(
                    *tcs,
                    MsbufPartition {
                        base: marshalling_base + i as u64 * slice,
                        size: slice,
                        cursor: 0,
                        frame_stack: Vec::new(),
                    },
                );
            }
        }

        let secs_frame = {
            let enclave = self.enclave_mut(e)?;
            let mrenclave = enclave.measurement.finalize();
            enclave.secs.mrenclave = mrenclave;
            enclave.state = EnclaveState::Initialized;
            enclave.marshalling = Some((marshalling_base, marshalling_size));
            enclave.marshalling_frames = marshalling_frames.iter().map(|&(_, f)| f).collect();
            enclave.msbuf = partitions;
            enclave.secs_frame
        };
        // seal the measurement into the SECS page image
        let mrenclave = self.enclave(e)?.secs.mrenclave;
        self.frames.write(secs_frame, 40, &mrenclave)?;
        Ok(())
    }

    /// EREMOVE: tears the enclave down. Frames are scrubbed first, then the
    /// mappings are destroyed, then the id is retired.
    pub fn eremove(&mut self, e: EnclaveId) -> Result<()> {
        let res = self.eremove_inner(e);
        let disposition = Self::disposition(&res);
        self.log_op("eremove", format!("{e:#x}"), disposition, 0);
        res
    }

    fn eremove_inner(&mut self, e: EnclaveId) -> Result<()> {
        let enclave = self.enclave(e)?;
        if enclave.tcs.values().any(|t| t.state == TcsState::Active) {
            return Err(Error::EnclaveBusy);
        }
        let space_id = enclave.space;
        let frames: Vec<FrameNumber> = enclave.frames.iter().copied().collect();

        // scrub, then unmap
        for frame in frames {
            self.frames.free_epc_frame(frame)?;
            self.epcm.remove_frame(frame);
            self.trace.push(TraceEvent::FrameFree { frame });
        }
        self.remove_space(space_id);
        self.flush_space(space_id);
        self.remove_enclave(e);
        Ok(())
    }
}
