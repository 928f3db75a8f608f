// SPDX-License-Identifier: Apache-2.0

//! Guest-side SDK emulation: the marshalling-buffer edge-call protocol.
//!
//! ECALL parameters are copied twice inbound (untrusted memory into the
//! buffer, then buffer into enclave memory); OCALL parameters are written by
//! the trusted side straight into a buffer region the handler reads in
//! place, so the return path costs one copy per parameter. A baseline mode
//! (buffer enforcement off) reproduces the single-copy behavior of an SDK
//! that lets the enclave touch application memory directly; it exists only
//! for the copy-count comparison and is insecure by design.

use serde::{Deserialize, Serialize};

use crate::addr::GuestVirtAddr;
use crate::error::{Error, Result};
use crate::harness::trace::TraceEvent;
use crate::monitor::{CostEvent, EnclaveId, Monitor};
use crate::paging::Access;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
    InOut,
    UserChecked,
}

impl Direction {
    pub fn inbound(self) -> bool {
        matches!(self, Direction::In | Direction::InOut)
    }

    pub fn outbound(self) -> bool {
        matches!(self, Direction::Out | Direction::InOut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub direction: Direction,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCallDescriptor {
    pub fn_id: u32,
    pub params: Vec<ParamSpec>,
}

impl EdgeCallDescriptor {
    pub fn marshalled_bytes(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.direction != Direction::UserChecked)
            .map(|p| p.size)
            .sum()
    }
}

/// Copy accounting for one edge call: `in_*` counts movement toward the
/// callee, `out_*` movement back to the caller.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CopyCounts {
    pub in_copies: u64,
    pub out_copies: u64,
    pub in_bytes: u64,
    pub out_bytes: u64,
}

/// Static context of an edge-call session: which vCPU and TCS drive the
/// enclave, the untrusted return point, and (baseline mode only) where
/// application-side parameters live.
#[derive(Debug, Clone, Copy)]
pub struct EdgeCtx {
    pub vcpu: usize,
    pub enclave: EnclaveId,
    pub tcs: GuestVirtAddr,
    pub aep: GuestVirtAddr,
    pub app_scratch: GuestVirtAddr,
}

/// Trusted-side view handed to the scripted enclave function.
pub struct EnclaveApi<'m> {
    pub mon: &'m mut Monitor,
    pub ctx: EdgeCtx,
    staging_cursor: GuestVirtAddr,
}

impl<'m> EnclaveApi<'m> {
    pub fn read(&mut self, gva: GuestVirtAddr, len: usize) -> Result<Vec<u8>> {
        self.mon.enclave_read(self.ctx.vcpu, self.ctx.enclave, gva, len)
    }

    pub fn write(&mut self, gva: GuestVirtAddr, data: &[u8]) -> Result<()> {
        self.mon.enclave_write(self.ctx.vcpu, self.ctx.enclave, gva, data)
    }

    /// Developer-managed buffer allocation (user_check support).
    pub fn msbuf_alloc(&mut self, n: u64) -> Result<GuestVirtAddr> {
        self.mon.msbuf_alloc(self.ctx.enclave, self.ctx.tcs, n)
    }

    fn stage_in(&mut self, bytes: &[u8]) -> Result<GuestVirtAddr> {
        let gva = self.staging_cursor;
        self.mon
            .enclave_write(self.ctx.vcpu, self.ctx.enclave, gva, bytes)?;
        self.staging_cursor += bytes.len() as u64;
        Ok(gva)
    }

    /// OCALL from inside the enclave: parameters are written directly into a
    /// buffer region (single copy), the world switches out through the
    /// recorded AEP, the untrusted handler works on the buffer in place, and
    /// results are read back after re-entry.
    pub fn ocall<F>(&mut self, desc: &EdgeCallDescriptor, inputs: &[Vec<u8>], mut untrusted_fn: F) -> Result<(Vec<Vec<u8>>, CopyCounts)>
    where
        F: FnMut(&mut UntrustedApi<'_>, &[GuestVirtAddr]) -> Result<()>,
    {
        let ctx = self.ctx;
        let mon = &mut *self.mon;
        let enforced = mon.buffer_enforced();
        let cost_before = mon.cost.accumulated();
        let mut counts = CopyCounts::default();

        // regions first; exhaustion fails before any world switch
        let regions = if enforced {
            mon.msbuf_push_frame(ctx.enclave, ctx.tcs)?;
            match alloc_regions(mon, &ctx, desc) {
                Ok(r) => r,
                Err(e) => {
                    mon.msbuf_pop_frame(ctx.enclave, ctx.tcs)?;
                    return Err(e);
                }
            }
        } else {
            scratch_regions(&ctx, desc)
        };

        // single copy toward the handler: trusted side writes the buffer
        let mut input_iter = inputs.iter();
        for (spec, gva) in desc.params.iter().zip(&regions) {
            if spec.direction.inbound() {
                let bytes = input_iter
                    .next()
                    .ok_or_else(|| Error::ParseError("missing ocall input".into()))?;
                if bytes.len() as u64 > spec.size {
                    return Err(Error::BufferOverflow {
                        requested: bytes.len() as u64,
                        available: spec.size,
                    });
                }
                if enforced {
                    self.write(*gva, bytes)?;
                } else {
                    self.mon.baseline_enclave_app_access(
                        ctx.vcpu,
                        ctx.enclave,
                        *gva,
                        Access::Write,
                        Some(bytes),
                    )?;
                }
                counts.in_copies += 1;
                counts.in_bytes += bytes.len() as u64;
            }
        }

        self.mon.eexit(ctx.vcpu, ctx.enclave, ctx.aep)?;
        {
            let mut api = UntrustedApi { mon: self.mon, ctx };
            untrusted_fn(&mut api, &regions)?;
        }
        self.mon.eenter(ctx.vcpu, ctx.enclave, ctx.tcs, ctx.aep)?;

        // return path: one copy per outbound parameter, buffer into enclave
        let mut outputs = Vec::new();
        for (spec, gva) in desc.params.iter().zip(&regions) {
            if spec.direction.outbound() {
                let bytes = if enforced {
                    self.read(*gva, spec.size as usize)?
                } else {
                    let mut out = Vec::with_capacity(spec.size as usize);
                    let mut cur = *gva;
                    while (out.len() as u64) < spec.size {
                        let chunk = self
                            .mon
                            .baseline_enclave_app_access(ctx.vcpu, ctx.enclave, cur, Access::Read, None)?
                            .expect("read returns data");
                        let take = chunk.len().min(spec.size as usize - out.len());
                        out.extend_from_slice(&chunk[..take]);
                        cur += take as u64;
                    }
                    out
                };
                // land the result in enclave memory
                let staged = self.stage_in(&bytes)?;
                let _ = staged;
                counts.out_copies += 1;
                counts.out_bytes += spec.size;
                outputs.push(bytes);
            }
        }

        if enforced {
            self.mon.msbuf_pop_frame(ctx.enclave, ctx.tcs)?;
        }
        let mode = self.mon.enclave(ctx.enclave)?.mode;
        self.mon.cost.charge(mode, CostEvent::OcallSdk);
        let cost_total = self.mon.cost.accumulated() - cost_before;
        self.mon.trace.push(TraceEvent::EdgeCall {
            kind: "ocall".into(),
            fn_id: desc.fn_id,
            mode: mode.as_str().into(),
            in_copies: counts.in_copies,
            out_copies: counts.out_copies,
            in_bytes: counts.in_bytes,
            out_bytes: counts.out_bytes,
            cost_total,
        });
        Ok((outputs, counts))
    }
}

/// Untrusted-side view for OCALL handlers: reads and writes the shared
/// buffer in place through normal-mode translation.
pub struct UntrustedApi<'m> {
    pub mon: &'m mut Monitor,
    pub ctx: EdgeCtx,
}

impl<'m> UntrustedApi<'m> {
    pub fn read(&mut self, gva: GuestVirtAddr, len: usize) -> Result<Vec<u8>> {
        self.mon.normal_read(gva, len)
    }

    pub fn write(&mut self, gva: GuestVirtAddr, data: &[u8]) -> Result<()> {
        self.mon.normal_write(gva, data)
    }
}

fn alloc_regions(mon: &mut Monitor, ctx: &EdgeCtx, desc: &EdgeCallDescriptor) -> Result<Vec<GuestVirtAddr>> {
    let mut regions = Vec::with_capacity(desc.params.len());
    for spec in &desc.params {
        let gva = if spec.direction == Direction::UserChecked {
            0
        } else {
            mon.msbuf_alloc(ctx.enclave, ctx.tcs, spec.size)?
        };
        regions.push(gva);
    }
    Ok(regions)
}

/// Baseline-mode stand-in for buffer regions: parameter slots in application
/// scratch memory, same layout discipline, no marshalling.
fn scratch_regions(ctx: &EdgeCtx, desc: &EdgeCallDescriptor) -> Vec<GuestVirtAddr> {
    let mut regions = Vec::with_capacity(desc.params.len());
    let mut cursor = ctx.app_scratch;
    for spec in &desc.params {
        regions.push(cursor);
        if spec.direction != Direction::UserChecked {
            cursor += spec.size;
        }
    }
    regions
}

/// ECALL: marshal inbound parameters into the buffer, enter the enclave, copy
/// them into enclave memory, run the scripted function, and return outbound
/// parameters by the symmetric path.
pub fn ecall<F>(
    mon: &mut Monitor,
    ctx: EdgeCtx,
    desc: &EdgeCallDescriptor,
    inputs: &[Vec<u8>],
    mut enclave_fn: F,
) -> Result<(Vec<Vec<u8>>, CopyCounts)>
where
    F: FnMut(&mut EnclaveApi<'_>, &[Vec<u8>]) -> Result<Vec<Vec<u8>>>,
{
    let enclave = mon.enclave(ctx.enclave)?;
    let heap_base = enclave.dynamic.heap_base;
    let enforced = mon.buffer_enforced();
    let cost_before = mon.cost.accumulated();
    let mut counts = CopyCounts::default();

    let regions = if enforced {
        mon.msbuf_push_frame(ctx.enclave, ctx.tcs)?;
        match alloc_regions(mon, &ctx, desc) {
            Ok(r) => r,
            Err(e) => {
                mon.msbuf_pop_frame(ctx.enclave, ctx.tcs)?;
                return Err(e);
            }
        }
    } else {
        scratch_regions(&ctx, desc)
    };

    // copy 1 (enforced mode only): untrusted memory into the buffer
    let mut input_iter = inputs.iter();
    let mut staged_sources = Vec::new();
    for (spec, gva) in desc.params.iter().zip(&regions) {
        if spec.direction.inbound() {
            let bytes = input_iter
                .next()
                .ok_or_else(|| Error::ParseError("missing ecall input".into()))?;
            if bytes.len() as u64 > spec.size {
                return Err(Error::BufferOverflow {
                    requested: bytes.len() as u64,
                    available: spec.size,
                });
            }
            mon.normal_write(*gva, bytes)?;
            if enforced {
                counts.in_copies += 1;
                counts.in_bytes += bytes.len() as u64;
            }
            staged_sources.push((*gva, spec.size as usize));
        }
    }

    mon.eenter(ctx.vcpu, ctx.enclave, ctx.tcs, ctx.aep)?;

    // copy 2: buffer (or, in baseline mode, application memory directly)
    // into enclave memory
    let mut api = EnclaveApi {
        mon,
        ctx,
        staging_cursor: heap_base,
    };
    let mut staged_inputs = Vec::new();
    for (gva, size) in staged_sources {
        let bytes = if enforced {
            api.read(gva, size)?
        } else {
            let mut out = Vec::with_capacity(size);
            let mut cur = gva;
            while out.len() < size {
                let chunk = api
                    .mon
                    .baseline_enclave_app_access(ctx.vcpu, ctx.enclave, cur, Access::Read, None)?
                    .expect("read returns data");
                let take = chunk.len().min(size - out.len());
                out.extend_from_slice(&chunk[..take]);
                cur += take as u64;
            }
            out
        };
        api.stage_in(&bytes)?;
        counts.in_copies += 1;
        counts.in_bytes += bytes.len() as u64;
        staged_inputs.push(bytes);
    }

    let fn_outputs = enclave_fn(&mut api, &staged_inputs)?;

    // copy 3: enclave memory into the buffer (or application memory)
    let mut out_iter = fn_outputs.into_iter();
    let mut out_regions = Vec::new();
    for (spec, gva) in desc.params.iter().zip(&regions) {
        if spec.direction.outbound() {
            let bytes = out_iter
                .next()
                .ok_or_else(|| Error::ParseError("missing ecall output".into()))?;
            if bytes.len() as u64 > spec.size {
                return Err(Error::BufferOverflow {
                    requested: bytes.len() as u64,
                    available: spec.size,
                });
            }
            if enforced {
                api.write(*gva, &bytes)?;
            } else {
                api.mon.baseline_enclave_app_access(
                    ctx.vcpu,
                    ctx.enclave,
                    *gva,
                    Access::Write,
                    Some(&bytes),
                )?;
            }
            counts.out_copies += 1;
            counts.out_bytes += bytes.len() as u64;
            out_regions.push((*gva, spec.size as usize));
        }
    }

    mon.eexit(ctx.vcpu, ctx.enclave, ctx.aep)?;

    // copy 4 (enforced mode only): buffer back to untrusted memory
    let mut outputs = Vec::new();
    for (gva, size) in out_regions {
        let bytes = mon.normal_read(gva, size)?;
        if enforced {
            counts.out_copies += 1;
            counts.out_bytes += size as u64;
        }
        outputs.push(bytes);
    }

    if enforced {
        mon.msbuf_pop_frame(ctx.enclave, ctx.tcs)?;
    }
    let mode = mon.enclave(ctx.enclave)?.mode;
    mon.cost.charge(mode, CostEvent::EcallSdk);
    let cost_total = mon.cost.accumulated() - cost_before;
    mon.trace.push(TraceEvent::EdgeCall {
        kind: "ecall".into(),
        fn_id: desc.fn_id,
        mode: mode.as_str().into(),
        in_copies: counts.in_copies,
        out_copies: counts.out_copies,
        in_bytes: counts.in_bytes,
        out_bytes: counts.out_bytes,
        cost_total,
    });
    Ok((outputs, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::testutil::{self, test_monitor, TEST_MSBUF, TEST_SCRATCH, TEST_TCS};
    use crate::monitor::EnclaveMode;
    use proptest::prelude::*;

    const AEP: GuestVirtAddr = 0x6000;

    fn ctx(e: EnclaveId) -> EdgeCtx {
        EdgeCtx {
            vcpu: 0,
            enclave: e,
            tcs: TEST_TCS,
            aep: AEP,
            app_scratch: TEST_SCRATCH,
        }
    }

    fn echo_desc(size: u64) -> EdgeCallDescriptor {
        EdgeCallDescriptor {
            fn_id: 1,
            params: vec![
                ParamSpec { direction: Direction::In, size },
                ParamSpec { direction: Direction::Out, size },
            ],
        }
    }

    fn echo(api: &mut EnclaveApi<'_>, inputs: &[Vec<u8>]) -> crate::error::Result<Vec<Vec<u8>>> {
        let _ = api;
        Ok(vec![inputs[0].clone()])
    }

    #[test]
    fn ecall_roundtrips_data_through_the_buffer() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 8);
        let payload: Vec<u8> = (0..4096u32).map(|i| (i % 251) as u8).collect();
        let (outputs, counts) =
            ecall(&mut m, ctx(e), &echo_desc(4096), &[payload.clone()], echo).unwrap();
        assert_eq!(outputs[0], payload);
        // In param: 2 inbound copies; Out param: 2 outbound copies
        assert_eq!(counts.in_copies, 2);
        assert_eq!(counts.out_copies, 2);
        m.check_invariants().unwrap();
    }

    #[test]
    fn in_param_costs_two_copies_buffered_vs_one_baseline() {
        let size = 16 * 1024u64;
        let desc = EdgeCallDescriptor {
            fn_id: 2,
            params: vec![ParamSpec { direction: Direction::In, size }],
        };
        let payload = vec![0x5Au8; size as usize];

        let mut buffered = test_monitor(64);
        let e = testutil::build_edge_enclave(&mut buffered, 0x7000_0000, EnclaveMode::Gu, 8);
        let (_, counts) = ecall(&mut buffered, ctx(e), &desc, &[payload.clone()], |_, _| Ok(vec![]))
            .unwrap();
        assert_eq!(counts.in_copies, 2);
        assert_eq!(counts.in_bytes, 2 * size);

        let mut baseline = test_monitor(64);
        baseline.cfg.buffer_enforced = false;
        let e = testutil::build_edge_enclave(&mut baseline, 0x7000_0000, EnclaveMode::Gu, 8);
        let (_, counts) = ecall(&mut baseline, ctx(e), &desc, &[payload], |_, _| Ok(vec![]))
            .unwrap();
        assert_eq!(counts.in_copies, 1);
        assert_eq!(counts.in_bytes, size);
    }

    #[test]
    fn zero_param_ecall_has_zero_copies_and_pure_switch_cost() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 8);
        let desc = EdgeCallDescriptor { fn_id: 0, params: vec![] };
        let before = m.cost.accumulated();
        let (outputs, counts) = ecall(&mut m, ctx(e), &desc, &[], |_, _| Ok(vec![])).unwrap();
        assert!(outputs.is_empty());
        assert_eq!(counts, CopyCounts::default());
        // empty GU ECALL total
        assert_eq!(m.cost.accumulated() - before, 9_480);
    }

    #[test]
    fn oversized_param_fails_before_any_world_switch() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 2);
        // partition is 2 pages; ask for 4 pages
        let desc = echo_desc(4 * 4096);
        let payload = vec![0u8; 4 * 4096];
        let before = m.cost.accumulated();
        assert!(matches!(
            ecall(&mut m, ctx(e), &desc, &[payload], echo),
            Err(Error::BufferOverflow { .. })
        ));
        assert_eq!(m.cost.accumulated(), before, "no world switch was charged");
    }

    #[test]
    fn ocall_costs_one_copy_each_direction() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 8);
        let desc = EdgeCallDescriptor { fn_id: 0, params: vec![] };
        let ocall_desc = EdgeCallDescriptor {
            fn_id: 7,
            params: vec![
                ParamSpec { direction: Direction::In, size: 64 },
                ParamSpec { direction: Direction::Out, size: 64 },
            ],
        };
        let (_, counts) = ecall(&mut m, ctx(e), &desc, &[], |api, _| {
            let (outs, counts) = api.ocall(&ocall_desc, &[vec![0xAB; 64]], |u, regions| {
                let data = u.read(regions[0], 64)?;
                u.write(regions[1], &data)
            })?;
            assert_eq!(outs[0], vec![0xAB; 64]);
            assert_eq!(counts.in_copies, 1);
            assert_eq!(counts.out_copies, 1);
            Ok(vec![])
        })
        .unwrap();
        let _ = counts;
    }

    #[test]
    fn empty_ocall_matches_table_total() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 8);
        let desc = EdgeCallDescriptor { fn_id: 0, params: vec![] };
        let empty = EdgeCallDescriptor { fn_id: 9, params: vec![] };
        ecall(&mut m, ctx(e), &desc, &[], |api, _| {
            let before = api.mon.cost.accumulated();
            api.ocall(&empty, &[], |_, _| Ok(()))?;
            assert_eq!(api.mon.cost.accumulated() - before, 4_920);
            Ok(vec![])
        })
        .unwrap();
    }

    #[test]
    fn ocalloc_exhaustion_keeps_enclave_state_intact() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 2);
        let desc = EdgeCallDescriptor { fn_id: 0, params: vec![] };
        let huge = EdgeCallDescriptor {
            fn_id: 9,
            params: vec![ParamSpec { direction: Direction::In, size: 64 * 4096 }],
        };
        ecall(&mut m, ctx(e), &desc, &[], |api, _| {
            let res = api.ocall(&huge, &[vec![0u8; 64 * 4096]], |_, _| Ok(()));
            assert!(matches!(res, Err(Error::BufferOverflow { .. })));
            // still in secure mode, still able to run
            assert!(matches!(
                api.mon.vcpu(0).mode,
                crate::monitor::VcpuMode::SecureMode(_)
            ));
            Ok(vec![])
        })
        .unwrap();
    }

    #[test]
    fn user_checked_params_are_not_marshalled() {
        let mut m = test_monitor(32);
        let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 8);
        let desc = EdgeCallDescriptor {
            fn_id: 3,
            params: vec![ParamSpec { direction: Direction::UserChecked, size: 4096 }],
        };
        let (outputs, counts) = ecall(&mut m, ctx(e), &desc, &[], |api, _| {
            // developer allocates inside the buffer explicitly
            let gva = api.msbuf_alloc(128)?;
            api.write(gva, &[7u8; 128])?;
            Ok(vec![])
        })
        .unwrap();
        assert!(outputs.is_empty());
        assert_eq!(counts, CopyCounts::default());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        /// Randomized nesting fuzz: allocations never alias live regions and
        /// the cursor discipline matches a stack-model oracle.
        #[test]
        fn nested_ocalls_follow_stack_discipline(depths in proptest::collection::vec(1u64..200, 1..6)) {
            let mut m = test_monitor(32);
            let e = testutil::build_edge_enclave(&mut m, 0x7000_0000, EnclaveMode::Gu, 8);
            let desc = EdgeCallDescriptor { fn_id: 0, params: vec![] };
            ecall(&mut m, ctx(e), &desc, &[], |api, _| {
                // oracle: model the bump cursor as a stack machine
                fn nest(api: &mut EnclaveApi<'_>, depths: &[u64], model_cursor: u64) -> crate::error::Result<()> {
                    if depths.is_empty() {
                        return Ok(());
                    }
                    let n = depths[0];
                    let inner = EdgeCallDescriptor {
                        fn_id: 99,
                        params: vec![ParamSpec { direction: Direction::In, size: n }],
                    };
                    let before = api.msbuf_alloc(0)?;
                    prop_assert_eq!(before, TEST_MSBUF + model_cursor).map_err(|_| Error::ParseError("oracle".into()))?;
                    api.ocall(&inner, &[vec![1u8; n as usize]], |_, _| Ok(()))?;
                    let after = api.msbuf_alloc(0)?;
                    prop_assert_eq!(after, before).map_err(|_| Error::ParseError("oracle".into()))?;
                    nest(api, &depths[1..], model_cursor)
                }
                nest(api, &depths, 0)?;
                Ok(vec![])
            }).unwrap();
        }
    }
}
