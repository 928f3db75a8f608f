// SPDX-License-Identifier: Apache-2.0

//! # hypersim
//!
//! A deterministic, software-only simulator of a hypervisor-based trusted
//! execution architecture: a security monitor that emulates the SGX leaf
//! instructions over two-level address translation, a TPM-rooted measured
//! boot and attestation chain, three enclave operation modes with a
//! calibrated world-switch cost model, and an adversary API that turns the
//! architecture's isolation claims into executable checks.
//!
//! The crate is a library first. Start with the runnable examples, one per
//! major capability:
//!
//! ```bash
//! cargo run --example lifecycle      # enclave build, enter/exit, AEX, teardown
//! cargo run --example measured_boot  # boot chain, root-key sealing, PCR flood
//! cargo run --example attestation    # quote construction and verification
//! cargo run --example edge_calls     # ECALL/OCALL marshalling and copy counts
//! cargo run --example modes_and_costs# GU/HU/P world-switch cost comparison
//! cargo run --example adversary      # mapping attacks and other adversary runs
//! ```
//!
//! A thin `hypersim` binary drives scenario files:
//!
//! ```bash
//! hypersim run scenario.json --trace out.jsonl
//! hypersim verify --quote quote.bin --golden golden.json --nonce 00112233
//! hypersim costs --trace out.jsonl
//! hypersim attack remap
//! ```
//!
//! ## Module map
//!
//! - [`physmem`] — simulated physical frames, ownership, at-rest encryption,
//!   EPCM metadata, IOMMU checks.
//! - [`paging`] — guest and nested page tables, the composed walk, and a TLB
//!   with explicit flush semantics.
//! - [`monitor`] — the security monitor: enclave lifecycle state machine,
//!   world switches, exception routing, EDMM, cost accounting.
//! - [`tpm`] — PCR banks, quote, seal/unseal, deterministic RNG.
//! - [`boot`] — measured late launch and root-key provisioning.
//! - [`attest`] — measurement records, SIGSTRUCT, reports, quotes, and the
//!   five-step quote verifier.
//! - [`runtime`] — the marshalling-buffer edge-call protocol (ECALL/OCALL).
//! - [`harness`] — scenario files, trace log, adversary actions, verdicts.
//! - [`platform`] — composition root tying TPM, boot, and monitor together.

pub mod addr;
pub mod attest;
pub mod boot;
pub mod crypto;
pub mod error;
pub mod harness;
pub mod monitor;
pub mod paging;
pub mod physmem;
pub mod platform;
pub mod runtime;
pub mod tpm;

pub use error::{Error, Result};
pub use platform::Platform;
