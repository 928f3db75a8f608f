// SPDX-License-Identifier: Apache-2.0

//! Crate-wide error type. Every operation surfaces failures as data; none of
//! the security checks panic.

use thiserror::Error;

use crate::addr::GuestVirtAddr;
use crate::paging::{Access, FaultKind, FaultLevel};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    // physmem
    #[error("enclave page cache exhausted")]
    EpcExhausted,
    #[error("frame {0} is not an EPC frame")]
    NotEpcFrame(usize),
    #[error("frame {0} is already free")]
    FrameFree(usize),
    #[error("IOMMU denied device {device} access to frame {frame}")]
    IommuDenied { device: u32, frame: usize },
    #[error("device {0} is not registered with the IOMMU")]
    UnknownDevice(u32),
    #[error("frame {0} out of range")]
    FrameOutOfRange(usize),

    // paging
    #[error("page fault: gva {gva:#x} access {access:?} at {level:?} ({kind:?})")]
    PageFault {
        gva: GuestVirtAddr,
        access: Access,
        level: FaultLevel,
        kind: FaultKind,
    },
    #[error("gva {0:#x} is already mapped")]
    AlreadyMapped(GuestVirtAddr),
    #[error("gva {0:#x} is not mapped")]
    NotMapped(GuestVirtAddr),
    #[error("entry for gva {0:#x} is pinned")]
    PinnedEntry(GuestVirtAddr),
    #[error("translate in space {0} with undischarged TLB shootdown")]
    PendingShootdown(u64),
    #[error("address {0:#x} is not page aligned or not canonical")]
    BadAddress(u64),

    // monitor
    #[error("invalid SECS: {0}")]
    InvalidSecs(&'static str),
    #[error("gva {0:#x} outside the enclave linear range")]
    OutsideElrange(GuestVirtAddr),
    #[error("frame {0} is in use by another owner")]
    FrameInUse(usize),
    #[error("operation not allowed in enclave state {0}")]
    WrongState(&'static str),
    #[error("unknown enclave {0:#x}")]
    UnknownEnclave(GuestVirtAddr),
    #[error("signature verification failed")]
    BadSignature,
    #[error("measurement mismatch")]
    MeasurementMismatch,
    #[error("marshalling buffer overlaps the enclave linear range")]
    MarshallingOverlapsElrange,
    #[error("marshalling page {0:#x} is not a pinned, populated normal mapping")]
    MarshallingNotPinned(GuestVirtAddr),
    #[error("marshalling size does not match the SECS attribute")]
    MarshallingSizeMismatch,
    #[error("enclave has an active thread")]
    EnclaveBusy,
    #[error("TCS {0:#x} is busy")]
    TcsBusy(GuestVirtAddr),
    #[error("vCPU is not in normal mode")]
    NotInNormalMode,
    #[error("vCPU is not in secure mode for this enclave")]
    NotInSecureMode,
    #[error("EEXIT target {target:#x} does not match the recorded AEP {aep:#x}")]
    IllegalExitTarget {
        target: GuestVirtAddr,
        aep: GuestVirtAddr,
    },
    #[error("no free SSA frame for this TCS")]
    SsaOverflow,
    #[error("no saved state to resume")]
    NoSavedState,
    #[error("illegal enclave access at gva {0:#x}")]
    IllegalAccess(GuestVirtAddr),
    #[error("operation not supported in enclave mode {0}")]
    UnsupportedInMode(&'static str),
    #[error("unknown TCS {0:#x}")]
    UnknownTcs(GuestVirtAddr),

    // tpm
    #[error("PCR index {0} out of range")]
    BadIndex(usize),
    #[error("sealed blob policy mismatch")]
    PolicyMismatch,
    #[error("unknown sealed blob {0}")]
    UnknownBlob(u64),

    // boot
    #[error("root key unseal failed: boot chain does not match the sealing state")]
    UnsealFailed,
    #[error("boot sequence violation: {0}")]
    BootOrder(&'static str),

    // runtime
    #[error("marshalling buffer overflow (requested {requested}, available {available})")]
    BufferOverflow { requested: u64, available: u64 },

    // harness
    #[error("scenario parse error: {0}")]
    ParseError(String),
    #[error("script error at step {step}: {cause}")]
    ScriptError { step: usize, cause: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
