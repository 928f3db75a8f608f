// SPDX-License-Identifier: Apache-2.0

//! Scenario file format: a seed, an optional boot chain, enclave
//! declarations, and an ordered script of lifecycle operations, edge calls,
//! injected exceptions, and adversary actions. Scenarios are plain JSON and
//! deterministic given their seed.

use serde::{Deserialize, Serialize};

use super::adversary::AdversaryAction;
use crate::boot::Component;
use crate::error::{Error, Result};
use crate::monitor::cost::CostTable;
use crate::monitor::{EnclaveMode, ExceptionVector};
use crate::paging::Perms;
use crate::runtime::ParamSpec;

/// u64 fields accepting either a JSON number or a "0x..." string.
pub mod hexint {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(n),
            Raw::Str(s) => {
                let t = s.trim();
                if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
                    u64::from_str_radix(hex, 16).map_err(serde::de::Error::custom)
                } else {
                    t.parse().map_err(serde::de::Error::custom)
                }
            }
        }
    }
}

/// Source of component or page bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataRef {
    Text { text: String },
    Hex { hex: String },
    Fill { fill: u8, len: usize },
}

impl DataRef {
    pub fn resolve(&self, len_hint: usize) -> Result<Vec<u8>> {
        let mut bytes = match self {
            DataRef::Text { text } => text.clone().into_bytes(),
            DataRef::Hex { hex } => hex::decode(hex)
                .map_err(|e| Error::ParseError(format!("bad hex data: {e}")))?,
            DataRef::Fill { fill, len } => vec![*fill; *len],
        };
        if len_hint > 0 {
            bytes.resize(len_hint, 0);
        }
        Ok(bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootComponentSpec {
    pub name: Component,
    pub data: DataRef,
}

fn default_perms() -> Perms {
    Perms::R | Perms::W
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PageSpec {
    Reg {
        #[serde(with = "hexint")]
        gva: u64,
        #[serde(default = "default_perms")]
        perms: Perms,
        #[serde(default)]
        content: Option<DataRef>,
        #[serde(default = "default_true")]
        measure: bool,
    },
    Tcs {
        #[serde(with = "hexint")]
        gva: u64,
        #[serde(with = "hexint")]
        oentry: u64,
        #[serde(with = "hexint")]
        ssa_base: u64,
    },
    Ssa {
        #[serde(with = "hexint")]
        gva: u64,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarshallingSpec {
    #[serde(with = "hexint")]
    pub base: u64,
    pub pages: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnclaveSpec {
    pub mode: EnclaveMode,
    #[serde(with = "hexint")]
    pub secs_gva: u64,
    #[serde(with = "hexint")]
    pub elrange_base: u64,
    #[serde(with = "hexint")]
    pub elrange_size: u64,
    #[serde(default)]
    pub attributes: u64,
    #[serde(default = "default_ssa_count")]
    pub ssa_frame_count: usize,
    #[serde(default)]
    pub marshalling: Option<MarshallingSpec>,
    #[serde(with = "hexint", default)]
    pub heap_base: u64,
    #[serde(with = "hexint", default)]
    pub heap_size: u64,
    #[serde(with = "hexint", default)]
    pub stack_size: u64,
    pub pages: Vec<PageSpec>,
    #[serde(default)]
    pub signer_seed: Option<u64>,
}

fn default_ssa_count() -> usize {
    2
}

impl EnclaveSpec {
    /// The canned single-TCS enclave used by regression scenarios and
    /// examples: one code page, one TCS, two SSA pages, a four-page buffer.
    pub fn standard(mode: EnclaveMode) -> Self {
        Self {
            mode,
            secs_gva: 0x7000_0000,
            elrange_base: 0x100000,
            elrange_size: 1 << 20,
            attributes: 0,
            ssa_frame_count: 2,
            marshalling: Some(MarshallingSpec {
                base: 0x4000_0000,
                pages: 4,
            }),
            heap_base: 0x110000,
            heap_size: 16 * 4096,
            stack_size: 2 * 4096,
            pages: vec![
                PageSpec::Reg {
                    gva: 0x100000,
                    perms: Perms::R | Perms::W | Perms::X,
                    content: None,
                    measure: true,
                },
                PageSpec::Tcs {
                    gva: 0x101000,
                    oentry: 0x100000,
                    ssa_base: 0x103000,
                },
                PageSpec::Ssa { gva: 0x103000 },
                PageSpec::Ssa { gva: 0x104000 },
            ],
            signer_seed: None,
        }
    }

    pub fn tcs_gva(&self) -> Option<u64> {
        self.pages.iter().find_map(|p| match p {
            PageSpec::Tcs { gva, .. } => Some(*gva),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptOp {
    /// ECREATE through EINIT for the indexed enclave declaration.
    Build { enclave: usize },
    Enter {
        enclave: usize,
        #[serde(default)]
        vcpu: usize,
    },
    Exit {
        enclave: usize,
        #[serde(default)]
        vcpu: usize,
    },
    /// Write a recognizable pattern into every enclave register.
    SetGprs {
        #[serde(default)]
        vcpu: usize,
        pattern: u64,
    },
    Ecall {
        enclave: usize,
        fn_id: u32,
        #[serde(default)]
        params: Vec<ParamSpec>,
        #[serde(default)]
        fill: u8,
        /// Nested OCALL issued from inside the ECALL, if any.
        #[serde(default)]
        ocall: Option<OcallSpec>,
    },
    /// Register an in-enclave handler (P-Enclaves).
    RegisterHandler {
        enclave: usize,
        vector: ExceptionVector,
        #[serde(with = "hexint")]
        handler: u64,
    },
    /// Inject an interrupt/exception at the current vCPU state; forwarded
    /// events are resumed automatically, in-enclave ones return via the
    /// handler.
    InjectException {
        vector: ExceptionVector,
        #[serde(default)]
        vcpu: usize,
    },
    /// Permission change: hypercall for GU/HU, self-edit for P.
    Mprotect {
        enclave: usize,
        #[serde(with = "hexint")]
        gva: u64,
        perms: Perms,
    },
    /// Touch a heap address from inside the enclave (EDMM demand commit).
    TouchHeap {
        enclave: usize,
        #[serde(with = "hexint", default)]
        offset: u64,
    },
    Remove { enclave: usize },
    /// Build an attestation quote; the bytes become a run artifact.
    Quote {
        enclave: usize,
        nonce_hex: String,
    },
    Reboot {
        #[serde(default)]
        tamper: Option<Component>,
    },
    Adversary {
        #[serde(flatten)]
        action: AdversaryAction,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcallSpec {
    pub fn_id: u32,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub fill: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epc_frames: Option<usize>,
    #[serde(default)]
    pub normal_frames: Option<usize>,
    /// Test hook: disable TLB flushing to demonstrate stale-entry attacks.
    #[serde(default)]
    pub tlb_flush_enabled: Option<bool>,
    /// Test-only: disable marshalling-buffer enforcement (baseline mode).
    #[serde(default)]
    pub buffer_enforced: Option<bool>,
    #[serde(default)]
    pub boot: Option<Vec<BootComponentSpec>>,
    #[serde(default)]
    pub cost_constants: Option<CostTable>,
    #[serde(default)]
    pub enclaves: Vec<EnclaveSpec>,
    #[serde(default)]
    pub script: Vec<ScriptOp>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ParseError(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}
