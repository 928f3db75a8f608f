// SPDX-License-Identifier: Apache-2.0

//! Line-delimited JSON trace log. Records are emitted in dispatch order and
//! serialize with fixed field order, so identical runs produce byte-identical
//! logs.

use serde::{Deserialize, Serialize};

use crate::crypto;
use crate::error::{Error, Result};

/// One trace record. `Op.cost` is the amount charged by that dispatch alone;
/// summary records (`EdgeCall`, `ExceptionRoundtrip`) carry whole-flow totals
/// and are excluded from the accounting sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Op {
        name: String,
        args: String,
        disposition: String,
        cost: u64,
    },
    FrameAlloc {
        frame: usize,
        owner: String,
    },
    FrameFree {
        frame: usize,
    },
    DmaDenied {
        device: u32,
        frame: usize,
    },
    DmaOk {
        device: u32,
        frame: usize,
        write: bool,
    },
    Map {
        space: u64,
        gva: u64,
        target: u64,
        perms: String,
        pinned: bool,
    },
    Unmap {
        space: u64,
        gva: u64,
    },
    SetPerms {
        space: u64,
        gva: u64,
        perms: String,
    },
    TlbFlush {
        space: u64,
    },
    PageFault {
        space: u64,
        gva: u64,
        access: String,
        level: String,
    },
    EdgeCall {
        kind: String,
        fn_id: u32,
        mode: String,
        in_copies: u64,
        out_copies: u64,
        in_bytes: u64,
        out_bytes: u64,
        cost_total: u64,
    },
    ExceptionRoundtrip {
        vector: String,
        mode: String,
        disposition: String,
        cost_total: u64,
    },
    AdversaryOutcome {
        kind: String,
        outcome: String,
        detail: String,
    },
    Note {
        text: String,
    },
}

/// Digest of an operation's arguments for the op log: first 8 bytes of
/// SHA-256 over a canonical rendering, hex-encoded.
pub fn args_digest(canonical: &str) -> String {
    hex::encode(&crypto::sha256(canonical.as_bytes())[..8])
}

#[derive(Debug, Default, Clone)]
pub struct TraceLog {
    records: Vec<TraceEvent>,
}

impl TraceLog {
    pub fn push(&mut self, ev: TraceEvent) {
        self.records.push(ev);
    }

    pub fn records(&self) -> &[TraceEvent] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ev: TraceEvent = serde_json::from_str(line)
                .map_err(|e| Error::ParseError(format!("trace line {}: {e}", i + 1)))?;
            records.push(ev);
        }
        Ok(Self { records })
    }

    /// Sum of per-dispatch charges; must equal the cost model's accumulator.
    pub fn charged_total(&self) -> u64 {
        self.records
            .iter()
            .map(|r| match r {
                TraceEvent::Op { cost, .. } => *cost,
                _ => 0,
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_is_stable() {
        let mut log = TraceLog::default();
        log.push(TraceEvent::Op {
            name: "ecreate".into(),
            args: args_digest("secs"),
            disposition: "ok".into(),
            cost: 0,
        });
        log.push(TraceEvent::TlbFlush { space: 3 });
        let text = log.to_jsonl();
        let parsed = TraceLog::from_jsonl(&text).unwrap();
        assert_eq!(parsed.records(), log.records());
        assert_eq!(parsed.to_jsonl(), text);
    }
}
