// SPDX-License-Identifier: Apache-2.0

//! Measured late launch: hash each boot component into its planned PCR,
//! launch the monitor, provision or unseal the root key, extend the
//! attestation public key, then flood the monitor PCR before the primary OS
//! gains control.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Digest32, KeyPair};
use crate::error::{Error, Result};
use crate::tpm::TpmState;

/// Constant flooded into the monitor PCR after the root key is unsealed, so
/// the demoted primary OS can never reproduce the sealing PCR state.
pub const FLOOD_CONSTANT: [u8; 32] = [0xFF; 32];

/// PCRs binding the root-key seal: the firmware and kernel chain plus the
/// monitor image. PCR 13 is excluded because the attestation key is extended
/// only after the unseal.
pub fn seal_policy() -> BTreeSet<usize> {
    (0..=9).chain([12]).collect()
}

/// PCR selection covered by attestation quotes.
pub fn quote_selection() -> BTreeSet<usize> {
    (0..=9).chain([12, 13]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Crtm,
    Bios,
    Grub,
    Kernel,
    Initramfs,
    MonitorImage,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Crtm,
        Component::Bios,
        Component::Grub,
        Component::Kernel,
        Component::Initramfs,
        Component::MonitorImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Crtm => "crtm",
            Component::Bios => "bios",
            Component::Grub => "grub",
            Component::Kernel => "kernel",
            Component::Initramfs => "initramfs",
            Component::MonitorImage => "monitor_image",
        }
    }

    /// Default PCR plan. The firmware root sits in PCR 0-1; grub and the
    /// kernel image share PCR 8 (the loader measures what it boots, so their
    /// relative order is visible), initramfs goes to PCR 9, and the monitor
    /// image to PCR 12.
    pub fn default_pcr(self) -> usize {
        match self {
            Component::Crtm => 0,
            Component::Bios => 1,
            Component::Grub => 8,
            Component::Kernel => 8,
            Component::Initramfs => 9,
            Component::MonitorImage => 12,
        }
    }
}

/// Ordered boot chain: component images in launch order plus the PCR each is
/// measured into. A tampered or reordered chain is still bootable; it is the
/// attestation evidence that changes.
#[derive(Debug, Clone)]
pub struct BootChain {
    pub components: Vec<(Component, Vec<u8>)>,
    pub pcr_plan: fn(Component) -> usize,
}

impl BootChain {
    /// The golden chain used by tests and examples: fixed image bytes per
    /// component.
    pub fn golden() -> Self {
        let components = Component::ALL
            .iter()
            .map(|&c| {
                let image = format!("{} image v1.0", c.name()).into_bytes();
                (c, image)
            })
            .collect();
        Self {
            components,
            pcr_plan: Component::default_pcr,
        }
    }

    pub fn image_mut(&mut self, which: Component) -> Option<&mut Vec<u8>> {
        self.components
            .iter_mut()
            .find(|(c, _)| *c == which)
            .map(|(_, img)| img)
    }

    /// Flips one byte of a component image, modelling boot-time tampering.
    pub fn tamper(&mut self, which: Component) {
        if let Some(img) = self.image_mut(which) {
            if let Some(b) = img.first_mut() {
                *b ^= 0xFF;
            }
        }
    }

    pub fn swap(&mut self, a: Component, b: Component) {
        let ia = self.components.iter().position(|(c, _)| *c == a);
        let ib = self.components.iter().position(|(c, _)| *c == b);
        if let (Some(ia), Some(ib)) = (ia, ib) {
            self.components.swap(ia, ib);
        }
    }
}

/// One measured-boot event: what was measured, its digest, and where it was
/// extended. The verifier replays this log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub name: String,
    pub digest: String,
    pub pcr: usize,
}

impl EventLogEntry {
    pub fn digest_bytes(&self) -> Result<Digest32> {
        let v = hex::decode(&self.digest)
            .map_err(|e| Error::ParseError(format!("bad digest hex: {e}")))?;
        v.try_into()
            .map_err(|_| Error::ParseError("digest is not 32 bytes".into()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct BootReport {
    pub event_log: Vec<EventLogEntry>,
}

impl BootReport {
    /// Event log file format: one line per component - name, hex digest,
    /// PCR index.
    pub fn to_log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.event_log {
            out.push_str(&format!("{} {} {}\n", e.name, e.digest, e.pcr));
        }
        out
    }

    pub fn from_log_text(text: &str) -> Result<Self> {
        let mut event_log = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let (Some(name), Some(digest), Some(pcr)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::ParseError(format!("bad event log line: {line}")));
            };
            event_log.push(EventLogEntry {
                name: name.to_string(),
                digest: digest.to_string(),
                pcr: pcr
                    .parse()
                    .map_err(|_| Error::ParseError(format!("bad PCR index: {pcr}")))?,
            });
        }
        Ok(Self { event_log })
    }
}

/// Measures every chain component into its planned PCR, in chain order, and
/// returns the event log for verifier replay.
pub fn measured_boot(chain: &BootChain, tpm: &mut TpmState) -> Result<BootReport> {
    let mut event_log = Vec::with_capacity(chain.components.len());
    for (component, image) in &chain.components {
        let pcr = (chain.pcr_plan)(*component);
        tpm.pcr_extend(pcr, image)?;
        event_log.push(EventLogEntry {
            name: component.name().to_string(),
            digest: hex::encode(crypto::sha256(image)),
            pcr,
        });
    }
    Ok(BootReport { event_log })
}

/// Key material established by the launch. The signing half of the
/// attestation key never leaves the monitor.
pub struct BootKeys {
    pub k_root: [u8; 32],
    pub hapk: [u8; 32],
    pub hask: KeyPair,
    pub first_boot: bool,
}

/// State that persists across reboots outside the TPM: the handle of the
/// sealed root-key blob.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KeyStore {
    pub k_root_blob: Option<u64>,
}

/// Late launch, run immediately after `measured_boot`:
/// first boot generates the root key from the TPM RNG and seals it under the
/// boot-chain PCR policy; later boots unseal it, which fails if any measured
/// component changed. The attestation key pair is derived from the root key,
/// its public half extended into PCR 13, and PCR 12 flooded so normal mode
/// can never unseal the root key again this boot.
pub fn late_launch(tpm: &mut TpmState, store: &mut KeyStore) -> Result<BootKeys> {
    let (k_root, first_boot) = match store.k_root_blob {
        None => {
            let bytes = tpm.rng(32);
            let k_root: [u8; 32] = bytes.try_into().expect("rng returns requested length");
            let blob = tpm.seal(&k_root, &seal_policy())?;
            store.k_root_blob = Some(blob);
            (k_root, true)
        }
        Some(blob) => {
            let bytes = tpm.unseal(blob).map_err(|_| Error::UnsealFailed)?;
            let k_root: [u8; 32] = bytes
                .try_into()
                .map_err(|_| Error::UnsealFailed)?;
            (k_root, false)
        }
    };

    let hask_seed = crypto::hmac_sha256(&k_root, b"hapk");
    let hask = KeyPair::from_seed(&hask_seed);
    let hapk = hask.public();

    tpm.pcr_extend(13, &hapk)?;
    tpm.pcr_extend(12, &FLOOD_CONSTANT)?;

    Ok(BootKeys {
        k_root,
        hapk,
        hask,
        first_boot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpm::replay_extends;

    fn fresh_tpm() -> TpmState {
        TpmState::new([3u8; 32])
    }

    /// Replay oracle: recompute each PCR from the event log alone.
    fn replay_pcrs(report: &BootReport) -> std::collections::BTreeMap<usize, Digest32> {
        let mut per_pcr: std::collections::BTreeMap<usize, Vec<Digest32>> = Default::default();
        for e in &report.event_log {
            per_pcr.entry(e.pcr).or_default().push(e.digest_bytes().unwrap());
        }
        per_pcr
            .into_iter()
            .map(|(pcr, digests)| (pcr, replay_extends(&digests)))
            .collect()
    }

    #[test]
    fn golden_chain_matches_event_log_replay() {
        let mut tpm = fresh_tpm();
        let report = measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        for (pcr, expected) in replay_pcrs(&report) {
            assert_eq!(tpm.pcr_read(pcr).unwrap(), expected, "PCR {pcr}");
        }
    }

    #[test]
    fn kernel_tamper_changes_pcr8() {
        let mut golden_tpm = fresh_tpm();
        measured_boot(&BootChain::golden(), &mut golden_tpm).unwrap();

        let mut chain = BootChain::golden();
        chain.tamper(Component::Kernel);
        let mut tampered_tpm = fresh_tpm();
        measured_boot(&chain, &mut tampered_tpm).unwrap();

        assert_ne!(
            golden_tpm.pcr_read(8).unwrap(),
            tampered_tpm.pcr_read(8).unwrap()
        );
        assert_eq!(
            golden_tpm.pcr_read(9).unwrap(),
            tampered_tpm.pcr_read(9).unwrap()
        );
    }

    #[test]
    fn grub_kernel_reorder_is_visible_in_pcr8() {
        let mut a = fresh_tpm();
        let golden_report = measured_boot(&BootChain::golden(), &mut a).unwrap();

        let mut chain = BootChain::golden();
        chain.swap(Component::Grub, Component::Kernel);
        let mut b = fresh_tpm();
        let swapped_report = measured_boot(&chain, &mut b).unwrap();

        assert_ne!(a.pcr_read(8).unwrap(), b.pcr_read(8).unwrap());
        // the replay oracle reproduces both orderings independently
        assert_eq!(replay_pcrs(&golden_report)[&8], a.pcr_read(8).unwrap());
        assert_eq!(replay_pcrs(&swapped_report)[&8], b.pcr_read(8).unwrap());
    }

    #[test]
    fn reboot_with_identical_chain_yields_same_keys() {
        let mut tpm = fresh_tpm();
        let mut store = KeyStore::default();

        measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        let first = late_launch(&mut tpm, &mut store).unwrap();
        assert!(first.first_boot);

        tpm.reset_pcrs();
        measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        let second = late_launch(&mut tpm, &mut store).unwrap();
        assert!(!second.first_boot);
        assert_eq!(first.k_root, second.k_root);
        assert_eq!(first.hapk, second.hapk);
    }

    #[test]
    fn tampered_monitor_image_fails_unseal() {
        let mut tpm = fresh_tpm();
        let mut store = KeyStore::default();
        measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        late_launch(&mut tpm, &mut store).unwrap();

        tpm.reset_pcrs();
        let mut chain = BootChain::golden();
        chain.tamper(Component::MonitorImage);
        measured_boot(&chain, &mut tpm).unwrap();
        assert_eq!(
            late_launch(&mut tpm, &mut store).unwrap_err(),
            Error::UnsealFailed
        );
    }

    #[test]
    fn flood_blocks_normal_mode_unseal() {
        let mut tpm = fresh_tpm();
        let mut store = KeyStore::default();
        measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        late_launch(&mut tpm, &mut store).unwrap();

        // normal mode now tries to grab the root key blob directly
        let blob = store.k_root_blob.unwrap();
        assert_eq!(tpm.unseal(blob), Err(Error::PolicyMismatch));
    }

    #[test]
    fn pcr13_is_extend_zero_hapk() {
        let mut tpm = fresh_tpm();
        let mut store = KeyStore::default();
        measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        let keys = late_launch(&mut tpm, &mut store).unwrap();
        let expected = replay_extends(&[crypto::sha256(&keys.hapk)]);
        assert_eq!(tpm.pcr_read(13).unwrap(), expected);
    }

    #[test]
    fn event_log_text_roundtrip() {
        let mut tpm = fresh_tpm();
        let report = measured_boot(&BootChain::golden(), &mut tpm).unwrap();
        let text = report.to_log_text();
        let parsed = BootReport::from_log_text(&text).unwrap();
        assert_eq!(parsed.event_log, report.event_log);
    }
}
