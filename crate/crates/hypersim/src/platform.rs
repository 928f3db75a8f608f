// SPDX-License-Identifier: Apache-2.0

//! Composition root: a TPM, the persistent key store, a boot chain, and the
//! monitor born from a measured late launch. Rebooting preserves the TPM
//! and key store (the chip and the sealed blob survive) while the monitor
//! and all enclave state are rebuilt from scratch.

use crate::attest::GoldenValues;
use crate::boot::{self, BootChain, BootReport, KeyStore};
use crate::crypto::{self, Digest32, KeyPair};
use crate::error::Result;
use crate::monitor::{Monitor, MonitorConfig};
use crate::tpm::TpmState;

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    pub seed: u64,
    pub monitor: MonitorConfig,
    pub chain: BootChain,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            monitor: MonitorConfig::default(),
            chain: BootChain::golden(),
        }
    }
}

fn seed_label(seed: u64, label: &str) -> [u8; 32] {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    crypto::sha256(&buf)
}

pub struct Platform {
    pub config: PlatformConfig,
    pub tpm: TpmState,
    pub store: KeyStore,
    pub ca: KeyPair,
    pub report: BootReport,
    pub monitor: Monitor,
}

impl Platform {
    /// First boot: provision the TPM's certificate chain, run the measured
    /// launch, and bring up the monitor with the primary OS demoted.
    pub fn boot(config: PlatformConfig) -> Result<Self> {
        let mut tpm = TpmState::new(seed_label(config.seed, "tpm"));
        let ca = KeyPair::from_seed(&seed_label(config.seed, "ca"));
        tpm.provision_aik(&ca);
        let mut store = KeyStore::default();

        let report = boot::measured_boot(&config.chain, &mut tpm)?;
        let keys = boot::late_launch(&mut tpm, &mut store)?;
        let atrest: [u8; 16] = tpm.rng(16).try_into().expect("rng length");
        let monitor = Monitor::new(config.monitor.clone(), &keys, atrest);

        Ok(Self {
            config,
            tpm,
            store,
            ca,
            report,
            monitor,
        })
    }

    /// System reset: PCRs clear, the chip and sealed store persist, the boot
    /// chain (possibly tampered) is measured again, and the monitor is
    /// rebuilt. Fails with UnsealFailed when the measured chain no longer
    /// matches the sealing policy.
    pub fn reboot(&mut self, chain: Option<BootChain>) -> Result<()> {
        if let Some(chain) = chain {
            self.config.chain = chain;
        }
        self.tpm.reset_pcrs();
        self.report = boot::measured_boot(&self.config.chain, &mut self.tpm)?;
        let keys = boot::late_launch(&mut self.tpm, &mut self.store)?;
        let atrest: [u8; 16] = self.tpm.rng(16).try_into().expect("rng length");
        self.monitor = Monitor::new(self.config.monitor.clone(), &keys, atrest);
        Ok(())
    }

    /// Golden values a verifier would pin: this boot's event log, the
    /// expected enclave measurement, and the CA key.
    pub fn golden_values(&self, expected_mrenclave: Digest32) -> GoldenValues {
        GoldenValues::new(&self.report, expected_mrenclave, self.ca.public())
    }
}
