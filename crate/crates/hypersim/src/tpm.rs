// SPDX-License-Identifier: Apache-2.0

//! Minimal TPM simulator: a 24-register PCR bank with extend-only semantics,
//! endorsement and attestation keys with a certificate chain, quote
//! generation, PCR-bound seal/unseal, and a deterministic RNG.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{self, CertChain, CertRecord, Digest32, KeyPair};
use crate::error::{Error, Result};

pub const PCR_COUNT: usize = 24;

/// Composite quote: selection bitmap, digest over the selected PCRs in index
/// order, caller nonce, and an AIK signature over digest plus nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TpmQuote {
    pub selection: BTreeSet<usize>,
    pub digest: Digest32,
    pub nonce: Vec<u8>,
    pub signature: [u8; 64],
}

impl TpmQuote {
    /// Wire format: bitmap(3 bytes, little-endian bit i = PCR i selected)
    /// || digest(32) || nonce_len(u16 LE) || nonce || signature(64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bitmap = [0u8; 3];
        for &i in &self.selection {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        let mut out = Vec::with_capacity(3 + 32 + 2 + self.nonce.len() + 64);
        out.extend_from_slice(&bitmap);
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.nonce.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let err = || Error::ParseError("truncated TPM quote".into());
        if data.len() < 3 + 32 + 2 + 64 {
            return Err(err());
        }
        let mut selection = BTreeSet::new();
        for i in 0..PCR_COUNT {
            if data[i / 8] & (1 << (i % 8)) != 0 {
                selection.insert(i);
            }
        }
        let digest: Digest32 = data[3..35].try_into().unwrap();
        let nonce_len = u16::from_le_bytes([data[35], data[36]]) as usize;
        if data.len() != 37 + nonce_len + 64 {
            return Err(err());
        }
        let nonce = data[37..37 + nonce_len].to_vec();
        let signature: [u8; 64] = data[37 + nonce_len..].try_into().unwrap();
        Ok(Self {
            selection,
            digest,
            nonce,
            signature,
        })
    }

    pub fn signed_payload(&self) -> Vec<u8> {
        let mut msg = Vec::with_capacity(32 + self.nonce.len());
        msg.extend_from_slice(&self.digest);
        msg.extend_from_slice(&self.nonce);
        msg
    }

    pub fn verify(&self, aik_pubkey: &[u8; 32]) -> bool {
        crypto::verify_signature(aik_pubkey, &self.signed_payload(), &self.signature)
    }
}

#[derive(Debug, Clone)]
struct SealedBlob {
    ciphertext: Vec<u8>,
    policy: Vec<(usize, Digest32)>,
}

/// TPM chip state. Survives simulated reboots (keys, sealed store, RNG
/// stream); only the PCR bank resets.
pub struct TpmState {
    pcrs: [Digest32; PCR_COUNT],
    ek: KeyPair,
    aik: KeyPair,
    aik_chain: Option<CertChain>,
    sealed_store: BTreeMap<u64, SealedBlob>,
    next_blob_id: u64,
    rng: ChaCha20Rng,
    storage_key: [u8; 16],
}

impl TpmState {
    pub fn new(seed: [u8; 32]) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed);
        let mut ek_seed = [0u8; 32];
        rng.fill_bytes(&mut ek_seed);
        let mut aik_seed = [0u8; 32];
        rng.fill_bytes(&mut aik_seed);
        let mut storage_key = [0u8; 16];
        rng.fill_bytes(&mut storage_key);
        Self {
            pcrs: [[0u8; 32]; PCR_COUNT],
            ek: KeyPair::from_seed(&ek_seed),
            aik: KeyPair::from_seed(&aik_seed),
            aik_chain: None,
            sealed_store: BTreeMap::new(),
            next_blob_id: 1,
            rng,
            storage_key,
        }
    }

    /// Platform registration: the CA certifies the EK, the EK certifies the
    /// AIK. The resulting chain ships inside every quote.
    pub fn provision_aik(&mut self, ca: &KeyPair) -> CertChain {
        let chain = CertChain(vec![
            CertRecord::issue(&self.ek, self.aik.public()),
            CertRecord::issue(ca, self.ek.public()),
        ]);
        self.aik_chain = Some(chain.clone());
        chain
    }

    pub fn aik_chain(&self) -> Option<&CertChain> {
        self.aik_chain.as_ref()
    }

    pub fn aik_public(&self) -> [u8; 32] {
        self.aik.public()
    }

    /// System reset: PCRs return to zero, everything else persists.
    pub fn reset_pcrs(&mut self) {
        self.pcrs = [[0u8; 32]; PCR_COUNT];
    }

    pub fn pcr_read(&self, idx: usize) -> Result<Digest32> {
        self.pcrs.get(idx).copied().ok_or(Error::BadIndex(idx))
    }

    /// PCR extend: pcr = H(pcr || H(data)). There is no way to set a PCR to
    /// a chosen value.
    pub fn pcr_extend(&mut self, idx: usize, data: &[u8]) -> Result<Digest32> {
        if idx >= PCR_COUNT {
            return Err(Error::BadIndex(idx));
        }
        let measurement = crypto::sha256(data);
        let new = crypto::sha256_concat(&[&self.pcrs[idx], &measurement]);
        self.pcrs[idx] = new;
        Ok(new)
    }

    pub fn quote(&mut self, selection: &BTreeSet<usize>, nonce: &[u8]) -> Result<TpmQuote> {
        let mut concat = Vec::with_capacity(selection.len() * 32);
        for &i in selection {
            if i >= PCR_COUNT {
                return Err(Error::BadIndex(i));
            }
            concat.extend_from_slice(&self.pcrs[i]);
        }
        let digest = crypto::sha256(&concat);
        let mut msg = Vec::with_capacity(32 + nonce.len());
        msg.extend_from_slice(&digest);
        msg.extend_from_slice(nonce);
        Ok(TpmQuote {
            selection: selection.clone(),
            digest,
            nonce: nonce.to_vec(),
            signature: self.aik.sign(&msg),
        })
    }

    /// Seals data against the current values of the policy PCRs.
    pub fn seal(&mut self, data: &[u8], policy: &BTreeSet<usize>) -> Result<u64> {
        let mut captured = Vec::with_capacity(policy.len());
        for &i in policy {
            if i >= PCR_COUNT {
                return Err(Error::BadIndex(i));
            }
            captured.push((i, self.pcrs[i]));
        }
        let id = self.next_blob_id;
        self.next_blob_id += 1;
        let ciphertext = crypto::frame_transform(&self.storage_key, id as usize, data);
        self.sealed_store.insert(
            id,
            SealedBlob {
                ciphertext,
                policy: captured,
            },
        );
        Ok(id)
    }

    /// Releases the data only if every policy PCR currently matches its
    /// captured value bit-exact.
    pub fn unseal(&self, blob_id: u64) -> Result<Vec<u8>> {
        let blob = self
            .sealed_store
            .get(&blob_id)
            .ok_or(Error::UnknownBlob(blob_id))?;
        for (idx, expected) in &blob.policy {
            if self.pcrs[*idx] != *expected {
                return Err(Error::PolicyMismatch);
            }
        }
        Ok(crypto::frame_transform(
            &self.storage_key,
            blob_id as usize,
            &blob.ciphertext,
        ))
    }

    /// Deterministic RNG stream; sequential calls consume disjoint positions.
    pub fn rng(&mut self, n: usize) -> Vec<u8> {
        let mut out = vec![0u8; n];
        self.rng.fill_bytes(&mut out);
        out
    }
}

/// Replays an extend sequence over an all-zero PCR, for verifier-side
/// recomputation from an event log of digests.
pub fn replay_extends(digests: &[Digest32]) -> Digest32 {
    let mut pcr = [0u8; 32];
    for d in digests {
        pcr = crypto::sha256_concat(&[&pcr, d]);
    }
    pcr
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpm() -> TpmState {
        TpmState::new([9u8; 32])
    }

    #[test]
    fn extend_matches_reference_hash_chain() {
        let mut t = tpm();
        let v = t.pcr_extend(0, b"component").unwrap();
        let expected = crypto::sha256_concat(&[&[0u8; 32], &crypto::sha256(b"component")]);
        assert_eq!(v, expected);
        assert_eq!(t.pcr_read(0).unwrap(), expected);
    }

    #[test]
    fn extend_order_matters() {
        let mut a = tpm();
        a.pcr_extend(5, b"first").unwrap();
        a.pcr_extend(5, b"second").unwrap();
        let mut b = tpm();
        b.pcr_extend(5, b"second").unwrap();
        b.pcr_extend(5, b"first").unwrap();
        assert_ne!(a.pcr_read(5).unwrap(), b.pcr_read(5).unwrap());
    }

    #[test]
    fn reset_zeroes_all_pcrs() {
        let mut t = tpm();
        for i in 0..PCR_COUNT {
            t.pcr_extend(i, b"x").unwrap();
        }
        t.reset_pcrs();
        for i in 0..PCR_COUNT {
            assert_eq!(t.pcr_read(i).unwrap(), [0u8; 32]);
        }
        assert!(t.pcr_extend(24, b"x").is_err());
    }

    #[test]
    fn quote_over_fresh_pcrs_verifies_against_zero_digest() {
        let mut t = tpm();
        let sel = BTreeSet::from([0, 1, 12]);
        let q = t.quote(&sel, b"nonce").unwrap();
        let mut concat = Vec::new();
        for _ in &sel {
            concat.extend_from_slice(&[0u8; 32]);
        }
        assert_eq!(q.digest, crypto::sha256(&concat));
        assert!(q.verify(&t.aik_public()));
    }

    #[test]
    fn tampered_digest_or_nonce_breaks_verification() {
        let mut t = tpm();
        let sel = BTreeSet::from([0]);
        let q = t.quote(&sel, b"n1").unwrap();
        let mut bad = q.clone();
        bad.digest[0] ^= 1;
        assert!(!bad.verify(&t.aik_public()));

        let q2 = t.quote(&sel, b"n2").unwrap();
        assert_ne!(q.signature, q2.signature);
    }

    #[test]
    fn quote_wire_roundtrip() {
        let mut t = tpm();
        let sel: BTreeSet<usize> = (0..10).chain([12, 13]).collect();
        let q = t.quote(&sel, &[0xAB; 20]).unwrap();
        let parsed = TpmQuote::from_bytes(&q.to_bytes()).unwrap();
        assert_eq!(parsed, q);
    }

    #[test]
    fn seal_unseal_roundtrip_and_policy_binding() {
        let mut t = tpm();
        t.pcr_extend(12, b"monitor").unwrap();
        let policy = BTreeSet::from([0, 12]);
        let id = t.seal(b"root key material", &policy).unwrap();
        assert_eq!(t.unseal(id).unwrap(), b"root key material");

        t.pcr_extend(12, b"flood").unwrap();
        assert_eq!(t.unseal(id), Err(Error::PolicyMismatch));
        assert_eq!(t.unseal(999), Err(Error::UnknownBlob(999)));
    }

    #[test]
    fn unseal_succeeds_after_replaying_identical_extends() {
        let mut t = tpm();
        t.pcr_extend(0, b"bios").unwrap();
        t.pcr_extend(12, b"monitor").unwrap();
        let id = t.seal(b"secret", &BTreeSet::from([0, 12])).unwrap();

        t.reset_pcrs();
        assert_eq!(t.unseal(id), Err(Error::PolicyMismatch));
        t.pcr_extend(0, b"bios").unwrap();
        t.pcr_extend(12, b"monitor").unwrap();
        assert_eq!(t.unseal(id).unwrap(), b"secret");
    }

    #[test]
    fn rng_is_deterministic_and_non_overlapping() {
        let mut a = TpmState::new([1u8; 32]);
        let mut b = TpmState::new([1u8; 32]);
        assert_eq!(a.rng(32), b.rng(32));
        let first = a.rng(16);
        let second = a.rng(16);
        assert_ne!(first, second);

        let mut c = TpmState::new([2u8; 32]);
        assert_ne!(TpmState::new([1u8; 32]).rng(32), c.rng(32));
    }
}
