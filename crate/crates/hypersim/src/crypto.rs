// SPDX-License-Identifier: Apache-2.0

//! Cryptographic primitives used by the simulator: SHA-256 digests, an
//! HMAC-based KDF, the at-rest AES-CTR transform, Ed25519 signatures, and a
//! minimal self-describing certificate record.
//!
//! Everything here is deterministic given its inputs; there is no ambient
//! randomness. Keys are derived from explicit seeds so that a whole boot is
//! replayable bit-for-bit.

use aes::cipher::{KeyIvInit, StreamCipher};
use aes::Aes128;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256, Sha512};

use crate::error::{Error, Result};

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBKEY_LEN: usize = 32;

pub type Digest32 = [u8; DIGEST_LEN];

pub fn sha256(data: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

pub fn sha256_concat(parts: &[&[u8]]) -> Digest32 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// HMAC-SHA-256 keyed derivation. Used for all key material derived from the
/// root key: `derive(k_root, label)`.
pub fn hmac_sha256(key: &[u8], label: &[u8]) -> Digest32 {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(label);
    mac.finalize().into_bytes().into()
}

/// HMAC-SHA-512, used where a 64-byte authenticator is needed (report MACs).
pub fn hmac_sha512(key: &[u8], data: &[u8]) -> [u8; 64] {
    let mut mac = <Hmac<Sha512> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// At-rest transform for encrypted frames: AES-128-CTR under a per-boot key
/// with a nonce derived from the frame number. Applying it twice restores the
/// plaintext, which is what a bus snooper model needs.
pub fn frame_transform(key: &[u8; 16], frame_number: usize, data: &[u8]) -> Vec<u8> {
    let mut iv = [0u8; 16];
    iv[..8].copy_from_slice(&(frame_number as u64).to_le_bytes());
    let mut cipher = ctr::Ctr64LE::<Aes128>::new(key.into(), &iv.into());
    let mut out = data.to_vec();
    cipher.apply_keystream(&mut out);
    out
}

/// A deterministic Ed25519 key pair constructed from a 32-byte seed.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(seed),
        }
    }

    pub fn public(&self) -> [u8; PUBKEY_LEN] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPair({})", hex::encode(self.public()))
    }
}

pub fn verify_signature(pubkey: &[u8; PUBKEY_LEN], msg: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(pubkey) else {
        return false;
    };
    vk.verify(msg, &Signature::from_bytes(sig)).is_ok()
}

/// Self-describing signed record: `issuer` certifies `subject`. Chains are
/// ordered leaf first and terminate at a key the verifier already trusts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertRecord {
    pub subject: [u8; PUBKEY_LEN],
    pub issuer: [u8; PUBKEY_LEN],
    pub signature: [u8; SIGNATURE_LEN],
}

impl CertRecord {
    pub const WIRE_LEN: usize = PUBKEY_LEN + PUBKEY_LEN + SIGNATURE_LEN;

    pub fn issue(issuer: &KeyPair, subject: [u8; PUBKEY_LEN]) -> Self {
        Self {
            subject,
            issuer: issuer.public(),
            signature: issuer.sign(&subject),
        }
    }

    pub fn verify(&self) -> bool {
        verify_signature(&self.issuer, &self.subject, &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::WIRE_LEN);
        out.extend_from_slice(&self.subject);
        out.extend_from_slice(&self.issuer);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() != Self::WIRE_LEN {
            return Err(Error::ParseError("bad certificate record length".into()));
        }
        let mut subject = [0u8; PUBKEY_LEN];
        let mut issuer = [0u8; PUBKEY_LEN];
        let mut signature = [0u8; SIGNATURE_LEN];
        subject.copy_from_slice(&data[..32]);
        issuer.copy_from_slice(&data[32..64]);
        signature.copy_from_slice(&data[64..]);
        Ok(Self {
            subject,
            issuer,
            signature,
        })
    }
}

/// Certificate chain, leaf first. Serialized as a record count byte followed
/// by fixed-size records.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CertChain(pub Vec<CertRecord>);

impl CertChain {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.0.len() as u8];
        for rec in &self.0 {
            out.extend_from_slice(&rec.to_bytes());
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let Some((&count, rest)) = data.split_first() else {
            return Err(Error::ParseError("empty certificate chain".into()));
        };
        if rest.len() != count as usize * CertRecord::WIRE_LEN {
            return Err(Error::ParseError("bad certificate chain length".into()));
        }
        let mut records = Vec::with_capacity(count as usize);
        for chunk in rest.chunks_exact(CertRecord::WIRE_LEN) {
            records.push(CertRecord::from_bytes(chunk)?);
        }
        Ok(Self(records))
    }

    /// Leaf public key, i.e. the key the chain certifies.
    pub fn leaf_key(&self) -> Option<[u8; PUBKEY_LEN]> {
        self.0.first().map(|r| r.subject)
    }

    /// Walks the chain: every record must verify, each issuer must be the
    /// subject of the next record, and the last issuer must be `trusted_root`.
    pub fn chains_to(&self, trusted_root: &[u8; PUBKEY_LEN]) -> bool {
        if self.0.is_empty() {
            return false;
        }
        for (i, rec) in self.0.iter().enumerate() {
            if !rec.verify() {
                return false;
            }
            if let Some(next) = self.0.get(i + 1) {
                if rec.issuer != next.subject {
                    return false;
                }
            }
        }
        self.0.last().map(|r| &r.issuer) == Some(trusted_root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_verify_roundtrip() {
        let kp = KeyPair::from_seed(&[7u8; 32]);
        let sig = kp.sign(b"hello");
        assert!(verify_signature(&kp.public(), b"hello", &sig));
        assert!(!verify_signature(&kp.public(), b"hellO", &sig));
    }

    #[test]
    fn keypair_is_deterministic() {
        let a = KeyPair::from_seed(&[3u8; 32]);
        let b = KeyPair::from_seed(&[3u8; 32]);
        assert_eq!(a.public(), b.public());
        assert_eq!(a.sign(b"x"), b.sign(b"x"));
    }

    #[test]
    fn frame_transform_is_involutive_and_nontrivial() {
        let key = [0x42u8; 16];
        let data = vec![0xA5u8; 4096];
        let ct = frame_transform(&key, 9, &data);
        assert_ne!(ct, data);
        assert_eq!(frame_transform(&key, 9, &ct), data);
        // different frame number gives a different keystream
        assert_ne!(frame_transform(&key, 10, &data), ct);
    }

    #[test]
    fn cert_chain_walks_to_root() {
        let ca = KeyPair::from_seed(&[1u8; 32]);
        let ek = KeyPair::from_seed(&[2u8; 32]);
        let aik = KeyPair::from_seed(&[3u8; 32]);
        let chain = CertChain(vec![
            CertRecord::issue(&ek, aik.public()),
            CertRecord::issue(&ca, ek.public()),
        ]);
        assert!(chain.chains_to(&ca.public()));
        assert_eq!(chain.leaf_key(), Some(aik.public()));

        let other = KeyPair::from_seed(&[9u8; 32]);
        assert!(!chain.chains_to(&other.public()));

        let parsed = CertChain::from_bytes(&chain.to_bytes()).unwrap();
        assert_eq!(parsed, chain);
    }
}
