// SPDX-License-Identifier: Apache-2.0

//! Certificate authority, signing keys and verification.
//!
//! Certificates are a closed-world binding signed by a single root:
//!
//! ```text
//! subject_id u32 | public key 32B | issued_at u64 | CA signature 64B
//! ```
//!
//! Key material is derived from the authority's seed, so a given seed
//! always produces the same identities.

use alloc::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::{Digest, Sha512, Signature, Signer, SigningKey, VerifyingKey};
use thiserror::Error;

use crate::wire::{Reader, SignatureBytes, WireError};
use crate::Tick;

pub const CERT_LEN: usize = 4 + 32 + 8 + 64;

/// Identity namespace shared by gateways and the cloud service.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubjectId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrustError {
    #[error("subject {0:?} is already registered")]
    DuplicateSubject(SubjectId),
    #[error("subject {0:?} is not registered")]
    UnknownSubject(SubjectId),
}

/// A signing key pair.
#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
}

impl core::fmt::Debug for Keypair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Keypair")
            .field("public", &self.public_key())
            .finish_non_exhaustive()
    }
}

impl Keypair {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        Keypair {
            signing: SigningKey::from_bytes(&secret),
        }
    }

    /// Deterministic key derived from a seed and a domain label.
    pub fn derive(seed: &[u8; 32], label: &[u8], counter: u64) -> Self {
        let digest = Sha512::new()
            .chain_update(seed)
            .chain_update(label)
            .chain_update(counter.to_be_bytes())
            .finalize();
        let mut secret = [0u8; 32];
        secret.copy_from_slice(&digest[..32]);
        Self::from_secret(secret)
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> SignatureBytes {
        self.signing.sign(message).to_bytes()
    }
}

/// Checks `signature` over `message` under a raw public key. Never panics;
/// malformed keys and signatures simply fail.
pub fn verify_raw(public_key: &[u8; 32], message: &[u8], signature: &SignatureBytes) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    let signature = Signature::from_bytes(signature);
    key.verify_strict(message, &signature).is_ok()
}

/// CA-signed binding of a subject to a public key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub subject: SubjectId,
    pub public_key: [u8; 32],
    pub issued_at: Tick,
    pub ca_signature: SignatureBytes,
}

impl Certificate {
    fn to_be_signed(subject: SubjectId, public_key: &[u8; 32], issued_at: Tick) -> [u8; 44] {
        let mut out = [0u8; 44];
        out[..4].copy_from_slice(&subject.0.to_be_bytes());
        out[4..36].copy_from_slice(public_key);
        out[36..].copy_from_slice(&issued_at.to_be_bytes());
        out
    }

    pub fn encode(&self) -> [u8; CERT_LEN] {
        let mut out = [0u8; CERT_LEN];
        out[..44].copy_from_slice(&Self::to_be_signed(self.subject, &self.public_key, self.issued_at));
        out[44..].copy_from_slice(&self.ca_signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() != CERT_LEN {
            return Err(WireError::WrongLength { expected: CERT_LEN, actual: bytes.len() });
        }
        let mut r = Reader::new(bytes);
        Ok(Certificate {
            subject: SubjectId(r.u32()?),
            public_key: r.array()?,
            issued_at: r.u64()?,
            ca_signature: r.array()?,
        })
    }
}

/// What a verifier needs: the root key and the revocation list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrustAnchor {
    root: [u8; 32],
    revoked: BTreeSet<SubjectId>,
}

impl TrustAnchor {
    pub fn new(root: [u8; 32]) -> Self {
        TrustAnchor { root, revoked: BTreeSet::new() }
    }

    pub fn root(&self) -> [u8; 32] {
        self.root
    }

    pub fn revoke(&mut self, subject: SubjectId) {
        self.revoked.insert(subject);
    }

    pub fn is_revoked(&self, subject: SubjectId) -> bool {
        self.revoked.contains(&subject)
    }

    /// True iff the certificate was issued by this root and is not revoked.
    pub fn validate(&self, cert: &Certificate) -> bool {
        !self.is_revoked(cert.subject)
            && verify_raw(
                &self.root,
                &Certificate::to_be_signed(cert.subject, &cert.public_key, cert.issued_at),
                &cert.ca_signature,
            )
    }

    /// True iff `cert` is valid and `signature` over `message` was made with
    /// the certified key.
    pub fn verify(&self, cert: &Certificate, message: &[u8], signature: &SignatureBytes) -> bool {
        self.validate(cert) && verify_raw(&cert.public_key, message, signature)
    }
}

/// Issues and revokes certificates for gateways and the cloud service.
#[derive(Debug, Clone)]
pub struct CertificateAuthority {
    seed: [u8; 32],
    root: Keypair,
    issued: BTreeMap<SubjectId, Certificate>,
    anchor: TrustAnchor,
    issuance_counter: u64,
}

impl CertificateAuthority {
    pub fn new(seed: [u8; 32]) -> Self {
        let root = Keypair::derive(&seed, b"edgeguard/ca-root", 0);
        let anchor = TrustAnchor::new(root.public_key());
        CertificateAuthority {
            seed,
            root,
            issued: BTreeMap::new(),
            anchor,
            issuance_counter: 0,
        }
    }

    /// Convenience constructor expanding a 64-bit seed.
    pub fn from_u64(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_be_bytes());
        Self::new(bytes)
    }

    /// Current root key and revocation list.
    pub fn anchor(&self) -> TrustAnchor {
        self.anchor.clone()
    }

    pub fn register(
        &mut self,
        subject: SubjectId,
        issued_at: Tick,
    ) -> Result<(Keypair, Certificate), TrustError> {
        if self.issued.contains_key(&subject) {
            return Err(TrustError::DuplicateSubject(subject));
        }
        self.issuance_counter += 1;
        let keys = Keypair::derive(&self.seed, b"edgeguard/subject", self.issuance_counter);
        let public_key = keys.public_key();
        let cert = Certificate {
            subject,
            public_key,
            issued_at,
            ca_signature: self
                .root
                .sign(&Certificate::to_be_signed(subject, &public_key, issued_at)),
        };
        self.issued.insert(subject, cert);
        Ok((keys, cert))
    }

    pub fn certificate(&self, subject: SubjectId) -> Option<&Certificate> {
        self.issued.get(&subject)
    }

    pub fn revoke(&mut self, subject: SubjectId) -> Result<(), TrustError> {
        if !self.issued.contains_key(&subject) {
            return Err(TrustError::UnknownSubject(subject));
        }
        self.anchor.revoke(subject);
        Ok(())
    }

    pub fn verify(&self, cert: &Certificate, message: &[u8], signature: &SignatureBytes) -> bool {
        self.anchor.verify(cert, message, signature)
    }

    pub fn issued(&self) -> impl Iterator<Item = &Certificate> + '_ {
        self.issued.values()
    }
}

/// Signs `message` with `keys`. Free-function form for symmetry with
/// [`TrustAnchor::verify`].
pub fn sign(keys: &Keypair, message: &[u8]) -> SignatureBytes {
    keys.sign(message)
}
