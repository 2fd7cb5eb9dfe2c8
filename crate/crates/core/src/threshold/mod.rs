//! Two-party ECDSA with multiplicative key sharing, plus the shared
//! hierarchical derivation and revocation-secret release built on it.
//!
//! The private key is x = x_d * x_g mod n, one factor per party, and the
//! joint public key is Q = x_d * (x_g * G). Neither factor ever crosses
//! the wire in the clear: the device publishes a Paillier encryption of
//! its factor once at keygen, and each signature is assembled from a
//! blinded homomorphic evaluation that only the device can decrypt.
//!
//! Two layers:
//!
//! * Step machines ([`KeygenDevice`], [`GatewaySigner`], ...) that
//!   consume and produce [`RoundMessage`]s one at a time. The protocol
//!   state machines feed these over simulated links.
//! * Whole-protocol drivers ([`tkeygen`], [`tsign`], [`derive_child`],
//!   [`commitment_point`], [`reveal_revocation_secret`]) that pump both
//!   machines locally. Joint operations take each side's key material as
//!   an `Option` and fail with [`ThresholdError::PartyAbsent`] when one
//!   is missing; there is no single-share path to any result.

mod derive;
mod keygen;
mod messages;
mod signing;

pub use derive::{
    commitment_point, derive_child, derive_tweak, reveal_revocation_secret, ChildShares,
};
pub use keygen::{tkeygen, KeygenDevice, KeygenGateway, ThresholdKeyPair};
pub use messages::{AbortCode, RoundMessage, SchnorrProof};
pub use signing::{
    tsign, DeviceSigner, GatewaySigner, SignOutcome, SignPhase, SignerStep, SigningSession,
};

use crate::crypto::{
    Ciphertext, CryptoError, CurveParams, GroupPoint, HePublicKey, HomomorphicKeyPair, Scalar,
};
use thiserror::Error;

/// Which side of the two-party protocol a share belongs to. The device
/// is the decrypting party; the gateway evaluates homomorphically.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Party {
    Device,
    Gateway,
}

/// The device's key factor, encrypted under its own Paillier key and
/// held by the gateway for homomorphic use during signing.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EncryptedShare {
    pub ciphertext: Ciphertext,
    pub he_public: HePublicKey,
}

/// One party's half of a joint key.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct KeyShare {
    pub role: Party,
    share: Scalar,
    pub joint_public_key: GroupPoint,
    pub chain_code: [u8; 32],
    /// Held by the gateway: encryption of the device's factor.
    pub enc_counterparty_share: Option<EncryptedShare>,
    /// Held by the device: the Paillier decryption keypair.
    pub he_keys: Option<HomomorphicKeyPair>,
}

impl KeyShare {
    /// The party's secret factor. Exposed read-only so harnesses can
    /// cross-check joint results against single-signer oracles.
    pub fn share(&self) -> &Scalar {
        &self.share
    }

    pub(crate) fn new(
        role: Party,
        share: Scalar,
        joint_public_key: GroupPoint,
        chain_code: [u8; 32],
        enc_counterparty_share: Option<EncryptedShare>,
        he_keys: Option<HomomorphicKeyPair>,
    ) -> KeyShare {
        KeyShare {
            role,
            share,
            joint_public_key,
            chain_code,
            enc_counterparty_share,
            he_keys,
        }
    }

    /// This party's share of the child key at `index`: the gateway share
    /// is multiplied by the public tweak, the device share is unchanged,
    /// and the joint public key becomes tweak * Q for both.
    pub fn child(&self, curve: &CurveParams, index: u64) -> KeyShare {
        let tweak = derive_tweak(curve, &self.joint_public_key, &self.chain_code, index);
        let share = match self.role {
            Party::Gateway => curve.scalar_mul(&self.share, &tweak),
            Party::Device => self.share.clone(),
        };
        KeyShare {
            role: self.role,
            share,
            joint_public_key: curve.mul(&self.joint_public_key, &tweak),
            chain_code: self.chain_code,
            enc_counterparty_share: self.enc_counterparty_share.clone(),
            he_keys: self.he_keys.clone(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThresholdError {
    #[error("operation requires both parties; {0:?} share absent")]
    PartyAbsent(Party),
    #[error("commitment opening does not match")]
    CommitmentMismatch,
    #[error("discrete-log knowledge proof rejected")]
    BadProof,
    #[error("message not valid in the current phase")]
    OutOfPhase,
    #[error("session or index mismatch")]
    SessionMismatch,
    #[error("result failed verification under the joint key")]
    BadSignature,
    #[error("r or s was zero; retry with fresh nonces")]
    ZeroRetry,
    #[error("nonce retries exhausted")]
    RetryExhausted,
    #[error("crypto failure: {0}")]
    Crypto(#[from] CryptoError),
}

#[cfg(test)]
mod tests;
