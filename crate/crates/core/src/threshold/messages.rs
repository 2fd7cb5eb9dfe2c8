//! Wire format for threshold protocol rounds: a 1-byte round tag, a
//! 4-byte big-endian payload length, then the payload. Points and
//! scalars use the curve's fixed-width encodings; big integers
//! (ciphertexts, the Paillier modulus) carry their own 4-byte length.

use num_bigint::BigUint;

use crate::crypto::{Ciphertext, CryptoError, CurveParams, EcdsaSignature, GroupPoint, Scalar};

use super::ThresholdError;

/// Non-interactive proof of knowledge of the discrete log of a point:
/// (T, z) with z*G = T + e*P and e a hash challenge over (P, T).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SchnorrProof {
    pub t_point: GroupPoint,
    pub z: Scalar,
}

/// Reasons a signing session aborts mid-protocol.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AbortCode {
    ZeroR = 1,
    ZeroS = 2,
    BadSignature = 3,
}

impl AbortCode {
    fn from_byte(b: u8) -> Result<AbortCode, CryptoError> {
        match b {
            1 => Ok(AbortCode::ZeroR),
            2 => Ok(AbortCode::ZeroS),
            3 => Ok(AbortCode::BadSignature),
            _ => Err(CryptoError::Malformed("abort code")),
        }
    }
}

/// One message of a keygen, signing, derivation, or reveal exchange.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum RoundMessage {
    /// Either party's hash commitment to its keygen reveal.
    KeygenCommit { commitment: [u8; 32] },
    /// Gateway opens: its public factor, proof, and commitment salt.
    KeygenReveal {
        point: GroupPoint,
        proof: SchnorrProof,
        salt: [u8; 32],
    },
    /// Device opens, and additionally publishes its Paillier public key
    /// and the encryption of its secret factor.
    KeygenRevealDevice {
        point: GroupPoint,
        proof: SchnorrProof,
        salt: [u8; 32],
        he_modulus: BigUint,
        enc_share: Ciphertext,
    },
    /// Gateway's view of the joint public key, for confirmation.
    KeygenFinish { joint_point: GroupPoint },
    /// Device's confirmation of the same joint key.
    KeygenFinishAck { joint_point: GroupPoint },

    /// Opens a signing session: digest under signature and the
    /// gateway's nonce commitment.
    SignInit {
        session_id: u64,
        digest: [u8; 32],
        nonce_commitment: [u8; 32],
    },
    /// Device's nonce commitment.
    SignNonceCommit {
        session_id: u64,
        nonce_commitment: [u8; 32],
    },
    /// Gateway opens its nonce point.
    SignNonceReveal {
        session_id: u64,
        point: GroupPoint,
        salt: [u8; 32],
    },
    /// Device opens its nonce point.
    SignNonceRevealDevice {
        session_id: u64,
        point: GroupPoint,
        salt: [u8; 32],
    },
    /// The gateway's blinded homomorphic evaluation of its signature
    /// contribution.
    SignCiphertext {
        session_id: u64,
        ciphertext: Ciphertext,
    },
    /// The finished signature, sent by the device after verifying it.
    SignComplete {
        session_id: u64,
        signature: EcdsaSignature,
    },
    SignAbort {
        session_id: u64,
        code: AbortCode,
    },

    /// Ask the device to confirm the shared child key at an index.
    DeriveRequest { index: u64 },
    DeriveConfirm { index: u64, child_point: GroupPoint },

    /// Ask the device to authorize release of a revocation secret.
    RevealRequest { index: u64 },
    /// tweak * device_share; the gateway folds in its own factor.
    RevealContribution { index: u64, partial: Scalar },
}

const TAG_KEYGEN_COMMIT: u8 = 1;
const TAG_KEYGEN_REVEAL: u8 = 2;
const TAG_KEYGEN_REVEAL_DEVICE: u8 = 3;
const TAG_KEYGEN_FINISH: u8 = 4;
const TAG_KEYGEN_FINISH_ACK: u8 = 5;
const TAG_SIGN_INIT: u8 = 6;
const TAG_SIGN_NONCE_COMMIT: u8 = 7;
const TAG_SIGN_NONCE_REVEAL: u8 = 8;
const TAG_SIGN_NONCE_REVEAL_DEVICE: u8 = 9;
const TAG_SIGN_CIPHERTEXT: u8 = 10;
const TAG_SIGN_COMPLETE: u8 = 11;
const TAG_SIGN_ABORT: u8 = 12;
const TAG_DERIVE_REQUEST: u8 = 13;
const TAG_DERIVE_CONFIRM: u8 = 14;
const TAG_REVEAL_REQUEST: u8 = 15;
const TAG_REVEAL_CONTRIBUTION: u8 = 16;

fn put_bigint(out: &mut Vec<u8>, v: &BigUint) {
    let body = v.to_bytes_be();
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], CryptoError> {
        if self.pos + len > self.bytes.len() {
            return Err(CryptoError::Malformed("payload truncated"));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn take_u64(&mut self) -> Result<u64, CryptoError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    fn take_array32(&mut self) -> Result<[u8; 32], CryptoError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn take_point(&mut self, curve: &CurveParams) -> Result<GroupPoint, CryptoError> {
        let b = self.take(1 + curve.field_bytes())?;
        curve.point_decode(b)
    }

    fn take_scalar(&mut self, curve: &CurveParams) -> Result<Scalar, CryptoError> {
        let b = self.take(curve.scalar_bytes())?;
        curve.scalar_decode(b)
    }

    fn take_bigint(&mut self) -> Result<BigUint, CryptoError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize;
        Ok(BigUint::from_bytes_be(self.take(len)?))
    }

    fn take_ciphertext(&mut self) -> Result<Ciphertext, CryptoError> {
        let (c, used) = Ciphertext::decode(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(c)
    }

    fn finish(&self) -> Result<(), CryptoError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(CryptoError::Malformed("trailing bytes"))
        }
    }
}

impl RoundMessage {
    pub fn encode(&self, curve: &CurveParams) -> Result<Vec<u8>, ThresholdError> {
        let mut payload = Vec::new();
        let tag = match self {
            RoundMessage::KeygenCommit { commitment } => {
                payload.extend_from_slice(commitment);
                TAG_KEYGEN_COMMIT
            }
            RoundMessage::KeygenReveal { point, proof, salt } => {
                payload.extend_from_slice(&curve.point_encode(point)?);
                payload.extend_from_slice(&curve.point_encode(&proof.t_point)?);
                payload.extend_from_slice(&curve.scalar_encode(&proof.z));
                payload.extend_from_slice(salt);
                TAG_KEYGEN_REVEAL
            }
            RoundMessage::KeygenRevealDevice {
                point,
                proof,
                salt,
                he_modulus,
                enc_share,
            } => {
                payload.extend_from_slice(&curve.point_encode(point)?);
                payload.extend_from_slice(&curve.point_encode(&proof.t_point)?);
                payload.extend_from_slice(&curve.scalar_encode(&proof.z));
                payload.extend_from_slice(salt);
                put_bigint(&mut payload, he_modulus);
                payload.extend_from_slice(&enc_share.encode());
                TAG_KEYGEN_REVEAL_DEVICE
            }
            RoundMessage::KeygenFinish { joint_point } => {
                payload.extend_from_slice(&curve.point_encode(joint_point)?);
                TAG_KEYGEN_FINISH
            }
            RoundMessage::KeygenFinishAck { joint_point } => {
                payload.extend_from_slice(&curve.point_encode(joint_point)?);
                TAG_KEYGEN_FINISH_ACK
            }
            RoundMessage::SignInit {
                session_id,
                digest,
                nonce_commitment,
            } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.extend_from_slice(digest);
                payload.extend_from_slice(nonce_commitment);
                TAG_SIGN_INIT
            }
            RoundMessage::SignNonceCommit {
                session_id,
                nonce_commitment,
            } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.extend_from_slice(nonce_commitment);
                TAG_SIGN_NONCE_COMMIT
            }
            RoundMessage::SignNonceReveal {
                session_id,
                point,
                salt,
            } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.extend_from_slice(&curve.point_encode(point)?);
                payload.extend_from_slice(salt);
                TAG_SIGN_NONCE_REVEAL
            }
            RoundMessage::SignNonceRevealDevice {
                session_id,
                point,
                salt,
            } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.extend_from_slice(&curve.point_encode(point)?);
                payload.extend_from_slice(salt);
                TAG_SIGN_NONCE_REVEAL_DEVICE
            }
            RoundMessage::SignCiphertext {
                session_id,
                ciphertext,
            } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.extend_from_slice(&ciphertext.encode());
                TAG_SIGN_CIPHERTEXT
            }
            RoundMessage::SignComplete {
                session_id,
                signature,
            } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.extend_from_slice(&signature.encode(curve));
                TAG_SIGN_COMPLETE
            }
            RoundMessage::SignAbort { session_id, code } => {
                payload.extend_from_slice(&session_id.to_be_bytes());
                payload.push(*code as u8);
                TAG_SIGN_ABORT
            }
            RoundMessage::DeriveRequest { index } => {
                payload.extend_from_slice(&index.to_be_bytes());
                TAG_DERIVE_REQUEST
            }
            RoundMessage::DeriveConfirm { index, child_point } => {
                payload.extend_from_slice(&index.to_be_bytes());
                payload.extend_from_slice(&curve.point_encode(child_point)?);
                TAG_DERIVE_CONFIRM
            }
            RoundMessage::RevealRequest { index } => {
                payload.extend_from_slice(&index.to_be_bytes());
                TAG_REVEAL_REQUEST
            }
            RoundMessage::RevealContribution { index, partial } => {
                payload.extend_from_slice(&index.to_be_bytes());
                payload.extend_from_slice(&curve.scalar_encode(partial));
                TAG_REVEAL_CONTRIBUTION
            }
        };
        let mut out = Vec::with_capacity(5 + payload.len());
        out.push(tag);
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(curve: &CurveParams, bytes: &[u8]) -> Result<RoundMessage, ThresholdError> {
        if bytes.len() < 5 {
            return Err(CryptoError::Malformed("round header").into());
        }
        let tag = bytes[0];
        let len = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
        if bytes.len() != 5 + len {
            return Err(CryptoError::Malformed("round length").into());
        }
        let mut r = Reader {
            bytes: &bytes[5..],
            pos: 0,
        };
        let msg = match tag {
            TAG_KEYGEN_COMMIT => RoundMessage::KeygenCommit {
                commitment: r.take_array32()?,
            },
            TAG_KEYGEN_REVEAL => RoundMessage::KeygenReveal {
                point: r.take_point(curve)?,
                proof: SchnorrProof {
                    t_point: r.take_point(curve)?,
                    z: r.take_scalar(curve)?,
                },
                salt: r.take_array32()?,
            },
            TAG_KEYGEN_REVEAL_DEVICE => RoundMessage::KeygenRevealDevice {
                point: r.take_point(curve)?,
                proof: SchnorrProof {
                    t_point: r.take_point(curve)?,
                    z: r.take_scalar(curve)?,
                },
                salt: r.take_array32()?,
                he_modulus: r.take_bigint()?,
                enc_share: r.take_ciphertext()?,
            },
            TAG_KEYGEN_FINISH => RoundMessage::KeygenFinish {
                joint_point: r.take_point(curve)?,
            },
            TAG_KEYGEN_FINISH_ACK => RoundMessage::KeygenFinishAck {
                joint_point: r.take_point(curve)?,
            },
            TAG_SIGN_INIT => RoundMessage::SignInit {
                session_id: r.take_u64()?,
                digest: r.take_array32()?,
                nonce_commitment: r.take_array32()?,
            },
            TAG_SIGN_NONCE_COMMIT => RoundMessage::SignNonceCommit {
                session_id: r.take_u64()?,
                nonce_commitment: r.take_array32()?,
            },
            TAG_SIGN_NONCE_REVEAL => RoundMessage::SignNonceReveal {
                session_id: r.take_u64()?,
                point: r.take_point(curve)?,
                salt: r.take_array32()?,
            },
            TAG_SIGN_NONCE_REVEAL_DEVICE => RoundMessage::SignNonceRevealDevice {
                session_id: r.take_u64()?,
                point: r.take_point(curve)?,
                salt: r.take_array32()?,
            },
            TAG_SIGN_CIPHERTEXT => RoundMessage::SignCiphertext {
                session_id: r.take_u64()?,
                ciphertext: r.take_ciphertext()?,
            },
            TAG_SIGN_COMPLETE => RoundMessage::SignComplete {
                session_id: r.take_u64()?,
                signature: {
                    let w = 2 * curve.scalar_bytes();
                    EcdsaSignature::decode(curve, r.take(w)?)?
                },
            },
            TAG_SIGN_ABORT => RoundMessage::SignAbort {
                session_id: r.take_u64()?,
                code: AbortCode::from_byte(r.take(1)?[0])?,
            },
            TAG_DERIVE_REQUEST => RoundMessage::DeriveRequest {
                index: r.take_u64()?,
            },
            TAG_DERIVE_CONFIRM => RoundMessage::DeriveConfirm {
                index: r.take_u64()?,
                child_point: r.take_point(curve)?,
            },
            TAG_REVEAL_REQUEST => RoundMessage::RevealRequest {
                index: r.take_u64()?,
            },
            TAG_REVEAL_CONTRIBUTION => RoundMessage::RevealContribution {
                index: r.take_u64()?,
                partial: r.take_scalar(curve)?,
            },
            _ => return Err(CryptoError::Malformed("unknown round tag").into()),
        };
        r.finish()?;
        Ok(msg)
    }

    /// Serialized size, for byte accounting in the simulator.
    pub fn wire_len(&self, curve: &CurveParams) -> usize {
        self.encode(curve).map(|v| v.len()).unwrap_or(0)
    }
}
