//! Distributed key generation. Both parties commit to their public
//! factor and a knowledge proof, then open; the device additionally
//! publishes its Paillier key and an encryption of its secret factor.
//! Each side ends with a [`KeyShare`] for the joint key Q = x_d*x_g*G
//! and an identical hash-derived chain code.

use rand::RngCore;

use crate::crypto::{
    he_keygen, required_modulus_bits, sha256_parts, CurveParams, GroupPoint, Scalar,
};

use super::messages::{RoundMessage, SchnorrProof};
use super::{EncryptedShare, KeyShare, Party, ThresholdError};

/// Both finished shares plus the joint public key, as returned by the
/// local [`tkeygen`] driver.
#[derive(Clone, Debug)]
pub struct ThresholdKeyPair {
    pub device: KeyShare,
    pub gateway: KeyShare,
    pub joint_public_key: GroupPoint,
}

pub(super) fn schnorr_prove<R: RngCore + ?Sized>(
    curve: &CurveParams,
    secret: &Scalar,
    public: &GroupPoint,
    rng: &mut R,
) -> SchnorrProof {
    let t = curve.random_scalar(rng);
    let t_point = curve.mul_g(&t);
    let e = challenge(curve, public, &t_point);
    let z = curve.scalar_add(&t, &curve.scalar_mul(&e, secret));
    SchnorrProof { t_point, z }
}

pub(super) fn schnorr_verify(
    curve: &CurveParams,
    public: &GroupPoint,
    proof: &SchnorrProof,
) -> bool {
    if public.is_infinity() || !curve.is_on_curve(public) {
        return false;
    }
    let e = challenge(curve, public, &proof.t_point);
    let lhs = curve.mul_g(&proof.z);
    let rhs = curve.add(&proof.t_point, &curve.mul(public, &e));
    lhs == rhs
}

fn challenge(curve: &CurveParams, public: &GroupPoint, t_point: &GroupPoint) -> Scalar {
    let pb = curve.point_encode(public).unwrap_or_default();
    let tb = curve.point_encode(t_point).unwrap_or_default();
    curve.scalar_from_bytes_reduced(sha256_parts("pok-dlog", &[&pb, &tb]).as_bytes())
}

/// Commitment to a reveal: binds point, proof, and a fresh salt.
pub(super) fn reveal_commitment(
    curve: &CurveParams,
    point: &GroupPoint,
    proof: &SchnorrProof,
    salt: &[u8; 32],
) -> [u8; 32] {
    let pb = curve.point_encode(point).unwrap_or_default();
    let tb = curve.point_encode(&proof.t_point).unwrap_or_default();
    let zb = curve.scalar_encode(&proof.z);
    *sha256_parts("keygen-commit", &[&pb, &tb, &zb, salt]).as_bytes()
}

fn chain_code_for(curve: &CurveParams, joint: &GroupPoint) -> [u8; 32] {
    let qb = curve.point_encode(joint).unwrap_or_default();
    *sha256_parts("chain-code", &[&qb]).as_bytes()
}

fn fresh_salt<R: RngCore + ?Sized>(rng: &mut R) -> [u8; 32] {
    let mut salt = [0u8; 32];
    rng.fill_bytes(&mut salt);
    salt
}

enum GatewayState {
    AwaitCommit,
    AwaitReveal { device_commitment: [u8; 32] },
    AwaitAck,
    Done,
    Failed,
}

/// Gateway half of keygen. Construction emits the opening commit.
pub struct KeygenGateway {
    curve: CurveParams,
    share: Scalar,
    point: GroupPoint,
    proof: SchnorrProof,
    salt: [u8; 32],
    state: GatewayState,
    result: Option<KeyShare>,
}

impl KeygenGateway {
    pub fn new<R: RngCore + ?Sized>(curve: &CurveParams, rng: &mut R) -> (Self, RoundMessage) {
        let share = curve.random_scalar(rng);
        let point = curve.mul_g(&share);
        let proof = schnorr_prove(curve, &share, &point, rng);
        let salt = fresh_salt(rng);
        let commitment = reveal_commitment(curve, &point, &proof, &salt);
        (
            KeygenGateway {
                curve: curve.clone(),
                share,
                point,
                proof,
                salt,
                state: GatewayState::AwaitCommit,
                result: None,
            },
            RoundMessage::KeygenCommit { commitment },
        )
    }

    pub fn handle(&mut self, msg: &RoundMessage) -> Result<Option<RoundMessage>, ThresholdError> {
        match (&self.state, msg) {
            (GatewayState::AwaitCommit, RoundMessage::KeygenCommit { commitment }) => {
                self.state = GatewayState::AwaitReveal {
                    device_commitment: *commitment,
                };
                Ok(Some(RoundMessage::KeygenReveal {
                    point: self.point.clone(),
                    proof: self.proof.clone(),
                    salt: self.salt,
                }))
            }
            (
                GatewayState::AwaitReveal { device_commitment },
                RoundMessage::KeygenRevealDevice {
                    point,
                    proof,
                    salt,
                    he_modulus,
                    enc_share,
                },
            ) => {
                let expect = reveal_commitment(&self.curve, point, proof, salt);
                if &expect != device_commitment {
                    self.state = GatewayState::Failed;
                    return Err(ThresholdError::CommitmentMismatch);
                }
                if !schnorr_verify(&self.curve, point, proof) {
                    self.state = GatewayState::Failed;
                    return Err(ThresholdError::BadProof);
                }
                let joint = self.curve.mul(point, &self.share);
                let he_public = crate::crypto::HePublicKey::from_modulus(he_modulus.clone());
                let share = KeyShare::new(
                    Party::Gateway,
                    self.share.clone(),
                    joint.clone(),
                    chain_code_for(&self.curve, &joint),
                    Some(EncryptedShare {
                        ciphertext: enc_share.clone(),
                        he_public,
                    }),
                    None,
                );
                self.result = Some(share);
                self.state = GatewayState::AwaitAck;
                Ok(Some(RoundMessage::KeygenFinish { joint_point: joint }))
            }
            (GatewayState::AwaitAck, RoundMessage::KeygenFinishAck { joint_point }) => {
                let ours = &self.result.as_ref().expect("set before AwaitAck").joint_public_key;
                if joint_point != ours {
                    self.state = GatewayState::Failed;
                    return Err(ThresholdError::SessionMismatch);
                }
                self.state = GatewayState::Done;
                Ok(None)
            }
            _ => {
                self.state = GatewayState::Failed;
                Err(ThresholdError::OutOfPhase)
            }
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, GatewayState::Done)
    }

    pub fn finish(self) -> Option<KeyShare> {
        if matches!(self.state, GatewayState::Done) {
            self.result
        } else {
            None
        }
    }
}

enum DeviceState {
    AwaitGatewayCommit,
    AwaitGatewayReveal { gateway_commitment: [u8; 32] },
    AwaitFinish,
    Done,
    Failed,
}

/// Device half of keygen: holds the Paillier keypair and publishes the
/// encryption of its factor in its reveal.
pub struct KeygenDevice {
    curve: CurveParams,
    share: Scalar,
    point: GroupPoint,
    proof: SchnorrProof,
    salt: [u8; 32],
    he_keys: crate::crypto::HomomorphicKeyPair,
    enc_share: crate::crypto::Ciphertext,
    state: DeviceState,
    result: Option<KeyShare>,
}

impl KeygenDevice {
    pub fn new<R: RngCore + ?Sized>(curve: &CurveParams, rng: &mut R) -> Self {
        let share = curve.random_scalar(rng);
        let point = curve.mul_g(&share);
        let proof = schnorr_prove(curve, &share, &point, rng);
        let salt = fresh_salt(rng);
        let he_keys = he_keygen(required_modulus_bits(curve), rng);
        let enc_share = he_keys.public().encrypt(share.value(), rng);
        KeygenDevice {
            curve: curve.clone(),
            share,
            point,
            proof,
            salt,
            he_keys,
            enc_share,
            state: DeviceState::AwaitGatewayCommit,
            result: None,
        }
    }

    pub fn handle(&mut self, msg: &RoundMessage) -> Result<Option<RoundMessage>, ThresholdError> {
        match (&self.state, msg) {
            (DeviceState::AwaitGatewayCommit, RoundMessage::KeygenCommit { commitment }) => {
                self.state = DeviceState::AwaitGatewayReveal {
                    gateway_commitment: *commitment,
                };
                Ok(Some(RoundMessage::KeygenCommit {
                    commitment: reveal_commitment(&self.curve, &self.point, &self.proof, &self.salt),
                }))
            }
            (
                DeviceState::AwaitGatewayReveal { gateway_commitment },
                RoundMessage::KeygenReveal { point, proof, salt },
            ) => {
                let expect = reveal_commitment(&self.curve, point, proof, salt);
                if &expect != gateway_commitment {
                    self.state = DeviceState::Failed;
                    return Err(ThresholdError::CommitmentMismatch);
                }
                if !schnorr_verify(&self.curve, point, proof) {
                    self.state = DeviceState::Failed;
                    return Err(ThresholdError::BadProof);
                }
                let joint = self.curve.mul(point, &self.share);
                let share = KeyShare::new(
                    Party::Device,
                    self.share.clone(),
                    joint.clone(),
                    chain_code_for(&self.curve, &joint),
                    None,
                    Some(self.he_keys.clone()),
                );
                self.result = Some(share);
                self.state = DeviceState::AwaitFinish;
                Ok(Some(RoundMessage::KeygenRevealDevice {
                    point: self.point.clone(),
                    proof: self.proof.clone(),
                    salt: self.salt,
                    he_modulus: self.he_keys.public().modulus().clone(),
                    enc_share: self.enc_share.clone(),
                }))
            }
            (DeviceState::AwaitFinish, RoundMessage::KeygenFinish { joint_point }) => {
                let ours = &self.result.as_ref().expect("set before AwaitFinish").joint_public_key;
                if joint_point != ours {
                    self.state = DeviceState::Failed;
                    return Err(ThresholdError::SessionMismatch);
                }
                self.state = DeviceState::Done;
                Ok(Some(RoundMessage::KeygenFinishAck {
                    joint_point: joint_point.clone(),
                }))
            }
            _ => {
                self.state = DeviceState::Failed;
                Err(ThresholdError::OutOfPhase)
            }
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, DeviceState::Done)
    }

    pub fn finish(self) -> Option<KeyShare> {
        if matches!(self.state, DeviceState::Done) {
            self.result
        } else {
            None
        }
    }
}

/// Runs the whole keygen locally, pumping messages between the two
/// halves, and returns both shares.
pub fn tkeygen<Rd, Rg>(
    curve: &CurveParams,
    rng_device: &mut Rd,
    rng_gateway: &mut Rg,
) -> Result<ThresholdKeyPair, ThresholdError>
where
    Rd: RngCore + ?Sized,
    Rg: RngCore + ?Sized,
{
    let (mut gateway, first) = KeygenGateway::new(curve, rng_gateway);
    let mut device = KeygenDevice::new(curve, rng_device);

    let mut to_device = Some(first);
    loop {
        let Some(msg) = to_device.take() else { break };
        let reply = device.handle(&msg)?;
        let Some(msg) = reply else { break };
        to_device = gateway.handle(&msg)?;
    }
    if !device.is_done() || !gateway.is_done() {
        return Err(ThresholdError::OutOfPhase);
    }
    let device = device.finish().expect("done");
    let gateway = gateway.finish().expect("done");
    let joint_public_key = device.joint_public_key.clone();
    Ok(ThresholdKeyPair {
        device,
        gateway,
        joint_public_key,
    })
}

