//! Two-party signing. Commit/reveal fixes a joint nonce R = k_d*k_g*G,
//! then the gateway homomorphically evaluates its half of s over the
//! device's encrypted key factor, blinded with a random multiple of the
//! group order, and the device decrypts, folds in its own nonce inverse,
//! and normalizes. Both sides verify the result under the joint key
//! before accepting it.

use num_bigint::RandBigInt;
use rand::RngCore;

use crate::crypto::{
    ecdsa_verify, sha256_parts, CurveParams, EcdsaSignature, GroupPoint, MessageDigest, Scalar,
};

use super::messages::{AbortCode, RoundMessage};
use super::{KeyShare, Party, ThresholdError};

/// Phases of a signing session, as visible in transcripts.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SignPhase {
    Pending,
    NonceCommit,
    NonceReveal,
    Ciphertext,
    Complete,
    Aborted,
}

/// A signing session record: identity, digest, phase, and the ordered
/// message transcript (across retries, when a zero r or s forces one).
#[derive(Clone, Debug)]
pub struct SigningSession {
    pub id: u64,
    pub digest: MessageDigest,
    pub phase: SignPhase,
    pub transcript: Vec<RoundMessage>,
}

impl SigningSession {
    pub fn new(id: u64, digest: MessageDigest) -> SigningSession {
        SigningSession {
            id,
            digest,
            phase: SignPhase::Pending,
            transcript: Vec::new(),
        }
    }
}

/// What a signer wants after consuming a message.
#[derive(Clone, Debug, PartialEq)]
pub enum SignerStep {
    /// Pass this message to the counterparty.
    Send(RoundMessage),
    /// Terminal; nothing further to send.
    Done,
}

/// Result of a completed local signing drive, with both nonces exposed
/// so harnesses can replay the single-signer oracle.
#[derive(Clone, Debug)]
pub struct SignOutcome {
    pub signature: EcdsaSignature,
    pub device_nonce: Scalar,
    pub gateway_nonce: Scalar,
}

fn commit_to_nonce(curve: &CurveParams, point: &GroupPoint, salt: &[u8; 32]) -> [u8; 32] {
    let pb = curve.point_encode(point).unwrap_or_default();
    *sha256_parts("sign-nonce-commit", &[&pb, salt]).as_bytes()
}

fn fresh_salt<R: RngCore + ?Sized>(rng: &mut R) -> [u8; 32] {
    let mut salt = [0u8; 32];
    rng.fill_bytes(&mut salt);
    salt
}

enum GwState {
    AwaitNonceCommit,
    AwaitDeviceReveal { device_commitment: [u8; 32] },
    AwaitComplete { r: Scalar },
    Complete,
    Aborted,
}

/// Gateway (non-decrypting) half of a signing session.
pub struct GatewaySigner {
    curve: CurveParams,
    session_id: u64,
    digest: MessageDigest,
    share: Scalar,
    c_key: crate::crypto::Ciphertext,
    he_public: crate::crypto::HePublicKey,
    joint: GroupPoint,
    nonce: Scalar,
    nonce_point: GroupPoint,
    salt: [u8; 32],
    state: GwState,
    signature: Option<EcdsaSignature>,
    abort: Option<AbortCode>,
}

impl GatewaySigner {
    /// Builds the gateway half and the opening `SignInit` message.
    pub fn start<R: RngCore + ?Sized>(
        curve: &CurveParams,
        share: &KeyShare,
        session_id: u64,
        digest: MessageDigest,
        rng: &mut R,
    ) -> Result<(Self, RoundMessage), ThresholdError> {
        if share.role != Party::Gateway {
            return Err(ThresholdError::PartyAbsent(Party::Gateway));
        }
        let enc = share
            .enc_counterparty_share
            .as_ref()
            .ok_or(ThresholdError::PartyAbsent(Party::Device))?;
        let nonce = curve.random_scalar(rng);
        let nonce_point = curve.mul_g(&nonce);
        let salt = fresh_salt(rng);
        let commitment = commit_to_nonce(curve, &nonce_point, &salt);
        Ok((
            GatewaySigner {
                curve: curve.clone(),
                session_id,
                digest,
                share: share.share().clone(),
                c_key: enc.ciphertext.clone(),
                he_public: enc.he_public.clone(),
                joint: share.joint_public_key.clone(),
                nonce,
                nonce_point,
                salt,
                state: GwState::AwaitNonceCommit,
                signature: None,
                abort: None,
            },
            RoundMessage::SignInit {
                session_id,
                digest: *digest.as_bytes(),
                nonce_commitment: commitment,
            },
        ))
    }

    pub fn phase(&self) -> SignPhase {
        match self.state {
            GwState::AwaitNonceCommit => SignPhase::NonceCommit,
            GwState::AwaitDeviceReveal { .. } => SignPhase::NonceReveal,
            GwState::AwaitComplete { .. } => SignPhase::Ciphertext,
            GwState::Complete => SignPhase::Complete,
            GwState::Aborted => SignPhase::Aborted,
        }
    }

    pub fn signature(&self) -> Option<&EcdsaSignature> {
        self.signature.as_ref()
    }

    pub fn digest(&self) -> &MessageDigest {
        &self.digest
    }

    pub fn abort_code(&self) -> Option<AbortCode> {
        self.abort
    }

    /// Nonce introspection for oracle cross-checks.
    pub fn nonce(&self) -> &Scalar {
        &self.nonce
    }

    pub fn handle<R: RngCore + ?Sized>(
        &mut self,
        msg: &RoundMessage,
        rng: &mut R,
    ) -> Result<SignerStep, ThresholdError> {
        match msg {
            RoundMessage::SignAbort { session_id, code } => {
                self.check_session(*session_id)?;
                self.state = GwState::Aborted;
                self.abort = Some(*code);
                return Ok(SignerStep::Done);
            }
            _ => {}
        }
        match (&self.state, msg) {
            (
                GwState::AwaitNonceCommit,
                RoundMessage::SignNonceCommit {
                    session_id,
                    nonce_commitment,
                },
            ) => {
                self.check_session(*session_id)?;
                self.state = GwState::AwaitDeviceReveal {
                    device_commitment: *nonce_commitment,
                };
                Ok(SignerStep::Send(RoundMessage::SignNonceReveal {
                    session_id: self.session_id,
                    point: self.nonce_point.clone(),
                    salt: self.salt,
                }))
            }
            (
                GwState::AwaitDeviceReveal { device_commitment },
                RoundMessage::SignNonceRevealDevice {
                    session_id,
                    point,
                    salt,
                },
            ) => {
                self.check_session(*session_id)?;
                if commit_to_nonce(&self.curve, point, salt) != *device_commitment {
                    self.state = GwState::Aborted;
                    return Err(ThresholdError::CommitmentMismatch);
                }
                let joint_nonce = self.curve.mul(point, &self.nonce);
                let Some(rx) = joint_nonce.x().cloned() else {
                    self.state = GwState::Aborted;
                    self.abort = Some(AbortCode::ZeroR);
                    return Ok(SignerStep::Send(self.abort_msg(AbortCode::ZeroR)));
                };
                let r = self.curve.scalar(rx);
                if r.is_zero() {
                    self.state = GwState::Aborted;
                    self.abort = Some(AbortCode::ZeroR);
                    return Ok(SignerStep::Send(self.abort_msg(AbortCode::ZeroR)));
                }
                // c = Enc(k_g^-1 h + rho n) (+) c_key (*) (k_g^-1 r x_g):
                // the plaintext the device recovers is k_g^-1 (h + r x)
                // plus a multiple of n that reduction removes.
                let h = self
                    .curve
                    .scalar_from_bytes_reduced(self.digest.as_bytes());
                let k_inv = self.curve.scalar_inv(&self.nonce)?;
                let t1 = self.curve.scalar_mul(&k_inv, &h);
                let t2 = self
                    .curve
                    .scalar_mul(&k_inv, &self.curve.scalar_mul(&r, &self.share));
                let rho = rng.gen_biguint_below(&self.curve.n);
                let blinded = t1.value() + rho * &self.curve.n;
                let c1 = self.he_public.encrypt(&blinded, rng);
                let c2 = self.he_public.he_scalar_mul(&self.c_key, t2.value());
                let ciphertext = self.he_public.he_add(&c1, &c2);
                self.state = GwState::AwaitComplete { r };
                Ok(SignerStep::Send(RoundMessage::SignCiphertext {
                    session_id: self.session_id,
                    ciphertext,
                }))
            }
            (
                GwState::AwaitComplete { r },
                RoundMessage::SignComplete {
                    session_id,
                    signature,
                },
            ) => {
                self.check_session(*session_id)?;
                if &signature.r != r
                    || !ecdsa_verify(&self.curve, &self.joint, &self.digest, signature)
                {
                    self.state = GwState::Aborted;
                    return Err(ThresholdError::BadSignature);
                }
                self.signature = Some(signature.clone());
                self.state = GwState::Complete;
                Ok(SignerStep::Done)
            }
            _ => {
                self.state = GwState::Aborted;
                Err(ThresholdError::OutOfPhase)
            }
        }
    }

    fn abort_msg(&self, code: AbortCode) -> RoundMessage {
        RoundMessage::SignAbort {
            session_id: self.session_id,
            code,
        }
    }

    fn check_session(&self, id: u64) -> Result<(), ThresholdError> {
        if id == self.session_id {
            Ok(())
        } else {
            Err(ThresholdError::SessionMismatch)
        }
    }
}

enum DevState {
    AwaitInit,
    AwaitGatewayReveal { gateway_commitment: [u8; 32] },
    AwaitCiphertext { r: Scalar },
    Complete,
    Aborted,
}

/// Device (decrypting) half of a signing session.
pub struct DeviceSigner {
    curve: CurveParams,
    session_id: u64,
    digest: Option<MessageDigest>,
    he_keys: crate::crypto::HomomorphicKeyPair,
    joint: GroupPoint,
    nonce: Scalar,
    nonce_point: GroupPoint,
    salt: [u8; 32],
    state: DevState,
    signature: Option<EcdsaSignature>,
    abort: Option<AbortCode>,
}

impl DeviceSigner {
    pub fn new<R: RngCore + ?Sized>(
        curve: &CurveParams,
        share: &KeyShare,
        session_id: u64,
        rng: &mut R,
    ) -> Result<Self, ThresholdError> {
        if share.role != Party::Device {
            return Err(ThresholdError::PartyAbsent(Party::Device));
        }
        let he_keys = share
            .he_keys
            .clone()
            .ok_or(ThresholdError::PartyAbsent(Party::Device))?;
        let nonce = curve.random_scalar(rng);
        let nonce_point = curve.mul_g(&nonce);
        Ok(DeviceSigner {
            curve: curve.clone(),
            session_id,
            digest: None,
            he_keys,
            joint: share.joint_public_key.clone(),
            nonce,
            nonce_point,
            salt: fresh_salt(rng),
            state: DevState::AwaitInit,
            signature: None,
            abort: None,
        })
    }

    pub fn phase(&self) -> SignPhase {
        match self.state {
            DevState::AwaitInit => SignPhase::Pending,
            DevState::AwaitGatewayReveal { .. } => SignPhase::NonceCommit,
            DevState::AwaitCiphertext { .. } => SignPhase::NonceReveal,
            DevState::Complete => SignPhase::Complete,
            DevState::Aborted => SignPhase::Aborted,
        }
    }

    pub fn signature(&self) -> Option<&EcdsaSignature> {
        self.signature.as_ref()
    }

    pub fn abort_code(&self) -> Option<AbortCode> {
        self.abort
    }

    pub fn nonce(&self) -> &Scalar {
        &self.nonce
    }

    /// The digest this session is signing, once `SignInit` has arrived.
    pub fn digest(&self) -> Option<&MessageDigest> {
        self.digest.as_ref()
    }

    pub fn handle(&mut self, msg: &RoundMessage) -> Result<SignerStep, ThresholdError> {
        if let RoundMessage::SignAbort { session_id, code } = msg {
            self.check_session(*session_id)?;
            self.state = DevState::Aborted;
            self.abort = Some(*code);
            return Ok(SignerStep::Done);
        }
        match (&self.state, msg) {
            (
                DevState::AwaitInit,
                RoundMessage::SignInit {
                    session_id,
                    digest,
                    nonce_commitment,
                },
            ) => {
                self.check_session(*session_id)?;
                self.digest = Some(MessageDigest(*digest));
                self.state = DevState::AwaitGatewayReveal {
                    gateway_commitment: *nonce_commitment,
                };
                Ok(SignerStep::Send(RoundMessage::SignNonceCommit {
                    session_id: self.session_id,
                    nonce_commitment: commit_to_nonce(&self.curve, &self.nonce_point, &self.salt),
                }))
            }
            (
                DevState::AwaitGatewayReveal { gateway_commitment },
                RoundMessage::SignNonceReveal {
                    session_id,
                    point,
                    salt,
                },
            ) => {
                self.check_session(*session_id)?;
                if commit_to_nonce(&self.curve, point, salt) != *gateway_commitment {
                    self.state = DevState::Aborted;
                    return Err(ThresholdError::CommitmentMismatch);
                }
                let joint_nonce = self.curve.mul(point, &self.nonce);
                let Some(rx) = joint_nonce.x().cloned() else {
                    self.state = DevState::Aborted;
                    self.abort = Some(AbortCode::ZeroR);
                    return Ok(SignerStep::Send(self.abort_msg(AbortCode::ZeroR)));
                };
                let r = self.curve.scalar(rx);
                if r.is_zero() {
                    self.state = DevState::Aborted;
                    self.abort = Some(AbortCode::ZeroR);
                    return Ok(SignerStep::Send(self.abort_msg(AbortCode::ZeroR)));
                }
                self.state = DevState::AwaitCiphertext { r };
                Ok(SignerStep::Send(RoundMessage::SignNonceRevealDevice {
                    session_id: self.session_id,
                    point: self.nonce_point.clone(),
                    salt: self.salt,
                }))
            }
            (
                DevState::AwaitCiphertext { r },
                RoundMessage::SignCiphertext {
                    session_id,
                    ciphertext,
                },
            ) => {
                self.check_session(*session_id)?;
                let r = r.clone();
                let plain = match self.he_keys.decrypt(ciphertext) {
                    Ok(v) => v,
                    Err(_) => {
                        self.state = DevState::Aborted;
                        self.abort = Some(AbortCode::BadSignature);
                        return Ok(SignerStep::Send(self.abort_msg(AbortCode::BadSignature)));
                    }
                };
                let partial = self.curve.scalar(plain);
                let k_inv = self.curve.scalar_inv(&self.nonce)?;
                let s_raw = self.curve.scalar_mul(&k_inv, &partial);
                if s_raw.is_zero() {
                    self.state = DevState::Aborted;
                    self.abort = Some(AbortCode::ZeroS);
                    return Ok(SignerStep::Send(self.abort_msg(AbortCode::ZeroS)));
                }
                let signature = EcdsaSignature {
                    r,
                    s: crate::crypto::normalize_low_s(&self.curve, &s_raw),
                };
                let digest = self.digest.expect("digest set at init");
                if !ecdsa_verify(&self.curve, &self.joint, &digest, &signature) {
                    self.state = DevState::Aborted;
                    self.abort = Some(AbortCode::BadSignature);
                    return Ok(SignerStep::Send(self.abort_msg(AbortCode::BadSignature)));
                }
                self.signature = Some(signature.clone());
                self.state = DevState::Complete;
                Ok(SignerStep::Send(RoundMessage::SignComplete {
                    session_id: self.session_id,
                    signature,
                }))
            }
            _ => {
                self.state = DevState::Aborted;
                Err(ThresholdError::OutOfPhase)
            }
        }
    }

    fn abort_msg(&self, code: AbortCode) -> RoundMessage {
        RoundMessage::SignAbort {
            session_id: self.session_id,
            code,
        }
    }

    fn check_session(&self, id: u64) -> Result<(), ThresholdError> {
        if id == self.session_id {
            Ok(())
        } else {
            Err(ThresholdError::SessionMismatch)
        }
    }
}

const MAX_NONCE_RETRIES: u32 = 64;

/// Drives a full signing session locally. Either share may be absent,
/// in which case the session aborts and no signature exists; a zero r
/// or s retries with fresh nonces, appending to the same transcript.
pub fn tsign<Rd, Rg>(
    curve: &CurveParams,
    session: &mut SigningSession,
    device: Option<&KeyShare>,
    gateway: Option<&KeyShare>,
    rng_device: &mut Rd,
    rng_gateway: &mut Rg,
) -> Result<SignOutcome, ThresholdError>
where
    Rd: RngCore + ?Sized,
    Rg: RngCore + ?Sized,
{
    let Some(device) = device else {
        session.phase = SignPhase::Aborted;
        return Err(ThresholdError::PartyAbsent(Party::Device));
    };
    let Some(gateway) = gateway else {
        session.phase = SignPhase::Aborted;
        return Err(ThresholdError::PartyAbsent(Party::Gateway));
    };

    for _ in 0..MAX_NONCE_RETRIES {
        let (mut gw, init) =
            GatewaySigner::start(curve, gateway, session.id, session.digest, rng_gateway)?;
        let mut dev = DeviceSigner::new(curve, device, session.id, rng_device)?;

        session.phase = SignPhase::NonceCommit;
        session.transcript.push(init.clone());
        let mut to_device = Some(init);
        let mut to_gateway: Option<RoundMessage> = None;
        loop {
            if let Some(msg) = to_device.take() {
                match dev.handle(&msg) {
                    Ok(SignerStep::Send(reply)) => {
                        session.transcript.push(reply.clone());
                        to_gateway = Some(reply);
                    }
                    Ok(SignerStep::Done) => {}
                    Err(e) => {
                        session.phase = SignPhase::Aborted;
                        return Err(e);
                    }
                }
            }
            if let Some(msg) = to_gateway.take() {
                session.phase = phase_after(&msg, session.phase);
                match gw.handle(&msg, rng_gateway) {
                    Ok(SignerStep::Send(reply)) => {
                        session.phase = phase_after(&reply, session.phase);
                        session.transcript.push(reply.clone());
                        to_device = Some(reply);
                    }
                    Ok(SignerStep::Done) => {}
                    Err(e) => {
                        session.phase = SignPhase::Aborted;
                        return Err(e);
                    }
                }
            }
            if to_device.is_none() && to_gateway.is_none() {
                break;
            }
        }

        match (gw.phase(), dev.phase()) {
            (SignPhase::Complete, SignPhase::Complete) => {
                session.phase = SignPhase::Complete;
                let signature = gw.signature().expect("complete").clone();
                return Ok(SignOutcome {
                    signature,
                    device_nonce: dev.nonce().clone(),
                    gateway_nonce: gw.nonce().clone(),
                });
            }
            (SignPhase::Aborted, _) | (_, SignPhase::Aborted) => {
                let code = gw.abort_code().or(dev.abort_code());
                match code {
                    Some(AbortCode::ZeroR) | Some(AbortCode::ZeroS) => continue,
                    Some(AbortCode::BadSignature) => {
                        session.phase = SignPhase::Aborted;
                        return Err(ThresholdError::BadSignature);
                    }
                    None => {
                        session.phase = SignPhase::Aborted;
                        return Err(ThresholdError::OutOfPhase);
                    }
                }
            }
            _ => {
                session.phase = SignPhase::Aborted;
                return Err(ThresholdError::OutOfPhase);
            }
        }
    }
    session.phase = SignPhase::Aborted;
    Err(ThresholdError::RetryExhausted)
}

fn phase_after(msg: &RoundMessage, current: SignPhase) -> SignPhase {
    match msg {
        RoundMessage::SignNonceCommit { .. } => SignPhase::NonceCommit,
        RoundMessage::SignNonceReveal { .. } | RoundMessage::SignNonceRevealDevice { .. } => {
            SignPhase::NonceReveal
        }
        RoundMessage::SignCiphertext { .. } => SignPhase::Ciphertext,
        RoundMessage::SignComplete { .. } => SignPhase::Complete,
        RoundMessage::SignAbort { .. } => SignPhase::Aborted,
        _ => current,
    }
}
