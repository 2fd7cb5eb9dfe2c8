//! The constrained endpoint. It issues sealed control commands, runs
//! its half of keygen, signing, derivation, and reveals, and signs the
//! funding transaction after checking the template spends its coin the
//! way it asked. It holds no channel state beyond its key material:
//! balances, commitments, and peers live on the gateway side.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    frame, ControlBody, DeviceLinkMsg, NodeId, OutMsg, ProtocolError, Role, TraceEvent,
};
use crate::channel::{sweep_template, TxTemplate};
use crate::crypto::{ecdsa_sign, CurveParams, EcdsaSignature, GroupPoint, Scalar};
use crate::ledger::{OutPoint, Satoshi, SpendConditions, Transaction, Witness};
use crate::threshold::{
    derive_tweak, DeviceSigner, KeyShare, KeygenDevice, RoundMessage, SignerStep,
};

pub struct DeviceMachine {
    curve: CurveParams,
    rng: ChaCha20Rng,
    frame_key: [u8; 32],
    send_seq: u64,
    recv_seq: u64,
    onchain_secret: Scalar,
    onchain_key: GroupPoint,
    keygen: Option<KeygenDevice>,
    share: Option<KeyShare>,
    signer: Option<DeviceSigner>,
    requested_capacity: Option<Satoshi>,
    /// The funding fee the device will co-sign; anything else is
    /// refused as out of policy.
    open_fee_policy: Satoshi,
    /// When false the device refuses every threshold round, modelling a
    /// device that walked away mid-protocol.
    pub cooperative: bool,
    /// When false the device drops all traffic without answering.
    pub online: bool,
}

impl DeviceMachine {
    pub fn new(
        curve: CurveParams,
        seed: u64,
        frame_key: [u8; 32],
        onchain_secret: Scalar,
    ) -> DeviceMachine {
        let onchain_key = curve.mul_g(&onchain_secret);
        DeviceMachine {
            curve,
            rng: ChaCha20Rng::seed_from_u64(seed),
            frame_key,
            send_seq: 0,
            recv_seq: 0,
            onchain_secret,
            onchain_key,
            keygen: None,
            share: None,
            signer: None,
            requested_capacity: None,
            open_fee_policy: crate::channel::DEFAULT_OPEN_FEE,
            cooperative: true,
            online: true,
        }
    }

    pub fn onchain_key(&self) -> &GroupPoint {
        &self.onchain_key
    }

    pub fn set_open_fee_policy(&mut self, fee: Satoshi) {
        self.open_fee_policy = fee;
    }

    pub fn joint_key(&self) -> Option<&GroupPoint> {
        self.share.as_ref().map(|s| &s.joint_public_key)
    }

    /// Drops any half-finished session state. The caller invokes this
    /// when a flow dies so a later flow starts clean.
    pub fn abort(&mut self) {
        self.signer = None;
        self.keygen = None;
    }

    /// Discards the negotiated key so a fresh open can run a new keygen.
    /// Only safe while no funding transaction anchors the old key.
    pub fn forget_key(&mut self) {
        self.abort();
        self.share = None;
    }

    /// Signs a sweep of an on-chain output locked to the device wallet
    /// key, paying `destination` after `fee`. Used to collect the
    /// device balance once a channel has hit the chain.
    pub fn claim_output(
        &mut self,
        outpoint: OutPoint,
        value: Satoshi,
        fee: Satoshi,
        destination: &GroupPoint,
    ) -> Result<Transaction, ProtocolError> {
        let template = sweep_template(outpoint, value, fee, destination, 4_000_000);
        let digest = template.sighash(&self.curve);
        let sig = self.sign_plain(&digest)?;
        Ok(template.into_transaction(vec![Witness::Key(sig)]))
    }

    fn control(&mut self, body: ControlBody) -> Vec<OutMsg> {
        let sealed = frame::seal_frame(&self.frame_key, self.send_seq, &body);
        self.send_seq += 1;
        vec![
            OutMsg::Event(TraceEvent::Control {
                from: Role::Device,
                to: Role::Gateway,
                kind: body.kind(),
                bytes: frame::CONTROL_FRAME_LEN,
            }),
            OutMsg::ToGateway(DeviceLinkMsg::Frame(sealed)),
        ]
    }

    pub fn request_open(&mut self, capacity: Satoshi, bridge_node_id: NodeId) -> Vec<OutMsg> {
        self.requested_capacity = Some(capacity);
        self.control(ControlBody::OpenChannelRequest {
            capacity,
            bridge_node_id,
        })
    }

    pub fn request_send(&mut self, amount: Satoshi, destination_node_id: NodeId) -> Vec<OutMsg> {
        self.control(ControlBody::SendPayment {
            amount,
            destination_node_id,
        })
    }

    pub fn request_close(&mut self) -> Vec<OutMsg> {
        self.control(ControlBody::ChannelClosingRequest)
    }

    fn send_round(&self, msg: RoundMessage, out: &mut Vec<OutMsg>) -> Result<(), ProtocolError> {
        let bytes = msg.encode(&self.curve)?.len();
        out.push(OutMsg::Event(TraceEvent::Link {
            from: Role::Device,
            to: Role::Gateway,
            kind: super::round_kind(&msg),
            bytes,
        }));
        out.push(OutMsg::ToGateway(DeviceLinkMsg::Round(msg)));
        Ok(())
    }

    pub fn on_link(&mut self, msg: DeviceLinkMsg) -> Result<Vec<OutMsg>, ProtocolError> {
        if !self.online {
            return Ok(Vec::new());
        }
        match msg {
            DeviceLinkMsg::Frame(f) => {
                let body = frame::open_frame(&self.frame_key, self.recv_seq, &f)?;
                self.recv_seq += 1;
                // The gateway's frames either report a finished payment
                // or announce a close it is starting; neither needs a
                // device reply, consent is expressed by co-signing.
                let _ = body;
                Ok(Vec::new())
            }
            DeviceLinkMsg::Round(m) => self.on_round(m),
            DeviceLinkMsg::FundingSignRequest { template } => self.sign_funding(&template),
            DeviceLinkMsg::FundingSignature { .. } => Err(ProtocolError::UnexpectedMessage {
                role: Role::Device,
                kind: "funding_signature",
            }),
        }
    }

    fn on_round(&mut self, msg: RoundMessage) -> Result<Vec<OutMsg>, ProtocolError> {
        if !self.cooperative {
            return Err(ProtocolError::ThresholdRefused);
        }
        let mut out = Vec::new();
        match &msg {
            RoundMessage::KeygenCommit { .. }
            | RoundMessage::KeygenReveal { .. }
            | RoundMessage::KeygenFinish { .. } => {
                if self.keygen.is_none() {
                    if self.share.is_some() {
                        return Err(ProtocolError::Refused("key already established"));
                    }
                    self.keygen = Some(KeygenDevice::new(&self.curve, &mut self.rng));
                }
                let reply = self.keygen.as_mut().expect("created above").handle(&msg)?;
                if let Some(reply) = reply {
                    self.send_round(reply, &mut out)?;
                }
                if self.keygen.as_ref().map(|k| k.is_done()).unwrap_or(false) {
                    self.share = self.keygen.take().and_then(|k| k.finish());
                }
            }
            RoundMessage::SignInit { session_id, .. } => {
                let share = self
                    .share
                    .as_ref()
                    .ok_or(ProtocolError::Refused("no key established"))?;
                let mut signer = DeviceSigner::new(&self.curve, share, *session_id, &mut self.rng)?;
                if let SignerStep::Send(reply) = signer.handle(&msg)? {
                    self.send_round(reply, &mut out)?;
                }
                self.signer = Some(signer);
            }
            RoundMessage::SignNonceCommit { .. }
            | RoundMessage::SignNonceReveal { .. }
            | RoundMessage::SignNonceRevealDevice { .. }
            | RoundMessage::SignCiphertext { .. }
            | RoundMessage::SignComplete { .. } => {
                let step = self
                    .signer
                    .as_mut()
                    .ok_or(ProtocolError::UnexpectedMessage {
                        role: Role::Device,
                        kind: "sign round",
                    })?
                    .handle(&msg)?;
                let mut finished = false;
                if let SignerStep::Send(reply) = step {
                    finished = matches!(reply, RoundMessage::SignComplete { .. });
                    self.send_round(reply, &mut out)?;
                }
                if finished {
                    self.signer = None;
                }
            }
            RoundMessage::SignAbort { .. } => {
                self.signer = None;
            }
            RoundMessage::DeriveRequest { index } => {
                let share = self
                    .share
                    .as_ref()
                    .ok_or(ProtocolError::Refused("no key established"))?;
                let child = share.child(&self.curve, *index);
                self.send_round(
                    RoundMessage::DeriveConfirm {
                        index: *index,
                        child_point: child.joint_public_key.clone(),
                    },
                    &mut out,
                )?;
            }
            RoundMessage::RevealRequest { index } => {
                let share = self
                    .share
                    .as_ref()
                    .ok_or(ProtocolError::Refused("no key established"))?;
                let tweak = derive_tweak(
                    &self.curve,
                    &share.joint_public_key,
                    &share.chain_code,
                    *index,
                );
                let partial = self.curve.scalar_mul(&tweak, share.share());
                self.send_round(
                    RoundMessage::RevealContribution {
                        index: *index,
                        partial,
                    },
                    &mut out,
                )?;
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Device,
                    kind: "round message",
                })
            }
        }
        Ok(out)
    }

    /// Checks that the funding template spends into a two-key anchor on
    /// the device's joint key at the requested capacity, pays any
    /// change back to the device, and charges no more than the standard
    /// opening fee; only then does the device release its signature.
    fn sign_funding(&mut self, template: &TxTemplate) -> Result<Vec<OutMsg>, ProtocolError> {
        let capacity = self
            .requested_capacity
            .ok_or(ProtocolError::Refused("no open requested"))?;
        let joint = self
            .share
            .as_ref()
            .map(|s| s.joint_public_key.clone())
            .ok_or(ProtocolError::Refused("no key established"))?;

        let anchor = template
            .outputs
            .first()
            .ok_or(ProtocolError::Refused("funding has no outputs"))?;
        let anchor_ok = anchor.value == capacity
            && matches!(
                &anchor.conditions,
                SpendConditions::Multisig2of2(a, _) if *a == joint
            );
        if !anchor_ok {
            return Err(ProtocolError::Refused("funding anchor mismatch"));
        }
        for extra in &template.outputs[1..] {
            if extra.conditions != SpendConditions::PayToKey(self.onchain_key.clone()) {
                return Err(ProtocolError::Refused("funding change misdirected"));
            }
        }
        if template.fee != self.open_fee_policy {
            return Err(ProtocolError::Refused("funding fee out of policy"));
        }

        let digest = template.sighash(&self.curve);
        let signature = self.sign_plain(&digest)?;
        Ok(vec![
            OutMsg::Event(TraceEvent::Link {
                from: Role::Device,
                to: Role::Gateway,
                kind: "funding_signature",
                bytes: 2 + 2 * self.curve.field_bytes(),
            }),
            OutMsg::ToGateway(DeviceLinkMsg::FundingSignature { signature }),
        ])
    }

    fn sign_plain(
        &mut self,
        digest: &crate::crypto::MessageDigest,
    ) -> Result<EcdsaSignature, ProtocolError> {
        for _ in 0..64 {
            let k = self.curve.random_scalar(&mut self.rng);
            if let Ok(sig) = ecdsa_sign(&self.curve, &self.onchain_secret, digest, &k) {
                return Ok(sig);
            }
        }
        Err(ProtocolError::Malformed("could not produce a signature"))
    }
}
