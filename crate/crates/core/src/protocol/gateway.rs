//! The gateway: the only party that sees both links. It relays the
//! device's commands into peer-protocol flows, runs its half of every
//! threshold operation, keeps the channel state the device cannot
//! afford to hold, and watches the chain so a stale broadcast by the
//! bridge gets punished while the window is open.
//!
//! Commitment points follow a one-ahead schedule: every revoke_and_ack
//! the gateway sends announces the point for the state after the one it
//! just reached, so the bridge can always sign the next joint
//! commitment without waiting on a derivation. States 0 and 1 share the
//! base point announced during funding; from state 2 on, each state has
//! its own freshly derived point.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    frame, wire, ChainAction, ChainEvent, ChannelId, ControlBody, DeviceLinkMsg, Envelope,
    FlowOutcome, InvoiceRecord, NodeId, OpKind, OutMsg, PeerBody, ProtocolError, Role,
    RoutedPayload, TraceEvent,
};
use crate::channel::{
    closing_template, commitment_layout, funding_template, sweep_template, ChannelKeys,
    ChannelParams, ChannelState, CloseInitiator, CommitmentLayout, Holder, Settlement, TxTemplate,
};
use crate::crypto::{
    ecdsa_sign, ecdsa_verify, sha256, CurveParams, EcdsaSignature, GroupPoint, MessageDigest,
    Scalar,
};
use crate::ledger::{OutPoint, Satoshi, Transaction, Witness};
use crate::threshold::{GatewaySigner, KeyShare, KeygenGateway, RoundMessage, SignerStep};

/// The first offer in a close negotiation sits this far above the
/// standard fee, leaving the bridge room to counter down.
const CLOSE_FEE_MARGIN: Satoshi = 60;

/// States 0 and 1 are both locked to the base commitment point derived
/// during funding; later states use their own index.
pub fn point_index_for_state(state: u64) -> u64 {
    if state <= 1 {
        0
    } else {
        state
    }
}

/// Where a flow resumes after a derive/reveal exchange finishes and the
/// revocation has gone out.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum AfterReveal {
    SendRevoke1,
    SendRevoke2,
    RecvRevoke1,
    RecvRevoke2,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum AfterDerive {
    OpenCommitments,
    Reveal { index: u64, then: AfterReveal },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Phase {
    Idle,
    Keygen { capacity: Satoshi },
    AwaitAccept { capacity: Satoshi },
    AwaitFundingSig,
    Deriving { index: u64, then: AfterDerive },
    Revealing { index: u64, announce: u64, then: AfterReveal },
    AwaitFundingSigned,
    AwaitDepth,
    Locking,
    Ready,
    SendAwaitRevoke1,
    SendAwaitCommit1,
    SendAwaitFulfill,
    SendAwaitCommit2,
    SendAwaitRevoke2,
    RecvAwaitCommit1,
    RecvAwaitRevoke1,
    RecvAwaitRevoke2,
    RecvAwaitCommit2,
    ShutdownSent { initiator: CloseInitiator },
    CloseAwaitReply { round: u8, initiator: CloseInitiator },
    Closed,
}

/// What the signature being produced right now is for, and what to do
/// with it when the final round lands.
#[derive(Clone, Debug)]
enum SignPurpose {
    /// First joint commitment; released inside funding_created.
    OpenCommitment,
    /// A bridge commitment mid-payment; the phase to enter once
    /// commitment_signed has gone out.
    BridgeCommitment { after: Phase },
    /// One round of the closing negotiation.
    Closing {
        fee: Satoshi,
        initiator: CloseInitiator,
        bridge_sig: Option<EcdsaSignature>,
    },
    /// Unilateral broadcast of joint state `state`.
    OwnCommitment { state: u64 },
    /// Sweep of an expired in-flight payment back to the joint key.
    HtlcRefund { template: TxTemplate },
}

struct PaymentCtx {
    htlc_id: u64,
    gross: Satoshi,
    net: Satoshi,
    fee: Satoshi,
    payment_hash: MessageDigest,
    preimage: Option<[u8; 32]>,
}

struct ChannelCtx {
    id: ChannelId,
    params: ChannelParams,
    keys: ChannelKeys,
    funding: OutPoint,
    state: ChannelState,
    acked: ChannelState,
    states: BTreeMap<u64, ChannelState>,
    /// Derived joint child points, by derivation index.
    my_points: BTreeMap<u64, GroupPoint>,
    /// Bridge per-state points, by state index.
    their_points: BTreeMap<u64, GroupPoint>,
    their_secrets: BTreeMap<u64, Scalar>,
    /// Bridge signatures over the joint commitment of each state.
    their_sigs: BTreeMap<u64, EcdsaSignature>,
    funding_broadcast: bool,
    sent_locked: bool,
    recv_locked: bool,
    payment: Option<PaymentCtx>,
    /// Negotiated fee and bridge signature from the closing exchange.
    last_close_offer: Option<Satoshi>,
    /// Our own broadcasts, so chain notifications about them are not
    /// mistaken for counterparty activity.
    own_txids: HashSet<MessageDigest>,
    /// Layout of the commitment this side put on chain, for follow-up
    /// sweeps of in-flight outputs.
    broadcast_layout: Option<(MessageDigest, CommitmentLayout)>,
}

impl ChannelCtx {
    fn layout(&self, holder: Holder, state: u64) -> Result<CommitmentLayout, ProtocolError> {
        let st = self
            .states
            .get(&state)
            .ok_or(ProtocolError::Malformed("unknown state index"))?;
        let point = match holder {
            Holder::JointNode => self
                .my_points
                .get(&point_index_for_state(state))
                .ok_or(ProtocolError::Malformed("missing own commitment point"))?,
            Holder::Bridge => self
                .their_points
                .get(&state)
                .ok_or(ProtocolError::Malformed("missing bridge commitment point"))?,
        };
        Ok(commitment_layout(
            &self.params,
            &self.keys,
            st,
            holder,
            point,
            self.funding,
        ))
    }
}

struct OutgoingPay {
    payment_hash: MessageDigest,
    invoice: Option<InvoiceRecord>,
}

pub struct GatewayMachine {
    curve: CurveParams,
    rng: ChaCha20Rng,
    frame_key: [u8; 32],
    frame_send_seq: u64,
    frame_recv_seq: u64,
    peer_seq_out: u64,
    peer_seq_in: Option<u64>,
    node_id: NodeId,
    node_secret: Scalar,
    service_fee_ppm: u32,
    open_fee: Satoshi,
    close_fee: Satoshi,
    height: u64,
    sign_counter: u64,
    funding_source: Option<(OutPoint, Satoshi)>,
    device_key: Option<GroupPoint>,
    keygen: Option<KeygenGateway>,
    share: Option<KeyShare>,
    signer: Option<GatewaySigner>,
    purpose: Option<SignPurpose>,
    pending_funding_template: Option<TxTemplate>,
    pending_funding_tx: Option<Transaction>,
    outgoing: HashMap<NodeId, OutgoingPay>,
    receive_preimages: HashMap<MessageDigest, [u8; 32]>,
    remote_node_keys: HashMap<NodeId, GroupPoint>,
    channel: Option<ChannelCtx>,
    phase: Phase,
}

impl GatewayMachine {
    pub fn new(
        curve: CurveParams,
        seed: u64,
        frame_key: [u8; 32],
        node_id: NodeId,
        node_secret: Scalar,
        service_fee_ppm: u32,
    ) -> GatewayMachine {
        GatewayMachine {
            curve,
            rng: ChaCha20Rng::seed_from_u64(seed),
            frame_key,
            frame_send_seq: 0,
            frame_recv_seq: 0,
            peer_seq_out: 0,
            peer_seq_in: None,
            node_id,
            node_secret,
            service_fee_ppm,
            open_fee: crate::channel::DEFAULT_OPEN_FEE,
            close_fee: crate::channel::DEFAULT_CLOSE_FEE,
            height: 0,
            sign_counter: 0,
            funding_source: None,
            device_key: None,
            keygen: None,
            share: None,
            signer: None,
            purpose: None,
            pending_funding_template: None,
            pending_funding_tx: None,
            outgoing: HashMap::new(),
            receive_preimages: HashMap::new(),
            remote_node_keys: HashMap::new(),
            channel: None,
            phase: Phase::Idle,
        }
    }

    // ---- wiring ------------------------------------------------------

    pub fn set_funding_source(&mut self, outpoint: OutPoint, value: Satoshi) {
        self.funding_source = Some((outpoint, value));
    }

    pub fn set_device_key(&mut self, key: GroupPoint) {
        self.device_key = Some(key);
    }

    /// Overrides the stock on-chain fee quotes for channels opened
    /// after this call.
    pub fn set_onchain_fees(&mut self, open_fee: Satoshi, close_fee: Satoshi) {
        self.open_fee = open_fee;
        self.close_fee = close_fee;
    }

    pub fn register_remote_node(&mut self, id: NodeId, key: GroupPoint) {
        self.remote_node_keys.insert(id, key);
    }

    /// Installs a signed invoice for a later send to its destination.
    pub fn register_invoice(&mut self, record: InvoiceRecord) {
        self.outgoing.insert(
            record.destination,
            OutgoingPay {
                payment_hash: record.payment_hash,
                invoice: Some(record),
            },
        );
    }

    /// Installs a bare payment hash: a spontaneous payment, no invoice.
    pub fn register_keysend(&mut self, destination: NodeId, payment_hash: MessageDigest) {
        self.outgoing.insert(
            destination,
            OutgoingPay {
                payment_hash,
                invoice: None,
            },
        );
    }

    /// Creates an invoice for an incoming payment: fresh preimage, the
    /// terms signed with the gateway's node key.
    pub fn issue_invoice(&mut self, amount: Satoshi, expiry_height: u64) -> InvoiceRecord {
        let preimage: [u8; 32] = self.rng.gen();
        let payment_hash = sha256(&preimage);
        self.receive_preimages.insert(payment_hash, preimage);
        let digest =
            InvoiceRecord::signing_digest(self.node_id, amount, expiry_height, &payment_hash);
        let signature = sign_with_retry(&self.curve, &self.node_secret, &digest, &mut self.rng);
        InvoiceRecord {
            destination: self.node_id,
            amount,
            expiry_height,
            payment_hash,
            signature,
        }
    }

    // ---- introspection -----------------------------------------------

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn node_key(&self) -> GroupPoint {
        self.curve.mul_g(&self.node_secret)
    }

    pub fn is_ready(&self) -> bool {
        self.phase == Phase::Ready
    }

    /// True while a flow is mid-air, meaning a drained message queue is
    /// a timeout rather than quiescence.
    pub fn in_flow(&self) -> bool {
        !matches!(self.phase, Phase::Idle | Phase::Ready | Phase::Closed)
    }

    pub fn channel_id(&self) -> Option<ChannelId> {
        self.channel.as_ref().map(|c| c.id)
    }

    pub fn funding_outpoint(&self) -> Option<OutPoint> {
        self.channel.as_ref().map(|c| c.funding)
    }

    pub fn state(&self) -> Option<&ChannelState> {
        self.channel.as_ref().map(|c| &c.state)
    }

    pub fn acked_state(&self) -> Option<&ChannelState> {
        self.channel.as_ref().map(|c| &c.acked)
    }

    pub fn joint_key(&self) -> Option<&GroupPoint> {
        self.share.as_ref().map(|s| &s.joint_public_key)
    }

    pub fn channel_keys(&self) -> Option<&ChannelKeys> {
        self.channel.as_ref().map(|c| &c.keys)
    }

    /// Drops in-flight work and rolls back to the last fully
    /// revoked-and-acknowledged state. Before the funding transaction
    /// is on chain this tears the whole channel down instead.
    pub fn abort(&mut self) {
        self.signer = None;
        self.purpose = None;
        self.keygen = None;
        let broadcast = self
            .channel
            .as_ref()
            .map(|c| c.funding_broadcast)
            .unwrap_or(false);
        if !broadcast {
            self.channel = None;
            self.share = None;
            self.pending_funding_template = None;
            self.pending_funding_tx = None;
            self.phase = Phase::Idle;
            return;
        }
        let ctx = self.channel.as_mut().expect("broadcast implies channel");
        ctx.state = ctx.acked.clone();
        let keep = ctx.state.index;
        ctx.states.retain(|i, _| *i <= keep);
        ctx.payment = None;
        ctx.last_close_offer = None;
        if !matches!(self.phase, Phase::Closed) {
            self.phase = if ctx.sent_locked && ctx.recv_locked {
                Phase::Ready
            } else {
                Phase::Locking
            };
        }
    }

    // ---- output helpers ------------------------------------------------

    fn frame_out(&mut self, body: ControlBody, out: &mut Vec<OutMsg>) {
        let sealed = frame::seal_frame(&self.frame_key, self.frame_send_seq, &body);
        self.frame_send_seq += 1;
        out.push(OutMsg::Event(TraceEvent::Control {
            from: Role::Gateway,
            to: Role::Device,
            kind: body.kind(),
            bytes: frame::CONTROL_FRAME_LEN,
        }));
        out.push(OutMsg::ToDevice(DeviceLinkMsg::Frame(sealed)));
    }

    fn peer_out(&mut self, body: PeerBody, out: &mut Vec<OutMsg>) -> Result<(), ProtocolError> {
        let env = Envelope {
            channel_id: self.channel.as_ref().map(|c| c.id).unwrap_or(0),
            seq: self.peer_seq_out,
            body,
        };
        self.peer_seq_out += 1;
        let bytes = wire::encode_peer(&self.curve, &env)?.len();
        out.push(OutMsg::Event(TraceEvent::Peer {
            from: Role::Gateway,
            to: Role::Bridge,
            kind: env.body.kind(),
            bytes,
        }));
        out.push(OutMsg::ToPeer {
            to: Role::Bridge,
            env,
        });
        Ok(())
    }

    fn round_out(&self, msg: RoundMessage, out: &mut Vec<OutMsg>) -> Result<(), ProtocolError> {
        let bytes = msg.encode(&self.curve)?.len();
        out.push(OutMsg::Event(TraceEvent::Link {
            from: Role::Gateway,
            to: Role::Device,
            kind: super::round_kind(&msg),
            bytes,
        }));
        out.push(OutMsg::ToDevice(DeviceLinkMsg::Round(msg)));
        Ok(())
    }

    fn op(&self, kind: OpKind, out: &mut Vec<OutMsg>) {
        out.push(OutMsg::Event(TraceEvent::Op {
            role: Role::Gateway,
            kind,
        }));
    }

    fn submit(&mut self, tx: Transaction, out: &mut Vec<OutMsg>) -> MessageDigest {
        let txid = tx.txid(&self.curve);
        if let Some(ctx) = self.channel.as_mut() {
            ctx.own_txids.insert(txid);
        }
        out.push(OutMsg::Chain(ChainAction::Submit(tx)));
        txid
    }

    fn start_sign(
        &mut self,
        digest: MessageDigest,
        purpose: SignPurpose,
        out: &mut Vec<OutMsg>,
    ) -> Result<(), ProtocolError> {
        if self.signer.is_some() {
            return Err(ProtocolError::Refused("a signing session is active"));
        }
        let share = self
            .share
            .as_ref()
            .ok_or(ProtocolError::Refused("no key established"))?;
        let id = self.sign_counter;
        self.sign_counter += 1;
        let (signer, init) = GatewaySigner::start(&self.curve, share, id, digest, &mut self.rng)?;
        self.signer = Some(signer);
        self.purpose = Some(purpose);
        self.round_out(init, out)
    }

    fn begin_derive(
        &mut self,
        index: u64,
        then: AfterDerive,
        out: &mut Vec<OutMsg>,
    ) -> Result<(), ProtocolError> {
        self.phase = Phase::Deriving { index, then };
        self.round_out(RoundMessage::DeriveRequest { index }, out)
    }

    fn expected_child_point(&self, index: u64) -> Result<GroupPoint, ProtocolError> {
        let share = self
            .share
            .as_ref()
            .ok_or(ProtocolError::Refused("no key established"))?;
        Ok(share.child(&self.curve, index).joint_public_key)
    }

    // ---- device link ---------------------------------------------------

    pub fn on_device(&mut self, msg: DeviceLinkMsg) -> Result<Vec<OutMsg>, ProtocolError> {
        match msg {
            DeviceLinkMsg::Frame(f) => {
                let body = frame::open_frame(&self.frame_key, self.frame_recv_seq, &f)?;
                self.frame_recv_seq += 1;
                self.on_control(body)
            }
            DeviceLinkMsg::Round(m) => self.on_round(m),
            DeviceLinkMsg::FundingSignature { signature } => self.on_funding_signature(signature),
            DeviceLinkMsg::FundingSignRequest { .. } => Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "funding_sign_request",
            }),
        }
    }

    fn on_control(&mut self, body: ControlBody) -> Result<Vec<OutMsg>, ProtocolError> {
        match body {
            ControlBody::OpenChannelRequest {
                capacity,
                bridge_node_id,
            } => self.start_open(capacity, bridge_node_id),
            ControlBody::SendPayment {
                amount,
                destination_node_id,
            } => self.start_send(amount, destination_node_id),
            ControlBody::ChannelClosingRequest => self.start_close(CloseInitiator::Iot),
            ControlBody::PaymentSendSuccess | ControlBody::PaymentReceiveSuccess => {
                Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "success report",
                })
            }
        }
    }

    fn start_open(
        &mut self,
        capacity: Satoshi,
        bridge_node_id: NodeId,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::Idle {
            return Err(ProtocolError::Refused("channel already exists"));
        }
        let _ = bridge_node_id;
        let mut out = Vec::new();
        let (kg, first) = KeygenGateway::new(&self.curve, &mut self.rng);
        self.keygen = Some(kg);
        self.phase = Phase::Keygen { capacity };
        self.round_out(first, &mut out)?;
        Ok(out)
    }

    fn start_send(
        &mut self,
        amount: Satoshi,
        destination: NodeId,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::Ready {
            return Err(ProtocolError::Refused("channel not ready"));
        }
        let pay = self
            .outgoing
            .get(&destination)
            .ok_or(ProtocolError::InvoiceInvalid("no payment terms on file"))?;
        if let Some(invoice) = &pay.invoice {
            if invoice.destination != destination || invoice.amount != amount {
                return Err(ProtocolError::InvoiceInvalid("terms do not match request"));
            }
            if invoice.expiry_height <= self.height {
                return Err(ProtocolError::InvoiceInvalid("invoice expired"));
            }
            let key = self
                .remote_node_keys
                .get(&destination)
                .ok_or(ProtocolError::InvoiceInvalid("unknown issuer"))?;
            if !invoice.verify(&self.curve, key) {
                return Err(ProtocolError::InvoiceInvalid("bad issuer signature"));
            }
        }
        let payment_hash = pay.payment_hash;

        let mut out = Vec::new();
        let net;
        {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            let (next, htlc) = ctx.state.apply_send(amount, payment_hash, &ctx.params)?;
            net = htlc.amount;
            ctx.payment = Some(PaymentCtx {
                htlc_id: htlc.id,
                gross: amount,
                net,
                fee: amount - net,
                payment_hash,
                preimage: None,
            });
            ctx.states.insert(next.index, next.clone());
            ctx.state = next;
        }
        self.op(OpKind::AddHtlc, &mut out);
        self.peer_out(
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload: RoutedPayload {
                    next_hop: destination,
                    amount: net,
                    payment_hash,
                },
            },
            &mut out,
        )?;
        self.sign_bridge_commitment(Phase::SendAwaitRevoke1, &mut out)?;
        Ok(out)
    }

    /// Starts a threshold signature over the bridge commitment of the
    /// current state and queues `after` as the phase entered once the
    /// resulting commitment_signed has gone out.
    fn sign_bridge_commitment(
        &mut self,
        after: Phase,
        out: &mut Vec<OutMsg>,
    ) -> Result<(), ProtocolError> {
        let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
        let digest = ctx
            .layout(Holder::Bridge, ctx.state.index)?
            .template
            .sighash(&self.curve);
        self.phase = after;
        self.start_sign(digest, SignPurpose::BridgeCommitment { after }, out)
    }

    fn start_close(&mut self, initiator: CloseInitiator) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::Ready {
            return Err(ProtocolError::Refused("channel not ready"));
        }
        let mut out = Vec::new();
        if initiator == CloseInitiator::Gateway {
            self.frame_out(ControlBody::ChannelClosingRequest, &mut out);
        }
        self.peer_out(PeerBody::Shutdown { initiator }, &mut out)?;
        self.phase = Phase::ShutdownSent { initiator };
        Ok(out)
    }

    /// Gateway-initiated cooperative close; the fee comes out of the
    /// gateway's balance.
    pub fn request_close(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        self.start_close(CloseInitiator::Gateway)
    }

    fn closing_digest(
        &self,
        initiator: CloseInitiator,
        fee: Satoshi,
    ) -> Result<MessageDigest, ProtocolError> {
        let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
        let template = closing_template(&ctx.keys, &ctx.state, initiator, fee, ctx.funding)?;
        Ok(template.sighash(&self.curve))
    }

    fn on_round(&mut self, msg: RoundMessage) -> Result<Vec<OutMsg>, ProtocolError> {
        match &msg {
            RoundMessage::KeygenCommit { .. }
            | RoundMessage::KeygenRevealDevice { .. }
            | RoundMessage::KeygenFinishAck { .. } => self.on_keygen_round(&msg),
            RoundMessage::SignNonceCommit { .. }
            | RoundMessage::SignNonceRevealDevice { .. }
            | RoundMessage::SignComplete { .. } => self.on_sign_round(&msg),
            RoundMessage::SignAbort { .. } => {
                self.signer = None;
                self.purpose = None;
                Err(ProtocolError::ThresholdRefused)
            }
            RoundMessage::DeriveConfirm { index, child_point } => {
                self.on_derive_confirm(*index, child_point.clone())
            }
            RoundMessage::RevealContribution { index, partial } => {
                self.on_reveal_contribution(*index, partial.clone())
            }
            _ => Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "round message",
            }),
        }
    }

    fn on_keygen_round(&mut self, msg: &RoundMessage) -> Result<Vec<OutMsg>, ProtocolError> {
        let capacity = match self.phase {
            Phase::Keygen { capacity } => capacity,
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "keygen round",
                })
            }
        };
        let mut out = Vec::new();
        let kg = self.keygen.as_mut().ok_or(ProtocolError::UnexpectedMessage {
            role: Role::Gateway,
            kind: "keygen round",
        })?;
        let reply = kg.handle(msg)?;
        let done = kg.is_done();
        if let Some(reply) = reply {
            self.round_out(reply, &mut out)?;
        }
        if done {
            let share = self
                .keygen
                .take()
                .and_then(|k| k.finish())
                .ok_or(ProtocolError::Refused("keygen produced no share"))?;
            let joint = share.joint_public_key.clone();
            self.share = Some(share);
            self.op(OpKind::Keygen, &mut out);

            let device_key = self
                .device_key
                .clone()
                .ok_or(ProtocolError::Refused("device key not wired"))?;
            let id = channel_id_for(&self.curve, &joint);
            let mut params = ChannelParams::new(capacity);
            params.service_fee_ppm = self.service_fee_ppm;
            params.open_fee = self.open_fee;
            params.close_fee = self.close_fee;
            self.channel = Some(ChannelCtx {
                id,
                params,
                keys: ChannelKeys {
                    iot_key: device_key.clone(),
                    joint_key: joint.clone(),
                    bridge_key: joint.clone(), // placeholder until accept_channel
                },
                funding: OutPoint {
                    txid: MessageDigest([0u8; 32]),
                    vout: 0,
                },
                state: ChannelState::initial(capacity),
                acked: ChannelState::initial(capacity),
                states: BTreeMap::from([(0, ChannelState::initial(capacity))]),
                my_points: BTreeMap::new(),
                their_points: BTreeMap::new(),
                their_secrets: BTreeMap::new(),
                their_sigs: BTreeMap::new(),
                funding_broadcast: false,
                sent_locked: false,
                recv_locked: false,
                payment: None,
                last_close_offer: None,
                own_txids: HashSet::new(),
                broadcast_layout: None,
            });
            self.phase = Phase::AwaitAccept { capacity };
            self.peer_out(
                PeerBody::OpenChannel {
                    funding_pubkey: joint,
                    capacity,
                    device_key,
                    service_fee_ppm: self.service_fee_ppm,
                    open_fee: self.open_fee,
                    close_fee: self.close_fee,
                },
                &mut out,
            )?;
        }
        Ok(out)
    }

    fn on_sign_round(&mut self, msg: &RoundMessage) -> Result<Vec<OutMsg>, ProtocolError> {
        let mut signer = self.signer.take().ok_or(ProtocolError::UnexpectedMessage {
            role: Role::Gateway,
            kind: "sign round",
        })?;
        let mut out = Vec::new();
        let step = signer.handle(msg, &mut self.rng)?;
        if let SignerStep::Send(reply) = step {
            self.round_out(reply, &mut out)?;
        }
        if let Some(sig) = signer.signature().cloned() {
            let digest = *signer.digest();
            self.op(OpKind::ThresholdSign { digest }, &mut out);
            let purpose = self
                .purpose
                .take()
                .ok_or(ProtocolError::Malformed("signature without purpose"))?;
            self.finish_sign(purpose, sig, &mut out)?;
        } else {
            self.signer = Some(signer);
        }
        Ok(out)
    }

    fn finish_sign(
        &mut self,
        purpose: SignPurpose,
        sig: EcdsaSignature,
        out: &mut Vec<OutMsg>,
    ) -> Result<(), ProtocolError> {
        match purpose {
            SignPurpose::OpenCommitment => {
                let (funding, point) = {
                    let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
                    let point = ctx
                        .my_points
                        .get(&0)
                        .cloned()
                        .ok_or(ProtocolError::Malformed("missing base point"))?;
                    (ctx.funding, point)
                };
                self.phase = Phase::AwaitFundingSigned;
                self.peer_out(
                    PeerBody::FundingCreated {
                        funding_outpoint: funding,
                        commitment_signature: sig,
                        first_commitment_point: point,
                    },
                    out,
                )?;
            }
            SignPurpose::BridgeCommitment { after } => {
                self.phase = after;
                self.peer_out(
                    PeerBody::CommitmentSigned {
                        commit_sig: sig,
                        htlc_sigs: Vec::new(),
                    },
                    out,
                )?;
            }
            SignPurpose::Closing {
                fee,
                initiator,
                bridge_sig,
            } => {
                self.peer_out(
                    PeerBody::ClosingSigned {
                        fee_offer: fee,
                        signature: sig.clone(),
                    },
                    out,
                )?;
                if let Some(bridge_sig) = bridge_sig {
                    // Fee agreed: assemble and broadcast the closing
                    // transaction.
                    let template = {
                        let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
                        closing_template(&ctx.keys, &ctx.state, initiator, fee, ctx.funding)?
                    };
                    let tx = template.into_transaction(vec![Witness::TwoKeys(sig, bridge_sig)]);
                    let txid = self.submit(tx, out);
                    self.op(OpKind::BroadcastClosing, out);
                    self.phase = Phase::Closed;
                    out.push(OutMsg::Done(FlowOutcome::Closed { txid, fee }));
                }
            }
            SignPurpose::OwnCommitment { state } => {
                let (layout, bridge_sig) = {
                    let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
                    let layout = ctx.layout(Holder::JointNode, state)?;
                    let bridge_sig = ctx
                        .their_sigs
                        .get(&state)
                        .cloned()
                        .ok_or(ProtocolError::Malformed("no counterparty signature"))?;
                    (layout, bridge_sig)
                };
                let tx = layout
                    .template
                    .clone()
                    .into_transaction(vec![Witness::TwoKeys(sig, bridge_sig)]);
                let txid = self.submit(tx, out);
                if let Some(ctx) = self.channel.as_mut() {
                    ctx.broadcast_layout = Some((txid, layout));
                }
                self.op(OpKind::BroadcastCommitment { state }, out);
                self.phase = Phase::Closed;
                out.push(OutMsg::Done(FlowOutcome::ForceClosed { txid, state }));
            }
            SignPurpose::HtlcRefund { template } => {
                let tx = template.into_transaction(vec![Witness::HtlcRefund(sig)]);
                self.submit(tx, out);
            }
        }
        Ok(())
    }

    fn on_derive_confirm(
        &mut self,
        index: u64,
        child_point: GroupPoint,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        let (want, then) = match self.phase {
            Phase::Deriving { index: want, then } => (want, then),
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "derive_confirm",
                })
            }
        };
        if index != want {
            return Err(ProtocolError::Malformed("derive index mismatch"));
        }
        if self.expected_child_point(index)? != child_point {
            return Err(ProtocolError::BadPoint);
        }
        let mut out = Vec::new();
        self.channel
            .as_mut()
            .ok_or(ProtocolError::BadChannel)?
            .my_points
            .insert(index, child_point);
        self.op(OpKind::DeriveChild { index }, &mut out);
        match then {
            AfterDerive::OpenCommitments => {
                self.op(OpKind::BuildCommitments, &mut out);
                let digest = {
                    let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
                    ctx.layout(Holder::Bridge, 0)?
                        .template
                        .sighash(&self.curve)
                };
                self.phase = Phase::AwaitFundingSigned;
                self.start_sign(digest, SignPurpose::OpenCommitment, &mut out)?;
            }
            AfterDerive::Reveal { index: ridx, then } => {
                self.phase = Phase::Revealing {
                    index: ridx,
                    announce: index,
                    then,
                };
                self.round_out(RoundMessage::RevealRequest { index: ridx }, &mut out)?;
            }
        }
        Ok(out)
    }

    fn on_reveal_contribution(
        &mut self,
        index: u64,
        partial: Scalar,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        let (want, announce, then) = match self.phase {
            Phase::Revealing {
                index,
                announce,
                then,
            } => (index, announce, then),
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "reveal_contribution",
                })
            }
        };
        if index != want {
            return Err(ProtocolError::Malformed("reveal index mismatch"));
        }
        let share = self
            .share
            .as_ref()
            .ok_or(ProtocolError::Refused("no key established"))?;
        let secret = self.curve.scalar_mul(&partial, share.share());
        let expected = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            ctx.my_points
                .get(&index)
                .cloned()
                .ok_or(ProtocolError::Malformed("reveal of an underived point"))?
        };
        if self.curve.mul_g(&secret) != expected {
            return Err(ProtocolError::BadPoint);
        }
        let announce_point = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            ctx.my_points
                .get(&announce)
                .cloned()
                .ok_or(ProtocolError::Malformed("missing announce point"))?
        };
        let mut out = Vec::new();
        self.op(OpKind::RevealSecret { index }, &mut out);
        self.peer_out(
            PeerBody::RevokeAndAck {
                prior_revocation_secret: secret,
                next_commitment_point: announce_point,
            },
            &mut out,
        )?;
        match then {
            AfterReveal::SendRevoke1 => {
                self.phase = Phase::SendAwaitFulfill;
            }
            AfterReveal::SendRevoke2 => {
                self.sign_bridge_commitment(Phase::SendAwaitRevoke2, &mut out)?;
            }
            AfterReveal::RecvRevoke1 => {
                self.sign_bridge_commitment(Phase::RecvAwaitRevoke1, &mut out)?;
            }
            AfterReveal::RecvRevoke2 => {
                let amount = {
                    let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                    ctx.acked = ctx.state.clone();
                    ctx.payment.take().map(|p| p.net).unwrap_or(0)
                };
                self.frame_out(ControlBody::PaymentReceiveSuccess, &mut out);
                self.phase = Phase::Ready;
                out.push(OutMsg::Done(FlowOutcome::Received { amount }));
            }
        }
        Ok(out)
    }

    fn on_funding_signature(
        &mut self,
        signature: EcdsaSignature,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::AwaitFundingSig {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "funding_signature",
            });
        }
        let template = self
            .pending_funding_template
            .clone()
            .ok_or(ProtocolError::Malformed("no funding template"))?;
        let device_key = self
            .device_key
            .clone()
            .ok_or(ProtocolError::Refused("device key not wired"))?;
        let digest = template.sighash(&self.curve);
        if !ecdsa_verify(&self.curve, &device_key, &digest, &signature) {
            return Err(ProtocolError::BadSignature);
        }
        let tx = template.into_transaction(vec![Witness::Key(signature)]);
        let funding = OutPoint {
            txid: digest,
            vout: 0,
        };
        self.pending_funding_tx = Some(tx);
        self.channel
            .as_mut()
            .ok_or(ProtocolError::BadChannel)?
            .funding = funding;
        let mut out = Vec::new();
        self.begin_derive(0, AfterDerive::OpenCommitments, &mut out)?;
        Ok(out)
    }

    // ---- peer link -------------------------------------------------------

    pub fn on_peer(&mut self, env: Envelope) -> Result<Vec<OutMsg>, ProtocolError> {
        if let Some(last) = self.peer_seq_in {
            if env.seq <= last {
                return Err(ProtocolError::BadSequence);
            }
        }
        self.peer_seq_in = Some(env.seq);
        if let Some(ctx) = self.channel.as_ref() {
            if env.channel_id != ctx.id {
                return Err(ProtocolError::BadChannel);
            }
        }
        if self.signer.is_some() {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "peer message during signing",
            });
        }
        match env.body {
            PeerBody::AcceptChannel {
                funding_pubkey,
                first_commitment_point,
                next_commitment_point,
            } => self.on_accept_channel(
                funding_pubkey,
                first_commitment_point,
                next_commitment_point,
            ),
            PeerBody::FundingSigned {
                commitment_signature,
            } => self.on_funding_signed(commitment_signature),
            PeerBody::FundingLocked => self.on_funding_locked(),
            PeerBody::CommitmentSigned { commit_sig, .. } => self.on_commitment_signed(commit_sig),
            PeerBody::RevokeAndAck {
                prior_revocation_secret,
                next_commitment_point,
            } => self.on_revoke_and_ack(prior_revocation_secret, next_commitment_point),
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload,
            } => self.on_update_add_htlc(amount, payment_hash, routed_payload),
            PeerBody::UpdateFulfillHtlc { preimage } => self.on_update_fulfill(preimage),
            PeerBody::Shutdown { initiator } => self.on_shutdown(initiator),
            PeerBody::ClosingSigned {
                fee_offer,
                signature,
            } => self.on_closing_signed(fee_offer, signature),
            PeerBody::OpenChannel { .. } | PeerBody::FundingCreated { .. } => {
                Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: env.body.kind(),
                })
            }
        }
    }

    fn on_accept_channel(
        &mut self,
        funding_pubkey: GroupPoint,
        first: GroupPoint,
        next: GroupPoint,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if !matches!(self.phase, Phase::AwaitAccept { .. }) {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "accept_channel",
            });
        }
        let (source, source_value) = self
            .funding_source
            .ok_or(ProtocolError::Refused("no funding source wired"))?;
        let template = {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            ctx.keys.bridge_key = funding_pubkey;
            ctx.their_points.insert(0, first);
            ctx.their_points.insert(1, next);
            funding_template(&ctx.params, &ctx.keys, source, source_value)?
        };
        let mut out = Vec::new();
        self.op(OpKind::BuildFunding, &mut out);
        self.pending_funding_template = Some(template.clone());
        self.phase = Phase::AwaitFundingSig;
        let bytes = 16 + 36 * template.inputs.len() + 42 * template.outputs.len();
        out.push(OutMsg::Event(TraceEvent::Link {
            from: Role::Gateway,
            to: Role::Device,
            kind: "funding_sign_request",
            bytes,
        }));
        out.push(OutMsg::ToDevice(DeviceLinkMsg::FundingSignRequest {
            template,
        }));
        Ok(out)
    }

    fn on_funding_signed(
        &mut self,
        commitment_signature: EcdsaSignature,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::AwaitFundingSigned {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "funding_signed",
            });
        }
        let (digest, bridge_key, funding_txid) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            let digest = ctx
                .layout(Holder::JointNode, 0)?
                .template
                .sighash(&self.curve);
            (digest, ctx.keys.bridge_key.clone(), ctx.funding.txid)
        };
        if !ecdsa_verify(&self.curve, &bridge_key, &digest, &commitment_signature) {
            return Err(ProtocolError::BadSignature);
        }
        let tx = self
            .pending_funding_tx
            .take()
            .ok_or(ProtocolError::Malformed("no funding transaction"))?;
        let mut out = Vec::new();
        {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            ctx.their_sigs.insert(0, commitment_signature);
            ctx.funding_broadcast = true;
        }
        self.submit(tx, &mut out);
        self.op(OpKind::BroadcastFunding, &mut out);
        out.push(OutMsg::Chain(ChainAction::WatchDepth {
            txid: funding_txid,
            depth: 3,
        }));
        self.phase = Phase::AwaitDepth;
        Ok(out)
    }

    fn on_funding_locked(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        let mut out = Vec::new();
        match self.phase {
            Phase::AwaitDepth => {
                let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                ctx.recv_locked = true;
            }
            Phase::Locking => {
                let (id, txid) = {
                    let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                    ctx.recv_locked = true;
                    (ctx.id, ctx.funding.txid)
                };
                self.phase = Phase::Ready;
                out.push(OutMsg::Done(FlowOutcome::Opened {
                    channel_id: id,
                    funding_txid: txid,
                }));
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "funding_locked",
                })
            }
        }
        Ok(out)
    }

    fn on_commitment_signed(
        &mut self,
        commit_sig: EcdsaSignature,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        let cur = self
            .channel
            .as_ref()
            .ok_or(ProtocolError::BadChannel)?
            .state
            .index;
        let (digest, bridge_key) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            let digest = ctx
                .layout(Holder::JointNode, cur)?
                .template
                .sighash(&self.curve);
            (digest, ctx.keys.bridge_key.clone())
        };
        if !ecdsa_verify(&self.curve, &bridge_key, &digest, &commit_sig) {
            return Err(ProtocolError::BadSignature);
        }
        self.channel
            .as_mut()
            .ok_or(ProtocolError::BadChannel)?
            .their_sigs
            .insert(cur, commit_sig);

        let mut out = Vec::new();
        match self.phase {
            Phase::SendAwaitCommit1 => {
                self.begin_derive(
                    cur + 1,
                    AfterDerive::Reveal {
                        index: point_index_for_state(cur - 1),
                        then: AfterReveal::SendRevoke1,
                    },
                    &mut out,
                )?;
            }
            Phase::SendAwaitCommit2 => {
                self.begin_derive(
                    cur + 1,
                    AfterDerive::Reveal {
                        index: point_index_for_state(cur - 1),
                        then: AfterReveal::SendRevoke2,
                    },
                    &mut out,
                )?;
            }
            Phase::RecvAwaitCommit1 => {
                self.begin_derive(
                    cur + 1,
                    AfterDerive::Reveal {
                        index: point_index_for_state(cur - 1),
                        then: AfterReveal::RecvRevoke1,
                    },
                    &mut out,
                )?;
            }
            Phase::RecvAwaitCommit2 => {
                self.begin_derive(
                    cur + 1,
                    AfterDerive::Reveal {
                        index: point_index_for_state(cur - 1),
                        then: AfterReveal::RecvRevoke2,
                    },
                    &mut out,
                )?;
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "commitment_signed",
                })
            }
        }
        Ok(out)
    }

    fn on_revoke_and_ack(
        &mut self,
        secret: Scalar,
        next_point: GroupPoint,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        {
            let curve = &self.curve;
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            let prior = ctx
                .state
                .index
                .checked_sub(1)
                .ok_or(ProtocolError::Malformed("revocation before first state"))?;
            let expect = ctx
                .their_points
                .get(&prior)
                .ok_or(ProtocolError::Malformed("unknown prior point"))?;
            if curve.mul_g(&secret) != *expect {
                return Err(ProtocolError::BadPoint);
            }
            ctx.their_secrets.insert(prior, secret);
            ctx.their_points.insert(ctx.state.index + 1, next_point);
        }

        let mut out = Vec::new();
        match self.phase {
            Phase::SendAwaitRevoke1 => {
                self.phase = Phase::SendAwaitCommit1;
            }
            Phase::SendAwaitRevoke2 => {
                let (gross, fee) = {
                    let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                    ctx.acked = ctx.state.clone();
                    let pay = ctx.payment.take();
                    (
                        pay.as_ref().map(|p| p.gross).unwrap_or(0),
                        pay.as_ref().map(|p| p.fee).unwrap_or(0),
                    )
                };
                self.frame_out(ControlBody::PaymentSendSuccess, &mut out);
                self.phase = Phase::Ready;
                out.push(OutMsg::Done(FlowOutcome::Sent { amount: gross, fee }));
            }
            Phase::RecvAwaitRevoke1 => {
                // The prior state is revoked; hand over the preimage,
                // settle, and commit the bridge to the settled state.
                let preimage = {
                    let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                    let pay = ctx
                        .payment
                        .as_ref()
                        .ok_or(ProtocolError::Malformed("no payment in flight"))?;
                    let preimage = pay
                        .preimage
                        .ok_or(ProtocolError::Malformed("no preimage held"))?;
                    let settled = ctx.state.settle_htlc(pay.htlc_id, Settlement::Fulfill)?;
                    ctx.states.insert(settled.index, settled.clone());
                    ctx.state = settled;
                    preimage
                };
                self.peer_out(PeerBody::UpdateFulfillHtlc { preimage }, &mut out)?;
                self.sign_bridge_commitment(Phase::RecvAwaitRevoke2, &mut out)?;
            }
            Phase::RecvAwaitRevoke2 => {
                self.phase = Phase::RecvAwaitCommit2;
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "revoke_and_ack",
                })
            }
        }
        Ok(out)
    }

    fn on_update_add_htlc(
        &mut self,
        amount: Satoshi,
        payment_hash: MessageDigest,
        payload: RoutedPayload,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::Ready {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "update_add_htlc",
            });
        }
        if payload.next_hop != self.node_id {
            return Err(ProtocolError::UnknownDestination);
        }
        if payload.amount != amount {
            return Err(ProtocolError::FeeMismatch);
        }
        let preimage = self
            .receive_preimages
            .get(&payment_hash)
            .copied()
            .ok_or(ProtocolError::Refused("no invoice for this payment"))?;
        let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
        let (next, htlc) = ctx.state.apply_receive(amount, payment_hash)?;
        ctx.payment = Some(PaymentCtx {
            htlc_id: htlc.id,
            gross: amount,
            net: amount,
            fee: 0,
            payment_hash,
            preimage: Some(preimage),
        });
        ctx.states.insert(next.index, next.clone());
        ctx.state = next;
        self.phase = Phase::RecvAwaitCommit1;
        Ok(Vec::new())
    }

    fn on_update_fulfill(&mut self, preimage: [u8; 32]) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase != Phase::SendAwaitFulfill {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "update_fulfill_htlc",
            });
        }
        {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            let pay = ctx
                .payment
                .as_mut()
                .ok_or(ProtocolError::Malformed("no payment in flight"))?;
            if sha256(&preimage) != pay.payment_hash {
                return Err(ProtocolError::BadPreimage);
            }
            pay.preimage = Some(preimage);
            let settled = ctx.state.settle_htlc(pay.htlc_id, Settlement::Fulfill)?;
            ctx.states.insert(settled.index, settled.clone());
            ctx.state = settled;
        }
        self.phase = Phase::SendAwaitCommit2;
        Ok(Vec::new())
    }

    /// Opens the fee negotiation above the target fee so the bridge has
    /// something to push back on.
    fn begin_close_offer(
        &mut self,
        initiator: CloseInitiator,
        out: &mut Vec<OutMsg>,
    ) -> Result<(), ProtocolError> {
        let fee = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            ctx.params.close_fee + CLOSE_FEE_MARGIN
        };
        let digest = self.closing_digest(initiator, fee)?;
        if let Some(ctx) = self.channel.as_mut() {
            ctx.last_close_offer = Some(fee);
        }
        self.phase = Phase::CloseAwaitReply { round: 1, initiator };
        self.start_sign(
            digest,
            SignPurpose::Closing {
                fee,
                initiator,
                bridge_sig: None,
            },
            out,
        )
    }

    fn on_shutdown(&mut self, initiator: CloseInitiator) -> Result<Vec<OutMsg>, ProtocolError> {
        match self.phase {
            Phase::ShutdownSent { initiator: mine } => {
                if initiator != mine {
                    return Err(ProtocolError::Malformed("shutdown initiator mismatch"));
                }
                let mut out = Vec::new();
                self.begin_close_offer(initiator, &mut out)?;
                Ok(out)
            }
            // The bridge asked first: tell the device, echo the
            // shutdown, and start the same negotiation.
            Phase::Ready => {
                let mut out = Vec::new();
                self.frame_out(ControlBody::ChannelClosingRequest, &mut out);
                self.peer_out(PeerBody::Shutdown { initiator }, &mut out)?;
                self.begin_close_offer(initiator, &mut out)?;
                Ok(out)
            }
            _ => Err(ProtocolError::UnexpectedMessage {
                role: Role::Gateway,
                kind: "shutdown",
            }),
        }
    }

    fn on_closing_signed(
        &mut self,
        fee_offer: Satoshi,
        signature: EcdsaSignature,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        let (round, initiator) = match self.phase {
            Phase::CloseAwaitReply { round, initiator } => (round, initiator),
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Gateway,
                    kind: "closing_signed",
                })
            }
        };
        let digest = self.closing_digest(initiator, fee_offer)?;
        let (bridge_key, last_offer) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            (ctx.keys.bridge_key.clone(), ctx.last_close_offer)
        };
        if last_offer.map(|f| fee_offer > f).unwrap_or(false) {
            return Err(ProtocolError::Malformed("counter-offer raised the fee"));
        }
        if !ecdsa_verify(&self.curve, &bridge_key, &digest, &signature) {
            return Err(ProtocolError::BadSignature);
        }
        // Accept the counter-offer outright: the bridge countered with
        // the standard fee and pushing further would burn more than it
        // saves. A fresh threshold signature covers the new fee.
        let mut out = Vec::new();
        self.phase = Phase::CloseAwaitReply {
            round: round + 1,
            initiator,
        };
        if let Some(ctx) = self.channel.as_mut() {
            ctx.last_close_offer = Some(fee_offer);
        }
        self.start_sign(
            digest,
            SignPurpose::Closing {
                fee: fee_offer,
                initiator,
                bridge_sig: Some(signature),
            },
            &mut out,
        )?;
        Ok(out)
    }

    // ---- chain -----------------------------------------------------------

    pub fn on_chain(&mut self, ev: ChainEvent) -> Result<Vec<OutMsg>, ProtocolError> {
        match ev {
            ChainEvent::NewBlock { height } => {
                self.height = height;
                Ok(Vec::new())
            }
            ChainEvent::DepthReached { txid, depth } => {
                if self.phase != Phase::AwaitDepth {
                    return Ok(Vec::new());
                }
                let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
                if txid != ctx.funding.txid {
                    return Ok(Vec::new());
                }
                let mut out = Vec::new();
                self.op(OpKind::FundingDepth { depth }, &mut out);
                self.peer_out(PeerBody::FundingLocked, &mut out)?;
                let done = {
                    let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                    ctx.sent_locked = true;
                    ctx.recv_locked
                };
                if done {
                    let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
                    let (id, ftxid) = (ctx.id, ctx.funding.txid);
                    self.phase = Phase::Ready;
                    out.push(OutMsg::Done(FlowOutcome::Opened {
                        channel_id: id,
                        funding_txid: ftxid,
                    }));
                } else {
                    self.phase = Phase::Locking;
                }
                Ok(out)
            }
        }
    }

    /// Reacts to a transaction that spent the channel anchor. A current
    /// commitment is an honest unilateral close; a revoked one is
    /// punished by sweeping the cheater's delayed output with the
    /// revealed per-state key.
    pub fn on_funding_spent(&mut self, tx: &Transaction) -> Result<Vec<OutMsg>, ProtocolError> {
        let txid = tx.txid(&self.curve);
        let (is_own, cur, state_indices) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            (
                ctx.own_txids.contains(&txid),
                ctx.state.index,
                ctx.states.keys().copied().collect::<Vec<u64>>(),
            )
        };
        if is_own {
            return Ok(Vec::new());
        }
        let mut matched = None;
        for s in state_indices {
            let ctx = self.channel.as_ref().expect("checked above");
            if let Ok(layout) = ctx.layout(Holder::Bridge, s) {
                if layout.template.sighash(&self.curve) == txid {
                    matched = Some((s, layout));
                    break;
                }
            }
        }
        let Some((state, layout)) = matched else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        if state == cur {
            // An up-to-date unilateral close by the bridge; nothing to
            // punish.
            self.phase = Phase::Closed;
            out.push(OutMsg::Done(FlowOutcome::ForceClosed { txid, state }));
            return Ok(out);
        }
        let vout = layout
            .holder_vout
            .ok_or(ProtocolError::Malformed("revoked state has no delayed output"))?;
        let value = layout.template.outputs[vout as usize].value;
        let (secret, joint_key) = {
            let ctx = self.channel.as_ref().expect("checked above");
            let secret = ctx
                .their_secrets
                .get(&state)
                .cloned()
                .ok_or(ProtocolError::Malformed("no revocation secret held"))?;
            (secret, ctx.keys.joint_key.clone())
        };
        let sweep = sweep_template(
            OutPoint { txid, vout },
            value,
            0,
            &joint_key,
            1_000_000 + state,
        );
        let digest = sweep.sighash(&self.curve);
        let sig = sign_with_retry(&self.curve, &secret, &digest, &mut self.rng);
        let tx = sweep.into_transaction(vec![Witness::Revocation(sig)]);
        let sweep_txid = self.submit(tx, &mut out);
        self.op(OpKind::Punish { state }, &mut out);
        self.phase = Phase::Closed;
        out.push(OutMsg::Done(FlowOutcome::Punished {
            txid: sweep_txid,
            amount: value,
        }));
        Ok(out)
    }

    // ---- unilateral exits --------------------------------------------------

    /// Broadcasts the current joint commitment. One threshold signature
    /// plus the bridge signature already on file.
    pub fn force_close(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        let cur = self
            .channel
            .as_ref()
            .ok_or(ProtocolError::BadChannel)?
            .state
            .index;
        self.broadcast_state(cur)
    }

    /// Broadcasts an old, revoked joint commitment. Only an adversary
    /// (with a colluding or oblivious device) does this; the bridge is
    /// expected to punish it.
    pub fn broadcast_revoked(&mut self, state: u64) -> Result<Vec<OutMsg>, ProtocolError> {
        self.broadcast_state(state)
    }

    fn broadcast_state(&mut self, state: u64) -> Result<Vec<OutMsg>, ProtocolError> {
        let digest = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            if !ctx.their_sigs.contains_key(&state) {
                return Err(ProtocolError::Malformed("no counterparty signature"));
            }
            ctx.layout(Holder::JointNode, state)?
                .template
                .sighash(&self.curve)
        };
        let mut out = Vec::new();
        self.start_sign(digest, SignPurpose::OwnCommitment { state }, &mut out)?;
        Ok(out)
    }

    /// After a unilateral close left an in-flight payment on chain and
    /// its timeout has passed, sweep it back to the joint key.
    pub fn refund_expired_htlc(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        let (txid, layout) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            ctx.broadcast_layout
                .clone()
                .ok_or(ProtocolError::Refused("no commitment on chain"))?
        };
        let (htlc_id, vout) = *layout
            .htlc_vouts
            .first()
            .ok_or(ProtocolError::Refused("no in-flight output"))?;
        let _ = htlc_id;
        let value = layout.template.outputs[vout as usize].value;
        let joint_key = self
            .channel
            .as_ref()
            .ok_or(ProtocolError::BadChannel)?
            .keys
            .joint_key
            .clone();
        let sweep = sweep_template(OutPoint { txid, vout }, value, 0, &joint_key, 3_000_000);
        let digest = sweep.sighash(&self.curve);
        let mut out = Vec::new();
        self.start_sign(digest, SignPurpose::HtlcRefund { template: sweep }, &mut out)?;
        Ok(out)
    }
}

fn channel_id_for(curve: &CurveParams, joint: &GroupPoint) -> ChannelId {
    let bytes = curve.point_encode(joint).unwrap_or_default();
    let digest = sha256(&bytes);
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest.as_bytes()[..8]);
    u64::from_be_bytes(id)
}

/// Signs with a fresh random nonce, retrying the negligible zero cases.
pub(super) fn sign_with_retry(
    curve: &CurveParams,
    secret: &Scalar,
    digest: &MessageDigest,
    rng: &mut ChaCha20Rng,
) -> EcdsaSignature {
    loop {
        let k = curve.random_scalar(rng);
        if let Ok(sig) = ecdsa_sign(curve, secret, digest, &k) {
            return sig;
        }
    }
}
