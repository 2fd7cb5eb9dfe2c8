//! The bridge: the channel counterparty with its own funds and an
//! ordinary single key. It forwards payments between the channel and
//! the wider network, signs with plain ECDSA, and needs to know nothing
//! about how the joint side splits its key.
//!
//! Its revocation material is an indexed series of hash-derived
//! scalars, one per state, so revoking state s means handing over
//! secret s. The joint side's revocations arrive as scalars too; the
//! bridge checks them against the commitment points the gateway
//! announced one state ahead.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::gateway::{point_index_for_state, sign_with_retry};
use super::{
    wire, ChainAction, ChainEvent, ChannelId, Envelope, FlowOutcome, NodeId, OpKind, OutMsg,
    PeerBody, ProtocolError, Role, RoutedPayload, TraceEvent,
};
use crate::channel::{
    closing_template, commitment_layout, sweep_template, BridgeStateSeries, ChannelKeys,
    ChannelParams, ChannelState, CloseInitiator, CommitmentLayout, Holder, Settlement,
};
use crate::crypto::{
    ecdsa_verify, sha256, CurveParams, EcdsaSignature, GroupPoint, MessageDigest, Scalar,
};
use crate::ledger::{OutPoint, Satoshi, Transaction, Witness};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Phase {
    Idle,
    AwaitFundingCreated,
    AwaitDepth,
    Locking,
    Ready,
    SendAwaitJointCommit,
    SendAwaitGwRevoke,
    SendAwaitRemoteFulfill,
    SendAwaitGwRevoke2,
    SendAwaitJointCommit2,
    RecvAwaitGwRevoke1,
    RecvAwaitJointCommit1,
    RecvAwaitGwFulfill,
    RecvAwaitJointCommit2,
    RecvAwaitGwRevoke2,
    CloseNegotiate { initiator: CloseInitiator },
    Closed,
}

struct Payment {
    htlc_id: u64,
    payment_hash: MessageDigest,
}

struct BridgeChannel {
    id: ChannelId,
    params: ChannelParams,
    keys: ChannelKeys,
    series: BridgeStateSeries,
    funding: OutPoint,
    state: ChannelState,
    acked: ChannelState,
    states: BTreeMap<u64, ChannelState>,
    /// Joint-side commitment points, by derivation index.
    gw_points: BTreeMap<u64, GroupPoint>,
    /// Revealed joint-side revocation secrets, by derivation index.
    gw_secrets: BTreeMap<u64, Scalar>,
    /// Threshold signatures covering this side's commitment per state.
    joint_sigs: BTreeMap<u64, EcdsaSignature>,
    sent_locked: bool,
    recv_locked: bool,
    funding_broadcast: bool,
    payment: Option<Payment>,
    /// Prepared forward, released once the payer's old state is revoked.
    pending_forward: Option<PeerBody>,
    expected_closing: Option<MessageDigest>,
    own_txids: HashSet<MessageDigest>,
    phase: Phase,
}

impl BridgeChannel {
    fn layout(&self, holder: Holder, state: u64) -> Result<CommitmentLayout, ProtocolError> {
        let st = self
            .states
            .get(&state)
            .ok_or(ProtocolError::Malformed("unknown state index"))?;
        let point = match holder {
            Holder::Bridge => self.series.point(state),
            Holder::JointNode => self
                .gw_points
                .get(&point_index_for_state(state))
                .cloned()
                .ok_or(ProtocolError::Malformed("missing joint commitment point"))?,
        };
        Ok(commitment_layout(
            &self.params,
            &self.keys,
            st,
            holder,
            &point,
            self.funding,
        ))
    }
}

pub struct BridgeMachine {
    curve: CurveParams,
    rng: ChaCha20Rng,
    node_id: NodeId,
    funding_secret: Scalar,
    funding_key: GroupPoint,
    /// Policy switch: refuse open_channel when false.
    pub accept_opens: bool,
    gw_node_id: Option<NodeId>,
    remote_node_id: Option<NodeId>,
    peer_seq_out: u64,
    peer_seq_in: Option<u64>,
    remote_seq_out: u64,
    remote_seq_in: Option<u64>,
    channel: Option<BridgeChannel>,
}

impl BridgeMachine {
    pub fn new(curve: CurveParams, seed: u64, node_id: NodeId) -> BridgeMachine {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let funding_secret = curve.random_scalar(&mut rng);
        let funding_key = curve.mul_g(&funding_secret);
        BridgeMachine {
            curve,
            rng,
            node_id,
            funding_secret,
            funding_key,
            accept_opens: true,
            gw_node_id: None,
            remote_node_id: None,
            peer_seq_out: 0,
            peer_seq_in: None,
            remote_seq_out: 0,
            remote_seq_in: None,
            channel: None,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn funding_key(&self) -> &GroupPoint {
        &self.funding_key
    }

    pub fn set_gateway_node(&mut self, id: NodeId) {
        self.gw_node_id = Some(id);
    }

    pub fn set_remote_node(&mut self, id: NodeId) {
        self.remote_node_id = Some(id);
    }

    pub fn is_ready(&self) -> bool {
        self.channel
            .as_ref()
            .map(|c| c.phase == Phase::Ready)
            .unwrap_or(false)
    }

    pub fn in_flow(&self) -> bool {
        self.channel
            .as_ref()
            .map(|c| !matches!(c.phase, Phase::Ready | Phase::Closed))
            .unwrap_or(false)
    }

    pub fn state(&self) -> Option<&ChannelState> {
        self.channel.as_ref().map(|c| &c.state)
    }

    pub fn acked_state(&self) -> Option<&ChannelState> {
        self.channel.as_ref().map(|c| &c.acked)
    }

    /// Rolls back to the last mutually acknowledged state, or discards
    /// the channel entirely if funding never reached the chain.
    pub fn abort(&mut self) {
        let Some(ctx) = self.channel.as_mut() else {
            return;
        };
        if !ctx.funding_broadcast {
            self.channel = None;
            return;
        }
        ctx.state = ctx.acked.clone();
        let keep = ctx.state.index;
        ctx.states.retain(|i, _| *i <= keep);
        ctx.payment = None;
        ctx.pending_forward = None;
        if ctx.phase != Phase::Closed {
            ctx.phase = if ctx.sent_locked && ctx.recv_locked {
                Phase::Ready
            } else {
                Phase::Locking
            };
        }
    }

    fn peer_out(
        &mut self,
        to: Role,
        body: PeerBody,
        out: &mut Vec<OutMsg>,
    ) -> Result<(), ProtocolError> {
        let (channel_id, seq) = match to {
            Role::Gateway => {
                let id = self.channel.as_ref().map(|c| c.id).unwrap_or(0);
                let seq = self.peer_seq_out;
                self.peer_seq_out += 1;
                (id, seq)
            }
            Role::Remote => {
                let seq = self.remote_seq_out;
                self.remote_seq_out += 1;
                (0, seq)
            }
            _ => return Err(ProtocolError::Malformed("bridge has no such link")),
        };
        let env = Envelope {
            channel_id,
            seq,
            body,
        };
        let bytes = wire::encode_peer(&self.curve, &env)?.len();
        out.push(OutMsg::Event(TraceEvent::Peer {
            from: Role::Bridge,
            to,
            kind: env.body.kind(),
            bytes,
        }));
        out.push(OutMsg::ToPeer { to, env });
        Ok(())
    }

    fn op(&self, kind: OpKind, out: &mut Vec<OutMsg>) {
        out.push(OutMsg::Event(TraceEvent::Op {
            role: Role::Bridge,
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

    fn solo_sign(&mut self, digest: &MessageDigest) -> EcdsaSignature {
        sign_with_retry(&self.curve, &self.funding_secret, digest, &mut self.rng)
    }

    fn phase(&self) -> Phase {
        self.channel
            .as_ref()
            .map(|c| c.phase)
            .unwrap_or(Phase::Idle)
    }

    // ---- peer input ------------------------------------------------------

    pub fn on_peer(&mut self, from: Role, env: Envelope) -> Result<Vec<OutMsg>, ProtocolError> {
        let seq_slot = match from {
            Role::Gateway => &mut self.peer_seq_in,
            Role::Remote => &mut self.remote_seq_in,
            _ => return Err(ProtocolError::Malformed("bridge has no such link")),
        };
        if let Some(last) = *seq_slot {
            if env.seq <= last {
                return Err(ProtocolError::BadSequence);
            }
        }
        *seq_slot = Some(env.seq);

        if from == Role::Remote {
            return self.on_remote(env.body);
        }
        if let Some(ctx) = self.channel.as_ref() {
            if env.channel_id != ctx.id {
                return Err(ProtocolError::BadChannel);
            }
        }
        match env.body {
            PeerBody::OpenChannel {
                funding_pubkey,
                capacity,
                device_key,
                service_fee_ppm,
                open_fee,
                close_fee,
            } => self.on_open_channel(
                env.channel_id,
                funding_pubkey,
                capacity,
                device_key,
                service_fee_ppm,
                open_fee,
                close_fee,
            ),
            PeerBody::FundingCreated {
                funding_outpoint,
                commitment_signature,
                first_commitment_point,
            } => self.on_funding_created(
                funding_outpoint,
                commitment_signature,
                first_commitment_point,
            ),
            PeerBody::FundingLocked => self.on_funding_locked(),
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload,
            } => self.on_update_add_htlc(amount, payment_hash, routed_payload),
            PeerBody::CommitmentSigned { commit_sig, .. } => self.on_commitment_signed(commit_sig),
            PeerBody::RevokeAndAck {
                prior_revocation_secret,
                next_commitment_point,
            } => self.on_revoke_and_ack(prior_revocation_secret, next_commitment_point),
            PeerBody::UpdateFulfillHtlc { preimage } => self.on_gw_fulfill(preimage),
            PeerBody::Shutdown { initiator } => self.on_shutdown(initiator),
            PeerBody::ClosingSigned {
                fee_offer,
                signature,
            } => self.on_closing_signed(fee_offer, signature),
            PeerBody::AcceptChannel { .. } | PeerBody::FundingSigned { .. } => {
                Err(ProtocolError::UnexpectedMessage {
                    role: Role::Bridge,
                    kind: env.body.kind(),
                })
            }
        }
    }

    fn on_open_channel(
        &mut self,
        channel_id: ChannelId,
        joint_key: GroupPoint,
        capacity: Satoshi,
        device_key: GroupPoint,
        service_fee_ppm: u32,
        open_fee: Satoshi,
        close_fee: Satoshi,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.channel.is_some() {
            return Err(ProtocolError::Refused("channel already exists"));
        }
        if !self.accept_opens {
            return Err(ProtocolError::Refused("not accepting channels"));
        }
        let seed: [u8; 32] = self.rng.gen();
        let series = BridgeStateSeries::new(&self.curve, seed);
        let first = series.point(0);
        let next = series.point(1);
        let mut params = ChannelParams::new(capacity);
        params.service_fee_ppm = service_fee_ppm;
        params.open_fee = open_fee;
        params.close_fee = close_fee;
        self.channel = Some(BridgeChannel {
            id: channel_id,
            params,
            keys: ChannelKeys {
                iot_key: device_key,
                joint_key,
                bridge_key: self.funding_key.clone(),
            },
            series,
            funding: OutPoint {
                txid: MessageDigest([0u8; 32]),
                vout: 0,
            },
            state: ChannelState::initial(capacity),
            acked: ChannelState::initial(capacity),
            states: BTreeMap::from([(0, ChannelState::initial(capacity))]),
            gw_points: BTreeMap::new(),
            gw_secrets: BTreeMap::new(),
            joint_sigs: BTreeMap::new(),
            sent_locked: false,
            recv_locked: false,
            funding_broadcast: false,
            payment: None,
            pending_forward: None,
            expected_closing: None,
            own_txids: HashSet::new(),
            phase: Phase::AwaitFundingCreated,
        });
        let mut out = Vec::new();
        self.peer_out(
            Role::Gateway,
            PeerBody::AcceptChannel {
                funding_pubkey: self.funding_key.clone(),
                first_commitment_point: first,
                next_commitment_point: next,
            },
            &mut out,
        )?;
        Ok(out)
    }

    fn on_funding_created(
        &mut self,
        funding: OutPoint,
        signature: EcdsaSignature,
        first_point: GroupPoint,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase() != Phase::AwaitFundingCreated {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: "funding_created",
            });
        }
        let (own_digest, joint_key) = {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            ctx.funding = funding;
            ctx.gw_points.insert(0, first_point);
            let digest = ctx.layout(Holder::Bridge, 0)?.template.sighash(&self.curve);
            (digest, ctx.keys.joint_key.clone())
        };
        if !ecdsa_verify(&self.curve, &joint_key, &own_digest, &signature) {
            return Err(ProtocolError::BadSignature);
        }
        let gw_digest = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            ctx.layout(Holder::JointNode, 0)?
                .template
                .sighash(&self.curve)
        };
        let solo = self.solo_sign(&gw_digest);
        {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            ctx.joint_sigs.insert(0, signature);
            ctx.funding_broadcast = true;
            ctx.phase = Phase::AwaitDepth;
        }
        let mut out = Vec::new();
        self.peer_out(
            Role::Gateway,
            PeerBody::FundingSigned {
                commitment_signature: solo,
            },
            &mut out,
        )?;
        out.push(OutMsg::Chain(ChainAction::WatchDepth {
            txid: funding.txid,
            depth: 3,
        }));
        Ok(out)
    }

    fn on_funding_locked(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
        match ctx.phase {
            Phase::AwaitDepth => {
                ctx.recv_locked = true;
            }
            Phase::Locking => {
                ctx.recv_locked = true;
                if ctx.sent_locked {
                    ctx.phase = Phase::Ready;
                }
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Bridge,
                    kind: "funding_locked",
                })
            }
        }
        Ok(Vec::new())
    }

    /// The joint side pays out toward a remote destination. The gross
    /// amount and the net the payload asks to forward must agree with
    /// this channel's fee schedule, replayed locally.
    fn on_update_add_htlc(
        &mut self,
        amount: Satoshi,
        payment_hash: MessageDigest,
        payload: RoutedPayload,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase() != Phase::Ready {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: "update_add_htlc",
            });
        }
        if Some(payload.next_hop) != self.remote_node_id {
            return Err(ProtocolError::UnknownDestination);
        }
        if payload.payment_hash != payment_hash {
            return Err(ProtocolError::Malformed("payload hash mismatch"));
        }
        let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
        let (next, htlc) = ctx.state.apply_send(amount, payment_hash, &ctx.params)?;
        if htlc.amount != payload.amount {
            return Err(ProtocolError::FeeMismatch);
        }
        ctx.payment = Some(Payment {
            htlc_id: htlc.id,
            payment_hash,
        });
        ctx.pending_forward = Some(PeerBody::UpdateAddHtlc {
            amount: payload.amount,
            payment_hash,
            routed_payload: payload,
        });
        ctx.states.insert(next.index, next.clone());
        ctx.state = next;
        ctx.phase = Phase::SendAwaitJointCommit;
        Ok(Vec::new())
    }

    fn on_commitment_signed(
        &mut self,
        commit_sig: EcdsaSignature,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        let (cur, digest, joint_key) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            let cur = ctx.state.index;
            let digest = ctx
                .layout(Holder::Bridge, cur)?
                .template
                .sighash(&self.curve);
            (cur, digest, ctx.keys.joint_key.clone())
        };
        if !ecdsa_verify(&self.curve, &joint_key, &digest, &commit_sig) {
            return Err(ProtocolError::BadSignature);
        }
        let phase = self.phase();
        let mut out = Vec::new();
        match phase {
            Phase::SendAwaitJointCommit => {
                self.store_joint_sig(cur, commit_sig);
                self.send_revocation(cur - 1, &mut out)?;
                self.send_solo_commitment(cur, &mut out)?;
                self.set_phase(Phase::SendAwaitGwRevoke);
            }
            Phase::SendAwaitJointCommit2 => {
                self.store_joint_sig(cur, commit_sig);
                self.send_revocation(cur - 1, &mut out)?;
                self.ack_current();
                self.set_phase(Phase::Ready);
            }
            Phase::RecvAwaitJointCommit1 => {
                self.store_joint_sig(cur, commit_sig);
                self.send_revocation(cur - 1, &mut out)?;
                self.set_phase(Phase::RecvAwaitGwFulfill);
            }
            Phase::RecvAwaitJointCommit2 => {
                self.store_joint_sig(cur, commit_sig);
                self.send_revocation(cur - 1, &mut out)?;
                self.send_solo_commitment(cur, &mut out)?;
                self.set_phase(Phase::RecvAwaitGwRevoke2);
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Bridge,
                    kind: "commitment_signed",
                })
            }
        }
        Ok(out)
    }

    fn store_joint_sig(&mut self, state: u64, sig: EcdsaSignature) {
        if let Some(ctx) = self.channel.as_mut() {
            ctx.joint_sigs.insert(state, sig);
        }
    }

    fn set_phase(&mut self, phase: Phase) {
        if let Some(ctx) = self.channel.as_mut() {
            ctx.phase = phase;
        }
    }

    fn ack_current(&mut self) {
        if let Some(ctx) = self.channel.as_mut() {
            ctx.acked = ctx.state.clone();
        }
    }

    /// Reveals the secret for `revoked` and announces the point two
    /// states ahead of it, keeping the announcements one ahead of the
    /// signed state.
    fn send_revocation(&mut self, revoked: u64, out: &mut Vec<OutMsg>) -> Result<(), ProtocolError> {
        let (secret, next_point) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            (ctx.series.secret(revoked), ctx.series.point(revoked + 2))
        };
        self.peer_out(
            Role::Gateway,
            PeerBody::RevokeAndAck {
                prior_revocation_secret: secret,
                next_commitment_point: next_point,
            },
            out,
        )
    }

    /// Solo-signs the joint side's commitment for `state` and sends it.
    fn send_solo_commitment(&mut self, state: u64, out: &mut Vec<OutMsg>) -> Result<(), ProtocolError> {
        let digest = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            ctx.layout(Holder::JointNode, state)?
                .template
                .sighash(&self.curve)
        };
        let sig = self.solo_sign(&digest);
        self.peer_out(
            Role::Gateway,
            PeerBody::CommitmentSigned {
                commit_sig: sig,
                htlc_sigs: Vec::new(),
            },
            out,
        )
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
            let idx = point_index_for_state(prior);
            let expect = ctx
                .gw_points
                .get(&idx)
                .ok_or(ProtocolError::Malformed("unknown prior point"))?;
            if curve.mul_g(&secret) != *expect {
                return Err(ProtocolError::BadPoint);
            }
            ctx.gw_secrets.insert(idx, secret);
            ctx.gw_points.insert(ctx.state.index + 1, next_point);
        }
        let mut out = Vec::new();
        match self.phase() {
            Phase::SendAwaitGwRevoke => {
                // The payer's old state is dead; safe to release the
                // payment onward.
                let forward = self
                    .channel
                    .as_mut()
                    .and_then(|c| c.pending_forward.take())
                    .ok_or(ProtocolError::Malformed("nothing to forward"))?;
                self.peer_out(Role::Remote, forward, &mut out)?;
                self.set_phase(Phase::SendAwaitRemoteFulfill);
            }
            Phase::SendAwaitGwRevoke2 => {
                self.set_phase(Phase::SendAwaitJointCommit2);
            }
            Phase::RecvAwaitGwRevoke1 => {
                self.set_phase(Phase::RecvAwaitJointCommit1);
            }
            Phase::RecvAwaitGwRevoke2 => {
                self.ack_current();
                self.set_phase(Phase::Ready);
            }
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Bridge,
                    kind: "revoke_and_ack",
                })
            }
        }
        Ok(out)
    }

    /// Preimage arriving from the gateway: an inbound payment the
    /// device just accepted. Settle and pass the receipt to the payer.
    fn on_gw_fulfill(&mut self, preimage: [u8; 32]) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase() != Phase::RecvAwaitGwFulfill {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: "update_fulfill_htlc",
            });
        }
        self.settle_in_flight(preimage)?;
        let mut out = Vec::new();
        self.peer_out(Role::Remote, PeerBody::UpdateFulfillHtlc { preimage }, &mut out)?;
        self.set_phase(Phase::RecvAwaitJointCommit2);
        Ok(out)
    }

    fn settle_in_flight(&mut self, preimage: [u8; 32]) -> Result<(), ProtocolError> {
        let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
        let pay = ctx
            .payment
            .as_ref()
            .ok_or(ProtocolError::Malformed("no payment in flight"))?;
        if sha256(&preimage) != pay.payment_hash {
            return Err(ProtocolError::BadPreimage);
        }
        let settled = ctx.state.settle_htlc(pay.htlc_id, Settlement::Fulfill)?;
        ctx.states.insert(settled.index, settled.clone());
        ctx.state = settled;
        ctx.payment = None;
        Ok(())
    }

    fn on_shutdown(&mut self, initiator: CloseInitiator) -> Result<Vec<OutMsg>, ProtocolError> {
        match self.phase() {
            Phase::Ready => {
                let mut out = Vec::new();
                self.peer_out(Role::Gateway, PeerBody::Shutdown { initiator }, &mut out)?;
                self.set_phase(Phase::CloseNegotiate { initiator });
                Ok(out)
            }
            // Echo of a shutdown this side sent; the fee offers follow.
            Phase::CloseNegotiate { initiator: mine } if initiator == mine => Ok(Vec::new()),
            _ => Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: "shutdown",
            }),
        }
    }

    fn on_closing_signed(
        &mut self,
        fee_offer: Satoshi,
        signature: EcdsaSignature,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        let initiator = match self.phase() {
            Phase::CloseNegotiate { initiator } => initiator,
            _ => {
                return Err(ProtocolError::UnexpectedMessage {
                    role: Role::Bridge,
                    kind: "closing_signed",
                })
            }
        };
        let (digest, joint_key, target_fee) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            let template =
                closing_template(&ctx.keys, &ctx.state, initiator, fee_offer, ctx.funding)?;
            (
                template.sighash(&self.curve),
                ctx.keys.joint_key.clone(),
                ctx.params.close_fee,
            )
        };
        if !ecdsa_verify(&self.curve, &joint_key, &digest, &signature) {
            return Err(ProtocolError::BadSignature);
        }
        let mut out = Vec::new();
        if fee_offer == target_fee {
            // Agreement; the joint side holds both signatures and
            // broadcasts.
            if let Some(ctx) = self.channel.as_mut() {
                ctx.expected_closing = Some(digest);
                ctx.phase = Phase::Closed;
            }
            return Ok(out);
        }
        // Counter at the standard fee with this side's own signature.
        let counter_digest = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            closing_template(&ctx.keys, &ctx.state, initiator, target_fee, ctx.funding)?
                .sighash(&self.curve)
        };
        let counter_sig = self.solo_sign(&counter_digest);
        self.peer_out(
            Role::Gateway,
            PeerBody::ClosingSigned {
                fee_offer: target_fee,
                signature: counter_sig,
            },
            &mut out,
        )?;
        Ok(out)
    }

    // ---- remote link -------------------------------------------------------

    fn on_remote(&mut self, body: PeerBody) -> Result<Vec<OutMsg>, ProtocolError> {
        match body {
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload,
            } => self.on_remote_add(amount, payment_hash, routed_payload),
            PeerBody::UpdateFulfillHtlc { preimage } => self.on_remote_fulfill(preimage),
            _ => Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: body.kind(),
            }),
        }
    }

    /// A remote payer routes toward the channel. The bridge fronts the
    /// amount on the channel and recovers it from the payer on fulfill;
    /// forwarding toward the device carries no channel fee.
    fn on_remote_add(
        &mut self,
        amount: Satoshi,
        payment_hash: MessageDigest,
        payload: RoutedPayload,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase() != Phase::Ready {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: "update_add_htlc",
            });
        }
        if Some(payload.next_hop) != self.gw_node_id {
            return Err(ProtocolError::UnknownDestination);
        }
        if payload.amount != amount || payload.payment_hash != payment_hash {
            return Err(ProtocolError::Malformed("payload does not match"));
        }
        {
            let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
            let (next, htlc) = ctx.state.apply_receive(amount, payment_hash)?;
            ctx.payment = Some(Payment {
                htlc_id: htlc.id,
                payment_hash,
            });
            ctx.states.insert(next.index, next.clone());
            ctx.state = next;
        }
        let mut out = Vec::new();
        self.peer_out(
            Role::Gateway,
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload: payload,
            },
            &mut out,
        )?;
        let cur = self
            .channel
            .as_ref()
            .ok_or(ProtocolError::BadChannel)?
            .state
            .index;
        self.send_solo_commitment(cur, &mut out)?;
        self.set_phase(Phase::RecvAwaitGwRevoke1);
        Ok(out)
    }

    /// Receipt for a forwarded outbound payment: the destination
    /// released the preimage. Settle the channel leg and relay the
    /// proof to the gateway.
    fn on_remote_fulfill(&mut self, preimage: [u8; 32]) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase() != Phase::SendAwaitRemoteFulfill {
            return Err(ProtocolError::UnexpectedMessage {
                role: Role::Bridge,
                kind: "update_fulfill_htlc",
            });
        }
        self.settle_in_flight(preimage)?;
        let mut out = Vec::new();
        self.peer_out(
            Role::Gateway,
            PeerBody::UpdateFulfillHtlc { preimage },
            &mut out,
        )?;
        let cur = self
            .channel
            .as_ref()
            .ok_or(ProtocolError::BadChannel)?
            .state
            .index;
        self.send_solo_commitment(cur, &mut out)?;
        self.set_phase(Phase::SendAwaitGwRevoke2);
        Ok(out)
    }

    // ---- chain ---------------------------------------------------------

    pub fn on_chain(&mut self, ev: ChainEvent) -> Result<Vec<OutMsg>, ProtocolError> {
        match ev {
            ChainEvent::NewBlock { .. } => Ok(Vec::new()),
            ChainEvent::DepthReached { txid, .. } => {
                let ctx = self.channel.as_mut().ok_or(ProtocolError::BadChannel)?;
                if ctx.phase != Phase::AwaitDepth || txid != ctx.funding.txid {
                    return Ok(Vec::new());
                }
                ctx.sent_locked = true;
                ctx.phase = if ctx.recv_locked {
                    Phase::Ready
                } else {
                    Phase::Locking
                };
                let mut out = Vec::new();
                self.peer_out(Role::Gateway, PeerBody::FundingLocked, &mut out)?;
                Ok(out)
            }
        }
    }

    /// Reacts to a spend of the channel anchor this side did not make:
    /// the negotiated close, an honest unilateral close, or a revoked
    /// joint commitment, which gets its delayed output swept.
    pub fn on_funding_spent(&mut self, tx: &Transaction) -> Result<Vec<OutMsg>, ProtocolError> {
        let txid = tx.txid(&self.curve);
        let (is_own, expected_closing, cur, state_indices) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            (
                ctx.own_txids.contains(&txid),
                ctx.expected_closing,
                ctx.state.index,
                ctx.states.keys().copied().collect::<Vec<u64>>(),
            )
        };
        if is_own {
            return Ok(Vec::new());
        }
        if expected_closing == Some(txid) {
            self.set_phase(Phase::Closed);
            return Ok(Vec::new());
        }
        let mut matched = None;
        for s in state_indices {
            let ctx = self.channel.as_ref().expect("checked above");
            if let Ok(layout) = ctx.layout(Holder::JointNode, s) {
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
            self.set_phase(Phase::Closed);
            return Ok(out);
        }
        let vout = layout
            .holder_vout
            .ok_or(ProtocolError::Malformed("revoked state has no delayed output"))?;
        let value = layout.template.outputs[vout as usize].value;
        let secret = {
            let ctx = self.channel.as_ref().expect("checked above");
            ctx.gw_secrets
                .get(&point_index_for_state(state))
                .cloned()
                .ok_or(ProtocolError::Malformed("no revocation secret held"))?
        };
        let dest = self.funding_key.clone();
        let sweep = sweep_template(OutPoint { txid, vout }, value, 0, &dest, 2_000_000 + state);
        let digest = sweep.sighash(&self.curve);
        let sig = sign_with_retry(&self.curve, &secret, &digest, &mut self.rng);
        let sweep_tx = sweep.into_transaction(vec![Witness::Revocation(sig)]);
        let sweep_txid = self.submit(sweep_tx, &mut out);
        self.op(OpKind::Punish { state }, &mut out);
        self.set_phase(Phase::Closed);
        out.push(OutMsg::Done(FlowOutcome::Punished {
            txid: sweep_txid,
            amount: value,
        }));
        Ok(out)
    }

    /// Bridge-initiated cooperative close; the fee comes out of the
    /// bridge's balance.
    pub fn request_close(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        if self.phase() != Phase::Ready {
            return Err(ProtocolError::Refused("channel not ready"));
        }
        let initiator = CloseInitiator::Bridge;
        let mut out = Vec::new();
        self.peer_out(Role::Gateway, PeerBody::Shutdown { initiator }, &mut out)?;
        self.set_phase(Phase::CloseNegotiate { initiator });
        Ok(out)
    }

    // ---- unilateral exits ----------------------------------------------

    /// Broadcasts this side's current commitment. Both signatures are
    /// already on hand; no interaction with anyone.
    pub fn force_close(&mut self) -> Result<Vec<OutMsg>, ProtocolError> {
        let cur = self
            .channel
            .as_ref()
            .ok_or(ProtocolError::BadChannel)?
            .state
            .index;
        self.broadcast_state(cur)
    }

    /// Broadcasts an old, revoked commitment: the cheating move the
    /// punishment path exists for.
    pub fn broadcast_revoked(&mut self, state: u64) -> Result<Vec<OutMsg>, ProtocolError> {
        self.broadcast_state(state)
    }

    fn broadcast_state(&mut self, state: u64) -> Result<Vec<OutMsg>, ProtocolError> {
        let (template, joint_sig) = {
            let ctx = self.channel.as_ref().ok_or(ProtocolError::BadChannel)?;
            let layout = ctx.layout(Holder::Bridge, state)?;
            let joint_sig = ctx
                .joint_sigs
                .get(&state)
                .cloned()
                .ok_or(ProtocolError::Malformed("no joint signature held"))?;
            (layout.template, joint_sig)
        };
        let digest = template.sighash(&self.curve);
        let solo = self.solo_sign(&digest);
        let tx = template.into_transaction(vec![Witness::TwoKeys(joint_sig, solo)]);
        let mut out = Vec::new();
        let txid = self.submit(tx, &mut out);
        self.op(OpKind::BroadcastCommitment { state }, &mut out);
        self.set_phase(Phase::Closed);
        out.push(OutMsg::Done(FlowOutcome::ForceClosed { txid, state }));
        Ok(out)
    }
}
