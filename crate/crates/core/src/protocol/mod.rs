//! Message formats and per-role state machines for the four channel
//! flows: open, send, receive, and close.
//!
//! Three links exist. The device and the gateway speak over a short
//! frame link carrying sealed control commands plus the interactive
//! threshold rounds. The gateway and the bridge speak the peer
//! protocol (funding, commitments, revocations, closing). The bridge
//! reaches the remote sender or destination over the same peer framing.
//!
//! Machines never share state; everything they learn arrives in a
//! message or a chain notification, and everything they decide leaves
//! as an output the caller routes. One machine handles one channel.

mod bridge;
mod device;
mod flows;
mod frame;
mod gateway;
mod remote;
mod wire;

pub use bridge::BridgeMachine;
pub use device::DeviceMachine;
pub use flows::{
    close_channel_flow, open_channel_flow, receive_payment_flow, send_payment_flow, CloseMode,
    FlowReport, Network, NetworkConfig,
};
pub use frame::{open_frame, seal_frame, ControlFrame, CONTROL_FRAME_LEN};
pub use gateway::GatewayMachine;
pub use remote::RemoteMachine;
pub use wire::{decode_peer, encode_peer};

use crate::channel::{ChannelError, CloseInitiator, TxTemplate};
use crate::crypto::{CurveParams, EcdsaSignature, GroupPoint, MessageDigest, Scalar};
use crate::ledger::{LedgerError, OutPoint, Satoshi, Transaction};
use crate::threshold::{RoundMessage, ThresholdError};

pub type ChannelId = u64;
pub type NodeId = u64;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Role {
    Device,
    Gateway,
    Bridge,
    Remote,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Device => "device",
            Role::Gateway => "gateway",
            Role::Bridge => "bridge",
            Role::Remote => "remote",
        })
    }
}

/// Commands and acknowledgements on the device link. These are the
/// bodies sealed into the fixed 57-byte control frames.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ControlBody {
    OpenChannelRequest {
        capacity: Satoshi,
        bridge_node_id: NodeId,
    },
    SendPayment {
        amount: Satoshi,
        destination_node_id: NodeId,
    },
    ChannelClosingRequest,
    PaymentSendSuccess,
    PaymentReceiveSuccess,
}

impl ControlBody {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlBody::OpenChannelRequest { .. } => "open_channel_request",
            ControlBody::SendPayment { .. } => "send_payment",
            ControlBody::ChannelClosingRequest => "channel_closing_request",
            ControlBody::PaymentSendSuccess => "payment_send_success",
            ControlBody::PaymentReceiveSuccess => "payment_receive_success",
        }
    }
}

/// The cleartext routing instruction carried by an HTLC. A stand-in
/// for onion routing, which is out of scope: the threat model has no
/// network adversary.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RoutedPayload {
    pub next_hop: NodeId,
    /// Amount forwarded to the next hop, net of the service fee.
    pub amount: Satoshi,
    pub payment_hash: MessageDigest,
}

/// Peer-protocol message bodies. Field sets follow the flow figures,
/// extended with the public keys and per-state commitment points the
/// counterparty physically needs to build and verify transactions.
#[derive(Clone, PartialEq, Debug)]
pub enum PeerBody {
    OpenChannel {
        funding_pubkey: GroupPoint,
        capacity: Satoshi,
        device_key: GroupPoint,
        service_fee_ppm: u32,
        open_fee: Satoshi,
        close_fee: Satoshi,
    },
    AcceptChannel {
        funding_pubkey: GroupPoint,
        first_commitment_point: GroupPoint,
        next_commitment_point: GroupPoint,
    },
    FundingCreated {
        funding_outpoint: OutPoint,
        commitment_signature: EcdsaSignature,
        first_commitment_point: GroupPoint,
    },
    FundingSigned {
        commitment_signature: EcdsaSignature,
    },
    FundingLocked,
    UpdateAddHtlc {
        /// Amount leaving the payer, fee included.
        amount: Satoshi,
        payment_hash: MessageDigest,
        routed_payload: RoutedPayload,
    },
    CommitmentSigned {
        commit_sig: EcdsaSignature,
        htlc_sigs: Vec<EcdsaSignature>,
    },
    RevokeAndAck {
        prior_revocation_secret: Scalar,
        next_commitment_point: GroupPoint,
    },
    UpdateFulfillHtlc {
        preimage: [u8; 32],
    },
    Shutdown {
        initiator: CloseInitiator,
    },
    ClosingSigned {
        fee_offer: Satoshi,
        signature: EcdsaSignature,
    },
}

impl PeerBody {
    pub fn kind(&self) -> &'static str {
        match self {
            PeerBody::OpenChannel { .. } => "open_channel",
            PeerBody::AcceptChannel { .. } => "accept_channel",
            PeerBody::FundingCreated { .. } => "funding_created",
            PeerBody::FundingSigned { .. } => "funding_signed",
            PeerBody::FundingLocked => "funding_locked",
            PeerBody::UpdateAddHtlc { .. } => "update_add_htlc",
            PeerBody::CommitmentSigned { .. } => "commitment_signed",
            PeerBody::RevokeAndAck { .. } => "revoke_and_ack",
            PeerBody::UpdateFulfillHtlc { .. } => "update_fulfill_htlc",
            PeerBody::Shutdown { .. } => "shutdown",
            PeerBody::ClosingSigned { .. } => "closing_signed",
        }
    }
}

/// Every peer message rides in an envelope naming the channel and a
/// per-sender sequence number that must increase strictly.
#[derive(Clone, PartialEq, Debug)]
pub struct Envelope {
    pub channel_id: ChannelId,
    pub seq: u64,
    pub body: PeerBody,
}

/// Traffic on the device link: sealed control frames, threshold
/// rounds, and the funding signature exchange.
#[derive(Clone, PartialEq, Debug)]
pub enum DeviceLinkMsg {
    Frame(ControlFrame),
    Round(RoundMessage),
    FundingSignRequest { template: TxTemplate },
    FundingSignature { signature: EcdsaSignature },
}

impl DeviceLinkMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            DeviceLinkMsg::Frame(_) => "control_frame",
            DeviceLinkMsg::Round(m) => round_kind(m),
            DeviceLinkMsg::FundingSignRequest { .. } => "funding_sign_request",
            DeviceLinkMsg::FundingSignature { .. } => "funding_signature",
        }
    }
}

fn round_kind(m: &RoundMessage) -> &'static str {
    match m {
        RoundMessage::KeygenCommit { .. } => "keygen_commit",
        RoundMessage::KeygenReveal { .. } => "keygen_reveal",
        RoundMessage::KeygenRevealDevice { .. } => "keygen_reveal_device",
        RoundMessage::KeygenFinish { .. } => "keygen_finish",
        RoundMessage::KeygenFinishAck { .. } => "keygen_finish_ack",
        RoundMessage::SignInit { .. } => "sign_init",
        RoundMessage::SignNonceCommit { .. } => "sign_nonce_commit",
        RoundMessage::SignNonceReveal { .. } => "sign_nonce_reveal",
        RoundMessage::SignNonceRevealDevice { .. } => "sign_nonce_reveal_device",
        RoundMessage::SignCiphertext { .. } => "sign_ciphertext",
        RoundMessage::SignComplete { .. } => "sign_complete",
        RoundMessage::SignAbort { .. } => "sign_abort",
        RoundMessage::DeriveRequest { .. } => "derive_request",
        RoundMessage::DeriveConfirm { .. } => "derive_confirm",
        RoundMessage::RevealRequest { .. } => "reveal_request",
        RoundMessage::RevealContribution { .. } => "reveal_contribution",
    }
}

/// Requests a machine makes of the chain, executed by the caller.
#[derive(Clone, PartialEq, Debug)]
pub enum ChainAction {
    Submit(Transaction),
    WatchDepth { txid: MessageDigest, depth: u64 },
}

/// Chain facts delivered to a machine.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ChainEvent {
    DepthReached { txid: MessageDigest, depth: u64 },
    NewBlock { height: u64 },
}

/// Threshold and transaction work a machine performed, recorded for
/// trace conformance checks and operation counting.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OpKind {
    Keygen,
    DeriveChild { index: u64 },
    RevealSecret { index: u64 },
    ThresholdSign { digest: MessageDigest },
    AddHtlc,
    BuildFunding,
    BuildCommitments,
    BroadcastFunding,
    FundingDepth { depth: u64 },
    BroadcastClosing,
    BroadcastCommitment { state: u64 },
    Punish { state: u64 },
}

impl OpKind {
    fn step(&self) -> Option<&'static str> {
        Some(match self {
            OpKind::Keygen => "tkeygen",
            OpKind::DeriveChild { .. } => "derive_child",
            OpKind::ThresholdSign { .. } => "tsign",
            OpKind::AddHtlc => "add_htlc",
            OpKind::BuildFunding => "build_funding",
            OpKind::BuildCommitments => "build_commitments",
            OpKind::BroadcastFunding => "broadcast_funding",
            OpKind::FundingDepth { .. } => "funding_depth_3",
            OpKind::BroadcastClosing => "broadcast_closing",
            OpKind::BroadcastCommitment { .. } => "broadcast_commitment",
            OpKind::RevealSecret { .. } | OpKind::Punish { .. } => return None,
        })
    }
}

/// One observable event. Message events are recorded by the sender;
/// `bytes` is the encoded wire size.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TraceEvent {
    Control {
        from: Role,
        to: Role,
        kind: &'static str,
        bytes: usize,
    },
    Peer {
        from: Role,
        to: Role,
        kind: &'static str,
        bytes: usize,
    },
    Link {
        from: Role,
        to: Role,
        kind: &'static str,
        bytes: usize,
    },
    Op {
        role: Role,
        kind: OpKind,
    },
    FlowDone {
        flow: &'static str,
    },
}

/// Projects a trace onto the step names of the flow figures: control
/// commands, peer messages between the gateway and the bridge, and the
/// named operations. Threshold round traffic and secret reveals are
/// below step granularity; the paired funding_locked exchange is one
/// step.
pub fn step_sequence(trace: &[TraceEvent]) -> Vec<&'static str> {
    let mut steps: Vec<&'static str> = Vec::new();
    for ev in trace {
        let step = match ev {
            TraceEvent::Control { kind, .. } => Some(*kind),
            TraceEvent::Peer { from, to, kind, .. } => {
                let between_channel_peers = matches!(
                    (from, to),
                    (Role::Gateway, Role::Bridge) | (Role::Bridge, Role::Gateway)
                );
                if between_channel_peers {
                    Some(*kind)
                } else {
                    None
                }
            }
            TraceEvent::Op { kind, .. } => kind.step(),
            TraceEvent::Link { .. } | TraceEvent::FlowDone { .. } => None,
        };
        if let Some(s) = step {
            if s == "funding_locked" && steps.last() == Some(&"funding_locked") {
                continue;
            }
            steps.push(s);
        }
    }
    steps
}

/// Everything a machine hands back from one input.
#[derive(Clone, PartialEq, Debug)]
pub enum OutMsg {
    ToDevice(DeviceLinkMsg),
    ToGateway(DeviceLinkMsg),
    ToPeer { to: Role, env: Envelope },
    Chain(ChainAction),
    Event(TraceEvent),
    Done(FlowOutcome),
}

/// Terminal result of a flow, surfaced to the caller.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FlowOutcome {
    Opened {
        channel_id: ChannelId,
        funding_txid: MessageDigest,
    },
    Sent {
        amount: Satoshi,
        fee: Satoshi,
    },
    Received {
        amount: Satoshi,
    },
    Closed {
        txid: MessageDigest,
        fee: Satoshi,
    },
    ForceClosed {
        txid: MessageDigest,
        state: u64,
    },
    /// A revoked broadcast was detected and swept.
    Punished {
        txid: MessageDigest,
        amount: Satoshi,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("{role} cannot accept {kind} in its current phase")]
    UnexpectedMessage { role: Role, kind: &'static str },
    #[error("sequence number did not increase")]
    BadSequence,
    #[error("unknown or mismatched channel id")]
    BadChannel,
    #[error("signature check failed")]
    BadSignature,
    #[error("preimage does not match the payment hash")]
    BadPreimage,
    #[error("commitment point does not match the revealed secret")]
    BadPoint,
    #[error("fee does not match the agreed rate")]
    FeeMismatch,
    #[error("counterparty refused a threshold round")]
    ThresholdRefused,
    #[error("invoice rejected: {0}")]
    InvoiceInvalid(&'static str),
    #[error("no route to the requested destination")]
    UnknownDestination,
    #[error("refused: {0}")]
    Refused(&'static str),
    #[error("flow timed out waiting for a response")]
    Timeout,
    #[error("party is offline")]
    Offline,
    #[error("frame authentication failed")]
    FrameAuth,
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// A payment invoice. The destination signs the payment terms with its
/// node key; a payer validates the terms before committing funds.
#[derive(Clone, PartialEq, Debug)]
pub struct InvoiceRecord {
    pub destination: NodeId,
    pub amount: Satoshi,
    pub expiry_height: u64,
    pub payment_hash: MessageDigest,
    pub signature: EcdsaSignature,
}

impl InvoiceRecord {
    pub fn signing_digest(
        destination: NodeId,
        amount: Satoshi,
        expiry_height: u64,
        payment_hash: &MessageDigest,
    ) -> MessageDigest {
        crate::crypto::sha256_parts(
            "invoice",
            &[
                &destination.to_be_bytes(),
                &amount.to_be_bytes(),
                &expiry_height.to_be_bytes(),
                payment_hash.as_bytes(),
            ],
        )
    }

    pub fn verify(&self, curve: &CurveParams, node_key: &GroupPoint) -> bool {
        let digest = Self::signing_digest(
            self.destination,
            self.amount,
            self.expiry_height,
            &self.payment_hash,
        );
        crate::crypto::ecdsa_verify(curve, node_key, &digest, &self.signature)
    }
}
