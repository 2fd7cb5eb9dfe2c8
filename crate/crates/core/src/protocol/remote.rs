//! The far end of a routed payment: a plain network node one hop past
//! the bridge. As a destination it holds preimages and releases them
//! for value; as a payer it offers a payment toward the channel and
//! waits for the preimage receipt.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    wire, Envelope, InvoiceRecord, NodeId, OutMsg, PeerBody, ProtocolError, Role, RoutedPayload,
    TraceEvent,
};
use crate::crypto::{sha256, CurveParams, GroupPoint, MessageDigest, Scalar};
use crate::ledger::Satoshi;

pub struct RemoteMachine {
    curve: CurveParams,
    rng: ChaCha20Rng,
    node_id: NodeId,
    node_secret: Scalar,
    preimages: HashMap<MessageDigest, [u8; 32]>,
    pending_send: Option<MessageDigest>,
    last_receipt: Option<[u8; 32]>,
    seq_out: u64,
    seq_in: Option<u64>,
    /// When true, incoming payments are accepted but never answered;
    /// models a destination that goes dark with the payment in flight.
    pub mute: bool,
}

impl RemoteMachine {
    pub fn new(curve: CurveParams, seed: u64, node_id: NodeId) -> RemoteMachine {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let node_secret = curve.random_scalar(&mut rng);
        RemoteMachine {
            curve,
            rng,
            node_id,
            node_secret,
            preimages: HashMap::new(),
            pending_send: None,
            last_receipt: None,
            seq_out: 0,
            seq_in: None,
            mute: false,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn node_key(&self) -> GroupPoint {
        self.curve.mul_g(&self.node_secret)
    }

    /// Proof the last outbound payment was fulfilled.
    pub fn last_receipt(&self) -> Option<[u8; 32]> {
        self.last_receipt
    }

    pub fn issue_invoice(&mut self, amount: Satoshi, expiry_height: u64) -> InvoiceRecord {
        let preimage: [u8; 32] = self.rng.gen();
        let payment_hash = sha256(&preimage);
        self.preimages.insert(payment_hash, preimage);
        let digest =
            InvoiceRecord::signing_digest(self.node_id, amount, expiry_height, &payment_hash);
        let signature = super::gateway::sign_with_retry(
            &self.curve,
            &self.node_secret,
            &digest,
            &mut self.rng,
        );
        InvoiceRecord {
            destination: self.node_id,
            amount,
            expiry_height,
            payment_hash,
            signature,
        }
    }

    /// Starts a payment toward `destination` (the node behind the
    /// bridge), offering `amount` locked to `payment_hash`.
    pub fn start_payment(
        &mut self,
        amount: Satoshi,
        payment_hash: MessageDigest,
        destination: NodeId,
    ) -> Result<Vec<OutMsg>, ProtocolError> {
        self.pending_send = Some(payment_hash);
        let mut out = Vec::new();
        self.peer_out(
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload: RoutedPayload {
                    next_hop: destination,
                    amount,
                    payment_hash,
                },
            },
            &mut out,
        )?;
        Ok(out)
    }

    fn peer_out(&mut self, body: PeerBody, out: &mut Vec<OutMsg>) -> Result<(), ProtocolError> {
        let env = Envelope {
            channel_id: 0,
            seq: self.seq_out,
            body,
        };
        self.seq_out += 1;
        let bytes = wire::encode_peer(&self.curve, &env)?.len();
        out.push(OutMsg::Event(TraceEvent::Peer {
            from: Role::Remote,
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

    pub fn on_peer(&mut self, env: Envelope) -> Result<Vec<OutMsg>, ProtocolError> {
        if let Some(last) = self.seq_in {
            if env.seq <= last {
                return Err(ProtocolError::BadSequence);
            }
        }
        self.seq_in = Some(env.seq);
        match env.body {
            PeerBody::UpdateAddHtlc {
                amount,
                payment_hash,
                routed_payload,
            } => {
                let _ = amount;
                if routed_payload.next_hop != self.node_id {
                    return Err(ProtocolError::UnknownDestination);
                }
                if self.mute {
                    return Ok(Vec::new());
                }
                let preimage = self
                    .preimages
                    .get(&payment_hash)
                    .copied()
                    .ok_or(ProtocolError::Refused("no preimage for this payment"))?;
                let mut out = Vec::new();
                self.peer_out(PeerBody::UpdateFulfillHtlc { preimage }, &mut out)?;
                Ok(out)
            }
            PeerBody::UpdateFulfillHtlc { preimage } => {
                let hash = self
                    .pending_send
                    .take()
                    .ok_or(ProtocolError::Malformed("no payment awaiting receipt"))?;
                if sha256(&preimage) != hash {
                    return Err(ProtocolError::BadPreimage);
                }
                self.last_receipt = Some(preimage);
                Ok(Vec::new())
            }
            _ => Err(ProtocolError::UnexpectedMessage {
                role: Role::Remote,
                kind: env.body.kind(),
            }),
        }
    }
}
