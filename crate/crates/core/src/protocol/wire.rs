//! Byte encoding for peer-protocol envelopes: a type byte, a 16-bit
//! payload length, the channel id and sequence number, then the
//! type-specific payload. Points use the curve's compressed form,
//! scalars and signature halves the curve's fixed scalar width.

use super::{Envelope, PeerBody, ProtocolError, RoutedPayload};
use crate::channel::CloseInitiator;
use crate::crypto::{CurveParams, EcdsaSignature, GroupPoint, MessageDigest, Scalar};
use crate::ledger::OutPoint;

const TYPE_OPEN_CHANNEL: u8 = 1;
const TYPE_ACCEPT_CHANNEL: u8 = 2;
const TYPE_FUNDING_CREATED: u8 = 3;
const TYPE_FUNDING_SIGNED: u8 = 4;
const TYPE_FUNDING_LOCKED: u8 = 5;
const TYPE_UPDATE_ADD_HTLC: u8 = 6;
const TYPE_COMMITMENT_SIGNED: u8 = 7;
const TYPE_REVOKE_AND_ACK: u8 = 8;
const TYPE_UPDATE_FULFILL_HTLC: u8 = 9;
const TYPE_SHUTDOWN: u8 = 10;
const TYPE_CLOSING_SIGNED: u8 = 11;

fn body_type(body: &PeerBody) -> u8 {
    match body {
        PeerBody::OpenChannel { .. } => TYPE_OPEN_CHANNEL,
        PeerBody::AcceptChannel { .. } => TYPE_ACCEPT_CHANNEL,
        PeerBody::FundingCreated { .. } => TYPE_FUNDING_CREATED,
        PeerBody::FundingSigned { .. } => TYPE_FUNDING_SIGNED,
        PeerBody::FundingLocked => TYPE_FUNDING_LOCKED,
        PeerBody::UpdateAddHtlc { .. } => TYPE_UPDATE_ADD_HTLC,
        PeerBody::CommitmentSigned { .. } => TYPE_COMMITMENT_SIGNED,
        PeerBody::RevokeAndAck { .. } => TYPE_REVOKE_AND_ACK,
        PeerBody::UpdateFulfillHtlc { .. } => TYPE_UPDATE_FULFILL_HTLC,
        PeerBody::Shutdown { .. } => TYPE_SHUTDOWN,
        PeerBody::ClosingSigned { .. } => TYPE_CLOSING_SIGNED,
    }
}

fn put_point(
    curve: &CurveParams,
    out: &mut Vec<u8>,
    point: &GroupPoint,
) -> Result<(), ProtocolError> {
    let bytes = curve
        .point_encode(point)
        .map_err(|_| ProtocolError::Malformed("point encoding"))?;
    out.extend_from_slice(&bytes);
    Ok(())
}

fn put_sig(curve: &CurveParams, out: &mut Vec<u8>, sig: &EcdsaSignature) {
    out.extend_from_slice(&sig.encode(curve));
}

fn initiator_byte(initiator: CloseInitiator) -> u8 {
    match initiator {
        CloseInitiator::Iot => 0,
        CloseInitiator::Gateway => 1,
        CloseInitiator::Bridge => 2,
    }
}

/// Serializes an envelope for the peer link.
pub fn encode_peer(curve: &CurveParams, env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    let mut payload = Vec::new();
    match &env.body {
        PeerBody::OpenChannel {
            funding_pubkey,
            capacity,
            device_key,
            service_fee_ppm,
            open_fee,
            close_fee,
        } => {
            put_point(curve, &mut payload, funding_pubkey)?;
            payload.extend_from_slice(&capacity.to_be_bytes());
            put_point(curve, &mut payload, device_key)?;
            payload.extend_from_slice(&service_fee_ppm.to_be_bytes());
            payload.extend_from_slice(&open_fee.to_be_bytes());
            payload.extend_from_slice(&close_fee.to_be_bytes());
        }
        PeerBody::AcceptChannel {
            funding_pubkey,
            first_commitment_point,
            next_commitment_point,
        } => {
            put_point(curve, &mut payload, funding_pubkey)?;
            put_point(curve, &mut payload, first_commitment_point)?;
            put_point(curve, &mut payload, next_commitment_point)?;
        }
        PeerBody::FundingCreated {
            funding_outpoint,
            commitment_signature,
            first_commitment_point,
        } => {
            payload.extend_from_slice(funding_outpoint.txid.as_bytes());
            payload.extend_from_slice(&funding_outpoint.vout.to_be_bytes());
            put_sig(curve, &mut payload, commitment_signature);
            put_point(curve, &mut payload, first_commitment_point)?;
        }
        PeerBody::FundingSigned {
            commitment_signature,
        } => {
            put_sig(curve, &mut payload, commitment_signature);
        }
        PeerBody::FundingLocked => {}
        PeerBody::UpdateAddHtlc {
            amount,
            payment_hash,
            routed_payload,
        } => {
            payload.extend_from_slice(&amount.to_be_bytes());
            payload.extend_from_slice(payment_hash.as_bytes());
            payload.extend_from_slice(&routed_payload.next_hop.to_be_bytes());
            payload.extend_from_slice(&routed_payload.amount.to_be_bytes());
            payload.extend_from_slice(routed_payload.payment_hash.as_bytes());
        }
        PeerBody::CommitmentSigned {
            commit_sig,
            htlc_sigs,
        } => {
            put_sig(curve, &mut payload, commit_sig);
            let count = u16::try_from(htlc_sigs.len())
                .map_err(|_| ProtocolError::Malformed("htlc signature count"))?;
            payload.extend_from_slice(&count.to_be_bytes());
            for sig in htlc_sigs {
                put_sig(curve, &mut payload, sig);
            }
        }
        PeerBody::RevokeAndAck {
            prior_revocation_secret,
            next_commitment_point,
        } => {
            payload.extend_from_slice(&curve.scalar_encode(prior_revocation_secret));
            put_point(curve, &mut payload, next_commitment_point)?;
        }
        PeerBody::UpdateFulfillHtlc { preimage } => {
            payload.extend_from_slice(preimage);
        }
        PeerBody::Shutdown { initiator } => {
            payload.push(initiator_byte(*initiator));
        }
        PeerBody::ClosingSigned {
            fee_offer,
            signature,
        } => {
            payload.extend_from_slice(&fee_offer.to_be_bytes());
            put_sig(curve, &mut payload, signature);
        }
    }

    let body_len = 16 + payload.len();
    let framed_len =
        u16::try_from(body_len).map_err(|_| ProtocolError::Malformed("oversized envelope"))?;
    let mut out = Vec::with_capacity(3 + body_len);
    out.push(body_type(&env.body));
    out.extend_from_slice(&framed_len.to_be_bytes());
    out.extend_from_slice(&env.channel_id.to_be_bytes());
    out.extend_from_slice(&env.seq.to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.at + n > self.bytes.len() {
            return Err(ProtocolError::Malformed("truncated envelope"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_be_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        let mut b = [0u8; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_be_bytes(b))
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        let mut b = [0u8; 2];
        b.copy_from_slice(self.take(2)?);
        Ok(u16::from_be_bytes(b))
    }

    fn digest(&mut self) -> Result<MessageDigest, ProtocolError> {
        let mut b = [0u8; 32];
        b.copy_from_slice(self.take(32)?);
        Ok(MessageDigest(b))
    }

    fn point(&mut self, curve: &CurveParams) -> Result<GroupPoint, ProtocolError> {
        let w = 1 + curve.field_bytes();
        curve
            .point_decode(self.take(w)?)
            .map_err(|_| ProtocolError::Malformed("point encoding"))
    }

    fn scalar(&mut self, curve: &CurveParams) -> Result<Scalar, ProtocolError> {
        let w = curve.scalar_bytes();
        curve
            .scalar_decode(self.take(w)?)
            .map_err(|_| ProtocolError::Malformed("scalar encoding"))
    }

    fn sig(&mut self, curve: &CurveParams) -> Result<EcdsaSignature, ProtocolError> {
        let w = 2 * curve.scalar_bytes();
        EcdsaSignature::decode(curve, self.take(w)?)
            .map_err(|_| ProtocolError::Malformed("signature encoding"))
    }

    fn done(&self) -> Result<(), ProtocolError> {
        if self.at == self.bytes.len() {
            Ok(())
        } else {
            Err(ProtocolError::Malformed("trailing bytes"))
        }
    }
}

/// Parses an envelope produced by [`encode_peer`].
pub fn decode_peer(curve: &CurveParams, bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    if bytes.len() < 3 {
        return Err(ProtocolError::Malformed("truncated envelope"));
    }
    let msg_type = bytes[0];
    let framed_len = u16::from_be_bytes([bytes[1], bytes[2]]) as usize;
    if bytes.len() != 3 + framed_len || framed_len < 16 {
        return Err(ProtocolError::Malformed("envelope length"));
    }
    let mut r = Reader {
        bytes: &bytes[3..],
        at: 0,
    };
    let channel_id = r.u64()?;
    let seq = r.u64()?;

    let body = match msg_type {
        TYPE_OPEN_CHANNEL => PeerBody::OpenChannel {
            funding_pubkey: r.point(curve)?,
            capacity: r.u64()?,
            device_key: r.point(curve)?,
            service_fee_ppm: r.u32()?,
            open_fee: r.u64()?,
            close_fee: r.u64()?,
        },
        TYPE_ACCEPT_CHANNEL => PeerBody::AcceptChannel {
            funding_pubkey: r.point(curve)?,
            first_commitment_point: r.point(curve)?,
            next_commitment_point: r.point(curve)?,
        },
        TYPE_FUNDING_CREATED => PeerBody::FundingCreated {
            funding_outpoint: OutPoint {
                txid: r.digest()?,
                vout: r.u32()?,
            },
            commitment_signature: r.sig(curve)?,
            first_commitment_point: r.point(curve)?,
        },
        TYPE_FUNDING_SIGNED => PeerBody::FundingSigned {
            commitment_signature: r.sig(curve)?,
        },
        TYPE_FUNDING_LOCKED => PeerBody::FundingLocked,
        TYPE_UPDATE_ADD_HTLC => PeerBody::UpdateAddHtlc {
            amount: r.u64()?,
            payment_hash: r.digest()?,
            routed_payload: RoutedPayload {
                next_hop: r.u64()?,
                amount: r.u64()?,
                payment_hash: r.digest()?,
            },
        },
        TYPE_COMMITMENT_SIGNED => {
            let commit_sig = r.sig(curve)?;
            let count = r.u16()?;
            let mut htlc_sigs = Vec::with_capacity(count as usize);
            for _ in 0..count {
                htlc_sigs.push(r.sig(curve)?);
            }
            PeerBody::CommitmentSigned {
                commit_sig,
                htlc_sigs,
            }
        }
        TYPE_REVOKE_AND_ACK => PeerBody::RevokeAndAck {
            prior_revocation_secret: r.scalar(curve)?,
            next_commitment_point: r.point(curve)?,
        },
        TYPE_UPDATE_FULFILL_HTLC => {
            let mut preimage = [0u8; 32];
            preimage.copy_from_slice(r.take(32)?);
            PeerBody::UpdateFulfillHtlc { preimage }
        }
        TYPE_SHUTDOWN => {
            let initiator = match r.take(1)?[0] {
                0 => CloseInitiator::Iot,
                1 => CloseInitiator::Gateway,
                2 => CloseInitiator::Bridge,
                _ => return Err(ProtocolError::Malformed("shutdown initiator")),
            };
            PeerBody::Shutdown { initiator }
        }
        TYPE_CLOSING_SIGNED => PeerBody::ClosingSigned {
            fee_offer: r.u64()?,
            signature: r.sig(curve)?,
        },
        _ => return Err(ProtocolError::Malformed("envelope type")),
    };
    r.done()?;
    Ok(Envelope {
        channel_id,
        seq,
        body,
    })
}
