//! Fixed-size sealed frames for the device link. Every control
//! command travels as exactly 57 bytes: a cleartext type byte, a
//! 24-byte encrypted body, and a 32-byte authentication tag. Constant
//! size keeps the device's radio and parsing budget flat regardless of
//! command.
//!
//! Sealing uses a SHA-256 keystream and a SHA-256 MAC keyed by the
//! shared link key, with the sender's frame sequence number as the
//! nonce. Both sides count frames independently per direction, so a
//! replayed or reordered frame fails authentication.

use super::{ControlBody, ProtocolError};
use crate::crypto::sha256_parts;

pub const CONTROL_FRAME_LEN: usize = 57;
const BODY_LEN: usize = 24;

const TYPE_OPEN_CHANNEL_REQUEST: u8 = 1;
const TYPE_SEND_PAYMENT: u8 = 2;
const TYPE_CHANNEL_CLOSING_REQUEST: u8 = 3;
const TYPE_PAYMENT_SEND_SUCCESS: u8 = 4;
const TYPE_PAYMENT_RECEIVE_SUCCESS: u8 = 5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ControlFrame {
    pub msg_type: u8,
    pub ciphertext: [u8; BODY_LEN],
    pub tag: [u8; 32],
}

impl ControlFrame {
    pub fn encode(&self) -> [u8; CONTROL_FRAME_LEN] {
        let mut out = [0u8; CONTROL_FRAME_LEN];
        out[0] = self.msg_type;
        out[1..1 + BODY_LEN].copy_from_slice(&self.ciphertext);
        out[1 + BODY_LEN..].copy_from_slice(&self.tag);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<ControlFrame, ProtocolError> {
        if bytes.len() != CONTROL_FRAME_LEN {
            return Err(ProtocolError::Malformed("control frame length"));
        }
        let mut ciphertext = [0u8; BODY_LEN];
        ciphertext.copy_from_slice(&bytes[1..1 + BODY_LEN]);
        let mut tag = [0u8; 32];
        tag.copy_from_slice(&bytes[1 + BODY_LEN..]);
        Ok(ControlFrame {
            msg_type: bytes[0],
            ciphertext,
            tag,
        })
    }
}

fn body_plaintext(body: &ControlBody) -> (u8, [u8; BODY_LEN]) {
    let mut plain = [0u8; BODY_LEN];
    match body {
        ControlBody::OpenChannelRequest {
            capacity,
            bridge_node_id,
        } => {
            plain[..8].copy_from_slice(&capacity.to_be_bytes());
            plain[8..16].copy_from_slice(&bridge_node_id.to_be_bytes());
            (TYPE_OPEN_CHANNEL_REQUEST, plain)
        }
        ControlBody::SendPayment {
            amount,
            destination_node_id,
        } => {
            plain[..8].copy_from_slice(&amount.to_be_bytes());
            plain[8..16].copy_from_slice(&destination_node_id.to_be_bytes());
            (TYPE_SEND_PAYMENT, plain)
        }
        ControlBody::ChannelClosingRequest => (TYPE_CHANNEL_CLOSING_REQUEST, plain),
        ControlBody::PaymentSendSuccess => (TYPE_PAYMENT_SEND_SUCCESS, plain),
        ControlBody::PaymentReceiveSuccess => (TYPE_PAYMENT_RECEIVE_SUCCESS, plain),
    }
}

fn body_from_plaintext(msg_type: u8, plain: &[u8; BODY_LEN]) -> Result<ControlBody, ProtocolError> {
    let word = |at: usize| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&plain[at..at + 8]);
        u64::from_be_bytes(b)
    };
    let body = match msg_type {
        TYPE_OPEN_CHANNEL_REQUEST => ControlBody::OpenChannelRequest {
            capacity: word(0),
            bridge_node_id: word(8),
        },
        TYPE_SEND_PAYMENT => ControlBody::SendPayment {
            amount: word(0),
            destination_node_id: word(8),
        },
        TYPE_CHANNEL_CLOSING_REQUEST => ControlBody::ChannelClosingRequest,
        TYPE_PAYMENT_SEND_SUCCESS => ControlBody::PaymentSendSuccess,
        TYPE_PAYMENT_RECEIVE_SUCCESS => ControlBody::PaymentReceiveSuccess,
        _ => return Err(ProtocolError::Malformed("control frame type")),
    };
    Ok(body)
}

fn keystream(key: &[u8; 32], seq: u64) -> [u8; BODY_LEN] {
    let block = sha256_parts("frame-stream", &[key, &seq.to_be_bytes()]);
    let mut out = [0u8; BODY_LEN];
    out.copy_from_slice(&block.as_bytes()[..BODY_LEN]);
    out
}

fn auth_tag(key: &[u8; 32], seq: u64, msg_type: u8, ciphertext: &[u8; BODY_LEN]) -> [u8; 32] {
    *sha256_parts(
        "frame-mac",
        &[key, &seq.to_be_bytes(), &[msg_type], ciphertext],
    )
    .as_bytes()
}

/// Seals a control body under the link key with the sender's frame
/// counter value.
pub fn seal_frame(key: &[u8; 32], seq: u64, body: &ControlBody) -> ControlFrame {
    let (msg_type, plain) = body_plaintext(body);
    let stream = keystream(key, seq);
    let mut ciphertext = [0u8; BODY_LEN];
    for i in 0..BODY_LEN {
        ciphertext[i] = plain[i] ^ stream[i];
    }
    let tag = auth_tag(key, seq, msg_type, &ciphertext);
    ControlFrame {
        msg_type,
        ciphertext,
        tag,
    }
}

/// Authenticates and decrypts a frame at the receiver's expected
/// counter value. A tampered frame, a wrong key, or a counter mismatch
/// all fail the tag check.
pub fn open_frame(
    key: &[u8; 32],
    seq: u64,
    frame: &ControlFrame,
) -> Result<ControlBody, ProtocolError> {
    let expect = auth_tag(key, seq, frame.msg_type, &frame.ciphertext);
    if expect != frame.tag {
        return Err(ProtocolError::FrameAuth);
    }
    let stream = keystream(key, seq);
    let mut plain = [0u8; BODY_LEN];
    for i in 0..BODY_LEN {
        plain[i] = frame.ciphertext[i] ^ stream[i];
    }
    body_from_plaintext(frame.msg_type, &plain)
}
