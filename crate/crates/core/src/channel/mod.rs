//! Channel state and transaction shapes for a three-balance payment
//! channel: the device balance x, the bridge balance y, and the gateway
//! fee balance z, with x + y + z + (in-flight amounts) equal to the
//! capacity at every state.
//!
//! On chain the channel is one 2-of-2 output between the joint
//! device+gateway key and the bridge key. Each side holds a commitment
//! transaction for the current state. The device output is always
//! immediately spendable and carries no revocation path; the holder's
//! own output is delayed and revocable; the counterparty output is
//! immediate.

use crate::crypto::{sha256_parts, CurveParams, GroupPoint, MessageDigest, Scalar};
use crate::ledger::{sighash_for, OutPoint, Satoshi, SpendConditions, Transaction, TxInput, TxOutput, Witness};

use thiserror::Error;

/// Parts-per-million fee rate helper: floor(amount * ppm / 1e6).
pub fn service_fee(amount: Satoshi, fee_ppm: u32) -> Satoshi {
    ((u128::from(amount) * u128::from(fee_ppm)) / 1_000_000) as Satoshi
}

/// Stock on-chain fee for the funding transaction.
pub const DEFAULT_OPEN_FEE: Satoshi = 222;
/// Stock on-chain fee for a cooperative closing transaction.
pub const DEFAULT_CLOSE_FEE: Satoshi = 183;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ChannelParams {
    pub capacity: Satoshi,
    /// Gateway service fee on device-initiated sends.
    pub service_fee_ppm: u32,
    /// Depth the holder's own commitment output must reach.
    pub to_self_delay: u32,
    /// Depth after which an unclaimed in-flight payment refunds.
    pub htlc_timeout: u32,
    pub open_fee: Satoshi,
    pub close_fee: Satoshi,
}

impl ChannelParams {
    pub fn new(capacity: Satoshi) -> ChannelParams {
        ChannelParams {
            capacity,
            service_fee_ppm: 100_000,
            to_self_delay: 144,
            htlc_timeout: 40,
            open_fee: DEFAULT_OPEN_FEE,
            close_fee: DEFAULT_CLOSE_FEE,
        }
    }
}

/// Public keys the transaction shapes are built from.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ChannelKeys {
    /// Device's personal key; its balance pays here unconditionally.
    pub iot_key: GroupPoint,
    /// The shared device+gateway key; gateway-side funds pay here.
    pub joint_key: GroupPoint,
    pub bridge_key: GroupPoint,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HtlcDirection {
    /// Device pays toward the bridge (a send).
    Outbound,
    /// Bridge pays toward the device (a receive).
    Inbound,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Htlc {
    pub id: u64,
    pub amount: Satoshi,
    pub payment_hash: MessageDigest,
    pub direction: HtlcDirection,
}

/// The three balances, in satoshis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Balances {
    pub iot: Satoshi,
    pub bridge: Satoshi,
    pub gateway: Satoshi,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ChannelError {
    #[error("balance too low for this operation")]
    InsufficientBalance,
    #[error("amount must exceed the fee taken from it")]
    AmountTooSmall,
    #[error("no in-flight payment with that id")]
    UnknownHtlc,
    #[error("in-flight payments must settle before a mutual close")]
    HtlcsPending,
    #[error("source does not cover capacity plus the opening fee")]
    FundingTooSmall,
}

/// One channel state: balances plus in-flight payments. Transitions
/// return the successor state and never mutate in place, so every
/// historical state stays available for revocation bookkeeping.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ChannelState {
    pub index: u64,
    pub balances: Balances,
    pub htlcs: Vec<Htlc>,
    next_htlc_id: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Settlement {
    Fulfill,
    Fail,
}

impl ChannelState {
    pub fn initial(capacity: Satoshi) -> ChannelState {
        ChannelState {
            index: 0,
            balances: Balances {
                iot: capacity,
                bridge: 0,
                gateway: 0,
            },
            htlcs: Vec::new(),
            next_htlc_id: 0,
        }
    }

    /// Balances plus in-flight value; constant across transitions.
    pub fn total(&self) -> Satoshi {
        self.balances.iot
            + self.balances.bridge
            + self.balances.gateway
            + self.htlcs.iter().map(|h| h.amount).sum::<Satoshi>()
    }

    pub fn htlc(&self, id: u64) -> Option<&Htlc> {
        self.htlcs.iter().find(|h| h.id == id)
    }

    /// Device pays `amount`: the gateway fee comes out up front and the
    /// remainder goes in flight toward the bridge.
    pub fn apply_send(
        &self,
        amount: Satoshi,
        payment_hash: MessageDigest,
        params: &ChannelParams,
    ) -> Result<(ChannelState, Htlc), ChannelError> {
        if self.balances.iot < amount {
            return Err(ChannelError::InsufficientBalance);
        }
        let fee = service_fee(amount, params.service_fee_ppm);
        if amount <= fee {
            return Err(ChannelError::AmountTooSmall);
        }
        let htlc = Htlc {
            id: self.next_htlc_id,
            amount: amount - fee,
            payment_hash,
            direction: HtlcDirection::Outbound,
        };
        let mut next = self.clone();
        next.index += 1;
        next.next_htlc_id += 1;
        next.balances.iot -= amount;
        next.balances.gateway += fee;
        next.htlcs.push(htlc.clone());
        Ok((next, htlc))
    }

    /// Bridge pays `amount` toward the device; no gateway fee.
    pub fn apply_receive(
        &self,
        amount: Satoshi,
        payment_hash: MessageDigest,
    ) -> Result<(ChannelState, Htlc), ChannelError> {
        if self.balances.bridge < amount {
            return Err(ChannelError::InsufficientBalance);
        }
        if amount == 0 {
            return Err(ChannelError::AmountTooSmall);
        }
        let htlc = Htlc {
            id: self.next_htlc_id,
            amount,
            payment_hash,
            direction: HtlcDirection::Inbound,
        };
        let mut next = self.clone();
        next.index += 1;
        next.next_htlc_id += 1;
        next.balances.bridge -= amount;
        next.htlcs.push(htlc.clone());
        Ok((next, htlc))
    }

    /// Settles an in-flight payment. A fulfilled payment lands on the
    /// recipient; a failed one returns to the payer. The service fee on
    /// a failed send stays with the gateway, which took it at add time.
    pub fn settle_htlc(&self, id: u64, how: Settlement) -> Result<ChannelState, ChannelError> {
        let pos = self
            .htlcs
            .iter()
            .position(|h| h.id == id)
            .ok_or(ChannelError::UnknownHtlc)?;
        let mut next = self.clone();
        next.index += 1;
        let htlc = next.htlcs.remove(pos);
        match (htlc.direction, how) {
            (HtlcDirection::Outbound, Settlement::Fulfill) => next.balances.bridge += htlc.amount,
            (HtlcDirection::Outbound, Settlement::Fail) => next.balances.iot += htlc.amount,
            (HtlcDirection::Inbound, Settlement::Fulfill) => next.balances.iot += htlc.amount,
            (HtlcDirection::Inbound, Settlement::Fail) => next.balances.bridge += htlc.amount,
        }
        Ok(next)
    }
}

/// An unsigned transaction shape: everything the id hash covers. The
/// digest to sign is available before any witness exists.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TxTemplate {
    pub inputs: Vec<OutPoint>,
    pub outputs: Vec<TxOutput>,
    pub fee: Satoshi,
    pub nonce: u64,
}

impl TxTemplate {
    pub fn sighash(&self, curve: &CurveParams) -> MessageDigest {
        sighash_for(curve, &self.inputs, &self.outputs, self.fee, self.nonce)
    }

    /// Attaches one witness per input, in order.
    pub fn into_transaction(self, witnesses: Vec<Witness>) -> Transaction {
        assert_eq!(witnesses.len(), self.inputs.len());
        Transaction {
            inputs: self
                .inputs
                .into_iter()
                .zip(witnesses)
                .map(|(outpoint, witness)| TxInput { outpoint, witness })
                .collect(),
            outputs: self.outputs,
            fee: self.fee,
            nonce: self.nonce,
        }
    }
}

/// The channel's on-chain anchor: a 2-of-2 between the joint key and
/// the bridge key.
pub fn funding_conditions(keys: &ChannelKeys) -> SpendConditions {
    SpendConditions::Multisig2of2(keys.joint_key.clone(), keys.bridge_key.clone())
}

/// Spends a source output into the channel anchor, paying the opening
/// fee and returning any change to the device key.
pub fn funding_template(
    params: &ChannelParams,
    keys: &ChannelKeys,
    source: OutPoint,
    source_value: Satoshi,
) -> Result<TxTemplate, ChannelError> {
    let need = params.capacity + params.open_fee;
    if source_value < need {
        return Err(ChannelError::FundingTooSmall);
    }
    let mut outputs = vec![TxOutput {
        value: params.capacity,
        conditions: funding_conditions(keys),
    }];
    if source_value > need {
        outputs.push(TxOutput {
            value: source_value - need,
            conditions: SpendConditions::PayToKey(keys.iot_key.clone()),
        });
    }
    Ok(TxTemplate {
        inputs: vec![source],
        outputs,
        fee: params.open_fee,
        nonce: 0,
    })
}

/// Which side a commitment transaction belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Holder {
    JointNode,
    Bridge,
}

/// A commitment transaction shape plus the position of each role's
/// output (absent when its balance is zero).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommitmentLayout {
    pub template: TxTemplate,
    pub iot_vout: Option<u32>,
    pub holder_vout: Option<u32>,
    pub counterparty_vout: Option<u32>,
    /// (htlc id, vout) pairs in id order.
    pub htlc_vouts: Vec<(u64, u32)>,
}

/// Builds `holder`'s commitment transaction for `state`. Output order
/// is fixed: device output, holder's delayed output, counterparty's
/// immediate output, then in-flight outputs in id order; zero-value
/// outputs are omitted. The transaction spends the anchor with no fee,
/// so the outputs always sum to the capacity.
pub fn commitment_layout(
    params: &ChannelParams,
    keys: &ChannelKeys,
    state: &ChannelState,
    holder: Holder,
    revocation_point: &GroupPoint,
    funding: OutPoint,
) -> CommitmentLayout {
    let (holder_key, holder_value, other_key, other_value) = match holder {
        Holder::JointNode => (
            &keys.joint_key,
            state.balances.gateway,
            &keys.bridge_key,
            state.balances.bridge,
        ),
        Holder::Bridge => (
            &keys.bridge_key,
            state.balances.bridge,
            &keys.joint_key,
            state.balances.gateway,
        ),
    };

    let mut outputs = Vec::new();
    let mut push = |value: Satoshi, conditions: SpendConditions| -> Option<u32> {
        if value == 0 {
            return None;
        }
        outputs.push(TxOutput { value, conditions });
        Some(outputs.len() as u32 - 1)
    };

    let iot_vout = push(
        state.balances.iot,
        SpendConditions::PayToKeyUnconditional(keys.iot_key.clone()),
    );
    let holder_vout = push(
        holder_value,
        SpendConditions::ToSelfDelayed {
            owner: holder_key.clone(),
            revocation_key: revocation_point.clone(),
            delay: params.to_self_delay,
        },
    );
    let counterparty_vout = push(other_value, SpendConditions::PayToKey(other_key.clone()));

    let mut htlc_vouts = Vec::new();
    for htlc in &state.htlcs {
        // The recipient claims with the preimage; the payer takes the
        // refund after the timeout. Roles swap with direction.
        let (claim_key, refund_key) = match htlc.direction {
            HtlcDirection::Outbound => (&keys.bridge_key, &keys.joint_key),
            HtlcDirection::Inbound => (&keys.joint_key, &keys.bridge_key),
        };
        let offered_by_holder = matches!(
            (holder, htlc.direction),
            (Holder::JointNode, HtlcDirection::Outbound) | (Holder::Bridge, HtlcDirection::Inbound)
        );
        let conditions = if offered_by_holder {
            SpendConditions::HtlcOffered {
                hash: htlc.payment_hash,
                claim_key: claim_key.clone(),
                refund_key: refund_key.clone(),
                timeout_delay: params.htlc_timeout,
            }
        } else {
            SpendConditions::HtlcReceived {
                hash: htlc.payment_hash,
                claim_key: claim_key.clone(),
                refund_key: refund_key.clone(),
                timeout_delay: params.htlc_timeout,
            }
        };
        if let Some(vout) = push(htlc.amount, conditions) {
            htlc_vouts.push((htlc.id, vout));
        }
    }

    CommitmentLayout {
        template: TxTemplate {
            inputs: vec![funding],
            outputs,
            fee: 0,
            nonce: state.index,
        },
        iot_vout,
        holder_vout,
        counterparty_vout,
        htlc_vouts,
    }
}

/// Who asked for the cooperative close; that side pays the fee.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CloseInitiator {
    Iot,
    Gateway,
    Bridge,
}

/// A cooperative close: direct payouts of the final balances, the fee
/// taken from the initiator, no delays anywhere. In-flight payments
/// must already be settled. The fee is a parameter because the peers
/// negotiate it; an agreed close lands on `ChannelParams::close_fee`.
pub fn closing_template(
    keys: &ChannelKeys,
    state: &ChannelState,
    initiator: CloseInitiator,
    fee: Satoshi,
    funding: OutPoint,
) -> Result<TxTemplate, ChannelError> {
    if !state.htlcs.is_empty() {
        return Err(ChannelError::HtlcsPending);
    }
    let mut balances = state.balances;
    let payer = match initiator {
        CloseInitiator::Iot => &mut balances.iot,
        CloseInitiator::Gateway => &mut balances.gateway,
        CloseInitiator::Bridge => &mut balances.bridge,
    };
    if *payer < fee {
        return Err(ChannelError::InsufficientBalance);
    }
    *payer -= fee;

    let mut outputs = Vec::new();
    if balances.iot > 0 {
        outputs.push(TxOutput {
            value: balances.iot,
            conditions: SpendConditions::PayToKey(keys.iot_key.clone()),
        });
    }
    if balances.gateway > 0 {
        outputs.push(TxOutput {
            value: balances.gateway,
            conditions: SpendConditions::PayToKey(keys.joint_key.clone()),
        });
    }
    if balances.bridge > 0 {
        outputs.push(TxOutput {
            value: balances.bridge,
            conditions: SpendConditions::PayToKey(keys.bridge_key.clone()),
        });
    }
    Ok(TxTemplate {
        inputs: vec![funding],
        outputs,
        fee,
        nonce: state.index,
    })
}

/// Single-input, single-output sweep used by punishments and by the
/// device when it claims its unconditional output.
pub fn sweep_template(
    source: OutPoint,
    value: Satoshi,
    fee: Satoshi,
    destination: &GroupPoint,
    nonce: u64,
) -> TxTemplate {
    TxTemplate {
        inputs: vec![source],
        outputs: vec![TxOutput {
            value: value - fee,
            conditions: SpendConditions::PayToKey(destination.clone()),
        }],
        fee,
        nonce,
    }
}

/// The bridge's per-state revocation series: an ordinary hash-derived
/// scalar per state, no shared key involved. The point goes into the
/// bridge's own commitment outputs; the scalar is disclosed to the
/// joint side when the state is revoked.
pub struct BridgeStateSeries {
    curve: CurveParams,
    seed: [u8; 32],
}

impl BridgeStateSeries {
    pub fn new(curve: &CurveParams, seed: [u8; 32]) -> BridgeStateSeries {
        BridgeStateSeries {
            curve: curve.clone(),
            seed,
        }
    }

    pub fn secret(&self, index: u64) -> Scalar {
        for attempt in 0u16..=255 {
            let digest = if attempt == 0 {
                sha256_parts("bridge-state-key", &[&self.seed, &index.to_be_bytes()])
            } else {
                sha256_parts(
                    "bridge-state-key",
                    &[&self.seed, &index.to_be_bytes(), &[attempt as u8]],
                )
            };
            let s = self.curve.scalar_from_bytes_reduced(digest.as_bytes());
            if !s.is_zero() {
                return s;
            }
        }
        unreachable!("256 consecutive zero scalars")
    }

    pub fn point(&self, index: u64) -> GroupPoint {
        self.curve.mul_g(&self.secret(index))
    }
}

#[cfg(test)]
mod tests;
