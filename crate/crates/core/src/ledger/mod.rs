//! A simulated single-chain UTXO ledger.
//!
//! Value enters through an explicit faucet, moves through transactions
//! whose inputs must already be confirmed, and leaves only as mining
//! fees, so `granted == unspent + fees` holds at every block height.
//! Submission validates eagerly: signatures against the transaction's
//! sighash, hash preimages, relative timelocks measured in confirmation
//! depth, and double-spends (the first submitted spender of an output
//! wins; later ones are rejected, never reordered).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::crypto::{
    ecdsa_verify, sha256, sha256_parts, CurveParams, EcdsaSignature, GroupPoint, MessageDigest,
};

/// All amounts are integer satoshis.
pub type Satoshi = u64;

/// Reference to a transaction output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct OutPoint {
    pub txid: MessageDigest,
    pub vout: u32,
}

/// What it takes to spend an output.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum SpendConditions {
    /// A signature under the key.
    PayToKey(GroupPoint),
    /// Same check as [`SpendConditions::PayToKey`]; the distinct name
    /// marks outputs that deliberately carry no delay and no revocation
    /// path, so a dump makes the guarantee visible.
    PayToKeyUnconditional(GroupPoint),
    /// Signatures under both keys.
    Multisig2of2(GroupPoint, GroupPoint),
    /// Owner may spend once the output is `delay` confirmations deep;
    /// the revocation key may spend at any depth.
    ToSelfDelayed {
        owner: GroupPoint,
        revocation_key: GroupPoint,
        delay: u32,
    },
    /// Hash-locked payment offered to the counterparty: claimable with
    /// the preimage and the claim key, refundable to the offerer after
    /// `timeout_delay` confirmations.
    HtlcOffered {
        hash: MessageDigest,
        claim_key: GroupPoint,
        refund_key: GroupPoint,
        timeout_delay: u32,
    },
    /// Hash-locked payment being received; same validation, opposite
    /// role assignment, kept distinct so dumps tell the sides apart.
    HtlcReceived {
        hash: MessageDigest,
        claim_key: GroupPoint,
        refund_key: GroupPoint,
        timeout_delay: u32,
    },
}

/// Authorization attached to an input.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Witness {
    Key(EcdsaSignature),
    TwoKeys(EcdsaSignature, EcdsaSignature),
    DelayedOwner(EcdsaSignature),
    Revocation(EcdsaSignature),
    HtlcClaim {
        preimage: [u8; 32],
        signature: EcdsaSignature,
    },
    HtlcRefund(EcdsaSignature),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TxInput {
    pub outpoint: OutPoint,
    pub witness: Witness,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TxOutput {
    pub value: Satoshi,
    pub conditions: SpendConditions,
}

/// A transaction. `fee` must equal input value minus output value; the
/// ledger rejects anything else. `nonce` only disambiguates otherwise
/// identical transactions (faucet grants use it), since the id hash
/// covers everything except witnesses.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transaction {
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
    pub fee: Satoshi,
    pub nonce: u64,
}

impl Transaction {
    /// The id, a hash over outpoints, outputs, fee, and nonce. Equal to
    /// the digest each input's signature must cover, so a witness made
    /// for one transaction cannot be replayed on a mutated one.
    pub fn txid(&self, curve: &CurveParams) -> MessageDigest {
        sighash_for(
            curve,
            &self.inputs.iter().map(|i| i.outpoint).collect::<Vec<_>>(),
            &self.outputs,
            self.fee,
            self.nonce,
        )
    }

    pub fn sighash(&self, curve: &CurveParams) -> MessageDigest {
        self.txid(curve)
    }
}

/// Digest to sign for a transaction spending `inputs` into `outputs`.
/// Builders call this before any witness exists.
pub fn sighash_for(
    curve: &CurveParams,
    inputs: &[OutPoint],
    outputs: &[TxOutput],
    fee: Satoshi,
    nonce: u64,
) -> MessageDigest {
    let mut parts: Vec<Vec<u8>> = Vec::new();
    parts.push(nonce.to_be_bytes().to_vec());
    parts.push(fee.to_be_bytes().to_vec());
    parts.push((inputs.len() as u32).to_be_bytes().to_vec());
    for op in inputs {
        let mut b = op.txid.as_bytes().to_vec();
        b.extend_from_slice(&op.vout.to_be_bytes());
        parts.push(b);
    }
    parts.push((outputs.len() as u32).to_be_bytes().to_vec());
    for out in outputs {
        let mut b = out.value.to_be_bytes().to_vec();
        b.extend_from_slice(&encode_conditions(curve, &out.conditions));
        parts.push(b);
    }
    let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
    sha256_parts("tx", &refs)
}

fn encode_point(curve: &CurveParams, point: &GroupPoint) -> Vec<u8> {
    curve.point_encode(point).unwrap_or_default()
}

fn encode_conditions(curve: &CurveParams, c: &SpendConditions) -> Vec<u8> {
    let mut b = Vec::new();
    match c {
        SpendConditions::PayToKey(k) => {
            b.push(1);
            b.extend_from_slice(&encode_point(curve, k));
        }
        SpendConditions::PayToKeyUnconditional(k) => {
            b.push(2);
            b.extend_from_slice(&encode_point(curve, k));
        }
        SpendConditions::Multisig2of2(k1, k2) => {
            b.push(3);
            b.extend_from_slice(&encode_point(curve, k1));
            b.extend_from_slice(&encode_point(curve, k2));
        }
        SpendConditions::ToSelfDelayed {
            owner,
            revocation_key,
            delay,
        } => {
            b.push(4);
            b.extend_from_slice(&encode_point(curve, owner));
            b.extend_from_slice(&encode_point(curve, revocation_key));
            b.extend_from_slice(&delay.to_be_bytes());
        }
        SpendConditions::HtlcOffered {
            hash,
            claim_key,
            refund_key,
            timeout_delay,
        } => {
            b.push(5);
            b.extend_from_slice(hash.as_bytes());
            b.extend_from_slice(&encode_point(curve, claim_key));
            b.extend_from_slice(&encode_point(curve, refund_key));
            b.extend_from_slice(&timeout_delay.to_be_bytes());
        }
        SpendConditions::HtlcReceived {
            hash,
            claim_key,
            refund_key,
            timeout_delay,
        } => {
            b.push(6);
            b.extend_from_slice(hash.as_bytes());
            b.extend_from_slice(&encode_point(curve, claim_key));
            b.extend_from_slice(&encode_point(curve, refund_key));
            b.extend_from_slice(&timeout_delay.to_be_bytes());
        }
    }
    b
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TxStatus {
    Unknown,
    Pending,
    Confirmed { height: u64 },
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum LedgerError {
    #[error("input does not reference a confirmed unspent output")]
    MissingUtxo,
    #[error("witness signature invalid for the output's conditions")]
    BadSignature,
    #[error("relative timelock depth not reached")]
    TimelockNotMet,
    #[error("hash preimage does not match")]
    BadPreimage,
    #[error("output already spent by an earlier submission")]
    Conflict,
    #[error("declared fee does not equal inputs minus outputs")]
    FeeMismatch,
}

#[derive(Clone, Debug)]
struct UtxoEntry {
    output: TxOutput,
    confirmed_height: u64,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub height: u64,
    pub txids: Vec<MessageDigest>,
}

/// The chain state: confirmed outputs, a pending set, and full history.
pub struct Ledger {
    curve: CurveParams,
    height: u64,
    utxos: BTreeMap<OutPoint, UtxoEntry>,
    mempool: Vec<Transaction>,
    mempool_spends: HashSet<OutPoint>,
    blocks: Vec<Block>,
    transactions: HashMap<MessageDigest, Transaction>,
    status: HashMap<MessageDigest, TxStatus>,
    granted: Satoshi,
    fees_collected: Satoshi,
    grant_counter: u64,
}

impl Ledger {
    pub fn new(curve: &CurveParams) -> Ledger {
        Ledger {
            curve: curve.clone(),
            height: 0,
            utxos: BTreeMap::new(),
            mempool: Vec::new(),
            mempool_spends: HashSet::new(),
            blocks: Vec::new(),
            transactions: HashMap::new(),
            status: HashMap::new(),
            granted: 0,
            fees_collected: 0,
            grant_counter: 0,
        }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    /// Faucet: mints a confirmed output in a fresh block and returns
    /// its outpoint.
    pub fn grant_utxo(&mut self, value: Satoshi, conditions: SpendConditions) -> OutPoint {
        self.grant_counter += 1;
        let tx = Transaction {
            inputs: Vec::new(),
            outputs: vec![TxOutput { value, conditions }],
            fee: 0,
            nonce: self.grant_counter,
        };
        let txid = tx.txid(&self.curve);
        self.granted += value;
        self.height += 1;
        self.utxos.insert(
            OutPoint { txid, vout: 0 },
            UtxoEntry {
                output: tx.outputs[0].clone(),
                confirmed_height: self.height,
            },
        );
        self.blocks.push(Block {
            height: self.height,
            txids: vec![txid],
        });
        self.status.insert(txid, TxStatus::Confirmed { height: self.height });
        self.transactions.insert(txid, tx);
        OutPoint { txid, vout: 0 }
    }

    /// Validates and queues a transaction for the next block.
    pub fn submit(&mut self, tx: Transaction) -> Result<MessageDigest, LedgerError> {
        let txid = tx.txid(&self.curve);
        if tx.inputs.is_empty() {
            return Err(LedgerError::MissingUtxo);
        }

        let mut input_total: Satoshi = 0;
        let mut seen_inputs = HashSet::new();
        for input in &tx.inputs {
            if !seen_inputs.insert(input.outpoint) {
                return Err(LedgerError::Conflict);
            }
            if self.mempool_spends.contains(&input.outpoint) {
                return Err(LedgerError::Conflict);
            }
            let entry = self
                .utxos
                .get(&input.outpoint)
                .ok_or(LedgerError::MissingUtxo)?;
            input_total += entry.output.value;
        }

        let output_total: Satoshi = tx.outputs.iter().map(|o| o.value).sum();
        if input_total != output_total + tx.fee {
            return Err(LedgerError::FeeMismatch);
        }

        let sighash = tx.sighash(&self.curve);
        for input in &tx.inputs {
            let entry = &self.utxos[&input.outpoint];
            let depth = self.height - entry.confirmed_height + 1;
            self.check_witness(&entry.output.conditions, &input.witness, &sighash, depth)?;
        }

        for input in &tx.inputs {
            self.mempool_spends.insert(input.outpoint);
        }
        self.status.insert(txid, TxStatus::Pending);
        self.mempool.push(tx);
        Ok(txid)
    }

    fn check_witness(
        &self,
        conditions: &SpendConditions,
        witness: &Witness,
        sighash: &MessageDigest,
        depth: u64,
    ) -> Result<(), LedgerError> {
        let verify = |key: &GroupPoint, sig: &EcdsaSignature| {
            ecdsa_verify(&self.curve, key, sighash, sig)
        };
        match (conditions, witness) {
            (SpendConditions::PayToKey(key), Witness::Key(sig))
            | (SpendConditions::PayToKeyUnconditional(key), Witness::Key(sig)) => {
                if verify(key, sig) {
                    Ok(())
                } else {
                    Err(LedgerError::BadSignature)
                }
            }
            (SpendConditions::Multisig2of2(k1, k2), Witness::TwoKeys(s1, s2)) => {
                if verify(k1, s1) && verify(k2, s2) {
                    Ok(())
                } else {
                    Err(LedgerError::BadSignature)
                }
            }
            (
                SpendConditions::ToSelfDelayed { owner, delay, .. },
                Witness::DelayedOwner(sig),
            ) => {
                if depth < u64::from(*delay) {
                    return Err(LedgerError::TimelockNotMet);
                }
                if verify(owner, sig) {
                    Ok(())
                } else {
                    Err(LedgerError::BadSignature)
                }
            }
            (
                SpendConditions::ToSelfDelayed { revocation_key, .. },
                Witness::Revocation(sig),
            ) => {
                if verify(revocation_key, sig) {
                    Ok(())
                } else {
                    Err(LedgerError::BadSignature)
                }
            }
            (
                SpendConditions::HtlcOffered {
                    hash, claim_key, ..
                }
                | SpendConditions::HtlcReceived {
                    hash, claim_key, ..
                },
                Witness::HtlcClaim { preimage, signature },
            ) => {
                if &sha256(preimage) != hash {
                    return Err(LedgerError::BadPreimage);
                }
                if verify(claim_key, signature) {
                    Ok(())
                } else {
                    Err(LedgerError::BadSignature)
                }
            }
            (
                SpendConditions::HtlcOffered {
                    refund_key,
                    timeout_delay,
                    ..
                }
                | SpendConditions::HtlcReceived {
                    refund_key,
                    timeout_delay,
                    ..
                },
                Witness::HtlcRefund(sig),
            ) => {
                if depth < u64::from(*timeout_delay) {
                    return Err(LedgerError::TimelockNotMet);
                }
                if verify(refund_key, sig) {
                    Ok(())
                } else {
                    Err(LedgerError::BadSignature)
                }
            }
            _ => Err(LedgerError::BadSignature),
        }
    }

    /// Mines the mempool into a new block and returns its height.
    pub fn mine_block(&mut self) -> u64 {
        self.height += 1;
        let mut txids = Vec::new();
        for tx in std::mem::take(&mut self.mempool) {
            let txid = tx.txid(&self.curve);
            for input in &tx.inputs {
                self.utxos.remove(&input.outpoint);
                self.mempool_spends.remove(&input.outpoint);
            }
            for (vout, output) in tx.outputs.iter().enumerate() {
                self.utxos.insert(
                    OutPoint {
                        txid,
                        vout: vout as u32,
                    },
                    UtxoEntry {
                        output: output.clone(),
                        confirmed_height: self.height,
                    },
                );
            }
            self.fees_collected += tx.fee;
            self.status.insert(txid, TxStatus::Confirmed { height: self.height });
            self.transactions.insert(txid, tx);
            txids.push(txid);
        }
        self.blocks.push(Block {
            height: self.height,
            txids,
        });
        self.height
    }

    pub fn mine_blocks(&mut self, n: u64) -> u64 {
        for _ in 0..n {
            self.mine_block();
        }
        self.height
    }

    pub fn status_of(&self, txid: &MessageDigest) -> TxStatus {
        self.status.get(txid).copied().unwrap_or(TxStatus::Unknown)
    }

    /// Depth of a confirmed transaction: 1 in the block it was mined.
    pub fn confirmations(&self, txid: &MessageDigest) -> Option<u64> {
        match self.status_of(txid) {
            TxStatus::Confirmed { height } => Some(self.height - height + 1),
            _ => None,
        }
    }

    pub fn utxo(&self, outpoint: &OutPoint) -> Option<&TxOutput> {
        self.utxos.get(outpoint).map(|e| &e.output)
    }

    pub fn utxo_depth(&self, outpoint: &OutPoint) -> Option<u64> {
        self.utxos
            .get(outpoint)
            .map(|e| self.height - e.confirmed_height + 1)
    }

    pub fn is_unspent(&self, outpoint: &OutPoint) -> bool {
        self.utxos.contains_key(outpoint)
    }

    pub fn unspent_outpoints(&self) -> Vec<OutPoint> {
        self.utxos.keys().copied().collect()
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        self.blocks.iter().find(|b| b.height == height)
    }

    pub fn transaction(&self, txid: &MessageDigest) -> Option<&Transaction> {
        self.transactions.get(txid)
    }

    pub fn total_granted(&self) -> Satoshi {
        self.granted
    }

    pub fn total_fees(&self) -> Satoshi {
        self.fees_collected
    }

    pub fn unspent_total(&self) -> Satoshi {
        self.utxos.values().map(|e| e.output.value).sum()
    }

    /// Everything minted is either still unspent or was paid in fees.
    /// Pending transactions hold no value of their own: their inputs
    /// stay in the UTXO set until mined.
    pub fn conservation_holds(&self) -> bool {
        self.granted == self.unspent_total() + self.fees_collected
    }

    /// Human-readable chain summary, deterministic for a given state.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "height {}  utxos {}  granted {}  fees {}  pending {}",
            self.height,
            self.utxos.len(),
            self.granted,
            self.fees_collected,
            self.mempool.len()
        );
        for (op, entry) in &self.utxos {
            let _ = writeln!(
                s,
                "  {}:{} {} sat depth {} {}",
                op.txid.to_hex(),
                op.vout,
                entry.output.value,
                self.height - entry.confirmed_height + 1,
                describe_conditions(&entry.output.conditions),
            );
        }
        s
    }
}

fn describe_conditions(c: &SpendConditions) -> &'static str {
    match c {
        SpendConditions::PayToKey(_) => "pay-to-key",
        SpendConditions::PayToKeyUnconditional(_) => "pay-to-key-unconditional",
        SpendConditions::Multisig2of2(..) => "multisig-2of2",
        SpendConditions::ToSelfDelayed { .. } => "to-self-delayed",
        SpendConditions::HtlcOffered { .. } => "htlc-offered",
        SpendConditions::HtlcReceived { .. } => "htlc-received",
    }
}

#[cfg(test)]
mod tests;
