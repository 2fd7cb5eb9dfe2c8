use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{ecdsa_sign, sha256, CurveParams, EcdsaSignature, MessageDigest, Scalar};

use super::*;

struct Wallet {
    curve: CurveParams,
    rng: ChaCha20Rng,
}

impl Wallet {
    fn new(seed: u64) -> Wallet {
        Wallet {
            curve: CurveParams::toy(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    fn key(&mut self) -> (Scalar, GroupPoint) {
        let x = self.curve.random_scalar(&mut self.rng);
        let p = self.curve.mul_g(&x);
        (x, p)
    }

    /// Signs with nonce retry; the tiny curve occasionally hits r = 0.
    fn sign(&mut self, secret: &Scalar, digest: &MessageDigest) -> EcdsaSignature {
        loop {
            let k = self.curve.random_scalar(&mut self.rng);
            if let Ok(sig) = ecdsa_sign(&self.curve, secret, digest, &k) {
                return sig;
            }
        }
    }
}

fn pay(point: &GroupPoint) -> SpendConditions {
    SpendConditions::PayToKey(point.clone())
}

#[test]
fn grant_is_confirmed_and_conserved() {
    let w = Wallet::new(1);
    let mut ledger = Ledger::new(&w.curve);
    let mut w = w;
    let (_, p) = w.key();
    let op = ledger.grant_utxo(5_000, pay(&p));
    assert!(ledger.is_unspent(&op));
    assert_eq!(ledger.utxo(&op).unwrap().value, 5_000);
    assert_eq!(
        ledger.status_of(&op.txid),
        TxStatus::Confirmed { height: 1 }
    );
    assert_eq!(ledger.confirmations(&op.txid), Some(1));
    ledger.mine_blocks(2);
    assert_eq!(ledger.confirmations(&op.txid), Some(3));
    assert!(ledger.conservation_holds());
    assert_eq!(ledger.total_granted(), 5_000);
}

#[test]
fn key_spend_moves_value_and_collects_fee() {
    let mut w = Wallet::new(2);
    let mut ledger = Ledger::new(&w.curve);
    let (xa, pa) = w.key();
    let (_, pb) = w.key();
    let op = ledger.grant_utxo(1_000, pay(&pa));

    let outputs = vec![TxOutput {
        value: 900,
        conditions: pay(&pb),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 100, 0);
    let tx = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Key(w.sign(&xa, &sighash)),
        }],
        outputs,
        fee: 100,
        nonce: 0,
    };
    let txid = ledger.submit(tx).expect("valid spend");
    assert_eq!(ledger.status_of(&txid), TxStatus::Pending);
    assert!(ledger.is_unspent(&op), "inputs stay until mined");
    assert!(ledger.conservation_holds());

    ledger.mine_block();
    assert!(!ledger.is_unspent(&op));
    let new_op = OutPoint { txid, vout: 0 };
    assert_eq!(ledger.utxo(&new_op).unwrap().value, 900);
    assert_eq!(ledger.total_fees(), 100);
    assert!(ledger.conservation_holds());
}

#[test]
fn signature_does_not_transfer_to_a_mutated_transaction() {
    let mut w = Wallet::new(3);
    let mut ledger = Ledger::new(&w.curve);
    let (xowner, powner) = w.key();
    let (_, pa) = w.key();
    let op = ledger.grant_utxo(1_000, pay(&powner));

    // Sign a 900/100 split, then try to submit a 901/99 version with
    // the same witness. The digest covers outputs and fee, so the old
    // signature must not carry over.
    let outputs = vec![TxOutput {
        value: 900,
        conditions: pay(&pa),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 100, 0);
    let sig = w.sign(&xowner, &sighash);

    let tampered = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Key(sig.clone()),
        }],
        outputs: vec![TxOutput {
            value: 901,
            conditions: pay(&pa),
        }],
        fee: 99,
        nonce: 0,
    };
    assert_eq!(ledger.submit(tampered), Err(LedgerError::BadSignature));

    let honest = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Key(sig),
        }],
        outputs,
        fee: 100,
        nonce: 0,
    };
    ledger.submit(honest).expect("untampered version is valid");
}

#[test]
fn wrong_key_and_wrong_witness_shape_are_rejected() {
    let mut w = Wallet::new(4);
    let mut ledger = Ledger::new(&w.curve);
    let (_, pa) = w.key();
    let (xe, _) = w.key();
    let op = ledger.grant_utxo(500, pay(&pa));

    let outputs = vec![TxOutput {
        value: 500,
        conditions: pay(&pa),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 0, 0);
    let forged = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Key(w.sign(&xe, &sighash)),
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(forged), Err(LedgerError::BadSignature));

    let shape = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::HtlcRefund(w.sign(&xe, &sighash)),
        }],
        outputs,
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(shape), Err(LedgerError::BadSignature));
}

#[test]
fn missing_output_and_fee_mismatch_are_rejected() {
    let mut w = Wallet::new(5);
    let mut ledger = Ledger::new(&w.curve);
    let (xa, pa) = w.key();
    let op = ledger.grant_utxo(400, pay(&pa));

    let ghost = OutPoint {
        txid: sha256(b"nonexistent"),
        vout: 0,
    };
    let outputs = vec![TxOutput {
        value: 400,
        conditions: pay(&pa),
    }];
    let sighash = sighash_for(&w.curve, &[ghost], &outputs, 0, 0);
    let tx = Transaction {
        inputs: vec![TxInput {
            outpoint: ghost,
            witness: Witness::Key(w.sign(&xa, &sighash)),
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(tx), Err(LedgerError::MissingUtxo));

    // 400 in, 390 out, fee declared as 5: off by 5.
    let outputs = vec![TxOutput {
        value: 390,
        conditions: pay(&pa),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 5, 0);
    let tx = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Key(w.sign(&xa, &sighash)),
        }],
        outputs,
        fee: 5,
        nonce: 0,
    };
    assert_eq!(ledger.submit(tx), Err(LedgerError::FeeMismatch));
}

#[test]
fn first_submitted_spender_wins() {
    let mut w = Wallet::new(6);
    let mut ledger = Ledger::new(&w.curve);
    let (xa, pa) = w.key();
    let (_, pb) = w.key();
    let (_, pc) = w.key();
    let op = ledger.grant_utxo(300, pay(&pa));

    let spend_to = |w: &mut Wallet, dest: &GroupPoint, nonce: u64| {
        let outputs = vec![TxOutput {
            value: 300,
            conditions: pay(dest),
        }];
        let sighash = sighash_for(&w.curve, &[op], &outputs, 0, nonce);
        Transaction {
            inputs: vec![TxInput {
                outpoint: op,
                witness: Witness::Key(w.sign(&xa, &sighash)),
            }],
            outputs,
            fee: 0,
            nonce,
        }
    };

    let first = spend_to(&mut w, &pb, 0);
    let second = spend_to(&mut w, &pc, 1);
    ledger.submit(first).expect("first spender accepted");
    assert_eq!(ledger.submit(second.clone()), Err(LedgerError::Conflict));

    ledger.mine_block();
    // After the first spender confirms, the output is simply gone.
    assert_eq!(ledger.submit(second), Err(LedgerError::MissingUtxo));
}

#[test]
fn pending_outputs_cannot_be_spent_until_mined() {
    let mut w = Wallet::new(7);
    let mut ledger = Ledger::new(&w.curve);
    let (xa, pa) = w.key();
    let (xb, pb) = w.key();
    let op = ledger.grant_utxo(200, pay(&pa));

    let outputs = vec![TxOutput {
        value: 200,
        conditions: pay(&pb),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 0, 0);
    let tx = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Key(w.sign(&xa, &sighash)),
        }],
        outputs,
        fee: 0,
        nonce: 0,
    };
    let txid = ledger.submit(tx).unwrap();
    let pending = OutPoint { txid, vout: 0 };

    let outputs = vec![TxOutput {
        value: 200,
        conditions: pay(&pa),
    }];
    let sighash = sighash_for(&w.curve, &[pending], &outputs, 0, 0);
    let chained = Transaction {
        inputs: vec![TxInput {
            outpoint: pending,
            witness: Witness::Key(w.sign(&xb, &sighash)),
        }],
        outputs,
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(chained.clone()), Err(LedgerError::MissingUtxo));

    ledger.mine_block();
    ledger.submit(chained).expect("spendable once confirmed");
}

#[test]
fn delayed_output_obeys_its_depth_gate() {
    let mut w = Wallet::new(8);
    let mut ledger = Ledger::new(&w.curve);
    let (xo, po) = w.key();
    let (_, prev) = w.key();
    let delay = 5u32;
    let op = ledger.grant_utxo(800, SpendConditions::ToSelfDelayed {
        owner: po.clone(),
        revocation_key: prev.clone(),
        delay,
    });

    let outputs = vec![TxOutput {
        value: 800,
        conditions: pay(&po),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 0, 0);
    let spend = |w: &mut Wallet| Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::DelayedOwner(w.sign(&xo, &sighash)),
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };

    // Depth 1 now; depth k-1 after k-2 more blocks. Both short.
    assert_eq!(ledger.submit(spend(&mut w)), Err(LedgerError::TimelockNotMet));
    ledger.mine_blocks(u64::from(delay) - 2);
    assert_eq!(ledger.utxo_depth(&op), Some(u64::from(delay) - 1));
    assert_eq!(ledger.submit(spend(&mut w)), Err(LedgerError::TimelockNotMet));

    ledger.mine_block();
    assert_eq!(ledger.utxo_depth(&op), Some(u64::from(delay)));
    ledger.submit(spend(&mut w)).expect("deep enough to spend");
}

#[test]
fn revocation_path_ignores_the_delay() {
    let mut w = Wallet::new(9);
    let mut ledger = Ledger::new(&w.curve);
    let (_, po) = w.key();
    let (xr, prev) = w.key();
    let op = ledger.grant_utxo(800, SpendConditions::ToSelfDelayed {
        owner: po.clone(),
        revocation_key: prev.clone(),
        delay: 144,
    });

    let outputs = vec![TxOutput {
        value: 790,
        conditions: pay(&prev),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 10, 0);
    let tx = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::Revocation(w.sign(&xr, &sighash)),
        }],
        outputs,
        fee: 10,
        nonce: 0,
    };
    ledger.submit(tx).expect("revocation key spends at depth 1");
    ledger.mine_block();
    assert!(ledger.conservation_holds());
}

#[test]
fn htlc_claim_needs_the_preimage_and_refund_needs_depth() {
    let mut w = Wallet::new(10);
    let mut ledger = Ledger::new(&w.curve);
    let (xc, pc) = w.key();
    let (xr, pr) = w.key();
    let preimage = [7u8; 32];
    let hash = sha256(&preimage);
    let timeout = 4u32;

    let cond = SpendConditions::HtlcOffered {
        hash,
        claim_key: pc.clone(),
        refund_key: pr.clone(),
        timeout_delay: timeout,
    };
    let op = ledger.grant_utxo(600, cond.clone());

    let outputs = vec![TxOutput {
        value: 600,
        conditions: pay(&pc),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 0, 0);

    let wrong = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::HtlcClaim {
                preimage: [8u8; 32],
                signature: w.sign(&xc, &sighash),
            },
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(wrong), Err(LedgerError::BadPreimage));

    let early_refund = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::HtlcRefund(w.sign(&xr, &sighash)),
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(early_refund.clone()), Err(LedgerError::TimelockNotMet));

    let claim = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::HtlcClaim {
                preimage,
                signature: w.sign(&xc, &sighash),
            },
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };
    ledger.submit(claim).expect("preimage plus claim key");

    // A second grant exercises the refund path at depth.
    let op2 = ledger.grant_utxo(600, cond);
    let sighash2 = sighash_for(&w.curve, &[op2], &outputs, 0, 1);
    ledger.mine_blocks(u64::from(timeout) - 1);
    let refund = Transaction {
        inputs: vec![TxInput {
            outpoint: op2,
            witness: Witness::HtlcRefund(w.sign(&xr, &sighash2)),
        }],
        outputs,
        fee: 0,
        nonce: 1,
    };
    ledger.submit(refund).expect("timed out back to the offerer");
}

#[test]
fn multisig_requires_both_keys() {
    let mut w = Wallet::new(11);
    let mut ledger = Ledger::new(&w.curve);
    let (x1, p1) = w.key();
    let (x2, p2) = w.key();
    let op = ledger.grant_utxo(900, SpendConditions::Multisig2of2(p1.clone(), p2.clone()));

    let outputs = vec![TxOutput {
        value: 900,
        conditions: pay(&p1),
    }];
    let sighash = sighash_for(&w.curve, &[op], &outputs, 0, 0);
    let s1 = w.sign(&x1, &sighash);
    let s2 = w.sign(&x2, &sighash);

    let one_key_twice = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::TwoKeys(s1.clone(), s1.clone()),
        }],
        outputs: outputs.clone(),
        fee: 0,
        nonce: 0,
    };
    assert_eq!(ledger.submit(one_key_twice), Err(LedgerError::BadSignature));

    let both = Transaction {
        inputs: vec![TxInput {
            outpoint: op,
            witness: Witness::TwoKeys(s1, s2),
        }],
        outputs,
        fee: 0,
        nonce: 0,
    };
    ledger.submit(both).expect("both signatures verify");
}

#[test]
fn value_is_conserved_across_random_activity() {
    let mut w = Wallet::new(12);
    let mut ledger = Ledger::new(&w.curve);
    let mut rng = ChaCha20Rng::seed_from_u64(1212);
    let mut owned: Vec<(OutPoint, Scalar, GroupPoint, Satoshi)> = Vec::new();

    for round in 0..60 {
        match rng.gen_range(0..3) {
            0 => {
                let (x, p) = w.key();
                let value = rng.gen_range(100..10_000);
                let op = ledger.grant_utxo(value, pay(&p));
                owned.push((op, x, p, value));
            }
            1 if !owned.is_empty() => {
                let idx = rng.gen_range(0..owned.len());
                let (op, x, _, value) = owned.swap_remove(idx);
                let fee = value.min(rng.gen_range(1..40));
                let (xn, pn) = w.key();
                let outputs = vec![TxOutput {
                    value: value - fee,
                    conditions: pay(&pn),
                }];
                let sighash = sighash_for(&w.curve, &[op], &outputs, fee, round);
                let tx = Transaction {
                    inputs: vec![TxInput {
                        outpoint: op,
                        witness: Witness::Key(w.sign(&x, &sighash)),
                    }],
                    outputs,
                    fee,
                    nonce: round,
                };
                let txid = ledger.submit(tx).expect("owned output spends");
                ledger.mine_block();
                owned.push((OutPoint { txid, vout: 0 }, xn.clone(), pn, value - fee));
            }
            _ => {
                ledger.mine_block();
            }
        }
        assert!(ledger.conservation_holds(), "round {round}");
    }
    assert_eq!(
        ledger.total_granted(),
        ledger.unspent_total() + ledger.total_fees()
    );
}

#[test]
fn dump_is_deterministic_and_labeled() {
    let build = || {
        let mut w = Wallet::new(13);
        let mut ledger = Ledger::new(&w.curve);
        let (_, pa) = w.key();
        let (_, pb) = w.key();
        ledger.grant_utxo(100, pay(&pa));
        ledger.grant_utxo(250, SpendConditions::PayToKeyUnconditional(pb));
        ledger.mine_block();
        ledger.dump()
    };
    let d1 = build();
    let d2 = build();
    assert_eq!(d1, d2);
    assert!(d1.contains("height 3"));
    assert!(d1.contains("pay-to-key-unconditional"));
    assert!(d1.contains("100 sat"));
}
