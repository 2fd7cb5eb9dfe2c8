//! Building blocks for a tri-party micropayment channel in which a
//! resource-constrained device transacts over a Lightning-style channel
//! that a semi-trusted gateway operates on its behalf.
//!
//! The stack, bottom to top:
//!
//! * [`crypto`]: runtime-parameterized elliptic curve group, plain ECDSA,
//!   SHA-256 digests, and an additively homomorphic (Paillier) scheme.
//! * [`threshold`]: two-party ECDSA with multiplicative key shares, shared
//!   hierarchical child derivation, and joint revocation-secret release.
//! * [`ledger`]: a simulated UTXO chain with multisig, delayed/revocable,
//!   and hash-time-locked spend conditions plus on-demand mining.
//! * [`channel`]: the tri-party channel state itself: balances, HTLCs,
//!   commitment/closing transaction builders, revocation bookkeeping.
//! * [`protocol`]: per-role message-driven state machines for the open,
//!   send, receive, and close flows, with wire framing.
//! * [`game`]: extensive-form closure and collusion games over channel
//!   snapshots, solved by backward induction.
//!
//! Everything is deterministic given caller-supplied RNGs; nothing here
//! talks to a real network or a real blockchain.

pub mod channel;
pub mod crypto;
pub mod game;
pub mod ledger;
pub mod protocol;
pub mod threshold;
