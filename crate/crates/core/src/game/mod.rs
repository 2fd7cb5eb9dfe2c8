//! Channel-closure incentives as finite extensive-form games.
//!
//! Two players, the bridge and the gateway, decide between closing the
//! channel cooperatively and broadcasting a stale commitment; the
//! victim of a broadcast decides between punishing and doing nothing
//! (being offline). The collusion variant appends one more decision to
//! every dishonest outcome: whoever ended up holding the spoils can
//! share them with the other party at fixed ratios, which is what a
//! pre-arranged theft from the device's balance would require.
//!
//! Payoffs are integer satoshis. The device balance is carried through
//! every terminal for reporting, but the device is not a player.

mod export;
mod solve;

pub use export::{render_dot, render_text};
pub use solve::{backward_induction, ChosenAction, Rational, RationalPayoff, Solution};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::Satoshi;

pub const PPM: u32 = 1_000_000;

/// Floor of `amount * ppm / 1e6`.
pub fn ppm_part(amount: Satoshi, ppm: u32) -> Satoshi {
    ((u128::from(amount) * u128::from(ppm)) / u128::from(PPM)) as Satoshi
}

/// Parses a decimal fraction ("0.5", "1", "0.105") into parts per
/// million, rounding half up at the seventh decimal digit.
pub fn parse_decimal_ppm(s: &str) -> Result<u32, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty number".into());
    }
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(format!("malformed number: {s}"));
    }
    let int_val: u64 = if int_part.is_empty() {
        0
    } else {
        int_part
            .parse()
            .map_err(|_| format!("malformed number: {s}"))?
    };
    if !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return Err(format!("malformed number: {s}"));
    }
    let mut frac_val: u64 = 0;
    for (i, c) in frac_part.chars().enumerate() {
        let d = u64::from(c as u8 - b'0');
        match i {
            0..=5 => frac_val = frac_val * 10 + d,
            6 => {
                // Seventh digit decides the rounding; further digits
                // only matter over exact halves, which round up anyway.
                if d >= 5 {
                    frac_val += 1;
                }
                break;
            }
            _ => unreachable!(),
        }
    }
    let mut scale = frac_part.len().min(6);
    let mut frac_ppm = frac_val;
    while scale < 6 {
        frac_ppm *= 10;
        scale += 1;
    }
    let total = int_val
        .checked_mul(u64::from(PPM))
        .and_then(|v| v.checked_add(frac_ppm))
        .ok_or_else(|| format!("number out of range: {s}"))?;
    u32::try_from(total).map_err(|_| format!("number out of range: {s}"))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Player {
    Bridge,
    Gateway,
}

impl std::fmt::Display for Player {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Player::Bridge => "bridge",
            Player::Gateway => "gateway",
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ActionLabel {
    CloseNormally,
    BroadcastRevoked,
    Punish,
    Offline,
    Share,
    DoNotShare,
}

impl std::fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionLabel::CloseNormally => "close-normally",
            ActionLabel::BroadcastRevoked => "broadcast-revoked",
            ActionLabel::Punish => "punish",
            ActionLabel::Offline => "offline",
            ActionLabel::Share => "share",
            ActionLabel::DoNotShare => "do-not-share",
        })
    }
}

/// Terminal payoffs: what each player walks away with, plus the device
/// residual riding along for ledger cross-checks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct PayoffVector {
    pub bridge: Satoshi,
    pub gateway: Satoshi,
    pub iot: Satoshi,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum GameNode {
    Terminal {
        payoff: PayoffVector,
        note: String,
    },
    Decision {
        player: Player,
        name: String,
        /// Honest alternatives are listed first; the solver breaks
        /// exact payoff ties in listed order.
        actions: Vec<(ActionLabel, GameNode)>,
    },
    Chance {
        name: String,
        /// (probability in ppm, subtree); probabilities sum to 1e6.
        branches: Vec<(u32, GameNode)>,
    },
}

/// One channel split: device x, bridge y, gateway z.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct StateTriple {
    pub iot: Satoshi,
    pub bridge: Satoshi,
    pub gateway: Satoshi,
}

impl StateTriple {
    fn sum(&self) -> u128 {
        u128::from(self.iot) + u128::from(self.bridge) + u128::from(self.gateway)
    }
}

fn default_half() -> u32 {
    PPM / 2
}

/// Everything the game shapes depend on: the live state, one stale
/// state per potential broadcaster, the chance weight for who moves,
/// and the four sharing ratios of the collusion variant.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GameParameters {
    pub capacity: Satoshi,
    pub current: StateTriple,
    /// Stale state a cheating bridge would broadcast.
    pub bridge_favorable: StateTriple,
    /// Stale state a cheating gateway would broadcast.
    pub gateway_broadcast: StateTriple,
    /// Probability, in ppm, that the bridge is the one who moves.
    #[serde(default = "default_half")]
    pub start_probability_ppm: u32,
    #[serde(default = "default_half")]
    pub share_a_ppm: u32,
    #[serde(default = "default_half")]
    pub share_b_ppm: u32,
    #[serde(default = "default_half")]
    pub share_c_ppm: u32,
    #[serde(default = "default_half")]
    pub share_d_ppm: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GameError {
    #[error("parameters violate the game constraints: {0:?}")]
    InvalidParameters(Vec<String>),
}

/// Checks every structural constraint independently and names each
/// violated relation. An empty list means the parameters are usable.
pub fn validate_parameters(p: &GameParameters) -> Vec<String> {
    let mut violations = Vec::new();
    let c = u128::from(p.capacity);
    if p.current.sum() != c {
        violations.push("x + y + z = C".to_string());
    }
    if p.bridge_favorable.sum() != c {
        violations.push("x' + y' + z' = C".to_string());
    }
    if p.bridge_favorable.bridge <= p.current.bridge {
        violations.push("y' > y".to_string());
    }
    if p.bridge_favorable.gateway > p.current.gateway {
        violations.push("z' <= z".to_string());
    }
    if p.bridge_favorable.iot >= p.current.iot {
        violations.push("x' < x".to_string());
    }
    if p.gateway_broadcast.sum() != c {
        violations.push("x'' + y'' + z'' = C".to_string());
    }
    if p.gateway_broadcast.bridge <= p.current.bridge {
        violations.push("y'' > y".to_string());
    }
    if p.gateway_broadcast.gateway > p.current.gateway {
        violations.push("z'' <= z".to_string());
    }
    if p.gateway_broadcast.iot >= p.current.iot {
        violations.push("x'' < x".to_string());
    }
    if p.start_probability_ppm > PPM {
        violations.push("0 <= p <= 1".to_string());
    }
    violations
}

fn ratios_in_open_unit_interval(p: &GameParameters) -> Vec<String> {
    let mut violations = Vec::new();
    for (name, v) in [
        ("a", p.share_a_ppm),
        ("b", p.share_b_ppm),
        ("c", p.share_c_ppm),
        ("d", p.share_d_ppm),
    ] {
        if v == 0 || v >= PPM {
            violations.push(format!("0 < {name} < 1"));
        }
    }
    violations
}

fn terminal(bridge: Satoshi, gateway: Satoshi, iot: Satoshi, note: &str) -> GameNode {
    GameNode::Terminal {
        payoff: PayoffVector {
            bridge,
            gateway,
            iot,
        },
        note: note.to_string(),
    }
}

/// The two-player closure game: a chance move picks who acts; the
/// actor closes honestly or broadcasts its stale state; the victim
/// punishes or is offline.
pub fn build_closure_game(p: &GameParameters) -> Result<GameNode, GameError> {
    let violations = validate_parameters(p);
    if !violations.is_empty() {
        return Err(GameError::InvalidParameters(violations));
    }
    Ok(chance_root(p, closure_bridge_subtree(p), closure_gateway_subtree(p)))
}

fn chance_root(p: &GameParameters, bridge_start: GameNode, gateway_start: GameNode) -> GameNode {
    GameNode::Chance {
        name: "start".to_string(),
        branches: vec![
            (p.start_probability_ppm, bridge_start),
            (PPM - p.start_probability_ppm, gateway_start),
        ],
    }
}

fn closure_bridge_subtree(p: &GameParameters) -> GameNode {
    let y = p.current.bridge;
    let z = p.current.gateway;
    let x = p.current.iot;
    let st = p.bridge_favorable;
    GameNode::Decision {
        player: Player::Bridge,
        name: "bridge-start".to_string(),
        actions: vec![
            (
                ActionLabel::CloseNormally,
                terminal(y, z, x, "cooperative close"),
            ),
            (
                ActionLabel::BroadcastRevoked,
                GameNode::Decision {
                    player: Player::Gateway,
                    name: "bridge-start/broadcast-response".to_string(),
                    actions: vec![
                        (
                            ActionLabel::Punish,
                            terminal(
                                0,
                                st.gateway + st.bridge,
                                st.iot,
                                "stale state punished",
                            ),
                        ),
                        (
                            ActionLabel::Offline,
                            terminal(st.bridge, st.gateway, st.iot, "stale state stands"),
                        ),
                    ],
                },
            ),
        ],
    }
}

fn closure_gateway_subtree(p: &GameParameters) -> GameNode {
    let y = p.current.bridge;
    let z = p.current.gateway;
    let x = p.current.iot;
    let st = p.gateway_broadcast;
    GameNode::Decision {
        player: Player::Gateway,
        name: "gateway-start".to_string(),
        actions: vec![
            (
                ActionLabel::CloseNormally,
                terminal(y, z, x, "cooperative close"),
            ),
            (
                ActionLabel::BroadcastRevoked,
                GameNode::Decision {
                    player: Player::Bridge,
                    name: "gateway-start/broadcast-response".to_string(),
                    actions: vec![
                        (
                            ActionLabel::Punish,
                            terminal(st.bridge + st.gateway, 0, st.iot, "stale state punished"),
                        ),
                        (
                            ActionLabel::Offline,
                            terminal(st.bridge, st.gateway, st.iot, "stale state stands"),
                        ),
                    ],
                },
            ),
        ],
    }
}

/// The collusion variant: every dishonest terminal of the closure game
/// becomes a decision for whoever holds the spoils, between keeping
/// them and handing a fixed share to the other party. Shares are
/// floored to whole satoshis; the remainder stays with the holder.
pub fn build_collusion_game(p: &GameParameters) -> Result<GameNode, GameError> {
    let mut violations = validate_parameters(p);
    violations.extend(ratios_in_open_unit_interval(p));
    if !violations.is_empty() {
        return Err(GameError::InvalidParameters(violations));
    }

    let y = p.current.bridge;
    let z = p.current.gateway;
    let x = p.current.iot;

    // Bridge broadcast side: the gateway seizes y' + z' when it
    // punishes, or the bridge keeps y' when the gateway is offline.
    let st = p.bridge_favorable;
    let seized = st.bridge + st.gateway;
    let a_cut = ppm_part(seized, p.share_a_ppm);
    let b_cut = ppm_part(st.bridge, p.share_b_ppm);
    let bridge_start = GameNode::Decision {
        player: Player::Bridge,
        name: "bridge-start".to_string(),
        actions: vec![
            (
                ActionLabel::CloseNormally,
                terminal(y, z, x, "cooperative close"),
            ),
            (
                ActionLabel::BroadcastRevoked,
                GameNode::Decision {
                    player: Player::Gateway,
                    name: "bridge-start/broadcast-response".to_string(),
                    actions: vec![
                        (
                            ActionLabel::Punish,
                            GameNode::Decision {
                                player: Player::Gateway,
                                name: "bridge-start/broadcast-response/punish-share".to_string(),
                                actions: vec![
                                    (
                                        ActionLabel::DoNotShare,
                                        terminal(0, seized, st.iot, "spoils kept"),
                                    ),
                                    (
                                        ActionLabel::Share,
                                        terminal(a_cut, seized - a_cut, st.iot, "spoils shared"),
                                    ),
                                ],
                            },
                        ),
                        (
                            ActionLabel::Offline,
                            GameNode::Decision {
                                player: Player::Bridge,
                                name: "bridge-start/broadcast-response/offline-share".to_string(),
                                actions: vec![
                                    (
                                        ActionLabel::DoNotShare,
                                        terminal(st.bridge, st.gateway, st.iot, "spoils kept"),
                                    ),
                                    (
                                        ActionLabel::Share,
                                        terminal(
                                            st.bridge - b_cut,
                                            st.gateway + b_cut,
                                            st.iot,
                                            "spoils shared",
                                        ),
                                    ),
                                ],
                            },
                        ),
                    ],
                },
            ),
        ],
    };

    // Gateway broadcast side, mirrored with ratios c and d.
    let st = p.gateway_broadcast;
    let seized = st.bridge + st.gateway;
    let c_cut = ppm_part(seized, p.share_c_ppm);
    let d_cut = ppm_part(st.gateway, p.share_d_ppm);
    let gateway_start = GameNode::Decision {
        player: Player::Gateway,
        name: "gateway-start".to_string(),
        actions: vec![
            (
                ActionLabel::CloseNormally,
                terminal(y, z, x, "cooperative close"),
            ),
            (
                ActionLabel::BroadcastRevoked,
                GameNode::Decision {
                    player: Player::Bridge,
                    name: "gateway-start/broadcast-response".to_string(),
                    actions: vec![
                        (
                            ActionLabel::Punish,
                            GameNode::Decision {
                                player: Player::Bridge,
                                name: "gateway-start/broadcast-response/punish-share".to_string(),
                                actions: vec![
                                    (
                                        ActionLabel::DoNotShare,
                                        terminal(seized, 0, st.iot, "spoils kept"),
                                    ),
                                    (
                                        ActionLabel::Share,
                                        terminal(seized - c_cut, c_cut, st.iot, "spoils shared"),
                                    ),
                                ],
                            },
                        ),
                        (
                            ActionLabel::Offline,
                            GameNode::Decision {
                                player: Player::Gateway,
                                name: "gateway-start/broadcast-response/offline-share".to_string(),
                                actions: vec![
                                    (
                                        ActionLabel::DoNotShare,
                                        terminal(st.bridge, st.gateway, st.iot, "spoils kept"),
                                    ),
                                    (
                                        ActionLabel::Share,
                                        terminal(
                                            st.bridge + d_cut,
                                            st.gateway - d_cut,
                                            st.iot,
                                            "spoils shared",
                                        ),
                                    ),
                                ],
                            },
                        ),
                    ],
                },
            ),
        ],
    };

    Ok(chance_root(p, bridge_start, gateway_start))
}

/// Draws a uniformly shaped valid parameter set: a current split with
/// all three balances positive, and stale states built by construction
/// to satisfy every relation (taking from the device or the gateway
/// always raises the bridge's stale balance strictly).
pub fn sample_parameters<R: rand::Rng + ?Sized>(rng: &mut R, capacity: Satoshi) -> GameParameters {
    assert!(capacity >= 4);
    let iot = rng.gen_range(1..=capacity - 2);
    let bridge = rng.gen_range(1..=capacity - iot - 1);
    let gateway = capacity - iot - bridge;

    let stale = |rng: &mut R| {
        let iot_s = rng.gen_range(0..iot);
        let gateway_s = rng.gen_range(0..=gateway);
        StateTriple {
            iot: iot_s,
            bridge: capacity - iot_s - gateway_s,
            gateway: gateway_s,
        }
    };
    let bridge_favorable = stale(rng);
    let gateway_broadcast = stale(rng);

    GameParameters {
        capacity,
        current: StateTriple {
            iot,
            bridge,
            gateway,
        },
        bridge_favorable,
        gateway_broadcast,
        start_probability_ppm: rng.gen_range(0..=PPM),
        share_a_ppm: rng.gen_range(1..PPM),
        share_b_ppm: rng.gen_range(1..PPM),
        share_c_ppm: rng.gen_range(1..PPM),
        share_d_ppm: rng.gen_range(1..PPM),
    }
}
