//! Backward induction over [`GameNode`] trees.
//!
//! Chance weighting is done in exact unsigned rationals so that equal
//! outcomes stay equal to the satoshi: no floating point anywhere.

use std::cmp::Ordering;

use super::{ActionLabel, GameNode, PayoffVector, Player, PPM};
use crate::ledger::Satoshi;

/// Non-negative rational kept in lowest terms.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Rational {
    num: u128,
    den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

impl Rational {
    pub fn integer(v: Satoshi) -> Self {
        Rational {
            num: u128::from(v),
            den: 1,
        }
    }

    fn reduced(num: u128, den: u128) -> Self {
        debug_assert!(den != 0);
        let g = gcd(num, den).max(1);
        Rational {
            num: num / g,
            den: den / g,
        }
    }

    pub fn num(&self) -> u128 {
        self.num
    }

    pub fn den(&self) -> u128 {
        self.den
    }

    /// The exact satoshi value, when the rational is a whole number.
    pub fn as_integer(&self) -> Option<Satoshi> {
        if self.den == 1 {
            Satoshi::try_from(self.num).ok()
        } else {
            None
        }
    }

    fn add(self, other: Rational) -> Rational {
        Rational::reduced(
            self.num * other.den + other.num * self.den,
            self.den * other.den,
        )
    }

    fn scale_ppm(self, ppm: u32) -> Rational {
        Rational::reduced(self.num * u128::from(ppm), self.den * u128::from(PPM))
    }
}

impl PartialOrd for Rational {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Rational {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RationalPayoff {
    pub bridge: Rational,
    pub gateway: Rational,
    pub iot: Rational,
}

impl RationalPayoff {
    fn from_payoff(p: &PayoffVector) -> Self {
        RationalPayoff {
            bridge: Rational::integer(p.bridge),
            gateway: Rational::integer(p.gateway),
            iot: Rational::integer(p.iot),
        }
    }

    fn component(&self, player: Player) -> Rational {
        match player {
            Player::Bridge => self.bridge,
            Player::Gateway => self.gateway,
        }
    }

    fn add(self, other: RationalPayoff) -> RationalPayoff {
        RationalPayoff {
            bridge: self.bridge.add(other.bridge),
            gateway: self.gateway.add(other.gateway),
            iot: self.iot.add(other.iot),
        }
    }

    fn scale_ppm(self, ppm: u32) -> RationalPayoff {
        RationalPayoff {
            bridge: self.bridge.scale_ppm(ppm),
            gateway: self.gateway.scale_ppm(ppm),
            iot: self.iot.scale_ppm(ppm),
        }
    }

    /// Exact satoshi triple, when every component is whole.
    pub fn as_payoff(&self) -> Option<PayoffVector> {
        Some(PayoffVector {
            bridge: self.bridge.as_integer()?,
            gateway: self.gateway.as_integer()?,
            iot: self.iot.as_integer()?,
        })
    }
}

/// The action a decision node settles on under backward induction.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ChosenAction {
    pub node: String,
    pub player: Player,
    pub action: ActionLabel,
}

/// A full subgame-perfect strategy profile: one chosen action per
/// decision node (on- and off-path alike, in tree preorder) and the
/// value of the root.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Solution {
    pub choices: Vec<ChosenAction>,
    pub payoff: RationalPayoff,
}

impl Solution {
    pub fn action_at(&self, node: &str) -> Option<ActionLabel> {
        self.choices
            .iter()
            .find(|c| c.node == node)
            .map(|c| c.action)
    }

    pub fn payoff_satoshi(&self) -> Option<PayoffVector> {
        self.payoff.as_payoff()
    }
}

/// Solves the tree leaves-to-root. Each decision node picks the action
/// maximizing its own player's component, keeping the first of the
/// listed actions on exact ties; chance nodes return the probability
/// mix of their children, short-circuiting to the common value when
/// all children agree.
pub fn backward_induction(root: &GameNode) -> Solution {
    let (payoff, choices) = solve(root);
    Solution { choices, payoff }
}

fn solve(node: &GameNode) -> (RationalPayoff, Vec<ChosenAction>) {
    match node {
        GameNode::Terminal { payoff, .. } => (RationalPayoff::from_payoff(payoff), Vec::new()),
        GameNode::Decision {
            player,
            name,
            actions,
        } => {
            assert!(!actions.is_empty(), "decision node without actions");
            let solved: Vec<(ActionLabel, RationalPayoff, Vec<ChosenAction>)> = actions
                .iter()
                .map(|(label, child)| {
                    let (p, c) = solve(child);
                    (*label, p, c)
                })
                .collect();
            let mut best = 0;
            for i in 1..solved.len() {
                if solved[i].1.component(*player) > solved[best].1.component(*player) {
                    best = i;
                }
            }
            let mut choices = vec![ChosenAction {
                node: name.clone(),
                player: *player,
                action: solved[best].0,
            }];
            let value = solved[best].1;
            for (_, _, sub) in solved {
                choices.extend(sub);
            }
            (value, choices)
        }
        GameNode::Chance { branches, .. } => {
            assert!(!branches.is_empty(), "chance node without branches");
            let total: u64 = branches.iter().map(|(ppm, _)| u64::from(*ppm)).sum();
            assert_eq!(total, u64::from(PPM), "chance probabilities must sum to 1");
            let solved: Vec<(u32, RationalPayoff, Vec<ChosenAction>)> = branches
                .iter()
                .map(|(ppm, child)| {
                    let (p, c) = solve(child);
                    (*ppm, p, c)
                })
                .collect();
            let all_equal = solved.windows(2).all(|w| w[0].1 == w[1].1);
            let value = if all_equal {
                solved[0].1
            } else {
                let mut acc = RationalPayoff {
                    bridge: Rational::integer(0),
                    gateway: Rational::integer(0),
                    iot: Rational::integer(0),
                };
                for (ppm, payoff, _) in &solved {
                    acc = acc.add(payoff.scale_ppm(*ppm));
                }
                acc
            };
            let mut choices = Vec::new();
            for (_, _, sub) in solved {
                choices.extend(sub);
            }
            (value, choices)
        }
    }
}
