//! Deterministic harness wiring the four machines to each other and to
//! an in-memory ledger.
//!
//! Machine outputs are routed through one FIFO queue, so a given seed
//! replays the identical message order every run. Mining is demand
//! driven: blocks are produced only while a depth watch or an
//! unconfirmed transaction is outstanding, and every mined block is
//! scanned so both channel peers hear about spends of the funding
//! outpoint.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::channel::CloseInitiator;
use crate::crypto::{CurveParams, MessageDigest};
use crate::ledger::{Ledger, Satoshi, SpendConditions, TxStatus};

use super::{
    BridgeMachine, ChainAction, ChainEvent, DeviceLinkMsg, DeviceMachine, Envelope, FlowOutcome,
    GatewayMachine, NodeId, OutMsg, ProtocolError, RemoteMachine, Role, TraceEvent,
};

const GATEWAY_NODE: NodeId = 1;
const BRIDGE_NODE: NodeId = 2;
const REMOTE_NODE: NodeId = 3;

/// Blocks mined without any message traffic before the run is declared
/// stuck. Honest waits are bounded by the commitment delay, far below
/// this.
const MINING_BUDGET: u32 = 10_000;

enum Delivery {
    ToDevice(DeviceLinkMsg),
    ToGateway(DeviceLinkMsg),
    Peer { from: Role, to: Role, env: Envelope },
    Chain { to: Role, ev: ChainEvent },
}

#[derive(Clone, Copy, Debug)]
pub struct NetworkConfig {
    pub seed: u64,
    /// Gateway fee on device-initiated sends, parts per million.
    pub service_fee_ppm: u32,
    /// On-chain fee for the funding transaction.
    pub open_fee: Satoshi,
    /// On-chain fee for a cooperative close.
    pub close_fee: Satoshi,
}

impl Default for NetworkConfig {
    fn default() -> NetworkConfig {
        NetworkConfig {
            seed: 7,
            service_fee_ppm: 100_000,
            open_fee: crate::channel::DEFAULT_OPEN_FEE,
            close_fee: crate::channel::DEFAULT_CLOSE_FEE,
        }
    }
}

/// How a channel is taken down.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CloseMode {
    /// Negotiated close; the initiator pays the closing fee.
    Mutual(CloseInitiator),
    /// Gateway broadcasts the current joint commitment unilaterally.
    ForceGateway,
    /// Bridge broadcasts its current commitment unilaterally.
    ForceBridge,
}

/// Per-flow accounting assembled from the trace slice the flow covers.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FlowReport {
    pub outcome: FlowOutcome,
    /// Step names in figure order; see [`super::step_sequence`].
    pub steps: Vec<&'static str>,
    pub keygen_ops: usize,
    pub derive_ops: usize,
    pub sign_ops: usize,
    pub reveal_ops: usize,
    /// Messages and bytes over the device/gateway link, both directions.
    pub device_link_msgs: usize,
    pub device_link_bytes: usize,
    /// Messages and bytes over the peer links, both directions.
    pub peer_msgs: usize,
    pub peer_bytes: usize,
    /// Bounds of this flow's slice of [`Network::trace`].
    pub trace_start: usize,
    pub trace_end: usize,
}

/// One device, one gateway, one bridge, one remote node, one chain.
pub struct Network {
    pub config: NetworkConfig,
    pub curve: CurveParams,
    pub ledger: Ledger,
    pub device: DeviceMachine,
    pub gateway: GatewayMachine,
    pub bridge: BridgeMachine,
    pub remote: RemoteMachine,
    pub trace: Vec<TraceEvent>,
    /// When false the party neither receives messages nor sees new
    /// blocks; deliveries addressed to it are silently dropped.
    pub gateway_online: bool,
    pub bridge_online: bool,
    queue: VecDeque<Delivery>,
    watches: Vec<(Role, MessageDigest, u64)>,
    pending_txids: Vec<MessageDigest>,
    outcomes: Vec<(Role, FlowOutcome)>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Network {
        let curve = CurveParams::secp256k1();
        let ledger = Ledger::new(&curve);
        let mut seeder = ChaCha20Rng::seed_from_u64(config.seed);
        let frame_key: [u8; 32] = seeder.gen();
        let device_secret = curve.random_scalar(&mut seeder);
        let gateway_secret = curve.random_scalar(&mut seeder);
        let mut device = DeviceMachine::new(curve.clone(), seeder.gen(), frame_key, device_secret);
        let mut gateway = GatewayMachine::new(
            curve.clone(),
            seeder.gen(),
            frame_key,
            GATEWAY_NODE,
            gateway_secret,
            config.service_fee_ppm,
        );
        let mut bridge = BridgeMachine::new(curve.clone(), seeder.gen(), BRIDGE_NODE);
        let remote = RemoteMachine::new(curve.clone(), seeder.gen(), REMOTE_NODE);

        gateway.set_device_key(device.onchain_key().clone());
        gateway.set_onchain_fees(config.open_fee, config.close_fee);
        gateway.register_remote_node(remote.node_id(), remote.node_key());
        bridge.set_gateway_node(gateway.node_id());
        bridge.set_remote_node(remote.node_id());
        device.set_open_fee_policy(config.open_fee);

        Network {
            config,
            curve,
            ledger,
            device,
            gateway,
            bridge,
            remote,
            trace: Vec::new(),
            gateway_online: true,
            bridge_online: true,
            queue: VecDeque::new(),
            watches: Vec::new(),
            pending_txids: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    pub fn outcomes(&self) -> &[(Role, FlowOutcome)] {
        &self.outcomes
    }

    /// Files a machine's outputs: events into the trace, messages into
    /// the queue, chain actions against the ledger.
    pub fn ingest(&mut self, from: Role, msgs: Vec<OutMsg>) -> Result<(), ProtocolError> {
        for m in msgs {
            match m {
                OutMsg::Event(ev) => self.trace.push(ev),
                OutMsg::ToDevice(msg) => self.queue.push_back(Delivery::ToDevice(msg)),
                OutMsg::ToGateway(msg) => self.queue.push_back(Delivery::ToGateway(msg)),
                OutMsg::ToPeer { to, env } => {
                    self.queue.push_back(Delivery::Peer { from, to, env })
                }
                OutMsg::Chain(ChainAction::Submit(tx)) => {
                    let txid = self.ledger.submit(tx)?;
                    self.pending_txids.push(txid);
                }
                OutMsg::Chain(ChainAction::WatchDepth { txid, depth }) => {
                    self.watches.push((from, txid, depth));
                }
                OutMsg::Done(outcome) => self.outcomes.push((from, outcome)),
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, d: Delivery) -> Result<(), ProtocolError> {
        match d {
            Delivery::ToDevice(msg) => {
                let out = self.device.on_link(msg)?;
                self.ingest(Role::Device, out)
            }
            Delivery::ToGateway(msg) => {
                if !self.gateway_online {
                    return Ok(());
                }
                let out = self.gateway.on_device(msg)?;
                self.ingest(Role::Gateway, out)
            }
            Delivery::Peer { from, to, env } => match to {
                Role::Gateway => {
                    if !self.gateway_online {
                        return Ok(());
                    }
                    let out = self.gateway.on_peer(env)?;
                    self.ingest(Role::Gateway, out)
                }
                Role::Bridge => {
                    if !self.bridge_online {
                        return Ok(());
                    }
                    let out = self.bridge.on_peer(from, env)?;
                    self.ingest(Role::Bridge, out)
                }
                Role::Remote => {
                    let out = self.remote.on_peer(env)?;
                    self.ingest(Role::Remote, out)
                }
                Role::Device => Err(ProtocolError::Malformed("no peer link reaches the device")),
            },
            Delivery::Chain { to, ev } => match to {
                Role::Gateway => {
                    if !self.gateway_online {
                        return Ok(());
                    }
                    let out = self.gateway.on_chain(ev)?;
                    self.ingest(Role::Gateway, out)
                }
                Role::Bridge => {
                    if !self.bridge_online {
                        return Ok(());
                    }
                    let out = self.bridge.on_chain(ev)?;
                    self.ingest(Role::Bridge, out)
                }
                _ => Ok(()),
            },
        }
    }

    fn chain_work_outstanding(&self) -> bool {
        !self.watches.is_empty()
            || self
                .pending_txids
                .iter()
                .any(|t| self.ledger.status_of(t) == TxStatus::Pending)
    }

    /// Mines one block, notifies both peers, scans the block for spends
    /// of the funding outpoint, and fires any satisfied depth watches,
    /// gateway first.
    fn mine_one(&mut self) -> Result<(), ProtocolError> {
        let height = self.ledger.mine_block();
        self.queue.push_back(Delivery::Chain {
            to: Role::Gateway,
            ev: ChainEvent::NewBlock { height },
        });
        self.queue.push_back(Delivery::Chain {
            to: Role::Bridge,
            ev: ChainEvent::NewBlock { height },
        });

        if let Some(funding) = self.gateway.funding_outpoint() {
            let txids = self
                .ledger
                .block(height)
                .map(|b| b.txids.clone())
                .unwrap_or_default();
            for txid in txids {
                let spends_funding = self
                    .ledger
                    .transaction(&txid)
                    .map(|tx| tx.inputs.iter().any(|i| i.outpoint == funding))
                    .unwrap_or(false);
                if spends_funding {
                    let tx = self
                        .ledger
                        .transaction(&txid)
                        .cloned()
                        .expect("listed in the block");
                    if self.gateway_online {
                        let out = self.gateway.on_funding_spent(&tx)?;
                        self.ingest(Role::Gateway, out)?;
                    }
                    if self.bridge_online {
                        let out = self.bridge.on_funding_spent(&tx)?;
                        self.ingest(Role::Bridge, out)?;
                    }
                }
            }
        }

        let ledger = &self.ledger;
        let mut fired: Vec<(Role, MessageDigest, u64)> = Vec::new();
        self.watches.retain(|w| {
            let deep_enough = ledger.confirmations(&w.1).map_or(false, |c| c >= w.2);
            if deep_enough {
                fired.push(*w);
            }
            !deep_enough
        });
        fired.sort_by_key(|w| match w.0 {
            Role::Gateway => 0,
            _ => 1,
        });
        for (role, txid, depth) in fired {
            self.queue.push_back(Delivery::Chain {
                to: role,
                ev: ChainEvent::DepthReached { txid, depth },
            });
        }
        let ledger = &self.ledger;
        self.pending_txids
            .retain(|t| ledger.status_of(t) == TxStatus::Pending);
        Ok(())
    }

    fn abort_all(&mut self) {
        self.queue.clear();
        self.device.abort();
        self.gateway.abort();
        self.bridge.abort();
    }

    /// Runs the queue to completion. Any handler error, or a drained
    /// queue while a flow is still mid-air, aborts every machine and
    /// surfaces the error.
    pub fn pump(&mut self) -> Result<(), ProtocolError> {
        let mut idle_blocks = 0u32;
        loop {
            if !self.queue.is_empty() {
                idle_blocks = 0;
            }
            while let Some(d) = self.queue.pop_front() {
                if let Err(e) = self.dispatch(d) {
                    self.abort_all();
                    return Err(e);
                }
            }
            if self.chain_work_outstanding() {
                idle_blocks += 1;
                if idle_blocks > MINING_BUDGET {
                    self.abort_all();
                    return Err(ProtocolError::Timeout);
                }
                if let Err(e) = self.mine_one() {
                    self.abort_all();
                    return Err(e);
                }
                continue;
            }
            if self.gateway.in_flow() || self.bridge.in_flow() {
                self.abort_all();
                return Err(ProtocolError::Timeout);
            }
            return Ok(());
        }
    }

    /// Like [`Network::pump`], but stops quietly once traffic and chain
    /// work dry up, even if a machine is still waiting on a response.
    /// Handler errors propagate without tearing anything down. Meant
    /// for driving misbehaviour scenarios step by step.
    pub fn drain(&mut self) -> Result<(), ProtocolError> {
        let mut idle_blocks = 0u32;
        loop {
            if !self.queue.is_empty() {
                idle_blocks = 0;
            }
            while let Some(d) = self.queue.pop_front() {
                self.dispatch(d)?;
            }
            if self.chain_work_outstanding() {
                idle_blocks += 1;
                if idle_blocks > MINING_BUDGET {
                    return Err(ProtocolError::Timeout);
                }
                self.mine_one()?;
                continue;
            }
            return Ok(());
        }
    }

    /// Delivers everything currently queued without mining.
    pub fn step_queue(&mut self) -> Result<(), ProtocolError> {
        while let Some(d) = self.queue.pop_front() {
            self.dispatch(d)?;
        }
        Ok(())
    }

    /// Mines `n` blocks, delivering the notifications in between.
    pub fn mine(&mut self, n: u64) -> Result<(), ProtocolError> {
        for _ in 0..n {
            self.mine_one()?;
            while let Some(d) = self.queue.pop_front() {
                self.dispatch(d)?;
            }
        }
        Ok(())
    }

    fn run_flow(&mut self, flow: &'static str, start: usize) -> Result<FlowReport, ProtocolError> {
        let outcomes_before = self.outcomes.len();
        self.pump()?;
        let outcome = self.outcomes[outcomes_before..]
            .iter()
            .find(|(role, _)| *role == Role::Gateway)
            .map(|(_, o)| *o)
            .ok_or(ProtocolError::Timeout)?;
        self.trace.push(TraceEvent::FlowDone { flow });
        Ok(summarize(outcome, &self.trace, start))
    }
}

fn summarize(outcome: FlowOutcome, trace: &[TraceEvent], start: usize) -> FlowReport {
    let end = trace.len();
    let slice = &trace[start..end];
    let mut report = FlowReport {
        outcome,
        steps: super::step_sequence(slice),
        keygen_ops: 0,
        derive_ops: 0,
        sign_ops: 0,
        reveal_ops: 0,
        device_link_msgs: 0,
        device_link_bytes: 0,
        peer_msgs: 0,
        peer_bytes: 0,
        trace_start: start,
        trace_end: end,
    };
    for ev in slice {
        match ev {
            TraceEvent::Op { kind, .. } => match kind {
                super::OpKind::Keygen => report.keygen_ops += 1,
                super::OpKind::DeriveChild { .. } => report.derive_ops += 1,
                super::OpKind::ThresholdSign { .. } => report.sign_ops += 1,
                super::OpKind::RevealSecret { .. } => report.reveal_ops += 1,
                _ => {}
            },
            TraceEvent::Control { bytes, .. } | TraceEvent::Link { bytes, .. } => {
                report.device_link_msgs += 1;
                report.device_link_bytes += bytes;
            }
            TraceEvent::Peer { bytes, .. } => {
                report.peer_msgs += 1;
                report.peer_bytes += bytes;
            }
            TraceEvent::FlowDone { .. } => {}
        }
    }
    report
}

/// Funds the device wallet with exactly the capacity plus the anchor
/// fee and runs the open flow to a locked channel.
pub fn open_channel_flow(net: &mut Network, capacity: Satoshi) -> Result<FlowReport, ProtocolError> {
    let start = net.trace.len();
    let open_fee = net.config.open_fee;
    let outpoint = net.ledger.grant_utxo(
        capacity + open_fee,
        SpendConditions::PayToKey(net.device.onchain_key().clone()),
    );
    net.gateway.set_funding_source(outpoint, capacity + open_fee);
    let out = net.device.request_open(capacity, net.bridge.node_id());
    net.ingest(Role::Device, out)?;
    net.run_flow("open", start)
}

/// Device pays `amount` to the remote node behind the bridge. The
/// remote's signed invoice is placed with the gateway first, as it
/// would arrive out of band.
pub fn send_payment_flow(net: &mut Network, amount: Satoshi) -> Result<FlowReport, ProtocolError> {
    let start = net.trace.len();
    let expiry = net.ledger.height() + 64;
    let invoice = net.remote.issue_invoice(amount, expiry);
    net.gateway.register_invoice(invoice);
    let out = net.device.request_send(amount, net.remote.node_id());
    net.ingest(Role::Device, out)?;
    net.run_flow("send", start)
}

/// The remote node pays `amount` toward the device's channel against
/// an invoice the gateway issued.
pub fn receive_payment_flow(
    net: &mut Network,
    amount: Satoshi,
) -> Result<FlowReport, ProtocolError> {
    let start = net.trace.len();
    let expiry = net.ledger.height() + 64;
    let invoice = net.gateway.issue_invoice(amount, expiry);
    let out = net
        .remote
        .start_payment(invoice.amount, invoice.payment_hash, invoice.destination)?;
    net.ingest(Role::Remote, out)?;
    net.run_flow("receive", start)
}

/// Takes the channel down in the requested way and settles the chain.
pub fn close_channel_flow(net: &mut Network, mode: CloseMode) -> Result<FlowReport, ProtocolError> {
    let start = net.trace.len();
    match mode {
        CloseMode::Mutual(CloseInitiator::Iot) => {
            let out = net.device.request_close();
            net.ingest(Role::Device, out)?;
        }
        CloseMode::Mutual(CloseInitiator::Gateway) => {
            let out = net.gateway.request_close()?;
            net.ingest(Role::Gateway, out)?;
        }
        CloseMode::Mutual(CloseInitiator::Bridge) => {
            let out = net.bridge.request_close()?;
            net.ingest(Role::Bridge, out)?;
        }
        CloseMode::ForceGateway => {
            let out = net.gateway.force_close()?;
            net.ingest(Role::Gateway, out)?;
        }
        CloseMode::ForceBridge => {
            let out = net.bridge.force_close()?;
            net.ingest(Role::Bridge, out)?;
        }
    }
    net.run_flow("close", start)
}
