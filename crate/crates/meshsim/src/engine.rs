//! Deterministic discrete-event core: topology, lossy radio with broadcast
//! overhearing, event scheduling, and reproducible randomness.
//!
//! A run is strictly single threaded. All randomness derives from the run
//! seed through fixed per-node and per-link stream splits, so adding a node
//! or link never perturbs the draws of the others.

use crate::adversary::{self, AttackProfile};
use crate::detection::Monitor;
use crate::packet::{Frame, Packet, TxMode};
use crate::protocol::{Action, Ctx, NodeBehavior, RunParams, TimerKind};
use crate::qos_route::FlowSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use thiserror::Error;

/// Simulation time in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Stable node index, unique within a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("duplicate node id {0}")]
    DuplicateNodeId(u16),
    #[error("non-finite position for node {0}")]
    BadPosition(u16),
    #[error("radio range must be positive, got {0}")]
    BadRange(f64),
    #[error("loss probability {0} outside [0,1]")]
    BadLoss(f64),
}

/// Static radio topology: unit-disk neighbourhoods over 2D positions,
/// symmetric per-link loss, one mesh-group label per node.
#[derive(Debug, Clone)]
pub struct Topology {
    positions: Vec<(f64, f64)>,
    radio_range: f64,
    mesh_group: Vec<u16>,
    default_loss: f64,
    loss_overrides: BTreeMap<(u16, u16), f64>,
    per_hop_delay: u64,
    neighbors: Vec<Vec<NodeId>>,
}

impl Topology {
    pub fn build(
        positions: Vec<(f64, f64)>,
        radio_range: f64,
        mesh_group: Vec<u16>,
        default_loss: f64,
        loss_overrides: BTreeMap<(u16, u16), f64>,
        per_hop_delay_us: u64,
    ) -> Result<Topology, TopologyError> {
        if !(radio_range > 0.0) {
            return Err(TopologyError::BadRange(radio_range));
        }
        if !(0.0..=1.0).contains(&default_loss) {
            return Err(TopologyError::BadLoss(default_loss));
        }
        for (p, &(x, y)) in positions.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(TopologyError::BadPosition(p as u16));
            }
        }
        for (&(a, b), &p) in &loss_overrides {
            if !(0.0..=1.0).contains(&p) {
                return Err(TopologyError::BadLoss(p));
            }
            debug_assert!(a <= b, "overrides stored canonically");
        }
        let n = positions.len();
        let mut neighbors = vec![Vec::new(); n];
        for a in 0..n {
            for b in (a + 1)..n {
                let dx = positions[a].0 - positions[b].0;
                let dy = positions[a].1 - positions[b].1;
                if (dx * dx + dy * dy).sqrt() <= radio_range {
                    neighbors[a].push(NodeId(b as u16));
                    neighbors[b].push(NodeId(a as u16));
                }
            }
        }
        let mesh_group = if mesh_group.is_empty() {
            vec![0; n]
        } else {
            mesh_group
        };
        Ok(Topology {
            positions,
            radio_range,
            mesh_group,
            default_loss,
            loss_overrides,
            per_hop_delay: per_hop_delay_us,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.positions.len() as u16).map(NodeId)
    }

    pub fn neighbors(&self, n: NodeId) -> &[NodeId] {
        &self.neighbors[n.idx()]
    }

    pub fn are_neighbors(&self, a: NodeId, b: NodeId) -> bool {
        self.neighbors[a.idx()].contains(&b)
    }

    pub fn mesh_group(&self, n: NodeId) -> u16 {
        self.mesh_group[n.idx()]
    }

    pub fn per_hop_delay_us(&self) -> u64 {
        self.per_hop_delay
    }

    pub fn radio_range(&self) -> f64 {
        self.radio_range
    }

    pub fn loss(&self, a: NodeId, b: NodeId) -> f64 {
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        *self.loss_overrides.get(&key).unwrap_or(&self.default_loss)
    }

    /// Hop-count eccentricity bound via BFS from every node; unreachable
    /// pairs are ignored.
    pub fn diameter_hops(&self) -> u32 {
        let n = self.len();
        let mut best = 0u32;
        for start in 0..n {
            let mut dist = vec![u32::MAX; n];
            dist[start] = 0;
            let mut frontier = vec![start];
            while let Some(v) = frontier.pop() {
                for &nb in &self.neighbors[v] {
                    if dist[nb.idx()] == u32::MAX {
                        dist[nb.idx()] = dist[v] + 1;
                        frontier.insert(0, nb.idx());
                    }
                }
            }
            for &d in &dist {
                if d != u32::MAX {
                    best = best.max(d);
                }
            }
        }
        best
    }

    /// True if `to` is reachable from `from`.
    pub fn reachable(&self, from: NodeId, to: NodeId) -> bool {
        let mut seen = vec![false; self.len()];
        seen[from.idx()] = true;
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            for &nb in self.neighbors(v) {
                if !seen[nb.idx()] {
                    seen[nb.idx()] = true;
                    stack.push(nb);
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Trace log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Tx,
    Rx,
    Oh,
    Drop,
    App,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Tx => "tx",
            RecordKind::Rx => "rx",
            RecordKind::Oh => "oh",
            RecordKind::Drop => "drop",
            RecordKind::App => "app",
        }
    }

    pub fn parse(s: &str) -> Option<RecordKind> {
        Some(match s {
            "tx" => RecordKind::Tx,
            "rx" => RecordKind::Rx,
            "oh" => RecordKind::Oh,
            "drop" => RecordKind::Drop,
            "app" => RecordKind::App,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    None,
    LinkLoss,
    Adversary,
    Queue,
    Ttl,
    Duplicate,
    NoRoute,
    BadSignature,
    BadHca,
    UnknownSenderKey,
    TagMismatch,
    Scope,
    Gated,
}

impl DropCause {
    pub fn as_str(self) -> &'static str {
        match self {
            DropCause::None => "none",
            DropCause::LinkLoss => "link_loss",
            DropCause::Adversary => "adversary",
            DropCause::Queue => "queue",
            DropCause::Ttl => "ttl",
            DropCause::Duplicate => "duplicate",
            DropCause::NoRoute => "no_route",
            DropCause::BadSignature => "bad_signature",
            DropCause::BadHca => "bad_hca",
            DropCause::UnknownSenderKey => "unknown_sender_key",
            DropCause::TagMismatch => "tag_mismatch",
            DropCause::Scope => "scope",
            DropCause::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Option<DropCause> {
        Some(match s {
            "none" => DropCause::None,
            "link_loss" => DropCause::LinkLoss,
            "adversary" => DropCause::Adversary,
            "queue" => DropCause::Queue,
            "ttl" => DropCause::Ttl,
            "duplicate" => DropCause::Duplicate,
            "no_route" => DropCause::NoRoute,
            "bad_signature" => DropCause::BadSignature,
            "bad_hca" => DropCause::BadHca,
            "unknown_sender_key" => DropCause::UnknownSenderKey,
            "tag_mismatch" => DropCause::TagMismatch,
            "scope" => DropCause::Scope,
            "gated" => DropCause::Gated,
            _ => return None,
        })
    }
}

/// One trace line. `dst` is -1 for broadcast; `flow` is -1 where not
/// applicable. Route-discovery control packets carry their flood key
/// (source*65536 + destination) in the flow column so the offline detector
/// can rebuild observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub kind: RecordKind,
    pub src: i32,
    pub dst: i32,
    pub pkt: &'static str,
    pub flow: i64,
    pub cause: DropCause,
}

#[derive(Debug, Default, Clone)]
pub struct TraceLog {
    records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub const CSV_HEADER: &'static str = "time_us,kind,src,dst,pkt_type,flow_id,drop_cause";

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 32 + 64);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.time.0,
                r.kind.as_str(),
                r.src,
                r.dst,
                r.pkt,
                r.flow,
                r.cause.as_str()
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum EventPayload {
    /// Frame arrives at `target`. The original transmission mode rides along
    /// so overhearers still see whom a unicast was addressed to.
    Delivery {
        frame: Frame,
        from: NodeId,
        mode: TxMode,
    },
    /// Link-layer reassembly failure indication for a lost data frame.
    ReassemblyFlag { from: NodeId, link_seq: u32 },
    /// A transmission hits the air after forwarding delay / queueing.
    TxFire { mode: TxMode, frame: Frame },
    Timer(TimerKind),
}

#[derive(Debug, Clone)]
pub struct Event {
    pub at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub payload: EventPayload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("event queue overflow (cap {cap}) while processing node {node}: runaway flooding")]
    QueueOverflow { node: NodeId, cap: usize },
}

// ---------------------------------------------------------------------------
// Randomness: one master seed, split per node and per directed link.
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master ^ tag) ^ a) ^ b)
}

const TAG_NODE: u64 = 0x6e6f6465; // "node"
const TAG_LINK: u64 = 0x6c696e6b; // "link"
pub const TAG_KEYS: u64 = 0x6b657973; // "keys"

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

pub struct NodeSlot {
    pub behavior: Box<dyn NodeBehavior>,
    pub monitor: Option<Monitor>,
    pub profile: Option<AttackProfile>,
    /// Flood/RREP keys already re-emitted through a wormhole tunnel.
    tunneled: BTreeSet<(u8, u64)>,
    /// Flood key -> neighbour the tunneled RREQ was heard from.
    tunnel_backroute: BTreeMap<u64, NodeId>,
}

impl NodeSlot {
    pub fn new(behavior: Box<dyn NodeBehavior>) -> Self {
        NodeSlot {
            behavior,
            monitor: None,
            profile: None,
            tunneled: BTreeSet::new(),
            tunnel_backroute: BTreeMap::new(),
        }
    }
}

/// Per-flow delivery bookkeeping for the metrics report.
#[derive(Debug, Default, Clone)]
pub struct FlowStats {
    pub origins_us: Vec<u64>,
    pub deliveries: Vec<(u64, u64)>, // (origin_us, delay_us)
}

/// One classification row as exported to classification.csv.
#[derive(Debug, Clone)]
pub struct ClassRow {
    pub time: SimTime,
    pub monitor: NodeId,
    pub neighbor: NodeId,
    pub label: crate::stats::Label,
    pub c_r: f64,
    pub p_k: f64,
    pub k: usize,
}

pub struct Sim {
    pub topo: Topology,
    pub params: RunParams,
    now: SimTime,
    queue: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    queue_cap: usize,
    nodes: Vec<NodeSlot>,
    node_rngs: Vec<ChaCha8Rng>,
    link_rngs: BTreeMap<(u16, u16), ChaCha8Rng>,
    master_seed: u64,
    trace: TraceLog,
    /// Egress serialization horizon per node for data-class frames.
    egress_busy_until: Vec<u64>,
    pub flows: Vec<FlowSpec>,
    pub flow_stats: Vec<FlowStats>,
    pub class_rows: Vec<ClassRow>,
    detection: Option<crate::detection::DetectionConfig>,
    discovery_pairs: Vec<(NodeId, NodeId)>,
    discovery_interval_us: u64,
}

impl Sim {
    pub fn new(
        topo: Topology,
        params: RunParams,
        master_seed: u64,
        queue_cap: usize,
        slots: Vec<NodeSlot>,
        flows: Vec<FlowSpec>,
        detection: Option<crate::detection::DetectionConfig>,
    ) -> Sim {
        let n = topo.len();
        assert_eq!(slots.len(), n);
        let node_rngs = (0..n as u64)
            .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(master_seed, TAG_NODE, i, 0)))
            .collect();
        let flow_stats = vec![FlowStats::default(); flows.len()];
        Sim {
            topo,
            params,
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            queue_cap,
            nodes: slots,
            node_rngs,
            link_rngs: BTreeMap::new(),
            master_seed,
            trace: TraceLog::default(),
            egress_busy_until: vec![0; n],
            flows,
            flow_stats,
            class_rows: Vec::new(),
            detection,
            discovery_pairs: Vec::new(),
            discovery_interval_us: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn into_trace(self) -> TraceLog {
        self.trace
    }

    pub fn node(&self, id: NodeId) -> &NodeSlot {
        &self.nodes[id.idx()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeSlot {
        &mut self.nodes[id.idx()]
    }

    /// Schedule a synthetic route-discovery workload: `pairs` are issued one
    /// per `interval_us`, cycling if the list is exhausted.
    pub fn set_discovery_traffic(&mut self, pairs: Vec<(NodeId, NodeId)>, interval_us: u64) {
        self.discovery_pairs = pairs;
        self.discovery_interval_us = interval_us;
    }

    fn push_event(&mut self, blame: NodeId, ev: Event) -> Result<(), RunError> {
        if self.queue.len() >= self.queue_cap {
            return Err(RunError::QueueOverflow {
                node: blame,
                cap: self.queue_cap,
            });
        }
        self.queue.push(Reverse(ev));
        Ok(())
    }

    fn schedule(
        &mut self,
        blame: NodeId,
        at: SimTime,
        target: NodeId,
        payload: EventPayload,
    ) -> Result<(), RunError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.push_event(
            blame,
            Event {
                at,
                seq,
                target,
                payload,
            },
        )
    }

    fn link_rng(&mut self, from: NodeId, to: NodeId) -> &mut ChaCha8Rng {
        let master = self.master_seed;
        self.link_rngs.entry((from.0, to.0)).or_insert_with(|| {
            ChaCha8Rng::seed_from_u64(derive_seed(master, TAG_LINK, from.0 as u64, to.0 as u64))
        })
    }

    /// Put a frame on the air at the current instant: run one independent
    /// loss trial per neighbour and schedule deliveries. Unicast frames are
    /// delivered to the addressee and overheard by every other neighbour
    /// surviving its own loss trial.
    fn fire_transmission(&mut self, sender: NodeId, mode: TxMode, frame: Frame) -> Result<(), RunError> {
        let pkt = frame.packet.kind_str();
        let flow = frame.packet.flow_col();
        let dst_col = match mode {
            TxMode::Broadcast => -1,
            TxMode::Unicast(n) => n.0 as i32,
        };
        self.trace.push(TraceRecord {
            time: self.now,
            kind: RecordKind::Tx,
            src: sender.0 as i32,
            dst: dst_col,
            pkt,
            flow,
            cause: DropCause::None,
        });
        // The transmitter's own monitor sees its transmission immediately.
        self.feed_own_monitor(sender, &frame, mode);

        let is_data = frame.packet.is_data_class();
        let ser_us = if is_data {
            let bps = self.params.qos.link_capacity_bps.max(1.0);
            ((frame.packet.payload_size() as f64 * 1e6) / bps) as u64
        } else {
            0
        };
        let deliver_at = self.now + ser_us + self.topo.per_hop_delay_us();
        let neighbors: Vec<NodeId> = self.topo.neighbors(sender).to_vec();
        for nb in neighbors {
            let loss = self.topo.loss(sender, nb);
            let lost = if loss <= 0.0 {
                false
            } else if loss >= 1.0 {
                true
            } else {
                self.link_rng(sender, nb).gen_bool(loss)
            };
            let addressed = matches!(mode, TxMode::Unicast(t) if t == nb);
            if lost {
                self.trace.push(TraceRecord {
                    time: deliver_at,
                    kind: RecordKind::Drop,
                    src: sender.0 as i32,
                    dst: nb.0 as i32,
                    pkt,
                    flow,
                    cause: DropCause::LinkLoss,
                });
                // Addressed data frames leave a reassembly-failure mark at
                // the receiver's link layer.
                if addressed && is_data {
                    if let Some(link_seq) = frame.packet.link_seq() {
                        self.schedule(
                            sender,
                            deliver_at,
                            nb,
                            EventPayload::ReassemblyFlag {
                                from: sender,
                                link_seq,
                            },
                        )?;
                    }
                }
                continue;
            }
            let _ = addressed;
            self.schedule(
                sender,
                deliver_at,
                nb,
                EventPayload::Delivery {
                    frame: frame.clone(),
                    from: sender,
                    mode,
                },
            )?;
        }
        Ok(())
    }

    fn feed_own_monitor(&mut self, sender: NodeId, frame: &Frame, mode: TxMode) {
        let now = self.now;
        if let Some(monitor) = self.nodes[sender.idx()].monitor.as_mut() {
            match (&frame.packet, mode) {
                (Packet::Rreq(r), TxMode::Broadcast) => {
                    monitor.own_rreq_broadcast((r.src, r.dest), now.0);
                }
                (Packet::Rrep(r), TxMode::Unicast(to)) => {
                    monitor.own_rrep_unicast((r.dest, r.src), to, now.0);
                }
                _ => {}
            }
        }
    }

    fn feed_heard_monitor(&mut self, hearer: NodeId, from: NodeId, frame: &Frame, mode: TxMode) {
        let now = self.now;
        if let Some(monitor) = self.nodes[hearer.idx()].monitor.as_mut() {
            match (&frame.packet, mode) {
                (Packet::Rreq(r), TxMode::Broadcast) => {
                    monitor.heard_rreq_broadcast(from, (r.src, r.dest), now.0);
                }
                (Packet::Rrep(r), mode) => {
                    let addressed_to = match mode {
                        TxMode::Unicast(t) => Some(t),
                        TxMode::Broadcast => None,
                    };
                    monitor.heard_rrep(from, addressed_to, (r.dest, r.src), now.0);
                }
                _ => {}
            }
        }
    }

    fn apply_actions(&mut self, me: NodeId, actions: Vec<Action>) -> Result<(), RunError> {
        for action in actions {
            match action {
                Action::Transmit { mode, frame, delay } => {
                    if delay == 0 && !frame.packet.is_data_class() {
                        self.fire_transmission(me, mode, frame)?;
                    } else if frame.packet.is_data_class() {
                        // Egress queue: fixed service rate, bounded depth.
                        let t0 = self.now.0 + delay;
                        let bps = self.params.qos.link_capacity_bps.max(1.0);
                        let ser =
                            ((frame.packet.payload_size() as f64 * 1e6) / bps).ceil() as u64;
                        let busy = self.egress_busy_until[me.idx()].max(t0);
                        let depth = if ser == 0 { 0 } else { (busy - t0) / ser };
                        if depth >= self.params.qos.queue_cap_pkts as u64 {
                            self.trace.push(TraceRecord {
                                time: SimTime(t0),
                                kind: RecordKind::Drop,
                                src: me.0 as i32,
                                dst: match mode {
                                    TxMode::Broadcast => -1,
                                    TxMode::Unicast(n) => n.0 as i32,
                                },
                                pkt: frame.packet.kind_str(),
                                flow: frame.packet.flow_col(),
                                cause: DropCause::Queue,
                            });
                            continue;
                        }
                        self.egress_busy_until[me.idx()] = busy + ser;
                        self.schedule(me, SimTime(busy), me, EventPayload::TxFire { mode, frame })?;
                    } else {
                        self.schedule(
                            me,
                            self.now + delay,
                            me,
                            EventPayload::TxFire { mode, frame },
                        )?;
                    }
                }
                Action::Timer { at, kind } => {
                    self.schedule(me, at, me, EventPayload::Timer(kind))?;
                }
                Action::AppDeliver { flow, origin_us } => {
                    let delay = self.now.0.saturating_sub(origin_us);
                    if let Some(idx) = self.flows.iter().position(|f| f.id == flow) {
                        self.flow_stats[idx].deliveries.push((origin_us, delay));
                    }
                    self.trace.push(TraceRecord {
                        time: self.now,
                        kind: RecordKind::App,
                        src: me.0 as i32,
                        dst: me.0 as i32,
                        pkt: "DATA",
                        flow: flow as i64,
                        cause: DropCause::None,
                    });
                }
                Action::LocalDrop {
                    pkt,
                    flow,
                    toward,
                    cause,
                } => {
                    self.trace.push(TraceRecord {
                        time: self.now,
                        kind: RecordKind::Drop,
                        src: me.0 as i32,
                        dst: toward.map_or(-1, |n| n.0 as i32),
                        pkt,
                        flow,
                        cause,
                    });
                }
            }
        }
        Ok(())
    }

    fn ctx<'a>(
        topo: &'a Topology,
        params: &'a RunParams,
        now: SimTime,
        me: NodeId,
        rng: &'a mut ChaCha8Rng,
        profile: Option<&'a AttackProfile>,
    ) -> Ctx<'a> {
        Ctx {
            now,
            me,
            topo,
            params,
            rng,
            profile,
            actions: Vec::new(),
        }
    }

    fn dispatch_behavior<F>(&mut self, me: NodeId, f: F) -> Result<(), RunError>
    where
        F: FnOnce(&mut Box<dyn NodeBehavior>, &mut Ctx),
    {
        let mut rng = std::mem::replace(
            &mut self.node_rngs[me.idx()],
            ChaCha8Rng::seed_from_u64(0),
        );
        let profile = self.nodes[me.idx()].profile.clone();
        let mut ctx = Self::ctx(
            &self.topo,
            &self.params,
            self.now,
            me,
            &mut rng,
            profile.as_ref(),
        );
        // Temporarily move the behavior out so we can hand `self` pieces to it.
        let mut behavior = std::mem::replace(
            &mut self.nodes[me.idx()].behavior,
            Box::new(crate::protocol::InertBehavior),
        );
        f(&mut behavior, &mut ctx);
        let actions = std::mem::take(&mut ctx.actions);
        drop(ctx);
        self.nodes[me.idx()].behavior = behavior;
        self.node_rngs[me.idx()] = rng;
        self.apply_actions(me, actions)
    }

    /// Seed the initial event set: protocol start hooks, flow schedules,
    /// synthetic discovery traffic, adversary tickers, reliability and
    /// detection timers.
    pub fn prime(&mut self) -> Result<(), RunError> {
        for id in 0..self.nodes.len() as u16 {
            let me = NodeId(id);
            self.dispatch_behavior(me, |b, ctx| b.on_start(ctx))?;
        }
        for (idx, flow) in self.flows.clone().into_iter().enumerate() {
            if flow.count > 0 {
                self.schedule(
                    flow.src,
                    SimTime(flow.start_us),
                    flow.src,
                    EventPayload::Timer(TimerKind::FlowSend { flow_idx: idx, seq: 0 }),
                )?;
            }
        }
        if !self.discovery_pairs.is_empty() {
            let (src, _) = self.discovery_pairs[0];
            self.schedule(
                src,
                SimTime(self.discovery_interval_us),
                src,
                EventPayload::Timer(TimerKind::DiscoveryTick { idx: 0 }),
            )?;
        }
        for id in 0..self.nodes.len() as u16 {
            let me = NodeId(id);
            if let Some(profile) = self.nodes[me.idx()].profile.clone() {
                if let Some(first) = adversary::first_tick_us(&profile) {
                    self.schedule(me, SimTime(first), me, EventPayload::Timer(TimerKind::AdversaryTick))?;
                }
            }
        }
        let interval = self.params.qos.reliability_interval_us;
        if self.params.qos.enabled && interval > 0 {
            for id in 0..self.nodes.len() as u16 {
                self.schedule(
                    NodeId(id),
                    SimTime(interval),
                    NodeId(id),
                    EventPayload::Timer(TimerKind::ReliabilityTick),
                )?;
            }
        }
        if let Some(det) = self.detection.clone() {
            let w = det.params.invocation_period_us;
            for id in 0..self.nodes.len() as u16 {
                let me = NodeId(id);
                let neighbors = self.topo.neighbors(me).to_vec();
                self.nodes[me.idx()].monitor =
                    Some(Monitor::new(me, neighbors, det.monitor_params()));
                self.schedule(me, SimTime(w), me, EventPayload::Timer(TimerKind::DetectionSnapshot))?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, until: SimTime) -> Result<(), RunError> {
        while let Some(Reverse(ev)) = self.queue.peek().cloned() {
            if ev.at > until {
                break;
            }
            self.queue.pop();
            self.now = ev.at;
            self.handle_event(ev)?;
        }
        self.now = until;
        Ok(())
    }

    fn handle_event(&mut self, ev: Event) -> Result<(), RunError> {
        let me = ev.target;
        match ev.payload {
            EventPayload::TxFire { mode, frame } => {
                self.fire_transmission(me, mode, frame)?;
            }
            EventPayload::Delivery { frame, from, mode } => {
                let addressed = matches!(mode, TxMode::Broadcast)
                    || matches!(mode, TxMode::Unicast(t) if t == me);
                self.trace.push(TraceRecord {
                    time: self.now,
                    kind: if addressed { RecordKind::Rx } else { RecordKind::Oh },
                    src: from.0 as i32,
                    dst: me.0 as i32,
                    pkt: frame.packet.kind_str(),
                    flow: frame.packet.flow_col(),
                    cause: DropCause::None,
                });
                self.feed_heard_monitor(me, from, &frame, mode);
                let tunneled = self.maybe_tunnel(me, from, &frame)?;
                if tunneled && frame.packet.is_data_class() {
                    // The tunnel is the forwarding path for captured data.
                    return Ok(());
                }
                self.dispatch_behavior(me, |b, ctx| b.on_frame(ctx, &frame, from, addressed))?;
            }
            EventPayload::ReassemblyFlag { from, link_seq } => {
                self.dispatch_behavior(me, |b, ctx| b.on_reassembly_flag(ctx, from, link_seq))?;
            }
            EventPayload::Timer(kind) => self.handle_timer(me, kind)?,
        }
        Ok(())
    }

    /// Wormhole hook: re-emit control traffic (and, when configured, data)
    /// at the paired endpoint, bypassing the radio. Returns true when the
    /// frame was taken into the tunnel.
    fn maybe_tunnel(&mut self, me: NodeId, from: NodeId, frame: &Frame) -> Result<bool, RunError> {
        let Some(AttackProfile::Wormhole {
            peer,
            tunnel_delay_us,
            tunnel_data,
            drop_prob,
        }) = self.nodes[me.idx()].profile.clone()
        else {
            return Ok(false);
        };
        let Some(key) = adversary::tunnel_key(&frame.packet, tunnel_data) else {
            return Ok(false);
        };
        if self.nodes[me.idx()].tunneled.contains(&key) {
            // Already tunneled once; still counts as captured for data.
            return Ok(frame.packet.is_data_class());
        }
        self.nodes[me.idx()].tunneled.insert(key);
        if let Packet::Rreq(r) = &frame.packet {
            // Remember where the flood came from so the peer's reply can be
            // pushed back out toward the source later.
            self.nodes[me.idx()]
                .tunnel_backroute
                .insert(crate::packet::flood_key(r.src, r.dest), from);
        }
        if frame.packet.is_data_class()
            && drop_prob > 0.0
            && self.node_rngs[me.idx()].gen_bool(drop_prob.min(1.0))
        {
            self.trace.push(TraceRecord {
                time: self.now,
                kind: RecordKind::Drop,
                src: me.0 as i32,
                dst: -1,
                pkt: frame.packet.kind_str(),
                flow: frame.packet.flow_col(),
                cause: DropCause::Adversary,
            });
            return Ok(true);
        }
        let mode = match &frame.packet {
            Packet::Rreq(_) => TxMode::Broadcast,
            Packet::Rrep(r) => {
                let fk = crate::packet::flood_key(r.dest, r.src);
                match self.nodes[peer.idx()].tunnel_backroute.get(&fk) {
                    Some(&back) => TxMode::Unicast(back),
                    None => TxMode::Broadcast,
                }
            }
            Packet::Data(d) => TxMode::Unicast(d.dest),
            Packet::Probe(p) => TxMode::Unicast(p.dest),
            _ => return Ok(false),
        };
        self.schedule(
            me,
            self.now + tunnel_delay_us,
            peer,
            EventPayload::TxFire {
                mode,
                frame: frame.clone(),
            },
        )?;
        Ok(true)
    }

    fn handle_timer(&mut self, me: NodeId, kind: TimerKind) -> Result<(), RunError> {
        match kind {
            TimerKind::FlowSend { flow_idx, seq } => {
                let flow = self.flows[flow_idx].clone();
                self.flow_stats[flow_idx].origins_us.push(self.now.0);
                self.dispatch_behavior(me, |b, ctx| b.on_app_send(ctx, &flow, seq))?;
                if seq + 1 < flow.count {
                    let gap = (1e6 / flow.rate_pps).round() as u64;
                    self.schedule(
                        me,
                        self.now + gap.max(1),
                        me,
                        EventPayload::Timer(TimerKind::FlowSend { flow_idx, seq: seq + 1 }),
                    )?;
                }
            }
            TimerKind::DiscoveryTick { idx } => {
                let (src, dest) = self.discovery_pairs[idx % self.discovery_pairs.len()];
                debug_assert_eq!(src, me);
                self.dispatch_behavior(me, |b, ctx| b.on_discover(ctx, dest))?;
                let next = idx + 1;
                if next < self.discovery_pairs.len() {
                    let (nsrc, _) = self.discovery_pairs[next];
                    self.schedule(
                        nsrc,
                        self.now + self.discovery_interval_us,
                        nsrc,
                        EventPayload::Timer(TimerKind::DiscoveryTick { idx: next }),
                    )?;
                }
            }
            TimerKind::AdversaryTick => {
                self.dispatch_behavior(me, |b, ctx| b.on_adversary_tick(ctx))?;
            }
            TimerKind::ReliabilityTick => {
                self.dispatch_behavior(me, |b, ctx| b.on_reliability_tick(ctx))?;
                let interval = self.params.qos.reliability_interval_us;
                self.schedule(
                    me,
                    self.now + interval,
                    me,
                    EventPayload::Timer(TimerKind::ReliabilityTick),
                )?;
            }
            TimerKind::DetectionSnapshot => {
                self.run_detection_round(me)?;
                let w = self
                    .detection
                    .as_ref()
                    .map(|d| d.params.invocation_period_us)
                    .unwrap_or(0);
                if w > 0 {
                    self.schedule(
                        me,
                        self.now + w,
                        me,
                        EventPayload::Timer(TimerKind::DetectionSnapshot),
                    )?;
                }
            }
            TimerKind::Proto(t) => {
                self.dispatch_behavior(me, |b, ctx| b.on_timer(ctx, &t))?;
            }
        }
        Ok(())
    }

    fn run_detection_round(&mut self, me: NodeId) -> Result<(), RunError> {
        let Some(det) = self.detection.clone() else {
            return Ok(());
        };
        let window = det.params.window_us();
        if self.now.0 < window {
            return Ok(());
        }
        let Some(monitor) = self.nodes[me.idx()].monitor.as_mut() else {
            return Ok(());
        };
        let matrices = monitor.snapshot(self.now.0);
        if matrices.is_empty() {
            return Ok(());
        }
        let anova_seed = derive_seed(det.params.anova_salt, me.0 as u64, self.now.0, 0);
        let classification = crate::stats::classify(
            &matrices,
            crate::stats::ClassifyParams {
                alpha: det.params.alpha,
                beta: det.params.beta,
                k_max: det.params.k_max,
                gate: det.params.gate,
            },
            anova_seed,
        );
        for (&neighbor, &label) in &classification.labels {
            self.class_rows.push(ClassRow {
                time: self.now,
                monitor: me,
                neighbor,
                label,
                c_r: classification.scores.get(&neighbor).copied().unwrap_or(0.0),
                p_k: classification.p_k.unwrap_or(1.0),
                k: classification.chosen_k.unwrap_or(0),
            });
        }
        let labels = classification.labels.clone();
        self.dispatch_behavior(me, |b, ctx| b.on_classification(ctx, &labels))?;
        Ok(())
    }
}
