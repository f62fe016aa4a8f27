//! QoS-aware secure routing: per-link reliability tracking with an EWMA
//! gate, mesh-group-scoped flooding, probe-based delay admission, available
//! bandwidth estimation from loss and round-trip statistics, and the three
//! violation-recovery paths.

use crate::adversary;
use crate::aodv::{AodvCore, DataOutcome, Rerr, RoutingEntry, Rrep, RreqOutcome, RrepOutcome};
use crate::engine::{DropCause, NodeId, Topology};
use crate::packet::{flood_key, DataPkt, Frame, Packet};
use crate::protocol::{Ctx, NodeBehavior, ProtoTimer, RouteView, StackMaterials};
use crate::stats::Label;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

// ---------------------------------------------------------------------------
// Parameters and flow specification.
// ---------------------------------------------------------------------------

fn d_true() -> bool {
    true
}
fn d_interval() -> u64 {
    1_000_000
}
fn d_alpha() -> f64 {
    0.5
}
fn d_initial_r() -> f64 {
    1.0
}
fn d_gate() -> f64 {
    0.5
}
fn d_cap() -> f64 {
    1.25e6
}
fn d_queue_cap() -> u32 {
    64
}
fn d_reservation() -> u64 {
    3_000_000
}
fn d_bw_window() -> u64 {
    2_000_000
}
fn d_rtt_window() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QosParams {
    #[serde(skip, default = "d_true")]
    pub enabled: bool,
    #[serde(default = "d_interval")]
    pub reliability_interval_us: u64,
    #[serde(default = "d_alpha")]
    pub ewma_alpha: f64,
    #[serde(default = "d_initial_r")]
    pub initial_reliability: f64,
    #[serde(default = "d_gate")]
    pub gate_threshold: f64,
    /// Estimator value returned when no congestion loss is observed.
    #[serde(default = "d_cap")]
    pub capacity_cap_bps: f64,
    /// Egress serialization rate for data-class frames.
    #[serde(default = "d_cap")]
    pub link_capacity_bps: f64,
    #[serde(default = "d_queue_cap")]
    pub queue_cap_pkts: u32,
    #[serde(default = "d_reservation")]
    pub reservation_timeout_us: u64,
    /// RREP collection window during admission; derived from the topology
    /// when absent.
    #[serde(default)]
    pub discovery_window_us: Option<u64>,
    #[serde(default = "d_bw_window")]
    pub bw_window_us: u64,
    #[serde(default = "d_rtt_window")]
    pub rtt_window: usize,
}

impl Default for QosParams {
    fn default() -> Self {
        QosParams {
            enabled: false,
            reliability_interval_us: d_interval(),
            ewma_alpha: d_alpha(),
            initial_reliability: d_initial_r(),
            gate_threshold: d_gate(),
            capacity_cap_bps: d_cap(),
            link_capacity_bps: d_cap(),
            queue_cap_pkts: d_queue_cap(),
            reservation_timeout_us: d_reservation(),
            discovery_window_us: None,
            bw_window_us: d_bw_window(),
            rtt_window: d_rtt_window(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSpec {
    pub id: u32,
    pub src: NodeId,
    pub dest: NodeId,
    pub rate_pps: f64,
    pub packet_size: u32,
    #[serde(default)]
    pub start_us: u64,
    pub count: u32,
    /// Maximum tolerable end-to-end delay.
    #[serde(default = "default_t_max")]
    pub t_max_us: u64,
    /// Guaranteed minimum bandwidth.
    #[serde(default)]
    pub b_min_bps: f64,
}

fn default_t_max() -> u64 {
    1_000_000_000
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePkt {
    pub flow: u32,
    pub src: NodeId,
    pub dest: NodeId,
    pub seq: u32,
    pub origin_us: u64,
    pub size: u32,
    pub hops: u32,
    /// Flow rate in milli-packets per second (integral for the codec).
    pub rate_mpps: u64,
    pub t_max_us: u64,
    pub b_min_bps: f64,
    pub link_seq: u32,
}

impl Eq for ProbePkt {}

// ---------------------------------------------------------------------------
// Pure estimators.
// ---------------------------------------------------------------------------

/// EWMA link-reliability update: R = alpha*N_t + (1-alpha)*R_prev.
pub fn update_reliability(r_prev: f64, n_t: f64, alpha: f64) -> f64 {
    (alpha * n_t + (1.0 - alpha) * r_prev).clamp(0.0, 1.0)
}

/// Path score: arithmetic mean of per-link reliabilities.
pub fn path_reliability(links: &[f64]) -> f64 {
    if links.is_empty() {
        return 0.0;
    }
    links.iter().sum::<f64>() / links.len() as f64
}

/// Nodes accept flood control only inside the union of the two endpoint
/// mesh groups.
pub fn in_flood_scope(node: NodeId, src: NodeId, dest: NodeId, topo: &Topology) -> bool {
    let g = topo.mesh_group(node);
    g == topo.mesh_group(src) || g == topo.mesh_group(dest)
}

/// Retransmission timeout from round-trip statistics, k = 4.
pub fn retransmission_timeout(rtt_mean_s: f64, rtt_var_s: f64) -> f64 {
    rtt_mean_s + 4.0 * rtt_var_s
}

/// Available bandwidth (bytes/second) from the loss-rate response function.
/// Congestion-free links report the configured capacity cap.
pub fn estimate_bandwidth(
    packet_size_bytes: f64,
    rtt_s: f64,
    rto_s: f64,
    p_congestion: f64,
    capacity_cap: f64,
) -> f64 {
    if p_congestion <= 0.0 {
        return capacity_cap;
    }
    let x = rtt_s * (2.0 * p_congestion / 3.0).sqrt();
    let y = rto_s
        * 1.0_f64.min(3.0 * (3.0 * p_congestion / 8.0).sqrt())
        * p_congestion
        * (1.0 + 32.0 * p_congestion * p_congestion);
    packet_size_bytes / (x + y)
}

/// Receiver-side per-link loss classifier: sequence gaps matching a
/// reassembly-failure flag are wireless losses, bare gaps are congestion.
#[derive(Debug, Default, Clone)]
pub struct LinkObserver {
    next_seq: u32,
    flagged: BTreeSet<u32>,
    received: VecDeque<u64>,
    wireless: VecDeque<u64>,
    congestion: VecDeque<u64>,
}

impl LinkObserver {
    pub fn on_flag(&mut self, t: u64, link_seq: u32) {
        self.flagged.insert(link_seq);
        let _ = t;
    }

    pub fn on_received(&mut self, t: u64, link_seq: u32) {
        if link_seq > self.next_seq {
            for missing in self.next_seq..link_seq {
                if self.flagged.remove(&missing) {
                    self.wireless.push_back(t);
                } else {
                    self.congestion.push_back(t);
                }
            }
        }
        self.received.push_back(t);
        self.next_seq = self.next_seq.max(link_seq + 1);
    }

    fn prune(q: &mut VecDeque<u64>, cutoff: u64) {
        while q.front().is_some_and(|&t| t < cutoff) {
            q.pop_front();
        }
    }

    /// Congestion-loss fraction over the trailing window; `None` when no
    /// packets were observed.
    pub fn p_congestion(&mut self, now: u64, window_us: u64) -> Option<f64> {
        let cutoff = now.saturating_sub(window_us);
        Self::prune(&mut self.received, cutoff);
        Self::prune(&mut self.wireless, cutoff);
        Self::prune(&mut self.congestion, cutoff);
        let expected = self.received.len() + self.wireless.len() + self.congestion.len();
        if expected == 0 {
            return None;
        }
        Some(self.congestion.len() as f64 / expected as f64)
    }
}

/// Trailing round-trip samples for one link.
#[derive(Debug, Default, Clone)]
pub struct RttStats {
    samples: VecDeque<f64>,
    cap: usize,
}

impl RttStats {
    pub fn new(cap: usize) -> RttStats {
        RttStats {
            samples: VecDeque::new(),
            cap: cap.max(1),
        }
    }

    pub fn push(&mut self, rtt_s: f64) {
        if self.samples.len() == self.cap {
            self.samples.pop_front();
        }
        self.samples.push_back(rtt_s);
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        Some(self.samples.iter().sum::<f64>() / self.samples.len() as f64)
    }

    /// Mean absolute deviation, the artifact's reading of the variance term.
    pub fn mad(&self) -> Option<f64> {
        let mean = self.mean()?;
        Some(
            self.samples.iter().map(|s| (s - mean).abs()).sum::<f64>()
                / self.samples.len() as f64,
        )
    }
}

// ---------------------------------------------------------------------------
// Per-neighbour reliability ledger.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct NeighborRel {
    r: f64,
    received: u32,
    expected: u32,
}

#[derive(Debug, Default)]
struct Reliability {
    table: BTreeMap<NodeId, NeighborRel>,
    /// (neighbour, flood/reply key) -> forwarding deadline.
    pending: BTreeMap<(NodeId, u64), u64>,
    /// Forwards already observed, so repeat observations don't recount.
    observed: BTreeSet<(NodeId, u64)>,
}

impl Reliability {
    fn heard(&mut self, n: NodeId, initial: f64) {
        self.table.entry(n).or_insert(NeighborRel {
            r: initial,
            received: 0,
            expected: 0,
        });
    }

    fn r_of(&self, n: NodeId) -> f64 {
        self.table.get(&n).map_or(0.0, |e| e.r)
    }

    fn expect_forward(&mut self, n: NodeId, key: u64, deadline: u64, initial: f64) {
        self.heard(n, initial);
        if self.observed.contains(&(n, key)) {
            let e = self.table.get_mut(&n).unwrap();
            e.received += 1;
            e.expected += 1;
            return;
        }
        self.pending.entry((n, key)).or_insert(deadline);
    }

    fn observe_forward(&mut self, n: NodeId, key: u64, initial: f64) {
        self.heard(n, initial);
        if !self.observed.insert((n, key)) {
            return;
        }
        if self.pending.remove(&(n, key)).is_some() {
            let e = self.table.get_mut(&n).unwrap();
            e.received += 1;
            e.expected += 1;
        }
    }

    fn tick(&mut self, now: u64, alpha: f64) {
        let expired: Vec<(NodeId, u64)> = self
            .pending
            .iter()
            .filter(|(_, &d)| d <= now)
            .map(|(&k, _)| k)
            .collect();
        for key in expired {
            self.pending.remove(&key);
            if let Some(e) = self.table.get_mut(&key.0) {
                e.expected += 1;
            }
        }
        for e in self.table.values_mut() {
            if e.expected > 0 {
                let n_t = e.received as f64 / e.expected as f64;
                e.r = update_reliability(e.r, n_t, alpha);
            }
            e.received = 0;
            e.expected = 0;
        }
        if self.observed.len() > 16384 {
            self.observed.clear();
        }
    }

    fn zero(&mut self, n: NodeId) {
        self.table
            .entry(n)
            .and_modify(|e| e.r = 0.0)
            .or_insert(NeighborRel {
                r: 0.0,
                received: 0,
                expected: 0,
            });
    }
}

// ---------------------------------------------------------------------------
// The QoS stack.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Candidate {
    next_hop: NodeId,
    hop_count: u32,
    dest_seq: u32,
}

#[derive(Debug, Clone, PartialEq)]
enum AdmissionPhase {
    Idle,
    Collecting { token: u32 },
    Probing { token: u32, cand_idx: usize },
    Admitted,
}

#[derive(Debug)]
struct Admission {
    flow: FlowSpec,
    phase: AdmissionPhase,
    candidates: Vec<Candidate>,
    next_token: u32,
    last_attempt_us: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct FlowEntry {
    expires: u64,
    src: NodeId,
    dest: NodeId,
    t_max_us: u64,
    b_min_bps: f64,
}

#[derive(Debug, Default)]
struct ProbeCollector {
    delays: Vec<u64>,
    armed: bool,
}

pub struct QosNode {
    core: AodvCore,
    rel: Reliability,
    admissions: BTreeMap<u32, Admission>,
    flow_table: BTreeMap<u32, FlowEntry>,
    collectors: BTreeMap<u32, ProbeCollector>,
    link_rx: BTreeMap<NodeId, LinkObserver>,
    rtt: BTreeMap<NodeId, RttStats>,
    /// Flood forward times for round-trip sampling.
    flood_sent_at: BTreeMap<u64, u64>,
    /// Recovery replies already rebroadcast.
    recovery_seen: BTreeSet<(NodeId, u32)>,
    /// Per-flow violation-report rate limiting.
    last_rerr_us: BTreeMap<u32, u64>,
    flood_dest_rotor: u16,
}

pub fn make_stack(mat: &StackMaterials) -> Box<dyn NodeBehavior> {
    Box::new(QosNode {
        core: AodvCore::new(
            mat.me,
            mat.params.route_lifetime_us,
            mat.params.buffer_cap,
        ),
        rel: Reliability::default(),
        admissions: BTreeMap::new(),
        flow_table: BTreeMap::new(),
        collectors: BTreeMap::new(),
        link_rx: BTreeMap::new(),
        rtt: BTreeMap::new(),
        flood_sent_at: BTreeMap::new(),
        recovery_seen: BTreeSet::new(),
        last_rerr_us: BTreeMap::new(),
        flood_dest_rotor: 0,
    })
}

impl QosNode {
    pub fn reliability_of(&self, n: NodeId) -> f64 {
        self.rel.r_of(n)
    }

    fn gate_open(&self, n: NodeId, ctx: &Ctx) -> bool {
        self.rel.r_of(n) > ctx.params.qos.gate_threshold
    }

    fn forward_deadline(&self, ctx: &Ctx) -> u64 {
        let (_, hi) = ctx.params.jitter_us;
        ctx.now.0 + 2 * (ctx.topo.per_hop_delay_us() + hi) + 20_000
    }

    /// Expect every neighbour that has forwarding duty for this flood to
    /// re-emit it.
    fn expect_flood_forwards(&mut self, ctx: &Ctx, src: NodeId, dest: NodeId, from: Option<NodeId>) {
        let key = flood_key(src, dest);
        let deadline = self.forward_deadline(ctx);
        let initial = ctx.params.qos.initial_reliability;
        for &nb in ctx.topo.neighbors(ctx.me) {
            if nb == src || nb == dest || Some(nb) == from {
                continue;
            }
            if !in_flood_scope(nb, src, dest, ctx.topo) {
                continue;
            }
            self.rel.expect_forward(nb, key, deadline, initial);
        }
    }

    fn sample_rtt(&mut self, ctx: &Ctx, neighbor: NodeId, flood: u64) {
        if let Some(&t0) = self.flood_sent_at.get(&flood) {
            let rtt_s = ctx.now.0.saturating_sub(t0) as f64 / 1e6;
            let cap = ctx.params.qos.rtt_window;
            self.rtt
                .entry(neighbor)
                .or_insert_with(|| RttStats::new(cap))
                .push(rtt_s);
        }
    }

    fn send_probe_train(&mut self, ctx: &mut Ctx, flow: &FlowSpec, hops: u32, token: u32) {
        let count = 2 * hops.max(1);
        let gap_us = (1e6 / flow.rate_pps.max(0.001)).round() as u64;
        let Some(entry) = self.core.lookup_valid(flow.dest, ctx.now) else {
            return;
        };
        for i in 0..count {
            let link_seq = self.core.next_link_seq(entry.next_hop);
            let probe = ProbePkt {
                flow: flow.id,
                src: ctx.me,
                dest: flow.dest,
                seq: i,
                origin_us: ctx.now.0 + i as u64 * gap_us,
                size: flow.packet_size,
                hops: hops.max(1),
                rate_mpps: (flow.rate_pps * 1000.0) as u64,
                t_max_us: flow.t_max_us,
                b_min_bps: flow.b_min_bps,
                link_seq,
            };
            ctx.unicast(
                entry.next_hop,
                Frame::plain(Packet::Probe(probe)),
                i as u64 * gap_us,
            );
        }
        let span = count as u64 * gap_us;
        let (_, jitter_hi) = ctx.params.jitter_us;
        let wait =
            span + 6 * hops.max(1) as u64 * (ctx.topo.per_hop_delay_us() + jitter_hi) + 50_000;
        ctx.timer(
            ctx.now + wait,
            ProtoTimer::ProbeReportWait {
                flow: flow.id,
                token,
            },
        );
    }

    fn begin_admission(&mut self, ctx: &mut Ctx, flow: &FlowSpec) {
        let adm = self
            .admissions
            .entry(flow.id)
            .or_insert_with(|| Admission {
                flow: flow.clone(),
                phase: AdmissionPhase::Idle,
                candidates: Vec::new(),
                next_token: 0,
                last_attempt_us: None,
            });
        if !matches!(adm.phase, AdmissionPhase::Idle) {
            return;
        }
        if let Some(last) = adm.last_attempt_us {
            if ctx.now.0.saturating_sub(last) < ctx.params.min_discovery_interval_us {
                return;
            }
        }
        adm.last_attempt_us = Some(ctx.now.0);
        adm.candidates.clear();
        adm.next_token += 1;
        let token = adm.next_token;
        adm.phase = AdmissionPhase::Collecting { token };
        let dest = flow.dest;
        let flow_id = flow.id;
        let rreq = self.core.forge_rreq(dest, ctx.params.ttl, ctx.now);
        self.flood_sent_at
            .insert(flood_key(rreq.src, rreq.dest), ctx.now.0);
        self.expect_flood_forwards(ctx, rreq.src, rreq.dest, None);
        ctx.broadcast(Frame::plain(Packet::Rreq(rreq)), 0);
        let window = ctx.params.qos.discovery_window_us.unwrap_or_else(|| {
            let (_, hi) = ctx.params.jitter_us;
            4 * ctx.params.diameter_hops.max(1) as u64 * (ctx.topo.per_hop_delay_us() + hi)
                + 20_000
        });
        ctx.timer(
            ctx.now + window,
            ProtoTimer::AdmissionWindow { flow: flow_id, token },
        );
    }

    fn probe_next_candidate(&mut self, ctx: &mut Ctx, flow_id: u32, cand_idx: usize) {
        let Some(adm) = self.admissions.get_mut(&flow_id) else {
            return;
        };
        if cand_idx >= adm.candidates.len() {
            // Admission rejected: every candidate path failed its probe.
            adm.phase = AdmissionPhase::Idle;
            let flow = adm.flow.clone();
            for data in self.core.drain_buffered(flow.dest) {
                ctx.drop_pkt(&Packet::Data(data), Some(flow.dest), DropCause::NoRoute);
            }
            return;
        }
        let cand = adm.candidates[cand_idx].clone();
        adm.next_token += 1;
        let token = adm.next_token;
        adm.phase = AdmissionPhase::Probing { token, cand_idx };
        let flow = adm.flow.clone();
        self.core.pin_route(RoutingEntry {
            dest: flow.dest,
            next_hop: cand.next_hop,
            hop_count: cand.hop_count,
            dest_seq: cand.dest_seq,
            expires: ctx.now + ctx.params.route_lifetime_us,
        });
        self.send_probe_train(ctx, &flow, cand.hop_count, token);
    }

    fn admit(&mut self, ctx: &mut Ctx, flow_id: u32) {
        if let Some(adm) = self.admissions.get_mut(&flow_id) {
            adm.phase = AdmissionPhase::Admitted;
            let dest = adm.flow.dest;
            self.flush_buffered(ctx, dest);
        }
    }

    fn flush_buffered(&mut self, ctx: &mut Ctx, dest: NodeId) {
        if self.core.lookup_valid(dest, ctx.now).is_none() {
            return;
        }
        for data in self.core.drain_buffered(dest) {
            self.send_data(ctx, data);
        }
    }

    fn send_data(&mut self, ctx: &mut Ctx, data: DataPkt) {
        match self.core.lookup_valid(data.dest, ctx.now) {
            Some(e) => {
                let mut pkt = data;
                pkt.link_seq = self.core.next_link_seq(e.next_hop);
                ctx.unicast(e.next_hop, Frame::plain(Packet::Data(pkt)), 0);
            }
            None => {
                let dest = data.dest;
                if self.core.buffer_packet(data).is_err() {
                    ctx.actions.push(crate::protocol::Action::LocalDrop {
                        pkt: "DATA",
                        flow: -1,
                        toward: Some(dest),
                        cause: DropCause::Queue,
                    });
                }
            }
        }
    }

    fn touch_flow_entry(
        &mut self,
        ctx: &Ctx,
        flow: u32,
        src: NodeId,
        dest: NodeId,
        qos: Option<(u64, f64)>,
    ) {
        let expires = ctx.now.0 + ctx.params.qos.reservation_timeout_us;
        let entry = self.flow_table.entry(flow).or_insert(FlowEntry {
            expires,
            src,
            dest,
            t_max_us: default_t_max(),
            b_min_bps: 0.0,
        });
        entry.expires = expires;
        entry.src = src;
        entry.dest = dest;
        if let Some((t_max, b_min)) = qos {
            entry.t_max_us = t_max;
            entry.b_min_bps = b_min;
        }
    }

    /// Violation reporting toward the source (recovery paths 1 and 3).
    fn send_violation_rerr(&mut self, ctx: &mut Ctx, flow: u32, dest: NodeId) {
        let interval = ctx.params.qos.reliability_interval_us;
        if let Some(&last) = self.last_rerr_us.get(&flow) {
            if ctx.now.0.saturating_sub(last) < interval {
                return;
            }
        }
        self.last_rerr_us.insert(flow, ctx.now.0);
        let dsn = self
            .core
            .entry(dest)
            .map_or(1, |e| e.dest_seq.saturating_add(1));
        self.core.invalidate(dest, ctx.now);
        ctx.broadcast(
            Frame::plain(Packet::Rerr(Rerr {
                unreachable: vec![(dest, dsn)],
                signature: None,
            })),
            0,
        );
    }

    /// Recovery path 2: the destination floods a fresh reply to re-anchor
    /// the route when observed delays breach the bound.
    fn send_recovery_rrep(&mut self, ctx: &mut Ctx, flow: u32, flow_src: NodeId) {
        let interval = ctx.params.qos.reliability_interval_us;
        let key = flow | 0x8000_0000;
        if let Some(&last) = self.last_rerr_us.get(&key) {
            if ctx.now.0.saturating_sub(last) < interval {
                return;
            }
        }
        self.last_rerr_us.insert(key, ctx.now.0);
        let dest_seq = self.core.bump_seq();
        let rrep = Rrep {
            src: ctx.me,
            dest: flow_src,
            dest_seq,
            hop_count: 0,
            lifetime_us: ctx.params.route_lifetime_us,
            next_to_destination: ctx.me,
            recovery: true,
            probe_report_us: None,
            flow: Some(flow),
            sse: None,
        };
        self.recovery_seen.insert((ctx.me, dest_seq));
        ctx.broadcast(Frame::plain(Packet::Rrep(rrep)), 0);
    }

    /// Inbound-link bandwidth check against the flow's guarantee
    /// (recovery path 3).
    fn bandwidth_violated(&mut self, ctx: &Ctx, from: NodeId, size: u32, b_min_bps: f64) -> bool {
        if b_min_bps <= 0.0 {
            return false;
        }
        let Some(obs) = self.link_rx.get_mut(&from) else {
            return false;
        };
        let Some(p) = obs.p_congestion(ctx.now.0, ctx.params.qos.bw_window_us) else {
            return false;
        };
        let Some(rtt_mean) = self.rtt.get(&from).and_then(|r| r.mean()) else {
            return false;
        };
        let rtt_mad = self.rtt.get(&from).and_then(|r| r.mad()).unwrap_or(0.0);
        let rto = retransmission_timeout(rtt_mean, rtt_mad);
        let est = estimate_bandwidth(
            size as f64,
            rtt_mean,
            rto,
            p,
            ctx.params.qos.capacity_cap_bps,
        );
        est < b_min_bps
    }

    fn handle_probe(&mut self, ctx: &mut Ctx, probe: &ProbePkt, from: NodeId) {
        self.link_rx
            .entry(from)
            .or_default()
            .on_received(ctx.now.0, probe.link_seq);
        if probe.dest == ctx.me {
            self.touch_flow_entry(
                ctx,
                probe.flow,
                probe.src,
                probe.dest,
                Some((probe.t_max_us, probe.b_min_bps)),
            );
            let collector = self.collectors.entry(probe.flow).or_default();
            collector
                .delays
                .push(ctx.now.0.saturating_sub(probe.origin_us));
            if !collector.armed {
                collector.armed = true;
                let gap_us = (1e9 / probe.rate_mpps.max(1) as f64).round() as u64;
                let (_, jitter_hi) = ctx.params.jitter_us;
                let wait = (2 * probe.hops) as u64 * gap_us
                    + 3 * probe.hops as u64 * (ctx.topo.per_hop_delay_us() + jitter_hi);
                ctx.timer(
                    ctx.now + wait,
                    ProtoTimer::ProbeCollect {
                        flow: probe.flow,
                        token: 0,
                    },
                );
            }
            return;
        }
        // Transit: admission control installs the reservation.
        if adversary::drops_transit_data(ctx.profile, ctx.rng) {
            ctx.drop_pkt(&Packet::Probe(*probe), Some(probe.dest), DropCause::Adversary);
            return;
        }
        self.touch_flow_entry(
            ctx,
            probe.flow,
            probe.src,
            probe.dest,
            Some((probe.t_max_us, probe.b_min_bps)),
        );
        match self.core.lookup_valid(probe.dest, ctx.now) {
            Some(e) => {
                let mut fwd = *probe;
                fwd.link_seq = self.core.next_link_seq(e.next_hop);
                ctx.unicast(e.next_hop, Frame::plain(Packet::Probe(fwd)), 0);
            }
            None => {
                ctx.drop_pkt(&Packet::Probe(*probe), Some(probe.dest), DropCause::NoRoute);
                self.send_violation_rerr(ctx, probe.flow, probe.dest);
            }
        }
    }

    fn handle_data(&mut self, ctx: &mut Ctx, data: &DataPkt, from: NodeId) {
        self.link_rx
            .entry(from)
            .or_default()
            .on_received(ctx.now.0, data.link_seq);
        if data.dest == ctx.me {
            let delay = ctx.now.0.saturating_sub(data.origin_us);
            let live = self
                .flow_table
                .get(&data.flow)
                .is_some_and(|e| e.expires > ctx.now.0);
            if !live {
                // Reservation lapsed at the destination; restart it.
                self.send_violation_rerr(ctx, data.flow, data.src);
            }
            let t_max = self
                .flow_table
                .get(&data.flow)
                .map_or(default_t_max(), |e| e.t_max_us);
            self.touch_flow_entry(ctx, data.flow, data.src, data.dest, None);
            ctx.deliver_app(data.flow, data.origin_us);
            // Recovery path 2: the destination reacts to delay breaches.
            if live && delay > t_max {
                self.send_recovery_rrep(ctx, data.flow, data.src);
            }
            return;
        }
        // Transit handling.
        if !self.gate_open(from, ctx) {
            ctx.drop_pkt(&Packet::Data(*data), Some(data.dest), DropCause::Gated);
            return;
        }
        if adversary::drops_transit_data(ctx.profile, ctx.rng) {
            ctx.drop_pkt(&Packet::Data(*data), Some(data.dest), DropCause::Adversary);
            return;
        }
        let b_min = match self.flow_table.get(&data.flow) {
            Some(e) if e.expires > ctx.now.0 => e.b_min_bps,
            _ => {
                // Recovery path 1: no live reservation for an arriving flow.
                ctx.drop_pkt(&Packet::Data(*data), Some(data.dest), DropCause::NoRoute);
                self.send_violation_rerr(ctx, data.flow, data.dest);
                return;
            }
        };
        if self.bandwidth_violated(ctx, from, data.size, b_min) {
            // Recovery path 3: guaranteed bandwidth no longer available.
            self.send_violation_rerr(ctx, data.flow, data.dest);
        }
        self.touch_flow_entry(ctx, data.flow, data.src, data.dest, None);
        match self.core.route_data(data, ctx.now) {
            DataOutcome::DeliverApp => unreachable!("handled above"),
            DataOutcome::Forward { next_hop } => {
                let mut fwd = *data;
                fwd.link_seq = self.core.next_link_seq(next_hop);
                ctx.unicast(next_hop, Frame::plain(Packet::Data(fwd)), 0);
            }
            DataOutcome::NoRoute { rerr } => {
                ctx.drop_pkt(&Packet::Data(*data), Some(data.dest), DropCause::NoRoute);
                ctx.broadcast(Frame::plain(Packet::Rerr(rerr)), 0);
            }
        }
    }

}

impl NodeBehavior for QosNode {
    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, from: NodeId, addressed: bool) {
        let initial = ctx.params.qos.initial_reliability;
        self.rel.heard(from, initial);
        match &frame.packet {
            Packet::Rreq(rreq) => {
                // Any observed flood transmission counts as forwarding
                // evidence (unless the neighbour originated it).
                let key = flood_key(rreq.src, rreq.dest);
                if from != rreq.src {
                    self.rel.observe_forward(from, key, initial);
                }
                if !addressed {
                    return;
                }
                if !in_flood_scope(ctx.me, rreq.src, rreq.dest, ctx.topo) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Scope);
                    return;
                }
                if !self.gate_open(from, ctx) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Gated);
                    return;
                }
                if let Some(forged) = adversary::blackhole_reply(ctx.profile, ctx.me, rreq) {
                    if self.core.handle_rreq(rreq, from, ctx.now, false) != RreqOutcome::Duplicate
                    {
                        ctx.unicast(from, Frame::plain(Packet::Rrep(forged)), 0);
                    }
                    return;
                }
                if rreq.dest != ctx.me && adversary::drops_rreq_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                match self.core.handle_rreq(rreq, from, ctx.now, false) {
                    RreqOutcome::Duplicate => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Duplicate)
                    }
                    RreqOutcome::TtlExhausted => ctx.drop_pkt(&frame.packet, None, DropCause::Ttl),
                    RreqOutcome::Reply(rrep) => {
                        ctx.unicast(from, Frame::plain(Packet::Rrep(rrep)), 0)
                    }
                    RreqOutcome::Forward(mut fwd) => {
                        adversary::mutate_forwarded_rreq(ctx.profile, &mut fwd);
                        let jitter = ctx.forward_jitter();
                        self.flood_sent_at.insert(key, ctx.now.0 + jitter);
                        self.expect_flood_forwards(ctx, rreq.src, rreq.dest, Some(from));
                        ctx.broadcast(Frame::plain(Packet::Rreq(fwd)), jitter);
                    }
                }
            }
            Packet::Rrep(rrep) => {
                let key = flood_key(rrep.dest, rrep.src);
                self.rel.observe_forward(from, key, initial);
                self.sample_rtt(ctx, from, key);
                if rrep.recovery {
                    if !addressed {
                        return;
                    }
                    if !self.gate_open(from, ctx) {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Gated);
                        return;
                    }
                    self.core.install_route(
                        RoutingEntry {
                            dest: rrep.src,
                            next_hop: from,
                            hop_count: rrep.hop_count + 1,
                            dest_seq: rrep.dest_seq,
                            expires: ctx.now + ctx.params.route_lifetime_us,
                        },
                        ctx.now,
                    );
                    if let Some(flow) = rrep.flow {
                        self.touch_flow_entry(ctx, flow, rrep.dest, rrep.src, None);
                    }
                    if rrep.dest == ctx.me {
                        if let Some(flow) = rrep.flow {
                            self.admit(ctx, flow);
                        }
                        return;
                    }
                    if self.recovery_seen.insert((rrep.src, rrep.dest_seq)) {
                        let mut fwd = rrep.clone();
                        fwd.hop_count += 1;
                        let jitter = ctx.forward_jitter();
                        ctx.broadcast(Frame::plain(Packet::Rrep(fwd)), jitter);
                    }
                    return;
                }
                if !addressed {
                    return;
                }
                if !self.gate_open(from, ctx) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Gated);
                    return;
                }
                if rrep.dest != ctx.me && adversary::drops_rrep_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                // Probe report consumed at the admission source.
                if rrep.dest == ctx.me {
                    if let (Some(flow_id), Some(report)) = (rrep.flow, rrep.probe_report_us) {
                        let mut next: Option<usize> = None;
                        if let Some(adm) = self.admissions.get_mut(&flow_id) {
                            if let AdmissionPhase::Probing { cand_idx, .. } = adm.phase {
                                if report <= adm.flow.t_max_us {
                                    self.admit(ctx, flow_id);
                                } else {
                                    next = Some(cand_idx + 1);
                                }
                            }
                        }
                        if let Some(idx) = next {
                            self.probe_next_candidate(ctx, flow_id, idx);
                        }
                        return;
                    }
                }
                match self.core.handle_rrep(rrep, from, ctx.now) {
                    RrepOutcome::Consumed => {
                        // Candidate path for a collecting admission.
                        for adm in self.admissions.values_mut() {
                            if adm.flow.dest == rrep.src
                                && matches!(adm.phase, AdmissionPhase::Collecting { .. })
                            {
                                adm.candidates.push(Candidate {
                                    next_hop: from,
                                    hop_count: rrep.hop_count + 1,
                                    dest_seq: rrep.dest_seq,
                                });
                            }
                        }
                        self.flush_buffered(ctx, rrep.src);
                    }
                    RrepOutcome::Forward { next_hop, mut rrep } => {
                        adversary::mutate_forwarded_rrep(ctx.profile, &mut rrep);
                        // The next hop now owes us a forwarding action.
                        if rrep.dest != next_hop {
                            let deadline = self.forward_deadline(ctx);
                            self.rel.expect_forward(next_hop, key, deadline, initial);
                        }
                        ctx.unicast(next_hop, Frame::plain(Packet::Rrep(rrep)), 0);
                    }
                    RrepOutcome::MissingReverseRoute => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::NoRoute);
                    }
                    RrepOutcome::Stale => {}
                }
            }
            Packet::Rerr(rerr) => {
                if !addressed {
                    return;
                }
                if !self.gate_open(from, ctx) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Gated);
                    return;
                }
                if adversary::drops_all_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                let affected = self.core.handle_rerr(rerr, from, ctx.now, true);
                if !affected.is_empty() {
                    // A broken reservation path: sources re-admit on the next
                    // send; intermediates propagate.
                    for adm in self.admissions.values_mut() {
                        if affected.iter().any(|&(d, _)| d == adm.flow.dest) {
                            adm.phase = AdmissionPhase::Idle;
                        }
                    }
                    ctx.broadcast(
                        Frame::plain(Packet::Rerr(Rerr {
                            unreachable: affected,
                            signature: None,
                        })),
                        0,
                    );
                }
            }
            Packet::Data(data) => {
                if !addressed {
                    return;
                }
                self.handle_data(ctx, data, from);
            }
            Packet::Probe(probe) => {
                if !addressed {
                    return;
                }
                if !self.gate_open(from, ctx) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Gated);
                    return;
                }
                self.handle_probe(ctx, probe, from);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: &ProtoTimer) {
        match timer {
            ProtoTimer::AdmissionWindow { flow, token } => {
                let Some(adm) = self.admissions.get_mut(flow) else {
                    return;
                };
                if adm.phase != (AdmissionPhase::Collecting { token: *token }) {
                    return;
                }
                if adm.candidates.is_empty() {
                    adm.phase = AdmissionPhase::Idle;
                    return;
                }
                self.probe_next_candidate(ctx, *flow, 0);
            }
            ProtoTimer::ProbeReportWait { flow, token } => {
                let Some(adm) = self.admissions.get_mut(flow) else {
                    return;
                };
                if let AdmissionPhase::Probing { token: t, cand_idx } = adm.phase {
                    if t == *token {
                        // Probe report never arrived: candidate failed.
                        self.probe_next_candidate(ctx, *flow, cand_idx + 1);
                    }
                }
            }
            ProtoTimer::ProbeCollect { flow, .. } => {
                let Some(collector) = self.collectors.remove(flow) else {
                    return;
                };
                if collector.delays.is_empty() {
                    return;
                }
                let avg =
                    collector.delays.iter().sum::<u64>() / collector.delays.len() as u64;
                let Some(entry) = self.flow_table.get(flow).copied() else {
                    return;
                };
                let Some(route) = self.core.lookup_valid(entry.src, ctx.now) else {
                    return;
                };
                let rrep = Rrep {
                    src: ctx.me,
                    dest: entry.src,
                    dest_seq: self.core.own_seq(),
                    hop_count: 0,
                    lifetime_us: ctx.params.route_lifetime_us,
                    next_to_destination: ctx.me,
                    recovery: false,
                    probe_report_us: Some(avg),
                    flow: Some(*flow),
                    sse: None,
                };
                ctx.unicast(route.next_hop, Frame::plain(Packet::Rrep(rrep)), 0);
            }
            ProtoTimer::DiscoveryRetry { .. } => {}
        }
    }

    fn on_app_send(&mut self, ctx: &mut Ctx, flow: &FlowSpec, seq: u32) {
        if flow.dest == ctx.me {
            ctx.deliver_app(flow.id, ctx.now.0);
            return;
        }
        let data = DataPkt {
            flow: flow.id,
            src: ctx.me,
            dest: flow.dest,
            seq,
            origin_us: ctx.now.0,
            size: flow.packet_size,
            link_seq: 0,
        };
        let admitted = matches!(
            self.admissions.get(&flow.id).map(|a| &a.phase),
            Some(AdmissionPhase::Admitted)
        );
        if admitted && self.core.lookup_valid(flow.dest, ctx.now).is_some() {
            self.send_data(ctx, data);
            return;
        }
        if self.core.buffer_packet(data).is_err() {
            ctx.actions.push(crate::protocol::Action::LocalDrop {
                pkt: "DATA",
                flow: flow.id as i64,
                toward: Some(flow.dest),
                cause: DropCause::Queue,
            });
        }
        if admitted {
            // Route lapsed while admitted: run a fresh admission.
            if let Some(adm) = self.admissions.get_mut(&flow.id) {
                adm.phase = AdmissionPhase::Idle;
            }
        }
        self.begin_admission(ctx, flow);
    }

    fn on_discover(&mut self, ctx: &mut Ctx, dest: NodeId) {
        if let Some(rreq) = self.core.originate_discovery(
            dest,
            ctx.now,
            ctx.params.ttl,
            ctx.params.min_discovery_interval_us,
        ) {
            self.flood_sent_at
                .insert(flood_key(rreq.src, rreq.dest), ctx.now.0);
            self.expect_flood_forwards(ctx, rreq.src, rreq.dest, None);
            ctx.broadcast(Frame::plain(Packet::Rreq(rreq)), 0);
        }
    }

    fn on_reassembly_flag(&mut self, ctx: &mut Ctx, from: NodeId, link_seq: u32) {
        self.link_rx
            .entry(from)
            .or_default()
            .on_flag(ctx.now.0, link_seq);
    }

    fn on_reliability_tick(&mut self, ctx: &mut Ctx) {
        self.rel.tick(ctx.now.0, ctx.params.qos.ewma_alpha);
    }

    fn on_adversary_tick(&mut self, ctx: &mut Ctx) {
        adversary::run_tick(&mut self.core, ctx, &mut self.flood_dest_rotor, |_, p| {
            Frame::plain(p)
        });
    }

    fn on_classification(&mut self, _ctx: &mut Ctx, labels: &BTreeMap<NodeId, Label>) {
        for (&n, &label) in labels {
            if label == Label::Selfish {
                self.rel.zero(n);
            }
        }
    }

    fn route_view(&self) -> Vec<RouteView> {
        self.core.route_view()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewma_direct_values() {
        // R_prev = 0, N_t = 1, alpha = 0.5 -> 0.5.
        assert_eq!(update_reliability(0.0, 1.0, 0.5), 0.5);
        // Fixed point.
        let c = 0.37;
        assert!((update_reliability(c, c, 0.5) - c).abs() < 1e-12);
        // Ten unit updates from zero: 1 - 2^-10.
        let mut r = 0.0;
        for _ in 0..10 {
            r = update_reliability(r, 1.0, 0.5);
        }
        assert!((r - (1.0 - 2f64.powi(-10))).abs() < 1e-12);
    }

    #[test]
    fn ewma_exclusion_latency() {
        // Forwarding nothing from R = 1.0 crosses below the 0.5 gate in
        // exactly two intervals.
        let mut r = 1.0;
        r = update_reliability(r, 0.0, 0.5);
        assert!(r >= 0.5 && !(r < 0.5));
        r = update_reliability(r, 0.0, 0.5);
        assert!(r < 0.5);
    }

    #[test]
    fn path_reliability_mean() {
        assert_eq!(path_reliability(&[1.0, 1.0, 1.0]), 1.0);
        assert!((path_reliability(&[1.0, 0.8, 0.6]) - 0.8).abs() < 1e-12);
        assert_eq!(path_reliability(&[]), 0.0);
    }

    #[test]
    fn rto_with_k4() {
        assert!((retransmission_timeout(0.1, 0.01) - 0.14).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_hand_point() {
        // p=0.01, RTT=0.1s, RTO=0.14s, 1000 B: evaluate the response
        // function by hand as the oracle.
        let x = 0.1 * (2.0 * 0.01f64 / 3.0).sqrt();
        let y = 0.14 * (3.0 * (3.0 * 0.01f64 / 8.0).sqrt()) * 0.01 * (1.0 + 32.0 * 0.0001);
        let oracle = 1000.0 / (x + y);
        let est = estimate_bandwidth(1000.0, 0.1, 0.14, 0.01, 1.25e6);
        assert!((est - oracle).abs() / oracle < 1e-12);
        assert!((oracle - 1.19e5).abs() / 1.19e5 < 0.01, "oracle {oracle}");
    }

    #[test]
    fn bandwidth_singularity_policy() {
        assert_eq!(estimate_bandwidth(1000.0, 0.1, 0.14, 0.0, 1.25e6), 1.25e6);
        assert_eq!(estimate_bandwidth(1000.0, 0.1, 0.14, -0.5, 7.0), 7.0);
    }

    #[test]
    fn bandwidth_monotone_in_p() {
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let p = 1e-4 + (0.5 - 1e-4) * i as f64 / 99.0;
            let est = estimate_bandwidth(1000.0, 0.1, 0.14, p, 1.25e6);
            assert!(est < prev, "not decreasing at p={p}");
            prev = est;
        }
    }

    #[test]
    fn scope_membership() {
        let topo = Topology::build(
            vec![(0.0, 0.0), (50.0, 0.0), (100.0, 0.0), (150.0, 0.0)],
            60.0,
            vec![0, 0, 1, 1],
            0.0,
            BTreeMap::new(),
            1000,
        )
        .unwrap();
        // Same group: scope is that group only.
        assert!(in_flood_scope(NodeId(0), NodeId(0), NodeId(1), &topo));
        assert!(!in_flood_scope(NodeId(2), NodeId(0), NodeId(1), &topo));
        // Cross-group: union of both.
        assert!(in_flood_scope(NodeId(2), NodeId(0), NodeId(3), &topo));
        assert!(in_flood_scope(NodeId(1), NodeId(0), NodeId(3), &topo));
    }

    #[test]
    fn link_observer_classifies_losses() {
        let mut obs = LinkObserver::default();
        // Flag arrives before the gap is noticed.
        obs.on_received(10, 0);
        obs.on_flag(20, 1);
        obs.on_received(30, 2);
        assert_eq!(obs.p_congestion(40, 1000), Some(0.0));
        // Bare gap counts as congestion: 1 of 5 expected packets.
        obs.on_received(50, 4);
        let p = obs.p_congestion(60, 1000).unwrap();
        assert!((p - 0.2).abs() < 1e-12, "p = {p}");
        // Empty window yields no sample.
        let mut fresh = LinkObserver::default();
        assert_eq!(fresh.p_congestion(100, 1000), None);
    }

    #[test]
    fn reliability_ledger_decay_and_recovery() {
        let mut rel = Reliability::default();
        let n = NodeId(3);
        rel.heard(n, 1.0);
        // Interval with an unmet expectation.
        rel.expect_forward(n, 1, 100, 1.0);
        rel.tick(200, 0.5);
        assert!((rel.r_of(n) - 0.5).abs() < 1e-12);
        // Met expectations restore it.
        rel.expect_forward(n, 2, 400, 1.0);
        rel.observe_forward(n, 2, 1.0);
        rel.tick(500, 0.5);
        assert!((rel.r_of(n) - 0.75).abs() < 1e-12);
        // Nothing expected: no update.
        rel.tick(600, 0.5);
        assert!((rel.r_of(n) - 0.75).abs() < 1e-12);
        // Unknown neighbour reads as zero.
        assert_eq!(rel.r_of(NodeId(9)), 0.0);
    }

    #[test]
    fn observation_before_expectation_counts() {
        let mut rel = Reliability::default();
        let n = NodeId(3);
        rel.observe_forward(n, 7, 1.0);
        rel.expect_forward(n, 7, 100, 1.0);
        rel.tick(200, 0.5);
        assert!((rel.r_of(n) - 1.0).abs() < 1e-12);
    }
}
