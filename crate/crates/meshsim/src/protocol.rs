//! The strategy surface: every routing stack implements [`NodeBehavior`]
//! and registers under a protocol name, so scenarios pick their stack at
//! runtime.

use crate::adversary::AttackProfile;
use crate::engine::{DropCause, NodeId, SimTime, Topology};
use crate::packet::{Frame, Packet, TxMode};
use crate::qos_route::{FlowSpec, QosParams};
use crate::stats::Label;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Per-run immutable knobs shared by every stack.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub per_hop_delay_us: u64,
    pub jitter_us: (u64, u64),
    pub ttl: u32,
    pub route_lifetime_us: u64,
    pub discovery_timeout_us: u64,
    pub max_discovery_retries: u32,
    pub min_discovery_interval_us: u64,
    pub buffer_cap: usize,
    pub diameter_hops: u32,
    pub qos: QosParams,
}

/// Timers owned by the engine itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerKind {
    ReliabilityTick,
    DetectionSnapshot,
    FlowSend { flow_idx: usize, seq: u32 },
    DiscoveryTick { idx: usize },
    AdversaryTick,
    Proto(ProtoTimer),
}

/// Timers owned by protocol stacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtoTimer {
    /// Route discovery for `dest` did not complete; retry or give up.
    DiscoveryRetry { dest: NodeId, attempt: u32 },
    /// End of the RREP collection window for a flow admission.
    AdmissionWindow { flow: u32, token: u32 },
    /// The probe report for a candidate path did not arrive in time.
    ProbeReportWait { flow: u32, token: u32 },
    /// Destination-side wait for the full probe train of a flow.
    ProbeCollect { flow: u32, token: u32 },
}

#[derive(Debug)]
pub enum Action {
    Transmit {
        mode: TxMode,
        frame: Frame,
        delay: u64,
    },
    Timer {
        at: SimTime,
        kind: TimerKind,
    },
    AppDeliver {
        flow: u32,
        origin_us: u64,
    },
    LocalDrop {
        pkt: &'static str,
        flow: i64,
        toward: Option<NodeId>,
        cause: DropCause,
    },
}

/// Handler context: node identity, shared topology/parameters, the node's
/// private random stream, and the action buffer the engine applies after
/// the handler returns.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub me: NodeId,
    pub topo: &'a Topology,
    pub params: &'a RunParams,
    pub rng: &'a mut ChaCha8Rng,
    pub profile: Option<&'a AttackProfile>,
    pub actions: Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub fn broadcast(&mut self, frame: Frame, delay: u64) {
        self.actions.push(Action::Transmit {
            mode: TxMode::Broadcast,
            frame,
            delay,
        });
    }

    pub fn unicast(&mut self, to: NodeId, frame: Frame, delay: u64) {
        self.actions.push(Action::Transmit {
            mode: TxMode::Unicast(to),
            frame,
            delay,
        });
    }

    pub fn timer(&mut self, at: SimTime, timer: ProtoTimer) {
        self.actions.push(Action::Timer {
            at,
            kind: TimerKind::Proto(timer),
        });
    }

    pub fn deliver_app(&mut self, flow: u32, origin_us: u64) {
        self.actions.push(Action::AppDeliver { flow, origin_us });
    }

    pub fn drop_pkt(&mut self, pkt: &Packet, toward: Option<NodeId>, cause: DropCause) {
        self.actions.push(Action::LocalDrop {
            pkt: pkt.kind_str(),
            flow: pkt.flow_col(),
            toward,
            cause,
        });
    }

    /// Honest forwarding jitter; rushing adversaries ignore it.
    pub fn forward_jitter(&mut self) -> u64 {
        if matches!(self.profile, Some(AttackProfile::Rushing)) {
            return 0;
        }
        let (lo, hi) = self.params.jitter_us;
        if hi <= lo {
            lo
        } else {
            self.rng.gen_range(lo..=hi)
        }
    }
}

/// One simulated node's protocol brain. Handlers receive a context and push
/// actions; they never touch other nodes directly.
pub trait NodeBehavior: Send {
    /// Called once at t=0, before any event fires.
    fn on_start(&mut self, _ctx: &mut Ctx) {}

    /// A frame arrived on the radio; `addressed` is false for overheard
    /// unicast copies.
    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, from: NodeId, addressed: bool);

    fn on_timer(&mut self, _ctx: &mut Ctx, _timer: &ProtoTimer) {}

    /// Application asks to send one data packet of the flow.
    fn on_app_send(&mut self, ctx: &mut Ctx, flow: &FlowSpec, seq: u32);

    /// Synthetic workload: originate a route discovery toward `dest`.
    fn on_discover(&mut self, ctx: &mut Ctx, dest: NodeId);

    /// Link layer reported a reassembly failure for a lost data frame.
    fn on_reassembly_flag(&mut self, _ctx: &mut Ctx, _from: NodeId, _link_seq: u32) {}

    /// Periodic link-reliability bookkeeping (QoS stack only).
    fn on_reliability_tick(&mut self, _ctx: &mut Ctx) {}

    /// Adversary ticker for profiles that emit traffic on a schedule.
    fn on_adversary_tick(&mut self, _ctx: &mut Ctx) {}

    /// The local detector finished a classification round.
    fn on_classification(&mut self, _ctx: &mut Ctx, _labels: &BTreeMap<NodeId, Label>) {}

    /// Routing-table view for tests and invariants.
    fn route_view(&self) -> Vec<RouteView> {
        Vec::new()
    }
}

/// A read-only routing entry projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteView {
    pub dest: NodeId,
    pub next_hop: NodeId,
    pub hop_count: u32,
    pub dest_seq: u32,
    pub valid: bool,
}

/// Placeholder behavior used while a node's real brain is checked out by
/// the dispatcher.
pub struct InertBehavior;

impl NodeBehavior for InertBehavior {
    fn on_frame(&mut self, _ctx: &mut Ctx, _frame: &Frame, _from: NodeId, _addressed: bool) {}
    fn on_app_send(&mut self, _ctx: &mut Ctx, _flow: &FlowSpec, _seq: u32) {}
    fn on_discover(&mut self, _ctx: &mut Ctx, _dest: NodeId) {}
}

/// Everything a stack factory may need to wire up one node.
pub struct StackMaterials {
    pub me: NodeId,
    pub params: RunParams,
    pub crypto: std::sync::Arc<crate::secure_protocols::CryptoMaterials>,
}

pub type StackFactory = fn(&StackMaterials) -> Box<dyn NodeBehavior>;

/// The protocol registry: stacks registered by scenario name.
pub const REGISTRY: &[(&str, StackFactory)] = &[
    ("aodv", crate::aodv::make_stack),
    ("saodv", crate::secure_protocols::make_saodv_stack),
    ("seaodv", crate::secure_protocols::make_seaodv_stack),
    ("qos", crate::qos_route::make_stack),
];

pub fn protocol_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn lookup(name: &str) -> Option<StackFactory> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| *f)
}
