//! Baseline on-demand distance-vector routing: route discovery, route
//! maintenance, and data forwarding, with the monitoring header extensions
//! (`next_to_source`, `duplicate_flag`, `next_to_destination`).
//!
//! [`AodvCore`] holds the per-node routing state and encodes every protocol
//! decision as a pure outcome; the stacks in this crate map outcomes to
//! transmissions, adding their own security wrapping where they have any.

use crate::adversary;
use crate::engine::{DropCause, NodeId, SimTime};
use crate::packet::{DataPkt, Frame, Packet, RouteSse};
use crate::protocol::{
    Ctx, NodeBehavior, ProtoTimer, RouteView, StackMaterials,
};
use crate::qos_route::FlowSpec;
use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rreq {
    pub src: NodeId,
    pub src_seq: u32,
    pub bcast_id: u32,
    pub dest: NodeId,
    pub dest_seq_known: u32,
    pub hop_count: u32,
    pub ttl: u32,
    /// First relay on this copy's path back to the source.
    pub next_to_source: NodeId,
    /// Set on every rebroadcast: the flood was already on the air.
    pub duplicate_flag: bool,
    pub sse: Option<RouteSse>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rrep {
    /// The node the route leads to (the replier).
    pub src: NodeId,
    /// The discovery originator the reply travels toward.
    pub dest: NodeId,
    pub dest_seq: u32,
    pub hop_count: u32,
    pub lifetime_us: u64,
    /// First relay on the reverse path from the replier.
    pub next_to_destination: NodeId,
    /// Path-restoration reply flooded by a destination after a QoS breach.
    pub recovery: bool,
    /// Mean probe delay piggybacked by the destination during admission.
    pub probe_report_us: Option<u64>,
    pub flow: Option<u32>,
    pub sse: Option<RouteSse>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rerr {
    pub unreachable: Vec<(NodeId, u32)>,
    pub signature: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingEntry {
    pub dest: NodeId,
    pub next_hop: NodeId,
    pub hop_count: u32,
    pub dest_seq: u32,
    pub expires: SimTime,
}

impl RoutingEntry {
    pub fn valid_at(&self, now: SimTime) -> bool {
        self.expires > now
    }
}

/// What to do with a received RREQ.
#[derive(Debug, Clone, PartialEq)]
pub enum RreqOutcome {
    Duplicate,
    TtlExhausted,
    /// This node answers the discovery.
    Reply(Rrep),
    /// Rebroadcast the incremented copy.
    Forward(Rreq),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RrepOutcome {
    /// This node originated the discovery; route is ready.
    Consumed,
    Forward { next_hop: NodeId, rrep: Rrep },
    MissingReverseRoute,
    /// A fresher entry made the reply irrelevant; nothing to send.
    Stale,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataOutcome {
    DeliverApp,
    Forward { next_hop: NodeId },
    NoRoute { rerr: Rerr },
}

#[derive(Debug, Clone)]
struct FloodState {
    first_seen: SimTime,
    copies: u32,
}

#[derive(Debug, Clone)]
struct PendingDiscovery {
    attempts: u32,
}

/// Per-node AODV state: routing table, flood duplicate suppression, origin
/// buffers and discovery bookkeeping.
pub struct AodvCore {
    pub me: NodeId,
    own_seq: u32,
    next_bcast: u32,
    routes: BTreeMap<NodeId, RoutingEntry>,
    floods: BTreeMap<(u16, u32), FloodState>,
    pending: BTreeMap<NodeId, PendingDiscovery>,
    buffered: BTreeMap<NodeId, VecDeque<DataPkt>>,
    last_discovery_us: Option<u64>,
    link_seq_out: BTreeMap<NodeId, u32>,
    route_lifetime_us: u64,
    buffer_cap: usize,
}

impl AodvCore {
    pub fn new(me: NodeId, route_lifetime_us: u64, buffer_cap: usize) -> AodvCore {
        AodvCore {
            me,
            own_seq: 0,
            next_bcast: 0,
            routes: BTreeMap::new(),
            floods: BTreeMap::new(),
            pending: BTreeMap::new(),
            buffered: BTreeMap::new(),
            last_discovery_us: None,
            link_seq_out: BTreeMap::new(),
            route_lifetime_us,
            buffer_cap,
        }
    }

    pub fn own_seq(&self) -> u32 {
        self.own_seq
    }

    pub fn bump_seq(&mut self) -> u32 {
        self.own_seq += 1;
        self.own_seq
    }

    pub fn next_link_seq(&mut self, neighbor: NodeId) -> u32 {
        let c = self.link_seq_out.entry(neighbor).or_insert(0);
        *c += 1;
        *c
    }

    pub fn lookup_valid(&mut self, dest: NodeId, now: SimTime) -> Option<RoutingEntry> {
        match self.routes.get(&dest) {
            Some(e) if e.valid_at(now) => Some(*e),
            Some(_) => {
                self.routes.remove(&dest);
                None
            }
            None => None,
        }
    }

    pub fn entry(&self, dest: NodeId) -> Option<&RoutingEntry> {
        self.routes.get(&dest)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RoutingEntry> {
        self.routes.values()
    }

    /// Force the table toward a specific candidate path (QoS admission re-pins
    /// the source route to the probe candidate under test).
    pub fn pin_route(&mut self, entry: RoutingEntry) {
        self.routes.insert(entry.dest, entry);
    }

    /// Freshness rule: install unless an existing valid entry is strictly
    /// fresher (higher sequence number) or equally fresh and no longer.
    pub fn install_route(&mut self, cand: RoutingEntry, now: SimTime) -> bool {
        match self.routes.get(&cand.dest) {
            Some(e) if e.valid_at(now) => {
                let fresher = cand.dest_seq > e.dest_seq
                    || (cand.dest_seq == e.dest_seq && cand.hop_count < e.hop_count);
                let same_path = cand.dest_seq == e.dest_seq
                    && cand.hop_count == e.hop_count
                    && cand.next_hop == e.next_hop;
                if fresher || same_path {
                    self.routes.insert(cand.dest, cand);
                    true
                } else {
                    false
                }
            }
            _ => {
                self.routes.insert(cand.dest, cand);
                true
            }
        }
    }

    pub fn invalidate(&mut self, dest: NodeId, now: SimTime) {
        if let Some(e) = self.routes.get_mut(&dest) {
            e.expires = now;
        }
    }

    fn refresh(&mut self, dest: NodeId, now: SimTime) {
        let lifetime = self.route_lifetime_us;
        if let Some(e) = self.routes.get_mut(&dest) {
            e.expires = now + lifetime;
        }
    }

    /// Start a discovery unless a fresh usable route exists or the rate
    /// limiter defers it. Returns the RREQ to broadcast.
    pub fn originate_discovery(
        &mut self,
        dest: NodeId,
        now: SimTime,
        ttl: u32,
        min_interval_us: u64,
    ) -> Option<Rreq> {
        if self.lookup_valid(dest, now).is_some() {
            return None;
        }
        if let Some(last) = self.last_discovery_us {
            if now.0.saturating_sub(last) < min_interval_us {
                return None;
            }
        }
        self.last_discovery_us = Some(now.0);
        self.own_seq += 1;
        let bcast_id = self.next_bcast;
        self.next_bcast += 1;
        let dest_seq_known = self.routes.get(&dest).map_or(0, |e| e.dest_seq);
        let rreq = Rreq {
            src: self.me,
            src_seq: self.own_seq,
            bcast_id,
            dest,
            dest_seq_known,
            hop_count: 0,
            ttl,
            next_to_source: self.me,
            duplicate_flag: false,
            sse: None,
        };
        self.note_flood(rreq.src, rreq.bcast_id, now);
        rreq.into()
    }

    /// Attack-path origination: no route check, no rate limiter.
    pub fn forge_rreq(&mut self, dest: NodeId, ttl: u32, now: SimTime) -> Rreq {
        self.own_seq += 1;
        let bcast_id = self.next_bcast;
        self.next_bcast += 1;
        let rreq = Rreq {
            src: self.me,
            src_seq: self.own_seq,
            bcast_id,
            dest,
            dest_seq_known: 0,
            hop_count: 0,
            ttl,
            next_to_source: self.me,
            duplicate_flag: false,
            sse: None,
        };
        self.note_flood(rreq.src, rreq.bcast_id, now);
        rreq
    }

    fn note_flood(&mut self, src: NodeId, bcast_id: u32, now: SimTime) -> u32 {
        if self.floods.len() > 8192 {
            let horizon = now.saturating_sub(SimTime(30_000_000));
            self.floods.retain(|_, f| f.first_seen > horizon);
        }
        let st = self
            .floods
            .entry((src.0, bcast_id))
            .or_insert(FloodState {
                first_seen: now,
                copies: 0,
            });
        st.copies += 1;
        st.copies
    }

    /// Core RREQ handling: duplicate suppression, reverse-route setup, reply
    /// or forward decision. Security layers run before this and wrap after.
    pub fn handle_rreq(
        &mut self,
        rreq: &Rreq,
        from: NodeId,
        now: SimTime,
        allow_intermediate_reply: bool,
    ) -> RreqOutcome {
        let copies = self.note_flood(rreq.src, rreq.bcast_id, now);
        if copies > 1 {
            return RreqOutcome::Duplicate;
        }
        // Reverse route toward the originator, unless something fresher is
        // already installed.
        self.install_route(
            RoutingEntry {
                dest: rreq.src,
                next_hop: from,
                hop_count: rreq.hop_count + 1,
                dest_seq: rreq.src_seq,
                expires: now + self.route_lifetime_us,
            },
            now,
        );
        if rreq.dest == self.me {
            self.own_seq = self.own_seq.max(rreq.dest_seq_known) + 1;
            return RreqOutcome::Reply(Rrep {
                src: self.me,
                dest: rreq.src,
                dest_seq: self.own_seq,
                hop_count: 0,
                lifetime_us: self.route_lifetime_us,
                next_to_destination: self.me,
                recovery: false,
                probe_report_us: None,
                flow: None,
                sse: None,
            });
        }
        if allow_intermediate_reply {
            if let Some(e) = self.lookup_valid(rreq.dest, now) {
                if e.dest_seq >= rreq.dest_seq_known {
                    return RreqOutcome::Reply(Rrep {
                        src: rreq.dest,
                        dest: rreq.src,
                        dest_seq: e.dest_seq,
                        hop_count: e.hop_count,
                        lifetime_us: e.expires.0.saturating_sub(now.0),
                        next_to_destination: self.me,
                        recovery: false,
                        probe_report_us: None,
                        flow: None,
                        sse: None,
                    });
                }
            }
        }
        if rreq.ttl <= 1 {
            return RreqOutcome::TtlExhausted;
        }
        let mut fwd = rreq.clone();
        fwd.hop_count += 1;
        fwd.ttl -= 1;
        fwd.duplicate_flag = true;
        if rreq.hop_count == 1 {
            fwd.next_to_source = from;
        }
        RreqOutcome::Forward(fwd)
    }

    pub fn handle_rrep(&mut self, rrep: &Rrep, from: NodeId, now: SimTime) -> RrepOutcome {
        let installed = self.install_route(
            RoutingEntry {
                dest: rrep.src,
                next_hop: from,
                hop_count: rrep.hop_count + 1,
                dest_seq: rrep.dest_seq,
                expires: now + rrep.lifetime_us.min(self.route_lifetime_us),
            },
            now,
        );
        if rrep.dest == self.me {
            self.pending.remove(&rrep.src);
            return RrepOutcome::Consumed;
        }
        if !installed {
            return RrepOutcome::Stale;
        }
        match self.lookup_valid(rrep.dest, now) {
            Some(reverse) => {
                let mut fwd = rrep.clone();
                fwd.hop_count += 1;
                if rrep.hop_count == 1 {
                    fwd.next_to_destination = from;
                }
                RrepOutcome::Forward {
                    next_hop: reverse.next_hop,
                    rrep: fwd,
                }
            }
            None => RrepOutcome::MissingReverseRoute,
        }
    }

    /// Invalidate matching routes; returns the affected subset to propagate.
    /// `adopt_dsn` is the unsecured behaviour of trusting the advertised
    /// sequence number.
    pub fn handle_rerr(
        &mut self,
        rerr: &Rerr,
        from: NodeId,
        now: SimTime,
        adopt_dsn: bool,
    ) -> Vec<(NodeId, u32)> {
        let mut affected = Vec::new();
        for &(dest, dsn) in &rerr.unreachable {
            let Some(e) = self.routes.get_mut(&dest) else {
                continue;
            };
            if e.next_hop != from || !e.valid_at(now) {
                continue;
            }
            if adopt_dsn {
                e.dest_seq = e.dest_seq.max(dsn);
            }
            e.expires = now;
            affected.push((dest, dsn));
        }
        affected
    }

    /// Route a data packet held by this node.
    pub fn route_data(&mut self, data: &DataPkt, now: SimTime) -> DataOutcome {
        if data.dest == self.me {
            return DataOutcome::DeliverApp;
        }
        match self.lookup_valid(data.dest, now) {
            Some(e) => {
                self.refresh(data.dest, now);
                DataOutcome::Forward { next_hop: e.next_hop }
            }
            None => {
                let dsn = self.routes.get(&data.dest).map_or(1, |e| e.dest_seq + 1);
                DataOutcome::NoRoute {
                    rerr: Rerr {
                        unreachable: vec![(data.dest, dsn)],
                        signature: None,
                    },
                }
            }
        }
    }

    pub fn buffer_packet(&mut self, data: DataPkt) -> Result<(), DataPkt> {
        let q = self.buffered.entry(data.dest).or_default();
        if q.len() >= self.buffer_cap {
            return Err(data);
        }
        q.push_back(data);
        Ok(())
    }

    pub fn drain_buffered(&mut self, dest: NodeId) -> Vec<DataPkt> {
        self.buffered
            .remove(&dest)
            .map(|q| q.into_iter().collect())
            .unwrap_or_default()
    }

    pub fn buffered_len(&self, dest: NodeId) -> usize {
        self.buffered.get(&dest).map_or(0, |q| q.len())
    }

    pub fn discovery_attempts(&mut self, dest: NodeId) -> &mut u32 {
        &mut self.pending.entry(dest).or_insert(PendingDiscovery { attempts: 0 }).attempts
    }

    pub fn clear_pending(&mut self, dest: NodeId) {
        self.pending.remove(&dest);
    }

    pub fn route_view(&self) -> Vec<RouteView> {
        self.routes
            .values()
            .map(|e| RouteView {
                dest: e.dest,
                next_hop: e.next_hop,
                hop_count: e.hop_count,
                dest_seq: e.dest_seq,
                valid: true,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Plain AODV stack.
// ---------------------------------------------------------------------------

pub struct AodvNode {
    core: AodvCore,
    flood_dest_rotor: u16,
}

pub fn make_stack(mat: &StackMaterials) -> Box<dyn NodeBehavior> {
    Box::new(AodvNode {
        core: AodvCore::new(
            mat.me,
            mat.params.route_lifetime_us,
            mat.params.buffer_cap,
        ),
        flood_dest_rotor: 0,
    })
}

impl AodvNode {
    /// Shared data-plane transit handling: adversarial drops, then routing.
    fn transit_data(core: &mut AodvCore, ctx: &mut Ctx, data: &DataPkt) {
        if data.dest != core.me
            && adversary::drops_transit_data(ctx.profile, ctx.rng)
        {
            ctx.drop_pkt(&Packet::Data(*data), Some(data.dest), DropCause::Adversary);
            return;
        }
        match core.route_data(data, ctx.now) {
            DataOutcome::DeliverApp => ctx.deliver_app(data.flow, data.origin_us),
            DataOutcome::Forward { next_hop } => {
                let mut fwd = *data;
                fwd.link_seq = core.next_link_seq(next_hop);
                ctx.unicast(next_hop, Frame::plain(Packet::Data(fwd)), 0);
            }
            DataOutcome::NoRoute { rerr } => {
                ctx.drop_pkt(&Packet::Data(*data), Some(data.dest), DropCause::NoRoute);
                ctx.broadcast(Frame::plain(Packet::Rerr(rerr)), 0);
            }
        }
    }

    fn send_or_buffer(core: &mut AodvCore, ctx: &mut Ctx, data: DataPkt) {
        match core.lookup_valid(data.dest, ctx.now) {
            Some(e) => {
                let mut pkt = data;
                pkt.link_seq = core.next_link_seq(e.next_hop);
                ctx.unicast(e.next_hop, Frame::plain(Packet::Data(pkt)), 0);
            }
            None => {
                let dest = data.dest;
                if core.buffer_packet(data).is_err() {
                    ctx.actions.push(crate::protocol::Action::LocalDrop {
                        pkt: "DATA",
                        flow: -1,
                        toward: Some(dest),
                        cause: DropCause::Queue,
                    });
                }
                Self::start_discovery(core, ctx, dest, 0);
            }
        }
    }

    fn start_discovery(core: &mut AodvCore, ctx: &mut Ctx, dest: NodeId, attempt: u32) {
        if let Some(rreq) = core.originate_discovery(
            dest,
            ctx.now,
            ctx.params.ttl,
            ctx.params.min_discovery_interval_us,
        ) {
            ctx.broadcast(Frame::plain(Packet::Rreq(rreq)), 0);
            ctx.timer(
                ctx.now + ctx.params.discovery_timeout_us,
                ProtoTimer::DiscoveryRetry { dest, attempt },
            );
        } else if core.lookup_valid(dest, ctx.now).is_none() && attempt == 0 {
            // Rate limited: try again after the limiter window.
            ctx.timer(
                ctx.now + ctx.params.min_discovery_interval_us,
                ProtoTimer::DiscoveryRetry { dest, attempt },
            );
        }
    }

    fn flush_buffered(core: &mut AodvCore, ctx: &mut Ctx, dest: NodeId) {
        if core.lookup_valid(dest, ctx.now).is_none() {
            return;
        }
        for data in core.drain_buffered(dest) {
            Self::send_or_buffer(core, ctx, data);
        }
    }
}

impl NodeBehavior for AodvNode {
    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, from: NodeId, addressed: bool) {
        let core = &mut self.core;
        match &frame.packet {
            Packet::Rreq(rreq) => {
                if !addressed {
                    return;
                }
                // A blackhole answers every discovery with a forged,
                // extra-fresh reply instead of forwarding.
                if let Some(forged) = adversary::blackhole_reply(ctx.profile, core.me, rreq) {
                    if core.handle_rreq(rreq, from, ctx.now, false) != RreqOutcome::Duplicate {
                        ctx.unicast(from, Frame::plain(Packet::Rrep(forged)), 0);
                    }
                    return;
                }
                if rreq.dest != core.me && adversary::drops_rreq_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                match core.handle_rreq(rreq, from, ctx.now, true) {
                    RreqOutcome::Duplicate => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Duplicate)
                    }
                    RreqOutcome::TtlExhausted => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Ttl)
                    }
                    RreqOutcome::Reply(rrep) => {
                        ctx.unicast(from, Frame::plain(Packet::Rrep(rrep)), 0);
                    }
                    RreqOutcome::Forward(mut fwd) => {
                        adversary::mutate_forwarded_rreq(ctx.profile, &mut fwd);
                        let jitter = ctx.forward_jitter();
                        ctx.broadcast(Frame::plain(Packet::Rreq(fwd)), jitter);
                    }
                }
            }
            Packet::Rrep(rrep) => {
                if !addressed {
                    return;
                }
                if rrep.dest != core.me && adversary::drops_rrep_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                match core.handle_rrep(rrep, from, ctx.now) {
                    RrepOutcome::Consumed => {
                        Self::flush_buffered(core, ctx, rrep.src);
                    }
                    RrepOutcome::Forward { next_hop, mut rrep } => {
                        adversary::mutate_forwarded_rrep(ctx.profile, &mut rrep);
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
                if adversary::drops_all_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                let affected = core.handle_rerr(rerr, from, ctx.now, true);
                if !affected.is_empty() {
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
                Self::transit_data(core, ctx, data);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: &ProtoTimer) {
        if let ProtoTimer::DiscoveryRetry { dest, attempt } = timer {
            let core = &mut self.core;
            if core.lookup_valid(*dest, ctx.now).is_some() {
                core.clear_pending(*dest);
                Self::flush_buffered(core, ctx, *dest);
                return;
            }
            if *attempt + 1 <= ctx.params.max_discovery_retries {
                Self::start_discovery(core, ctx, *dest, attempt + 1);
            } else {
                core.clear_pending(*dest);
                for data in core.drain_buffered(*dest) {
                    ctx.drop_pkt(&Packet::Data(data), Some(*dest), DropCause::NoRoute);
                }
            }
        }
    }

    fn on_app_send(&mut self, ctx: &mut Ctx, flow: &FlowSpec, seq: u32) {
        let data = DataPkt {
            flow: flow.id,
            src: ctx.me,
            dest: flow.dest,
            seq,
            origin_us: ctx.now.0,
            size: flow.packet_size,
            link_seq: 0,
        };
        if flow.dest == ctx.me {
            ctx.deliver_app(flow.id, ctx.now.0);
            return;
        }
        Self::send_or_buffer(&mut self.core, ctx, data);
    }

    fn on_discover(&mut self, ctx: &mut Ctx, dest: NodeId) {
        Self::start_discovery(&mut self.core, ctx, dest, 0);
    }

    fn on_adversary_tick(&mut self, ctx: &mut Ctx) {
        adversary::run_tick(&mut self.core, ctx, &mut self.flood_dest_rotor, |_, p| {
            Frame::plain(p)
        });
    }

    fn route_view(&self) -> Vec<RouteView> {
        self.core.route_view()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(dest: u16, next: u16, hops: u32, seq: u32, exp: u64) -> RoutingEntry {
        RoutingEntry {
            dest: NodeId(dest),
            next_hop: NodeId(next),
            hop_count: hops,
            dest_seq: seq,
            expires: SimTime(exp),
        }
    }

    fn rreq(src: u16, bcast: u32, dest: u16) -> Rreq {
        Rreq {
            src: NodeId(src),
            src_seq: 1,
            bcast_id: bcast,
            dest: NodeId(dest),
            dest_seq_known: 0,
            hop_count: 0,
            ttl: 8,
            next_to_source: NodeId(src),
            duplicate_flag: false,
            sse: None,
        }
    }

    #[test]
    fn freshness_rule() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        let now = SimTime(0);
        assert!(core.install_route(entry(5, 1, 3, 10, 1_000_000), now));
        // Fresher sequence number replaces.
        assert!(core.install_route(entry(5, 2, 9, 11, 1_000_000), now));
        assert_eq!(core.entry(NodeId(5)).unwrap().next_hop, NodeId(2));
        // Equal seq, higher hop count is kept out.
        assert!(!core.install_route(entry(5, 3, 12, 11, 1_000_000), now));
        assert_eq!(core.entry(NodeId(5)).unwrap().next_hop, NodeId(2));
        // Equal seq, shorter wins.
        assert!(core.install_route(entry(5, 4, 2, 11, 1_000_000), now));
        // Stale seq ignored.
        assert!(!core.install_route(entry(5, 6, 1, 9, 1_000_000), now));
        assert_eq!(core.entry(NodeId(5)).unwrap().next_hop, NodeId(4));
    }

    #[test]
    fn expired_entries_purged_on_lookup() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        core.install_route(entry(5, 1, 3, 10, 100), SimTime(0));
        assert!(core.lookup_valid(NodeId(5), SimTime(50)).is_some());
        assert!(core.lookup_valid(NodeId(5), SimTime(100)).is_none());
        assert!(core.entry(NodeId(5)).is_none());
    }

    #[test]
    fn originate_requires_no_fresh_route() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        assert!(core
            .originate_discovery(NodeId(9), SimTime(0), 8, 0)
            .is_some());
        core.install_route(entry(9, 1, 2, 5, 2_000_000), SimTime(10));
        assert!(core
            .originate_discovery(NodeId(9), SimTime(20), 8, 0)
            .is_none());
    }

    #[test]
    fn back_to_back_discoveries_use_distinct_bcast_ids() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        let a = core
            .originate_discovery(NodeId(9), SimTime(0), 8, 0)
            .unwrap();
        let b = core
            .originate_discovery(NodeId(8), SimTime(1), 8, 0)
            .unwrap();
        assert_ne!(a.bcast_id, b.bcast_id);
    }

    #[test]
    fn rate_limiter_defers() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        assert!(core
            .originate_discovery(NodeId(9), SimTime(0), 8, 50_000)
            .is_some());
        assert!(core
            .originate_discovery(NodeId(8), SimTime(10_000), 8, 50_000)
            .is_none());
        assert!(core
            .originate_discovery(NodeId(8), SimTime(60_000), 8, 50_000)
            .is_some());
    }

    #[test]
    fn duplicate_floods_dropped() {
        let mut core = AodvCore::new(NodeId(1), 1_000_000, 16);
        let r = rreq(0, 7, 9);
        assert!(matches!(
            core.handle_rreq(&r, NodeId(0), SimTime(0), true),
            RreqOutcome::Forward(_)
        ));
        assert_eq!(
            core.handle_rreq(&r, NodeId(2), SimTime(5), true),
            RreqOutcome::Duplicate
        );
    }

    #[test]
    fn destination_replies() {
        let mut core = AodvCore::new(NodeId(9), 1_000_000, 16);
        let r = rreq(0, 1, 9);
        match core.handle_rreq(&r, NodeId(0), SimTime(0), true) {
            RreqOutcome::Reply(rrep) => {
                assert_eq!(rrep.src, NodeId(9));
                assert_eq!(rrep.dest, NodeId(0));
                assert_eq!(rrep.hop_count, 0);
                assert!(rrep.dest_seq > r.dest_seq_known);
            }
            other => panic!("expected reply, got {other:?}"),
        }
        // Reverse route installed.
        assert_eq!(core.entry(NodeId(0)).unwrap().next_hop, NodeId(0));
    }

    #[test]
    fn intermediate_forward_increments_and_flags() {
        let mut core = AodvCore::new(NodeId(1), 1_000_000, 16);
        let r = rreq(0, 1, 9);
        match core.handle_rreq(&r, NodeId(0), SimTime(0), true) {
            RreqOutcome::Forward(f) => {
                assert_eq!(f.hop_count, 1);
                assert_eq!(f.ttl, 7);
                assert!(f.duplicate_flag);
                // hop_count 0 copy: first relay leaves next_to_source alone.
                assert_eq!(f.next_to_source, NodeId(0));
            }
            other => panic!("{other:?}"),
        }
        // Second relay stamps the first relay's address.
        let mut core2 = AodvCore::new(NodeId(2), 1_000_000, 16);
        let mut relayed = rreq(0, 1, 9);
        relayed.hop_count = 1;
        match core2.handle_rreq(&relayed, NodeId(1), SimTime(0), true) {
            RreqOutcome::Forward(f) => assert_eq!(f.next_to_source, NodeId(1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ttl_exhaustion_drops() {
        let mut core = AodvCore::new(NodeId(1), 1_000_000, 16);
        let mut r = rreq(0, 1, 9);
        r.ttl = 1;
        assert_eq!(
            core.handle_rreq(&r, NodeId(0), SimTime(0), true),
            RreqOutcome::TtlExhausted
        );
    }

    #[test]
    fn rrep_missing_reverse_route_drops() {
        let mut core = AodvCore::new(NodeId(3), 1_000_000, 16);
        let rrep = Rrep {
            src: NodeId(9),
            dest: NodeId(0),
            dest_seq: 4,
            hop_count: 0,
            lifetime_us: 500_000,
            next_to_destination: NodeId(9),
            recovery: false,
            probe_report_us: None,
            flow: None,
            sse: None,
        };
        assert_eq!(
            core.handle_rrep(&rrep, NodeId(9), SimTime(0)),
            RrepOutcome::MissingReverseRoute
        );
    }

    #[test]
    fn rerr_affects_only_matching_next_hop() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        core.install_route(entry(5, 1, 3, 10, 1_000_000), SimTime(0));
        core.install_route(entry(6, 2, 3, 10, 1_000_000), SimTime(0));
        let rerr = Rerr {
            unreachable: vec![(NodeId(5), 99), (NodeId(6), 99), (NodeId(7), 99)],
            signature: None,
        };
        let affected = core.handle_rerr(&rerr, NodeId(1), SimTime(10), true);
        assert_eq!(affected, vec![(NodeId(5), 99)]);
        assert!(core.lookup_valid(NodeId(5), SimTime(20)).is_none());
        assert!(core.lookup_valid(NodeId(6), SimTime(20)).is_some());
        // Unsecured handling adopted the advertised sequence number.
        assert_eq!(core.entry(NodeId(5)), None); // purged by lookup above
    }

    #[test]
    fn rerr_dsn_adoption_is_conditional() {
        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        core.install_route(entry(5, 1, 3, 10, 1_000_000), SimTime(0));
        let rerr = Rerr {
            unreachable: vec![(NodeId(5), 1 << 30)],
            signature: None,
        };
        core.handle_rerr(&rerr, NodeId(1), SimTime(10), false);
        assert_eq!(core.entry(NodeId(5)).unwrap().dest_seq, 10);

        let mut core = AodvCore::new(NodeId(0), 1_000_000, 16);
        core.install_route(entry(5, 1, 3, 10, 1_000_000), SimTime(0));
        core.handle_rerr(&rerr, NodeId(1), SimTime(10), true);
        assert_eq!(core.entry(NodeId(5)).unwrap().dest_seq, 1 << 30);
    }

    #[test]
    fn data_outcomes() {
        let mut core = AodvCore::new(NodeId(1), 1_000_000, 16);
        let data = DataPkt {
            flow: 1,
            src: NodeId(0),
            dest: NodeId(9),
            seq: 0,
            origin_us: 0,
            size: 100,
            link_seq: 0,
        };
        assert!(matches!(
            core.route_data(&data, SimTime(0)),
            DataOutcome::NoRoute { .. }
        ));
        core.install_route(entry(9, 2, 2, 5, 1_000_000), SimTime(0));
        assert_eq!(
            core.route_data(&data, SimTime(10)),
            DataOutcome::Forward { next_hop: NodeId(2) }
        );
        let mut self_core = AodvCore::new(NodeId(9), 1_000_000, 16);
        assert_eq!(self_core.route_data(&data, SimTime(0)), DataOutcome::DeliverApp);
    }
}
