//! Secured routing stacks layered over the AODV core.
//!
//! The single-signature stack authenticates the immutable fields of route
//! control with per-originator signatures and binds the mutable hop count
//! to a one-way hash chain. The key-exchange stack derives pairwise keys
//! from pre-distributed key material through enhanced hello messages, then
//! MAC-protects every routing message hop by hop: group key on broadcast,
//! pairwise key on unicast.

use crate::adversary;
use crate::aodv::{AodvCore, Rerr, Rrep, Rreq, RreqOutcome, RrepOutcome, DataOutcome};
use crate::crypto::{
    blom_pairwise_key, hca_advance, hca_verify, mac_compute, mac_verify, unwrap_key, wrap_key,
    BlomPrivateRow, BlomPublic, Hasher, SaodvChain,
};
use crate::engine::{DropCause, NodeId};
use crate::packet::{DataPkt, Frame, HelloRrep, HelloRreq, Packet, RouteSse};
use crate::protocol::{Ctx, NodeBehavior, ProtoTimer, RouteView, StackMaterials};
use crate::qos_route::FlowSpec;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Run-wide key material prepared by the harness: a signature stand-in
/// table (per-node keys, globally verifiable), pre-distributed pairwise-key
/// rows, and per-node group keys.
#[derive(Debug, Clone)]
pub struct CryptoMaterials {
    pub hasher: Hasher,
    pub max_hops: u32,
    pub sig_keys: BTreeMap<NodeId, u64>,
    pub blom_public: Option<BlomPublic>,
    pub blom_rows: BTreeMap<NodeId, BlomPrivateRow>,
    pub gtk: BTreeMap<NodeId, u64>,
}

impl CryptoMaterials {
    pub fn sign(&self, node: NodeId, message: &[u8]) -> u64 {
        mac_compute(self.sig_keys[&node], message)
    }

    pub fn verify_sig(&self, node: NodeId, message: &[u8], sig: u64) -> bool {
        self.sig_keys
            .get(&node)
            .is_some_and(|k| mac_verify(*k, message, sig))
    }
}

/// Bytes covered by the originator signature: immutable fields plus the
/// chain parameters. Hop count, authenticator, ttl and the monitoring
/// extensions mutate per hop and stay outside.
fn rreq_signed_bytes(r: &Rreq, max_hops: u32, anchor: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(32);
    out.push(1);
    out.extend_from_slice(&r.src.0.to_le_bytes());
    out.extend_from_slice(&r.src_seq.to_le_bytes());
    out.extend_from_slice(&r.bcast_id.to_le_bytes());
    out.extend_from_slice(&r.dest.0.to_le_bytes());
    out.extend_from_slice(&r.dest_seq_known.to_le_bytes());
    out.extend_from_slice(&max_hops.to_le_bytes());
    out.extend_from_slice(&anchor.to_le_bytes());
    out
}

fn rrep_signed_bytes(r: &Rrep, max_hops: u32, anchor: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(32);
    out.push(2);
    out.extend_from_slice(&r.src.0.to_le_bytes());
    out.extend_from_slice(&r.dest.0.to_le_bytes());
    out.extend_from_slice(&r.dest_seq.to_le_bytes());
    out.extend_from_slice(&r.lifetime_us.to_le_bytes());
    out.extend_from_slice(&max_hops.to_le_bytes());
    out.extend_from_slice(&anchor.to_le_bytes());
    out
}

fn rerr_signed_bytes(r: &Rerr) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.push(3);
    out.extend_from_slice(&(r.unreachable.len() as u16).to_le_bytes());
    for &(dest, seq) in &r.unreachable {
        out.extend_from_slice(&dest.0.to_le_bytes());
        out.extend_from_slice(&seq.to_le_bytes());
    }
    out
}

/// Attach a signature extension to a freshly originated RREQ or RREP:
/// a new hash chain, its anchor under the signature, and the seed element
/// as the hop-zero authenticator.
pub fn saodv_extend_rreq(
    mat: &CryptoMaterials,
    originator: NodeId,
    rng: &mut rand_chacha::ChaCha8Rng,
    mut rreq: Rreq,
) -> Rreq {
    let chain = SaodvChain::generate(rng, mat.max_hops, mat.hasher).expect("max_hops >= 1");
    let anchor = chain.anchor();
    let signature = mat.sign(originator, &rreq_signed_bytes(&rreq, mat.max_hops, anchor));
    rreq.sse = Some(RouteSse {
        max_hops: mat.max_hops,
        anchor,
        signature,
        hca: chain.hca_for_hopcount(0).unwrap(),
    });
    rreq
}

pub fn saodv_extend_rrep(
    mat: &CryptoMaterials,
    originator: NodeId,
    rng: &mut rand_chacha::ChaCha8Rng,
    mut rrep: Rrep,
) -> Rrep {
    let chain = SaodvChain::generate(rng, mat.max_hops, mat.hasher).expect("max_hops >= 1");
    let anchor = chain.anchor();
    let signature = mat.sign(originator, &rrep_signed_bytes(&rrep, mat.max_hops, anchor));
    rrep.sse = Some(RouteSse {
        max_hops: mat.max_hops,
        anchor,
        signature,
        hca: chain.hca_for_hopcount(0).unwrap(),
    });
    rrep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SseVerdict {
    Ok,
    BadSignature,
    BadHca,
    Missing,
}

pub fn saodv_check_rreq(mat: &CryptoMaterials, rreq: &Rreq) -> SseVerdict {
    let Some(sse) = &rreq.sse else {
        return SseVerdict::Missing;
    };
    if !mat.verify_sig(
        rreq.src,
        &rreq_signed_bytes(rreq, sse.max_hops, sse.anchor),
        sse.signature,
    ) {
        return SseVerdict::BadSignature;
    }
    if !hca_verify(mat.hasher, sse.anchor, sse.max_hops, rreq.hop_count, sse.hca) {
        return SseVerdict::BadHca;
    }
    SseVerdict::Ok
}

pub fn saodv_check_rrep(mat: &CryptoMaterials, rrep: &Rrep) -> SseVerdict {
    let Some(sse) = &rrep.sse else {
        return SseVerdict::Missing;
    };
    if !mat.verify_sig(
        rrep.src,
        &rrep_signed_bytes(rrep, sse.max_hops, sse.anchor),
        sse.signature,
    ) {
        return SseVerdict::BadSignature;
    }
    if !hca_verify(mat.hasher, sse.anchor, sse.max_hops, rrep.hop_count, sse.hca) {
        return SseVerdict::BadHca;
    }
    SseVerdict::Ok
}

// ---------------------------------------------------------------------------
// Single-signature stack.
// ---------------------------------------------------------------------------

pub struct SaodvNode {
    core: AodvCore,
    mat: Arc<CryptoMaterials>,
    flood_dest_rotor: u16,
}

pub fn make_saodv_stack(mat: &StackMaterials) -> Box<dyn NodeBehavior> {
    Box::new(SaodvNode {
        core: AodvCore::new(
            mat.me,
            mat.params.route_lifetime_us,
            mat.params.buffer_cap,
        ),
        mat: mat.crypto.clone(),
        flood_dest_rotor: 0,
    })
}

impl SaodvNode {
    fn start_discovery(&mut self, ctx: &mut Ctx, dest: NodeId, attempt: u32) {
        if let Some(rreq) = self.core.originate_discovery(
            dest,
            ctx.now,
            ctx.params.ttl,
            ctx.params.min_discovery_interval_us,
        ) {
            let rreq = saodv_extend_rreq(&self.mat, ctx.me, ctx.rng, rreq);
            ctx.broadcast(Frame::plain(Packet::Rreq(rreq)), 0);
            ctx.timer(
                ctx.now + ctx.params.discovery_timeout_us,
                ProtoTimer::DiscoveryRetry { dest, attempt },
            );
        } else if self.core.lookup_valid(dest, ctx.now).is_none() && attempt == 0 {
            ctx.timer(
                ctx.now + ctx.params.min_discovery_interval_us,
                ProtoTimer::DiscoveryRetry { dest, attempt },
            );
        }
    }

    fn flush_buffered(&mut self, ctx: &mut Ctx, dest: NodeId) {
        if self.core.lookup_valid(dest, ctx.now).is_none() {
            return;
        }
        for data in self.core.drain_buffered(dest) {
            self.send_or_buffer(ctx, data);
        }
    }

    fn send_or_buffer(&mut self, ctx: &mut Ctx, data: DataPkt) {
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
                self.start_discovery(ctx, dest, 0);
            }
        }
    }
}

impl NodeBehavior for SaodvNode {
    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, from: NodeId, addressed: bool) {
        if !addressed {
            return;
        }
        match &frame.packet {
            Packet::Rreq(rreq) => {
                // Authentication precedes duplicate suppression.
                match saodv_check_rreq(&self.mat, rreq) {
                    SseVerdict::Ok => {}
                    SseVerdict::BadHca => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::BadHca);
                        return;
                    }
                    _ => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::BadSignature);
                        return;
                    }
                }
                if rreq.dest != ctx.me && adversary::drops_rreq_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                // Intermediate replies need the double-signature machinery,
                // which this stack does not implement; only the target
                // answers.
                match self.core.handle_rreq(rreq, from, ctx.now, false) {
                    RreqOutcome::Duplicate => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Duplicate)
                    }
                    RreqOutcome::TtlExhausted => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Ttl)
                    }
                    RreqOutcome::Reply(rrep) => {
                        let rrep = saodv_extend_rrep(&self.mat, ctx.me, ctx.rng, rrep);
                        ctx.unicast(from, Frame::plain(Packet::Rrep(rrep)), 0);
                    }
                    RreqOutcome::Forward(mut fwd) => {
                        let sse = fwd.sse.as_mut().unwrap();
                        sse.hca = hca_advance(self.mat.hasher, sse.hca);
                        adversary::mutate_forwarded_rreq(ctx.profile, &mut fwd);
                        let jitter = ctx.forward_jitter();
                        ctx.broadcast(Frame::plain(Packet::Rreq(fwd)), jitter);
                    }
                }
            }
            Packet::Rrep(rrep) => {
                match saodv_check_rrep(&self.mat, rrep) {
                    SseVerdict::Ok => {}
                    SseVerdict::BadHca => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::BadHca);
                        return;
                    }
                    _ => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::BadSignature);
                        return;
                    }
                }
                if rrep.dest != ctx.me && adversary::drops_rrep_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                match self.core.handle_rrep(rrep, from, ctx.now) {
                    RrepOutcome::Consumed => self.flush_buffered(ctx, rrep.src),
                    RrepOutcome::Forward { next_hop, mut rrep } => {
                        let sse = rrep.sse.as_mut().unwrap();
                        sse.hca = hca_advance(self.mat.hasher, sse.hca);
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
                // Every transmitter signs the report it sends; stored
                // sequence numbers are never updated from it.
                let valid = rerr
                    .signature
                    .is_some_and(|sig| self.mat.verify_sig(from, &rerr_signed_bytes(rerr), sig));
                if !valid {
                    ctx.drop_pkt(&frame.packet, None, DropCause::BadSignature);
                    return;
                }
                if adversary::drops_all_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                let affected = self.core.handle_rerr(rerr, from, ctx.now, false);
                if !affected.is_empty() {
                    let mut fwd = Rerr {
                        unreachable: affected,
                        signature: None,
                    };
                    fwd.signature = Some(self.mat.sign(ctx.me, &rerr_signed_bytes(&fwd)));
                    ctx.broadcast(Frame::plain(Packet::Rerr(fwd)), 0);
                }
            }
            Packet::Data(data) => {
                if data.dest != ctx.me && adversary::drops_transit_data(ctx.profile, ctx.rng) {
                    ctx.drop_pkt(&frame.packet, Some(data.dest), DropCause::Adversary);
                    return;
                }
                match self.core.route_data(data, ctx.now) {
                    DataOutcome::DeliverApp => ctx.deliver_app(data.flow, data.origin_us),
                    DataOutcome::Forward { next_hop } => {
                        let mut fwd = *data;
                        fwd.link_seq = self.core.next_link_seq(next_hop);
                        ctx.unicast(next_hop, Frame::plain(Packet::Data(fwd)), 0);
                    }
                    DataOutcome::NoRoute { mut rerr } => {
                        ctx.drop_pkt(&frame.packet, Some(data.dest), DropCause::NoRoute);
                        rerr.signature = Some(self.mat.sign(ctx.me, &rerr_signed_bytes(&rerr)));
                        ctx.broadcast(Frame::plain(Packet::Rerr(rerr)), 0);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: &ProtoTimer) {
        if let ProtoTimer::DiscoveryRetry { dest, attempt } = timer {
            if self.core.lookup_valid(*dest, ctx.now).is_some() {
                self.core.clear_pending(*dest);
                self.flush_buffered(ctx, *dest);
                return;
            }
            if *attempt + 1 <= ctx.params.max_discovery_retries {
                self.start_discovery(ctx, *dest, attempt + 1);
            } else {
                self.core.clear_pending(*dest);
                for data in self.core.drain_buffered(*dest) {
                    ctx.drop_pkt(&Packet::Data(data), Some(*dest), DropCause::NoRoute);
                }
            }
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
        self.send_or_buffer(ctx, data);
    }

    fn on_discover(&mut self, ctx: &mut Ctx, dest: NodeId) {
        self.start_discovery(ctx, dest, 0);
    }

    fn on_adversary_tick(&mut self, ctx: &mut Ctx) {
        let mat = self.mat.clone();
        adversary::run_tick(
            &mut self.core,
            ctx,
            &mut self.flood_dest_rotor,
            |ctx, p| match p {
                Packet::Rreq(rreq) => {
                    Frame::plain(Packet::Rreq(saodv_extend_rreq(&mat, ctx.me, ctx.rng, rreq)))
                }
                Packet::Rerr(mut rerr) => {
                    rerr.signature = Some(mat.sign(ctx.me, &rerr_signed_bytes(&rerr)));
                    Frame::plain(Packet::Rerr(rerr))
                }
                other => Frame::plain(other),
            },
        );
    }

    fn route_view(&self) -> Vec<RouteView> {
        self.core.route_view()
    }
}

// ---------------------------------------------------------------------------
// Hop-by-hop MAC stack with hello key exchange.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacVerdict {
    Ok,
    UnknownSenderKey,
    TagMismatch,
}

pub struct SeaodvNode {
    core: AodvCore,
    mat: Arc<CryptoMaterials>,
    /// Pairwise transient keys with each hello-confirmed neighbour.
    ptk: BTreeMap<NodeId, u64>,
    /// Group transient keys received from hello replies.
    gtk_of: BTreeMap<NodeId, u64>,
    /// Re-hello cooldown after unknown-sender rejections.
    last_hello_us: Option<u64>,
    flood_dest_rotor: u16,
    /// Set by the scenario for outsider adversaries that never join the
    /// key exchange.
    skip_hello: bool,
}

pub fn make_seaodv_stack(mat: &StackMaterials) -> Box<dyn NodeBehavior> {
    let skip_hello = false;
    Box::new(SeaodvNode {
        core: AodvCore::new(
            mat.me,
            mat.params.route_lifetime_us,
            mat.params.buffer_cap,
        ),
        mat: mat.crypto.clone(),
        ptk: BTreeMap::new(),
        gtk_of: BTreeMap::new(),
        last_hello_us: None,
        flood_dest_rotor: 0,
        skip_hello,
    })
}

impl SeaodvNode {
    fn own_gtk(&self) -> u64 {
        self.mat.gtk[&self.core.me]
    }

    fn derive_ptk(&self, peer: NodeId) -> Option<u64> {
        let public = self.mat.blom_public.as_ref()?;
        let row = self.mat.blom_rows.get(&self.core.me)?;
        // Column ids are 1-based.
        let col = public.column(peer.idx() + 1);
        blom_pairwise_key(row, &col, public.q).ok()
    }

    fn gtk_wrap_context(a: NodeId, b: NodeId) -> Vec<u8> {
        let mut ctx = b"gtk-wrap".to_vec();
        ctx.extend_from_slice(&a.0.to_le_bytes());
        ctx.extend_from_slice(&b.0.to_le_bytes());
        ctx
    }

    fn protect_broadcast(&self, packet: Packet) -> Frame {
        let tag = mac_compute(self.own_gtk(), &packet.to_bytes());
        Frame::tagged(packet, tag)
    }

    fn protect_unicast(&self, next_hop: NodeId, packet: Packet) -> Option<Frame> {
        let ptk = self.ptk.get(&next_hop)?;
        let tag = mac_compute(*ptk, &packet.to_bytes());
        Some(Frame::tagged(packet, tag))
    }

    fn verify_broadcast(&self, frame: &Frame, from: NodeId) -> MacVerdict {
        let Some(gtk) = self.gtk_of.get(&from) else {
            return MacVerdict::UnknownSenderKey;
        };
        match frame.tag {
            Some(tag) if mac_verify(*gtk, &frame.packet.to_bytes(), tag) => MacVerdict::Ok,
            _ => MacVerdict::TagMismatch,
        }
    }

    fn verify_unicast(&self, frame: &Frame, from: NodeId) -> MacVerdict {
        let Some(ptk) = self.ptk.get(&from) else {
            return MacVerdict::UnknownSenderKey;
        };
        match frame.tag {
            Some(tag) if mac_verify(*ptk, &frame.packet.to_bytes(), tag) => MacVerdict::Ok,
            _ => MacVerdict::TagMismatch,
        }
    }

    fn broadcast_hello(&mut self, ctx: &mut Ctx) {
        if self.skip_hello {
            return;
        }
        self.last_hello_us = Some(ctx.now.0);
        let hello = Packet::HelloRreq(HelloRreq { node: ctx.me });
        let jitter = ctx.forward_jitter();
        ctx.broadcast(Frame::plain(hello), jitter);
    }

    /// Unknown-sender rejections trigger an on-demand hello, rate limited.
    fn maybe_rehello(&mut self, ctx: &mut Ctx) {
        let cooldown = 500_000;
        if self
            .last_hello_us
            .is_none_or(|t| ctx.now.0.saturating_sub(t) >= cooldown)
        {
            self.broadcast_hello(ctx);
        }
    }

    fn reject(&mut self, ctx: &mut Ctx, packet: &Packet, verdict: MacVerdict) {
        match verdict {
            MacVerdict::UnknownSenderKey => {
                ctx.drop_pkt(packet, None, DropCause::UnknownSenderKey);
                self.maybe_rehello(ctx);
            }
            MacVerdict::TagMismatch => {
                ctx.drop_pkt(packet, None, DropCause::TagMismatch);
            }
            MacVerdict::Ok => unreachable!(),
        }
    }

    fn flush_buffered(&mut self, ctx: &mut Ctx, dest: NodeId) {
        if self.core.lookup_valid(dest, ctx.now).is_none() {
            return;
        }
        for data in self.core.drain_buffered(dest) {
            self.send_or_buffer(ctx, data);
        }
    }

    fn send_or_buffer(&mut self, ctx: &mut Ctx, data: DataPkt) {
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
                self.start_discovery(ctx, dest, 0);
            }
        }
    }

    fn start_discovery(&mut self, ctx: &mut Ctx, dest: NodeId, attempt: u32) {
        if let Some(rreq) = self.core.originate_discovery(
            dest,
            ctx.now,
            ctx.params.ttl,
            ctx.params.min_discovery_interval_us,
        ) {
            let frame = self.protect_broadcast(Packet::Rreq(rreq));
            ctx.broadcast(frame, 0);
            ctx.timer(
                ctx.now + ctx.params.discovery_timeout_us,
                ProtoTimer::DiscoveryRetry { dest, attempt },
            );
        } else if self.core.lookup_valid(dest, ctx.now).is_none() && attempt == 0 {
            ctx.timer(
                ctx.now + ctx.params.min_discovery_interval_us,
                ProtoTimer::DiscoveryRetry { dest, attempt },
            );
        }
    }
}

impl NodeBehavior for SeaodvNode {
    fn on_start(&mut self, ctx: &mut Ctx) {
        if let Some(profile) = ctx.profile {
            // Fabrication outsiders stay out of the key exchange, so their
            // forged reports die as unknown-sender rejections.
            if matches!(profile, crate::adversary::AttackProfile::RerrFabricate { .. }) {
                self.skip_hello = true;
            }
        }
        self.broadcast_hello(ctx);
    }

    fn on_frame(&mut self, ctx: &mut Ctx, frame: &Frame, from: NodeId, addressed: bool) {
        if !addressed {
            return;
        }
        match &frame.packet {
            Packet::HelloRreq(hello) => {
                if self.skip_hello {
                    return;
                }
                // Reply with our group key wrapped under the pairwise key.
                let Some(ptk) = self.derive_ptk(hello.node) else {
                    return;
                };
                self.ptk.insert(hello.node, ptk);
                let context = Self::gtk_wrap_context(ctx.me, hello.node);
                let wrapped = wrap_key(ptk, &context, self.own_gtk());
                let mut reply = HelloRrep {
                    node: ctx.me,
                    wrapped_gtk: wrapped,
                    tag: 0,
                };
                let body = Packet::HelloRrep(reply).to_bytes();
                reply.tag = mac_compute(ptk, &body[..body.len() - 8]);
                let jitter = ctx.forward_jitter();
                ctx.unicast(from, Frame::plain(Packet::HelloRrep(reply)), jitter);
            }
            Packet::HelloRrep(hello) => {
                if self.skip_hello {
                    return;
                }
                let Some(ptk) = self.derive_ptk(hello.node) else {
                    return;
                };
                let body = Packet::HelloRrep(*hello).to_bytes();
                if !mac_verify(ptk, &body[..body.len() - 8], hello.tag) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::TagMismatch);
                    return;
                }
                let context = Self::gtk_wrap_context(hello.node, ctx.me);
                let gtk = unwrap_key(ptk, &context, hello.wrapped_gtk);
                self.ptk.insert(hello.node, ptk);
                self.gtk_of.insert(hello.node, gtk);
            }
            Packet::Rreq(rreq) => {
                match self.verify_broadcast(frame, from) {
                    MacVerdict::Ok => {}
                    v => {
                        self.reject(ctx, &frame.packet, v);
                        return;
                    }
                }
                if let Some(forged) = adversary::blackhole_reply(ctx.profile, ctx.me, rreq) {
                    if self.core.handle_rreq(rreq, from, ctx.now, false) != RreqOutcome::Duplicate
                    {
                        if let Some(f) = self.protect_unicast(from, Packet::Rrep(forged)) {
                            ctx.unicast(from, f, 0);
                        }
                    }
                    return;
                }
                if rreq.dest != ctx.me && adversary::drops_rreq_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                match self.core.handle_rreq(rreq, from, ctx.now, true) {
                    RreqOutcome::Duplicate => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Duplicate)
                    }
                    RreqOutcome::TtlExhausted => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::Ttl)
                    }
                    RreqOutcome::Reply(rrep) => {
                        match self.protect_unicast(from, Packet::Rrep(rrep)) {
                            Some(f) => ctx.unicast(from, f, 0),
                            None => {
                                ctx.drop_pkt(&frame.packet, Some(from), DropCause::UnknownSenderKey);
                                self.maybe_rehello(ctx);
                            }
                        }
                    }
                    RreqOutcome::Forward(mut fwd) => {
                        adversary::mutate_forwarded_rreq(ctx.profile, &mut fwd);
                        let jitter = ctx.forward_jitter();
                        let frame = self.protect_broadcast(Packet::Rreq(fwd));
                        ctx.broadcast(frame, jitter);
                    }
                }
            }
            Packet::Rrep(rrep) => {
                match self.verify_unicast(frame, from) {
                    MacVerdict::Ok => {}
                    v => {
                        self.reject(ctx, &frame.packet, v);
                        return;
                    }
                }
                if rrep.dest != ctx.me && adversary::drops_rrep_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                match self.core.handle_rrep(rrep, from, ctx.now) {
                    RrepOutcome::Consumed => self.flush_buffered(ctx, rrep.src),
                    RrepOutcome::Forward { next_hop, mut rrep } => {
                        adversary::mutate_forwarded_rrep(ctx.profile, &mut rrep);
                        match self.protect_unicast(next_hop, Packet::Rrep(rrep.clone())) {
                            Some(f) => ctx.unicast(next_hop, f, 0),
                            None => {
                                // No pairwise key with the chosen next hop:
                                // the reply is not sent.
                                ctx.drop_pkt(
                                    &Packet::Rrep(rrep),
                                    Some(next_hop),
                                    DropCause::UnknownSenderKey,
                                );
                                self.maybe_rehello(ctx);
                            }
                        }
                    }
                    RrepOutcome::MissingReverseRoute => {
                        ctx.drop_pkt(&frame.packet, None, DropCause::NoRoute);
                    }
                    RrepOutcome::Stale => {}
                }
            }
            Packet::Rerr(rerr) => {
                // Reports are accepted from hello-confirmed neighbours only,
                // and stored sequence numbers never change from them.
                match self.verify_broadcast(frame, from) {
                    MacVerdict::Ok => {}
                    v => {
                        self.reject(ctx, &frame.packet, v);
                        return;
                    }
                }
                if adversary::drops_all_forwarding(ctx.profile) {
                    ctx.drop_pkt(&frame.packet, None, DropCause::Adversary);
                    return;
                }
                let affected = self.core.handle_rerr(rerr, from, ctx.now, false);
                if !affected.is_empty() {
                    let fwd = Rerr {
                        unreachable: affected,
                        signature: None,
                    };
                    let frame = self.protect_broadcast(Packet::Rerr(fwd));
                    ctx.broadcast(frame, 0);
                }
            }
            Packet::Data(data) => {
                if data.dest != ctx.me && adversary::drops_transit_data(ctx.profile, ctx.rng) {
                    ctx.drop_pkt(&frame.packet, Some(data.dest), DropCause::Adversary);
                    return;
                }
                match self.core.route_data(data, ctx.now) {
                    DataOutcome::DeliverApp => ctx.deliver_app(data.flow, data.origin_us),
                    DataOutcome::Forward { next_hop } => {
                        let mut fwd = *data;
                        fwd.link_seq = self.core.next_link_seq(next_hop);
                        ctx.unicast(next_hop, Frame::plain(Packet::Data(fwd)), 0);
                    }
                    DataOutcome::NoRoute { rerr } => {
                        ctx.drop_pkt(&frame.packet, Some(data.dest), DropCause::NoRoute);
                        let frame = self.protect_broadcast(Packet::Rerr(rerr));
                        ctx.broadcast(frame, 0);
                    }
                }
            }
            Packet::Probe(_) => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx, timer: &ProtoTimer) {
        if let ProtoTimer::DiscoveryRetry { dest, attempt } = timer {
            if self.core.lookup_valid(*dest, ctx.now).is_some() {
                self.core.clear_pending(*dest);
                self.flush_buffered(ctx, *dest);
                return;
            }
            if *attempt + 1 <= ctx.params.max_discovery_retries {
                self.start_discovery(ctx, *dest, attempt + 1);
            } else {
                self.core.clear_pending(*dest);
                for data in self.core.drain_buffered(*dest) {
                    ctx.drop_pkt(&Packet::Data(data), Some(*dest), DropCause::NoRoute);
                }
            }
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
        self.send_or_buffer(ctx, data);
    }

    fn on_discover(&mut self, ctx: &mut Ctx, dest: NodeId) {
        self.start_discovery(ctx, dest, 0);
    }

    fn on_adversary_tick(&mut self, ctx: &mut Ctx) {
        // Insider attackers tag their emissions with their own keys;
        // outsiders (skip_hello) send untagged forgeries.
        let own_gtk = if self.skip_hello {
            None
        } else {
            Some(self.own_gtk())
        };
        adversary::run_tick(
            &mut self.core,
            ctx,
            &mut self.flood_dest_rotor,
            |_, p| match own_gtk {
                Some(gtk) => {
                    let tag = mac_compute(gtk, &p.to_bytes());
                    Frame::tagged(p, tag)
                }
                None => Frame::plain(p),
            },
        );
    }

    fn route_view(&self) -> Vec<RouteView> {
        self.core.route_view()
    }
}

/// Pairwise-key table view for tests.
impl SeaodvNode {
    pub fn ptk_with(&self, n: NodeId) -> Option<u64> {
        self.ptk.get(&n).copied()
    }

    pub fn knows_gtk_of(&self, n: NodeId) -> bool {
        self.gtk_of.contains_key(&n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::derive_seed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn materials() -> CryptoMaterials {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (public, rows) = crate::crypto::blom_setup(&mut rng, 6, 2, 1009, 11).unwrap();
        let mut sig_keys = BTreeMap::new();
        let mut gtk = BTreeMap::new();
        let mut blom_rows = BTreeMap::new();
        for i in 0..6u16 {
            sig_keys.insert(NodeId(i), derive_seed(42, 1, i as u64, 0));
            gtk.insert(NodeId(i), derive_seed(42, 2, i as u64, 0));
            blom_rows.insert(NodeId(i), rows[i as usize].clone());
        }
        CryptoMaterials {
            hasher: Hasher::default(),
            max_hops: 10,
            sig_keys,
            blom_public: Some(public),
            blom_rows,
            gtk,
        }
    }

    fn fresh_rreq() -> Rreq {
        Rreq {
            src: NodeId(0),
            src_seq: 4,
            bcast_id: 9,
            dest: NodeId(5),
            dest_seq_known: 2,
            hop_count: 0,
            ttl: 8,
            next_to_source: NodeId(0),
            duplicate_flag: false,
            sse: None,
        }
    }

    #[test]
    fn extension_is_deterministic_and_verifies() {
        let mat = materials();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = saodv_extend_rreq(&mat, NodeId(0), &mut rng, fresh_rreq());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = saodv_extend_rreq(&mat, NodeId(0), &mut rng, fresh_rreq());
        assert_eq!(a.sse.unwrap().signature, b.sse.unwrap().signature);
        assert_eq!(saodv_check_rreq(&mat, &a), SseVerdict::Ok);
        assert_eq!(a.hop_count, 0);
    }

    #[test]
    fn honest_multi_hop_walk_verifies_every_hop() {
        let mat = materials();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rreq = saodv_extend_rreq(&mat, NodeId(0), &mut rng, fresh_rreq());
        for _ in 0..4 {
            rreq.hop_count += 1;
            let sse = rreq.sse.as_mut().unwrap();
            sse.hca = hca_advance(mat.hasher, sse.hca);
            assert_eq!(saodv_check_rreq(&mat, &rreq), SseVerdict::Ok);
        }
    }

    #[test]
    fn hop_count_rollback_is_bad_hca() {
        let mat = materials();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rreq = saodv_extend_rreq(&mat, NodeId(0), &mut rng, fresh_rreq());
        for _ in 0..3 {
            rreq.hop_count += 1;
            let sse = rreq.sse.as_mut().unwrap();
            sse.hca = hca_advance(mat.hasher, sse.hca);
        }
        // Claiming fewer hops with the same authenticator fails.
        for claim in 0..3 {
            let mut forged = rreq.clone();
            forged.hop_count = claim;
            assert_eq!(saodv_check_rreq(&mat, &forged), SseVerdict::BadHca);
        }
    }

    #[test]
    fn immutable_field_rewrite_is_bad_signature() {
        let mat = materials();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rreq = saodv_extend_rreq(&mat, NodeId(0), &mut rng, fresh_rreq());
        let mut forged = rreq.clone();
        forged.dest = NodeId(3);
        assert_eq!(saodv_check_rreq(&mat, &forged), SseVerdict::BadSignature);
        let mut forged = rreq;
        forged.dest_seq_known += 7;
        assert_eq!(saodv_check_rreq(&mat, &forged), SseVerdict::BadSignature);
    }

    #[test]
    fn rrep_secured_same_way() {
        let mat = materials();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rrep = Rrep {
            src: NodeId(5),
            dest: NodeId(0),
            dest_seq: 7,
            hop_count: 0,
            lifetime_us: 1_000_000,
            next_to_destination: NodeId(5),
            recovery: false,
            probe_report_us: None,
            flow: None,
            sse: None,
        };
        let mut secured = saodv_extend_rrep(&mat, NodeId(5), &mut rng, rrep);
        assert_eq!(saodv_check_rrep(&mat, &secured), SseVerdict::Ok);
        secured.hop_count += 1;
        let sse = secured.sse.as_mut().unwrap();
        sse.hca = hca_advance(mat.hasher, sse.hca);
        assert_eq!(saodv_check_rrep(&mat, &secured), SseVerdict::Ok);
        let mut forged = secured.clone();
        forged.dest_seq += 100;
        assert_eq!(saodv_check_rrep(&mat, &forged), SseVerdict::BadSignature);
        let mut forged = secured;
        forged.hop_count = 0;
        assert_eq!(saodv_check_rrep(&mat, &forged), SseVerdict::BadHca);
    }
}
