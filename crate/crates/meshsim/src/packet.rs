//! The wire unit of the simulator: a tagged union of control and data
//! packets with optional security extensions, plus the canonical fixed-width
//! serialization that MACs and signatures are computed over.

use crate::aodv::{Rerr, Rrep, Rreq};
use crate::engine::NodeId;
use crate::qos_route::ProbePkt;

/// Single-signature extension carried by secured RREQ/RREP packets:
/// a signature over the immutable fields plus the hash-chain anchor, and
/// the per-hop hop-count authenticator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteSse {
    pub max_hops: u32,
    pub anchor: u64,
    pub signature: u64,
    pub hca: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataPkt {
    pub flow: u32,
    pub src: NodeId,
    pub dest: NodeId,
    pub seq: u32,
    pub origin_us: u64,
    pub size: u32,
    /// Per-link sequence number stamped by each transmitter.
    pub link_seq: u32,
}

/// Enhanced hello request: announces the sender's public-column identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloRreq {
    pub node: NodeId,
}

/// Enhanced hello reply: carries the responder's group key wrapped under
/// the pairwise key, tagged for integrity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloRrep {
    pub node: NodeId,
    pub wrapped_gtk: u64,
    pub tag: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Packet {
    Rreq(Rreq),
    Rrep(Rrep),
    Rerr(Rerr),
    Data(DataPkt),
    HelloRreq(HelloRreq),
    HelloRrep(HelloRrep),
    Probe(ProbePkt),
}

/// Transmission mode of a frame on the radio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxMode {
    Broadcast,
    Unicast(NodeId),
}

/// A frame as put on the air: the packet plus an optional hop-by-hop MAC.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub packet: Packet,
    pub tag: Option<u64>,
}

impl Frame {
    pub fn plain(packet: Packet) -> Frame {
        Frame { packet, tag: None }
    }

    pub fn tagged(packet: Packet, tag: u64) -> Frame {
        Frame {
            packet,
            tag: Some(tag),
        }
    }
}

/// Flood identity used for duplicate suppression, monitoring, and the trace
/// flow column: source in the high half, destination in the low half.
pub fn flood_key(src: NodeId, dest: NodeId) -> u64 {
    ((src.0 as u64) << 16) | dest.0 as u64
}

pub fn flood_from_key(key: u64) -> (NodeId, NodeId) {
    (NodeId((key >> 16) as u16), NodeId((key & 0xffff) as u16))
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_opt_u64(out: &mut Vec<u8>, v: Option<u64>) {
    match v {
        Some(x) => {
            out.push(1);
            put_u64(out, x);
        }
        None => out.push(0),
    }
}

fn put_sse(out: &mut Vec<u8>, sse: &Option<RouteSse>) {
    match sse {
        Some(s) => {
            out.push(1);
            put_u32(out, s.max_hops);
            put_u64(out, s.anchor);
            put_u64(out, s.signature);
            put_u64(out, s.hca);
        }
        None => out.push(0),
    }
}

impl Packet {
    /// Canonical serialization: fixed field order, fixed-width little-endian
    /// integers. MACs cover these bytes exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        match self {
            Packet::Rreq(r) => {
                out.push(1);
                put_u16(&mut out, r.src.0);
                put_u32(&mut out, r.src_seq);
                put_u32(&mut out, r.bcast_id);
                put_u16(&mut out, r.dest.0);
                put_u32(&mut out, r.dest_seq_known);
                put_u32(&mut out, r.hop_count);
                put_u32(&mut out, r.ttl);
                put_u16(&mut out, r.next_to_source.0);
                out.push(r.duplicate_flag as u8);
                put_sse(&mut out, &r.sse);
            }
            Packet::Rrep(r) => {
                out.push(2);
                put_u16(&mut out, r.src.0);
                put_u16(&mut out, r.dest.0);
                put_u32(&mut out, r.dest_seq);
                put_u32(&mut out, r.hop_count);
                put_u64(&mut out, r.lifetime_us);
                put_u16(&mut out, r.next_to_destination.0);
                out.push(r.recovery as u8);
                put_opt_u64(&mut out, r.probe_report_us);
                match r.flow {
                    Some(f) => {
                        out.push(1);
                        put_u32(&mut out, f);
                    }
                    None => out.push(0),
                }
                put_sse(&mut out, &r.sse);
            }
            Packet::Rerr(r) => {
                out.push(3);
                put_u16(&mut out, r.unreachable.len() as u16);
                for &(dest, seq) in &r.unreachable {
                    put_u16(&mut out, dest.0);
                    put_u32(&mut out, seq);
                }
                put_opt_u64(&mut out, r.signature);
            }
            Packet::Data(d) => {
                out.push(4);
                put_u32(&mut out, d.flow);
                put_u16(&mut out, d.src.0);
                put_u16(&mut out, d.dest.0);
                put_u32(&mut out, d.seq);
                put_u64(&mut out, d.origin_us);
                put_u32(&mut out, d.size);
                put_u32(&mut out, d.link_seq);
            }
            Packet::HelloRreq(h) => {
                out.push(5);
                put_u16(&mut out, h.node.0);
            }
            Packet::HelloRrep(h) => {
                out.push(6);
                put_u16(&mut out, h.node.0);
                put_u64(&mut out, h.wrapped_gtk);
                put_u64(&mut out, h.tag);
            }
            Packet::Probe(p) => {
                out.push(7);
                put_u32(&mut out, p.flow);
                put_u16(&mut out, p.src.0);
                put_u16(&mut out, p.dest.0);
                put_u32(&mut out, p.seq);
                put_u64(&mut out, p.origin_us);
                put_u32(&mut out, p.size);
                put_u32(&mut out, p.hops);
                put_u64(&mut out, p.rate_mpps);
                put_u64(&mut out, p.t_max_us);
                put_u64(&mut out, p.b_min_bps.to_bits());
                put_u32(&mut out, p.link_seq);
            }
        }
        out
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            Packet::Rreq(_) => "RREQ",
            Packet::Rrep(_) => "RREP",
            Packet::Rerr(_) => "RERR",
            Packet::Data(_) => "DATA",
            Packet::HelloRreq(_) => "HELLO_RREQ",
            Packet::HelloRrep(_) => "HELLO_RREP",
            Packet::Probe(_) => "PROBE",
        }
    }

    /// Trace flow column: flood key for discovery control, flow id for
    /// data-class packets, -1 otherwise.
    pub fn flow_col(&self) -> i64 {
        match self {
            Packet::Rreq(r) => flood_key(r.src, r.dest) as i64,
            Packet::Rrep(r) => flood_key(r.dest, r.src) as i64,
            Packet::Data(d) => d.flow as i64,
            Packet::Probe(p) => p.flow as i64,
            _ => -1,
        }
    }

    /// Data-class frames go through the egress queue and the loss-flag path.
    pub fn is_data_class(&self) -> bool {
        matches!(self, Packet::Data(_) | Packet::Probe(_))
    }

    pub fn payload_size(&self) -> u32 {
        match self {
            Packet::Data(d) => d.size,
            Packet::Probe(p) => p.size,
            _ => 0,
        }
    }

    pub fn link_seq(&self) -> Option<u32> {
        match self {
            Packet::Data(d) => Some(d.link_seq),
            Packet::Probe(p) => Some(p.link_seq),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rreq() -> Rreq {
        Rreq {
            src: NodeId(1),
            src_seq: 7,
            bcast_id: 3,
            dest: NodeId(9),
            dest_seq_known: 5,
            hop_count: 2,
            ttl: 6,
            next_to_source: NodeId(1),
            duplicate_flag: false,
            sse: None,
        }
    }

    #[test]
    fn serialization_is_deterministic_and_field_sensitive() {
        let a = Packet::Rreq(sample_rreq());
        let b = Packet::Rreq(sample_rreq());
        assert_eq!(a.to_bytes(), b.to_bytes());
        let mut c = sample_rreq();
        c.hop_count += 1;
        assert_ne!(a.to_bytes(), Packet::Rreq(c).to_bytes());
        let mut d = sample_rreq();
        d.duplicate_flag = true;
        assert_ne!(a.to_bytes(), Packet::Rreq(d).to_bytes());
    }

    #[test]
    fn flood_key_round_trip() {
        let k = flood_key(NodeId(513), NodeId(42));
        assert_eq!(flood_from_key(k), (NodeId(513), NodeId(42)));
    }
}
