//! Node-behaviour overrides implementing the routing-layer attack
//! catalogue. Each attack replaces exactly one honest decision point; every
//! other protocol action of the node stays bit-identical to an honest node.

use crate::aodv::{AodvCore, Rerr, Rreq, Rrep};
use crate::engine::NodeId;
use crate::packet::{Frame, Packet};
use crate::protocol::{Action, Ctx, TimerKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_inflation() -> u32 {
    1
}

fn default_rerr_interval() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfishPolicy {
    DropRreq,
    DropRrep,
    DropData,
    DropAllForwarding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackProfile {
    /// Answers every discovery positively with a forged fresh route, then
    /// drops all transit data.
    Blackhole {
        #[serde(default = "default_inflation")]
        seq_inflation: u32,
    },
    /// Drops transit data with the given probability, honest otherwise.
    Grayhole { drop_prob: f64 },
    /// Declines some forwarding duty while using the network for own
    /// traffic.
    Selfish { policy: SelfishPolicy },
    /// Forwards route requests without the mandated jitter to win
    /// duplicate-suppression races.
    Rushing,
    /// One end of a colluding pair re-emitting control traffic over an
    /// out-of-band tunnel.
    Wormhole {
        peer: NodeId,
        tunnel_delay_us: u64,
        #[serde(default)]
        tunnel_data: bool,
        #[serde(default)]
        drop_prob: f64,
    },
    /// Originates discovery floods at the configured rate.
    RreqFlood { rate_per_s: f64 },
    /// Rewrites the hop count of forwarded control packets to zero.
    RedirectHopZero,
    /// Inflates the destination sequence number of forwarded replies.
    RedirectSeqInflate { delta: u32 },
    /// Periodically fabricates an unreachable-destination report with an
    /// outsized sequence number.
    RerrFabricate {
        target: NodeId,
        dsn: u32,
        #[serde(default = "default_rerr_interval")]
        interval_us: u64,
    },
}

impl AttackProfile {
    /// True for profiles the detection pipeline is meant to catch: nodes
    /// that withhold forwarding effort.
    pub fn is_forwarding_misbehavior(&self) -> bool {
        matches!(
            self,
            AttackProfile::Blackhole { .. }
                | AttackProfile::Grayhole { .. }
                | AttackProfile::Selfish { .. }
        )
    }
}

pub fn drops_transit_data(profile: Option<&AttackProfile>, rng: &mut ChaCha8Rng) -> bool {
    match profile {
        Some(AttackProfile::Blackhole { .. }) => true,
        Some(AttackProfile::Grayhole { drop_prob }) => {
            if *drop_prob >= 1.0 {
                true
            } else if *drop_prob <= 0.0 {
                false
            } else {
                rng.gen_bool(*drop_prob)
            }
        }
        Some(AttackProfile::Selfish { policy }) => matches!(
            policy,
            SelfishPolicy::DropData | SelfishPolicy::DropAllForwarding
        ),
        _ => false,
    }
}

pub fn drops_rreq_forwarding(profile: Option<&AttackProfile>) -> bool {
    matches!(
        profile,
        Some(AttackProfile::Selfish {
            policy: SelfishPolicy::DropRreq | SelfishPolicy::DropAllForwarding
        })
    )
}

pub fn drops_rrep_forwarding(profile: Option<&AttackProfile>) -> bool {
    matches!(
        profile,
        Some(AttackProfile::Selfish {
            policy: SelfishPolicy::DropRrep | SelfishPolicy::DropAllForwarding
        })
    )
}

pub fn drops_all_forwarding(profile: Option<&AttackProfile>) -> bool {
    matches!(
        profile,
        Some(AttackProfile::Selfish {
            policy: SelfishPolicy::DropAllForwarding
        })
    )
}

/// The blackhole response to a discovery it is not the target of: an
/// immediate reply one hop away with a sequence number fresher than asked.
pub fn blackhole_reply(
    profile: Option<&AttackProfile>,
    me: NodeId,
    rreq: &Rreq,
) -> Option<Rrep> {
    let Some(AttackProfile::Blackhole { seq_inflation }) = profile else {
        return None;
    };
    if rreq.dest == me {
        return None;
    }
    Some(Rrep {
        src: rreq.dest,
        dest: rreq.src,
        dest_seq: rreq.dest_seq_known.saturating_add(*seq_inflation),
        hop_count: 1,
        lifetime_us: 10_000_000,
        next_to_destination: me,
        recovery: false,
        probe_report_us: None,
        flow: None,
        sse: None,
    })
}

pub fn mutate_forwarded_rreq(profile: Option<&AttackProfile>, rreq: &mut Rreq) {
    if matches!(profile, Some(AttackProfile::RedirectHopZero)) {
        rreq.hop_count = 0;
    }
}

pub fn mutate_forwarded_rrep(profile: Option<&AttackProfile>, rrep: &mut Rrep) {
    match profile {
        Some(AttackProfile::RedirectHopZero) => rrep.hop_count = 0,
        Some(AttackProfile::RedirectSeqInflate { delta }) => {
            rrep.dest_seq = rrep.dest_seq.saturating_add(*delta);
        }
        _ => {}
    }
}

/// First ticker deadline for profiles that emit traffic on a schedule.
pub fn first_tick_us(profile: &AttackProfile) -> Option<u64> {
    match profile {
        AttackProfile::RreqFlood { .. } => Some(0),
        AttackProfile::RerrFabricate { interval_us, .. } => Some(*interval_us),
        _ => None,
    }
}

/// Dedup key for wormhole tunnelling; `None` means the packet class is not
/// tunnelled under the current configuration.
pub fn tunnel_key(packet: &Packet, tunnel_data: bool) -> Option<(u8, u64)> {
    match packet {
        Packet::Rreq(r) => Some((1, ((r.src.0 as u64) << 32) | r.bcast_id as u64)),
        Packet::Rrep(r) => Some((
            2,
            crate::packet::flood_key(r.dest, r.src) ^ ((r.dest_seq as u64) << 32),
        )),
        Packet::Data(d) if tunnel_data => Some((4, ((d.flow as u64) << 32) | d.seq as u64)),
        Packet::Probe(p) if tunnel_data => Some((7, ((p.flow as u64) << 32) | p.seq as u64)),
        _ => None,
    }
}

/// Scheduled attack emissions (flood, fabricated reports). `protect` lets
/// each stack apply its own framing to the forged packet.
pub fn run_tick<F>(core: &mut AodvCore, ctx: &mut Ctx, rotor: &mut u16, protect: F)
where
    F: Fn(&mut Ctx, Packet) -> Frame,
{
    match ctx.profile {
        Some(AttackProfile::RreqFlood { rate_per_s }) => {
            let n = ctx.topo.len() as u16;
            if n < 2 {
                return;
            }
            *rotor = (*rotor + 1) % n;
            if NodeId(*rotor) == ctx.me {
                *rotor = (*rotor + 1) % n;
            }
            let rreq = core.forge_rreq(NodeId(*rotor), ctx.params.ttl, ctx.now);
            let frame = protect(ctx, Packet::Rreq(rreq));
            ctx.broadcast(frame, 0);
            let gap = (1e6 / rate_per_s.max(0.001)).max(1.0) as u64;
            ctx.actions.push(Action::Timer {
                at: ctx.now + gap,
                kind: TimerKind::AdversaryTick,
            });
        }
        Some(AttackProfile::RerrFabricate {
            target,
            dsn,
            interval_us,
        }) => {
            let rerr = Rerr {
                unreachable: vec![(*target, *dsn)],
                signature: None,
            };
            let frame = protect(ctx, Packet::Rerr(rerr));
            ctx.broadcast(frame, 0);
            ctx.actions.push(Action::Timer {
                at: ctx.now + *interval_us,
                kind: TimerKind::AdversaryTick,
            });
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grayhole_limit_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let black = AttackProfile::Grayhole { drop_prob: 1.0 };
        let honest = AttackProfile::Grayhole { drop_prob: 0.0 };
        for _ in 0..100 {
            assert!(drops_transit_data(Some(&black), &mut rng));
            assert!(!drops_transit_data(Some(&honest), &mut rng));
        }
    }

    #[test]
    fn grayhole_drop_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttackProfile::Grayhole { drop_prob: 0.3 };
        let trials = 10_000;
        let drops = (0..trials)
            .filter(|_| drops_transit_data(Some(&p), &mut rng))
            .count();
        let frac = drops as f64 / trials as f64;
        assert!((frac - 0.3).abs() < 0.02, "drop fraction {frac}");
    }

    #[test]
    fn blackhole_reply_inflates_sequence() {
        let rreq = Rreq {
            src: NodeId(0),
            src_seq: 1,
            bcast_id: 0,
            dest: NodeId(9),
            dest_seq_known: 5,
            hop_count: 0,
            ttl: 8,
            next_to_source: NodeId(0),
            duplicate_flag: false,
            sse: None,
        };
        let p = AttackProfile::Blackhole { seq_inflation: 1 };
        let rrep = blackhole_reply(Some(&p), NodeId(3), &rreq).unwrap();
        assert_eq!(rrep.dest_seq, 6);
        assert_eq!(rrep.hop_count, 1);
        assert_eq!(rrep.src, NodeId(9));
        // Its own discoveries are answered honestly.
        let mut own = rreq.clone();
        own.dest = NodeId(3);
        assert!(blackhole_reply(Some(&p), NodeId(3), &own).is_none());
    }

    #[test]
    fn redirect_mutations() {
        let mut rrep = Rrep {
            src: NodeId(9),
            dest: NodeId(0),
            dest_seq: 7,
            hop_count: 4,
            lifetime_us: 1,
            next_to_destination: NodeId(9),
            recovery: false,
            probe_report_us: None,
            flow: None,
            sse: None,
        };
        mutate_forwarded_rrep(Some(&AttackProfile::RedirectHopZero), &mut rrep);
        assert_eq!(rrep.hop_count, 0);
        mutate_forwarded_rrep(
            Some(&AttackProfile::RedirectSeqInflate { delta: 100 }),
            &mut rrep,
        );
        assert_eq!(rrep.dest_seq, 107);
    }

    #[test]
    fn selfish_policies_scope_their_drops() {
        let all = AttackProfile::Selfish {
            policy: SelfishPolicy::DropAllForwarding,
        };
        let rreq_only = AttackProfile::Selfish {
            policy: SelfishPolicy::DropRreq,
        };
        assert!(drops_rreq_forwarding(Some(&all)));
        assert!(drops_rrep_forwarding(Some(&all)));
        assert!(drops_rreq_forwarding(Some(&rreq_only)));
        assert!(!drops_rrep_forwarding(Some(&rreq_only)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(drops_transit_data(Some(&all), &mut rng));
        assert!(!drops_transit_data(Some(&rreq_only), &mut rng));
    }

    #[test]
    fn profile_json_round_trip() {
        let profiles = vec![
            AttackProfile::Blackhole { seq_inflation: 2 },
            AttackProfile::Wormhole {
                peer: NodeId(9),
                tunnel_delay_us: 100,
                tunnel_data: true,
                drop_prob: 0.25,
            },
            AttackProfile::RerrFabricate {
                target: NodeId(3),
                dsn: 1 << 30,
                interval_us: 500_000,
            },
        ];
        for p in profiles {
            let json = serde_json::to_string(&p).unwrap();
            let back: AttackProfile = serde_json::from_str(&json).unwrap();
            assert_eq!(p, back);
        }
        // Defaults fill in.
        let p: AttackProfile = serde_json::from_str(r#"{"kind":"blackhole"}"#).unwrap();
        assert_eq!(p, AttackProfile::Blackhole { seq_inflation: 1 });
    }
}
