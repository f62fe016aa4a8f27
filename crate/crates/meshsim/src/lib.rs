//! Deterministic discrete-event simulation of wireless mesh routing security.
//!
//! The crate is organised around a small event-driven radio engine and a
//! family of interchangeable routing stacks selected by name at runtime:
//!
//! * [`aodv`] — baseline on-demand distance-vector routing,
//! * [`secure_protocols`] — signature/hash-chain and hop-by-hop MAC variants,
//! * [`qos_route`] — reliability-gated, probe-admitted QoS routing,
//!
//! plus [`adversary`] behaviour overrides, the [`detection`] monitors and
//! the [`stats`] classification kernel, all driven by [`harness`] scenarios.

pub mod adversary;
pub mod aodv;
pub mod crypto;
pub mod detection;
pub mod engine;
pub mod harness;
pub mod packet;
pub mod protocol;
pub mod qos_route;
pub mod secure_protocols;
pub mod stats;
