//! Scenario ingestion, experiment execution, metrics computation, and the
//! plumbing behind the command-line interface.

use crate::adversary::AttackProfile;
use crate::detection::{DetectionConfig, DetectionParams, ReplayRow};
use crate::engine::{
    derive_seed, DropCause, NodeId, NodeSlot, RecordKind, Sim, SimTime, Topology, TAG_KEYS,
};
use crate::protocol::{lookup, protocol_names, RunParams, StackMaterials};
use crate::qos_route::{FlowSpec, QosParams};
use crate::secure_protocols::CryptoMaterials;
use crate::stats::Label;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

// ---------------------------------------------------------------------------
// Configuration schema.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NodeSpec {
    pub id: u16,
    pub pos: (f64, f64),
    #[serde(default)]
    pub group: u16,
}

#[derive(Debug, Clone, Deserialize)]
pub struct LinkLossOverride {
    pub a: u16,
    pub b: u16,
    pub p: f64,
}

fn d_per_hop() -> u64 {
    1000
}
fn d_jitter() -> (u64, u64) {
    (2000, 5000)
}

#[derive(Debug, Clone, Deserialize)]
pub struct TopologyConfig {
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub positions: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub nodes: Option<Vec<NodeSpec>>,
    pub radio_range_m: f64,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default)]
    pub link_loss: Vec<LinkLossOverride>,
    #[serde(default = "d_per_hop")]
    pub per_hop_delay_us: u64,
    #[serde(default = "d_jitter")]
    pub jitter_us: (u64, u64),
    /// Mesh-group label per node; defaults to one group for everyone.
    #[serde(default)]
    pub groups: Option<Vec<u16>>,
}

fn d_route_lifetime() -> u64 {
    2_000_000
}
fn d_min_disc() -> u64 {
    30_000
}
fn d_retries() -> u32 {
    2
}
fn d_buffer() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
pub struct AodvConfig {
    #[serde(default)]
    pub ttl: Option<u32>,
    #[serde(default = "d_route_lifetime")]
    pub route_lifetime_us: u64,
    #[serde(default = "d_min_disc")]
    pub min_discovery_interval_us: u64,
    #[serde(default)]
    pub discovery_timeout_us: Option<u64>,
    #[serde(default = "d_retries")]
    pub max_discovery_retries: u32,
    #[serde(default = "d_buffer")]
    pub buffer_cap: usize,
}

impl Default for AodvConfig {
    fn default() -> Self {
        AodvConfig {
            ttl: None,
            route_lifetime_us: d_route_lifetime(),
            min_discovery_interval_us: d_min_disc(),
            discovery_timeout_us: None,
            max_discovery_retries: d_retries(),
            buffer_cap: d_buffer(),
        }
    }
}

fn d_q() -> u64 {
    1009
}
fn d_t() -> usize {
    4
}
fn d_g() -> u64 {
    11
}
fn d_rho() -> u8 {
    64
}

#[derive(Debug, Clone, Deserialize)]
pub struct CryptoConfig {
    #[serde(default = "d_q")]
    pub q: u64,
    #[serde(default = "d_t")]
    pub t: usize,
    #[serde(default = "d_g")]
    pub g: u64,
    #[serde(default = "d_rho")]
    pub rho_bits: u8,
    #[serde(default)]
    pub max_hops: Option<u32>,
}

impl Default for CryptoConfig {
    fn default() -> Self {
        CryptoConfig {
            q: d_q(),
            t: d_t(),
            g: d_g(),
            rho_bits: d_rho(),
            max_hops: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DiscoveryPairs {
    Named(String),
    Explicit(Vec<(u16, u16)>),
}

#[derive(Debug, Clone, Deserialize)]
pub struct DiscoveryTraffic {
    pub count: usize,
    pub interval_us: u64,
    pub pairs: DiscoveryPairs,
}

fn d_queue_cap() -> usize {
    2_000_000
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_us: u64,
    pub protocol: String,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub aodv: AodvConfig,
    #[serde(default)]
    pub crypto: CryptoConfig,
    #[serde(default)]
    pub qos: Option<QosParams>,
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub adversaries: BTreeMap<u16, AttackProfile>,
    #[serde(default)]
    pub detection: Option<DetectionParams>,
    #[serde(default)]
    pub discovery_traffic: Option<DiscoveryTraffic>,
    #[serde(default = "d_queue_cap")]
    pub event_queue_cap: usize,
    #[serde(default)]
    pub warmup_us: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Run(#[from] crate::engine::RunError),
}

/// A validated, buildable scenario.
pub struct ValidatedScenario {
    pub config: ScenarioConfig,
    pub topo: Topology,
    pub params: RunParams,
    pub warnings: Vec<String>,
    pub detection: Option<DetectionConfig>,
    pub positions_len: usize,
}

pub fn load_scenario(path: &std::path::Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn is_prime_u64(q: u64) -> bool {
    if q < 2 {
        return false;
    }
    if q % 2 == 0 {
        return q == 2;
    }
    let mut d = 3;
    while d * d <= q {
        if q % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

/// Full validation pass: every problem is reported, not just the first.
pub fn validate(config: ScenarioConfig) -> Result<ValidatedScenario, ScenarioError> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    if lookup(&config.protocol).is_none() {
        errors.push(format!(
            "unknown protocol '{}'; available: {}",
            config.protocol,
            protocol_names().join(", ")
        ));
    }

    let tc = &config.topology;
    let forms =
        tc.grid.is_some() as u8 + tc.positions.is_some() as u8 + tc.nodes.is_some() as u8;
    if forms != 1 {
        errors.push("topology requires exactly one of grid/positions/nodes".into());
    }
    let mut positions = Vec::new();
    let mut groups = Vec::new();
    if let Some(grid) = &tc.grid {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                positions.push((c as f64 * grid.spacing_m, r as f64 * grid.spacing_m));
                groups.push(0u16);
            }
        }
    } else if let Some(pos) = &tc.positions {
        positions = pos.clone();
        groups = vec![0; pos.len()];
    } else if let Some(nodes) = &tc.nodes {
        let max_id = nodes.iter().map(|n| n.id).max().unwrap_or(0) as usize;
        positions = vec![(f64::NAN, f64::NAN); max_id + 1];
        groups = vec![0; max_id + 1];
        let mut seen = std::collections::BTreeSet::new();
        for n in nodes {
            if !seen.insert(n.id) {
                errors.push(format!("duplicate node id {}", n.id));
            }
            positions[n.id as usize] = n.pos;
            groups[n.id as usize] = n.group;
        }
        if nodes.len() != positions.len() {
            errors.push("node ids must form a contiguous 0..n range".into());
        }
    }
    if let Some(g) = &tc.groups {
        if g.len() != positions.len() {
            errors.push(format!(
                "groups length {} does not match node count {}",
                g.len(),
                positions.len()
            ));
        } else {
            groups = g.clone();
        }
    }
    if positions.is_empty() {
        errors.push("topology has no nodes".into());
    }
    if !(0.0..=1.0).contains(&tc.loss_prob) {
        errors.push(format!("loss_prob {} outside [0,1]", tc.loss_prob));
    }
    let mut overrides = BTreeMap::new();
    for o in &tc.link_loss {
        if !(0.0..=1.0).contains(&o.p) {
            errors.push(format!("link loss override p {} outside [0,1]", o.p));
        }
        let key = if o.a <= o.b { (o.a, o.b) } else { (o.b, o.a) };
        overrides.insert(key, o.p);
    }

    let n = positions.len();
    for (id, f) in config.flows.iter().enumerate() {
        if f.src.idx() >= n || f.dest.idx() >= n {
            errors.push(format!("flow {} references missing nodes", f.id));
        }
        if config.flows.iter().skip(id + 1).any(|g| g.id == f.id) {
            errors.push(format!("duplicate flow id {}", f.id));
        }
        if f.rate_pps <= 0.0 {
            errors.push(format!("flow {} rate must be positive", f.id));
        }
    }

    for (&id, profile) in &config.adversaries {
        if id as usize >= n {
            errors.push(format!("adversary id {id} does not exist"));
        }
        if let AttackProfile::Wormhole { peer, .. } = profile {
            match config.adversaries.get(&peer.0) {
                Some(AttackProfile::Wormhole { peer: back, .. }) if back.0 == id => {}
                _ => errors.push(format!(
                    "wormhole on node {id} has no mutually-referencing peer {}",
                    peer.0
                )),
            }
        }
    }

    if !is_prime_u64(config.crypto.q) {
        errors.push(format!("non-prime modulus q = {}", config.crypto.q));
    } else if config.crypto.q <= n as u64 {
        errors.push(format!(
            "modulus q = {} too small for {} nodes",
            config.crypto.q, n
        ));
    }

    if let Some(det) = &config.detection {
        if det.invocation_period_us == 0 || det.d_factor == 0 {
            errors.push("detection period and window factor must be positive".into());
        }
        if !(0.0..1.0).contains(&det.alpha) || det.alpha <= 0.0 {
            errors.push(format!("detection alpha {} outside (0,1)", det.alpha));
        }
        if !(0.0..1.0).contains(&det.beta) || det.beta <= 0.0 {
            errors.push(format!("detection beta {} outside (0,1)", det.beta));
        }
        if det.k_max < 2 {
            errors.push("detection k_max must be at least 2".into());
        }
    }

    if let Some(dt) = &config.discovery_traffic {
        if let DiscoveryPairs::Explicit(pairs) = &dt.pairs {
            for &(s, d) in pairs {
                if s as usize >= n || d as usize >= n {
                    errors.push(format!("discovery pair ({s},{d}) references missing nodes"));
                }
            }
        }
    }

    let topo = match Topology::build(
        positions,
        tc.radio_range_m,
        groups,
        tc.loss_prob,
        overrides,
        tc.per_hop_delay_us,
    ) {
        Ok(t) => t,
        Err(e) => {
            errors.push(e.to_string());
            return Err(ScenarioError::Invalid(errors));
        }
    };

    for f in &config.flows {
        if f.src.idx() < n && f.dest.idx() < n && !topo.reachable(f.src, f.dest) {
            warnings.push(format!(
                "flow {}: destination {} unreachable from {}",
                f.id, f.dest, f.src
            ));
        }
    }

    if !errors.is_empty() {
        return Err(ScenarioError::Invalid(errors));
    }

    let diameter = topo.diameter_hops().max(1);
    let (jlo, jhi) = tc.jitter_us;
    let ttl = config.aodv.ttl.unwrap_or(diameter + 2);
    let discovery_timeout = config.aodv.discovery_timeout_us.unwrap_or(
        4 * diameter as u64 * (tc.per_hop_delay_us + jhi) + 50_000,
    );
    let mut qos = config.qos.clone().unwrap_or_default();
    qos.enabled = config.protocol == "qos";
    let params = RunParams {
        per_hop_delay_us: tc.per_hop_delay_us,
        jitter_us: (jlo, jhi),
        ttl,
        route_lifetime_us: config.aodv.route_lifetime_us,
        discovery_timeout_us: discovery_timeout,
        max_discovery_retries: config.aodv.max_discovery_retries,
        min_discovery_interval_us: config.aodv.min_discovery_interval_us,
        buffer_cap: config.aodv.buffer_cap,
        diameter_hops: diameter,
        qos,
    };
    let detection = config
        .detection
        .as_ref()
        .map(|d| DetectionConfig::resolve(d, &topo, jhi));
    let positions_len = topo.len();
    Ok(ValidatedScenario {
        config,
        topo,
        params,
        warnings,
        detection,
        positions_len,
    })
}

/// Run-wide key material derived from the seed: a signature stand-in key
/// and a group key per node, plus the pre-distributed pairwise-key rows.
pub fn build_crypto_materials(v: &ValidatedScenario, seed: u64) -> CryptoMaterials {
    let n = v.positions_len;
    let cc = &v.config.crypto;
    let hasher = crate::crypto::Hasher::new(cc.rho_bits);
    let mut sig_keys = BTreeMap::new();
    let mut gtk = BTreeMap::new();
    for i in 0..n as u16 {
        sig_keys.insert(NodeId(i), derive_seed(seed, TAG_KEYS, i as u64, 1));
        gtk.insert(NodeId(i), derive_seed(seed, TAG_KEYS, i as u64, 2));
    }
    let mut blom_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_KEYS, 0, 3));
    let (blom_public, blom_rows) =
        match crate::crypto::blom_setup(&mut blom_rng, n, cc.t.min(n.saturating_sub(1)).max(1), cc.q, cc.g) {
            Ok((public, rows)) => {
                let map = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| (NodeId(i as u16), r))
                    .collect();
                (Some(public), map)
            }
            Err(_) => (None, BTreeMap::new()),
        };
    CryptoMaterials {
        hasher,
        max_hops: cc.max_hops.unwrap_or(v.params.ttl.max(1)),
        sig_keys,
        blom_public,
        blom_rows,
        gtk,
    }
}

/// Instantiate the simulator for a validated scenario.
pub fn build_sim(v: &ValidatedScenario, seed: u64) -> Sim {
    let factory = lookup(&v.config.protocol).expect("validated");
    let crypto = Arc::new(build_crypto_materials(v, seed));
    let mut slots = Vec::with_capacity(v.positions_len);
    for i in 0..v.positions_len as u16 {
        let mat = StackMaterials {
            me: NodeId(i),
            params: v.params.clone(),
            crypto: crypto.clone(),
        };
        let mut slot = NodeSlot::new(factory(&mat));
        slot.profile = v.config.adversaries.get(&i).cloned();
        slots.push(slot);
    }
    let mut sim = Sim::new(
        v.topo.clone(),
        v.params.clone(),
        seed,
        v.config.event_queue_cap,
        slots,
        v.config.flows.clone(),
        v.detection.clone(),
    );
    if let Some(dt) = &v.config.discovery_traffic {
        let pairs: Vec<(NodeId, NodeId)> = match &dt.pairs {
            DiscoveryPairs::Explicit(pairs) => pairs
                .iter()
                .map(|&(s, d)| (NodeId(s), NodeId(d)))
                .collect(),
            DiscoveryPairs::Named(_) => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x64697363, 0, 0));
                let n = v.positions_len as u16;
                (0..dt.count)
                    .map(|_| {
                        use rand::Rng;
                        let s = rng.gen_range(0..n);
                        let mut d = rng.gen_range(0..n);
                        while d == s {
                            d = rng.gen_range(0..n);
                        }
                        (NodeId(s), NodeId(d))
                    })
                    .collect()
            }
        };
        sim.set_discovery_traffic(pairs, dt.interval_us);
    }
    sim
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FlowMetrics {
    pub id: u32,
    pub sent: u64,
    pub delivered: u64,
    pub pdr: Option<f64>,
    pub mean_delay_us: Option<f64>,
    pub p95_delay_us: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ControlOverhead {
    pub rreq_tx: u64,
    pub rrep_tx: u64,
    pub rerr_tx: u64,
    pub hello_tx: u64,
    pub probe_tx: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionMetrics {
    pub ground_truth: Vec<u16>,
    pub flagged: Vec<u16>,
    pub unlabeled_adversaries: Vec<u16>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub protocol: String,
    pub duration_us: u64,
    pub warmup_us: u64,
    pub flows: Vec<FlowMetrics>,
    pub control: ControlOverhead,
    pub drops: BTreeMap<String, u64>,
    pub detection: Option<DetectionMetrics>,
}

pub struct RunOutput {
    pub trace_csv: String,
    pub classification_csv: String,
    pub metrics: MetricsReport,
    pub warnings: Vec<String>,
}

pub fn classification_csv(rows: &[crate::engine::ClassRow]) -> String {
    let mut out = String::from("monitor,neighbor,label,C_r,P_k,k\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.monitor.0,
            r.neighbor.0,
            r.label.as_str(),
            r.c_r,
            r.p_k,
            r.k
        ));
    }
    out
}

/// Majority vote over each monitor's most recent definite label.
pub fn aggregate_detection(
    rows: &[crate::engine::ClassRow],
    ground_truth: &[NodeId],
) -> DetectionMetrics {
    let mut latest: BTreeMap<(NodeId, NodeId), Label> = BTreeMap::new();
    for r in rows {
        if r.label != Label::Unknown {
            latest.insert((r.monitor, r.neighbor), r.label);
        }
    }
    let mut votes: BTreeMap<NodeId, (u32, u32)> = BTreeMap::new();
    for ((_, neighbor), label) in &latest {
        let e = votes.entry(*neighbor).or_insert((0, 0));
        match label {
            Label::Selfish => e.0 += 1,
            Label::Cooperative => e.1 += 1,
            Label::Unknown => {}
        }
    }
    let flagged: Vec<u16> = votes
        .iter()
        .filter(|(_, &(b, g))| b > g)
        .map(|(n, _)| n.0)
        .collect();
    let labeled: Vec<NodeId> = votes.keys().copied().collect();
    let gt: std::collections::BTreeSet<u16> = ground_truth.iter().map(|n| n.0).collect();
    let flagged_set: std::collections::BTreeSet<u16> = flagged.iter().copied().collect();
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for n in &labeled {
        match (gt.contains(&n.0), flagged_set.contains(&n.0)) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let unlabeled_adversaries: Vec<u16> = ground_truth
        .iter()
        .filter(|n| !labeled.contains(n))
        .map(|n| n.0)
        .collect();
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    DetectionMetrics {
        ground_truth: gt.into_iter().collect(),
        flagged,
        unlabeled_adversaries,
        tp,
        fp,
        fn_,
        tn,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        fpr: ratio(fp, fp + tn),
    }
}

pub fn compute_metrics(sim: &Sim, v: &ValidatedScenario, seed: u64) -> MetricsReport {
    let warmup_us = v.config.warmup_us.unwrap_or_else(|| {
        v.detection
            .as_ref()
            .map(|d| d.params.window_us())
            .unwrap_or(0)
    });
    let mut flows = Vec::new();
    for (idx, f) in sim.flows.iter().enumerate() {
        let st = &sim.flow_stats[idx];
        let sent = st.origins_us.iter().filter(|&&t| t >= warmup_us).count() as u64;
        let delivered: Vec<u64> = st
            .deliveries
            .iter()
            .filter(|(origin, _)| *origin >= warmup_us)
            .map(|&(_, delay)| delay)
            .collect();
        let mut sorted = delivered.clone();
        sorted.sort_unstable();
        let p95 = if sorted.is_empty() {
            None
        } else {
            Some(sorted[(sorted.len() - 1) * 95 / 100])
        };
        flows.push(FlowMetrics {
            id: f.id,
            sent,
            delivered: delivered.len() as u64,
            pdr: if sent == 0 {
                None
            } else {
                Some(delivered.len() as f64 / sent as f64)
            },
            mean_delay_us: if delivered.is_empty() {
                None
            } else {
                Some(delivered.iter().sum::<u64>() as f64 / delivered.len() as f64)
            },
            p95_delay_us: p95,
        });
    }

    let mut control = ControlOverhead::default();
    let mut drops: BTreeMap<String, u64> = BTreeMap::new();
    for r in sim.trace().records() {
        match r.kind {
            RecordKind::Tx => {
                let slot = match r.pkt {
                    "RREQ" => &mut control.rreq_tx,
                    "RREP" => &mut control.rrep_tx,
                    "RERR" => &mut control.rerr_tx,
                    "HELLO_RREQ" | "HELLO_RREP" => &mut control.hello_tx,
                    "PROBE" => &mut control.probe_tx,
                    _ => continue,
                };
                *slot += 1;
                control.total += 1;
            }
            RecordKind::Drop => {
                *drops.entry(r.cause.as_str().to_string()).or_insert(0) += 1;
            }
            _ => {}
        }
    }

    let ground_truth: Vec<NodeId> = v
        .config
        .adversaries
        .iter()
        .filter(|(_, p)| p.is_forwarding_misbehavior())
        .map(|(&id, _)| NodeId(id))
        .collect();
    let detection = if v.detection.is_some() {
        Some(aggregate_detection(&sim.class_rows, &ground_truth))
    } else {
        None
    };

    MetricsReport {
        seed,
        protocol: v.config.protocol.clone(),
        duration_us: v.config.duration_us,
        warmup_us,
        flows,
        control,
        drops,
        detection,
    }
}

/// End-to-end: validate, build, run, and collect every artifact.
pub fn run_scenario(config: ScenarioConfig, seed: Option<u64>) -> Result<RunOutput, ScenarioError> {
    let v = validate(config)?;
    let seed = seed.unwrap_or(v.config.seed);
    let mut sim = build_sim(&v, seed);
    sim.prime()?;
    sim.run(SimTime(v.config.duration_us))?;
    let metrics = compute_metrics(&sim, &v, seed);
    let classification_csv = classification_csv(&sim.class_rows);
    Ok(RunOutput {
        trace_csv: sim.trace().to_csv(),
        classification_csv,
        metrics,
        warnings: v.warnings,
    })
}

// ---------------------------------------------------------------------------
// Trace parsing for the offline detector.
// ---------------------------------------------------------------------------

pub fn parse_trace_csv(text: &str) -> Result<Vec<ReplayRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != crate::engine::TraceLog::CSV_HEADER {
                return Err(format!("unexpected trace header: {line}"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(format!("line {}: expected 7 columns", i + 1));
        }
        let kind = RecordKind::parse(parts[1]).ok_or_else(|| format!("line {}: bad kind", i + 1))?;
        rows.push(ReplayRow {
            time_us: parts[0].parse().map_err(|e| format!("line {}: {e}", i + 1))?,
            kind,
            src: parts[2].parse().map_err(|e| format!("line {}: {e}", i + 1))?,
            dst: parts[3].parse().map_err(|e| format!("line {}: {e}", i + 1))?,
            pkt: parts[4].to_string(),
            flow: parts[5].parse().map_err(|e| format!("line {}: {e}", i + 1))?,
            cause: parts[6].to_string(),
        });
    }
    Ok(rows)
}

/// Offline detection over an exported trace, using the scenario file for
/// topology and detector parameters.
pub fn detect_offline(
    trace_text: &str,
    params_config: ScenarioConfig,
) -> Result<String, ScenarioError> {
    let v = validate(params_config)?;
    let Some(det) = &v.detection else {
        return Err(ScenarioError::Invalid(vec![
            "params file has no detection section".into(),
        ]));
    };
    let rows = parse_trace_csv(trace_text).map_err(|e| ScenarioError::Invalid(vec![e]))?;
    let class_rows = crate::detection::replay_trace(&rows, &v.topo, det);
    Ok(classification_csv(&class_rows))
}

// ---------------------------------------------------------------------------
// Seed sweeps.
// ---------------------------------------------------------------------------

pub struct SweepResult {
    pub seed: u64,
    pub output: Result<RunOutput, ScenarioError>,
}

/// Run the same scenario across a seed range, one isolated engine per
/// worker.
pub fn sweep(config: &ScenarioConfig, seeds: std::ops::RangeInclusive<u64>) -> Vec<SweepResult> {
    use rayon::prelude::*;
    let seeds: Vec<u64> = seeds.collect();
    let mut results: Vec<SweepResult> = seeds
        .par_iter()
        .map(|&seed| SweepResult {
            seed,
            output: run_scenario(config.clone(), Some(seed)),
        })
        .collect();
    results.sort_by_key(|r| r.seed);
    results
}

pub fn drop_cause_count(report: &MetricsReport, cause: DropCause) -> u64 {
    report
        .drops
        .get(cause.as_str())
        .copied()
        .unwrap_or(0)
}
