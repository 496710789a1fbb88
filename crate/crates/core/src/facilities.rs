//! Message services and the platooning application: periodic CAMs at
//! every vehicle, Poisson alerts at the roadside unit, and the head's
//! relay of alerts to the members.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::engine::{NodeId, Numerology, RngStream, StreamPurpose};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Cam,
    Alert,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Cam => "cam",
            MessageKind::Alert => "alert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    NonIp,
    Ip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Destination {
    Broadcast,
    Unicast(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct V2xMessage {
    pub trace_id: u64,
    pub kind: MessageKind,
    pub pipeline: Pipeline,
    pub payload_bytes: usize,
    /// Creation at the original source (the RSU for relayed alerts).
    pub created_at: u64,
    pub source: NodeId,
    pub destination: Destination,
    /// Last tick at which the message may still be sent.
    pub deadline: u64,
}

impl V2xMessage {
    /// Checks the kind/pipeline/destination pairing.
    pub fn well_formed(&self) -> bool {
        matches!(
            (self.kind, self.pipeline, self.destination),
            (MessageKind::Cam, Pipeline::NonIp, Destination::Broadcast)
                | (MessageKind::Alert, Pipeline::Ip, Destination::Unicast(_))
                | (MessageKind::Alert, Pipeline::NonIp, Destination::Broadcast)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamServiceConfig {
    pub rate_hz: f64,
    pub size_min_bytes: usize,
    pub size_max_bytes: usize,
    pub latency_ms: u64,
    /// Payload size the periodic grant is dimensioned for.
    pub grant_bytes: usize,
}

impl Default for CamServiceConfig {
    fn default() -> Self {
        CamServiceConfig {
            rate_hz: 10.0,
            size_min_bytes: 280,
            size_max_bytes: 330,
            latency_ms: 100,
            grant_bytes: 330,
        }
    }
}

impl CamServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=10.0).contains(&self.rate_hz) {
            return Err(SimError::Config(format!(
                "cam.rate_hz must be within [1, 10], got {}",
                self.rate_hz
            )));
        }
        if self.size_min_bytes == 0 || self.size_min_bytes > self.size_max_bytes {
            return Err(SimError::Config(
                "cam.size_min_bytes must be in 1..=cam.size_max_bytes".into(),
            ));
        }
        if self.grant_bytes < self.size_max_bytes {
            return Err(SimError::Config(format!(
                "cam.grant_bytes {} is smaller than cam.size_max_bytes {}",
                self.grant_bytes, self.size_max_bytes
            )));
        }
        check_latency("cam.latency_ms", self.latency_ms)
    }

    pub fn period_ms(&self) -> u64 {
        (1000.0 / self.rate_hz).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlertServiceConfig {
    pub rate_hz: f64,
    pub size_min_bytes: usize,
    pub size_max_bytes: usize,
    pub latency_ms: u64,
}

impl Default for AlertServiceConfig {
    fn default() -> Self {
        AlertServiceConfig {
            rate_hz: 1.0,
            size_min_bytes: 50,
            size_max_bytes: 1500,
            latency_ms: 100,
        }
    }
}

impl AlertServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz >= 0.0 && self.rate_hz.is_finite()) {
            return Err(SimError::Config("alert.rate_hz must be >= 0".into()));
        }
        if self.size_min_bytes == 0 || self.size_min_bytes > self.size_max_bytes {
            return Err(SimError::Config(
                "alert.size_min_bytes must be in 1..=alert.size_max_bytes".into(),
            ));
        }
        check_latency("alert.latency_ms", self.latency_ms)
    }
}

fn check_latency(field: &str, v: u64) -> Result<()> {
    if (20..=100).contains(&v) {
        Ok(())
    } else {
        Err(SimError::Config(format!(
            "{field} must be within [20, 100] ms, got {v}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatoonConfig {
    pub n_vehicles: u32,
    pub lane: u32,
    /// Initial head position along the road.
    pub start_m: f64,
    pub target_gap_m: f64,
    pub min_gap_m: f64,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        PlatoonConfig {
            n_vehicles: 6,
            lane: 0,
            start_m: 100.0,
            target_gap_m: 4.0,
            min_gap_m: 2.5,
        }
    }
}

impl PlatoonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vehicles < 2 {
            return Err(SimError::Config("platoon.n_vehicles must be >= 2".into()));
        }
        if self.min_gap_m < 0.0 || self.target_gap_m < self.min_gap_m {
            return Err(SimError::Config(
                "platoon.target_gap_m must be >= platoon.min_gap_m >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Periodic CAM generator of one node: fixed period and a phase drawn once.
#[derive(Debug, Clone)]
pub struct CamService {
    pub node: NodeId,
    pub period: u64,
    pub phase: u64,
    latency: u64,
    size_min: usize,
    size_max: usize,
    rng: ChaCha8Rng,
}

impl CamService {
    pub fn new(node: NodeId, cfg: &CamServiceConfig, numerology: Numerology, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, node, StreamPurpose::Cam).rng();
        let period = numerology.ms_to_ticks(cfg.period_ms());
        let phase = rng.random_range(0..period);
        CamService {
            node,
            period,
            phase,
            latency: numerology.ms_to_ticks(cfg.latency_ms),
            size_min: cfg.size_min_bytes,
            size_max: cfg.size_max_bytes,
            rng,
        }
    }

    pub fn is_generation_tick(&self, tick: u64) -> bool {
        tick >= self.phase && (tick - self.phase).is_multiple_of(self.period)
    }

    /// The CAM due at `tick`, if any.
    pub fn cam_tick(&mut self, tick: u64, trace_id: u64) -> Option<V2xMessage> {
        if !self.is_generation_tick(tick) {
            return None;
        }
        let payload_bytes = self.rng.random_range(self.size_min..=self.size_max);
        Some(V2xMessage {
            trace_id,
            kind: MessageKind::Cam,
            pipeline: Pipeline::NonIp,
            payload_bytes,
            created_at: tick,
            source: self.node,
            destination: Destination::Broadcast,
            deadline: tick + self.latency,
        })
    }
}

/// Poisson alert arrivals at the roadside unit.
#[derive(Debug, Clone)]
pub struct AlertSource {
    gap: Option<Exp<f64>>,
    ticks_per_s: f64,
    size_min: usize,
    size_max: usize,
    rng: ChaCha8Rng,
}

impl AlertSource {
    pub fn new(cfg: &AlertServiceConfig, numerology: Numerology, stream: RngStream) -> Self {
        AlertSource {
            gap: (cfg.rate_hz > 0.0).then(|| Exp::new(cfg.rate_hz).expect("positive rate")),
            ticks_per_s: numerology.ms_to_ticks(1000) as f64,
            size_min: cfg.size_min_bytes,
            size_max: cfg.size_max_bytes,
            rng: stream.rng(),
        }
    }

    /// Tick of the arrival following `now`; `None` when the rate is zero.
    pub fn next_arrival(&mut self, now: u64) -> Option<u64> {
        let gap = self.gap.as_ref()?.sample(&mut self.rng);
        Some(now + ((gap * self.ticks_per_s).ceil() as u64).max(1))
    }

    /// The alert created at `tick` for the platoon head.
    pub fn rsu_alert(
        &mut self,
        rsu: NodeId,
        head: NodeId,
        tick: u64,
        latency: u64,
        trace_id: u64,
    ) -> V2xMessage {
        V2xMessage {
            trace_id,
            kind: MessageKind::Alert,
            pipeline: Pipeline::Ip,
            payload_bytes: self.rng.random_range(self.size_min..=self.size_max),
            created_at: tick,
            source: rsu,
            destination: Destination::Unicast(head),
            deadline: tick + latency,
        }
    }
}

/// The head's sidelink copy of an alert received over Uu: non-IP broadcast,
/// same trace and creation time, new sidelink deadline.
pub fn forward_alert(head: NodeId, alert: &V2xMessage, deadline: u64) -> V2xMessage {
    V2xMessage {
        pipeline: Pipeline::NonIp,
        source: head,
        destination: Destination::Broadcast,
        deadline,
        ..alert.clone()
    }
}
