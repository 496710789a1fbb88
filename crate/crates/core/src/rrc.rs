//! Control plane: cell search, system-information handshake, the
//! IDLE / INACTIVE / CONNECTED state machine and sidelink mode switching.
//!
//! The allocation mode follows the RRC state: a UE attached to an eNodeB
//! (CONNECTED or INACTIVE) uses network-scheduled mode 3, a detached UE
//! (IDLE) schedules itself in mode 4 from the preconfigured pool. Entering
//! mode 3 costs the SI handshake; returning to mode 4 must wait for the
//! next sidelink synchronisation boundary.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::channel::rsrp_at;
use crate::engine::NodeId;
use crate::error::{Result, SimError};
use crate::grid::GridConfig;
use crate::sbsps::SlMode;
use crate::scenario::ring_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RrcState {
    Idle,
    Inactive,
    Connected,
}

impl RrcState {
    pub const ALL: [RrcState; 3] = [RrcState::Idle, RrcState::Inactive, RrcState::Connected];
}

/// The only state changes the machine may perform.
pub const ALLOWED_TRANSITIONS: [(RrcState, RrcState); 5] = [
    (RrcState::Idle, RrcState::Connected),
    (RrcState::Connected, RrcState::Idle),
    (RrcState::Connected, RrcState::Inactive),
    (RrcState::Inactive, RrcState::Connected),
    (RrcState::Inactive, RrcState::Idle),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RrcConfig {
    pub si_delay_ms: u64,
    pub inactivity_timeout_ms: u64,
    pub cell_search_period_ms: u64,
    pub cell_rsrp_threshold_dbm: f64,
}

impl Default for RrcConfig {
    fn default() -> Self {
        RrcConfig {
            si_delay_ms: 50,
            inactivity_timeout_ms: 500,
            cell_search_period_ms: 100,
            cell_rsrp_threshold_dbm: -125.0,
        }
    }
}

impl RrcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_search_period_ms == 0 {
            return Err(SimError::Config(
                "rrc.cell_search_period_ms must be > 0".into(),
            ));
        }
        if self.inactivity_timeout_ms == 0 {
            return Err(SimError::Config(
                "rrc.inactivity_timeout_ms must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// RRC timers in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RrcTimers {
    pub si_delay: u64,
    pub inactivity_timeout: u64,
    pub sync_period: u64,
}

/// Acquired system information (MIB + sidelink SIB).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInfo {
    pub cell: NodeId,
    /// Preconfigured mode-4 pool geometry.
    pub sib_sl: GridConfig,
    pub sync_period_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingSwitch {
    pub target: SlMode,
    pub requested_at: u64,
    pub complete_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handshake {
    pub cell: NodeId,
    pub complete_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RrcContext {
    pub state: RrcState,
    pub serving_cell: Option<NodeId>,
    pub mode: SlMode,
    pub pending_switch: Option<PendingSwitch>,
    pub handshake: Option<Handshake>,
    pub si: Option<SystemInfo>,
    pub last_activity: u64,
}

impl Default for RrcContext {
    fn default() -> Self {
        Self::idle()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RrcEvent {
    CoverageGained(NodeId),
    CoverageLost,
    Traffic,
    InactivityCheck,
    HandshakeComplete(SystemInfo),
}

impl RrcEvent {
    pub fn name(&self) -> &'static str {
        match self {
            RrcEvent::CoverageGained(_) => "coverage-gained",
            RrcEvent::CoverageLost => "coverage-lost",
            RrcEvent::Traffic => "traffic",
            RrcEvent::InactivityCheck => "inactivity-check",
            RrcEvent::HandshakeComplete(_) => "handshake-complete",
        }
    }
}

/// Side effects the node must carry out after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrcAction {
    /// ConnSetup sent; MIB/SIB arrive at `complete_at`.
    StartHandshake {
        cell: NodeId,
        complete_at: u64,
    },
    AbortHandshake,
    /// Connected to `cell`; sidelink now scheduled by it.
    EnterMode3 {
        cell: NodeId,
    },
    /// Detached from `cell`; mode-4 resources usable from `usable_at`.
    EnterMode4 {
        cell: NodeId,
        usable_at: u64,
    },
    /// Seamless change of serving cell while attached.
    CellChanged {
        from: NodeId,
        to: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    pub transition: Option<(RrcState, RrcState)>,
    pub actions: Vec<RrcAction>,
}

impl RrcContext {
    pub fn idle() -> Self {
        RrcContext {
            state: RrcState::Idle,
            serving_cell: None,
            mode: SlMode::Mode4,
            pending_switch: None,
            handshake: None,
            si: None,
            last_activity: 0,
        }
    }

    /// A UE that is already attached at simulation start.
    pub fn connected(si: SystemInfo, now: u64) -> Self {
        RrcContext {
            state: RrcState::Connected,
            serving_cell: Some(si.cell),
            mode: SlMode::Mode3,
            pending_switch: None,
            handshake: None,
            si: Some(si),
            last_activity: now,
        }
    }

    /// The mode whose resources may be used at `now`, or `None` while a
    /// switch to mode 4 waits for the synchronisation boundary.
    pub fn usable_mode(&self, now: u64) -> Option<SlMode> {
        match self.pending_switch {
            Some(p) if p.target == SlMode::Mode4 && now < p.complete_at => None,
            _ => Some(self.mode),
        }
    }

    /// Checks the coupling between state, mode and serving cell.
    pub fn check_invariants(&self) -> Result<()> {
        let idle = self.state == RrcState::Idle;
        let ok_mode = idle == (self.mode == SlMode::Mode4);
        let ok_cell = if idle {
            self.serving_cell.is_none()
        } else {
            self.serving_cell.is_some()
        };
        if ok_mode && ok_cell {
            Ok(())
        } else {
            Err(SimError::InvariantBreach(format!(
                "rrc state {:?} with mode {:?} and serving cell {:?}",
                self.state, self.mode, self.serving_cell
            )))
        }
    }

    fn enter(&mut self, to: RrcState, out: &mut StepOutcome) {
        out.transition = Some((self.state, to));
        self.state = to;
    }

    fn detach(&mut self, now: u64, timers: &RrcTimers, out: &mut StepOutcome) {
        let cell = self
            .serving_cell
            .take()
            .expect("attached UE has a serving cell");
        let usable_at = mode_switch_latency(SlMode::Mode3, SlMode::Mode4, now, timers);
        self.enter(RrcState::Idle, out);
        self.mode = SlMode::Mode4;
        self.pending_switch = Some(PendingSwitch {
            target: SlMode::Mode4,
            requested_at: now,
            complete_at: usable_at,
        });
        out.actions.push(RrcAction::EnterMode4 { cell, usable_at });
    }

    /// Advances the state machine by one event.
    pub fn step(&mut self, event: &RrcEvent, now: u64, timers: &RrcTimers) -> StepOutcome {
        let mut out = StepOutcome::default();
        // a pending mode-4 switch that has matured is no longer pending
        if matches!(self.pending_switch, Some(p) if p.target == SlMode::Mode4 && now >= p.complete_at)
        {
            self.pending_switch = None;
        }
        match (self.state, event) {
            (RrcState::Idle, RrcEvent::CoverageGained(cell)) => {
                if self.handshake.is_none() {
                    let complete_at =
                        mode_switch_latency(SlMode::Mode4, SlMode::Mode3, now, timers);
                    self.handshake = Some(Handshake {
                        cell: *cell,
                        complete_at,
                    });
                    self.pending_switch = Some(PendingSwitch {
                        target: SlMode::Mode3,
                        requested_at: now,
                        complete_at,
                    });
                    out.actions.push(RrcAction::StartHandshake {
                        cell: *cell,
                        complete_at,
                    });
                }
            }
            (RrcState::Idle, RrcEvent::CoverageLost) => {
                if self.handshake.take().is_some() {
                    if matches!(self.pending_switch, Some(p) if p.target == SlMode::Mode3) {
                        self.pending_switch = None;
                    }
                    out.actions.push(RrcAction::AbortHandshake);
                }
            }
            (RrcState::Idle, RrcEvent::HandshakeComplete(si)) => {
                if matches!(self.handshake, Some(h) if h.cell == si.cell && now >= h.complete_at) {
                    self.handshake = None;
                    self.pending_switch = None;
                    self.serving_cell = Some(si.cell);
                    self.si = Some(si.clone());
                    self.mode = SlMode::Mode3;
                    self.last_activity = now;
                    self.enter(RrcState::Connected, &mut out);
                    out.actions.push(RrcAction::EnterMode3 { cell: si.cell });
                }
            }
            (RrcState::Idle, RrcEvent::Traffic | RrcEvent::InactivityCheck) => {}
            (RrcState::Connected | RrcState::Inactive, RrcEvent::CoverageGained(cell)) => {
                if let Some(from) = self.serving_cell.filter(|c| c != cell) {
                    self.serving_cell = Some(*cell);
                    out.actions.push(RrcAction::CellChanged { from, to: *cell });
                }
            }
            (RrcState::Connected | RrcState::Inactive, RrcEvent::CoverageLost) => {
                self.detach(now, timers, &mut out);
            }
            (RrcState::Connected, RrcEvent::Traffic) => {
                self.last_activity = now;
            }
            (RrcState::Connected, RrcEvent::InactivityCheck) => {
                if now.saturating_sub(self.last_activity) >= timers.inactivity_timeout {
                    self.enter(RrcState::Inactive, &mut out);
                }
            }
            (RrcState::Inactive, RrcEvent::Traffic) => {
                self.last_activity = now;
                self.enter(RrcState::Connected, &mut out);
            }
            (RrcState::Inactive, RrcEvent::InactivityCheck) => {}
            (RrcState::Connected | RrcState::Inactive, RrcEvent::HandshakeComplete(_)) => {}
        }
        out
    }
}

/// Tick at which a switch decided at `now` completes. Entering mode 3 takes
/// the SI handshake; leaving it waits for the next sync boundary.
pub fn mode_switch_latency(from: SlMode, to: SlMode, now: u64, timers: &RrcTimers) -> u64 {
    match (from, to) {
        (SlMode::Mode4, SlMode::Mode3) => now + timers.si_delay,
        (SlMode::Mode3, SlMode::Mode4) => (now / timers.sync_period + 1) * timers.sync_period,
        _ => now,
    }
}

/// An eNodeB as seen by cell search.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSite {
    pub id: NodeId,
    pub position_m: f64,
    /// Half-open stretch of road the cell serves.
    pub coverage: Range<f64>,
    pub tx_power_dbm: f64,
    pub pathloss_exponent: f64,
}

/// Nearest cell that serves the UE position and is received above the
/// threshold; ties go to the lower node id.
pub fn cell_search(
    ue_position_m: f64,
    sites: &[CellSite],
    ring_length_m: f64,
    carrier_ghz: f64,
    rsrp_threshold_dbm: f64,
) -> Option<NodeId> {
    sites
        .iter()
        .filter(|s| s.coverage.contains(&ue_position_m))
        .map(|s| (ring_distance(ue_position_m, s.position_m, ring_length_m), s))
        .filter(|(d, s)| {
            rsrp_at(s.tx_power_dbm, *d, s.pathloss_exponent, carrier_ghz) >= rsrp_threshold_dbm
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)))
        .map(|(_, s)| s.id)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TIMERS: RrcTimers = RrcTimers {
        si_delay: 50,
        inactivity_timeout: 500,
        sync_period: 160,
    };

    fn si(cell: u32) -> SystemInfo {
        SystemInfo {
            cell: NodeId(cell),
            sib_sl: GridConfig::default(),
            sync_period_ticks: 160,
        }
    }

    fn site(id: u32, pos: f64, cov: Range<f64>) -> CellSite {
        CellSite {
            id: NodeId(id),
            position_m: pos,
            coverage: cov,
            tx_power_dbm: 46.0,
            pathloss_exponent: 2.75,
        }
    }

    #[test]
    fn cell_search_examples() {
        // R1 tunnel [0,500), R2 covered [500,1000), R3 tunnel, R4 covered
        let sites = [
            site(10, 750.0, 500.0..1000.0),
            site(11, 1750.0, 1500.0..2000.0),
        ];
        assert_eq!(
            cell_search(600.0, &sites, 2000.0, 5.9, -125.0),
            Some(NodeId(10))
        );
        assert_eq!(cell_search(1200.0, &sites, 2000.0, 5.9, -125.0), None);
        assert_eq!(cell_search(100.0, &sites, 2000.0, 5.9, -125.0), None);
        let overlapping = [site(21, 600.0, 0.0..2000.0), site(20, 400.0, 0.0..2000.0)];
        assert_eq!(
            cell_search(500.0, &overlapping, 2000.0, 5.9, -125.0),
            Some(NodeId(20))
        );
        // too weak
        assert_eq!(cell_search(600.0, &sites, 2000.0, 5.9, 0.0), None);
    }

    #[test]
    fn handshake_connects_after_delay() {
        let mut ctx = RrcContext::idle();
        let out = ctx.step(&RrcEvent::CoverageGained(NodeId(7)), 1000, &TIMERS);
        assert_eq!(
            out.actions,
            vec![RrcAction::StartHandshake {
                cell: NodeId(7),
                complete_at: 1050
            }]
        );
        assert_eq!(ctx.state, RrcState::Idle);
        assert_eq!(ctx.usable_mode(1020), Some(SlMode::Mode4));
        let out = ctx.step(&RrcEvent::HandshakeComplete(si(7)), 1050, &TIMERS);
        assert_eq!(out.transition, Some((RrcState::Idle, RrcState::Connected)));
        assert_eq!(ctx.mode, SlMode::Mode3);
        ctx.check_invariants().unwrap();
        // already connected: no-op
        let out = ctx.step(&RrcEvent::CoverageGained(NodeId(7)), 1060, &TIMERS);
        assert_eq!(out, StepOutcome::default());
    }

    #[test]
    fn coverage_lost_mid_handshake_aborts() {
        let mut ctx = RrcContext::idle();
        ctx.step(&RrcEvent::CoverageGained(NodeId(7)), 1000, &TIMERS);
        let out = ctx.step(&RrcEvent::CoverageLost, 1020, &TIMERS);
        assert_eq!(out.actions, vec![RrcAction::AbortHandshake]);
        let out = ctx.step(&RrcEvent::HandshakeComplete(si(7)), 1050, &TIMERS);
        assert_eq!(out.transition, None);
        assert_eq!((ctx.state, ctx.mode), (RrcState::Idle, SlMode::Mode4));
    }

    #[test]
    fn inactivity_keeps_mode3() {
        let mut ctx = RrcContext::connected(si(3), 0);
        assert_eq!(
            ctx.step(&RrcEvent::InactivityCheck, 499, &TIMERS)
                .transition,
            None
        );
        let out = ctx.step(&RrcEvent::InactivityCheck, 500, &TIMERS);
        assert_eq!(
            out.transition,
            Some((RrcState::Connected, RrcState::Inactive))
        );
        assert_eq!(ctx.mode, SlMode::Mode3);
        ctx.check_invariants().unwrap();
        let out = ctx.step(&RrcEvent::Traffic, 700, &TIMERS);
        assert_eq!(
            out.transition,
            Some((RrcState::Inactive, RrcState::Connected))
        );
    }

    #[test]
    fn inactive_losing_coverage_goes_idle() {
        let mut ctx = RrcContext::connected(si(3), 0);
        ctx.step(&RrcEvent::InactivityCheck, 600, &TIMERS);
        let out = ctx.step(&RrcEvent::CoverageLost, 610, &TIMERS);
        assert_eq!(out.transition, Some((RrcState::Inactive, RrcState::Idle)));
        assert_eq!(ctx.mode, SlMode::Mode4);
        assert_eq!(
            out.actions,
            vec![RrcAction::EnterMode4 {
                cell: NodeId(3),
                usable_at: 640
            }]
        );
        assert_eq!(ctx.usable_mode(639), None);
        assert_eq!(ctx.usable_mode(640), Some(SlMode::Mode4));
        ctx.check_invariants().unwrap();
    }

    #[test]
    fn switch_latencies() {
        assert_eq!(
            mode_switch_latency(SlMode::Mode3, SlMode::Mode4, 170, &TIMERS),
            320
        );
        assert_eq!(
            mode_switch_latency(SlMode::Mode3, SlMode::Mode4, 159, &TIMERS),
            160
        );
        assert_eq!(
            mode_switch_latency(SlMode::Mode4, SlMode::Mode3, 1000, &TIMERS),
            1050
        );
        // average over uniform switch instants: 50 < mean sync wait
        let mean_m4: f64 = (0..1600u64)
            .map(|t| (mode_switch_latency(SlMode::Mode3, SlMode::Mode4, t, &TIMERS) - t) as f64)
            .sum::<f64>()
            / 1600.0;
        assert!(50.0 < mean_m4);
    }

    #[test]
    fn cell_change_is_seamless() {
        let mut ctx = RrcContext::connected(si(3), 0);
        let out = ctx.step(&RrcEvent::CoverageGained(NodeId(4)), 10, &TIMERS);
        assert_eq!(out.transition, None);
        assert_eq!(
            out.actions,
            vec![RrcAction::CellChanged {
                from: NodeId(3),
                to: NodeId(4)
            }]
        );
        assert_eq!(ctx.serving_cell, Some(NodeId(4)));
    }
}
