//! The platoon simulation. Every slot first dispatches the due events
//! (message generation, mobility, cell search, RRC timers, Uu deliveries),
//! then runs the subframe: MAC on every firing grant, the channel,
//! sensing, the eNodeB schedulers and the Uu downlink.

use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::channel::{
    dbm_to_mw, deliver_subframe, mw_to_dbm, rsrp_at, Delivery, LinkState, Outcome, Transmission,
};
use crate::config::ScenarioConfig;
use crate::engine::{DispatchRecord, Engine, EventTag, NodeId, RngStream, SimTime, StreamPurpose};
use crate::error::{Result, SimError};
use crate::facilities::{
    forward_alert, AlertSource, CamService, MessageKind, Pipeline, V2xMessage,
};
use crate::grid::{tb_prbs_required, Csr, GridConfig, SciFootprint};
use crate::metrics::{Link, MetricsLedger, RunIdent, RxOutcome, Summary, SwitchRecord, TxFate};
use crate::oracle::grants_conflict;
use crate::rrc::{
    cell_search, CellSite, RrcAction, RrcContext, RrcEvent, RrcState, RrcTimers, SystemInfo,
    ALLOWED_TRANSITIONS,
};
use crate::sbsps::{
    derived_interval, select_mode4, Grant, Mode3Request, Mode3Scheduler, SelectionRequest,
    SelectionWindow, SensingEntry, SlMode, SpsTiming, TxResult, SENSING_WINDOW_MS,
};
use crate::scenario::{RegionKind, World};
use crate::stack::{
    grant_capacity_bytes, pdcp_ingress, ConnectionTable, MacBuffers, RlcUmRx, RlcUmTx, UuScheduler,
    UuTransfer,
};

/// Target of events that concern the whole scenario.
pub const GLOBAL: NodeId = NodeId(u32::MAX);

/// Number of past `P_step` periods averaged when ranking candidates by RSSI.
pub const RSSI_PERIODS: u64 = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    CamGen,
    AlertGen,
    Mobility,
    CellSearch,
    HandshakeDone(NodeId),
    InactivityCheck(u64),
    SwitchDone,
    UuDeliver { cell: NodeId, transfer: UuTransfer },
}

impl EventTag for SimEvent {
    fn tag(&self) -> &'static str {
        match self {
            SimEvent::CamGen => "cam_gen",
            SimEvent::AlertGen => "alert_gen",
            SimEvent::Mobility => "mobility",
            SimEvent::CellSearch => "cell_search",
            SimEvent::HandshakeDone(_) => "handshake_done",
            SimEvent::InactivityCheck(_) => "inactivity_check",
            SimEvent::SwitchDone => "switch_done",
            SimEvent::UuDeliver { .. } => "uu_deliver",
        }
    }
}

/// Received power per slot and subchannel over the sensing window.
#[derive(Debug, Clone)]
struct RssiHistory {
    stamp: Vec<u64>,
    mw: Vec<f64>,
    n_subch: usize,
}

impl RssiHistory {
    fn new(depth: usize, n_subch: usize) -> Self {
        RssiHistory {
            stamp: vec![u64::MAX; depth],
            mw: vec![0.0; depth * n_subch],
            n_subch,
        }
    }

    fn row(&mut self, t: u64) -> &mut [f64] {
        let i = (t % self.stamp.len() as u64) as usize;
        let row = &mut self.mw[i * self.n_subch..(i + 1) * self.n_subch];
        if self.stamp[i] != t {
            self.stamp[i] = t;
            row.fill(0.0);
        }
        row
    }

    fn get(&self, t: u64, subch: usize) -> f64 {
        let i = (t % self.stamp.len() as u64) as usize;
        if self.stamp[i] == t {
            self.mw[i * self.n_subch + subch]
        } else {
            0.0
        }
    }

    /// Mean S-RSSI of `csr` over the previous `RSSI_PERIODS` periods.
    fn csr_rssi_dbm(&self, csr: &Csr, p_step: u64, noise_mw: f64) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 1..=RSSI_PERIODS {
            let Some(t) = csr.subframe.checked_sub(k * p_step) else {
                break;
            };
            for s in csr.subchannels() {
                sum += self.get(t, s);
                n += 1;
            }
        }
        mw_to_dbm(noise_mw + if n > 0 { sum / n as f64 } else { 0.0 })
    }

    fn mean_dbm(&self, t: u64, csr: &Csr, noise_mw: f64) -> f64 {
        let sum: f64 = csr.subchannels().map(|s| self.get(t, s)).sum();
        mw_to_dbm(noise_mw + sum / csr.l_subch as f64)
    }
}

#[derive(Debug, Clone)]
struct ActiveGrant {
    grant: Grant,
    /// Issuing cell index and grant id for mode-3 grants.
    issued: Option<(usize, u64)>,
}

struct Ue {
    id: NodeId,
    rrc: RrcContext,
    cam: CamService,
    flows: ConnectionTable,
    rlc_tx: RlcUmTx,
    rlc_rx: RlcUmRx,
    mac: MacBuffers,
    cam_grant: Option<ActiveGrant>,
    alert_grants: Vec<ActiveGrant>,
    cam_request_pending: bool,
    sensing: VecDeque<SensingEntry>,
    rssi: RssiHistory,
    selection_rng: ChaCha8Rng,
    resel_rng: ChaCha8Rng,
    inactivity_epoch: u64,
}

#[derive(Debug, Clone)]
struct PendingRequest {
    ue: usize,
    kind: MessageKind,
    trace: u64,
    req: Mode3Request,
}

struct Cell {
    id: NodeId,
    position_m: f64,
    si: SystemInfo,
    scheduler: Mode3Scheduler,
    uu: UuScheduler,
    sensing: VecDeque<SensingEntry>,
    rssi: RssiHistory,
    rng: ChaCha8Rng,
    pending: Vec<PendingRequest>,
}

/// Distances and received powers, refreshed at every mobility step.
#[derive(Debug, Clone, Default)]
struct Links {
    n: usize,
    n_cells: usize,
    dist: Vec<f64>,
    power_mw: Vec<f64>,
    range_m: Vec<f64>,
    cell_dist: Vec<f64>,
    cell_power_mw: Vec<f64>,
}

impl Links {
    fn refresh(&mut self, world: &World, cfg: &ScenarioConfig, cells: &[Cell]) {
        let n = world.vehicles.len();
        let ch = &cfg.channel;
        let profile = |k: RegionKind| match k {
            RegionKind::Highway => ch.highway,
            RegionKind::Tunnel => ch.tunnel,
        };
        self.n = n;
        self.n_cells = cells.len();
        self.dist.resize(n * n, 0.0);
        self.power_mw.resize(n * n, 0.0);
        self.range_m.resize(n, 0.0);
        for (r, v) in world.vehicles.iter().enumerate() {
            let p = profile(world.layout.regions[v.region].kind);
            self.range_m[r] = p.reception_range_m;
            for s in 0..n {
                let d = world.distance(s, r);
                self.dist[s * n + r] = d;
                self.power_mw[s * n + r] = dbm_to_mw(rsrp_at(
                    ch.tx_power_dbm,
                    d,
                    p.pathloss_exponent,
                    ch.carrier_ghz,
                ));
            }
        }
        self.cell_dist.resize(n * cells.len(), 0.0);
        self.cell_power_mw.resize(n * cells.len(), 0.0);
        for (c, cell) in cells.iter().enumerate() {
            let kind = world.layout.region_at(cell.position_m).kind;
            for (s, v) in world.vehicles.iter().enumerate() {
                let d = crate::scenario::ring_distance(
                    v.position_m,
                    cell.position_m,
                    world.layout.length_m,
                );
                self.cell_dist[s * cells.len() + c] = d;
                self.cell_power_mw[s * cells.len() + c] = dbm_to_mw(rsrp_at(
                    ch.tx_power_dbm,
                    d,
                    profile(kind).pathloss_exponent,
                    ch.carrier_ghz,
                ));
            }
        }
    }

    fn state(&self, tx: NodeId, rx: NodeId) -> LinkState {
        let (s, r) = (tx.0 as usize, rx.0 as usize);
        LinkState {
            distance_m: self.dist[s * self.n + r],
            range_m: self.range_m[r],
            rx_power_mw: self.power_mw[s * self.n + r],
        }
    }

    fn in_range(&self, s: usize, r: usize) -> bool {
        self.dist[s * self.n + r] <= self.range_m[r]
    }
}

/// Counters that are not part of the reception ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub transmissions: u64,
    pub slss_transmissions: u64,
    /// Grants whose first occurrence falls on an SLSS slot.
    pub slss_grants: u64,
    pub mode4_selections: u64,
    pub mode4_escalations: u64,
    pub mode3_grants: u64,
    pub mode3_denied: u64,
    /// Mode-3 grants found overlapping another active grant of the same
    /// cell when issued.
    pub mode3_overlaps: u64,
    pub rrc_transitions: u64,
    pub cell_changes: u64,
    pub alerts: u64,
}

pub struct RunOutput {
    pub summary: Summary,
    pub ledger: MetricsLedger,
    pub stats: RunStats,
    pub dispatch_log: Option<Vec<DispatchRecord>>,
}

fn map_outcome(o: Outcome) -> RxOutcome {
    match o {
        Outcome::Received => RxOutcome::Received,
        Outcome::HalfDuplexLoss => RxOutcome::HalfDuplex,
        Outcome::OutOfRange => RxOutcome::OutOfRange,
        Outcome::CollisionLoss => RxOutcome::Collision,
    }
}

/// Offered sidelink load over the pool capacity, both in bytes per second.
pub fn normalized_load(cfg: &ScenarioConfig, n_vehicles: usize, with_alerts: bool) -> f64 {
    let mean = |a: usize, b: usize| (a + b) as f64 / 2.0;
    let mut offered =
        n_vehicles as f64 * cfg.cam.rate_hz * mean(cfg.cam.size_min_bytes, cfg.cam.size_max_bytes);
    if with_alerts {
        offered += cfg.alert.rate_hz * mean(cfg.alert.size_min_bytes, cfg.alert.size_max_bytes);
    }
    let slots_per_s = cfg.ticks(1000) as f64;
    let usable = slots_per_s * (1.0 - 1.0 / cfg.grid.slss_period_ticks as f64);
    offered / (cfg.grid.subframe_capacity_bytes() as f64 * usable)
}

pub struct Simulation {
    cfg: ScenarioConfig,
    grid: GridConfig,
    timing: SpsTiming,
    timers: RrcTimers,
    cam_interval: u64,
    sensing_window: u64,
    noise_mw: f64,
    world: World,
    ues: Vec<Ue>,
    cells: Vec<Cell>,
    sites: Vec<CellSite>,
    links: Links,
    engine: Engine<SimEvent>,
    ledger: MetricsLedger,
    alerts: Option<AlertSource>,
    next_trace: u64,
    stats: RunStats,
    txs: Vec<Transmission>,
    tx_meta: Vec<(u8, u32)>,
    deliveries: Vec<Delivery>,
    receivers: Vec<NodeId>,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        Self::build(cfg, false)
    }

    /// Like [`Simulation::new`] but records every dispatched event.
    pub fn with_dispatch_log(cfg: ScenarioConfig) -> Result<Self> {
        Self::build(cfg, true)
    }

    fn build(cfg: ScenarioConfig, log: bool) -> Result<Self> {
        cfg.validate()?;
        let num = cfg.numerology;
        let seed = cfg.seed;
        let grid = cfg.grid.clone();
        let world = World::populate(&cfg.road, &cfg.platoon, seed)?;
        let timing = SpsTiming {
            p_step: cfg.ticks(cfg.sps.p_step_ms),
            t_p: cfg.ticks(cfg.sps.t_p_ms),
        };
        let timers = RrcTimers {
            si_delay: cfg.ticks(cfg.rrc.si_delay_ms),
            inactivity_timeout: cfg.ticks(cfg.rrc.inactivity_timeout_ms),
            sync_period: grid.slss_period_ticks,
        };
        let cam_interval = cfg.ticks(derived_interval(cfg.cam.period_ms(), cfg.sps.p_step_ms)?);
        let sensing_window = cfg.ticks(SENSING_WINDOW_MS);
        let depth = sensing_window as usize + 1;
        let ch = cfg.channel.clone();
        let sites = world
            .layout
            .cell_sites(ch.enodeb_tx_power_dbm, |k| match k {
                RegionKind::Highway => ch.highway.pathloss_exponent,
                RegionKind::Tunnel => ch.tunnel.pathloss_exponent,
            });
        let cells: Vec<Cell> = sites
            .iter()
            .map(|s| Cell {
                id: s.id,
                position_m: s.position_m,
                si: SystemInfo {
                    cell: s.id,
                    sib_sl: grid.clone(),
                    sync_period_ticks: timers.sync_period,
                },
                scheduler: Mode3Scheduler::new(),
                uu: UuScheduler::new(&cfg.stack),
                sensing: VecDeque::new(),
                rssi: RssiHistory::new(depth, grid.n_subch),
                rng: RngStream::new(seed, s.id, StreamPurpose::Selection).rng(),
                pending: Vec::new(),
            })
            .collect();
        let first_cell = world.vehicles.len() as u32;
        let ues: Vec<Ue> = world
            .vehicles
            .iter()
            .map(|v| {
                let found = cell_search(
                    v.position_m,
                    &sites,
                    world.layout.length_m,
                    ch.carrier_ghz,
                    cfg.rrc.cell_rsrp_threshold_dbm,
                );
                let rrc = match found {
                    Some(c) => {
                        RrcContext::connected(cells[(c.0 - first_cell) as usize].si.clone(), 0)
                    }
                    None => RrcContext::idle(),
                };
                Ue {
                    id: v.id,
                    rrc,
                    cam: CamService::new(v.id, &cfg.cam, num, seed),
                    flows: ConnectionTable::new(cfg.stack.max_lcids),
                    rlc_tx: RlcUmTx::default(),
                    rlc_rx: RlcUmRx::default(),
                    mac: MacBuffers::new(&cfg.stack),
                    cam_grant: None,
                    alert_grants: Vec::new(),
                    cam_request_pending: false,
                    sensing: VecDeque::new(),
                    rssi: RssiHistory::new(depth, grid.n_subch),
                    selection_rng: RngStream::new(seed, v.id, StreamPurpose::Selection).rng(),
                    resel_rng: RngStream::new(seed, v.id, StreamPurpose::Reselection).rng(),
                    inactivity_epoch: 0,
                }
            })
            .collect();
        let duration = cfg.duration_ticks();
        let window = cfg.ticks(cfg.metrics.warmup_ms)..duration - cfg.ticks(cfg.metrics.drain_ms);
        let ledger = MetricsLedger::new(window, num.ticks_to_ms(1));
        let alerts = (!cells.is_empty() && world.platoon_size() > 0 && cfg.alert.rate_hz > 0.0)
            .then(|| {
                AlertSource::new(
                    &cfg.alert,
                    num,
                    RngStream::new(seed, GLOBAL, StreamPurpose::Alert),
                )
            });
        let mut links = Links::default();
        links.refresh(&world, &cfg, &cells);
        let mut engine = Engine::new();
        if log {
            engine = engine.with_log();
        }
        let receivers = world.vehicles.iter().map(|v| v.id).collect();
        let mut sim = Simulation {
            noise_mw: dbm_to_mw(ch.noise_dbm),
            cfg,
            grid,
            timing,
            timers,
            cam_interval,
            sensing_window,
            world,
            ues,
            cells,
            sites,
            links,
            engine,
            ledger,
            alerts,
            next_trace: 0,
            stats: RunStats::default(),
            txs: Vec::new(),
            tx_meta: Vec::new(),
            deliveries: Vec::new(),
            receivers,
        };
        sim.schedule_initial()?;
        Ok(sim)
    }

    fn schedule_initial(&mut self) -> Result<()> {
        for i in 0..self.ues.len() {
            let ue = &self.ues[i];
            self.engine
                .schedule(SimTime::from_ticks(ue.cam.phase), ue.id, SimEvent::CamGen)?;
            if ue.rrc.state == RrcState::Connected {
                self.touch(i, 0)?;
            }
        }
        let step = self.cfg.ticks(self.cfg.road.mobility_step_ms);
        self.engine
            .schedule(SimTime::from_ticks(step), GLOBAL, SimEvent::Mobility)?;
        let search = self.cfg.ticks(self.cfg.rrc.cell_search_period_ms);
        self.engine
            .schedule(SimTime::from_ticks(search), GLOBAL, SimEvent::CellSearch)?;
        if let Some(src) = self.alerts.as_mut() {
            if let Some(at) = src.next_arrival(0) {
                self.engine
                    .schedule(SimTime::from_ticks(at), GLOBAL, SimEvent::AlertGen)?;
            }
        }
        Ok(())
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn ledger(&self) -> &MetricsLedger {
        &self.ledger
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn rrc_state(&self, node: NodeId) -> Option<&RrcContext> {
        self.ues.get(node.0 as usize).map(|u| &u.rrc)
    }

    /// Runs every slot up to the configured duration.
    pub fn run(mut self) -> Result<RunOutput> {
        let end = self.cfg.duration_ticks();
        for t in 0..end {
            self.advance(t)?;
        }
        Ok(self.finish())
    }

    /// Dispatches the events due at slot `t`, then runs its subframe.
    pub fn advance(&mut self, t: u64) -> Result<()> {
        let now = SimTime::from_ticks(t);
        while let Some(ev) = self.engine.pop_due(now) {
            self.dispatch(ev.target, ev.kind, t)?;
        }
        self.engine.run_until(now, |_, _| Ok(()))?;
        self.subframe(t)
    }

    fn finish(self) -> RunOutput {
        let mut in_flight: BTreeMap<MessageKind, u64> = BTreeMap::new();
        for ue in &self.ues {
            for s in ue.mac.queued() {
                *in_flight.entry(s.msg().kind).or_default() += 1;
            }
        }
        let ident = RunIdent {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            policy: self.cfg.mode_policy.as_str().to_string(),
            duration_s: self.cfg.duration_s,
            normalized_load: normalized_load(
                &self.cfg,
                self.world.vehicles.len(),
                self.alerts.is_some(),
            ),
        };
        let summary = self.ledger.summary(ident, &in_flight);
        RunOutput {
            summary,
            dispatch_log: self.engine.log().map(<[DispatchRecord]>::to_vec),
            ledger: self.ledger,
            stats: self.stats,
        }
    }

    fn trace(&mut self) -> u64 {
        self.next_trace += 1;
        self.next_trace
    }

    fn cell_index(&self, cell: NodeId) -> usize {
        cell.0 as usize - self.ues.len()
    }

    fn platoon_size(&self) -> usize {
        self.world.platoon_size()
    }

    fn dispatch(&mut self, target: NodeId, kind: SimEvent, t: u64) -> Result<()> {
        let i = target.0 as usize;
        match kind {
            SimEvent::CamGen => {
                let trace = self.trace();
                let ue = &mut self.ues[i];
                let msg = ue.cam.cam_tick(t, trace).ok_or_else(|| {
                    SimError::InvariantBreach(format!("cam event off phase for {target} at {t}"))
                })?;
                let next = t + ue.cam.period;
                self.engine
                    .schedule(SimTime::from_ticks(next), target, SimEvent::CamGen)?;
                self.originate(i, msg, t)?;
            }
            SimEvent::AlertGen => self.on_alert_arrival(t)?,
            SimEvent::Mobility => {
                let step = self.cfg.ticks(self.cfg.road.mobility_step_ms);
                self.world
                    .step_mobility(self.cfg.road.mobility_step_ms as f64 / 1000.0);
                self.links.refresh(&self.world, &self.cfg, &self.cells);
                self.engine
                    .schedule(SimTime::from_ticks(t + step), GLOBAL, SimEvent::Mobility)?;
            }
            SimEvent::CellSearch => {
                for u in 0..self.ues.len() {
                    let found = cell_search(
                        self.world.vehicles[u].position_m,
                        &self.sites,
                        self.world.layout.length_m,
                        self.cfg.channel.carrier_ghz,
                        self.cfg.rrc.cell_rsrp_threshold_dbm,
                    );
                    let ev = match found {
                        Some(c) => RrcEvent::CoverageGained(c),
                        None => RrcEvent::CoverageLost,
                    };
                    self.rrc_step(u, ev, t)?;
                }
                let period = self.cfg.ticks(self.cfg.rrc.cell_search_period_ms);
                self.engine.schedule(
                    SimTime::from_ticks(t + period),
                    GLOBAL,
                    SimEvent::CellSearch,
                )?;
            }
            SimEvent::HandshakeDone(cell) => {
                let si = self.cells[self.cell_index(cell)].si.clone();
                self.rrc_step(i, RrcEvent::HandshakeComplete(si), t)?;
            }
            SimEvent::InactivityCheck(epoch) => {
                if self.ues[i].inactivity_epoch == epoch {
                    self.rrc_step(i, RrcEvent::InactivityCheck, t)?;
                }
            }
            SimEvent::SwitchDone => self.request_for_queue(i, t)?,
            SimEvent::UuDeliver { cell, transfer } => self.on_uu_delivered(cell, transfer, t)?,
        }
        Ok(())
    }

    fn touch(&mut self, i: usize, t: u64) -> Result<()> {
        let ue = &mut self.ues[i];
        ue.inactivity_epoch += 1;
        let at = t + self.timers.inactivity_timeout;
        self.engine.schedule(
            SimTime::from_ticks(at),
            ue.id,
            SimEvent::InactivityCheck(ue.inactivity_epoch),
        )?;
        Ok(())
    }

    fn rrc_step(&mut self, i: usize, event: RrcEvent, t: u64) -> Result<()> {
        let before = self.ues[i].rrc.pending_switch;
        let id = self.ues[i].id;
        let out = self.ues[i].rrc.step(&event, t, &self.timers);
        if let Some(tr) = out.transition {
            if !ALLOWED_TRANSITIONS.contains(&tr) {
                return Err(SimError::InvariantBreach(format!(
                    "{id}: transition {:?} -> {:?} on {}",
                    tr.0,
                    tr.1,
                    event.name()
                )));
            }
            self.stats.rrc_transitions += 1;
        }
        self.ues[i].rrc.check_invariants()?;
        for action in out.actions {
            match action {
                RrcAction::StartHandshake { cell, complete_at } => {
                    self.engine.schedule(
                        SimTime::from_ticks(complete_at),
                        id,
                        SimEvent::HandshakeDone(cell),
                    )?;
                }
                RrcAction::AbortHandshake => {}
                RrcAction::EnterMode3 { .. } => {
                    if let Some(p) = before.filter(|p| p.target == SlMode::Mode3) {
                        self.ledger.switches.push(SwitchRecord {
                            node: id,
                            to: SlMode::Mode3,
                            requested_at: p.requested_at,
                            completed_at: t,
                        });
                    }
                    let ue = &mut self.ues[i];
                    ue.cam_grant = None;
                    ue.alert_grants.clear();
                    self.touch(i, t)?;
                    self.request_for_queue(i, t)?;
                }
                RrcAction::EnterMode4 { cell, usable_at } => {
                    self.leave_cell(i, cell, t);
                    self.ledger.switches.push(SwitchRecord {
                        node: id,
                        to: SlMode::Mode4,
                        requested_at: t,
                        completed_at: usable_at,
                    });
                    self.engine.schedule(
                        SimTime::from_ticks(usable_at),
                        id,
                        SimEvent::SwitchDone,
                    )?;
                }
                RrcAction::CellChanged { from, .. } => {
                    self.leave_cell(i, from, t);
                    self.stats.cell_changes += 1;
                    self.request_for_queue(i, t)?;
                }
            }
        }
        Ok(())
    }

    /// Drops everything UE `i` holds at `cell`: issued grants, queued
    /// requests and downlink transfers.
    fn leave_cell(&mut self, i: usize, cell: NodeId, t: u64) {
        let c = self.cell_index(cell);
        let id = self.ues[i].id;
        let cell = &mut self.cells[c];
        cell.scheduler.release_owner(id);
        cell.pending.retain(|p| p.ue != i);
        for tr in cell.uu.abort_ue(id) {
            self.ledger
                .on_rx(tr.msg.trace_id, cell.id, id, t, RxOutcome::UuAborted);
        }
        let ue = &mut self.ues[i];
        ue.cam_grant = None;
        ue.alert_grants.clear();
        ue.cam_request_pending = false;
    }

    /// A sidelink message enters the stack of UE `i`.
    fn originate(&mut self, i: usize, msg: V2xMessage, t: u64) -> Result<()> {
        let ue = &mut self.ues[i];
        let (trace, kind, id) = (msg.trace_id, msg.kind, ue.id);
        let tracked = i < self.world.platoon_size() && self.ledger.tracks(msg.created_at);
        self.ledger.on_generated(
            trace,
            id,
            kind,
            Link::Sidelink,
            ue.rrc.mode,
            msg.created_at,
            ue.rrc.pending_switch.is_some(),
            tracked,
        );
        let deadline = msg.deadline;
        let tb_bytes = match kind {
            MessageKind::Cam => self.cfg.cam.grant_bytes,
            MessageKind::Alert => msg.payload_bytes,
        } + self.cfg.stack.sidelink_overhead(msg.pipeline);
        let pdcp = match pdcp_ingress(msg, id, &mut ue.flows, &self.cfg.stack) {
            Ok(p) => p,
            Err(SimError::ConnectionRefused(_)) => {
                self.drop_leg(i, trace, kind, TxFate::Denied(t), RxOutcome::Denied, t);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let rlc = ue.rlc_tx.deliver(pdcp, &self.cfg.stack);
        ue.mac.enqueue(rlc);
        if kind == MessageKind::Alert || ue.cam_grant.is_none() {
            self.request_grant(i, kind, trace, deadline, tb_bytes, t)?;
        }
        Ok(())
    }

    /// Resolves a leg that never reached the air. Tracked legs get one
    /// receiver record per other platoon member.
    fn drop_leg(
        &mut self,
        i: usize,
        trace: u64,
        kind: MessageKind,
        fate: TxFate,
        outcome: RxOutcome,
        t: u64,
    ) {
        let id = self.ues[i].id;
        let mut expected = 0;
        if self.ledger.is_tracked(trace, id) {
            self.ledger.set_mode(trace, id, self.ues[i].rrc.mode);
            for r in 0..self.platoon_size() {
                if r == i {
                    continue;
                }
                let o = if self.links.in_range(i, r) {
                    outcome
                } else {
                    RxOutcome::OutOfRange
                };
                self.ledger.on_rx(trace, id, self.ues[r].id, t, o);
                expected += 1;
            }
        }
        self.ledger.on_fate(trace, id, kind, fate, expected);
    }

    /// Obtains a grant for a queued message: a request to the serving cell
    /// when attached, an autonomous selection in mode 4, nothing while a
    /// switch to mode 4 has not completed.
    fn request_grant(
        &mut self,
        i: usize,
        kind: MessageKind,
        trace: u64,
        deadline: u64,
        tb_bytes: usize,
        t: u64,
    ) -> Result<()> {
        let latency = self.cfg.ticks(match kind {
            MessageKind::Cam => self.cfg.cam.latency_ms,
            MessageKind::Alert => self.cfg.alert.latency_ms,
        });
        let t_l = latency.min(deadline.saturating_sub(t));
        let ue = &self.ues[i];
        if ue.rrc.state != RrcState::Idle {
            if kind == MessageKind::Cam && ue.cam_request_pending {
                return Ok(());
            }
            let cell = ue.rrc.serving_cell.expect("attached UE has a serving cell");
            let c = self.cell_index(cell);
            let period = if kind == MessageKind::Cam {
                self.cam_interval
            } else {
                0
            };
            self.cells[c].pending.push(PendingRequest {
                ue: i,
                kind,
                trace,
                req: Mode3Request {
                    owner: ue.id,
                    tb_bytes,
                    period,
                    max_latency: t_l,
                },
            });
            if kind == MessageKind::Cam {
                self.ues[i].cam_request_pending = true;
            }
            self.rrc_step(i, RrcEvent::Traffic, t)?;
            self.touch(i, t)?;
            return Ok(());
        }
        if ue.rrc.usable_mode(t) != Some(SlMode::Mode4) || t_l < self.timing.t_p {
            return Ok(());
        }
        let fp = tb_prbs_required(tb_bytes, 0, &self.grid)?;
        let window = self.sensing_window;
        let p_step = self.timing.p_step;
        let noise_mw = self.noise_mw;
        let Ue {
            id,
            sensing,
            rssi,
            selection_rng,
            resel_rng,
            ..
        } = &mut self.ues[i];
        while sensing.front().is_some_and(|e| e.subframe_z + window < t) {
            sensing.pop_front();
        }
        let (period, interval, c_resel) = match kind {
            MessageKind::Cam => (
                self.cam_interval,
                self.cam_interval,
                self.cfg.sps.draw_c_resel(resel_rng),
            ),
            MessageKind::Alert => (0, p_step, 1),
        };
        let req = SelectionRequest {
            window: SelectionWindow::new(t, self.timing.t_p, t_l),
            l_subch: fp.l_subch,
            period,
            interval,
            c_resel,
        };
        let picked = select_mode4(
            *id,
            &req,
            sensing.iter(),
            |c| rssi.csr_rssi_dbm(c, p_step, noise_mw),
            &self.cfg.sps,
            p_step,
            &self.grid,
            selection_rng,
        );
        match picked {
            Ok((grant, excl)) => {
                self.stats.mode4_selections += 1;
                self.stats.slss_grants += u64::from(self.grid.is_slss(grant.csr.subframe));
                self.stats.mode4_escalations += excl.escalations as u64;
                let ag = ActiveGrant {
                    grant,
                    issued: None,
                };
                match kind {
                    MessageKind::Cam => self.ues[i].cam_grant = Some(ag),
                    MessageKind::Alert => self.ues[i].alert_grants.push(ag),
                }
                Ok(())
            }
            Err(SimError::EmptySelectionWindow { .. }) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Requests grants for whatever UE `i` has queued.
    fn request_for_queue(&mut self, i: usize, t: u64) -> Result<()> {
        let overhead = |p: Pipeline| self.cfg.stack.sidelink_overhead(p);
        let mut wanted: Vec<(MessageKind, u64, u64, usize)> = Vec::new();
        let mut cam_done = self.ues[i].cam_grant.is_some();
        let mut queued: Vec<&V2xMessage> = self.ues[i].mac.queued().map(|s| s.msg()).collect();
        queued.sort_by_key(|m| (m.created_at, m.trace_id));
        for m in queued {
            match m.kind {
                MessageKind::Cam if !cam_done => {
                    cam_done = true;
                    wanted.push((
                        m.kind,
                        m.trace_id,
                        m.deadline,
                        self.cfg.cam.grant_bytes + overhead(m.pipeline),
                    ));
                }
                MessageKind::Cam => {}
                MessageKind::Alert => wanted.push((
                    m.kind,
                    m.trace_id,
                    m.deadline,
                    m.payload_bytes + overhead(m.pipeline),
                )),
            }
        }
        for (kind, trace, deadline, bytes) in wanted {
            self.request_grant(i, kind, trace, deadline, bytes, t)?;
        }
        Ok(())
    }

    fn on_alert_arrival(&mut self, t: u64) -> Result<()> {
        let src = self.alerts.as_mut().expect("alert events need a source");
        if let Some(at) = src.next_arrival(t) {
            self.engine
                .schedule(SimTime::from_ticks(at), GLOBAL, SimEvent::AlertGen)?;
        }
        self.stats.alerts += 1;
        let trace = self.trace();
        let head = &self.ues[0];
        let head_id = head.id;
        let switching = head.rrc.pending_switch.is_some();
        let tracked = self.ledger.tracks(t);
        let serving = head.rrc.serving_cell;
        let rsu = serving.unwrap_or_else(|| {
            let pos = self.world.vehicles[0].position_m;
            let len = self.world.layout.length_m;
            self.cells
                .iter()
                .min_by(|a, b| {
                    crate::scenario::ring_distance(pos, a.position_m, len)
                        .total_cmp(&crate::scenario::ring_distance(pos, b.position_m, len))
                })
                .expect("alerts need a cell")
                .id
        });
        self.ledger.on_generated(
            trace,
            rsu,
            MessageKind::Alert,
            Link::Uu,
            SlMode::Mode3,
            t,
            switching,
            tracked,
        );
        let Some(cell) = serving else {
            self.ledger
                .on_rx(trace, rsu, head_id, t, RxOutcome::NoCoverage);
            self.ledger
                .on_fate(trace, rsu, MessageKind::Alert, TxFate::Denied(t), 1);
            return Ok(());
        };
        let latency = self.cfg.ticks(self.cfg.alert.latency_ms);
        let src = self.alerts.as_mut().expect("alert source");
        let msg = src.rsu_alert(cell, head_id, t, latency, trace);
        let st = &self.cfg.stack;
        let pdu_bytes = msg.payload_bytes
            + st.pdcp_overhead(Pipeline::Ip)
            + st.rlc_um_header_bytes
            + st.mac_header_bytes;
        let c = self.cell_index(cell);
        self.cells[c].uu.submit(head_id, msg, pdu_bytes, t);
        self.ledger
            .on_fate(trace, rsu, MessageKind::Alert, TxFate::Transmitted(t), 1);
        self.rrc_step(0, RrcEvent::Traffic, t)?;
        self.touch(0, t)
    }

    fn on_uu_delivered(&mut self, cell: NodeId, tr: UuTransfer, t: u64) -> Result<()> {
        let i = tr.ue.0 as usize;
        let trace = tr.msg.trace_id;
        if self.ues[i].rrc.serving_cell != Some(cell) {
            self.ledger
                .on_rx(trace, cell, tr.ue, t, RxOutcome::UuAborted);
            return Ok(());
        }
        self.ledger
            .on_rx(trace, cell, tr.ue, t, RxOutcome::Received);
        self.rrc_step(i, RrcEvent::Traffic, t)?;
        self.touch(i, t)?;
        let fwd = forward_alert(tr.ue, &tr.msg, tr.msg.deadline);
        self.originate(i, fwd, t)
    }

    fn subframe(&mut self, t: u64) -> Result<()> {
        self.mac_phase(t)?;
        if !self.txs.is_empty() {
            self.channel_phase(t);
        }
        self.mode3_phase(t)?;
        for c in 0..self.cells.len() {
            if let Some((tr, at)) = self.cells[c].uu.tti(t) {
                let cell = self.cells[c].id;
                self.engine.schedule(
                    SimTime::from_ticks(at),
                    tr.ue,
                    SimEvent::UuDeliver { cell, transfer: tr },
                )?;
            }
        }
        Ok(())
    }

    fn release_issued(&mut self, ag: &ActiveGrant) {
        if let Some((c, id)) = ag.issued {
            self.cells[c].scheduler.release(id);
        }
    }

    /// An occurrence passed without data. Mode-3 grants count it against
    /// the reselection counter so they end when the eNodeB table expects.
    fn pass_unused(&mut self, mut ag: ActiveGrant) -> Option<ActiveGrant> {
        if ag.grant.is_one_shot() {
            self.release_issued(&ag);
            return None;
        }
        if ag.grant.mode == SlMode::Mode3 {
            match ag.grant.clone().on_transmission() {
                TxResult::Continue(g) => {
                    ag.grant = g;
                    Some(ag)
                }
                TxResult::ReselectionNeeded => {
                    self.release_issued(&ag);
                    None
                }
            }
        } else {
            ag.grant.skip();
            Some(ag)
        }
    }

    fn mac_phase(&mut self, t: u64) -> Result<()> {
        self.txs.clear();
        self.tx_meta.clear();
        let n_platoon = self.platoon_size();
        for i in 0..self.ues.len() {
            for s in self.ues[i].mac.purge_expired(t) {
                self.drop_leg(
                    i,
                    s.msg().trace_id,
                    s.msg().kind,
                    TxFate::Expired(t),
                    RxOutcome::Expired,
                    t,
                );
            }
            // catch up grants whose occurrence slipped past
            if let Some(mut ag) = self.ues[i].cam_grant.take() {
                let mut keep = Some(ag.clone());
                while ag.grant.fire_tick(&self.grid) < t {
                    keep = self.pass_unused(ag);
                    match &keep {
                        Some(k) => ag = k.clone(),
                        None => break,
                    }
                }
                self.ues[i].cam_grant = keep;
            }
            let stale: Vec<ActiveGrant> = {
                let grid = &self.grid;
                let (old, live): (Vec<_>, Vec<_>) = self.ues[i]
                    .alert_grants
                    .drain(..)
                    .partition(|g| g.grant.fire_tick(grid) < t);
                self.ues[i].alert_grants = live;
                old
            };
            for g in stale {
                self.release_issued(&g);
            }

            let grid = &self.grid;
            let firing_alerts: Vec<usize> = (0..self.ues[i].alert_grants.len())
                .filter(|&k| self.ues[i].alert_grants[k].grant.fire_tick(grid) == t)
                .collect();
            let cam_fires = self.ues[i]
                .cam_grant
                .as_ref()
                .is_some_and(|g| g.grant.fire_tick(grid) == t);
            if firing_alerts.is_empty() && !cam_fires {
                continue;
            }
            // alert grants first, then the CAM grant
            let mut winner: Option<(Option<usize>, crate::stack::MacPdu)> = None;
            for &k in &firing_alerts {
                let cap = grant_capacity_bytes(self.ues[i].alert_grants[k].grant.csr.l_subch, grid);
                if let Some(pdu) = self.ues[i].mac.mac_tti(cap) {
                    winner = Some((Some(k), pdu));
                    break;
                }
            }
            if winner.is_none() && cam_fires {
                let cap = grant_capacity_bytes(
                    self.ues[i]
                        .cam_grant
                        .as_ref()
                        .expect("fires")
                        .grant
                        .csr
                        .l_subch,
                    grid,
                );
                if let Some(pdu) = self.ues[i].mac.mac_tti(cap) {
                    winner = Some((None, pdu));
                }
            }
            // settle every firing grant
            let mut used: Option<Grant> = None;
            let mut alerts = std::mem::take(&mut self.ues[i].alert_grants);
            let mut rest = Vec::with_capacity(alerts.len());
            for (k, ag) in alerts.drain(..).enumerate() {
                if !firing_alerts.contains(&k) {
                    rest.push(ag);
                } else if winner.as_ref().is_some_and(|w| w.0 == Some(k)) {
                    used = Some(ag.grant.clone());
                    self.release_issued(&ag);
                } else {
                    self.release_issued(&ag);
                }
            }
            self.ues[i].alert_grants = rest;
            let mut reserved_interval = 0;
            if cam_fires {
                let ag = self.ues[i].cam_grant.take().expect("fires");
                if winner.as_ref().is_some_and(|w| w.0.is_none()) {
                    used = Some(ag.grant.clone());
                    match ag.grant.clone().on_transmission() {
                        TxResult::Continue(g) => {
                            reserved_interval = g.period;
                            self.ues[i].cam_grant = Some(ActiveGrant {
                                grant: g,
                                issued: ag.issued,
                            });
                        }
                        TxResult::ReselectionNeeded => self.release_issued(&ag),
                    }
                } else {
                    let next = self.pass_unused(ag);
                    self.ues[i].cam_grant = next;
                }
            }
            let (Some((_, pdu)), Some(grant)) = (winner, used) else {
                continue;
            };

            if self.grid.is_slss(t) {
                self.ledger.slss_violations += 1;
                self.stats.slss_transmissions += 1;
            }
            let id = self.ues[i].id;
            let msg = pdu.rlc.msg();
            let (trace, kind) = (msg.trace_id, msg.kind);
            self.txs.push(Transmission {
                sender: id,
                csr: grant.csr.at(t),
                msg_id: trace,
                sci: SciFootprint::new(),
                tx_tick: t,
                reserved_interval,
            });
            self.tx_meta.push((pdu.rlc.pdcp.lcid, pdu.rlc.sn));
            self.stats.transmissions += 1;
            let expected = if i < n_platoon && self.ledger.is_tracked(trace, id) {
                self.ledger.set_mode(trace, id, grant.mode);
                n_platoon as u32 - 1
            } else {
                0
            };
            self.ledger
                .on_fate(trace, id, kind, TxFate::Transmitted(t), expected);
        }
        Ok(())
    }

    fn channel_phase(&mut self, t: u64) {
        let links = &self.links;
        deliver_subframe(
            &self.txs,
            &self.receivers,
            &self.cfg.channel,
            |a, b| links.state(a, b),
            &mut self.deliveries,
        );
        let n_platoon = self.platoon_size();
        for d in &self.deliveries {
            let tx = &self.txs[d.tx];
            let (s, r) = (tx.sender.0 as usize, d.receiver.0 as usize);
            let outcome = map_outcome(d.outcome);
            if s < n_platoon && r < n_platoon {
                self.ledger
                    .on_rx(tx.msg_id, tx.sender, d.receiver, t, outcome);
            } else {
                self.ledger.count_outcome(outcome);
            }
            if outcome == RxOutcome::Received {
                let (lcid, sn) = self.tx_meta[d.tx];
                self.ues[r].rlc_rx.accept(tx.sender, lcid, sn);
            }
        }

        // sensing at every UE that listened
        let noise_mw = self.noise_mw;
        let window = self.sensing_window;
        for r in 0..self.ues.len() {
            let rid = self.ues[r].id;
            if self.txs.iter().any(|x| x.sender == rid) {
                continue;
            }
            let ue = &mut self.ues[r];
            let row = ue.rssi.row(t);
            for tx in &self.txs {
                let p = self.links.power_mw[tx.sender.0 as usize * self.links.n + r];
                for s in tx.csr.subchannels() {
                    row[s] += p;
                }
            }
            for tx in &self.txs {
                let s = tx.sender.0 as usize;
                if !self.links.in_range(s, r) {
                    continue;
                }
                let p = self.links.power_mw[s * self.links.n + r];
                ue.sensing.push_back(SensingEntry {
                    subframe_z: t,
                    subch_start: tx.csr.subch_start,
                    l_subch: tx.csr.l_subch,
                    rsrp_dbm: mw_to_dbm(p),
                    rssi_dbm: ue.rssi.mean_dbm(t, &tx.csr, noise_mw),
                    reserved_interval: tx.reserved_interval,
                });
            }
            while ue
                .sensing
                .front()
                .is_some_and(|e| e.subframe_z + window < t)
            {
                ue.sensing.pop_front();
            }
        }

        // and at every eNodeB
        let range = self.cfg.road.enodeb_sensing_range_m;
        let n_cells = self.links.n_cells;
        for (c, cell) in self.cells.iter_mut().enumerate() {
            let row = cell.rssi.row(t);
            for tx in &self.txs {
                let p = self.links.cell_power_mw[tx.sender.0 as usize * n_cells + c];
                for s in tx.csr.subchannels() {
                    row[s] += p;
                }
            }
            for tx in &self.txs {
                let k = tx.sender.0 as usize * n_cells + c;
                if self.links.cell_dist[k] > range {
                    continue;
                }
                cell.sensing.push_back(SensingEntry {
                    subframe_z: t,
                    subch_start: tx.csr.subch_start,
                    l_subch: tx.csr.l_subch,
                    rsrp_dbm: mw_to_dbm(self.links.cell_power_mw[k]),
                    rssi_dbm: cell.rssi.mean_dbm(t, &tx.csr, noise_mw),
                    reserved_interval: tx.reserved_interval,
                });
            }
            while cell
                .sensing
                .front()
                .is_some_and(|e| e.subframe_z + window < t)
            {
                cell.sensing.pop_front();
            }
        }
    }

    fn mode3_phase(&mut self, t: u64) -> Result<()> {
        let p_step = self.timing.p_step;
        let noise_mw = self.noise_mw;
        for c in 0..self.cells.len() {
            if self.cells[c].pending.is_empty() {
                continue;
            }
            let pending = std::mem::take(&mut self.cells[c].pending);
            let reqs: Vec<Mode3Request> = pending.iter().map(|p| p.req).collect();
            let Cell {
                scheduler,
                sensing,
                rssi,
                rng,
                ..
            } = &mut self.cells[c];
            let results = scheduler.schedule(
                t,
                &reqs,
                sensing.make_contiguous(),
                |csr| rssi.csr_rssi_dbm(csr, p_step, noise_mw),
                &self.cfg.sps,
                &self.timing,
                &self.grid,
                rng,
            );
            for (p, res) in pending.into_iter().zip(results) {
                match res {
                    Ok(issued) => {
                        self.stats.mode3_grants += 1;
                        self.stats.slss_grants +=
                            u64::from(self.grid.is_slss(issued.grant.csr.subframe));
                        let overlaps = self.cells[c]
                            .scheduler
                            .active()
                            .filter(|(id, g)| *id != issued.id && grants_conflict(&issued.grant, g))
                            .count();
                        if overlaps > 0 {
                            self.stats.mode3_overlaps += overlaps as u64;
                            self.ledger.problems.push(format!(
                                "cell {}: grant {} overlaps {overlaps} active grants",
                                self.cells[c].id, issued.id
                            ));
                        }
                        let ag = ActiveGrant {
                            grant: issued.grant,
                            issued: Some((c, issued.id)),
                        };
                        let ue = &mut self.ues[p.ue];
                        match p.kind {
                            MessageKind::Cam => {
                                ue.cam_request_pending = false;
                                ue.cam_grant = Some(ag);
                            }
                            MessageKind::Alert => ue.alert_grants.push(ag),
                        }
                    }
                    Err(SimError::GrantDenied(_)) => {
                        self.stats.mode3_denied += 1;
                        if p.kind == MessageKind::Cam {
                            self.ues[p.ue].cam_request_pending = false;
                        }
                        if self.ues[p.ue].mac.remove(p.trace).is_some() {
                            self.drop_leg(
                                p.ue,
                                p.trace,
                                p.kind,
                                TxFate::Denied(t),
                                RxOutcome::Denied,
                                t,
                            );
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }
}

/// Builds and runs one scenario.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput> {
    Simulation::new(cfg.clone())?.run()
}
