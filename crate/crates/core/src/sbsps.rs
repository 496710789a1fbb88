//! Sensing-based semi-persistent scheduling.
//!
//! The same candidate pipeline serves both allocation modes:
//!
//! 1. `enumerate_l1`: every placement of `l_subch` contiguous subchannels on
//!    every PSSCH subframe of the selection window `[n + T_P, n + T_L]`.
//! 2. `exclude_reserved`: drop candidates whose future occurrences
//!    `y + j * P'` (for `j < C_resel`) land on a subframe `z + P_step * k`
//!    announced by a sensed SCI above the RSRP threshold. The threshold is
//!    raised in 3 dB steps until at least 20% of the window survives.
//! 3. `rank_and_pick`: keep the lowest-RSSI fifth of the survivors and draw
//!    one uniformly.
//!
//! Mode 3 runs the pipeline at the eNodeB against its own table of issued
//! grants (see [`Mode3Scheduler`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::NodeId;
use crate::error::{Result, SimError};
use crate::grid::{tb_prbs_required, Csr, GridConfig};

/// Trailing sensing window, in milliseconds.
pub const SENSING_WINDOW_MS: u64 = 1000;
/// Fraction of the window that must survive exclusion, as `1 / FLOOR_DIVISOR`.
const FLOOR_DIVISOR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlMode {
    Mode3,
    Mode4,
}

/// A decoded SCI remembered for exclusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingEntry {
    pub subframe_z: u64,
    pub subch_start: usize,
    pub l_subch: usize,
    pub rsrp_dbm: f64,
    pub rssi_dbm: f64,
    /// Announced reservation interval in ticks; 0 means no reservation.
    pub reserved_interval: u64,
}

impl SensingEntry {
    fn overlaps(&self, csr: &Csr) -> bool {
        csr.overlaps_subch(self.subch_start, self.l_subch)
    }
}

/// Selection window `[n + T_P, n + T_L]` in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionWindow {
    pub n: u64,
    pub t_p: u64,
    pub t_l: u64,
}

impl SelectionWindow {
    pub fn new(n: u64, t_p: u64, t_l: u64) -> Self {
        SelectionWindow { n, t_p, t_l }
    }

    pub fn start(&self) -> u64 {
        self.n + self.t_p
    }

    pub fn end(&self) -> u64 {
        self.n + self.t_l
    }

    pub fn contains(&self, tick: u64) -> bool {
        (self.start()..=self.end()).contains(&tick)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpsParams {
    /// P_step in milliseconds.
    pub p_step_ms: u64,
    pub t_p_ms: u64,
    pub rsrp_threshold_dbm: f64,
    pub threshold_step_db: f64,
    pub c_resel_min: u32,
    pub c_resel_max: u32,
}

impl Default for SpsParams {
    fn default() -> Self {
        SpsParams {
            p_step_ms: 100,
            t_p_ms: 4,
            rsrp_threshold_dbm: -110.0,
            threshold_step_db: 3.0,
            c_resel_min: 5,
            c_resel_max: 15,
        }
    }
}

impl SpsParams {
    pub fn validate(&self) -> Result<()> {
        if self.p_step_ms == 0 {
            return Err(SimError::Config("sps.p_step_ms must be > 0".into()));
        }
        if self.t_p_ms > 4 {
            return Err(SimError::Config(format!(
                "sps.t_p_ms must be <= 4, got {}",
                self.t_p_ms
            )));
        }
        if self.c_resel_min == 0 || self.c_resel_min > self.c_resel_max {
            return Err(SimError::Config(
                "sps.c_resel_min must be >= 1 and <= sps.c_resel_max".into(),
            ));
        }
        if self.threshold_step_db <= 0.0 {
            return Err(SimError::Config("sps.threshold_step_db must be > 0".into()));
        }
        Ok(())
    }

    pub fn draw_c_resel<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.random_range(self.c_resel_min..=self.c_resel_max)
    }
}

/// `P' = P * P_step / 100`; must come out as a positive integer.
pub fn derived_interval(p: u64, p_step: u64) -> Result<u64> {
    let scaled = p * p_step;
    if scaled == 0 || !scaled.is_multiple_of(100) {
        return Err(SimError::Config(format!(
            "reservation interval {p} with P_step {p_step} is not a positive integer"
        )));
    }
    Ok(scaled / 100)
}

/// A persistent sidelink reservation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub csr: Csr,
    /// Repetition period in ticks; 0 for a one-shot grant.
    pub period: u64,
    pub c_resel: u32,
    pub mode: SlMode,
    pub owner: NodeId,
    /// Number of nominal occurrences already passed.
    pub occurrence: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxResult {
    Continue(Grant),
    ReselectionNeeded,
}

impl Grant {
    /// Nominal subframe of occurrence `i` (before SLSS deferral).
    pub fn nominal(&self, i: u64) -> u64 {
        self.csr.subframe + i * self.period
    }

    /// Tick of the current occurrence; deferred by one slot when the
    /// nominal subframe carries SLSS.
    pub fn fire_tick(&self, grid: &GridConfig) -> u64 {
        let t = self.nominal(self.occurrence);
        if grid.is_slss(t) {
            t + 1
        } else {
            t
        }
    }

    /// Moves to the next occurrence without consuming the counter.
    pub fn skip(&mut self) {
        self.occurrence += 1;
    }

    pub fn is_one_shot(&self) -> bool {
        self.period == 0
    }

    /// Consumes one transmission. The grant is spent when the counter runs
    /// out.
    pub fn on_transmission(mut self) -> TxResult {
        self.c_resel = self.c_resel.saturating_sub(1);
        if self.c_resel == 0 || self.period == 0 {
            TxResult::ReselectionNeeded
        } else {
            self.occurrence += 1;
            TxResult::Continue(self)
        }
    }
}

/// Candidate list L1 over the PSSCH subframes of `window`.
pub fn enumerate_l1(
    window: &SelectionWindow,
    l_subch: usize,
    grid: &GridConfig,
) -> Result<Vec<Csr>> {
    if l_subch == 0 || l_subch > grid.n_subch {
        return Err(SimError::IndexOutOfGrid(format!(
            "l_subch {l_subch} outside 1..={}",
            grid.n_subch
        )));
    }
    let per_subframe = grid.n_subch - l_subch + 1;
    let mut out = Vec::with_capacity(((window.t_l - window.t_p + 1) as usize) * per_subframe);
    for y in window.start()..=window.end() {
        if grid.is_slss(y) {
            continue;
        }
        for s in 0..per_subframe {
            out.push(Csr {
                subframe: y,
                subch_start: s,
                l_subch,
            });
        }
    }
    if out.is_empty() {
        return Err(SimError::EmptySelectionWindow {
            start: window.start(),
            end: window.end(),
        });
    }
    Ok(out)
}

/// Inputs of the exclusion step, all in ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExclusionParams {
    pub n: u64,
    pub t_l: u64,
    /// `P'_rsvp-TX` (mode 4) or `P'_SPS` (mode 3) of the requesting flow.
    pub interval: u64,
    pub p_step: u64,
    pub c_resel: u32,
    pub rsrp_threshold_dbm: f64,
    pub threshold_step_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub l2: Vec<Csr>,
    pub m_total: usize,
    pub threshold_dbm: f64,
    pub escalations: u32,
}

/// Minimum survivors, `ceil(0.2 * m_total)`.
pub fn l2_floor(m_total: usize) -> usize {
    m_total.div_ceil(FLOOR_DIVISOR)
}

/// Builds L2 from L1. For every candidate, the strongest matching SCI
/// determines the threshold at which it becomes usable again; the
/// threshold then escalates until the 20% floor holds or no sensed SCI
/// can be released by further escalation (authoritative reservations carry
/// an infinite RSRP and are never released).
pub fn exclude_reserved<'a, I>(l1: &[Csr], sensing: I, p: &ExclusionParams) -> Exclusion
where
    I: IntoIterator<Item = &'a SensingEntry>,
{
    let m_total = l1.len();
    let mut strongest = vec![f64::NEG_INFINITY; m_total];
    if m_total > 0 && p.p_step > 0 {
        let lo = l1.iter().map(|c| c.subframe).min().unwrap_or(0);
        let hi = l1.iter().map(|c| c.subframe).max().unwrap_or(0);
        let mut by_subframe: Vec<Vec<usize>> = vec![Vec::new(); (hi - lo + 1) as usize];
        for (i, c) in l1.iter().enumerate() {
            by_subframe[(c.subframe - lo) as usize].push(i);
        }
        let horizon = p.n + p.t_l + p.c_resel as u64 * p.interval;
        let step = p.p_step as i64;
        for e in sensing {
            if e.reserved_interval == 0 {
                continue;
            }
            for j in 0..p.c_resel as u64 {
                let shift = j * p.interval;
                // y + shift = z + step * k, k >= 0  =>  y >= z - shift, y = z - shift (mod step)
                let target = e.subframe_z as i64 - shift as i64;
                let from = (lo as i64).max(target);
                let mut y = from + (target - from).rem_euclid(step);
                while y <= hi as i64 {
                    let occ = y as u64 + shift;
                    if occ >= p.n && occ <= horizon {
                        for &i in &by_subframe[(y as u64 - lo) as usize] {
                            if e.overlaps(&l1[i]) && e.rsrp_dbm > strongest[i] {
                                strongest[i] = e.rsrp_dbm;
                            }
                        }
                    }
                    y += step;
                }
            }
        }
    }

    let releasable = strongest
        .iter()
        .copied()
        .filter(|r| r.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = l2_floor(m_total);
    let mut threshold = p.rsrp_threshold_dbm;
    let mut escalations = 0;
    loop {
        let l2: Vec<Csr> = l1
            .iter()
            .zip(&strongest)
            .filter(|(_, &s)| s <= threshold)
            .map(|(c, _)| *c)
            .collect();
        if l2.len() >= floor || threshold >= releasable {
            return Exclusion {
                l2,
                m_total,
                threshold_dbm: threshold,
                escalations,
            };
        }
        threshold += p.threshold_step_db;
        escalations += 1;
    }
}

/// Orders L2 by `(rssi, subframe, subch_start)` and returns the lowest
/// fifth (at least one) as L3.
pub fn rank_l3<F>(l2: &[Csr], mut rssi: F) -> Vec<Csr>
where
    F: FnMut(&Csr) -> f64,
{
    let mut ranked: Vec<(f64, Csr)> = l2.iter().map(|c| (rssi(c), *c)).collect();
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.subframe.cmp(&b.1.subframe))
            .then(a.1.subch_start.cmp(&b.1.subch_start))
    });
    let keep = l2.len().div_ceil(FLOOR_DIVISOR).max(1);
    ranked.into_iter().take(keep).map(|(_, c)| c).collect()
}

/// Ranks L2 into L3 and draws the grant resource uniformly from L3.
pub fn rank_and_pick<F, R>(l2: &[Csr], rssi: F, rng: &mut R) -> Option<(Csr, Vec<Csr>)>
where
    F: FnMut(&Csr) -> f64,
    R: Rng,
{
    if l2.is_empty() {
        return None;
    }
    let l3 = rank_l3(l2, rssi);
    let pick = l3[rng.random_range(0..l3.len())];
    Some((pick, l3))
}

/// SB-SPS time constants converted to ticks at the run numerology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpsTiming {
    pub p_step: u64,
    pub t_p: u64,
}

/// A mode-4 selection request from one UE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionRequest {
    pub window: SelectionWindow,
    pub l_subch: usize,
    /// Reservation period of the flow in ticks; 0 for one-shot traffic.
    pub period: u64,
    /// Derived reservation interval `P'_rsvp-TX` in ticks.
    pub interval: u64,
    pub c_resel: u32,
}

/// Full mode-4 pipeline. Returns the new grant and the exclusion record.
#[allow(clippy::too_many_arguments)]
pub fn select_mode4<'a, I, F, R>(
    owner: NodeId,
    req: &SelectionRequest,
    sensing: I,
    rssi: F,
    params: &SpsParams,
    p_step: u64,
    grid: &GridConfig,
    rng: &mut R,
) -> Result<(Grant, Exclusion)>
where
    I: IntoIterator<Item = &'a SensingEntry>,
    F: FnMut(&Csr) -> f64,
    R: Rng,
{
    let l1 = enumerate_l1(&req.window, req.l_subch, grid)?;
    let excl = exclude_reserved(
        &l1,
        sensing,
        &ExclusionParams {
            n: req.window.n,
            t_l: req.window.t_l,
            interval: req.interval,
            p_step,
            c_resel: req.c_resel,
            rsrp_threshold_dbm: params.rsrp_threshold_dbm,
            threshold_step_db: params.threshold_step_db,
        },
    );
    let (csr, _) = rank_and_pick(&excl.l2, rssi, rng)
        .ok_or_else(|| SimError::InvariantBreach("mode-4 exclusion left no candidate".into()))?;
    Ok((
        Grant {
            csr,
            period: req.period,
            c_resel: req.c_resel,
            mode: SlMode::Mode4,
            owner,
            occurrence: 0,
        },
        excl,
    ))
}

/// Request reported by a connected UE to its eNodeB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode3Request {
    pub owner: NodeId,
    /// Payload plus protocol headers, in bytes.
    pub tb_bytes: usize,
    /// Message period in ticks (`P'_SPS`); 0 for one-shot traffic.
    pub period: u64,
    /// Maximum tolerated latency T_L in ticks.
    pub max_latency: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Issued {
    grant: Grant,
    id: u64,
}

impl Issued {
    fn last_occurrence(&self) -> u64 {
        if self.grant.period == 0 {
            self.grant.csr.subframe
        } else {
            self.grant.nominal(self.grant.c_resel as u64 - 1)
        }
    }

    /// Next nominal occurrence at or after `now`.
    fn next_at_or_after(&self, now: u64) -> u64 {
        let g = &self.grant;
        if g.period == 0 || now <= g.csr.subframe {
            return g.csr.subframe;
        }
        let k = (now - g.csr.subframe).div_ceil(g.period);
        g.nominal(k)
    }
}

/// The eNodeB's centralized scheduler with its authoritative table of
/// issued sidelink grants.
#[derive(Debug, Clone, Default)]
pub struct Mode3Scheduler {
    issued: Vec<Issued>,
    next_id: u64,
    pub denied: u64,
}

/// A mode-3 decision: the grant and the id under which it is tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct IssuedGrant {
    pub id: u64,
    pub grant: Grant,
}

impl Mode3Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn active(&self) -> impl Iterator<Item = (u64, &Grant)> {
        self.issued.iter().map(|i| (i.id, &i.grant))
    }

    pub fn len(&self) -> usize {
        self.issued.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issued.is_empty()
    }

    /// Drops grants whose last occurrence lies before `now`.
    pub fn prune(&mut self, now: u64) {
        self.issued.retain(|i| i.last_occurrence() >= now);
    }

    pub fn release(&mut self, id: u64) {
        self.issued.retain(|i| i.id != id);
    }

    pub fn release_owner(&mut self, owner: NodeId) {
        self.issued.retain(|i| i.grant.owner != owner);
    }

    /// Schedules each request in order against the authoritative table plus
    /// `sensing` (SCIs of autonomous UEs heard by the eNodeB). Periodic
    /// grants are excluded by residue (the `y + j P'_SPS = z + P_step k`
    /// rule with z at their next occurrence and infinite RSRP); one-shot
    /// grants by exact subframe. Among the lowest-RSSI candidates the
    /// subframe with the fewest grants wins; remaining ties are drawn
    /// uniformly.
    #[allow(clippy::too_many_arguments)]
    pub fn schedule<R, F>(
        &mut self,
        now: u64,
        requests: &[Mode3Request],
        sensing: &[SensingEntry],
        mut rssi: F,
        params: &SpsParams,
        timing: &SpsTiming,
        grid: &GridConfig,
        rng: &mut R,
    ) -> Vec<Result<IssuedGrant>>
    where
        R: Rng,
        F: FnMut(&Csr) -> f64,
    {
        self.prune(now);
        requests
            .iter()
            .map(|req| self.schedule_one(now, req, sensing, &mut rssi, params, timing, grid, rng))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn schedule_one<R, F>(
        &mut self,
        now: u64,
        req: &Mode3Request,
        sensing: &[SensingEntry],
        rssi: &mut F,
        params: &SpsParams,
        timing: &SpsTiming,
        grid: &GridConfig,
        rng: &mut R,
    ) -> Result<IssuedGrant>
    where
        R: Rng,
        F: FnMut(&Csr) -> f64,
    {
        let denied = |why: String| SimError::GrantDenied(format!("{} ({why})", req.owner));
        let tb = tb_prbs_required(req.tb_bytes.max(1), 0, grid)?;
        let p_step = timing.p_step;
        let window = SelectionWindow::new(now, timing.t_p.min(req.max_latency), req.max_latency);
        let l1 = match enumerate_l1(&window, tb.l_subch, grid) {
            Ok(l1) => l1,
            Err(e) => {
                self.denied += 1;
                return Err(denied(e.to_string()));
            }
        };
        let c_resel = if req.period == 0 {
            1
        } else {
            params.draw_c_resel(rng)
        };
        let interval = if req.period == 0 { p_step } else { req.period };

        let mut entries: Vec<SensingEntry> = sensing.to_vec();
        let mut one_shots: Vec<&Grant> = Vec::new();
        for i in &self.issued {
            if i.grant.period == 0 {
                one_shots.push(&i.grant);
            } else {
                entries.push(SensingEntry {
                    subframe_z: i.next_at_or_after(now),
                    subch_start: i.grant.csr.subch_start,
                    l_subch: i.grant.csr.l_subch,
                    rsrp_dbm: f64::INFINITY,
                    rssi_dbm: f64::INFINITY,
                    reserved_interval: i.grant.period,
                });
            }
        }
        let excl = exclude_reserved(
            &l1,
            &entries,
            &ExclusionParams {
                n: now,
                t_l: req.max_latency,
                interval,
                p_step,
                c_resel,
                rsrp_threshold_dbm: params.rsrp_threshold_dbm,
                threshold_step_db: params.threshold_step_db,
            },
        );
        let period = req.period;
        let occurrences = |c: Csr| (0..c_resel as u64).map(move |j| c.subframe + j * period);
        let l2: Vec<Csr> = excl
            .l2
            .into_iter()
            .filter(|c| {
                !one_shots.iter().any(|g| {
                    g.csr.overlaps_subch(c.subch_start, c.l_subch)
                        && (req.period == 0 && c.subframe == g.csr.subframe
                            || req.period > 0 && occurrences(*c).any(|t| t == g.csr.subframe))
                })
            })
            .collect();
        if l2.is_empty() {
            self.denied += 1;
            return Err(denied("no candidate survives the reservation table".into()));
        }
        let l3 = rank_l3(&l2, &mut *rssi);
        let load: Vec<usize> = l3
            .iter()
            .map(|c| self.subframe_load(c.subframe, p_step))
            .collect();
        let min_load = load.iter().copied().min().unwrap_or(0);
        let best: Vec<Csr> = l3
            .iter()
            .zip(&load)
            .filter(|(_, &l)| l == min_load)
            .map(|(c, _)| *c)
            .collect();
        let csr = best[rng.random_range(0..best.len())];
        let grant = Grant {
            csr,
            period: req.period,
            c_resel,
            mode: SlMode::Mode3,
            owner: req.owner,
            occurrence: 0,
        };
        let id = self.next_id;
        self.next_id += 1;
        self.issued.push(Issued {
            grant: grant.clone(),
            id,
        });
        Ok(IssuedGrant { id, grant })
    }

    /// Grants already occupying `subframe`: periodic grants by residue
    /// modulo `P_step`, one-shot grants by exact subframe.
    fn subframe_load(&self, subframe: u64, p_step: u64) -> usize {
        self.issued
            .iter()
            .filter(|i| {
                let g = &i.grant;
                if g.period == 0 {
                    g.csr.subframe == subframe
                } else {
                    (subframe as i64 - g.csr.subframe as i64).rem_euclid(p_step as i64) == 0
                }
            })
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n_subch: usize) -> GridConfig {
        GridConfig {
            n_subch,
            ..GridConfig::default()
        }
    }

    fn params(n: u64, c_resel: u32) -> ExclusionParams {
        ExclusionParams {
            n,
            t_l: 100,
            interval: 100,
            p_step: 100,
            c_resel,
            rsrp_threshold_dbm: -110.0,
            threshold_step_db: 3.0,
        }
    }

    fn entry(z: u64, subch: usize, rsrp: f64) -> SensingEntry {
        SensingEntry {
            subframe_z: z,
            subch_start: subch,
            l_subch: 1,
            rsrp_dbm: rsrp,
            rssi_dbm: rsrp,
            reserved_interval: 100,
        }
    }

    #[test]
    fn l1_counts() {
        let g = grid(3);
        // ticks 1001..=1010 hold no SLSS (period 160)
        let w = SelectionWindow::new(997, 4, 13);
        assert_eq!(enumerate_l1(&w, 1, &g).unwrap().len(), 30);
        assert_eq!(enumerate_l1(&w, 3, &g).unwrap().len(), 10);
        let w = SelectionWindow::new(316, 4, 20);
        assert!(!enumerate_l1(&w, 1, &g).unwrap().is_empty());
        let w = SelectionWindow::new(156, 4, 4);
        assert!(matches!(
            enumerate_l1(&w, 1, &g),
            Err(SimError::EmptySelectionWindow { .. })
        ));
    }

    #[test]
    fn periodic_reservation_excluded() {
        let g = grid(1);
        let n = 1000;
        let l1 = vec![
            Csr {
                subframe: n + 5,
                subch_start: 0,
                l_subch: 1,
            },
            Csr {
                subframe: n + 6,
                subch_start: 0,
                l_subch: 1,
            },
        ];
        let e = entry(n - 95, 0, -80.0);
        let mut p = params(n, 1);
        p.rsrp_threshold_dbm = -110.0;
        // floor of 2 is 1: keep n+6, drop n+5
        let out = exclude_reserved(&l1, [&e], &p);
        assert_eq!(out.l2, vec![l1[1]]);
        assert_eq!(out.escalations, 0);
        let _ = g;
    }

    #[test]
    fn nothing_sensed_keeps_l1() {
        let w = SelectionWindow::new(1000, 4, 100);
        let l1 = enumerate_l1(&w, 1, &grid(4)).unwrap();
        let out = exclude_reserved(&l1, [], &params(1000, 5));
        assert_eq!(out.l2, l1);
    }

    #[test]
    fn weak_sci_never_excludes() {
        let w = SelectionWindow::new(1000, 4, 100);
        let l1 = enumerate_l1(&w, 1, &grid(4)).unwrap();
        let entries: Vec<_> = (0..50)
            .map(|i| entry(905 + i, (i % 4) as usize, -115.0))
            .collect();
        let out = exclude_reserved(&l1, &entries, &params(1000, 5));
        assert_eq!(out.l2, l1);
    }

    #[test]
    fn saturation_escalates_to_floor() {
        let w = SelectionWindow::new(1000, 4, 100);
        let g = grid(2);
        let l1 = enumerate_l1(&w, 1, &g).unwrap();
        // every residue and subchannel reserved, with graded power
        let entries: Vec<_> = (0..100u64)
            .flat_map(|r| (0..2).map(move |s| entry(900 + r, s, -100.0 + (r % 10) as f64)))
            .collect();
        let out = exclude_reserved(&l1, &entries, &params(1000, 3));
        assert!(out.l2.len() >= l2_floor(l1.len()));
        assert!(out.escalations > 0);
        assert!(out.threshold_dbm > -110.0);
    }

    #[test]
    fn l3_is_lowest_fifth() {
        let l2: Vec<Csr> = (0..10)
            .map(|i| Csr {
                subframe: 10 + i,
                subch_start: 0,
                l_subch: 1,
            })
            .collect();
        let rssi = |c: &Csr| -(c.subframe as f64);
        let l3 = rank_l3(&l2, rssi);
        assert_eq!(l3, vec![l2[9], l2[8]]);
        let tied = rank_l3(&l2, |_| -90.0);
        assert_eq!(tied, vec![l2[0], l2[1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pick, l3) = rank_and_pick(&l2[..1], |_| 0.0, &mut rng).unwrap();
        assert_eq!((pick, l3), (l2[0], vec![l2[0]]));
        assert!(rank_and_pick(&[], |_| 0.0, &mut rng).is_none());
    }

    #[test]
    fn counter_lifecycle() {
        let g = Grant {
            csr: Csr {
                subframe: 5,
                subch_start: 0,
                l_subch: 1,
            },
            period: 100,
            c_resel: 5,
            mode: SlMode::Mode4,
            owner: NodeId(0),
            occurrence: 0,
        };
        match g.clone().on_transmission() {
            TxResult::Continue(next) => {
                assert_eq!(next.c_resel, 4);
                assert_eq!(next.nominal(next.occurrence), 105);
            }
            other => panic!("{other:?}"),
        }
        let last = Grant {
            c_resel: 1,
            ..g.clone()
        };
        assert_eq!(last.on_transmission(), TxResult::ReselectionNeeded);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SpsParams::default();
        for _ in 0..200 {
            let c = p.draw_c_resel(&mut rng);
            assert!((5..=15).contains(&c));
        }
    }

    #[test]
    fn slss_occurrence_deferred() {
        let g = Grant {
            csr: Csr {
                subframe: 60,
                subch_start: 0,
                l_subch: 1,
            },
            period: 100,
            c_resel: 5,
            mode: SlMode::Mode4,
            owner: NodeId(0),
            occurrence: 1,
        };
        assert_eq!(g.fire_tick(&GridConfig::default()), 161);
    }

    const TIMING: SpsTiming = SpsTiming {
        p_step: 100,
        t_p: 4,
    };

    fn m3_request(owner: u32, period: u64, t_l: u64) -> Mode3Request {
        Mode3Request {
            owner: NodeId(owner),
            tb_bytes: 335,
            period,
            max_latency: t_l,
        }
    }

    #[test]
    fn mode3_two_ues_disjoint() {
        let g = grid(2);
        let p = SpsParams::default();
        let mut s = Mode3Scheduler::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = s.schedule(
            1000,
            &[m3_request(1, 100, 100), m3_request(2, 100, 100)],
            &[],
            |_| 0.0,
            &p,
            &TIMING,
            &g,
            &mut rng,
        );
        let a = out[0].as_ref().unwrap().grant.csr;
        let b = out[1].as_ref().unwrap().grant.csr;
        let same_residue = (a.subframe as i64 - b.subframe as i64).rem_euclid(100) == 0;
        assert!(!(same_residue && a.overlaps_subch(b.subch_start, b.l_subch)));
    }

    #[test]
    fn mode3_avoids_issued_resource() {
        let g = grid(1);
        let p = SpsParams::default();
        let mut s = Mode3Scheduler::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let first = s.schedule(
            1000,
            &[m3_request(1, 100, 100)],
            &[],
            |_| 0.0,
            &p,
            &TIMING,
            &g,
            &mut rng,
        );
        let a = first[0].as_ref().unwrap().grant.csr;
        for _ in 0..20 {
            let r = s.schedule(
                1000,
                &[m3_request(2, 100, 100)],
                &[],
                |_| 0.0,
                &p,
                &TIMING,
                &g,
                &mut rng,
            );
            let b = r[0].as_ref().unwrap();
            assert_ne!(b.grant.csr.subframe % 100, a.subframe % 100);
            s.release(b.id);
        }
    }

    #[test]
    fn mode3_saturation_denies() {
        // single subchannel, T_L = 20: 17 usable subframes in [n+4, n+20]
        let g = grid(1);
        let p = SpsParams::default();
        let mut s = Mode3Scheduler::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut granted = 0;
        let mut denied = 0;
        for ue in 0..40 {
            match &s.schedule(
                1000,
                &[m3_request(ue, 100, 20)],
                &[],
                |_| 0.0,
                &p,
                &TIMING,
                &g,
                &mut rng,
            )[0]
            {
                Ok(_) => granted += 1,
                Err(SimError::GrantDenied(_)) => denied += 1,
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(granted, 17);
        assert_eq!(denied, 23);
        assert_eq!(s.denied, 23);
    }

    #[test]
    fn derived_interval_rules() {
        assert_eq!(derived_interval(100, 100).unwrap(), 100);
        assert_eq!(derived_interval(50, 200).unwrap(), 100);
        assert!(derived_interval(0, 100).is_err());
        assert!(derived_interval(33, 10).is_err());
    }
}
