//! Built-in oracle and invariant suites. Each suite runs on fixed seeds and
//! reports how many cases it checked and how many failed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    dbm_to_mw, deliver_subframe, rsrp_at, ChannelConfig, LinkState, Outcome, Transmission,
};
use crate::engine::NodeId;
use crate::facilities::MessageKind;
use crate::grid::{build_pssch_pool, prb_index, Csr, GridConfig, SciFootprint};
use crate::metrics::{Filter, Link, MetricsLedger, RxOutcome, TxFate};
use crate::oracle::{exclude_brute_force, grants_conflict};
use crate::rrc::{RrcContext, RrcEvent, RrcState, RrcTimers, SystemInfo, ALLOWED_TRANSITIONS};
use crate::sbsps::{
    enumerate_l1, exclude_reserved, l2_floor, ExclusionParams, Mode3Request, Mode3Scheduler,
    SelectionWindow, SensingEntry, SlMode, SpsParams, SpsTiming,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: u64,
    pub failures: u64,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            cases: 0,
            failures: 0,
            first_failure: None,
        }
    }

    fn check(&mut self, ok: bool, why: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(why());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

/// Every (m, j) of every grid shape against the adjacent-layout formula.
pub fn grid_suite() -> SuiteReport {
    let mut r = SuiteReport::new("grid");
    for n_subch in 1..=8 {
        for subch_size in 2..=12 {
            for rb_start in [0, 10] {
                let cfg = GridConfig {
                    n_subch,
                    subch_size,
                    subch_rb_start: rb_start,
                    ..GridConfig::default()
                };
                for m in 0..n_subch {
                    for j in 0..subch_size {
                        let expect = rb_start + m * subch_size + j + 2;
                        let got = prb_index(m, j, &cfg);
                        r.check(got.as_ref().ok() == Some(&expect), || {
                            format!("n_subch={n_subch} size={subch_size} start={rb_start} m={m} j={j}: {got:?} != {expect}")
                        });
                    }
                }
                let pool = build_pssch_pool(0, 2000, &cfg);
                r.check(pool.iter().all(|t| t % cfg.slss_period_ticks != 0), || {
                    "pool holds an SLSS slot".into()
                });
                r.check(pool.len() == 2000 - 13, || {
                    format!("pool size {}", pool.len())
                });
            }
        }
    }
    r
}

/// A small random exclusion instance: window of at most 16 subframes, at
/// most 4 subchannels, 5 sensed SCIs and `C_resel <= 5`.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    allow_full: bool,
) -> (Vec<Csr>, Vec<SensingEntry>, ExclusionParams) {
    let grid = GridConfig {
        n_subch: rng.random_range(1..=4),
        ..GridConfig::default()
    };
    let p_step = [5u64, 10, 20, 100][rng.random_range(0..4)];
    let n = rng.random_range(0..400u64);
    let t_p = rng.random_range(1..=4u64);
    let t_l = t_p + rng.random_range(0..16u64);
    let l_subch = rng.random_range(1..=grid.n_subch);
    let window = SelectionWindow::new(n, t_p, t_l);
    let l1 = enumerate_l1(&window, l_subch, &grid).unwrap_or_default();
    let c_resel = rng.random_range(1..=5u32);
    let interval = p_step * rng.random_range(1..=2u64);
    let count = rng.random_range(0..=5usize);
    let mut sensing = Vec::with_capacity(count);
    let full = allow_full && rng.random_bool(0.3);
    for _ in 0..count {
        let start = rng.random_range(0..grid.n_subch);
        let len = rng.random_range(1..=grid.n_subch - start);
        sensing.push(SensingEntry {
            subframe_z: n.saturating_sub(3 * p_step) + rng.random_range(0..3 * p_step + t_l + 1),
            subch_start: if full { 0 } else { start },
            l_subch: if full { grid.n_subch } else { len },
            rsrp_dbm: rng.random_range(-130.0..-70.0),
            rssi_dbm: rng.random_range(-110.0..-60.0),
            reserved_interval: if rng.random_bool(0.2) {
                0
            } else {
                p_step * rng.random_range(1..=3u64)
            },
        });
    }
    if full {
        // one strong SCI per subframe residue covering the whole grid
        for k in 0..p_step.min(16) {
            sensing.push(SensingEntry {
                subframe_z: n + k,
                subch_start: 0,
                l_subch: grid.n_subch,
                rsrp_dbm: -80.0,
                rssi_dbm: -75.0,
                reserved_interval: p_step,
            });
        }
    }
    let params = ExclusionParams {
        n,
        t_l,
        interval,
        p_step,
        c_resel,
        rsrp_threshold_dbm: -110.0,
        threshold_step_db: 3.0,
    };
    (l1, sensing, params)
}

/// `exclude_reserved` against the brute-force `(j, k, z)` enumeration.
pub fn oracle_suite(instances: u64, seed: u64) -> SuiteReport {
    let mut r = SuiteReport::new("sbsps_oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (l1, sensing, p) = random_instance(&mut rng, false);
        let fast = exclude_reserved(&l1, &sensing, &p).l2;
        let slow = exclude_brute_force(&l1, &sensing, &p);
        r.check(fast == slow, || {
            format!("instance {i}: {p:?}\n  fast {fast:?}\n  slow {slow:?}")
        });
    }
    r
}

/// The 20% floor on random histories, including fully reserved grids.
pub fn floor_suite(instances: u64, seed: u64) -> (SuiteReport, u64) {
    let mut r = SuiteReport::new("l2_floor");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut escalations = 0u64;
    for i in 0..instances {
        let (l1, sensing, p) = random_instance(&mut rng, true);
        let ex = exclude_reserved(&l1, &sensing, &p);
        escalations += ex.escalations as u64;
        let floor = l2_floor(l1.len());
        r.check(ex.l2.len() >= floor, || {
            format!(
                "instance {i}: |L2| = {} < {floor} (M = {})",
                ex.l2.len(),
                l1.len()
            )
        });
    }
    (r, escalations)
}

fn contexts(timers: &RrcTimers) -> Vec<RrcContext> {
    let si = |c: u32| SystemInfo {
        cell: NodeId(c),
        sib_sl: GridConfig::default(),
        sync_period_ticks: timers.sync_period,
    };
    let mut out = vec![RrcContext::idle()];
    let mut handshaking = RrcContext::idle();
    handshaking.step(&RrcEvent::CoverageGained(NodeId(100)), 0, timers);
    out.push(handshaking);
    let mut gap = RrcContext::connected(si(100), 0);
    gap.step(&RrcEvent::CoverageLost, 10, timers);
    out.push(gap);
    let connected = RrcContext::connected(si(100), 0);
    out.push(connected.clone());
    let mut inactive = connected;
    inactive.step(
        &RrcEvent::InactivityCheck,
        timers.inactivity_timeout,
        timers,
    );
    out.push(inactive);
    out
}

/// Every (context, event, instant) triple: only allowed transitions occur
/// and the state/mode/cell coupling survives. Also checks that each
/// allowed transition is reachable.
pub fn fsm_suite() -> SuiteReport {
    let mut r = SuiteReport::new("rrc_fsm");
    let timers = RrcTimers {
        si_delay: 50,
        inactivity_timeout: 500,
        sync_period: 160,
    };
    let si = |c: u32| SystemInfo {
        cell: NodeId(c),
        sib_sl: GridConfig::default(),
        sync_period_ticks: 160,
    };
    let events = [
        RrcEvent::CoverageGained(NodeId(100)),
        RrcEvent::CoverageGained(NodeId(101)),
        RrcEvent::CoverageLost,
        RrcEvent::Traffic,
        RrcEvent::InactivityCheck,
        RrcEvent::HandshakeComplete(si(100)),
        RrcEvent::HandshakeComplete(si(101)),
    ];
    let mut seen = Vec::new();
    for ctx in contexts(&timers) {
        for ev in &events {
            for now in [10, 49, 50, 159, 160, 499, 500, 1000] {
                let mut c = ctx.clone();
                let out = c.step(ev, now, &timers);
                if let Some(tr) = out.transition {
                    r.check(ALLOWED_TRANSITIONS.contains(&tr), || {
                        format!("{:?} --{}--> {:?} at {now}", tr.0, ev.name(), tr.1)
                    });
                    if !seen.contains(&tr) {
                        seen.push(tr);
                    }
                }
                let inv = c.check_invariants();
                r.check(inv.is_ok(), || {
                    format!("{:?} after {} at {now}: {inv:?}", ctx.state, ev.name())
                });
            }
        }
    }
    for tr in ALLOWED_TRANSITIONS {
        r.check(seen.contains(&tr), || {
            format!("transition {:?} -> {:?} never reached", tr.0, tr.1)
        });
    }
    let self_loops = RrcState::ALL
        .iter()
        .filter(|s| seen.contains(&(**s, **s)))
        .count();
    r.check(self_loops == 0, || "a self transition was reported".into());
    r
}

/// Random mode-3 workloads: no issued grant may share a nominal
/// occurrence with another active grant of the same cell.
pub fn mode3_suite(workloads: u64, seed: u64) -> SuiteReport {
    let mut r = SuiteReport::new("mode3_no_overlap");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridConfig::default();
    let params = SpsParams::default();
    let timing = SpsTiming {
        p_step: 100,
        t_p: 4,
    };
    for w in 0..workloads {
        let mut s = Mode3Scheduler::new();
        let mut now = rng.random_range(0..1000u64);
        for step in 0..60 {
            let period = [0u64, 100, 200, 500, 1000][rng.random_range(0..5)];
            let req = Mode3Request {
                owner: NodeId(rng.random_range(0..40)),
                tb_bytes: rng.random_range(50..1200),
                period,
                max_latency: rng.random_range(20..=100),
            };
            let res = s.schedule(
                now,
                &[req],
                &[],
                |_| -100.0,
                &params,
                &timing,
                &grid,
                &mut rng,
            );
            if let Some(Ok(issued)) = res.into_iter().next() {
                let clash = s
                    .active()
                    .filter(|(id, g)| *id != issued.id && grants_conflict(&issued.grant, g))
                    .count();
                r.check(clash == 0, || {
                    format!(
                        "workload {w} step {step}: grant {:?} overlaps {clash}",
                        issued.grant
                    )
                });
            } else {
                r.cases += 1;
            }
            now += rng.random_range(0..30u64);
        }
    }
    r
}

/// Two vehicles 50 m apart exchanging 10 Hz CAMs for `seconds` on fixed
/// periodic grants; the second vehicle's grant sits `offset` slots after
/// the first's on a disjoint subchannel. Returns the pairwise P_r.
pub fn half_duplex_pair(offset: u64, seconds: u64) -> Option<f64> {
    let grid = GridConfig::default();
    let ch = ChannelConfig::default();
    let period = 100;
    let first = 5;
    let nodes = [NodeId(0), NodeId(1)];
    let csr = [
        Csr::new(first, 0, 2, &grid).ok()?,
        Csr::new(first + offset, 2, 2, &grid).ok()?,
    ];
    let power = dbm_to_mw(rsrp_at(
        ch.tx_power_dbm,
        50.0,
        ch.highway.pathloss_exponent,
        ch.carrier_ghz,
    ));
    let link = |_: NodeId, _: NodeId| LinkState {
        distance_m: 50.0,
        range_m: ch.highway.reception_range_m,
        rx_power_mw: power,
    };
    let mut ledger = MetricsLedger::new(0..seconds * 1000, 1.0);
    let mut trace = 0;
    let mut out = Vec::new();
    for t in 0..seconds * 1000 {
        let mut txs = Vec::new();
        for (k, c) in csr.iter().enumerate() {
            if t >= c.subframe && (t - c.subframe) % period == 0 {
                trace += 1;
                ledger.on_generated(
                    trace,
                    nodes[k],
                    MessageKind::Cam,
                    Link::Sidelink,
                    SlMode::Mode4,
                    t,
                    false,
                    true,
                );
                ledger.on_fate(trace, nodes[k], MessageKind::Cam, TxFate::Transmitted(t), 1);
                txs.push(Transmission {
                    sender: nodes[k],
                    csr: c.at(t),
                    msg_id: trace,
                    sci: SciFootprint::new(),
                    tx_tick: t,
                    reserved_interval: period,
                });
            }
        }
        if txs.is_empty() {
            continue;
        }
        deliver_subframe(&txs, &nodes, &ch, link, &mut out);
        for d in &out {
            let o = match d.outcome {
                Outcome::Received => RxOutcome::Received,
                Outcome::HalfDuplexLoss => RxOutcome::HalfDuplex,
                Outcome::OutOfRange => RxOutcome::OutOfRange,
                Outcome::CollisionLoss => RxOutcome::Collision,
            };
            ledger.on_rx(txs[d.tx].msg_id, txs[d.tx].sender, d.receiver, t, o);
        }
    }
    ledger.p_r(&Filter::default())
}

pub fn half_duplex_suite() -> SuiteReport {
    let mut r = SuiteReport::new("half_duplex");
    let aligned = half_duplex_pair(0, 10);
    r.check(aligned == Some(0.0), || {
        format!("aligned pair P_r {aligned:?}")
    });
    let offset = half_duplex_pair(50, 10);
    r.check(offset == Some(1.0), || {
        format!("offset pair P_r {offset:?}")
    });
    r
}

/// Every suite with the default sizes.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        grid_suite(),
        oracle_suite(1000, seed),
        floor_suite(1000, seed ^ 0x5eed).0,
        fsm_suite(),
        mode3_suite(50, seed ^ 0x3333),
        half_duplex_suite(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for s in run_all(1) {
            assert!(s.passed(), "{}: {:?}", s.name, s.first_failure);
        }
    }

    #[test]
    fn random_instances_exercise_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut excluded = 0;
        let mut escalated = 0;
        for _ in 0..1000 {
            let (l1, sensing, p) = random_instance(&mut rng, false);
            let ex = exclude_reserved(&l1, &sensing, &p);
            excluded += usize::from(ex.l2.len() < l1.len());
            escalated += usize::from(ex.escalations > 0);
        }
        assert!(excluded > 100, "{excluded}");
        assert!(escalated > 5, "{escalated}");
    }

    #[test]
    fn oracle_catches_a_wrong_interval() {
        // feeding the oracle a different reservation interval must be noticed
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut differ = 0;
        for _ in 0..300 {
            let (l1, sensing, p) = random_instance(&mut rng, false);
            let fast = exclude_reserved(&l1, &sensing, &p).l2;
            let skewed = ExclusionParams {
                interval: p.interval + 1,
                ..p
            };
            if exclude_brute_force(&l1, &sensing, &skewed) != fast {
                differ += 1;
            }
        }
        assert!(differ > 0);
    }
}
