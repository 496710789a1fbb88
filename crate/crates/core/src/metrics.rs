//! Transmission/reception ledger, reception probability and latency
//! statistics, and the run output files.
//!
//! Output schema (version [`SCHEMA_VERSION`]):
//!
//! * `summary.json`: run identity (config hash, seed, policy), the
//!   normalized load (offered bytes per second over the pool capacity in
//!   bytes per second), reception probabilities, latency summaries in ms,
//!   raw counts, mode-switch statistics and the conservation check.
//!   Undefined metrics are omitted rather than reported as zero.
//! * `timeseries.csv`: per 100 ms window of message creation and per
//!   sidelink mode, reception opportunities, receptions, P_r and mean
//!   latency.
//! * `losses.csv`: outcome counts by link, mode and message kind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::NodeId;
use crate::error::{Result, SimError};
use crate::facilities::MessageKind;
use crate::sbsps::SlMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RxOutcome {
    Received,
    HalfDuplex,
    Collision,
    OutOfRange,
    Expired,
    Denied,
    NoCoverage,
    UuAborted,
}

impl RxOutcome {
    pub const ALL: [RxOutcome; 8] = [
        RxOutcome::Received,
        RxOutcome::HalfDuplex,
        RxOutcome::Collision,
        RxOutcome::OutOfRange,
        RxOutcome::Expired,
        RxOutcome::Denied,
        RxOutcome::NoCoverage,
        RxOutcome::UuAborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RxOutcome::Received => "received",
            RxOutcome::HalfDuplex => "half_duplex",
            RxOutcome::Collision => "collision",
            RxOutcome::OutOfRange => "out_of_range",
            RxOutcome::Expired => "expired",
            RxOutcome::Denied => "denied",
            RxOutcome::NoCoverage => "no_coverage",
            RxOutcome::UuAborted => "uu_aborted",
        }
    }

    /// Whether the pair counts as an intended reception (N_t).
    pub fn is_opportunity(self) -> bool {
        self != RxOutcome::OutOfRange
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Sidelink,
    Uu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxFate {
    Pending,
    Transmitted(u64),
    Expired(u64),
    Denied(u64),
}

/// One tracked message leg at its sender.
#[derive(Debug, Clone, PartialEq)]
pub struct TxRecord {
    pub trace_id: u64,
    pub sender: NodeId,
    pub kind: MessageKind,
    pub link: Link,
    pub mode: SlMode,
    pub created_at: u64,
    /// Generated while the sender had a mode switch pending.
    pub switching: bool,
    pub fate: TxFate,
    pub expected_rx: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RxRecord {
    pub trace_id: u64,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub tick: u64,
    pub outcome: RxOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FateCounts {
    pub generated: u64,
    pub transmitted: u64,
    pub expired: u64,
    pub denied: u64,
}

impl FateCounts {
    pub fn unresolved(&self) -> i64 {
        self.generated as i64 - (self.transmitted + self.expired + self.denied) as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchRecord {
    pub node: NodeId,
    pub to: SlMode,
    pub requested_at: u64,
    pub completed_at: u64,
}

/// Which rx records a statistic covers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Filter {
    pub mode: Option<SlMode>,
    pub kind: Option<MessageKind>,
    pub link: Option<Link>,
    pub switching: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile over sorted samples.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn latency_summary(samples_ticks: &mut [u64], ms_per_tick: f64) -> Option<LatencySummary> {
    if samples_ticks.is_empty() {
        return None;
    }
    samples_ticks.sort_unstable();
    let n = samples_ticks.len();
    let mean = samples_ticks.iter().sum::<u64>() as f64 / n as f64;
    Some(LatencySummary {
        count: n,
        mean_ms: mean * ms_per_tick,
        p50_ms: percentile(samples_ticks, 0.5) as f64 * ms_per_tick,
        p95_ms: percentile(samples_ticks, 0.95) as f64 * ms_per_tick,
        max_ms: samples_ticks[n - 1] as f64 * ms_per_tick,
    })
}

pub struct MetricsLedger {
    /// Creation ticks of tracked messages.
    pub window: Range<u64>,
    pub ms_per_tick: f64,
    tx: BTreeMap<(u64, NodeId), TxRecord>,
    rx: Vec<RxRecord>,
    /// All messages, tracked or not.
    pub fates: BTreeMap<MessageKind, FateCounts>,
    /// Outcome counts over every sender/receiver pair, tracked or not.
    pub all_outcomes: BTreeMap<RxOutcome, u64>,
    pub switches: Vec<SwitchRecord>,
    pub slss_violations: u64,
    pub problems: Vec<String>,
}

impl MetricsLedger {
    pub fn new(window: Range<u64>, ms_per_tick: f64) -> Self {
        MetricsLedger {
            window,
            ms_per_tick,
            tx: BTreeMap::new(),
            rx: Vec::new(),
            fates: BTreeMap::new(),
            all_outcomes: BTreeMap::new(),
            switches: Vec::new(),
            slss_violations: 0,
            problems: Vec::new(),
        }
    }

    pub fn tracks(&self, created_at: u64) -> bool {
        self.window.contains(&created_at)
    }

    pub fn tx_records(&self) -> impl Iterator<Item = &TxRecord> {
        self.tx.values()
    }

    pub fn rx_records(&self) -> &[RxRecord] {
        &self.rx
    }

    pub fn is_tracked(&self, trace_id: u64, sender: NodeId) -> bool {
        self.tx.contains_key(&(trace_id, sender))
    }

    /// A message leg enters its sender. `tracked` legs get full per-pair
    /// records; the rest only feed the aggregate counters.
    #[allow(clippy::too_many_arguments)]
    pub fn on_generated(
        &mut self,
        trace_id: u64,
        sender: NodeId,
        kind: MessageKind,
        link: Link,
        mode: SlMode,
        created_at: u64,
        switching: bool,
        tracked: bool,
    ) {
        self.fates.entry(kind).or_default().generated += 1;
        if tracked {
            self.tx.insert(
                (trace_id, sender),
                TxRecord {
                    trace_id,
                    sender,
                    kind,
                    link,
                    mode,
                    created_at,
                    switching,
                    fate: TxFate::Pending,
                    expected_rx: 0,
                },
            );
        }
    }

    /// Resolves a leg at its sender. `expected_rx` is the number of
    /// receiver records that will be written for it.
    pub fn on_fate(
        &mut self,
        trace_id: u64,
        sender: NodeId,
        kind: MessageKind,
        fate: TxFate,
        expected_rx: u32,
    ) {
        let c = self.fates.entry(kind).or_default();
        match fate {
            TxFate::Transmitted(_) => c.transmitted += 1,
            TxFate::Expired(_) => c.expired += 1,
            TxFate::Denied(_) => c.denied += 1,
            TxFate::Pending => {}
        }
        if let Some(rec) = self.tx.get_mut(&(trace_id, sender)) {
            if rec.fate != TxFate::Pending {
                self.problems
                    .push(format!("trace {trace_id} from {sender} resolved twice"));
            }
            rec.fate = fate;
            rec.expected_rx = expected_rx;
        }
    }

    /// Mode recorded for a tracked leg, if any.
    pub fn mode_of(&self, trace_id: u64, sender: NodeId) -> Option<SlMode> {
        self.tx.get(&(trace_id, sender)).map(|r| r.mode)
    }

    pub fn set_mode(&mut self, trace_id: u64, sender: NodeId, mode: SlMode) {
        if let Some(r) = self.tx.get_mut(&(trace_id, sender)) {
            r.mode = mode;
        }
    }

    /// Counts an outcome of an untracked pair.
    pub fn count_outcome(&mut self, outcome: RxOutcome) {
        *self.all_outcomes.entry(outcome).or_default() += 1;
    }

    pub fn on_rx(
        &mut self,
        trace_id: u64,
        sender: NodeId,
        receiver: NodeId,
        tick: u64,
        outcome: RxOutcome,
    ) {
        *self.all_outcomes.entry(outcome).or_default() += 1;
        if self.tx.contains_key(&(trace_id, sender)) {
            self.rx.push(RxRecord {
                trace_id,
                sender,
                receiver,
                tick,
                outcome,
            });
        }
    }

    fn matching(&self, f: &Filter) -> impl Iterator<Item = (&RxRecord, &TxRecord)> + '_ {
        let f = *f;
        self.rx.iter().filter_map(move |r| {
            let t = self.tx.get(&(r.trace_id, r.sender))?;
            let ok = f.mode.is_none_or(|m| m == t.mode)
                && f.kind.is_none_or(|k| k == t.kind)
                && f.link.is_none_or(|l| l == t.link)
                && f.switching.is_none_or(|s| s == t.switching);
            ok.then_some((r, t))
        })
    }

    /// `(N_r, N_t)` under the filter.
    pub fn counts(&self, f: &Filter) -> (u64, u64) {
        let mut nr = 0;
        let mut nt = 0;
        for (r, _) in self.matching(f) {
            if r.outcome.is_opportunity() {
                nt += 1;
                if r.outcome == RxOutcome::Received {
                    nr += 1;
                }
            }
        }
        (nr, nt)
    }

    /// Reception probability; `None` when no intended reception exists.
    pub fn p_r(&self, f: &Filter) -> Option<f64> {
        let (nr, nt) = self.counts(f);
        (nt > 0).then(|| nr as f64 / nt as f64)
    }

    /// End-to-end latency (receive tick minus original creation tick).
    pub fn e2e_latency(&self, f: &Filter) -> Option<LatencySummary> {
        let mut samples: Vec<u64> = self
            .matching(f)
            .filter(|(r, _)| r.outcome == RxOutcome::Received)
            .map(|(r, t)| r.tick - t.created_at)
            .collect();
        latency_summary(&mut samples, self.ms_per_tick)
    }

    /// Checks the ledger balance: every leg resolved exactly once, every
    /// resolved leg has exactly its expected receiver records, receptions
    /// only for transmitted legs, and the aggregate fate counters add up.
    /// Returns the total discrepancy and a description of each mismatch.
    pub fn conservation(&self, in_flight: &BTreeMap<MessageKind, u64>) -> (u64, Vec<String>) {
        let mut issues = self.problems.clone();
        let mut per_leg: BTreeMap<(u64, NodeId), (u32, bool)> = BTreeMap::new();
        for r in &self.rx {
            let e = per_leg.entry((r.trace_id, r.sender)).or_default();
            e.0 += 1;
            e.1 |= r.outcome == RxOutcome::Received;
        }
        let mut discrepancy = 0u64;
        for (key, t) in &self.tx {
            let (n, any_rx) = per_leg.get(key).copied().unwrap_or_default();
            if t.fate == TxFate::Pending {
                discrepancy += 1;
                issues.push(format!(
                    "trace {} from {} never resolved",
                    t.trace_id, t.sender
                ));
                continue;
            }
            if n != t.expected_rx {
                discrepancy += n.abs_diff(t.expected_rx) as u64;
                issues.push(format!(
                    "trace {} from {}: {} receiver records, expected {}",
                    t.trace_id, t.sender, n, t.expected_rx
                ));
            }
            if any_rx && !matches!(t.fate, TxFate::Transmitted(_)) && t.link == Link::Sidelink {
                discrepancy += 1;
                issues.push(format!(
                    "trace {} from {} received without transmission",
                    t.trace_id, t.sender
                ));
            }
        }
        for (kind, c) in &self.fates {
            let open = in_flight.get(kind).copied().unwrap_or(0) as i64;
            let gap = c.unresolved() - open;
            if gap != 0 {
                discrepancy += gap.unsigned_abs();
                issues.push(format!(
                    "{}: generated {} != transmitted {} + expired {} + denied {} + in flight {}",
                    kind.as_str(),
                    c.generated,
                    c.transmitted,
                    c.expired,
                    c.denied,
                    open
                ));
            }
        }
        discrepancy += self.problems.len() as u64;
        (discrepancy, issues)
    }

    fn switch_mean_ms(&self, to: SlMode) -> Option<SwitchStats> {
        let lat: Vec<u64> = self
            .switches
            .iter()
            .filter(|s| s.to == to)
            .map(|s| s.completed_at - s.requested_at)
            .collect();
        (!lat.is_empty()).then(|| SwitchStats {
            count: lat.len(),
            mean_ms: lat.iter().sum::<u64>() as f64 / lat.len() as f64 * self.ms_per_tick,
        })
    }

    pub fn summary(&self, ident: RunIdent, in_flight: &BTreeMap<MessageKind, u64>) -> Summary {
        let sl = Link::Sidelink;
        let p = |f: Filter| self.p_r(&f);
        let mut p_r = BTreeMap::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                p_r.insert(k.to_string(), v);
            }
        };
        put("overall", p(Filter::default()));
        put(
            "mode3",
            p(Filter {
                mode: Some(SlMode::Mode3),
                link: Some(sl),
                ..Filter::default()
            }),
        );
        put(
            "mode4",
            p(Filter {
                mode: Some(SlMode::Mode4),
                link: Some(sl),
                ..Filter::default()
            }),
        );
        put(
            "switching",
            p(Filter {
                switching: Some(true),
                link: Some(sl),
                ..Filter::default()
            }),
        );
        put(
            "cam",
            p(Filter {
                kind: Some(MessageKind::Cam),
                ..Filter::default()
            }),
        );
        put(
            "alert",
            p(Filter {
                kind: Some(MessageKind::Alert),
                link: Some(sl),
                ..Filter::default()
            }),
        );
        put(
            "uu",
            p(Filter {
                link: Some(Link::Uu),
                ..Filter::default()
            }),
        );

        let mut latency = BTreeMap::new();
        let mut lat = |k: &str, f: Filter| {
            if let Some(s) = self.e2e_latency(&f) {
                latency.insert(k.to_string(), s);
            }
        };
        for (name, mode) in [("mode3", SlMode::Mode3), ("mode4", SlMode::Mode4)] {
            for kind in [MessageKind::Cam, MessageKind::Alert] {
                lat(
                    &format!("{}.{}", kind.as_str(), name),
                    Filter {
                        mode: Some(mode),
                        kind: Some(kind),
                        link: Some(sl),
                        ..Filter::default()
                    },
                );
            }
        }
        lat(
            "cam",
            Filter {
                kind: Some(MessageKind::Cam),
                link: Some(sl),
                ..Filter::default()
            },
        );
        lat(
            "alert",
            Filter {
                kind: Some(MessageKind::Alert),
                link: Some(sl),
                ..Filter::default()
            },
        );
        lat(
            "uu",
            Filter {
                link: Some(Link::Uu),
                ..Filter::default()
            },
        );

        let mut outcomes = BTreeMap::new();
        for r in &self.rx {
            *outcomes
                .entry(r.outcome.as_str().to_string())
                .or_insert(0u64) += 1;
        }
        let (nr, nt) = self.counts(&Filter::default());
        let (discrepancy, issues) = self.conservation(in_flight);
        let mut switches = BTreeMap::new();
        if let Some(s) = self.switch_mean_ms(SlMode::Mode3) {
            switches.insert("to_mode3".to_string(), s);
        }
        if let Some(s) = self.switch_mean_ms(SlMode::Mode4) {
            switches.insert("to_mode4".to_string(), s);
        }
        Summary {
            schema_version: SCHEMA_VERSION,
            config_hash: ident.config_hash,
            seed: ident.seed,
            policy: ident.policy,
            duration_s: ident.duration_s,
            normalized_load: ident.normalized_load,
            p_r,
            latency_ms: latency,
            counts: Counts {
                tracked_legs: self.tx.len() as u64,
                opportunities: nt,
                received: nr,
                outcomes,
                fates: self
                    .fates
                    .iter()
                    .map(|(k, v)| (k.as_str().to_string(), *v))
                    .collect(),
            },
            switches,
            slss_violations: self.slss_violations,
            conservation: Conservation {
                balanced: discrepancy == 0,
                discrepancy,
                issues: issues.into_iter().take(20).collect(),
            },
        }
    }

    /// Per-window, per-mode rows of the time-series file.
    pub fn timeseries_csv(&self, window_ticks: u64) -> String {
        let mut rows: BTreeMap<(u64, SlMode), (u64, u64, u64)> = BTreeMap::new();
        for (r, t) in self.matching(&Filter {
            link: Some(Link::Sidelink),
            ..Filter::default()
        }) {
            if !r.outcome.is_opportunity() {
                continue;
            }
            let w = (t.created_at / window_ticks) * window_ticks;
            let e = rows.entry((w, t.mode)).or_default();
            e.0 += 1;
            if r.outcome == RxOutcome::Received {
                e.1 += 1;
                e.2 += r.tick - t.created_at;
            }
        }
        let mut out = String::from(
            "schema_version,window_start_ms,mode,opportunities,received,p_r,mean_latency_ms\n",
        );
        for ((w, mode), (nt, nr, lat)) in rows {
            let p = if nt > 0 {
                format!("{:.6}", nr as f64 / nt as f64)
            } else {
                String::new()
            };
            let l = if nr > 0 {
                format!("{:.3}", lat as f64 / nr as f64 * self.ms_per_tick)
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{SCHEMA_VERSION},{},{},{nt},{nr},{p},{l}",
                w as f64 * self.ms_per_tick,
                mode_str(mode)
            );
        }
        out
    }

    pub fn losses_csv(&self) -> String {
        let mut rows: BTreeMap<(Link, SlMode, MessageKind, RxOutcome), u64> = BTreeMap::new();
        for r in &self.rx {
            if let Some(t) = self.tx.get(&(r.trace_id, r.sender)) {
                *rows.entry((t.link, t.mode, t.kind, r.outcome)).or_default() += 1;
            }
        }
        let mut out = String::from("schema_version,link,mode,kind,outcome,count\n");
        for ((link, mode, kind, outcome), n) in rows {
            let link = match link {
                Link::Sidelink => "sidelink",
                Link::Uu => "uu",
            };
            let _ = writeln!(
                out,
                "{SCHEMA_VERSION},{link},{},{},{},{n}",
                mode_str(mode),
                kind.as_str(),
                outcome.as_str()
            );
        }
        out
    }
}

pub fn mode_str(m: SlMode) -> &'static str {
    match m {
        SlMode::Mode3 => "mode3",
        SlMode::Mode4 => "mode4",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunIdent {
    pub config_hash: String,
    pub seed: u64,
    pub policy: String,
    pub duration_s: f64,
    pub normalized_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchStats {
    pub count: usize,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counts {
    pub tracked_legs: u64,
    pub opportunities: u64,
    pub received: u64,
    pub outcomes: BTreeMap<String, u64>,
    pub fates: BTreeMap<String, FateCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conservation {
    pub balanced: bool,
    pub discrepancy: u64,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub policy: String,
    pub duration_s: f64,
    pub normalized_load: f64,
    pub p_r: BTreeMap<String, f64>,
    pub latency_ms: BTreeMap<String, LatencySummary>,
    pub counts: Counts,
    pub switches: BTreeMap<String, SwitchStats>,
    pub slss_violations: u64,
    pub conservation: Conservation,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Writes `summary.json`, `timeseries.csv` and `losses.csv` into `dir`.
pub fn write_outputs(
    dir: &Path,
    summary: &Summary,
    ledger: &MetricsLedger,
    window_ticks: u64,
) -> Result<()> {
    let io = |e: std::io::Error, what: &Path| SimError::Io(format!("{}: {e}", what.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let files = [
        ("summary.json", summary.to_json()),
        ("timeseries.csv", ledger.timeseries_csv(window_ticks)),
        ("losses.csv", ledger.losses_csv()),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| io(e, &p))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger_with(outcomes: &[RxOutcome]) -> MetricsLedger {
        let mut l = MetricsLedger::new(0..1000, 1.0);
        l.on_generated(
            1,
            NodeId(0),
            MessageKind::Cam,
            Link::Sidelink,
            SlMode::Mode4,
            100,
            false,
            true,
        );
        l.on_fate(
            1,
            NodeId(0),
            MessageKind::Cam,
            TxFate::Transmitted(110),
            outcomes.len() as u32,
        );
        for (i, &o) in outcomes.iter().enumerate() {
            l.on_rx(1, NodeId(0), NodeId(i as u32 + 1), 112, o);
        }
        l
    }

    #[test]
    fn p_r_ratio() {
        let mut o = vec![RxOutcome::Received; 90];
        o.extend(vec![RxOutcome::Collision; 10]);
        o.extend(vec![RxOutcome::OutOfRange; 7]);
        let l = ledger_with(&o);
        assert_eq!(l.p_r(&Filter::default()), Some(0.9));
        let (d, issues) = l.conservation(&BTreeMap::new());
        assert_eq!(d, 0, "{issues:?}");
    }

    #[test]
    fn p_r_absent_without_intended_receivers() {
        let l = ledger_with(&[RxOutcome::OutOfRange]);
        assert_eq!(l.p_r(&Filter::default()), None);
        assert_eq!(
            l.p_r(&Filter {
                mode: Some(SlMode::Mode3),
                ..Filter::default()
            }),
            None
        );
    }

    #[test]
    fn half_duplex_pair_gives_zero() {
        let l = ledger_with(&[RxOutcome::HalfDuplex]);
        assert_eq!(l.p_r(&Filter::default()), Some(0.0));
    }

    #[test]
    fn latency_is_rx_minus_creation() {
        let l = ledger_with(&[RxOutcome::Received]);
        let s = l.e2e_latency(&Filter::default()).unwrap();
        assert_eq!((s.count, s.mean_ms, s.max_ms), (1, 12.0, 12.0));
        // relayed alert: RSU creation at 0, PM rx at 40
        let mut l = MetricsLedger::new(0..1000, 1.0);
        l.on_generated(
            7,
            NodeId(0),
            MessageKind::Alert,
            Link::Sidelink,
            SlMode::Mode3,
            0,
            false,
            true,
        );
        l.on_fate(7, NodeId(0), MessageKind::Alert, TxFate::Transmitted(38), 1);
        l.on_rx(7, NodeId(0), NodeId(3), 40, RxOutcome::Received);
        assert_eq!(l.e2e_latency(&Filter::default()).unwrap().p50_ms, 40.0);
    }

    #[test]
    fn percentiles() {
        let mut v: Vec<u64> = (1..=100).collect();
        let s = latency_summary(&mut v, 1.0).unwrap();
        assert_eq!((s.p50_ms, s.p95_ms, s.max_ms), (50.0, 95.0, 100.0));
        assert!(latency_summary(&mut [], 1.0).is_none());
    }

    #[test]
    fn imbalance_is_reported() {
        let mut l = ledger_with(&[RxOutcome::Received]);
        l.on_rx(1, NodeId(0), NodeId(9), 113, RxOutcome::Received);
        assert!(l.conservation(&BTreeMap::new()).0 > 0);
        let mut l = MetricsLedger::new(0..1000, 1.0);
        l.on_generated(
            2,
            NodeId(0),
            MessageKind::Cam,
            Link::Sidelink,
            SlMode::Mode4,
            5,
            false,
            true,
        );
        assert!(l.conservation(&BTreeMap::new()).0 > 0);
    }

    #[test]
    fn empty_run_outputs() {
        let l = MetricsLedger::new(0..1000, 1.0);
        let ident = RunIdent {
            config_hash: "x".into(),
            seed: 1,
            policy: "mode4_only".into(),
            duration_s: 1.0,
            normalized_load: 0.0,
        };
        let s = l.summary(ident, &BTreeMap::new());
        assert!(s.p_r.is_empty());
        assert!(s.conservation.balanced);
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &s, &l, 100).unwrap();
        for f in ["summary.json", "timeseries.csv", "losses.csv"] {
            assert!(dir.path().join(f).exists());
        }
        let json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(json["schema_version"], 1);
        assert!(json["p_r"].get("mode3").is_none());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        let l = MetricsLedger::new(0..10, 1.0);
        let ident = RunIdent {
            config_hash: String::new(),
            seed: 0,
            policy: String::new(),
            duration_s: 0.0,
            normalized_load: 0.0,
        };
        let s = l.summary(ident, &BTreeMap::new());
        assert!(matches!(
            write_outputs(&file.join("sub"), &s, &l, 100),
            Err(SimError::Io(_))
        ));
    }
}
