//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! A failing criterion is reported but does not fail the process; the
//! report is the artefact. Set `ACCEPTANCE_STRICT=1` to exit nonzero on
//! any FAIL.

use std::time::{Duration, Instant};

use cv2x_core::config::{ModePolicy, ScenarioConfig};
use cv2x_core::sim::{self, Simulation};
use cv2x_core::sweep::{self, Aggregate, SweepRow};
use cv2x_core::validation;

const RATES: [f64; 4] = [1.0, 2.0, 5.0, 10.0];
const SEEDS: u64 = 10;

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        println!(
            "[{}] {id:>2} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            self.failed.push(id);
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.3} s", d.as_secs_f64())
}

fn agg(aggs: &[Aggregate], policy: ModePolicy, rate: f64) -> &Aggregate {
    aggs.iter()
        .find(|a| a.policy == policy && a.cam_rate_hz == rate)
        .expect("sweep covers every point")
}

fn mean_of(aggs: &[Aggregate], policy: ModePolicy, rate: f64, key: &str) -> f64 {
    agg(aggs, policy, rate).p_r_mean(key).unwrap_or(f64::NAN)
}

fn grid(r: &mut Report) {
    let t = Instant::now();
    let s = validation::grid_suite();
    let dt = t.elapsed();
    r.line(
        1,
        "PRB index exactness",
        s.passed() && dt < Duration::from_secs(1),
        format!("{} cases, {} deviations, {}", s.cases, s.failures, secs(dt)),
    );
}

fn oracle(r: &mut Report) {
    let t = Instant::now();
    let s = validation::oracle_suite(1000, 1);
    let dt = t.elapsed();
    r.line(
        2,
        "exclusion matches brute-force enumeration",
        s.passed() && s.cases == 1000 && dt < Duration::from_secs(10),
        format!(
            "{} instances, {} mismatches, {}{}",
            s.cases,
            s.failures,
            secs(dt),
            note(&s.first_failure)
        ),
    );
}

fn floor(r: &mut Report) {
    let t = Instant::now();
    let (s, escalations) = validation::floor_suite(1000, 2);
    let dt = t.elapsed();
    r.line(
        3,
        "candidate floor after exclusion",
        s.passed() && dt < Duration::from_secs(10),
        format!(
            "{} histories, {} below floor, {} threshold escalations, {}{}",
            s.cases,
            s.failures,
            escalations,
            secs(dt),
            note(&s.first_failure)
        ),
    );
}

fn slss(r: &mut Report) {
    let mut cfg = ScenarioConfig::for_policy(ModePolicy::Switching);
    cfg.duration_s = 10.0;
    let out = Simulation::new(cfg).and_then(Simulation::run);
    match out {
        Ok(o) => {
            let s = &o.stats;
            r.line(
                4,
                "no grants or transmissions on SLSS slots",
                s.slss_grants == 0
                    && s.slss_transmissions == 0
                    && o.summary.slss_violations == 0
                    && s.transmissions > 0,
                format!(
                    "{} transmissions, {} on SLSS slots, {} grants starting on SLSS slots",
                    s.transmissions, s.slss_transmissions, s.slss_grants
                ),
            );
        }
        Err(e) => r.line(
            4,
            "no grants or transmissions on SLSS slots",
            false,
            format!("run failed: {e}"),
        ),
    }
}

fn half_duplex(r: &mut Report) {
    let aligned = validation::half_duplex_pair(0, 10);
    let offset = validation::half_duplex_pair(50, 10);
    r.line(
        5,
        "half-duplex pair",
        aligned == Some(0.0) && offset == Some(1.0),
        format!("aligned P_r {aligned:?}, offset P_r {offset:?}"),
    );
}

fn fsm(r: &mut Report) {
    let s = validation::fsm_suite();
    r.line(
        6,
        "RRC transition set",
        s.passed(),
        format!(
            "{} (context, event) checks, {} violations{}",
            s.cases,
            s.failures,
            note(&s.first_failure)
        ),
    );
}

fn note(first: &Option<String>) -> String {
    first
        .as_ref()
        .map(|f| format!("; first: {f}"))
        .unwrap_or_default()
}

fn mode_trend(r: &mut Report, aggs: &[Aggregate]) {
    let gap = |rate| {
        mean_of(aggs, ModePolicy::Mode3Only, rate, "overall")
            - mean_of(aggs, ModePolicy::Mode4Only, rate, "overall")
    };
    for rate in RATES {
        let a3 = agg(aggs, ModePolicy::Mode3Only, rate);
        let a4 = agg(aggs, ModePolicy::Mode4Only, rate);
        println!(
            "       rate {rate:>4} Hz  load {:.4}  P_r mode3 {:.5}  mode4 {:.5}  gap {:+.5}",
            a4.normalized_load.unwrap_or(f64::NAN),
            a3.p_r_mean("overall").unwrap_or(f64::NAN),
            a4.p_r_mean("overall").unwrap_or(f64::NAN),
            gap(rate)
        );
    }
    let high_ok = gap(5.0) >= 0.0 && gap(10.0) >= 0.0;
    let widening = gap(10.0) > gap(1.0);
    r.line(
        7,
        "mode 3 at least mode 4 at high load, gap widens",
        high_ok && widening,
        format!(
            "gap at 5 Hz {:+.5}, at 10 Hz {:+.5}, at 1 Hz {:+.5}",
            gap(5.0),
            gap(10.0),
            gap(1.0)
        ),
    );
}

fn latency(r: &mut Report, rows: &[SweepRow], aggs: &[Aggregate]) {
    let mut worst = [0.0f64; 2];
    let mut samples = [0usize; 2];
    let mut missing = 0;
    for row in rows
        .iter()
        .filter(|r| r.point.policy != ModePolicy::Switching)
    {
        let Some(s) = row.summary() else {
            missing += 1;
            continue;
        };
        for (i, kind) in ["cam", "alert"].iter().enumerate() {
            if let Some(l) = s.latency_ms.get(*kind) {
                worst[i] = worst[i].max(l.p95_ms);
                samples[i] += l.count;
            }
        }
    }
    let cam3 = mean_of(aggs, ModePolicy::Mode3Only, 1.0, "cam");
    let cam4 = mean_of(aggs, ModePolicy::Mode4Only, 1.0, "cam");
    let ok = missing == 0
        && worst[0] <= 100.0
        && worst[1] <= 100.0
        && samples[0] > 0
        && cam3 >= 0.95
        && cam4 >= 0.95;
    r.line(
        8,
        "p95 latency within 100 ms",
        ok,
        format!(
            "worst p95 CAM {:.1} ms over {} samples, alert {:.1} ms over {} samples; CAM P_r at 1 Hz mode3 {:.4} mode4 {:.4}",
            worst[0], samples[0], worst[1], samples[1], cam3, cam4
        ),
    );
}

fn switching_band(r: &mut Report, rows: &[SweepRow], aggs: &[Aggregate]) {
    let means: Vec<f64> = RATES
        .iter()
        .map(|&rate| mean_of(aggs, ModePolicy::Switching, rate, "overall"))
        .collect();
    let in_band = means.iter().all(|m| (0.55..=0.95).contains(m));
    let decreasing = means.windows(2).all(|w| w[1] <= w[0]);

    let (mut n3, mut sum3, mut n4, mut sum4) = (0usize, 0.0, 0usize, 0.0);
    for s in rows
        .iter()
        .filter(|r| r.point.policy == ModePolicy::Switching)
        .filter_map(SweepRow::summary)
    {
        if let Some(w) = s.switches.get("to_mode3") {
            n3 += w.count;
            sum3 += w.mean_ms * w.count as f64;
        }
        if let Some(w) = s.switches.get("to_mode4") {
            n4 += w.count;
            sum4 += w.mean_ms * w.count as f64;
        }
    }
    let (m3, m4) = (sum3 / n3.max(1) as f64, sum4 / n4.max(1) as f64);
    let faster = n3 > 0 && n4 > 0 && m3 < m4;
    let keyed: Vec<String> = RATES
        .iter()
        .map(|&rate| {
            format!(
                "{:.3}",
                mean_of(aggs, ModePolicy::Switching, rate, "switching")
            )
        })
        .collect();
    r.line(
        9,
        "switching P_r band and switch latency",
        in_band && decreasing && faster,
        format!(
            "overall P_r by rate {:?} (band {}, decreasing {}); during-switch P_r {:?}; to mode 3 {:.1} ms over {n3}, to mode 4 {:.1} ms over {n4}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>(),
            if in_band { "ok" } else { "missed" },
            if decreasing { "yes" } else { "no" },
            keyed,
            m3,
            m4
        ),
    );
}

fn determinism(r: &mut Report) {
    let mut cfg = ScenarioConfig::for_policy(ModePolicy::Switching);
    cfg.duration_s = 10.0;
    cfg.seed = 42;
    let a = sim::run(&cfg).map(|o| o.summary.to_json());
    let b = sim::run(&cfg).map(|o| o.summary.to_json());
    let ok = matches!((&a, &b), (Ok(x), Ok(y)) if x == y);
    r.line(
        10,
        "same seed, byte-identical summary",
        ok,
        format!("{} bytes per summary", a.as_ref().map_or(0, String::len)),
    );
}

fn conservation(r: &mut Report, rows: &[SweepRow]) {
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    let unbalanced: Vec<String> = rows
        .iter()
        .filter_map(|r| r.summary().map(|s| (r, s)))
        .filter(|(_, s)| !s.conservation.balanced || s.conservation.discrepancy != 0)
        .map(|(r, s)| {
            format!(
                "{} {} Hz seed {}: {}",
                r.point.policy.as_str(),
                r.point.cam_rate_hz,
                r.point.seed,
                s.conservation.discrepancy
            )
        })
        .collect();
    r.line(
        11,
        "metrics ledger balance",
        failed == 0 && unbalanced.is_empty(),
        format!(
            "{} runs, {} failed, {} unbalanced {:?}",
            rows.len(),
            failed,
            unbalanced.len(),
            unbalanced.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    grid(&mut r);
    oracle(&mut r);
    floor(&mut r);
    slss(&mut r);
    half_duplex(&mut r);
    fsm(&mut r);

    let seeds: Vec<u64> = (1..=SEEDS).collect();
    let pts = sweep::points(&ModePolicy::ALL, &RATES, &seeds);
    let base = ScenarioConfig::default();
    let t = Instant::now();
    let rows = sweep::sweep(&base, &pts, 0).expect("thread pool");
    let sweep_time = t.elapsed();
    let aggs = sweep::aggregate(&rows);

    mode_trend(&mut r, &aggs);
    latency(&mut r, &rows, &aggs);
    switching_band(&mut r, &rows, &aggs);
    determinism(&mut r);
    conservation(&mut r, &rows);
    r.line(
        12,
        "full sweep time",
        sweep_time < Duration::from_secs(300),
        format!(
            "{} runs of {} s on {} threads in {}",
            rows.len(),
            base.duration_s,
            rayon::current_num_threads(),
            secs(sweep_time)
        ),
    );

    println!(
        "acceptance: {} of 12 criteria pass; failing {:?}",
        12 - r.failed.len(),
        r.failed
    );
    if !r.failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
