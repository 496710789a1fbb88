//! Load sweeps: the cross product of mode policies, CAM rates and seeds,
//! run in parallel, with per-run rows and per-point aggregates.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;

use crate::config::{ModePolicy, ScenarioConfig};
use crate::error::{Result, SimError};
use crate::metrics::Summary;
use crate::sim;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub policy: ModePolicy,
    pub cam_rate_hz: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub outcome: std::result::Result<Summary, String>,
}

impl SweepRow {
    pub fn summary(&self) -> Option<&Summary> {
        self.outcome.as_ref().ok()
    }

    pub fn p_r(&self, key: &str) -> Option<f64> {
        self.summary()?.p_r.get(key).copied()
    }
}

/// The cross product sorted by (policy, rate, seed).
pub fn points(policies: &[ModePolicy], rates: &[f64], seeds: &[u64]) -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(policies.len() * rates.len() * seeds.len());
    for &policy in policies {
        for &cam_rate_hz in rates {
            for &seed in seeds {
                out.push(SweepPoint {
                    policy,
                    cam_rate_hz,
                    seed,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.cam_rate_hz.total_cmp(&b.cam_rate_hz))
            .then(a.seed.cmp(&b.seed))
    });
    out
}

/// The configuration of one point: `base` with the policy's coverage map,
/// the CAM rate and the seed applied.
pub fn point_config(base: &ScenarioConfig, p: &SweepPoint) -> ScenarioConfig {
    let mut c = base.clone().with_policy(p.policy);
    c.cam.rate_hz = p.cam_rate_hz;
    c.seed = p.seed;
    c
}

/// Runs every point with `runner` on `threads` workers (0 picks the number
/// of cores). A failing or panicking point is recorded in its row; the
/// others are unaffected. Rows come back in point order.
pub fn sweep_with<F>(
    base: &ScenarioConfig,
    pts: &[SweepPoint],
    threads: usize,
    runner: F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(&ScenarioConfig) -> Result<Summary> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::Config(format!("--parallel: {e}")))?;
    let rows = pool.install(|| {
        pts.par_iter()
            .map(|p| {
                let cfg = point_config(base, p);
                let outcome = match catch_unwind(AssertUnwindSafe(|| {
                    cfg.validate().and_then(|_| runner(&cfg))
                })) {
                    Ok(Ok(s)) => Ok(s),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(_) => Err("run panicked".to_string()),
                };
                SweepRow { point: *p, outcome }
            })
            .collect()
    });
    Ok(rows)
}

pub fn sweep(base: &ScenarioConfig, pts: &[SweepPoint], threads: usize) -> Result<Vec<SweepRow>> {
    sweep_with(base, pts, threads, |c| sim::run(c).map(|o| o.summary))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const P_R_KEYS: [&str; 6] = ["overall", "mode3", "mode4", "switching", "cam", "alert"];

/// One row per run.
pub fn runs_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("schema_version,policy,cam_rate_hz,seed,status,normalized_load");
    for k in P_R_KEYS {
        let _ = write!(s, ",p_r_{k}");
    }
    s.push_str(",cam_latency_mean_ms,cam_latency_p95_ms,alert_latency_mean_ms,alert_latency_p95_ms,balanced,error\n");
    for r in rows {
        let p = &r.point;
        let _ = write!(
            s,
            "{},{},{},{}",
            crate::metrics::SCHEMA_VERSION,
            p.policy.as_str(),
            p.cam_rate_hz,
            p.seed
        );
        match &r.outcome {
            Ok(sum) => {
                let _ = write!(s, ",ok,{:.6}", sum.normalized_load);
                for k in P_R_KEYS {
                    let _ = write!(s, ",{}", opt(sum.p_r.get(k).copied()));
                }
                let lat = |k: &str| sum.latency_ms.get(k);
                let _ = writeln!(
                    s,
                    ",{},{},{},{},{},",
                    opt(lat("cam").map(|l| l.mean_ms)),
                    opt(lat("cam").map(|l| l.p95_ms)),
                    opt(lat("alert").map(|l| l.mean_ms)),
                    opt(lat("alert").map(|l| l.p95_ms)),
                    sum.conservation.balanced
                );
            }
            Err(e) => {
                let _ = write!(s, ",failed,");
                for _ in P_R_KEYS {
                    s.push(',');
                }
                let _ = writeln!(s, ",,,,,{}", csv_field(e));
            }
        }
    }
    s
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Statistics of one (policy, rate) point over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub policy: ModePolicy,
    pub cam_rate_hz: f64,
    pub runs: usize,
    pub failed: usize,
    pub normalized_load: Option<f64>,
    /// `(mean, stderr)` per P_r key.
    pub p_r: Vec<(&'static str, Option<(f64, f64)>)>,
    pub cam_latency_ms: Option<(f64, f64)>,
    pub alert_latency_ms: Option<(f64, f64)>,
}

impl Aggregate {
    pub fn p_r_mean(&self, key: &str) -> Option<f64> {
        self.p_r
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.map(|m| m.0))
    }
}

/// Groups rows by (policy, rate); rows must be sorted as [`points`] returns.
pub fn aggregate(rows: &[SweepRow]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    for group in rows.chunk_by(|a, b| {
        a.point.policy == b.point.policy && a.point.cam_rate_hz == b.point.cam_rate_hz
    }) {
        let ok: Vec<&Summary> = group.iter().filter_map(SweepRow::summary).collect();
        let collect = |f: &dyn Fn(&Summary) -> Option<f64>| -> Vec<f64> {
            ok.iter().filter_map(|s| f(s)).collect()
        };
        out.push(Aggregate {
            policy: group[0].point.policy,
            cam_rate_hz: group[0].point.cam_rate_hz,
            runs: group.len(),
            failed: group.len() - ok.len(),
            normalized_load: mean_stderr(&collect(&|s| Some(s.normalized_load))).map(|m| m.0),
            p_r: P_R_KEYS
                .iter()
                .map(|&k| (k, mean_stderr(&collect(&|s| s.p_r.get(k).copied()))))
                .collect(),
            cam_latency_ms: mean_stderr(&collect(&|s| s.latency_ms.get("cam").map(|l| l.mean_ms))),
            alert_latency_ms: mean_stderr(&collect(&|s| {
                s.latency_ms.get("alert").map(|l| l.mean_ms)
            })),
        });
    }
    out
}

pub fn aggregate_csv(aggs: &[Aggregate]) -> String {
    let mut s = String::from("schema_version,policy,cam_rate_hz,normalized_load,runs,failed");
    for k in P_R_KEYS {
        let _ = write!(s, ",p_r_{k}_mean,p_r_{k}_stderr");
    }
    s.push_str(",cam_latency_mean_ms,cam_latency_stderr_ms,alert_latency_mean_ms,alert_latency_stderr_ms\n");
    let pair = |v: Option<(f64, f64)>| format!("{},{}", opt(v.map(|m| m.0)), opt(v.map(|m| m.1)));
    for a in aggs {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            crate::metrics::SCHEMA_VERSION,
            a.policy.as_str(),
            a.cam_rate_hz,
            opt(a.normalized_load),
            a.runs,
            a.failed
        );
        for (_, v) in &a.p_r {
            let _ = write!(s, ",{}", pair(*v));
        }
        let _ = writeln!(
            s,
            ",{},{}",
            pair(a.cam_latency_ms),
            pair(a.alert_latency_ms)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_are_sorted_cross_product() {
        let pts = points(
            &[ModePolicy::Switching, ModePolicy::Mode3Only],
            &[10.0, 1.0],
            &[2, 1],
        );
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0].policy, ModePolicy::Mode3Only);
        assert_eq!((pts[0].cam_rate_hz, pts[0].seed), (1.0, 1));
        assert_eq!((pts[1].cam_rate_hz, pts[1].seed), (1.0, 2));
        assert_eq!(pts[7].policy, ModePolicy::Switching);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[0.5, 0.5, 0.5]), Some((0.5, 0.0)));
        let (m, e) = mean_stderr(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((e - 1.0).abs() < 1e-12);
        assert_eq!(mean_stderr(&[]), None);
    }

    #[test]
    fn failing_point_is_isolated() {
        let mut base = ScenarioConfig::default();
        base.duration_s = 2.0;
        let pts = points(&[ModePolicy::Mode4Only], &[1.0, 2.0], &[1, 2]);
        let rows = sweep_with(&base, &pts, 2, |c| {
            if c.seed == 2 && c.cam.rate_hz == 2.0 {
                Err(SimError::InvariantBreach("injected".into()))
            } else {
                sim::run(c).map(|o| o.summary)
            }
        })
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.outcome.is_err()).count(), 1);
        let csv = runs_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(4).unwrap().contains("failed"));
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[1].failed, 1);
    }
}
