//! Brute-force reference implementations used to cross-check the
//! optimized scheduling code. They favour directness over speed and are
//! only meant for small instances.

use crate::grid::Csr;
use crate::sbsps::{l2_floor, ExclusionParams, Grant, SensingEntry};

/// Reference exclusion: for every candidate, every sensed entry and every
/// `(j, k)` pair, tests `y + j P' = z + P_step k` directly, with `k` bounded
/// so that the matched occurrence lies in `[n, n + T_L + C_resel P']`.
/// Escalates the threshold until the floor holds or no finite-RSRP entry
/// lies above it.
pub fn exclude_brute_force(l1: &[Csr], sensing: &[SensingEntry], p: &ExclusionParams) -> Vec<Csr> {
    let floor = l2_floor(l1.len());
    let horizon = p.n + p.t_l + p.c_resel as u64 * p.interval;
    let blocked = |c: &Csr, threshold: f64| {
        sensing.iter().any(|e| {
            if e.reserved_interval == 0 || e.rsrp_dbm <= threshold {
                return false;
            }
            if !c.overlaps_subch(e.subch_start, e.l_subch) {
                return false;
            }
            if e.subframe_z > horizon {
                return false;
            }
            let k_max = (horizon - e.subframe_z) / p.p_step;
            (0..p.c_resel as u64).any(|j| {
                (0..=k_max).any(|k| {
                    let occ = e.subframe_z + p.p_step * k;
                    occ >= p.n && c.subframe + j * p.interval == occ
                })
            })
        })
    };
    let top_finite = sensing
        .iter()
        .filter(|e| e.reserved_interval > 0 && e.rsrp_dbm.is_finite())
        .map(|e| e.rsrp_dbm)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut threshold = p.rsrp_threshold_dbm;
    loop {
        let l2: Vec<Csr> = l1
            .iter()
            .filter(|c| !blocked(c, threshold))
            .copied()
            .collect();
        if l2.len() >= floor || threshold >= top_finite {
            return l2;
        }
        threshold += p.threshold_step_db;
    }
}

/// Nominal subframes of every remaining occurrence of `g`.
pub fn grant_occurrences(g: &Grant) -> Vec<u64> {
    let count = if g.period == 0 { 1 } else { g.c_resel as u64 };
    (0..count).map(|i| g.nominal(g.occurrence + i)).collect()
}

/// True when two grants share a nominal subframe on intersecting
/// subchannels.
pub fn grants_conflict(a: &Grant, b: &Grant) -> bool {
    if !a.csr.overlaps_subch(b.csr.subch_start, b.csr.l_subch) {
        return false;
    }
    let occ_b = grant_occurrences(b);
    grant_occurrences(a).iter().any(|t| occ_b.contains(t))
}
