//! Link abstraction: log-distance path loss, RSRP/RSSI and per-subframe
//! delivery resolution (half-duplex, range gate, SIR capture).

use serde::{Deserialize, Serialize};

use crate::engine::NodeId;
use crate::error::{Result, SimError};
use crate::grid::{Csr, SciFootprint};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reference distance of the log-distance model.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkProfile {
    pub pathloss_exponent: f64,
    pub reception_range_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub carrier_ghz: f64,
    pub tx_power_dbm: f64,
    pub enodeb_tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub sir_capture_db: f64,
    pub highway: LinkProfile,
    pub tunnel: LinkProfile,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            carrier_ghz: 5.9,
            tx_power_dbm: 23.0,
            enodeb_tx_power_dbm: 46.0,
            noise_dbm: -101.0,
            sir_capture_db: 3.0,
            highway: LinkProfile {
                pathloss_exponent: 2.75,
                reception_range_m: 100.0,
            },
            tunnel: LinkProfile {
                pathloss_exponent: 3.2,
                reception_range_m: 80.0,
            },
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("highway", &self.highway), ("tunnel", &self.tunnel)] {
            if p.reception_range_m <= 0.0 {
                return Err(SimError::Config(format!(
                    "channel.{name}.reception_range_m must be > 0"
                )));
            }
            if p.pathloss_exponent < 2.0 {
                return Err(SimError::Config(format!(
                    "channel.{name}.pathloss_exponent must be >= 2"
                )));
            }
        }
        if self.carrier_ghz <= 0.0 {
            return Err(SimError::Config("channel.carrier_ghz must be > 0".into()));
        }
        Ok(())
    }
}

/// Free-space loss at the reference distance, `20 log10(4 pi d0 f / c)`.
pub fn reference_loss_db(carrier_ghz: f64) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * REFERENCE_DISTANCE_M * carrier_ghz * 1e9 / SPEED_OF_LIGHT)
        .log10()
}

pub fn path_loss_db(distance_m: f64, exponent: f64, carrier_ghz: f64) -> f64 {
    let d = distance_m.max(REFERENCE_DISTANCE_M);
    reference_loss_db(carrier_ghz) + 10.0 * exponent * (d / REFERENCE_DISTANCE_M).log10()
}

/// Received reference power at `distance_m`; distances below the reference
/// distance are clamped to it.
pub fn rsrp_at(tx_power_dbm: f64, distance_m: f64, exponent: f64, carrier_ghz: f64) -> f64 {
    tx_power_dbm - path_loss_db(distance_m, exponent, carrier_ghz)
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Aggregate received strength: noise floor plus the linear sum of every
/// arrival overlapping the measured resource.
pub fn rssi_in<I>(noise_dbm: f64, arrivals_dbm: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let total = arrivals_dbm.into_iter().map(dbm_to_mw).sum::<f64>() + dbm_to_mw(noise_dbm);
    mw_to_dbm(total)
}

/// One sidelink transmission (SCI + TB) in a subframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub sender: NodeId,
    pub csr: Csr,
    pub msg_id: u64,
    pub sci: SciFootprint,
    pub tx_tick: u64,
    /// Reservation interval announced in the SCI, in ticks (0 = one-shot).
    pub reserved_interval: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Received,
    HalfDuplexLoss,
    OutOfRange,
    CollisionLoss,
}

/// Geometry of one transmitter/receiver pair as seen by the receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    pub distance_m: f64,
    pub range_m: f64,
    pub rx_power_mw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    /// Index into the transmission slice.
    pub tx: usize,
    pub receiver: NodeId,
    pub outcome: Outcome,
}

/// Resolves every (transmission, receiver) pair of one subframe into exactly
/// one outcome. Receivers that transmit in the subframe lose everything
/// (half-duplex); otherwise the range gate applies, then SIR capture against
/// all transmissions on intersecting subchannels.
pub fn deliver_subframe<F>(
    transmissions: &[Transmission],
    receivers: &[NodeId],
    cfg: &ChannelConfig,
    mut link: F,
    out: &mut Vec<Delivery>,
) where
    F: FnMut(NodeId, NodeId) -> LinkState,
{
    out.clear();
    let capture = dbm_to_mw(cfg.sir_capture_db);
    for &rx in receivers {
        let transmitting = transmissions.iter().any(|t| t.sender == rx);
        for (i, tx) in transmissions.iter().enumerate() {
            if tx.sender == rx {
                continue;
            }
            let outcome = if transmitting {
                Outcome::HalfDuplexLoss
            } else {
                let l = link(tx.sender, rx);
                if l.distance_m > l.range_m {
                    Outcome::OutOfRange
                } else {
                    let interference: f64 = transmissions
                        .iter()
                        .enumerate()
                        .filter(|&(k, o)| k != i && o.sender != rx && o.csr.collides(&tx.csr))
                        .map(|(_, o)| link(o.sender, rx).rx_power_mw)
                        .sum();
                    if interference > 0.0 && l.rx_power_mw < capture * interference {
                        Outcome::CollisionLoss
                    } else {
                        Outcome::Received
                    }
                }
            };
            out.push(Delivery {
                tx: i,
                receiver: rx,
                outcome,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;

    fn tx(sender: u32, subch: usize, len: usize) -> Transmission {
        let g = GridConfig::default();
        Transmission {
            sender: NodeId(sender),
            csr: Csr::new(5, subch, len, &g).unwrap(),
            msg_id: sender as u64,
            sci: SciFootprint::new(),
            tx_tick: 5,
            reserved_interval: 100,
        }
    }

    fn line_link(positions: &[f64]) -> impl FnMut(NodeId, NodeId) -> LinkState + '_ {
        move |a, b| {
            let d = (positions[a.0 as usize] - positions[b.0 as usize]).abs();
            LinkState {
                distance_m: d,
                range_m: 100.0,
                rx_power_mw: dbm_to_mw(rsrp_at(23.0, d, 2.75, 5.9)),
            }
        }
    }

    #[test]
    fn reference_loss_matches_free_space() {
        // 20 log10(4 pi * 1 m * 5.9 GHz / c)
        assert!((reference_loss_db(5.9) - 47.864).abs() < 0.01);
        assert!((rsrp_at(23.0, 1.0, 2.75, 5.9) - (-24.86)).abs() < 0.01);
        assert_eq!(rsrp_at(23.0, 0.0, 2.75, 5.9), rsrp_at(23.0, 1.0, 2.75, 5.9));
    }

    #[test]
    fn doubling_distance_costs_exponent_times_3db() {
        let a = rsrp_at(23.0, 40.0, 2.75, 5.9);
        let b = rsrp_at(23.0, 80.0, 2.75, 5.9);
        assert!(((a - b) - 27.5 * 2f64.log10()).abs() < 1e-9);
        assert!(rsrp_at(23.0, 10.0, 3.2, 5.9) > rsrp_at(23.0, 11.0, 3.2, 5.9));
    }

    #[test]
    fn rssi_examples() {
        assert!((rssi_in(-110.0, []) - (-110.0)).abs() < 1e-12);
        assert!((rssi_in(-110.0, [-90.0]) - (-89.957)).abs() < 0.005);
        let two = rssi_in(-200.0, [-90.0, -90.0]);
        assert!((two - (-86.99)).abs() < 0.01);
    }

    #[test]
    fn mutual_transmitters_lose_by_half_duplex() {
        let pos = [0.0, 30.0];
        let txs = [tx(0, 0, 1), tx(1, 2, 1)];
        let mut out = vec![];
        deliver_subframe(
            &txs,
            &[NodeId(0), NodeId(1)],
            &ChannelConfig::default(),
            line_link(&pos),
            &mut out,
        );
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|d| d.outcome == Outcome::HalfDuplexLoss));
    }

    #[test]
    fn lone_transmitter_received_in_range_and_lost_beyond() {
        let pos = [0.0, 50.0, 150.0];
        let txs = [tx(0, 0, 1)];
        let mut out = vec![];
        deliver_subframe(
            &txs,
            &[NodeId(1), NodeId(2)],
            &ChannelConfig::default(),
            line_link(&pos),
            &mut out,
        );
        assert_eq!(out[0].outcome, Outcome::Received);
        assert_eq!(out[1].outcome, Outcome::OutOfRange);
    }

    #[test]
    fn equal_power_overlap_collides() {
        // Receiver midway between two senders on the same subchannel.
        let pos = [0.0, 80.0, 40.0];
        let txs = [tx(0, 1, 2), tx(1, 2, 1)];
        let mut out = vec![];
        deliver_subframe(
            &txs,
            &[NodeId(2)],
            &ChannelConfig::default(),
            line_link(&pos),
            &mut out,
        );
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|d| d.outcome == Outcome::CollisionLoss));
        // Disjoint subchannels do not interfere.
        let txs = [tx(0, 0, 1), tx(1, 2, 1)];
        deliver_subframe(
            &txs,
            &[NodeId(2)],
            &ChannelConfig::default(),
            line_link(&pos),
            &mut out,
        );
        assert!(out.iter().all(|d| d.outcome == Outcome::Received));
    }

    #[test]
    fn strong_signal_captures() {
        let pos = [0.0, 95.0, 5.0];
        let txs = [tx(0, 0, 1), tx(1, 0, 1)];
        let mut out = vec![];
        deliver_subframe(
            &txs,
            &[NodeId(2)],
            &ChannelConfig::default(),
            line_link(&pos),
            &mut out,
        );
        assert_eq!(out[0].outcome, Outcome::Received);
        assert_eq!(out[1].outcome, Outcome::CollisionLoss);
    }

    #[test]
    fn transmitter_never_receives() {
        let pos = [0.0, 10.0, 20.0, 400.0];
        let txs = [tx(0, 0, 1), tx(3, 1, 1)];
        let rxs: Vec<NodeId> = (0..4).map(NodeId).collect();
        let mut out = vec![];
        deliver_subframe(
            &txs,
            &rxs,
            &ChannelConfig::default(),
            line_link(&pos),
            &mut out,
        );
        for d in &out {
            if d.receiver == NodeId(0) || d.receiver == NodeId(3) {
                assert_eq!(d.outcome, Outcome::HalfDuplexLoss);
            }
        }
        // one record per pair, excluding self pairs
        assert_eq!(out.len(), 4 * 2 - 2);
    }
}
