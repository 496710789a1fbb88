//! Highway/tunnel road world: region layout with coverage flags, vehicle
//! population and longitudinal mobility.
//!
//! The road is a closed loop of the configured regions so that traffic
//! density stays constant over a run. All geometry is one-dimensional;
//! lanes share the longitudinal axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{NodeId, RngStream, StreamPurpose};
use crate::error::{Result, SimError};
use crate::facilities::PlatoonConfig;
use crate::rrc::CellSite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Highway,
    Tunnel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub length_m: f64,
    pub kind: RegionKind,
    pub covered: bool,
}

/// Speed band in km/h, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedBand {
    pub min_kmh: f64,
    pub max_kmh: f64,
}

impl SpeedBand {
    pub fn min_mps(&self) -> f64 {
        self.min_kmh / 3.6
    }

    pub fn max_mps(&self) -> f64 {
        self.max_kmh / 3.6
    }

    pub fn contains_mps(&self, v: f64) -> bool {
        v >= self.min_mps() - 1e-9 && v <= self.max_mps() + 1e-9
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max_kmh > self.min_kmh {
            rng.random_range(self.min_mps()..=self.max_mps())
        } else {
            self.min_mps()
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min_mps(), self.max_mps())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadConfig {
    pub regions: Vec<RegionConfig>,
    pub lanes: u32,
    /// Lanes populated with background traffic.
    pub background_lanes: Vec<u32>,
    /// Background vehicles per km and lane.
    pub background_density_per_km: f64,
    pub vehicle_length_m: f64,
    pub mobility_step_ms: u64,
    pub highway_speed: SpeedBand,
    pub tunnel_speed: SpeedBand,
    /// Distance within which an eNodeB decodes sidelink SCIs.
    pub enodeb_sensing_range_m: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        let region = |kind, covered| RegionConfig {
            length_m: 500.0,
            kind,
            covered,
        };
        RoadConfig {
            regions: vec![
                region(RegionKind::Tunnel, false),
                region(RegionKind::Highway, true),
                region(RegionKind::Tunnel, false),
                region(RegionKind::Highway, true),
            ],
            lanes: 2,
            background_lanes: vec![1],
            background_density_per_km: 30.0,
            vehicle_length_m: 10.0,
            mobility_step_ms: 100,
            highway_speed: SpeedBand {
                min_kmh: 100.0,
                max_kmh: 130.0,
            },
            tunnel_speed: SpeedBand {
                min_kmh: 60.0,
                max_kmh: 80.0,
            },
            enodeb_sensing_range_m: 300.0,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self, platoon: &PlatoonConfig) -> Result<()> {
        let err = |m: String| Err(SimError::Config(m));
        if self.regions.is_empty() {
            return err("road.regions must not be empty".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.length_m <= 0.0 {
                return err(format!("road.regions[{i}].length_m must be > 0"));
            }
        }
        if self.lanes == 0 {
            return err("road.lanes must be >= 1".into());
        }
        if let Some(l) = self.background_lanes.iter().find(|&&l| l >= self.lanes) {
            return err(format!(
                "road.background_lanes contains lane {l} but road.lanes = {}",
                self.lanes
            ));
        }
        if platoon.lane >= self.lanes {
            return err(format!(
                "platoon.lane {} must be < road.lanes {}",
                platoon.lane, self.lanes
            ));
        }
        if self.background_density_per_km < 0.0 {
            return err("road.background_density_per_km must be >= 0".into());
        }
        if self.background_density_per_km > 0.0 && self.background_lanes.contains(&platoon.lane) {
            let spacing = 1000.0 / self.background_density_per_km;
            if spacing - self.vehicle_length_m < platoon.min_gap_m {
                return err(format!(
                    "road.background_density_per_km {} leaves gaps of {:.2} m in the platoon lane, below platoon.min_gap_m {}",
                    self.background_density_per_km,
                    spacing - self.vehicle_length_m,
                    platoon.min_gap_m
                ));
            }
        }
        if self.mobility_step_ms == 0 {
            return err("road.mobility_step_ms must be > 0".into());
        }
        for (name, b) in [
            ("highway_speed", &self.highway_speed),
            ("tunnel_speed", &self.tunnel_speed),
        ] {
            if b.min_kmh <= 0.0 || b.min_kmh > b.max_kmh {
                return err(format!("road.{name} must satisfy 0 < min_kmh <= max_kmh"));
            }
        }
        let span = (platoon.n_vehicles.saturating_sub(1)) as f64
            * (self.vehicle_length_m + platoon.target_gap_m);
        if span >= self.length_m() / 2.0 {
            return err(format!(
                "platoon spans {span} m, too long for a {} m road",
                self.length_m()
            ));
        }
        Ok(())
    }

    pub fn length_m(&self) -> f64 {
        self.regions.iter().map(|r| r.length_m).sum()
    }

    pub fn band(&self, kind: RegionKind) -> &SpeedBand {
        match kind {
            RegionKind::Highway => &self.highway_speed,
            RegionKind::Tunnel => &self.tunnel_speed,
        }
    }
}

/// Shortest distance between two positions on a loop of `length` metres.
pub fn ring_distance(a: f64, b: f64, length: f64) -> f64 {
    let d = (a - b).abs() % length;
    d.min(length - d)
}

/// How far `ahead` is in front of `behind` travelling forward, in `[0, length)`.
pub fn ring_ahead(ahead: f64, behind: f64, length: f64) -> f64 {
    (ahead - behind).rem_euclid(length)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub start_m: f64,
    pub length_m: f64,
    pub kind: RegionKind,
    pub enodeb: Option<NodeId>,
}

impl Region {
    pub fn end_m(&self) -> f64 {
        self.start_m + self.length_m
    }

    pub fn center_m(&self) -> f64 {
        self.start_m + self.length_m / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadLayout {
    pub regions: Vec<Region>,
    pub length_m: f64,
}

impl RoadLayout {
    /// Lays the regions end to end from 0 and numbers one eNodeB per
    /// covered region starting at `first_enodeb`.
    pub fn new(cfg: &RoadConfig, first_enodeb: u32) -> Self {
        let mut start = 0.0;
        let mut next = first_enodeb;
        let regions = cfg
            .regions
            .iter()
            .map(|r| {
                let enodeb = r.covered.then(|| {
                    next += 1;
                    NodeId(next - 1)
                });
                let region = Region {
                    start_m: start,
                    length_m: r.length_m,
                    kind: r.kind,
                    enodeb,
                };
                start += r.length_m;
                region
            })
            .collect();
        RoadLayout {
            regions,
            length_m: start,
        }
    }

    pub fn wrap(&self, pos: f64) -> f64 {
        pos.rem_euclid(self.length_m)
    }

    /// Region holding `pos`; intervals are half-open, so a boundary belongs
    /// to the region that starts there.
    pub fn region_index(&self, pos: f64) -> usize {
        let p = self.wrap(pos);
        self.regions
            .iter()
            .position(|r| p >= r.start_m && p < r.end_m())
            .unwrap_or(self.regions.len() - 1)
    }

    pub fn region_at(&self, pos: f64) -> &Region {
        &self.regions[self.region_index(pos)]
    }

    pub fn in_coverage(&self, pos: f64) -> Option<NodeId> {
        self.region_at(pos).enodeb
    }

    pub fn enodebs(&self) -> impl Iterator<Item = (NodeId, &Region)> {
        self.regions
            .iter()
            .filter_map(|r| r.enodeb.map(|id| (id, r)))
    }

    pub fn cell_sites(
        &self,
        tx_power_dbm: f64,
        exponent: impl Fn(RegionKind) -> f64,
    ) -> Vec<CellSite> {
        self.enodebs()
            .map(|(id, r)| CellSite {
                id,
                position_m: r.center_m(),
                coverage: r.start_m..r.end_m(),
                tx_power_dbm,
                pathloss_exponent: exponent(r.kind),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    PlatoonHead,
    PlatoonMember(u32),
    Background,
}

impl Role {
    pub fn in_platoon(self) -> bool {
        !matches!(self, Role::Background)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: NodeId,
    pub position_m: f64,
    pub lane: u32,
    pub speed_mps: f64,
    pub role: Role,
    pub region: usize,
}

pub struct World {
    pub layout: RoadLayout,
    pub vehicles: Vec<Vehicle>,
    pub road: RoadConfig,
    pub platoon: PlatoonConfig,
    mobility_rngs: Vec<ChaCha8Rng>,
}

/// Gap-closing time constant of platoon members, in seconds.
const FOLLOW_TIME_S: f64 = 1.0;

impl World {
    /// Places the platoon (head first, node ids from 0) and the background
    /// traffic, then numbers the eNodeBs after the vehicles.
    pub fn populate(road: &RoadConfig, platoon: &PlatoonConfig, seed: u64) -> Result<World> {
        road.validate(platoon)?;
        let length = road.length_m();
        let mut vehicles = Vec::new();
        let probe = RoadLayout::new(road, 0);
        for i in 0..platoon.n_vehicles {
            let pos = (platoon.start_m - i as f64 * (road.vehicle_length_m + platoon.target_gap_m))
                .rem_euclid(length);
            vehicles.push(Vehicle {
                id: NodeId(i),
                position_m: pos,
                lane: platoon.lane,
                speed_mps: 0.0,
                role: if i == 0 {
                    Role::PlatoonHead
                } else {
                    Role::PlatoonMember(i)
                },
                region: probe.region_index(pos),
            });
        }
        if road.background_density_per_km > 0.0 {
            let spacing = 1000.0 / road.background_density_per_km;
            let per_lane = (length * road.background_density_per_km / 1000.0).floor() as usize;
            for (li, &lane) in road.background_lanes.iter().enumerate() {
                let offset = spacing * li as f64 / road.background_lanes.len() as f64;
                for k in 0..per_lane {
                    let pos = offset + k as f64 * spacing;
                    if lane == platoon.lane
                        && vehicles.iter().take(platoon.n_vehicles as usize).any(|v| {
                            ring_distance(v.position_m, pos, length)
                                < road.vehicle_length_m + platoon.min_gap_m
                        })
                    {
                        continue;
                    }
                    vehicles.push(Vehicle {
                        id: NodeId(vehicles.len() as u32),
                        position_m: pos,
                        lane,
                        speed_mps: 0.0,
                        role: Role::Background,
                        region: probe.region_index(pos),
                    });
                }
            }
        }
        let layout = RoadLayout::new(road, vehicles.len() as u32);
        let mut mobility_rngs: Vec<ChaCha8Rng> = vehicles
            .iter()
            .map(|v| RngStream::new(seed, v.id, StreamPurpose::Mobility).rng())
            .collect();
        let head_speed = {
            let r = &layout.regions[vehicles.first().map_or(0, |v| v.region)];
            road.band(r.kind).draw(&mut mobility_rngs[0])
        };
        for (v, rng) in vehicles.iter_mut().zip(mobility_rngs.iter_mut()) {
            let band = road.band(layout.regions[v.region].kind);
            v.speed_mps = match v.role {
                Role::PlatoonHead => head_speed,
                Role::PlatoonMember(_) => band.clamp(head_speed),
                Role::Background => band.draw(rng),
            };
        }
        Ok(World {
            layout,
            vehicles,
            road: road.clone(),
            platoon: platoon.clone(),
            mobility_rngs,
        })
    }

    pub fn platoon_size(&self) -> usize {
        self.platoon.n_vehicles as usize
    }

    /// Bumper-to-bumper gap between platoon member `i` and its predecessor.
    pub fn platoon_gap(&self, i: usize) -> f64 {
        let pred = &self.vehicles[i - 1];
        let v = &self.vehicles[i];
        ring_ahead(pred.position_m, v.position_m, self.layout.length_m) - self.road.vehicle_length_m
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        ring_distance(
            self.vehicles[a].position_m,
            self.vehicles[b].position_m,
            self.layout.length_m,
        )
    }

    /// Advances every vehicle by `dt_s`. Free vehicles keep their speed and
    /// draw a new one from the band of each region they enter; members
    /// track the head speed with a gap correction, bounded by their own
    /// region's band, and never close below the minimum gap.
    pub fn step_mobility(&mut self, dt_s: f64) {
        let length = self.layout.length_m;
        let n_platoon = self.platoon_size();
        for (idx, v) in self.vehicles.iter_mut().enumerate() {
            if matches!(v.role, Role::PlatoonMember(_)) {
                continue;
            }
            v.position_m = (v.position_m + v.speed_mps * dt_s).rem_euclid(length);
            let region = self.layout.region_index(v.position_m);
            if region != v.region {
                v.region = region;
                v.speed_mps = self
                    .road
                    .band(self.layout.regions[region].kind)
                    .draw(&mut self.mobility_rngs[idx]);
            }
        }
        if n_platoon == 0 {
            return;
        }
        let head_speed = self.vehicles[0].speed_mps;
        for i in 1..n_platoon {
            let gap = self.platoon_gap(i);
            let desired = head_speed + (gap - self.platoon.target_gap_m) / FOLLOW_TIME_S;
            let (pred_pos, v) = {
                let (before, after) = self.vehicles.split_at_mut(i);
                (before[i - 1].position_m, &mut after[0])
            };
            v.speed_mps = self
                .road
                .band(self.layout.regions[v.region].kind)
                .clamp(desired);
            let mut pos = v.position_m + v.speed_mps * dt_s;
            let limit = pred_pos - self.road.vehicle_length_m - self.platoon.min_gap_m;
            // compare along the direction of travel
            let ahead_of_limit =
                ring_ahead(pos.rem_euclid(length), limit.rem_euclid(length), length);
            if ahead_of_limit > 0.0 && ahead_of_limit < length / 2.0 {
                pos = limit;
            }
            v.position_m = pos.rem_euclid(length);
            let region = self.layout.region_index(v.position_m);
            if region != v.region {
                v.region = region;
                v.speed_mps = self
                    .road
                    .band(self.layout.regions[region].kind)
                    .clamp(v.speed_mps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(seed: u64) -> World {
        World::populate(&RoadConfig::default(), &PlatoonConfig::default(), seed).unwrap()
    }

    #[test]
    fn default_population() {
        let w = world(1);
        assert_eq!(w.vehicles.len(), 6 + 60);
        assert_eq!(w.layout.enodebs().count(), 2);
        assert_eq!(w.vehicles[0].role, Role::PlatoonHead);
        for i in 1..6 {
            assert!((w.platoon_gap(i) - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_km_single_lane_density() {
        let road = RoadConfig {
            regions: vec![RegionConfig {
                length_m: 1000.0,
                kind: RegionKind::Highway,
                covered: false,
            }],
            background_density_per_km: 32.0,
            ..RoadConfig::default()
        };
        let platoon = PlatoonConfig {
            n_vehicles: 0,
            ..PlatoonConfig::default()
        };
        let w = World::populate(&road, &platoon, 3).unwrap();
        assert_eq!(w.vehicles.len(), 32);
        let d = w.vehicles[1].position_m - w.vehicles[0].position_m;
        assert!((d - 31.25).abs() < 1e-9);
    }

    #[test]
    fn dense_platoon_lane_rejected() {
        let road = RoadConfig {
            background_lanes: vec![0],
            background_density_per_km: 90.0,
            ..RoadConfig::default()
        };
        assert!(matches!(
            World::populate(&road, &PlatoonConfig::default(), 1),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn coverage_lookup() {
        let layout = RoadLayout::new(&RoadConfig::default(), 100);
        assert_eq!(layout.in_coverage(750.0), Some(NodeId(100)));
        assert_eq!(layout.in_coverage(1200.0), None);
        assert_eq!(layout.in_coverage(500.0), Some(NodeId(100)));
        assert_eq!(layout.in_coverage(499.999), None);
        assert_eq!(layout.in_coverage(1750.0), Some(NodeId(101)));
    }

    #[test]
    fn ring_geometry() {
        assert_eq!(ring_distance(10.0, 1990.0, 2000.0), 20.0);
        assert_eq!(ring_ahead(10.0, 1990.0, 2000.0), 20.0);
        assert_eq!(ring_ahead(1990.0, 10.0, 2000.0), 1980.0);
    }

    #[test]
    fn head_kinematics() {
        let mut w = world(2);
        w.vehicles[0].speed_mps = 30.0;
        let before = w.vehicles[0].position_m;
        w.step_mobility(0.1);
        assert!((w.vehicles[0].position_m - before - 3.0).abs() < 1e-9);
    }

    #[test]
    fn member_clamped_to_min_gap() {
        let mut w = world(2);
        w.vehicles[0].speed_mps = 0.0;
        // member 1 far too fast for its gap
        w.vehicles[1].position_m = w.vehicles[0].position_m - 10.0 - 2.6;
        w.step_mobility(0.1);
        assert!(w.platoon_gap(1) >= 2.5 - 1e-9);
    }

    #[test]
    fn gap_and_speed_invariants_over_laps() {
        let mut w = world(9);
        for _ in 0..3000 {
            w.step_mobility(0.1);
            for i in 1..w.platoon_size() {
                assert!(w.platoon_gap(i) >= 2.5 - 1e-6, "gap {}", w.platoon_gap(i));
            }
            for v in &w.vehicles {
                let band = w.road.band(w.layout.regions[v.region].kind);
                assert!(band.contains_mps(v.speed_mps), "{v:?}");
            }
        }
    }

    #[test]
    fn boundary_crossing_redraws_speed_in_tunnel_band() {
        let mut w = world(4);
        // put the head just before the R2 -> R3 boundary
        w.vehicles[0].position_m = 999.0;
        w.vehicles[0].region = 1;
        w.vehicles[0].speed_mps = 33.0;
        w.step_mobility(0.1);
        assert_eq!(w.vehicles[0].region, 2);
        let s = w.vehicles[0].speed_mps * 3.6;
        assert!((60.0..=80.0).contains(&s), "{s}");
    }
}
