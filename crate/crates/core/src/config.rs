//! Scenario configuration: one TOML document with a section per module.
//! Every key has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::engine::Numerology;
use crate::error::{Result, SimError};
use crate::facilities::{AlertServiceConfig, CamServiceConfig, Pipeline, PlatoonConfig};
use crate::grid::{tb_prbs_required, GridConfig};
use crate::rrc::RrcConfig;
use crate::sbsps::{derived_interval, SpsParams};
use crate::scenario::{RegionKind, RoadConfig};
use crate::stack::StackConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModePolicy {
    Mode3Only,
    Mode4Only,
    Switching,
}

impl ModePolicy {
    pub const ALL: [ModePolicy; 3] = [
        ModePolicy::Mode3Only,
        ModePolicy::Mode4Only,
        ModePolicy::Switching,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModePolicy::Mode3Only => "mode3_only",
            ModePolicy::Mode4Only => "mode4_only",
            ModePolicy::Switching => "switching",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                SimError::Config(format!(
                    "unknown mode policy `{s}` (mode3_only, mode4_only, switching)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Messages created before this instant are not tracked (sensing fill).
    pub warmup_ms: u64,
    /// Messages created in the final `drain_ms` are not tracked.
    pub drain_ms: u64,
    pub window_ms: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            warmup_ms: 1000,
            drain_ms: 300,
            window_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub numerology: Numerology,
    pub mode_policy: ModePolicy,
    pub grid: GridConfig,
    pub channel: ChannelConfig,
    pub sps: SpsParams,
    pub rrc: RrcConfig,
    pub stack: StackConfig,
    pub cam: CamServiceConfig,
    pub alert: AlertServiceConfig,
    pub platoon: PlatoonConfig,
    pub road: RoadConfig,
    pub metrics: MetricsConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "platoon".into(),
            seed: 1,
            duration_s: 60.0,
            numerology: Numerology::LTE,
            mode_policy: ModePolicy::Switching,
            grid: GridConfig::default(),
            channel: ChannelConfig::default(),
            sps: SpsParams::default(),
            rrc: RrcConfig::default(),
            stack: StackConfig::default(),
            cam: CamServiceConfig::default(),
            alert: AlertServiceConfig::default(),
            platoon: PlatoonConfig::default(),
            road: RoadConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Default scenario with coverage set for `policy`.
    pub fn for_policy(policy: ModePolicy) -> Self {
        Self::default().with_policy(policy)
    }

    /// Sets the policy and the matching coverage map: every region covered
    /// (mode 3 only), none (mode 4 only), or the highway regions only
    /// (switching).
    pub fn with_policy(mut self, policy: ModePolicy) -> Self {
        self.mode_policy = policy;
        for r in &mut self.road.regions {
            r.covered = match policy {
                ModePolicy::Mode3Only => true,
                ModePolicy::Mode4Only => false,
                ModePolicy::Switching => r.kind == RegionKind::Highway,
            };
        }
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s)
            .map_err(|e| SimError::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SimError::Config(m) => SimError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization with the seed cleared, so
    /// runs of one scenario under different seeds share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SimError::Config(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return err(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        let duration_ms = (self.duration_s * 1000.0).round() as u64;
        if self.metrics.warmup_ms + self.metrics.drain_ms >= duration_ms {
            return err(
                "metrics.warmup_ms + metrics.drain_ms must be shorter than duration_s".into(),
            );
        }
        if self.metrics.window_ms == 0 {
            return err("metrics.window_ms must be > 0".into());
        }
        self.grid.validate()?;
        self.channel.validate()?;
        self.sps.validate()?;
        self.rrc.validate()?;
        self.stack.validate()?;
        self.cam.validate()?;
        self.alert.validate()?;
        self.platoon.validate()?;
        self.road.validate(&self.platoon)?;

        for (field, t_l) in [
            ("cam.latency_ms", self.cam.latency_ms),
            ("alert.latency_ms", self.alert.latency_ms),
        ] {
            if t_l <= self.sps.t_p_ms {
                return err(format!(
                    "{field} ({t_l}) must exceed sps.t_p_ms ({})",
                    self.sps.t_p_ms
                ));
            }
        }
        if derived_interval(self.cam.period_ms(), self.sps.p_step_ms).is_err() {
            return err(format!(
                "cam.rate_hz {} gives a period of {} ms that does not scale to an integer interval with sps.p_step_ms {}",
                self.cam.rate_hz,
                self.cam.period_ms(),
                self.sps.p_step_ms
            ));
        }
        let overhead = self.stack.sidelink_overhead(Pipeline::NonIp);
        if let Err(e) = tb_prbs_required(self.cam.grant_bytes, overhead, &self.grid) {
            return err(format!("cam.grant_bytes: {e}"));
        }
        if let Err(e) = tb_prbs_required(self.alert.size_max_bytes, overhead, &self.grid) {
            return err(format!("alert.size_max_bytes: {e}"));
        }
        for (i, r) in self.road.regions.iter().enumerate() {
            match self.mode_policy {
                ModePolicy::Mode3Only if !r.covered => {
                    return err(format!("road.regions[{i}].covered: mode_policy mode3_only requires every region covered"));
                }
                ModePolicy::Mode4Only if r.covered => {
                    return err(format!("road.regions[{i}].covered: mode_policy mode4_only requires no covered region"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn ticks(&self, ms: u64) -> u64 {
        self.numerology.ms_to_ticks(ms)
    }

    pub fn duration_ticks(&self) -> u64 {
        self.ticks((self.duration_s * 1000.0).round() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_policy() {
        for p in ModePolicy::ALL {
            ScenarioConfig::for_policy(p).validate().unwrap();
        }
    }

    #[test]
    fn round_trip() {
        let c = ScenarioConfig::for_policy(ModePolicy::Mode3Only);
        let back = ScenarioConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = ScenarioConfig::from_toml_str("[cam]\nrate_hzz = 5\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("rate_hzz"), "{e}");
    }

    #[test]
    fn latency_out_of_range_names_field() {
        let e = ScenarioConfig::from_toml_str("[cam]\nlatency_ms = 150\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("cam.latency_ms"), "{e}");
    }

    #[test]
    fn policy_coverage_mismatch() {
        let mut c = ScenarioConfig::for_policy(ModePolicy::Switching);
        c.mode_policy = ModePolicy::Mode3Only;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("road.regions[0].covered"), "{e}");
    }

    #[test]
    fn alert_must_fit_grid() {
        let mut c = ScenarioConfig::default();
        c.grid.n_subch = 3;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("alert.size_max_bytes"), "{e}");
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = ScenarioConfig::default();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.hash(), b.hash());
        b.cam.rate_hz = 5.0;
        assert_ne!(a.hash(), b.hash());
    }
}
