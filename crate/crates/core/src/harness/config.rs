//! Scenario configuration (JSON), defaults and validation.

use crate::agc::AgcParams;
use crate::attack::AttackConfig;
use crate::detector::DetectionConfig;
use crate::essm::DriftModel;
use crate::fleet::FleetParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.into(), message: message.into() }
}

/// One-off correction request, e.g. the late-evening regulation event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchEvent {
    pub at_h: f64,
    pub kw: f64,
}

/// Power correction requests (kW, positive = more injection) sent to the aggregator.
///
/// Regulation requests alternate in sign, starting upward, at `phase_h + m·interval_h`,
/// each `amplitude·P_ave·N` in size, so the cumulative offset returns to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispatchSchedule {
    pub interval_h: f64,
    pub phase_h: f64,
    pub amplitude: f64,
    pub event: Option<DispatchEvent>,
}

impl Default for DispatchSchedule {
    fn default() -> Self {
        Self { interval_h: 0.5, phase_h: 0.25, amplitude: 0.05, event: Some(DispatchEvent { at_h: 22.0, kw: 50_000.0 }) }
    }
}

impl DispatchSchedule {
    /// Regulation request as a signed fraction of P_ave·N for the step starting at `t_h`.
    pub fn regulation_fraction(&self, t_h: f64, step_h: f64) -> f64 {
        if self.interval_h <= 0.0 || self.amplitude == 0.0 || t_h < self.phase_h - 1e-9 {
            return 0.0;
        }
        let m = ((t_h - self.phase_h) / self.interval_h + 1e-9).floor();
        let at = self.phase_h + m * self.interval_h;
        if t_h - at >= step_h - 1e-9 {
            return 0.0;
        }
        if m as i64 % 2 == 0 {
            self.amplitude
        } else {
            -self.amplitude
        }
    }

    pub fn event_kw(&self, t_h: f64, step_h: f64) -> f64 {
        match self.event {
            Some(e) if t_h >= e.at_h - 1e-9 && t_h < e.at_h + step_h - 1e-9 => e.kw,
            _ => 0.0,
        }
    }

    /// Correction requested for the step starting at `t_h`; zero between dispatch instants.
    pub fn request(&self, t_h: f64, step_h: f64, p_ave: f64, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        self.regulation_fraction(t_h, step_h) * p_ave * n as f64 + self.event_kw(t_h, step_h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub fleet: FleetParams,
    pub n_s: usize,
    /// Control step T (s).
    pub step_s: f64,
    /// Reporting period T_p (s); N_p = T_p / T.
    pub period_s: f64,
    pub duration_h: f64,
    pub control: bool,
    pub attack: AttackConfig,
    pub dispatch: DispatchSchedule,
    pub agc: AgcParams,
    pub detection: DetectionConfig,
    pub drift: DriftModel,
    /// Write every report to measurements.csv (large).
    pub log_measurements: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            fleet: FleetParams::default(),
            n_s: 10,
            step_s: 20.0,
            period_s: 300.0,
            duration_h: 24.0,
            control: false,
            attack: AttackConfig::default(),
            dispatch: DispatchSchedule::default(),
            agc: AgcParams::default(),
            detection: DetectionConfig::default(),
            drift: DriftModel::default(),
            log_measurements: false,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_p(&self) -> usize {
        (self.period_s / self.step_s).round() as usize
    }

    pub fn step_h(&self) -> f64 {
        self.step_s / 3600.0
    }

    pub fn period_h(&self) -> f64 {
        self.period_s / 3600.0
    }

    pub fn total_steps(&self) -> usize {
        (self.duration_h * 3600.0 / self.step_s).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fleet.validate().map_err(|e| invalid("fleet", e.to_string()))?;
        if self.n_s == 0 {
            return Err(invalid("n_s", "must be positive"));
        }
        if !(self.step_s > 0.0) {
            return Err(invalid("step_s", "must be positive"));
        }
        if !(self.period_s >= self.step_s) {
            return Err(invalid("period_s", "must be at least one step"));
        }
        let ratio = self.period_s / self.step_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(invalid("period_s", "must be a whole number of steps"));
        }
        if !(self.duration_h > 0.0) {
            return Err(invalid("duration_h", "must be positive"));
        }
        if !(self.detection.epsilon > 0.0) {
            return Err(invalid("detection.epsilon", "must be positive"));
        }
        if !(self.attack.epsilon >= 0.0) {
            return Err(invalid("attack.epsilon", "must be non-negative"));
        }
        if !(0.0..=self.duration_h).contains(&self.attack.start_h) {
            return Err(invalid("attack.start_h", "outside the simulation window"));
        }
        if let Some(stop) = self.attack.stop_h {
            if !(stop > self.attack.start_h) {
                return Err(invalid("attack.stop_h", "must follow attack.start_h"));
            }
        }
        if let Some(e) = self.dispatch.event {
            if !(0.0..self.duration_h).contains(&e.at_h) || !e.kw.is_finite() {
                return Err(invalid("dispatch.event", "outside the simulation window"));
            }
        }
        let d = &self.dispatch;
        if !(d.interval_h >= 0.0) || !(d.phase_h >= 0.0) || !d.amplitude.is_finite() {
            return Err(invalid("dispatch", "interval_h and phase_h must be non-negative, amplitude finite"));
        }
        self.agc.validate().map_err(|e| invalid("agc", e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_derive_n_p() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_p(), 15);
        assert_eq!(c.total_steps(), 4320);
    }

    #[test]
    fn errors_name_the_field() {
        let c = ScenarioConfig { period_s: 310.0, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().starts_with("period_s"));
        let mut c = ScenarioConfig::default();
        c.attack.start_h = 30.0;
        assert!(c.validate().unwrap_err().to_string().starts_with("attack.start_h"));
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: ScenarioConfig = serde_json::from_str(r#"{"seed": 9, "fleet": {"size": 50}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.fleet.size, 50);
        assert_eq!(c.n_s, 10);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn requests_alternate_and_carry_event() {
        let d = DispatchSchedule::default();
        let dt = 20.0 / 3600.0;
        assert!((d.request(0.25, dt, 7.0, 1000) - 350.0).abs() < 1e-9);
        assert!((d.request(0.75, dt, 7.0, 1000) + 350.0).abs() < 1e-9);
        assert_eq!(d.request(0.25 + dt, dt, 7.0, 1000), 0.0);
        assert_eq!(d.request(0.1, dt, 7.0, 1000), 0.0);
        assert_eq!(d.request(22.0, dt, 7.0, 1000), 50_000.0);
        assert_eq!(d.request(22.0 + dt, dt, 7.0, 1000), 0.0);
        assert_eq!(d.request(0.25, dt, 7.0, 0), 0.0);
    }
}
