//! Physical and budget constants of the MU-MISO fluid-antenna system.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FasError, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const CARRIER_HZ: f64 = 1.8e9;
/// Position tolerance in meters.
pub const POSITION_TOL: f64 = 1e-9;
/// Relative power tolerance.
pub const POWER_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_antennas: usize,
    pub n_users: usize,
    /// Meters.
    pub wavelength: f64,
    /// Aperture length `D` in meters.
    pub aperture: f64,
    /// Minimum adjacent spacing `Δ` in meters.
    pub min_spacing: f64,
    pub p_max: f64,
    /// Constant circuit power in watts.
    pub p_c: f64,
    pub noise_power: f64,
    /// Per-user large-scale gains `d_k`; `None` means 1 for every user.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path_loss: Option<Vec<f64>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::reference(4, 2)
    }
}

impl SystemConfig {
    /// The simulation scenario: 1.8 GHz carrier, `D = 10λ`, `Δ = λ/2`,
    /// `P_max = 1 W`, `P_c = 0.5 W` and 20 dB SNR (`σ² = P_max/100`).
    pub fn reference(n_antennas: usize, n_users: usize) -> Self {
        let wavelength = SPEED_OF_LIGHT / CARRIER_HZ;
        let p_max = 1.0;
        Self {
            n_antennas,
            n_users,
            wavelength,
            aperture: 10.0 * wavelength,
            min_spacing: wavelength / 2.0,
            p_max,
            p_c: 0.5,
            noise_power: p_max / 10f64.powf(20.0 / 10.0),
            path_loss: None,
        }
    }

    /// Same system with a different number of users; explicit path losses
    /// are dropped when their length no longer matches.
    pub fn with_users(&self, n_users: usize) -> Self {
        let mut cfg = self.clone();
        cfg.n_users = n_users;
        if cfg.path_loss.as_ref().is_some_and(|d| d.len() != n_users) {
            cfg.path_loss = None;
        }
        cfg
    }

    pub fn path_loss(&self, k: usize) -> f64 {
        self.path_loss.as_ref().map_or(1.0, |d| d[k])
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength
    }

    /// Slack `δ_max = D − (N−1)Δ` available for spacing beyond the minimum.
    pub fn delta_max(&self) -> f64 {
        self.aperture - (self.n_antennas.saturating_sub(1)) as f64 * self.min_spacing
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FasError::Config(msg));
        if self.n_antennas == 0 || self.n_users == 0 {
            return bad("n_antennas and n_users must be positive".into());
        }
        let positive = [
            ("wavelength", self.wavelength),
            ("min_spacing", self.min_spacing),
            ("p_max", self.p_max),
            ("noise_power", self.noise_power),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.p_c.is_finite() && self.p_c >= 0.0) {
            return bad(format!("p_c must be nonnegative, got {}", self.p_c));
        }
        if !self.aperture.is_finite() || self.delta_max() < -POSITION_TOL {
            return bad(format!(
                "aperture {} cannot hold {} antennas at spacing {}",
                self.aperture, self.n_antennas, self.min_spacing
            ));
        }
        if let Some(d) = &self.path_loss {
            if d.len() != self.n_users {
                return bad(format!(
                    "path_loss has {} entries for {} users",
                    d.len(),
                    self.n_users
                ));
            }
            if d.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                return bad("path_loss entries must be positive".into());
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}
