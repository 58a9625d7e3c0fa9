//! Steering vectors, channels, SINR, utilities and feasibility checks.

use std::f64::consts::PI;

use fas_autodiff::{CTensor, C64};
use serde::{Deserialize, Serialize};

use crate::config::{SystemConfig, POSITION_TOL, POWER_TOL};
use crate::error::{FasError, Result};

/// One problem instance: the steering angle of every user.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub angles: Vec<f64>,
}

impl ChannelSample {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = angles.iter().find(|&&t| !(0.0..PI).contains(&t)) {
            return Err(FasError::Input(format!(
                "steering angle {bad} outside [0, π)"
            )));
        }
        Ok(Self { angles })
    }

    pub fn n_users(&self) -> usize {
        self.angles.len()
    }

    /// User `k` of the result is user `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            angles: perm.iter().map(|&p| self.angles[p]).collect(),
        }
    }
}

/// Antenna coordinates along the aperture, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct AntennaPositions {
    pub x: Vec<f64>,
}

impl AntennaPositions {
    pub fn new(x: Vec<f64>) -> Self {
        Self { x }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// `K×N` matrix whose row `k` is `h(x, θ_k)^H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    pub g: CTensor,
}

impl ChannelMatrix {
    pub fn from_tensor(g: CTensor) -> Result<Self> {
        if g.ndim() != 2 {
            return Err(FasError::Dimension(format!(
                "channel matrix shape {:?}",
                g.shape()
            )));
        }
        Ok(Self { g })
    }

    pub fn n_users(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn n_antennas(&self) -> usize {
        self.g.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[C64] {
        let n = self.n_antennas();
        &self.g.data()[k * n..(k + 1) * n]
    }

    /// `h_k`, the conjugate of row `k`.
    pub fn user_channel(&self, k: usize) -> Vec<C64> {
        self.row(k).iter().map(|z| z.conj()).collect()
    }
}

/// `N×K` beam matrix whose column `k` is `w_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformingSolution {
    pub w: CTensor,
}

impl BeamformingSolution {
    pub fn zeros(n_antennas: usize, n_users: usize) -> Self {
        Self {
            w: CTensor::zeros(&[n_antennas, n_users]),
        }
    }

    /// Builds `W` from per-user beam vectors.
    pub fn from_columns(columns: &[Vec<C64>]) -> Result<Self> {
        let k = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(FasError::Dimension("beam columns differ in length".into()));
        }
        let mut w = CTensor::zeros(&[n, k]);
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                w.data_mut()[i * k + j] = v;
            }
        }
        Ok(Self { w })
    }

    pub fn n_antennas(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_users(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn column(&self, k: usize) -> Vec<C64> {
        let users = self.n_users();
        (0..self.n_antennas())
            .map(|i| self.w.data()[i * users + k])
            .collect()
    }

    /// `‖w_k‖²`.
    pub fn user_power(&self, k: usize) -> f64 {
        self.column(k).iter().map(|z| z.norm_sqr()).sum()
    }

    /// `Σ_k ‖w_k‖²`.
    pub fn total_power(&self) -> f64 {
        self.w.data().iter().map(|z| z.norm_sqr()).sum()
    }
}

/// System utility maximized by the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Utility {
    #[default]
    SumRate,
    EnergyEfficiency,
}

impl Utility {
    pub fn name(self) -> &'static str {
        match self {
            Utility::SumRate => "sum_rate",
            Utility::EnergyEfficiency => "energy_efficiency",
        }
    }
}

/// `exp(i·(2π/λ)·x_n·cos θ)` for every antenna.
pub fn steering_vector(x: &AntennaPositions, theta: f64, wavelength: f64) -> Vec<C64> {
    let k = 2.0 * PI / wavelength;
    let c = theta.cos();
    x.x.iter()
        .map(|&xn| {
            let phase = k * (c * xn);
            C64::new(phase.cos(), phase.sin())
        })
        .collect()
}

pub fn channel_matrix(
    x: &AntennaPositions,
    sample: &ChannelSample,
    cfg: &SystemConfig,
) -> Result<ChannelMatrix> {
    if x.len() != cfg.n_antennas || sample.n_users() != cfg.n_users {
        return Err(FasError::Dimension(format!(
            "{} positions and {} angles for N={}, K={}",
            x.len(),
            sample.n_users(),
            cfg.n_antennas,
            cfg.n_users
        )));
    }
    let mut data = Vec::with_capacity(cfg.n_users * cfg.n_antennas);
    for &theta in &sample.angles {
        data.extend(
            steering_vector(x, theta, cfg.wavelength)
                .iter()
                .map(|z| z.conj()),
        );
    }
    Ok(ChannelMatrix {
        g: CTensor::new(vec![cfg.n_users, cfg.n_antennas], data)?,
    })
}

fn check_shapes(w: &BeamformingSolution, g: &ChannelMatrix, cfg: &SystemConfig) -> Result<()> {
    let (k, n) = (g.n_users(), g.n_antennas());
    if w.n_antennas() != n || w.n_users() != k {
        return Err(FasError::Dimension(format!(
            "beams {:?} do not match channel {:?}",
            w.w.shape(),
            g.g.shape()
        )));
    }
    if cfg.path_loss.as_ref().is_some_and(|d| d.len() != k) {
        return Err(FasError::Dimension(
            "path_loss length differs from K".into(),
        ));
    }
    Ok(())
}

/// `|w_i^H h_k|²` for every pair, as a row-major `K×K` matrix indexed `[k][i]`.
fn gain_matrix(w: &BeamformingSolution, g: &ChannelMatrix) -> Vec<f64> {
    let (k, n) = (g.n_users(), g.n_antennas());
    let wd = w.w.data();
    let mut out = vec![0.0; k * k];
    for u in 0..k {
        let row = g.row(u);
        for i in 0..k {
            let s: C64 = (0..n).map(|a| row[a] * wd[a * k + i]).sum();
            out[u * k + i] = s.norm_sqr();
        }
    }
    out
}

pub fn sinr_all(
    w: &BeamformingSolution,
    g: &ChannelMatrix,
    cfg: &SystemConfig,
) -> Result<Vec<f64>> {
    check_shapes(w, g, cfg)?;
    let k = g.n_users();
    let gains = gain_matrix(w, g);
    Ok((0..k)
        .map(|u| {
            let d = cfg.path_loss(u);
            let signal = d * gains[u * k + u];
            let interference: f64 = (0..k)
                .filter(|&i| i != u)
                .map(|i| d * gains[u * k + i])
                .sum();
            signal / (interference + cfg.noise_power)
        })
        .collect())
}

/// `Σ_k log2(1 + γ_k)`.
pub fn rate_from_sinr(sinr: &[f64]) -> f64 {
    sinr.iter().map(|&g| (1.0 + g).log2()).sum()
}

pub fn sum_rate(w: &BeamformingSolution, g: &ChannelMatrix, cfg: &SystemConfig) -> Result<f64> {
    Ok(rate_from_sinr(&sinr_all(w, g, cfg)?))
}

pub fn energy_efficiency(
    w: &BeamformingSolution,
    g: &ChannelMatrix,
    cfg: &SystemConfig,
) -> Result<f64> {
    Ok(sum_rate(w, g, cfg)? / (w.total_power() + cfg.p_c))
}

pub fn utility(
    w: &BeamformingSolution,
    g: &ChannelMatrix,
    cfg: &SystemConfig,
    kind: Utility,
) -> Result<f64> {
    match kind {
        Utility::SumRate => sum_rate(w, g, cfg),
        Utility::EnergyEfficiency => energy_efficiency(w, g, cfg),
    }
}

/// Outcome of one constraint. `slack` is nonnegative when the constraint
/// holds exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintCheck {
    pub passed: bool,
    pub slack: f64,
}

impl ConstraintCheck {
    fn new(slack: f64, tolerance: f64) -> Self {
        Self {
            passed: slack >= -tolerance,
            slack,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    /// `Σ‖w_k‖² ≤ P_max`, slack in watts.
    pub power: ConstraintCheck,
    /// `x_1 ≥ 0`.
    pub start: ConstraintCheck,
    /// `x_N ≤ D`.
    pub aperture: ConstraintCheck,
    /// `x_n − x_{n−1} ≥ Δ`, slack of the tightest gap.
    pub spacing: ConstraintCheck,
    /// Beam and position counts agree with the configuration.
    pub dimensions: bool,
}

impl FeasibilityReport {
    pub fn passed(&self) -> bool {
        self.dimensions
            && self.power.passed
            && self.start.passed
            && self.aperture.passed
            && self.spacing.passed
    }
}

pub fn check_positions(
    x: &AntennaPositions,
    cfg: &SystemConfig,
) -> (ConstraintCheck, ConstraintCheck, ConstraintCheck) {
    let first = x.x.first().copied().unwrap_or(0.0);
    let last = x.x.last().copied().unwrap_or(0.0);
    let min_gap =
        x.x.windows(2)
            .map(|p| p[1] - p[0])
            .fold(f64::INFINITY, f64::min);
    let spacing_slack = if min_gap.is_finite() {
        min_gap - cfg.min_spacing
    } else {
        0.0
    };
    let finite = x.x.iter().all(|v| v.is_finite());
    let mut checks = (
        ConstraintCheck::new(first, POSITION_TOL),
        ConstraintCheck::new(cfg.aperture - last, POSITION_TOL),
        ConstraintCheck::new(spacing_slack, POSITION_TOL),
    );
    if !finite {
        checks.0.passed = false;
        checks.1.passed = false;
        checks.2.passed = false;
    }
    checks
}

pub fn check_feasibility(
    w: &BeamformingSolution,
    x: &AntennaPositions,
    cfg: &SystemConfig,
) -> FeasibilityReport {
    let power = w.total_power();
    let mut power_check = ConstraintCheck::new(cfg.p_max - power, POWER_TOL * cfg.p_max);
    power_check.passed &= power.is_finite();
    let (start, aperture, spacing) = check_positions(x, cfg);
    FeasibilityReport {
        power: power_check,
        start,
        aperture,
        spacing,
        dimensions: x.len() == cfg.n_antennas && w.n_antennas() == cfg.n_antennas,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquidistantMode {
    /// Spread over the whole aperture: `x_n = (n−1)·D/(N−1)`.
    #[default]
    FullAperture,
    /// Half-wavelength array: `x_n = (n−1)·λ/2`.
    HalfWavelength,
}

pub fn equidistant_positions(cfg: &SystemConfig, mode: EquidistantMode) -> AntennaPositions {
    let n = cfg.n_antennas;
    let step = match mode {
        EquidistantMode::FullAperture if n > 1 => cfg.aperture / (n - 1) as f64,
        EquidistantMode::FullAperture => 0.0,
        EquidistantMode::HalfWavelength => cfg.wavelength / 2.0,
    };
    AntennaPositions::new((0..n).map(|i| i as f64 * step).collect())
}
