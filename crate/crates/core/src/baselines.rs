//! Classical beamformers, exhaustive HZF grid search and a position-grid
//! oracle for small arrays.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use fas_autodiff::C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    channel_matrix, equidistant_positions, rate_from_sinr, utility, AntennaPositions,
    BeamformingSolution, ChannelMatrix, ChannelSample, EquidistantMode, Utility,
};
use crate::config::{SystemConfig, POSITION_TOL};
use crate::error::{FasError, Result};
use crate::model::TwoStageModel;
use crate::pipeline::{infer, PositionSource};
use crate::stage2::{assemble_beams, hybrid_direction, zf_directions, HzfParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Points on `[0, 1]` per user.
    pub alpha_points: usize,
    /// Power levels per user on `[0, P_max]`.
    pub power_points: usize,
    /// Points per free antenna coordinate.
    pub position_points: usize,
    /// Maximum number of utility evaluations per call.
    pub budget: u128,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha_points: 11,
            power_points: 11,
            position_points: 50,
            budget: 100_000_000,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_points < 2 || self.power_points < 2 || self.position_points < 2 {
            return Err(FasError::Config("grid counts must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub method: String,
    pub positions: AntennaPositions,
    pub beams: BeamformingSolution,
    pub hzf: Option<HzfParams>,
    pub utility: f64,
    pub seconds: f64,
}

/// `w_k = √(P_max/K)·h_k/‖h_k‖`.
pub fn mrt_equal_power(g: &ChannelMatrix, cfg: &SystemConfig) -> Result<BeamformingSolution> {
    let k = g.n_users();
    let amp = (cfg.p_max / k as f64).sqrt();
    let cols: Vec<Vec<C64>> = (0..k)
        .map(|i| {
            let h = g.user_channel(i);
            let norm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            h.iter().map(|z| z * (amp / norm)).collect()
        })
        .collect();
    BeamformingSolution::from_columns(&cols)
}

/// `w_k = √(P_max/K)·u_k/‖u_k‖`.
pub fn zf_equal_power(g: &ChannelMatrix, cfg: &SystemConfig) -> Result<BeamformingSolution> {
    let k = g.n_users();
    let basis = zf_directions(g)?;
    let amp = (cfg.p_max / k as f64).sqrt();
    let cols: Vec<Vec<C64>> = (0..k)
        .map(|i| {
            let u = basis.column(i);
            let norm = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            u.iter().map(|z| z * (amp / norm)).collect()
        })
        .collect();
    BeamformingSolution::from_columns(&cols)
}

fn linspace(points: usize, hi: f64) -> Vec<f64> {
    (0..points)
        .map(|i| hi * (i as f64 / (points - 1) as f64))
        .collect()
}

/// Power tuples on the level grid with `Σp ≤ P_max`, followed by every
/// interior nonzero tuple rescaled onto `Σp = P_max`.
pub fn power_candidates(k: usize, points: usize, p_max: f64) -> Vec<Vec<f64>> {
    let levels = linspace(points, p_max);
    let mut inside = Vec::new();
    let mut idx = vec![0usize; k];
    loop {
        let p: Vec<f64> = idx.iter().map(|&i| levels[i]).collect();
        if p.iter().sum::<f64>() <= p_max * (1.0 + 1e-12) {
            inside.push(p);
        }
        let mut d = k;
        loop {
            if d == 0 {
                let mut all = inside.clone();
                for p in &inside {
                    let s: f64 = p.iter().sum();
                    if s > 0.0 && s < p_max * (1.0 - 1e-12) {
                        all.push(p.iter().map(|v| v * p_max / s).collect());
                    }
                }
                return all;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < points {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn tuple_index(mut flat: usize, base: usize, k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    for d in (0..k).rev() {
        out[d] = flat % base;
        flat /= base;
    }
    out
}

/// Best `(α, p)` over the grid for a fixed channel. Ties keep the
/// lexicographically smallest `(α index, power index)`.
pub fn hzf_grid_search(
    g: &ChannelMatrix,
    cfg: &SystemConfig,
    grid: &GridSpec,
    kind: Utility,
) -> Result<BaselineResult> {
    grid.validate()?;
    let start = Instant::now();
    let k = g.n_users();
    let alphas = linspace(grid.alpha_points, 1.0);
    let powers = power_candidates(k, grid.power_points, cfg.p_max);
    let alpha_tuples = (grid.alpha_points as u128).pow(k as u32);
    let required = alpha_tuples * powers.len() as u128;
    if required > grid.budget {
        return Err(FasError::Budget {
            required,
            budget: grid.budget,
        });
    }
    let (best, _) = grid_core(g, cfg, &alphas, &powers, kind)?;
    let (a_idx, p_idx, _) = best;
    let hzf = HzfParams {
        p: powers[p_idx].clone(),
        alpha: tuple_index(a_idx, alphas.len(), k)
            .iter()
            .map(|&i| alphas[i])
            .collect(),
    };
    let basis = zf_directions(g)?;
    let beams = assemble_beams(&hzf, &basis, g)?;
    let value = utility(&beams, g, cfg, kind)?;
    Ok(BaselineResult {
        method: "hzf_grid".into(),
        positions: AntennaPositions::new(Vec::new()),
        beams,
        hzf: Some(hzf),
        utility: value,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Searches every `(α tuple, power tuple)`; returns the best indices and
/// utility plus the number of evaluations.
fn grid_core(
    g: &ChannelMatrix,
    cfg: &SystemConfig,
    alphas: &[f64],
    powers: &[Vec<f64>],
    kind: Utility,
) -> Result<((usize, usize, f64), u128)> {
    let k = g.n_users();
    let basis = zf_directions(g)?;
    let channels: Vec<Vec<C64>> = (0..k).map(|i| g.user_channel(i)).collect();
    // gains[i][a][u] = |h_u^H w̄_i(α_a)|²
    let gains: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|i| {
            let u = basis.column(i);
            alphas
                .iter()
                .map(|&a| {
                    let w = hybrid_direction(&u, &channels[i], a);
                    (0..k)
                        .map(|user| {
                            g.row(user)
                                .iter()
                                .zip(&w)
                                .map(|(x, y)| x * y)
                                .sum::<C64>()
                                .norm_sqr()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let d: Vec<f64> = (0..k).map(|i| cfg.path_loss(i)).collect();
    let na = alphas.len();
    let n_tuples = na.pow(k as u32);
    let best = (0..n_tuples)
        .into_par_iter()
        .map(|ai| {
            let idx = tuple_index(ai, na, k);
            let mut sinr = vec![0.0; k];
            let mut best = (ai, 0usize, f64::NEG_INFINITY);
            for (pi, p) in powers.iter().enumerate() {
                for u in 0..k {
                    let mut interference = 0.0;
                    for i in 0..k {
                        if i != u {
                            interference += p[i] * gains[i][idx[i]][u];
                        }
                    }
                    sinr[u] =
                        d[u] * p[u] * gains[u][idx[u]][u] / (d[u] * interference + cfg.noise_power);
                }
                let rate = rate_from_sinr(&sinr);
                let value = match kind {
                    Utility::SumRate => rate,
                    Utility::EnergyEfficiency => rate / (p.iter().sum::<f64>() + cfg.p_c),
                };
                if value > best.2 {
                    best = (ai, pi, value);
                }
            }
            best
        })
        .reduce(
            || (usize::MAX, usize::MAX, f64::NEG_INFINITY),
            |a, b| {
                if b.2 > a.2 || (b.2 == a.2 && (b.0, b.1) < (a.0, a.1)) {
                    b
                } else {
                    a
                }
            },
        );
    Ok((best, (n_tuples * powers.len()) as u128))
}

/// Candidate position vectors with `x_1 = 0` on a uniform grid of each free
/// coordinate, plus both equidistant layouts.
pub fn position_candidates(cfg: &SystemConfig, points: usize) -> Result<Vec<AntennaPositions>> {
    let n = cfg.n_antennas;
    let (d, delta) = (cfg.aperture, cfg.min_spacing);
    let mut out = Vec::new();
    match n {
        1 => out.push(AntennaPositions::new(vec![0.0])),
        2 => {
            for v in linspace(points, d - delta) {
                out.push(AntennaPositions::new(vec![0.0, delta + v]));
            }
        }
        3 => {
            let x2s: Vec<f64> = linspace(points, d - 2.0 * delta)
                .iter()
                .map(|v| delta + v)
                .collect();
            let x3s: Vec<f64> = linspace(points, d - 2.0 * delta)
                .iter()
                .map(|v| 2.0 * delta + v)
                .collect();
            for &x2 in &x2s {
                for &x3 in &x3s {
                    if x3 - x2 >= delta - POSITION_TOL {
                        out.push(AntennaPositions::new(vec![0.0, x2, x3]));
                    }
                }
            }
        }
        _ => {
            return Err(FasError::Config(format!(
                "position grid oracle supports N ≤ 3, got N={n}"
            )))
        }
    }
    for mode in [
        EquidistantMode::FullAperture,
        EquidistantMode::HalfWavelength,
    ] {
        let x = equidistant_positions(cfg, mode);
        if x.x.last().is_some_and(|&l| l <= d + POSITION_TOL) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Nested exhaustive search over positions and HZF parameters.
pub fn position_grid_oracle(
    sample: &ChannelSample,
    cfg: &SystemConfig,
    grid: &GridSpec,
    kind: Utility,
) -> Result<BaselineResult> {
    grid.validate()?;
    let start = Instant::now();
    let k = sample.n_users();
    let cfg = cfg.with_users(k);
    let candidates = position_candidates(&cfg, grid.position_points)?;
    let alphas = linspace(grid.alpha_points, 1.0);
    let powers = power_candidates(k, grid.power_points, cfg.p_max);
    let required =
        candidates.len() as u128 * (alphas.len() as u128).pow(k as u32) * powers.len() as u128;
    if required > grid.budget {
        return Err(FasError::Budget {
            required,
            budget: grid.budget,
        });
    }
    let mut best: Option<(usize, (usize, usize, f64))> = None;
    for (ci, x) in candidates.iter().enumerate() {
        let g = channel_matrix(x, sample, &cfg)?;
        let (found, _) = grid_core(&g, &cfg, &alphas, &powers, kind)?;
        if best.as_ref().is_none_or(|b| found.2 > b.1 .2) {
            best = Some((ci, found));
        }
    }
    let (ci, (a_idx, p_idx, _)) = best.expect("at least one candidate");
    let positions = candidates[ci].clone();
    let g = channel_matrix(&positions, sample, &cfg)?;
    let hzf = HzfParams {
        p: powers[p_idx].clone(),
        alpha: tuple_index(a_idx, alphas.len(), k)
            .iter()
            .map(|&i| alphas[i])
            .collect(),
    };
    let beams = assemble_beams(&hzf, &zf_directions(&g)?, &g)?;
    let value = utility(&beams, &g, &cfg, kind)?;
    Ok(BaselineResult {
        method: "position_grid_oracle".into(),
        positions,
        beams,
        hzf: Some(hzf),
        utility: value,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Position choice of a comparison cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMethod {
    Equidistant,
    Stage1,
}

/// Beam choice of a comparison cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamMethod {
    MrtEqualPower,
    ZfEqualPower,
    GridSearch,
    Stage2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Method {
    pub positions: PositionMethod,
    pub beams: BeamMethod,
}

impl Method {
    pub fn name(&self) -> String {
        let p = match self.positions {
            PositionMethod::Equidistant => "equidistant",
            PositionMethod::Stage1 => "stage1",
        };
        let b = match self.beams {
            BeamMethod::MrtEqualPower => "mrt_equal_power",
            BeamMethod::ZfEqualPower => "zf_equal_power",
            BeamMethod::GridSearch => "hzf_grid",
            BeamMethod::Stage2 => "stage2",
        };
        format!("{p}+{b}")
    }

    /// The four cells of the two-stage ablation.
    pub fn table_cells() -> [Method; 4] {
        [
            Method {
                positions: PositionMethod::Equidistant,
                beams: BeamMethod::GridSearch,
            },
            Method {
                positions: PositionMethod::Equidistant,
                beams: BeamMethod::Stage2,
            },
            Method {
                positions: PositionMethod::Stage1,
                beams: BeamMethod::GridSearch,
            },
            Method {
                positions: PositionMethod::Stage1,
                beams: BeamMethod::Stage2,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_utility: f64,
    pub mean_ms: f64,
    pub utilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub utility: Utility,
    pub rows: Vec<MethodSummary>,
}

/// Per-sample results of one method.
pub fn run_method(
    method: Method,
    model: Option<&TwoStageModel>,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    grid: &GridSpec,
    equidistant: EquidistantMode,
) -> Result<(Vec<f64>, f64)> {
    if samples.is_empty() {
        return Err(FasError::Input("no samples to compare on".into()));
    }
    let cfg = cfg.with_users(samples[0].n_users());
    let needs_model =
        method.positions == PositionMethod::Stage1 || method.beams == BeamMethod::Stage2;
    let model = match (needs_model, model) {
        (true, None) => {
            return Err(FasError::Input(format!(
                "{} needs a trained model",
                method.name()
            )))
        }
        (_, m) => m,
    };
    let fixed = equidistant_positions(&cfg, equidistant);
    let start = Instant::now();
    let utilities = match (method.positions, method.beams) {
        (positions, BeamMethod::Stage2) => {
            let source = match positions {
                PositionMethod::Equidistant => PositionSource::Fixed(fixed),
                PositionMethod::Stage1 => PositionSource::Learned,
            };
            infer(model.unwrap(), samples, &cfg, &source, kind, 256)?
                .iter()
                .map(|s| utility(&s.beams, &s.channel, &cfg, kind))
                .collect::<Result<Vec<_>>>()?
        }
        (positions, beams) => {
            let xs: Vec<AntennaPositions> = match positions {
                PositionMethod::Equidistant => vec![fixed; samples.len()],
                PositionMethod::Stage1 => infer(
                    model.unwrap(),
                    samples,
                    &cfg,
                    &PositionSource::Learned,
                    kind,
                    256,
                )?
                .into_iter()
                .map(|s| s.positions)
                .collect(),
            };
            samples
                .iter()
                .zip(&xs)
                .map(|(s, x)| {
                    let g = channel_matrix(x, s, &cfg)?;
                    match beams {
                        BeamMethod::MrtEqualPower => {
                            utility(&mrt_equal_power(&g, &cfg)?, &g, &cfg, kind)
                        }
                        BeamMethod::ZfEqualPower => {
                            utility(&zf_equal_power(&g, &cfg)?, &g, &cfg, kind)
                        }
                        BeamMethod::GridSearch => {
                            Ok(hzf_grid_search(&g, &cfg, grid, kind)?.utility)
                        }
                        BeamMethod::Stage2 => unreachable!(),
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let ms = 1e3 * start.elapsed().as_secs_f64() / samples.len() as f64;
    Ok((utilities, ms))
}

/// Mean utility and timing of every method over `samples`.
pub fn compare_table(
    methods: &[Method],
    model: Option<&TwoStageModel>,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    grid: &GridSpec,
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let (utilities, mean_ms) = run_method(
            method,
            model,
            samples,
            cfg,
            kind,
            grid,
            EquidistantMode::FullAperture,
        )?;
        rows.push(MethodSummary {
            method,
            mean_utility: utilities.iter().sum::<f64>() / utilities.len() as f64,
            mean_ms,
            utilities,
        });
    }
    Ok(ComparisonTable {
        utility: kind,
        rows,
    })
}

impl ComparisonTable {
    pub fn get(&self, positions: PositionMethod, beams: BeamMethod) -> Option<&MethodSummary> {
        self.rows
            .iter()
            .find(|r| r.method.positions == positions && r.method.beams == beams)
    }

    /// Columns `method,positions,beams,mean_utility,mean_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "positions",
            "beams",
            "utility",
            "mean_utility",
            "mean_ms",
        ])?;
        for r in &self.rows {
            let name = r.method.name();
            let (p, b) = name.split_once('+').unwrap();
            w.write_record([
                name.as_str(),
                p,
                b,
                self.utility.name(),
                &format!("{:e}", r.mean_utility),
                &format!("{:.6}", r.mean_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Positions as rows and beam methods as columns.
    pub fn to_text(&self) -> String {
        let mut beams: Vec<BeamMethod> = Vec::new();
        let mut positions: Vec<PositionMethod> = Vec::new();
        for r in &self.rows {
            if !beams.contains(&r.method.beams) {
                beams.push(r.method.beams);
            }
            if !positions.contains(&r.method.positions) {
                positions.push(r.method.positions);
            }
        }
        let label_b = |b: BeamMethod| match b {
            BeamMethod::MrtEqualPower => "MRT equal power",
            BeamMethod::ZfEqualPower => "ZF equal power",
            BeamMethod::GridSearch => "HZF grid search",
            BeamMethod::Stage2 => "Stage-2 beams",
        };
        let label_p = |p: PositionMethod| match p {
            PositionMethod::Equidistant => "Equidistant",
            PositionMethod::Stage1 => "Stage-1 positions",
        };
        let mut out = String::new();
        let _ = write!(out, "{:<20}", self.utility.name());
        for &b in &beams {
            let _ = write!(out, "{:>18}", label_b(b));
        }
        out.push('\n');
        for &p in &positions {
            let _ = write!(out, "{:<20}", label_p(p));
            for &b in &beams {
                match self.get(p, b) {
                    Some(r) => {
                        let _ = write!(out, "{:>18.4}", r.mean_utility);
                    }
                    None => {
                        let _ = write!(out, "{:>18}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
