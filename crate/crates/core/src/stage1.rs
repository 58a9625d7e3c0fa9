//! Antenna-position stage: `(ξ, ξ_max)` heads and the feasible-by-construction
//! map to positions and channels.

use fas_autodiff::{sigmoid, CTensor, Tape, Var, C64};

use crate::channel::{AntennaPositions, ChannelSample};
use crate::config::SystemConfig;
use crate::error::{FasError, Result};
use crate::layers::Forward;
use crate::model::{graph_branch_forward, ThetaEmbedding, TwoStageModel, XI, XI_MAX};

/// Raw stage-1 head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionHeadOutput {
    /// `ξ_2..ξ_N`.
    pub xi: Vec<f64>,
    pub xi_max: f64,
}

/// Extra spacings `δ_1..δ_N` beyond the minimum, with `δ_1 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpacingVector {
    pub delta: Vec<f64>,
    pub delta_max: f64,
}

impl SpacingVector {
    /// Checks `δ_1 = 0`, `δ_n ≥ 0` and `Σδ ≤ δ_max` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let total: f64 = self.delta.iter().sum();
        self.delta.first().is_some_and(|&d| d == 0.0)
            && self.delta.iter().all(|&d| d >= 0.0)
            && total <= self.delta_max + tol
    }
}

/// Stage-1 node features `[B, K, 1]`.
pub fn embed_angles(
    tape: &mut Tape,
    samples: &[ChannelSample],
    embedding: ThetaEmbedding,
) -> Result<Var> {
    let k = check_users(samples)?;
    let data: Vec<C64> = samples
        .iter()
        .flat_map(|s| s.angles.iter())
        .map(|&t| match embedding {
            ThetaEmbedding::Raw => C64::new(t, 0.0),
            ThetaEmbedding::Phase => C64::new(t.cos(), t.sin()),
        })
        .collect();
    Ok(tape.constant(CTensor::new(vec![samples.len(), k, 1], data)?))
}

pub(crate) fn check_users(samples: &[ChannelSample]) -> Result<usize> {
    let k = samples
        .first()
        .map(ChannelSample::n_users)
        .ok_or_else(|| FasError::Input("empty batch".into()))?;
    if k == 0 || samples.iter().any(|s| s.n_users() != k) {
        return Err(FasError::Dimension(
            "samples in a batch must share K ≥ 1".into(),
        ));
    }
    Ok(k)
}

/// Both stage-1 heads: `ξ` as `[B, N−1]` and `ξ_max` as `[B, 1]`, real.
pub fn stage1_heads(fwd: &mut Forward, model: &TwoStageModel, features: Var) -> Result<(Var, Var)> {
    let xi = graph_branch_forward(fwd, &model.branches[XI], features)?;
    let xi = fwd.tape.re(xi)?;
    let xi_max = graph_branch_forward(fwd, &model.branches[XI_MAX], features)?;
    let xi_max = fwd.tape.re(xi_max)?;
    Ok((xi, xi_max))
}

/// `δ = [0, δ_max·sigmoid(ξ_max)·softmax(ξ)]`, `[B, N]`.
pub fn xi_to_delta_tape(tape: &mut Tape, xi: Var, xi_max: Var, cfg: &SystemConfig) -> Result<Var> {
    let b = tape.shape(xi)[0];
    let weights = tape.softmax_real(xi)?;
    let span = tape.sigmoid_real(xi_max)?;
    let span = tape.scale_real(span, cfg.delta_max())?;
    let rest = tape.cmul(weights, span)?;
    let first = tape.constant(CTensor::zeros(&[b, 1]));
    Ok(tape.concat(&[first, rest], 1)?)
}

/// Upper-triangular ones: `(δ·L)_n = Σ_{i≤n} δ_i`.
fn cumsum_matrix(n: usize) -> CTensor {
    let mut l = CTensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            l.data_mut()[i * n + j] = C64::new(1.0, 0.0);
        }
    }
    l
}

fn minimum_offsets(cfg: &SystemConfig) -> Vec<f64> {
    (0..cfg.n_antennas)
        .map(|n| n as f64 * cfg.min_spacing)
        .collect()
}

/// `x_n = (n−1)Δ + Σ_{i≤n} δ_i`, `[B, N]`.
pub fn delta_to_positions_tape(tape: &mut Tape, delta: Var, cfg: &SystemConfig) -> Result<Var> {
    let l = tape.constant(cumsum_matrix(cfg.n_antennas));
    let cum = tape.matmul(delta, l)?;
    let offsets = tape.constant(CTensor::from_real(
        &[cfg.n_antennas],
        &minimum_offsets(cfg),
    )?);
    Ok(tape.add(offsets, cum)?)
}

/// Channel rows `g = conj(exp(i·(2π/λ)·cos θ_k·x_n))`, `[B, K, N]`, from
/// positions `[B, N]` recorded on the tape.
pub fn positions_to_channels_tape(
    tape: &mut Tape,
    x: Var,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
) -> Result<Var> {
    let k = check_users(samples)?;
    let b = samples.len();
    let cos: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.angles.iter().map(|t| t.cos()))
        .collect();
    let cos = tape.constant(CTensor::from_real(&[b, k, 1], &cos)?);
    let xr = tape.reshape(x, &[b, 1, cfg.n_antennas])?;
    let phase = tape.matmul(cos, xr)?;
    let phase = tape.scale_real(phase, cfg.wavenumber())?;
    let h = tape.exp_i(phase)?;
    Ok(tape.conj(h)?)
}

/// Evaluation-mode stage-1 heads for one sample.
pub fn stage1_forward(
    sample: &ChannelSample,
    model: &TwoStageModel,
    cfg: &SystemConfig,
) -> Result<PositionHeadOutput> {
    check_model(model, cfg)?;
    let mut tape = Tape::new();
    let mut fwd = model.forward(&mut tape, false, false);
    let samples = std::slice::from_ref(sample);
    let features = embed_angles(fwd.tape, samples, model.arch.theta_embedding)?;
    let (xi, xi_max) = stage1_heads(&mut fwd, model, features)?;
    Ok(PositionHeadOutput {
        xi: fwd.tape.value(xi).real_parts(),
        xi_max: fwd.tape.value(xi_max).real_parts()[0],
    })
}

pub(crate) fn check_model(model: &TwoStageModel, cfg: &SystemConfig) -> Result<()> {
    if model.n_antennas != cfg.n_antennas {
        return Err(FasError::Checkpoint(format!(
            "model built for N={} used with N={}",
            model.n_antennas, cfg.n_antennas
        )));
    }
    Ok(())
}

/// Softmax weights scaled by `δ_max·sigmoid(ξ_max)`, with `δ_1 = 0`.
pub fn xi_to_delta(out: &PositionHeadOutput, cfg: &SystemConfig) -> SpacingVector {
    let max = out.xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = out.xi.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let span = sigmoid(out.xi_max) * cfg.delta_max();
    let mut delta = Vec::with_capacity(out.xi.len() + 1);
    delta.push(0.0);
    delta.extend(exps.iter().map(|e| e / total * span));
    SpacingVector {
        delta,
        delta_max: cfg.delta_max(),
    }
}

pub fn delta_to_positions(delta: &SpacingVector, cfg: &SystemConfig) -> AntennaPositions {
    let mut acc = 0.0;
    let x = delta
        .delta
        .iter()
        .zip(minimum_offsets(cfg))
        .map(|(d, offset)| {
            acc += d;
            offset + acc
        })
        .collect();
    AntennaPositions::new(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_equal_heads_spread_evenly() {
        let cfg = SystemConfig::reference(4, 2);
        let out = PositionHeadOutput {
            xi: vec![0.3; 3],
            xi_max: 100.0,
        };
        let d = xi_to_delta(&out, &cfg);
        for v in &d.delta[1..] {
            assert!((v - cfg.delta_max() / 3.0).abs() < 1e-12);
        }
        let x = delta_to_positions(&d, &cfg);
        assert!((x.x[3] - cfg.aperture).abs() < 1e-12);
        let gap = cfg.min_spacing + cfg.delta_max() / 3.0;
        for w in x.x.windows(2) {
            assert!((w[1] - w[0] - gap).abs() < 1e-12);
        }
    }

    #[test]
    fn half_span_at_zero_head() {
        let cfg = SystemConfig::reference(5, 2);
        let out = PositionHeadOutput {
            xi: vec![1.0, -2.0, 0.5, 3.0],
            xi_max: 0.0,
        };
        let d = xi_to_delta(&out, &cfg);
        let total: f64 = d.delta.iter().sum();
        assert!((total - cfg.delta_max() / 2.0).abs() < 1e-12);
        assert!(d.is_valid(1e-12));
    }

    #[test]
    fn zero_spacing_is_minimum_array() {
        let cfg = SystemConfig::reference(4, 2);
        let d = SpacingVector {
            delta: vec![0.0; 4],
            delta_max: cfg.delta_max(),
        };
        let x = delta_to_positions(&d, &cfg);
        for (n, v) in x.x.iter().enumerate() {
            assert_eq!(*v, n as f64 * cfg.min_spacing);
        }
    }
}
