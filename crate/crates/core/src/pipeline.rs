//! End-to-end forward of both stages, utilities and the training loss.

use fas_autodiff::{CTensor, Tape, Var, C64};

use crate::channel::{
    AntennaPositions, BeamformingSolution, ChannelMatrix, ChannelSample, Utility,
};
use crate::config::SystemConfig;
use crate::error::{FasError, Result};
use crate::layers::Forward;
use crate::model::TwoStageModel;
use crate::stage1::{
    check_model, check_users, delta_to_positions_tape, embed_angles, positions_to_channels_tape,
    stage1_heads, xi_to_delta_tape,
};
use crate::stage2::{
    assemble_beams_tape, hybrid_direction_tape, power_projection_tape, stage2_heads,
    zf_directions_tape, HzfParams,
};

/// Lower clamp on per-sample utility inside the loss.
pub const UTILITY_FLOOR: f64 = 1e-9;

/// Where antenna positions come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PositionSource {
    /// Stage-1 output.
    Learned,
    /// The same fixed positions for every sample.
    Fixed(AntennaPositions),
}

/// Tape nodes of one pipeline forward. Stage-1 nodes are absent for fixed
/// positions.
#[derive(Clone, Debug)]
pub struct PipelineVars {
    pub xi: Option<Var>,
    pub xi_max: Option<Var>,
    pub delta: Option<Var>,
    /// `[B, N]`.
    pub positions: Var,
    /// `[B, K, N]`.
    pub channels: Var,
    /// `[B, K]` before projection.
    pub p_raw: Var,
    /// `[B, K]` after projection.
    pub power: Var,
    pub alpha: Var,
    /// `[B, N, K]`.
    pub beams: Var,
    /// `[B, K]`.
    pub sinr: Var,
    /// `[B]`.
    pub utility: Var,
}

/// Per-user SINR `[B, K]` and per-sample utility `[B]` of beams `w`
/// (`[B, N, K]`) over channels `g` (`[B, K, N]`).
pub fn utility_tape(
    tape: &mut Tape,
    g: Var,
    w: Var,
    cfg: &SystemConfig,
    kind: Utility,
) -> Result<(Var, Var)> {
    let shape = tape.shape(g).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let x = tape.matmul(g, w)?;
    let mut gains = tape.abs_sq(x)?;
    if cfg.path_loss.is_some() {
        let d: Vec<f64> = (0..k).map(|i| cfg.path_loss(i)).collect();
        let d = tape.constant(CTensor::from_real(&[k, 1], &d)?);
        gains = tape.cmul(gains, d)?;
    }
    let signal = tape.diagonal(gains)?;
    let mut mask = CTensor::filled(&[k, k], C64::new(1.0, 0.0));
    for i in 0..k {
        mask.data_mut()[i * k + i] = C64::new(0.0, 0.0);
    }
    let mask = tape.constant(mask);
    let cross = tape.cmul(gains, mask)?;
    let interference = tape.sum_axis(cross, 2)?;
    let interference = tape.reshape(interference, &[b, k])?;
    let noise = tape.constant(CTensor::real_scalar(cfg.noise_power));
    let denom = tape.add(interference, noise)?;
    let sinr = tape.div(signal, denom)?;
    let one = tape.constant(CTensor::real_scalar(1.0));
    let rate = tape.add(sinr, one)?;
    let rate = tape.ln_real(rate)?;
    let rate = tape.sum_axis(rate, 1)?;
    let rate = tape.scale_real(rate, std::f64::consts::LOG2_E)?;
    let rate = tape.reshape(rate, &[b])?;
    let utility = match kind {
        Utility::SumRate => rate,
        Utility::EnergyEfficiency => {
            let power = tape.abs_sq(w)?;
            let power = tape.sum_axis(power, 2)?;
            let power = tape.sum_axis(power, 1)?;
            let power = tape.reshape(power, &[b])?;
            let pc = tape.constant(CTensor::real_scalar(cfg.p_c));
            let total = tape.add(power, pc)?;
            tape.div(rate, total)?
        }
    };
    Ok((sinr, utility))
}

/// `mean(1/max(U, UTILITY_FLOOR))`.
pub fn loss_tape(tape: &mut Tape, utility: Var) -> Result<Var> {
    let u = tape.clamp_min_real(utility, UTILITY_FLOOR)?;
    let inv = tape.reciprocal(u)?;
    let m = tape.mean_all(inv)?;
    Ok(tape.re(m)?)
}

/// Plain loss of a list of utilities.
pub fn loss_value(utilities: &[f64]) -> f64 {
    utilities
        .iter()
        .map(|u| 1.0 / u.max(UTILITY_FLOOR))
        .sum::<f64>()
        / utilities.len() as f64
}

pub fn pipeline_forward(
    fwd: &mut Forward,
    model: &TwoStageModel,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    source: &PositionSource,
    kind: Utility,
) -> Result<PipelineVars> {
    check_model(model, cfg)?;
    let k = check_users(samples)?;
    if k > cfg.n_antennas {
        return Err(FasError::Dimension(format!(
            "K={k} exceeds N={}",
            cfg.n_antennas
        )));
    }
    if cfg.path_loss.as_ref().is_some_and(|d| d.len() != k) {
        return Err(FasError::Dimension(format!(
            "path_loss does not cover K={k}"
        )));
    }
    let b = samples.len();
    let n = cfg.n_antennas;
    let (xi, xi_max, delta, positions) = match source {
        PositionSource::Learned => {
            let features = embed_angles(fwd.tape, samples, model.arch.theta_embedding)?;
            let (xi, xi_max) = stage1_heads(fwd, model, features)?;
            let delta = xi_to_delta_tape(fwd.tape, xi, xi_max, cfg)?;
            let x = delta_to_positions_tape(fwd.tape, delta, cfg)?;
            (Some(xi), Some(xi_max), Some(delta), x)
        }
        PositionSource::Fixed(x) => {
            if x.len() != n {
                return Err(FasError::Dimension(format!(
                    "{} fixed positions for N={n}",
                    x.len()
                )));
            }
            let rows: Vec<f64> = (0..b).flat_map(|_| x.x.iter().copied()).collect();
            let x = fwd.tape.constant(CTensor::from_real(&[b, n], &rows)?);
            (None, None, None, x)
        }
    };
    let channels = positions_to_channels_tape(fwd.tape, positions, samples, cfg)?;
    let (p_raw, alpha) = stage2_heads(fwd, model, channels, cfg)?;
    let power = power_projection_tape(fwd.tape, p_raw, cfg.p_max)?;
    let u = zf_directions_tape(fwd.tape, channels)?;
    let directions = hybrid_direction_tape(fwd.tape, u, channels, alpha)?;
    let beams = assemble_beams_tape(fwd.tape, directions, power)?;
    let (sinr, utility) = utility_tape(fwd.tape, channels, beams, cfg, kind)?;
    Ok(PipelineVars {
        xi,
        xi_max,
        delta,
        positions,
        channels,
        p_raw,
        power,
        alpha,
        beams,
        sinr,
        utility,
    })
}

/// Evaluation-mode output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub positions: AntennaPositions,
    pub channel: ChannelMatrix,
    /// Projected powers and hybrid coefficients.
    pub hzf: HzfParams,
    pub beams: BeamformingSolution,
    pub utility: f64,
}

fn slice_rows(t: &CTensor, i: usize, shape: &[usize]) -> Result<CTensor> {
    let len: usize = shape.iter().product();
    Ok(CTensor::new(
        shape.to_vec(),
        t.data()[i * len..(i + 1) * len].to_vec(),
    )?)
}

/// Runs the model in evaluation mode over `samples`, `chunk` samples per
/// tape.
pub fn infer(
    model: &TwoStageModel,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    source: &PositionSource,
    kind: Utility,
    chunk: usize,
) -> Result<Vec<Solution>> {
    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let mut fwd = model.forward(&mut tape, false, false);
        let vars = pipeline_forward(&mut fwd, model, batch, cfg, source, kind)?;
        let tape = &*fwd.tape;
        let k = batch[0].n_users();
        let n = cfg.n_antennas;
        let power = tape.value(vars.power).real_parts();
        let alpha = tape.value(vars.alpha).real_parts();
        let utility = tape.value(vars.utility).real_parts();
        let positions = tape.value(vars.positions).real_parts();
        for i in 0..batch.len() {
            out.push(Solution {
                positions: AntennaPositions::new(positions[i * n..(i + 1) * n].to_vec()),
                channel: ChannelMatrix::from_tensor(slice_rows(
                    tape.value(vars.channels),
                    i,
                    &[k, n],
                )?)?,
                hzf: HzfParams {
                    p: power[i * k..(i + 1) * k].to_vec(),
                    alpha: alpha[i * k..(i + 1) * k].to_vec(),
                },
                beams: BeamformingSolution {
                    w: slice_rows(tape.value(vars.beams), i, &[n, k])?,
                },
                utility: utility[i],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss_value(&[2.0, 4.0]), 0.375);
        assert_eq!(loss_value(&[1.0]), 1.0);
        assert!((loss_value(&[0.0]) - 1e9).abs() < 1e-3);
    }
}
