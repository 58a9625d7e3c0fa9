//! Beamforming stage: `(p, α)` heads and hybrid MRT/ZF beam assembly.

use std::io::Write;

use fas_autodiff::{linalg, sigmoid, CTensor, Tape, Var, C64, NORM_FLOOR};

use crate::channel::{BeamformingSolution, ChannelMatrix};
use crate::config::SystemConfig;
use crate::error::{FasError, Result};
use crate::layers::Forward;
use crate::model::{node_branch_forward, TwoStageModel, ALPHA, POWER};
use crate::stage1::check_model;

/// Per-user power and hybrid coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct HzfParams {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Zero-forcing directions `U = G^H (G G^H)^{-1}` (`N×K`).
#[derive(Clone, Debug, PartialEq)]
pub struct ZfBasis {
    pub u: CTensor,
    /// The Gram matrix was too ill-conditioned and got a ridge.
    pub regularized: bool,
}

impl ZfBasis {
    pub fn column(&self, k: usize) -> Vec<C64> {
        let (n, users) = (self.u.shape()[0], self.u.shape()[1]);
        (0..n).map(|i| self.u.data()[i * users + k]).collect()
    }
}

/// Both stage-2 heads, each `[B, K]` and real: `P_max·sigmoid` powers before
/// projection and `sigmoid` hybrid coefficients.
pub fn stage2_heads(
    fwd: &mut Forward,
    model: &TwoStageModel,
    g: Var,
    cfg: &SystemConfig,
) -> Result<(Var, Var)> {
    let shape = fwd.tape.shape(g).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let h = fwd.tape.conj(g)?;
    let p = node_branch_forward(fwd, &model.branches[POWER], h)?;
    let p = fwd.tape.re(p)?;
    let p = fwd.tape.sigmoid_real(p)?;
    let p = fwd.tape.scale_real(p, cfg.p_max)?;
    let p = fwd.tape.reshape(p, &[b, k])?;
    let alpha = node_branch_forward(fwd, &model.branches[ALPHA], h)?;
    let alpha = fwd.tape.re(alpha)?;
    let alpha = fwd.tape.sigmoid_real(alpha)?;
    let alpha = fwd.tape.reshape(alpha, &[b, k])?;
    Ok((p, alpha))
}

/// `p·min(1, P_max/Σp)` per row of `[B, K]`.
pub fn power_projection_tape(tape: &mut Tape, p: Var, p_max: f64) -> Result<Var> {
    let total = tape.sum_axis(p, 1)?;
    let ratio = tape.scale_real(total, 1.0 / p_max)?;
    let ratio = tape.clamp_min_real(ratio, 1.0)?;
    let factor = tape.reciprocal(ratio)?;
    Ok(tape.cmul(p, factor)?)
}

/// `[B, N, K]` zero-forcing directions from channels `[B, K, N]`.
pub fn zf_directions_tape(tape: &mut Tape, g: Var) -> Result<Var> {
    let gh = tape.hermitian(g)?;
    let gram = tape.matmul(g, gh)?;
    let inv = tape.hermitian_pd_inverse(gram)?;
    Ok(tape.matmul(gh, inv)?)
}

fn normalize_columns(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.l2_norm(a, 1)?;
    let n = tape.clamp_min_real(n, NORM_FLOOR)?;
    Ok(tape.div(a, n)?)
}

/// Unit-norm hybrid directions `[B, N, K]` from ZF directions `u`,
/// channels `g` and coefficients `α` (`[B, K]`).
pub fn hybrid_direction_tape(tape: &mut Tape, u: Var, g: Var, alpha: Var) -> Result<Var> {
    let shape = tape.shape(alpha).to_vec();
    let zf = normalize_columns(tape, u)?;
    let h = tape.hermitian(g)?;
    let mrt = normalize_columns(tape, h)?;
    let a = tape.reshape(alpha, &[shape[0], 1, shape[1]])?;
    let one = tape.constant(CTensor::real_scalar(1.0));
    let rest = tape.sub(one, a)?;
    let zf = tape.cmul(zf, a)?;
    let mrt = tape.cmul(mrt, rest)?;
    let mix = tape.add(zf, mrt)?;
    normalize_columns(tape, mix)
}

/// `w_k = √p_k·w̄_k`, `[B, N, K]`.
pub fn assemble_beams_tape(tape: &mut Tape, directions: Var, p: Var) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    let amp = tape.sqrt_real(p)?;
    let amp = tape.reshape(amp, &[shape[0], 1, shape[1]])?;
    Ok(tape.cmul(directions, amp)?)
}

/// Evaluation-mode stage-2 heads for one channel, before power projection.
pub fn stage2_forward(
    g: &ChannelMatrix,
    model: &TwoStageModel,
    cfg: &SystemConfig,
) -> Result<HzfParams> {
    check_model(model, cfg)?;
    let mut tape = Tape::new();
    let mut fwd = model.forward(&mut tape, false, false);
    let (k, n) = (g.n_users(), g.n_antennas());
    let gv = fwd.tape.constant(g.g.reshaped(&[1, k, n])?);
    let (p, alpha) = stage2_heads(&mut fwd, model, gv, cfg)?;
    Ok(HzfParams {
        p: fwd.tape.value(p).real_parts(),
        alpha: fwd.tape.value(alpha).real_parts(),
    })
}

pub fn zf_directions(g: &ChannelMatrix) -> Result<ZfBasis> {
    let (k, n) = (g.n_users(), g.n_antennas());
    if k > n {
        return Err(FasError::Dimension(format!(
            "zero forcing needs K ≤ N, got K={k}, N={n}"
        )));
    }
    let gh = linalg::hermitian(g.g.data(), k, n);
    let gram = linalg::matmul(g.g.data(), &gh, k, n, k);
    let inv = linalg::hermitian_pd_inverse(&gram, k);
    let u = linalg::matmul(&gh, &inv.inverse, n, k, k);
    Ok(ZfBasis {
        u: CTensor::new(vec![n, k], u)?,
        regularized: inv.ridge > 0.0,
    })
}

fn unit(v: &[C64]) -> Vec<C64> {
    let norm = v
        .iter()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
        .max(NORM_FLOOR);
    v.iter().map(|z| z / norm).collect()
}

/// Normalized `α·u/‖u‖ + (1−α)·h/‖h‖`.
pub fn hybrid_direction(u: &[C64], h: &[C64], alpha: f64) -> Vec<C64> {
    let (zf, mrt) = (unit(u), unit(h));
    let mix: Vec<C64> = zf
        .iter()
        .zip(&mrt)
        .map(|(a, b)| a * alpha + b * (1.0 - alpha))
        .collect();
    unit(&mix)
}

/// Scales `p` onto `Σp ≤ P_max` when it exceeds the budget.
pub fn power_projection(p: &[f64], p_max: f64) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    if total <= p_max {
        p.to_vec()
    } else {
        p.iter().map(|v| v * p_max / total).collect()
    }
}

/// Beams `w_k = √p_k·w̄_k(α_k)` for projected `hzf`.
pub fn assemble_beams(
    hzf: &HzfParams,
    basis: &ZfBasis,
    g: &ChannelMatrix,
) -> Result<BeamformingSolution> {
    let k = g.n_users();
    if hzf.p.len() != k || hzf.alpha.len() != k || basis.u.shape() != [g.n_antennas(), k] {
        return Err(FasError::Dimension(
            "HZF parameters do not match the channel".into(),
        ));
    }
    let columns: Vec<Vec<C64>> = (0..k)
        .map(|i| {
            let dir = hybrid_direction(&basis.column(i), &g.user_channel(i), hzf.alpha[i]);
            let amp = hzf.p[i].max(0.0).sqrt();
            dir.iter().map(|z| z * amp).collect()
        })
        .collect();
    BeamformingSolution::from_columns(&columns)
}

/// Raw head value to `(p, α)` as the network maps them.
pub fn heads_to_hzf(p_logits: &[f64], alpha_logits: &[f64], p_max: f64) -> HzfParams {
    HzfParams {
        p: p_logits.iter().map(|&v| p_max * sigmoid(v)).collect(),
        alpha: alpha_logits.iter().map(|&v| sigmoid(v)).collect(),
    }
}

/// One row per user: `user,p,alpha,w_1_re,w_1_im,...,w_N_re,w_N_im`.
pub fn write_beams_csv<W: Write>(
    out: W,
    hzf: &HzfParams,
    beams: &BeamformingSolution,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = beams.n_antennas();
    let mut header = vec!["user".to_string(), "p".to_string(), "alpha".to_string()];
    for i in 1..=n {
        header.push(format!("w_{i}_re"));
        header.push(format!("w_{i}_im"));
    }
    w.write_record(&header)?;
    for k in 0..beams.n_users() {
        let mut row = vec![
            k.to_string(),
            format!("{:e}", hzf.p[k]),
            format!("{:e}", hzf.alpha[k]),
        ];
        for z in beams.column(k) {
            row.push(format!("{:e}", z.re));
            row.push(format!("{:e}", z.im));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(power_projection(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let p = power_projection(&[0.5, 0.6], 1.0);
        assert!((p[0] - 0.5 / 1.1).abs() < 1e-15 && (p[1] - 0.6 / 1.1).abs() < 1e-15);
        assert_eq!(power_projection(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn hybrid_endpoints() {
        let u = [C64::new(1.0, 1.0), C64::new(0.0, -2.0)];
        let h = [C64::new(0.5, 0.0), C64::new(0.5, 0.5)];
        let zf = hybrid_direction(&u, &h, 1.0);
        let mrt = hybrid_direction(&u, &h, 0.0);
        let (un, hn) = (unit(&u), unit(&h));
        for i in 0..2 {
            assert!((zf[i] - un[i]).norm() < 1e-15);
            assert!((mrt[i] - hn[i]).norm() < 1e-15);
        }
    }

    #[test]
    fn antipodal_mix_is_guarded() {
        let u = [C64::new(1.0, 0.0)];
        let h = [C64::new(-1.0, 0.0)];
        let d = hybrid_direction(&u, &h, 0.5);
        assert!(d.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }
}
