//! Complex batch normalization kernels.
//!
//! Each feature column is treated as a 2-vector `(Re, Im)`. In training mode
//! the batch is centred and whitened by the inverse square root of its 2×2
//! covariance (plus `eps·I`), then mapped through a learnable symmetric 2×2
//! scale and a complex shift. The split variant whitens real and imaginary
//! parts independently.
//!
//! The scale parameter is stored as a `[2, H]` complex tensor: row 0 holds
//! `γ_rr + i·γ_ii`, row 1 holds `γ_ri` in its real part.

use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BnMode {
    /// 2×2 covariance whitening.
    #[default]
    Complex,
    /// Independent standardization of real and imaginary parts.
    Split,
}

/// Per-feature batch statistics: mean and `(V_rr, V_ri, V_ii)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<C64>,
    pub cov: Vec<[f64; 3]>,
}

impl BnStats {
    pub fn compute(x: &[C64], rows: usize, features: usize) -> Self {
        let inv = 1.0 / rows as f64;
        let mut mean = vec![C64::new(0.0, 0.0); features];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(&x[r * features..(r + 1) * features]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m *= inv;
        }
        let mut cov = vec![[0.0; 3]; features];
        for r in 0..rows {
            for h in 0..features {
                let c = x[r * features + h] - mean[h];
                cov[h][0] += c.re * c.re;
                cov[h][1] += c.re * c.im;
                cov[h][2] += c.im * c.im;
            }
        }
        for v in cov.iter_mut() {
            for e in v.iter_mut() {
                *e *= inv;
            }
        }
        Self { mean, cov }
    }
}

/// Whitening matrix of one feature together with what its adjoint needs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Whitener {
    /// Row-major symmetric 2×2 whitening matrix.
    pub m: [f64; 4],
    /// Eigenvector rotation `(cos φ, sin φ)` of the regularized covariance.
    rot: (f64, f64),
    /// Eigenvalues of the regularized covariance.
    lambda: [f64; 2],
    mode: BnMode,
}

fn inv_sqrt_divided_difference(a: f64, b: f64) -> f64 {
    let (sa, sb) = (a.sqrt(), b.sqrt());
    -1.0 / (sa * sb * (sa + sb))
}

impl Whitener {
    pub fn new(cov: [f64; 3], eps: f64, mode: BnMode) -> Self {
        let (a, b, d) = (cov[0] + eps, cov[1], cov[2] + eps);
        match mode {
            BnMode::Complex => {
                let phi = 0.5 * (2.0 * b).atan2(a - d);
                let (sn, cs) = phi.sin_cos();
                let l1 = a * cs * cs + 2.0 * b * cs * sn + d * sn * sn;
                let l2 = a * sn * sn - 2.0 * b * cs * sn + d * cs * cs;
                let (f1, f2) = (1.0 / l1.sqrt(), 1.0 / l2.sqrt());
                // Q diag(f) Q^T with Q = [[cs, -sn], [sn, cs]]
                let m00 = f1 * cs * cs + f2 * sn * sn;
                let m01 = (f1 - f2) * cs * sn;
                let m11 = f1 * sn * sn + f2 * cs * cs;
                Self {
                    m: [m00, m01, m01, m11],
                    rot: (cs, sn),
                    lambda: [l1, l2],
                    mode,
                }
            }
            BnMode::Split => Self {
                m: [1.0 / a.sqrt(), 0.0, 0.0, 1.0 / d.sqrt()],
                rot: (1.0, 0.0),
                lambda: [a, d],
                mode,
            },
        }
    }

    pub fn apply(&self, c: C64) -> C64 {
        C64::new(
            self.m[0] * c.re + self.m[1] * c.im,
            self.m[2] * c.re + self.m[3] * c.im,
        )
    }

    /// Maps the gradient with respect to the whitening matrix to the
    /// gradient with respect to the (symmetric) covariance, returned as a
    /// general 2×2 matrix `S` with `dL = <S, dV>`.
    fn covariance_adjoint(&self, gm: [f64; 4]) -> [f64; 4] {
        let [l1, l2] = self.lambda;
        match self.mode {
            BnMode::Complex => {
                let (cs, sn) = self.rot;
                // Q^T G Q
                let q = [cs, -sn, sn, cs];
                let t = mat2_mul(&mat2_mul(&transpose2(&q), &gm), &q);
                let f11 = -0.5 / (l1 * l1.sqrt());
                let f22 = -0.5 / (l2 * l2.sqrt());
                let f12 = inv_sqrt_divided_difference(l1, l2);
                let h = [t[0] * f11, t[1] * f12, t[2] * f12, t[3] * f22];
                mat2_mul(&mat2_mul(&q, &h), &transpose2(&q))
            }
            BnMode::Split => [
                gm[0] * (-0.5 / (l1 * l1.sqrt())),
                0.0,
                0.0,
                gm[3] * (-0.5 / (l2 * l2.sqrt())),
            ],
        }
    }
}

fn mat2_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn transpose2(a: &[f64; 4]) -> [f64; 4] {
    [a[0], a[2], a[1], a[3]]
}

/// Applies the symmetric scale and complex shift of feature `h`.
fn affine(scale: &[C64], shift: &[C64], features: usize, h: usize, y: C64) -> C64 {
    let g_rr = scale[h].re;
    let g_ii = scale[h].im;
    let g_ri = scale[features + h].re;
    C64::new(g_rr * y.re + g_ri * y.im, g_ri * y.re + g_ii * y.im) + shift[h]
}

/// Saved forward state for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved {
    pub mean: Vec<C64>,
    pub whiteners: Vec<Whitener>,
    /// Normalized values before scale/shift.
    pub normalized: Vec<C64>,
    pub training: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    x: &[C64],
    rows: usize,
    features: usize,
    scale: &[C64],
    shift: &[C64],
    mean: Vec<C64>,
    whiteners: Vec<Whitener>,
    training: bool,
) -> (Vec<C64>, BnSaved) {
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        for h in 0..features {
            let y = whiteners[h].apply(x[r * features + h] - mean[h]);
            normalized.push(y);
            out.push(affine(scale, shift, features, h, y));
        }
    }
    (
        out,
        BnSaved {
            mean,
            whiteners,
            normalized,
            training,
        },
    )
}

/// Gradients with respect to `(x, scale, shift)`.
pub(crate) fn backward(
    saved: &BnSaved,
    x: &[C64],
    rows: usize,
    features: usize,
    scale: &[C64],
    grad_out: &[C64],
) -> (Vec<C64>, Vec<C64>, Vec<C64>) {
    let mut gx = vec![C64::new(0.0, 0.0); x.len()];
    let mut gscale = vec![C64::new(0.0, 0.0); 2 * features];
    let mut gshift = vec![C64::new(0.0, 0.0); features];
    let inv_rows = 1.0 / rows as f64;
    for h in 0..features {
        let g_rr = scale[h].re;
        let g_ii = scale[h].im;
        let g_ri = scale[features + h].re;
        let w = &saved.whiteners[h];
        let mut g_m = [0.0; 4];
        for r in 0..rows {
            let i = r * features + h;
            let go = grad_out[i];
            let y = saved.normalized[i];
            gshift[h] += go;
            gscale[h].re += go.re * y.re;
            gscale[h].im += go.im * y.im;
            gscale[features + h].re += go.re * y.im + go.im * y.re;
            // gradient with respect to the normalized value
            let gy = C64::new(g_rr * go.re + g_ri * go.im, g_ri * go.re + g_ii * go.im);
            // direct path through c: M^T gy, M symmetric
            gx[i] = w.apply(gy);
            if saved.training {
                let c = x[i] - saved.mean[h];
                g_m[0] += gy.re * c.re;
                g_m[1] += gy.re * c.im;
                g_m[2] += gy.im * c.re;
                g_m[3] += gy.im * c.im;
            }
        }
        if !saved.training {
            continue;
        }
        let s = w.covariance_adjoint(g_m);
        // (S + S^T)/rows applied to c
        let sym = [
            2.0 * s[0] * inv_rows,
            (s[1] + s[2]) * inv_rows,
            (s[1] + s[2]) * inv_rows,
            2.0 * s[3] * inv_rows,
        ];
        let mut mean_g = C64::new(0.0, 0.0);
        for r in 0..rows {
            let i = r * features + h;
            let c = x[i] - saved.mean[h];
            gx[i] += C64::new(sym[0] * c.re + sym[1] * c.im, sym[2] * c.re + sym[3] * c.im);
            mean_g += gx[i];
        }
        mean_g *= inv_rows;
        for r in 0..rows {
            gx[r * features + h] -= mean_g;
        }
    }
    (gx, gscale, gshift)
}
