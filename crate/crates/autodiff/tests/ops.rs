use std::f64::consts::PI;

use fas_autodiff::{grad_check, AutodiffError, CTensor, Tape, C64};
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn close(a: C64, b: C64, tol: f64) -> bool {
    (a - b).norm() <= tol
}

#[test]
fn elementwise_values() {
    let mut t = Tape::new();
    let a = t.leaf(CTensor::scalar(c(1.0, 2.0)));
    let b = t.leaf(CTensor::scalar(c(3.0, -1.0)));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s).data()[0], c(4.0, 1.0));

    let zero = t.constant(CTensor::scalar(c(0.0, 0.0)));
    let same = t.add(a, zero).unwrap();
    assert_eq!(t.value(same), t.value(a));

    let i = t.constant(CTensor::scalar(c(0.0, 1.0)));
    let ii = t.cmul(i, i).unwrap();
    assert_eq!(t.value(ii).data()[0], c(-1.0, 0.0));

    let ac = t.conj(a).unwrap();
    let mag = t.cmul(a, ac).unwrap();
    assert_eq!(t.value(mag).data()[0], c(5.0, 0.0));
}

#[test]
fn gradient_of_real_sum_is_all_ones_on_real_parts() {
    let mut t = Tape::new();
    let x = t.leaf(CTensor::new(vec![3], vec![c(1.0, 1.0), c(-2.0, 0.5), c(0.0, 3.0)]).unwrap());
    let s = t.sum_all(x).unwrap();
    let l = t.re(s).unwrap();
    let g = t.backward(l).unwrap().get(x);
    assert!(g.data().iter().all(|&z| z == c(1.0, 0.0)));
}

#[test]
fn matmul_identity_and_scalar_case() {
    let mut t = Tape::new();
    let b = CTensor::new(
        vec![2, 3],
        (0..6).map(|k| c(k as f64, -(k as f64) / 2.0)).collect(),
    )
    .unwrap();
    let id = t.constant(CTensor::identity(2));
    let bv = t.leaf(b.clone());
    let p = t.matmul(id, bv).unwrap();
    assert_eq!(t.value(p), &b);

    let x = t.leaf(CTensor::new(vec![1, 1], vec![c(0.5, -1.5)]).unwrap());
    let y = t.leaf(CTensor::new(vec![1, 1], vec![c(2.0, 0.25)]).unwrap());
    let m = t.matmul(x, y).unwrap();
    let e = t.cmul(x, y).unwrap();
    assert_eq!(t.value(m), t.value(e));
}

#[test]
fn hermitian_of_row_vector_is_conjugated_column() {
    let mut t = Tape::new();
    let row = t.leaf(CTensor::new(vec![1, 2], vec![c(1.0, 2.0), c(-3.0, 0.5)]).unwrap());
    let col = t.hermitian(row).unwrap();
    assert_eq!(t.shape(col), &[2, 1]);
    assert_eq!(t.value(col).data(), &[c(1.0, -2.0), c(-3.0, -0.5)]);
    let back = t.hermitian(col).unwrap();
    assert_eq!(t.value(back), t.value(row));
}

#[test]
fn concat_shapes_add_and_single_part_is_identity() {
    let mut t = Tape::new();
    let a = t.leaf(CTensor::zeros(&[2, 3]));
    let b = t.leaf(CTensor::filled(&[2, 1], c(1.0, 0.0)));
    let ab = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(ab), &[2, 4]);
    let only = t.concat(&[b], 1).unwrap();
    assert_eq!(t.value(only), t.value(b));
    assert!(t.concat(&[a, b], 0).is_err());
}

#[test]
fn real_part_and_its_gradient() {
    let mut t = Tape::new();
    let z = t.leaf(CTensor::scalar(c(3.0, 4.0)));
    let r = t.re(z).unwrap();
    assert_eq!(t.value(r).data()[0], c(3.0, 0.0));
    let g = t.backward(r).unwrap().get(z);
    assert_eq!(g.data()[0], c(1.0, 0.0));
}

#[test]
fn exp_i_values() {
    let mut t = Tape::new();
    let phi = t.leaf(CTensor::from_real(&[2], &[0.0, PI]).unwrap());
    let e = t.exp_i(phi).unwrap();
    assert_eq!(t.value(e).data()[0], c(1.0, 0.0));
    assert!(close(t.value(e).data()[1], c(-1.0, 0.0), 1e-15));
}

#[test]
fn activations() {
    let mut t = Tape::new();
    let x = t.leaf(CTensor::from_real(&[2], &[2.0, -1.0]).unwrap());
    let y = t.leaky_relu_real(x, 0.01).unwrap();
    assert_eq!(t.value(y).real_parts(), vec![2.0, -0.01]);
    let s = t.sum_all(y).unwrap();
    let g = t.backward(s).unwrap().get(x);
    assert_eq!(g.real_parts(), vec![1.0, 0.01]);

    let mut t = Tape::new();
    let z = t.leaf(CTensor::new(vec![2], vec![c(1.0, -2.0), c(-1.0, -1.0)]).unwrap());
    let r = t.crelu(z).unwrap();
    assert_eq!(t.value(r).data(), &[c(1.0, 0.0), c(0.0, 0.0)]);

    let mut t = Tape::new();
    let x = t.leaf(CTensor::from_real(&[3], &[0.0, 1.3, -1.3]).unwrap());
    let s = t.sigmoid_real(x).unwrap();
    let v = t.value(s).real_parts();
    assert_eq!(v[0], 0.5);
    assert!((v[2] - (1.0 - v[1])).abs() < 1e-15);
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let mut t = Tape::new();
    let x = t.leaf(CTensor::from_real(&[2], &[0.0, 0.0]).unwrap());
    let s = t.softmax_real(x).unwrap();
    assert_eq!(t.value(s).real_parts(), vec![0.5, 0.5]);

    let a = t.leaf(CTensor::from_real(&[3], &[0.3, -1.2, 2.0]).unwrap());
    let b = t.leaf(CTensor::from_real(&[3], &[5.3, 3.8, 7.0]).unwrap());
    let sa = t.softmax_real(a).unwrap();
    let sb = t.softmax_real(b).unwrap();
    assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-15);
}

#[test]
fn norm_values_and_guard_at_zero() {
    let mut t = Tape::new();
    let u = t.leaf(CTensor::new(vec![2, 1], vec![c(0.6, 0.0), c(0.0, 0.8)]).unwrap());
    let n = t.l2_norm(u, 0).unwrap();
    assert!((t.value(n).data()[0].re - 1.0).abs() < 1e-15);

    let z = t.leaf(CTensor::zeros(&[3, 1]));
    let nz = t.l2_norm(z, 0).unwrap();
    assert_eq!(t.value(nz).data()[0], c(0.0, 0.0));
    let s = t.sum_all(nz).unwrap();
    let g = t.backward(s).unwrap().get(z);
    assert!(g
        .data()
        .iter()
        .all(|v| v.re.is_finite() && *v == c(0.0, 0.0)));
    assert_eq!(t.diagnostics().guarded_norms, 1);
}

#[test]
fn inverse_examples() {
    let mut t = Tape::new();
    let id = t.leaf(CTensor::identity(3));
    let inv = t.hermitian_pd_inverse(id).unwrap();
    assert_eq!(t.value(inv), &CTensor::identity(3));

    let d = t.leaf(CTensor::from_real(&[2, 2], &[2.0, 0.0, 0.0, 4.0]).unwrap());
    let dinv = t.hermitian_pd_inverse(d).unwrap();
    assert_eq!(t.value(dinv).real_parts(), vec![0.5, 0.0, 0.0, 0.25]);

    let nonherm = t.leaf(CTensor::from_real(&[2, 2], &[1.0, 2.0, 0.0, 1.0]).unwrap());
    assert!(matches!(
        t.hermitian_pd_inverse(nonherm),
        Err(AutodiffError::NotHermitian(_))
    ));
}

#[test]
fn near_singular_inverse_is_regularized_and_flagged() {
    let mut t = Tape::new();
    let a = t.leaf(CTensor::from_real(&[2, 2], &[1.0, 1.0, 1.0, 1.0 + 1e-14]).unwrap());
    let inv = t.hermitian_pd_inverse(a).unwrap();
    assert_eq!(t.diagnostics().regularized_inverses, 1);
    assert!(t.value(inv).all_finite());
}

#[test]
fn reductions_and_reciprocal() {
    let mut t = Tape::new();
    let x = t.leaf(CTensor::from_real(&[2], &[2.0, 4.0]).unwrap());
    let m = t.mean_all(x).unwrap();
    assert_eq!(t.value(m).data()[0], c(3.0, 0.0));
    let two = t.leaf(CTensor::real_scalar(2.0));
    let r = t.reciprocal(two).unwrap();
    assert_eq!(t.value(r).data()[0], c(0.5, 0.0));
}

#[test]
fn backward_contract() {
    // |z|² has gradient (2a, 2b)
    let mut t = Tape::new();
    let z = t.leaf(CTensor::scalar(c(1.5, -0.5)));
    let zc = t.conj(z).unwrap();
    let p = t.cmul(z, zc).unwrap();
    let l = t.re(p).unwrap();
    let unrelated = t.leaf(CTensor::zeros(&[4]));
    let grads = t.backward(l).unwrap();
    assert_eq!(grads.get(z).data()[0], c(3.0, -1.0));
    assert!(grads
        .get(unrelated)
        .data()
        .iter()
        .all(|v| *v == c(0.0, 0.0)));

    // non-scalar and complex losses are rejected
    let v = t.leaf(CTensor::zeros(&[2]));
    assert!(matches!(t.backward(v), Err(AutodiffError::InvalidLoss(_))));
    let cz = t.leaf(CTensor::scalar(c(1.0, 1.0)));
    assert!(matches!(t.backward(cz), Err(AutodiffError::InvalidLoss(_))));
}

#[test]
fn variables_cannot_cross_tapes() {
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let a = t1.leaf(CTensor::zeros(&[1]));
    assert_eq!(t2.neg(a), Err(AutodiffError::ForeignVar));
}

#[test]
fn backward_replay_is_bitwise_deterministic() {
    let mut t = Tape::new();
    let a = t.leaf(
        CTensor::new(
            vec![2, 2],
            vec![c(0.3, 0.1), c(-0.2, 0.9), c(1.1, -0.4), c(0.05, 0.7)],
        )
        .unwrap(),
    );
    let ah = t.hermitian(a).unwrap();
    let p = t.matmul(a, ah).unwrap();
    let e = t.exp_i(p).unwrap();
    let s = t.sum_all(e).unwrap();
    let l = t.re(s).unwrap();
    let g1 = t.backward(l).unwrap().get(a);
    let g2 = t.backward(l).unwrap().get(a);
    let bits = |x: &CTensor| {
        x.data()
            .iter()
            .map(|z| (z.re.to_bits(), z.im.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&g1), bits(&g2));
}

#[test]
fn exp_i_chain_passes_gradcheck() {
    let phi = CTensor::from_real(&[4], &[0.1, 1.3, -2.2, 0.7]).unwrap();
    let report = grad_check(
        "exp_i chain",
        |t, v| {
            let e = t.exp_i(v[0])?;
            let s = t.scale(e, c(0.4, -1.1))?;
            let q = t.abs_sq(s)?;
            let e2 = t.cmul(e, s)?;
            let r = t.add(e2, q)?;
            let tot = t.sum_all(r)?;
            t.re(tot)
        },
        &[phi],
        1e-4,
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.passed(), "max rel {}", report.max_rel_error);
}

fn arb_c64() -> impl Strategy<Value = C64> {
    (-2.0f64..2.0, -2.0f64..2.0).prop_map(|(r, i)| c(r, i))
}

fn arb_matrix(m: usize, n: usize) -> impl Strategy<Value = CTensor> {
    prop::collection::vec(arb_c64(), m * n).prop_map(move |d| CTensor::new(vec![m, n], d).unwrap())
}

proptest! {
    #[test]
    fn product_hermitian_reverses_order(a in arb_matrix(3, 2), b in arb_matrix(2, 4)) {
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a), t.leaf(b));
        let ab = t.matmul(av, bv).unwrap();
        let lhs = t.hermitian(ab).unwrap();
        let bh = t.hermitian(bv).unwrap();
        let ah = t.hermitian(av).unwrap();
        let rhs = t.matmul(bh, ah).unwrap();
        prop_assert!(t.value(lhs).max_abs_diff(t.value(rhs)) < 1e-12);
    }

    #[test]
    fn holomorphic_ops_commute_with_conjugation(a in arb_matrix(2, 3), b in arb_matrix(3, 2), phi in -5.0f64..5.0) {
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let (ac, bc) = (t.leaf(a.conj()), t.leaf(b.conj()));
        let p = t.matmul(av, bv).unwrap();
        let pc = t.matmul(ac, bc).unwrap();
        prop_assert!(t.value(p).conj().max_abs_diff(t.value(pc)) < 1e-14);

        let bt = t.leaf(b.reshaped(&[2, 3]).unwrap());
        let btc = t.leaf(b.conj().reshaped(&[2, 3]).unwrap());
        let q = t.cmul(av, bt).unwrap();
        let qc = t.cmul(ac, btc).unwrap();
        prop_assert!(t.value(q).conj().max_abs_diff(t.value(qc)) < 1e-14);

        let pos = t.leaf(CTensor::real_scalar(phi));
        let neg = t.leaf(CTensor::real_scalar(-phi));
        let ep = t.exp_i(pos).unwrap();
        let en = t.exp_i(neg).unwrap();
        prop_assert!(t.value(ep).conj().max_abs_diff(t.value(en)) < 1e-15);
    }

    #[test]
    fn hermitian_pd_inverse_residual(m in arb_matrix(4, 4), ridge in 1e-3f64..1.0) {
        // A = M M^H + ridge·I is Hermitian positive definite
        let mut t = Tape::new();
        let mv = t.leaf(m);
        let mh = t.hermitian(mv).unwrap();
        let g = t.matmul(mv, mh).unwrap();
        let r = t.constant(CTensor::identity(4).map(|z| z * ridge));
        let a = t.add(g, r).unwrap();
        let inv = t.hermitian_pd_inverse(a).unwrap();
        let prod = t.matmul(a, inv).unwrap();
        let resid = t.value(prod).max_abs_diff(&CTensor::identity(4));
        prop_assert!(resid < 1e-10, "residual {resid:e}");
    }
}

#[test]
fn inverse_residual_up_to_condition_1e8() {
    // Hermitian A = Q diag(λ) Q^H with a spread of eigenvalues.
    for &cond in &[1e2f64, 1e4, 1e6, 1e8] {
        let n = 3;
        let theta: f64 = 0.7;
        let (s, co) = theta.sin_cos();
        let q = CTensor::new(
            vec![3, 3],
            vec![
                c(co, 0.0),
                c(0.0, -s),
                c(0.0, 0.0),
                c(0.0, -s),
                c(co, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(0.0, 0.0),
                c(1.0, 0.0),
            ],
        )
        .unwrap();
        let lam = [1.0, cond.sqrt(), cond];
        let mut t = Tape::new();
        let qv = t.constant(q);
        let d = t.constant(
            CTensor::from_real(&[3, 3], &[lam[0], 0., 0., 0., lam[1], 0., 0., 0., lam[2]]).unwrap(),
        );
        let qd = t.matmul(qv, d).unwrap();
        let qh = t.hermitian(qv).unwrap();
        let a = t.matmul(qd, qh).unwrap();
        let inv = t.hermitian_pd_inverse(a).unwrap();
        let prod = t.matmul(a, inv).unwrap();
        let resid = t.value(prod).max_abs_diff(&CTensor::identity(n));
        assert!(resid < 1e-10, "cond {cond:e}: residual {resid:e}");
        assert_eq!(t.diagnostics().regularized_inverses, 0);
    }
}

#[test]
fn narrow_selects_a_window() {
    let mut t = Tape::new();
    let x = t.leaf(CTensor::from_real(&[2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap());
    let n = t.narrow(x, 1, 1, 2).unwrap();
    assert_eq!(t.value(n).real_parts(), vec![1., 2., 4., 5.]);
    assert!(t.narrow(x, 1, 2, 2).is_err());
}
