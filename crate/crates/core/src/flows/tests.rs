use super::*;
use crate::numkit::finite_diff_grad;
use nalgebra::DMatrix;
use std::f64::consts::LN_2;

fn randomize(map: &mut TransportMap, rng: &mut Rng, scale: f64) {
    let p: Vec<f64> = (0..map.param_count()).map(|_| scale * rng.normal()).collect();
    map.set_params(&p).unwrap();
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * b.abs().max(1.0)
}

fn all_kinds(dim: usize, rng: &mut Rng) -> Vec<TransportMap> {
    let mut maps = vec![
        TransportMap::affine(dim),
        TransportMap::iaf(dim, 1, &[8, 8], rng),
        TransportMap::iaf(dim, 2, &[8], rng),
        TransportMap::realnvp(dim, 2, &[8, 8], rng),
        TransportMap::realnvp(dim, 4, &[6], rng),
    ];
    for m in &mut maps {
        randomize(m, rng, 0.3);
    }
    maps
}

#[test]
fn identity_forward() {
    let m = TransportMap::identity(2);
    let (z, ld) = m.forward(&[0.3, -0.7]).unwrap();
    assert_eq!(z, vec![0.3, -0.7]);
    assert_eq!(ld, 0.0);
    assert_eq!(m.inverse(&[1.5, 2.0]).unwrap(), vec![1.5, 2.0]);
    assert_eq!(m.param_count(), 0);
}

#[test]
fn affine_forward_and_inverse() {
    let m = TransportMap::affine_with(vec![1.0, -1.0], vec![LN_2, 0.0]).unwrap();
    let (z, ld) = m.forward(&[0.5, 2.0]).unwrap();
    assert!((z[0] - 2.0).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
    assert!((ld - LN_2).abs() < 1e-15);
    let eps = m.inverse(&[2.0, 1.0]).unwrap();
    assert!((eps[0] - 0.5).abs() < 1e-15 && (eps[1] - 2.0).abs() < 1e-15);
}

#[test]
fn log_q_examples() {
    let id = TransportMap::identity(2);
    assert!((id.log_q(&[0.0, 0.0]).unwrap() + (2.0 * PI).ln()).abs() < 1e-12);
    assert!((id.log_q(&[0.0, 0.0]).unwrap() + 1.837877).abs() < 1e-6);

    let m = TransportMap::affine_with(vec![0.0, 0.0], vec![LN_2, LN_2]).unwrap();
    let lq = m.log_q(&[0.0, 0.0]).unwrap();
    assert!((lq - (-(2.0 * PI).ln() - 2.0 * LN_2)).abs() < 1e-12);
    assert!((lq + 3.224172).abs() < 1e-6);
}

#[test]
fn affine_log_q_translation_invariant() {
    let c = [0.4, -1.3];
    let base = TransportMap::affine_with(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
    let reference = base.log_q(&c).unwrap();
    for mu in [[1.0, 2.0], [-3.0, 0.5], [10.0, -7.0]] {
        let m = TransportMap::affine_with(mu.to_vec(), vec![0.0, 0.0]).unwrap();
        let z = [mu[0] + c[0], mu[1] + c[1]];
        assert!((m.log_q(&z).unwrap() - reference).abs() < 1e-12);
    }
}

#[test]
fn affine_score_examples() {
    let m = TransportMap::affine(1);
    let g = m.grad_log_q_params(&[2.0]).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-14);
    assert!((g[1] - 3.0).abs() < 1e-14);

    let m = TransportMap::affine_with(vec![0.7], vec![0.0]).unwrap();
    assert_eq!(m.grad_log_q_params(&[0.7]).unwrap()[0], 0.0);
}

#[test]
fn identity_forward_gradients() {
    let m = TransportMap::identity(3);
    let u = [0.1, -2.0, 3.0];
    let g = m.grad_forward_inputs(&[1.0, 2.0, 3.0], &u).unwrap();
    assert_eq!(g.vjp_input, u.to_vec());
    assert_eq!(g.logdet_input, vec![0.0; 3]);
    assert!(g.vjp_params.is_empty() && g.logdet_params.is_empty());
}

#[test]
fn affine_forward_gradients() {
    let m = TransportMap::affine_with(vec![0.0, 0.0], vec![LN_2, 0.0]).unwrap();
    let g = m.grad_forward_inputs(&[0.3, 0.4], &[1.0, 0.0]).unwrap();
    assert!((g.vjp_input[0] - 2.0).abs() < 1e-15 && g.vjp_input[1] == 0.0);
    let g = m.grad_forward_inputs(&[0.3, 0.4], &[0.0, 1.0]).unwrap();
    assert!(g.vjp_input[0] == 0.0 && (g.vjp_input[1] - 1.0).abs() < 1e-15);
    assert_eq!(&g.logdet_params[2..], &[1.0, 1.0]);
    assert_eq!(&g.logdet_params[..2], &[0.0, 0.0]);
}

#[test]
fn zero_conditioners_are_identity() {
    let mut rng = Rng::new(0);
    for mut m in [
        TransportMap::iaf(3, 2, &[16, 16], &mut rng),
        TransportMap::realnvp(3, 2, &[16, 16], &mut rng),
    ] {
        // freshly built: hidden weights random, output layer zero
        let eps = [0.3, -1.1, 2.5];
        let (z, ld) = m.forward(&eps).unwrap();
        assert_eq!(z, eps.to_vec());
        assert_eq!(ld, 0.0);
        // fully zero conditioners
        m.set_params(&vec![0.0; m.param_count()]).unwrap();
        let (z, ld) = m.forward(&eps).unwrap();
        assert_eq!(z, eps.to_vec());
        assert_eq!(ld, 0.0);
        assert_eq!(m.inverse(&eps).unwrap(), eps.to_vec());
    }
}

#[test]
fn realnvp_checkerboard_masks_alternate() {
    let mut rng = Rng::new(0);
    let m = TransportMap::realnvp(2, 2, &[4], &mut rng);
    let masks: Vec<Vec<u8>> = m
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Coupling(c) => c.mask(),
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(masks, vec![vec![1, 0], vec![0, 1]]);
}

#[test]
fn iaf_is_autoregressive() {
    let mut rng = Rng::new(5);
    let mut m = TransportMap::iaf(4, 1, &[16, 16], &mut rng);
    randomize(&mut m, &mut rng, 0.5);
    let eps = rng.normal_vec(4);
    let (z, _) = m.forward(&eps).unwrap();
    // perturbing ε_3 must leave z_0..z_2 untouched
    let mut e2 = eps.clone();
    e2[3] += 1.0;
    let (z2, _) = m.forward(&e2).unwrap();
    assert_eq!(&z[..3], &z2[..3]);
    assert_ne!(z[3], z2[3]);
}

#[test]
fn parameter_length_checked() {
    let mut m = TransportMap::affine(2);
    assert!(matches!(m.set_params(&[0.0; 3]), Err(FlowError::ParamCount { expected: 4, got: 3 })));
    assert!(matches!(m.forward(&[0.0]), Err(FlowError::Dimension { .. })));
}

#[test]
fn non_finite_scale_is_rejected() {
    let m = TransportMap::affine_with(vec![0.0], vec![f64::NAN]).unwrap();
    assert!(m.inverse(&[1.0]).is_err());
    assert!(matches!(m.forward(&[1.0]), Err(FlowError::NonFinite { layer: 0 })));
}

#[test]
fn round_trip_errors() {
    let mut rng = Rng::new(11);
    let mut affine = TransportMap::affine(3);
    randomize(&mut affine, &mut rng, 1.0);
    let mut rnvp = TransportMap::realnvp(3, 4, &[16, 16], &mut rng);
    randomize(&mut rnvp, &mut rng, 0.3);
    let mut iaf = TransportMap::iaf(3, 2, &[16, 16], &mut rng);
    randomize(&mut iaf, &mut rng, 0.3);
    let identity = TransportMap::identity(3);
    for (m, tol) in [(&identity, 1e-10), (&affine, 1e-10), (&rnvp, 1e-8), (&iaf, 1e-6)] {
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let eps = rng.normal_vec(3);
            let (z, _) = m.forward(&eps).unwrap();
            let back = m.inverse(&z).unwrap();
            for (a, b) in back.iter().zip(&eps) {
                worst = worst.max((a - b).abs());
            }
            let z2 = m.forward(&back).unwrap().0;
            for (a, b) in z2.iter().zip(&z) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < tol, "{:?} round-trip error {worst}", m.kind());
    }
}

#[test]
fn inverse_logdet_matches_forward_logdet() {
    let mut rng = Rng::new(12);
    for m in all_kinds(3, &mut rng) {
        let eps = rng.normal_vec(3);
        let (z, ld) = m.forward(&eps).unwrap();
        let inv = m.inverse_pass(&z).unwrap();
        assert!((inv.logdet - ld).abs() < 1e-9);
    }
}

fn numerical_log_abs_det(m: &TransportMap, eps: &[f64]) -> f64 {
    let d = eps.len();
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for out in 0..d {
        let g = finite_diff_grad(|e| m.forward(e).unwrap().0[out], eps, 1e-5).unwrap();
        for (c, v) in g.into_iter().enumerate() {
            jac[(out, c)] = v;
        }
    }
    jac.determinant().abs().ln()
}

#[test]
fn logdet_matches_numerical_jacobian() {
    let mut rng = Rng::new(13);
    for d in 1..=4 {
        for m in all_kinds(d, &mut rng) {
            for _ in 0..5 {
                let eps = rng.normal_vec(d);
                let (_, ld) = m.forward(&eps).unwrap();
                let num = numerical_log_abs_det(&m, &eps);
                assert!(close(ld, num, 1e-4), "{:?} d={d}: {ld} vs {num}", m.kind());
            }
        }
    }
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = Rng::new(14);
    let mut cases = 0;
    while cases < 100 {
        let d = 1 + cases % 3;
        for m in all_kinds(d, &mut rng) {
            let z = rng.normal_vec(d);
            let g = m.grad_log_q_params(&z).unwrap();
            let p0 = m.params();
            let fd = finite_diff_grad(
                |p| {
                    let mut m2 = m.clone();
                    m2.set_params(p).unwrap();
                    m2.log_q(&z).unwrap()
                },
                &p0,
                1e-5,
            )
            .unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!(close(*a, *b, 1e-4), "{:?}: {a} vs {b}", m.kind());
            }
            cases += 1;
        }
    }
}

#[test]
fn forward_gradients_match_finite_differences() {
    let mut rng = Rng::new(15);
    for _ in 0..20 {
        let d = 2 + (rng.uniform() * 2.0) as usize;
        for m in all_kinds(d, &mut rng) {
            let eps = rng.normal_vec(d);
            let u = rng.normal_vec(d);
            let g = m.grad_forward_inputs(&eps, &u).unwrap();
            let vjp = |e: &[f64]| crate::numkit::dot(&m.forward(e).unwrap().0, &u);
            let ld = |e: &[f64]| m.forward(e).unwrap().1;
            let fd_in = finite_diff_grad(vjp, &eps, 1e-5).unwrap();
            let fd_ld = finite_diff_grad(ld, &eps, 1e-5).unwrap();
            for i in 0..d {
                assert!(close(g.vjp_input[i], fd_in[i], 1e-4));
                assert!(close(g.logdet_input[i], fd_ld[i], 1e-4));
            }
            let p0 = m.params();
            let with = |p: &[f64]| {
                let mut m2 = m.clone();
                m2.set_params(p).unwrap();
                m2.forward(&eps).unwrap()
            };
            let fd_vp = finite_diff_grad(|p| crate::numkit::dot(&with(p).0, &u), &p0, 1e-5).unwrap();
            let fd_lp = finite_diff_grad(|p| with(p).1, &p0, 1e-5).unwrap();
            for k in 0..p0.len() {
                assert!(close(g.vjp_params[k], fd_vp[k], 1e-4));
                assert!(close(g.logdet_params[k], fd_lp[k], 1e-4));
            }
        }
    }
}

fn grid_mass(m: &TransportMap) -> f64 {
    let n = 400;
    let h = 16.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = [-8.0 + (i as f64 + 0.5) * h, -8.0 + (j as f64 + 0.5) * h];
            total += m.log_q(&z).unwrap().exp();
        }
    }
    total * h * h
}

#[test]
fn density_integrates_to_one() {
    let mut rng = Rng::new(16);
    let affine = TransportMap::affine_with(vec![0.5, -0.3], vec![0.2, -0.4]).unwrap();
    let mut rnvp = TransportMap::realnvp(2, 2, &[8], &mut rng);
    randomize(&mut rnvp, &mut rng, 0.2);
    for m in [affine, rnvp] {
        let mass = grid_mass(&m);
        assert!((mass - 1.0).abs() < 0.01, "{:?} mass {mass}", m.kind());
    }
}

#[test]
fn stack_composes_left_to_right() {
    let a = TransportMap::affine_with(vec![1.0], vec![LN_2]).unwrap();
    let b = TransportMap::affine_with(vec![-3.0], vec![0.0]).unwrap();
    let s = TransportMap::stack(vec![a, b]).unwrap();
    let (z, ld) = s.forward(&[1.0]).unwrap();
    // (1 + 2·1) − 3
    assert!((z[0] - 0.0).abs() < 1e-15);
    assert!((ld - LN_2).abs() < 1e-15);
    assert!((s.inverse(&[0.0]).unwrap()[0] - 1.0).abs() < 1e-15);
}
