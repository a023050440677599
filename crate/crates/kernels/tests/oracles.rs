//! Independent oracles for the analytic kernels: central finite differences
//! for the Jacobian, eigenvalue checks for positive semi-definiteness,
//! entrywise recomputation for the matrix builder, and random-network
//! Monte-Carlo estimates of the covariance itself.

use kernels::{
    activation_step, kernel_matrix, kernel_matrix_jacobian_row, kernel_value, Activation,
    KernelSpec,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn spec(depth: usize, activation: Activation, sigma_w2: f64, sigma_b2: f64) -> KernelSpec {
    KernelSpec {
        depth,
        activation,
        sigma_w2,
        sigma_b2,
        jitter: 0.0,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))
}

const ALL_ACTIVATIONS: [Activation; 3] = [Activation::ReLU, Activation::Erf, Activation::Linear];

#[test]
fn kernel_matrix_is_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &act in &ALL_ACTIVATIONS {
        for depth in 0..=2 {
            let s = spec(depth, act, 1.4, 0.1);
            let n = rng.gen_range(5..=50);
            let h = random_matrix(&mut rng, n, 4);
            let k = kernel_matrix(&s, &h).unwrap();
            let trace = k.trace();
            let eigs = k.symmetric_eigenvalues();
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                min >= -1e-8 * trace / n as f64,
                "{act:?} depth {depth}: min eigenvalue {min} below PSD tolerance"
            );
        }
    }
}

#[test]
fn kernel_matrix_matches_per_pair_calls_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = spec(2, Activation::ReLU, 2.0, 0.05);
    let h = random_matrix(&mut rng, 20, 5);
    let k = kernel_matrix(&s, &h).unwrap();
    for i in 0..20 {
        let hi: Vec<f64> = h.row(i).iter().copied().collect();
        for j in 0..20 {
            let hj: Vec<f64> = h.row(j).iter().copied().collect();
            let v = kernel_value(&s, &hi, &hj).unwrap();
            let got = if j >= i { k[(i, j)] } else { k[(j, i)] };
            assert_eq!(got.to_bits(), v.to_bits(), "entry ({i},{j}) not bit-identical");
        }
    }
}

#[test]
fn duplicated_point_rank_one() {
    let s = spec(0, Activation::Linear, 1.0, 0.0);
    let h = DMatrix::from_row_slice(2, 3, &[0.2, -0.5, 1.1, 0.2, -0.5, 1.1]);
    let k = kernel_matrix(&s, &h).unwrap();
    assert_eq!(k[(0, 0)], k[(0, 1)]);
    assert_eq!(k[(0, 0)], k[(1, 1)]);
}

#[test]
fn orthonormal_rows_identity() {
    let d = 3;
    let s = spec(0, Activation::Linear, d as f64, 0.0);
    let h = DMatrix::identity(3, d);
    let k = kernel_matrix(&s, &h).unwrap();
    assert!((&k - DMatrix::identity(3, 3)).amax() < 1e-15);
}

fn jacobian_fd_check(s: &KernelSpec, h: &DMatrix<f64>, n: usize, tol: f64) {
    let jac = kernel_matrix_jacobian_row(s, h, n).unwrap();
    let step = 1e-6;
    for m in 0..h.nrows() {
        for i in 0..h.ncols() {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[(n, i)] += step;
            hm[(n, i)] -= step;
            let kp = kernel_matrix(s, &hp).unwrap()[(n, m)];
            let km = kernel_matrix(s, &hm).unwrap()[(n, m)];
            let fd = (kp - km) / (2.0 * step);
            let scale = fd.abs().max(jac[(m, i)].abs()).max(1e-3);
            assert!(
                (fd - jac[(m, i)]).abs() / scale < tol,
                "{:?} depth {} entry ({m},{i}): analytic {} vs fd {}",
                s.activation,
                s.depth,
                jac[(m, i)],
                fd
            );
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &act in &ALL_ACTIVATIONS {
        for depth in 0..=2 {
            let s = spec(depth, act, 1.6, 0.08);
            let h = random_matrix(&mut rng, 6, 3);
            jacobian_fd_check(&s, &h, 0, 1e-5);
            jacobian_fd_check(&s, &h, 4, 1e-5);
        }
    }
}

#[test]
fn erf_jacobian_at_coincident_points() {
    let s = spec(1, Activation::Erf, 1.2, 0.1);
    let mut h = DMatrix::from_row_slice(3, 2, &[0.4, -0.9, 0.4, -0.9, 1.0, 0.3]);
    let jac = kernel_matrix_jacobian_row(&s, &h, 0).unwrap();
    let step = 1e-6;
    for i in 0..2 {
        let orig = h[(0, i)];
        h[(0, i)] = orig + step;
        let kp = kernel_matrix(&s, &h).unwrap()[(0, 0)];
        h[(0, i)] = orig - step;
        let km = kernel_matrix(&s, &h).unwrap()[(0, 0)];
        h[(0, i)] = orig;
        let fd = (kp - km) / (2.0 * step);
        assert!((fd - jac[(0, i)]).abs() / fd.abs().max(1e-3) < 1e-5);
    }
}

#[test]
fn relu_coincident_branch_continuity() {
    let s = 1.3;
    let step_at = |c: f64| activation_step(Activation::ReLU, 2.0, 0.1, s, c * s, s);
    let exact = step_at(1.0 - 1e-13);
    let near = step_at(1.0 - 1e-11);
    assert!((exact.value - near.value).abs() < 1e-8);
    assert!((exact.d_kab - near.d_kab).abs() < 1e-5);
    assert!(exact.d_kaa.abs() < 1e-6 && near.d_kaa.abs() < 1e-5);
}

struct McEstimate {
    value: f64,
    se: f64,
}

fn act_apply(act: Activation, z: f64) -> f64 {
    match act {
        Activation::ReLU => z.max(0.0),
        Activation::Erf => libm::erf(z),
        Activation::Linear => z,
    }
}

/// Empirical covariance of a random finite-width top-network, with the final
/// readout integrated analytically: conditioned on the last hidden features,
/// E[z_a z_b] = sigma_b2 + sigma_w2 * mean_j(phi_a[j] phi_b[j]), so the
/// estimator averages feature products and its standard error is the unit
/// scatter of those products. For depth 2 the layer-1 sampling error is
/// propagated through the analytic step partials.
fn mc_kernel(
    s: &KernelSpec,
    h_a: &[f64],
    h_b: &[f64],
    width: usize,
    rng: &mut ChaCha8Rng,
) -> McEstimate {
    assert!(s.depth >= 1 && s.depth <= 2);
    let d = h_a.len();
    let wsd = (s.sigma_w2 / d as f64).sqrt();
    let bsd = s.sigma_b2.sqrt();
    let mut phi_a = vec![0.0; width];
    let mut phi_b = vec![0.0; width];
    for j in 0..width {
        let mut za = 0.0;
        let mut zb = 0.0;
        for i in 0..d {
            let w: f64 = StandardNormal.sample(rng);
            za += wsd * w * h_a[i];
            zb += wsd * w * h_b[i];
        }
        let bias: f64 = StandardNormal.sample(rng);
        za += bsd * bias;
        zb += bsd * bias;
        phi_a[j] = act_apply(s.activation, za);
        phi_b[j] = act_apply(s.activation, zb);
    }
    let stats = |xa: &[f64], xb: &[f64]| {
        let m = xa.len() as f64;
        let mean = xa.iter().zip(xb).map(|(a, b)| a * b).sum::<f64>() / m;
        let var = xa
            .iter()
            .zip(xb)
            .map(|(a, b)| (a * b - mean).powi(2))
            .sum::<f64>()
            / (m - 1.0);
        (
            s.sigma_b2 + s.sigma_w2 * mean,
            s.sigma_w2 * (var / m).sqrt(),
        )
    };
    if s.depth == 1 {
        let (value, se) = stats(&phi_a, &phi_b);
        return McEstimate { value, se };
    }
    let (k1ab, se1ab) = stats(&phi_a, &phi_b);
    let (k1aa, se1aa) = stats(&phi_a, &phi_a);
    let (k1bb, se1bb) = stats(&phi_b, &phi_b);
    let wsd2 = (s.sigma_w2 / width as f64).sqrt();
    let mut phi2_a = vec![0.0; width];
    let mut phi2_b = vec![0.0; width];
    for j in 0..width {
        let mut za = 0.0;
        let mut zb = 0.0;
        for i in 0..width {
            let w: f64 = StandardNormal.sample(rng);
            za += wsd2 * w * phi_a[i];
            zb += wsd2 * w * phi_b[i];
        }
        let bias: f64 = StandardNormal.sample(rng);
        za += bsd * bias;
        zb += bsd * bias;
        phi2_a[j] = act_apply(s.activation, za);
        phi2_b[j] = act_apply(s.activation, zb);
    }
    let (value, se2) = stats(&phi2_a, &phi2_b);
    let step = activation_step(s.activation, s.sigma_w2, s.sigma_b2, k1aa, k1ab, k1bb);
    let se = (se2.powi(2)
        + (step.d_kaa * se1aa).powi(2)
        + (step.d_kab * se1ab).powi(2)
        + (step.d_kbb * se1bb).powi(2))
    .sqrt();
    McEstimate { value, se }
}

#[test]
fn monte_carlo_consistency_smoke() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let width = 1 << 14;
    for &act in &[Activation::ReLU, Activation::Erf] {
        for depth in 1..=2 {
            let s = spec(depth, act, 1.8, 0.06);
            for _ in 0..3 {
                let d = 6;
                let h_a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let h_b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let est = mc_kernel(&s, &h_a, &h_b, width, &mut rng);
                let exact = kernel_value(&s, &h_a, &h_b).unwrap();
                assert!(
                    (est.value - exact).abs() < 6.0 * est.se,
                    "{act:?} depth {depth}: mc {} vs exact {} (se {})",
                    est.value,
                    exact,
                    est.se
                );
            }
        }
    }
}

#[test]
fn relu_orthogonal_closed_form_vs_mc() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let s = spec(1, Activation::ReLU, 2.0, 0.0);
    let h_a = [1.0, 0.0];
    let h_b = [0.0, 1.0];
    let est = mc_kernel(&s, &h_a, &h_b, 1 << 16, &mut rng);
    let exact = kernel_value(&s, &h_a, &h_b).unwrap();
    assert!((exact - 1.0 / std::f64::consts::PI).abs() < 1e-15);
    assert!((est.value - exact).abs() < 4.0 * est.se);
}
