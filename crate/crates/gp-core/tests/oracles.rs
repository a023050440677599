//! Brute-force oracles for the posterior algebra: naive full inversion,
//! direct minor inversion, and literal delete-one-point refits.

use gp_core::{
    gp_predict, loo_predict, loo_predict_expanded, loo_variance, minor_inverse, posterior_inverse,
};
use kernels::{kernel_matrix, Activation, KernelSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let mut k: DMatrix<f64> = &a * a.transpose() / n as f64;
    for i in 0..n {
        k[(i, i)] += 0.1;
    }
    k
}

fn delete_index(k: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..k.nrows()).filter(|&i| i != n).collect();
    DMatrix::from_fn(keep.len(), keep.len(), |p, q| k[(keep[p], keep[q])])
}

#[test]
fn inverse_matches_lu_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let k = random_spd(&mut rng, 50);
    let post = posterior_inverse(&k, 1e-3).unwrap();
    let mut reg = k.clone();
    for i in 0..50 {
        reg[(i, i)] += 1e-3;
    }
    let oracle = reg.clone().try_inverse().unwrap();
    assert!((&post.b - &oracle).amax() < 1e-8);
    assert!((&post.b * &reg - DMatrix::identity(50, 50)).amax() < 1e-8 * 50.0);
}

#[test]
fn minor_inverse_matches_direct_minor_inversion() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let k = random_spd(&mut rng, 30);
    let post = posterior_inverse(&k, 0.0).unwrap();
    for n in 0..30 {
        let identity = minor_inverse(&post, n);
        let direct = delete_index(&k, n).try_inverse().unwrap();
        assert!(
            (&identity - &direct).amax() < 1e-8,
            "minor-inverse identity failed at index {n}"
        );
    }
}

fn relu_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng));
    let mut targets = DMatrix::zeros(n, 2);
    for i in 0..n {
        let c = rng.gen_range(0..2usize);
        targets[(i, c)] = 0.5;
        targets[(i, 1 - c)] = -0.5;
    }
    (h, targets)
}

#[test]
fn loo_matches_brute_force_refit() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (h, targets) = relu_data(&mut rng, 30, 4);
    let spec = KernelSpec {
        depth: 1,
        activation: Activation::ReLU,
        sigma_w2: 1.5,
        sigma_b2: 0.1,
        jitter: 0.0,
    };
    let k = kernel_matrix(&spec, &h).unwrap();
    let sigma2 = 1e-4;
    let post = posterior_inverse(&k, sigma2).unwrap();
    for n in 0..30 {
        let keep: Vec<usize> = (0..30).filter(|&i| i != n).collect();
        let mut sub = delete_index(&k, n);
        for i in 0..29 {
            sub[(i, i)] += sigma2;
        }
        let sub_inv = sub.try_inverse().unwrap();
        let k_row = DVector::from_fn(29, |p, _| k[(n, keep[p])]);
        let weights = &sub_inv * &k_row;
        let mut expect = [0.0; 2];
        for (p, &q) in keep.iter().enumerate() {
            expect[0] += weights[p] * targets[(q, 0)];
            expect[1] += weights[p] * targets[(q, 1)];
        }
        let got = loo_predict(&post, &targets, n);
        assert!((got[0] - expect[0]).abs() < 1e-8, "index {n} component 0");
        assert!((got[1] - expect[1]).abs() < 1e-8, "index {n} component 1");

        let expect_var = k[(n, n)] - (k_row.transpose() * &sub_inv * &k_row)[(0, 0)];
        assert!(
            (loo_variance(&post, n) - expect_var).abs() < 1e-8,
            "variance at index {n}"
        );
        assert!(loo_variance(&post, n) >= 0.0);
    }
}

#[test]
fn loo_two_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (h, targets) = relu_data(&mut rng, 20, 3);
    let spec = KernelSpec {
        depth: 2,
        activation: Activation::Erf,
        sigma_w2: 1.2,
        sigma_b2: 0.05,
        jitter: 0.0,
    };
    let k = kernel_matrix(&spec, &h).unwrap();
    for &sigma2 in &[1e-6, 1e-3, 1e-1] {
        let post = posterior_inverse(&k, sigma2).unwrap();
        for n in 0..20 {
            let compact = loo_predict(&post, &targets, n);
            let expanded = loo_predict_expanded(&post, &k, &targets, n);
            assert!(
                (compact - expanded).amax() < 1e-10,
                "paths disagree at sigma2 {sigma2}, index {n}"
            );
        }
    }
}

#[test]
fn loo_invariant_under_permuting_other_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let (h, targets) = relu_data(&mut rng, 12, 3);
    let spec = KernelSpec {
        depth: 1,
        activation: Activation::ReLU,
        sigma_w2: 2.0,
        sigma_b2: 0.0,
        jitter: 0.0,
    };
    let k = kernel_matrix(&spec, &h).unwrap();
    let post = posterior_inverse(&k, 1e-4).unwrap();
    let baseline = loo_predict(&post, &targets, 0);

    let mut perm: Vec<usize> = (1..12).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let order: Vec<usize> = std::iter::once(0).chain(perm).collect();
    let hp = DMatrix::from_fn(12, 3, |i, j| h[(order[i], j)]);
    let tp = DMatrix::from_fn(12, 2, |i, j| targets[(order[i], j)]);
    let kp = kernel_matrix(&spec, &hp).unwrap();
    let post_p = posterior_inverse(&kp, 1e-4).unwrap();
    let permuted = loo_predict(&post_p, &tp, 0);
    assert!((baseline - permuted).amax() < 1e-10);
}

#[test]
fn gp_predict_matches_weight_space_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let n = 16;
    let d = 4;
    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let targets = DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
    let sigma_w2 = 0.7;
    let sigma2 = 1e-2;

    let k = &x * x.transpose() * sigma_w2;
    let post = posterior_inverse(&k, sigma2).unwrap();

    let x_star = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let k_star = &x * &x_star * sigma_w2;
    let gp = gp_predict(&post, &targets, &k_star);

    let mut a = x.transpose() * &x;
    for i in 0..d {
        a[(i, i)] += sigma2 / sigma_w2;
    }
    let w_hat = a.try_inverse().unwrap() * x.transpose() * &targets;
    let weight_space = (x_star.transpose() * w_hat)[(0, 0)];
    assert!((gp[0] - weight_space).abs() < 1e-10);
}
