//! Analytic covariance functions of fully-connected top-networks.
//!
//! A trainee layer's output vectors `h` feed a "top-network" of `depth`
//! activated layers followed by a linear readout, all with Gaussian weight
//! priors of variance `sigma_w2 / fan_in` and bias priors of variance
//! `sigma_b2`. In the infinite-width limit the network output is a Gaussian
//! Process whose covariance is computed layer by layer:
//!
//! base:   k0(a,b)   = sigma_w2 * (h_a . h_b) / d + sigma_b2
//! step:   k_{j+1}   = sigma_b2 + sigma_w2 * E[phi(z_a) phi(z_b)]
//!
//! where `(z_a, z_b)` is a centered Gaussian pair with covariance
//! `(k_j(a,a), k_j(a,b), k_j(b,b))`. The step expectation has closed forms:
//!
//! ReLU (arc-cosine kernel):
//!   k' = sigma_b2 + (sigma_w2 / 2 pi) * s * (sin t + (pi - t) cos t),
//!   s = sqrt(kaa kbb), t = arccos(kab / s)
//!   d k'/d kab = sigma_w2 (pi - t) / (2 pi)
//!   d k'/d kaa = sigma_w2 * s * sin t / (4 pi kaa)   (kbb symmetric)
//!
//! Erf:
//!   k' = sigma_b2 + (2 sigma_w2 / pi) * arcsin(2 kab / (p q)),
//!   p = sqrt(1 + 2 kaa), q = sqrt(1 + 2 kbb)
//!   d k'/d kab = (4 sigma_w2 / pi) / (p q sqrt(1 - u^2)),  u = 2 kab / (p q)
//!   d k'/d kaa = -(2 sigma_w2 / pi) * u / ((1 + 2 kaa) sqrt(1 - u^2))
//!
//! Identity (a linear layer): k' = sigma_b2 + sigma_w2 * kab.
//!
//! The base layer is fan-in normalized so the kernel scale is independent of
//! the trainee layer's width, matching the initialization convention
//! `w ~ N(0, sigma_w2 / fan_in)` under which the Monte-Carlo estimates of
//! these kernels converge with width.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Activation of every layer in the top-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    ReLU,
    Erf,
    Linear,
}

/// Declarative description of a top-network covariance function.
///
/// `depth` counts the activated layers above the trainee layer; the final
/// linear readout is implied and not counted. `jitter` is the regulator
/// sigma^2 added to the kernel diagonal by consumers of this spec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub depth: usize,
    pub activation: Activation,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub jitter: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("activation vectors have mismatched dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("non-finite value in kernel input")]
    NonFinite,
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.sigma_w2 > 0.0) || !self.sigma_w2.is_finite() {
            return Err(KernelError::InvalidSpec(format!(
                "sigma_w2 must be positive and finite, got {}",
                self.sigma_w2
            )));
        }
        if !(self.sigma_b2 >= 0.0) || !self.sigma_b2.is_finite() {
            return Err(KernelError::InvalidSpec(format!(
                "sigma_b2 must be non-negative and finite, got {}",
                self.sigma_b2
            )));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(KernelError::InvalidSpec(format!(
                "jitter must be non-negative and finite, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// One recursion layer's output covariance and its partial derivatives with
/// respect to the three scalar inputs of the previous layer.
#[derive(Clone, Copy, Debug)]
pub struct KernelStep {
    pub value: f64,
    pub d_kaa: f64,
    pub d_kab: f64,
    pub d_kbb: f64,
}

const COINCIDENT_EPS: f64 = 1e-12;

/// Applies one activation-kernel recursion step to the covariance triple
/// `(kaa, kab, kbb)` of the previous layer's pre-activations.
pub fn activation_step(
    activation: Activation,
    sigma_w2: f64,
    sigma_b2: f64,
    kaa: f64,
    kab: f64,
    kbb: f64,
) -> KernelStep {
    match activation {
        Activation::Linear => KernelStep {
            value: sigma_b2 + sigma_w2 * kab,
            d_kaa: 0.0,
            d_kab: sigma_w2,
            d_kbb: 0.0,
        },
        Activation::ReLU => {
            let s = (kaa * kbb).sqrt();
            let c = (kab / s).clamp(-1.0, 1.0);
            if 1.0 - c < COINCIDENT_EPS {
                return KernelStep {
                    value: sigma_b2 + sigma_w2 * s / 2.0,
                    d_kaa: 0.0,
                    d_kab: sigma_w2 / 2.0,
                    d_kbb: 0.0,
                };
            }
            let theta = c.acos();
            let sin_t = (1.0 - c * c).sqrt();
            let j = sin_t + (std::f64::consts::PI - theta) * c;
            let two_pi = 2.0 * std::f64::consts::PI;
            KernelStep {
                value: sigma_b2 + sigma_w2 / two_pi * s * j,
                d_kaa: sigma_w2 * s * sin_t / (2.0 * two_pi * kaa),
                d_kab: sigma_w2 * (std::f64::consts::PI - theta) / two_pi,
                d_kbb: sigma_w2 * s * sin_t / (2.0 * two_pi * kbb),
            }
        }
        Activation::Erf => {
            let pa = 1.0 + 2.0 * kaa;
            let pb = 1.0 + 2.0 * kbb;
            let pq = (pa * pb).sqrt();
            let u = (2.0 * kab / pq).clamp(-1.0, 1.0);
            let den = (1.0 - u * u).sqrt();
            let coef = 2.0 * sigma_w2 / std::f64::consts::PI;
            KernelStep {
                value: sigma_b2 + coef * u.asin(),
                d_kaa: -coef * u / (pa * den),
                d_kab: coef * 2.0 / (pq * den),
                d_kbb: -coef * u / (pb * den),
            }
        }
    }
}

/// The diagonal recursion: output self-covariance as a function of the input
/// self-covariance, with its derivative. Equals `activation_step` evaluated
/// at the coincident triple `(k, k, k)`, where the three partials collapse
/// into a single total derivative.
pub fn diagonal_step(activation: Activation, sigma_w2: f64, sigma_b2: f64, k: f64) -> (f64, f64) {
    match activation {
        Activation::Linear => (sigma_b2 + sigma_w2 * k, sigma_w2),
        Activation::ReLU => (sigma_b2 + sigma_w2 * k / 2.0, sigma_w2 / 2.0),
        Activation::Erf => {
            let p = 1.0 + 2.0 * k;
            let u = 2.0 * k / p;
            let value = sigma_b2 + 2.0 * sigma_w2 / std::f64::consts::PI * u.asin();
            let deriv = 4.0 * sigma_w2 / std::f64::consts::PI / (p * (1.0 + 4.0 * k).sqrt());
            (value, deriv)
        }
    }
}

fn base_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::DimensionMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    Ok(())
}

/// Covariance of the top-network outputs at a pair of trainee-layer vectors.
pub fn kernel_value(spec: &KernelSpec, h_a: &[f64], h_b: &[f64]) -> Result<f64, KernelError> {
    spec.validate()?;
    check_pair(h_a, h_b)?;
    if h_a.is_empty() {
        return Err(KernelError::DimensionMismatch(0, 0));
    }
    let d = h_a.len() as f64;
    let mut kab = spec.sigma_w2 * base_dot(h_a, h_b) / d + spec.sigma_b2;
    let mut kaa = spec.sigma_w2 * base_dot(h_a, h_a) / d + spec.sigma_b2;
    let mut kbb = spec.sigma_w2 * base_dot(h_b, h_b) / d + spec.sigma_b2;
    for _ in 0..spec.depth {
        let step = activation_step(spec.activation, spec.sigma_w2, spec.sigma_b2, kaa, kab, kbb);
        kab = step.value;
        kaa = diagonal_step(spec.activation, spec.sigma_w2, spec.sigma_b2, kaa).0;
        kbb = diagonal_step(spec.activation, spec.sigma_w2, spec.sigma_b2, kbb).0;
    }
    Ok(kab)
}

fn rows_of(h: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..h.nrows())
        .map(|n| h.row(n).iter().copied().collect())
        .collect()
}

/// The covariance matrix K(D) over all row pairs of `h` (rows are datapoint
/// activation vectors). The upper triangle is computed and mirrored, so the
/// result is exactly symmetric, and each entry goes through the same scalar
/// code path as `kernel_value`.
pub fn kernel_matrix(spec: &KernelSpec, h: &DMatrix<f64>) -> Result<DMatrix<f64>, KernelError> {
    spec.validate()?;
    let n = h.nrows();
    let rows = rows_of(h);
    for r in &rows {
        if r.iter().any(|x| !x.is_finite()) {
            return Err(KernelError::NonFinite);
        }
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel_value(spec, &rows[i], &rows[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Partial derivatives of row `n` of the kernel matrix with respect to the
/// components of `h_n`: row `m` of the result is the d-vector
/// `d K_{nm} / d h_n`. The diagonal entry accounts for `h_n` appearing on
/// both sides of `K_{nn}`.
pub fn kernel_matrix_jacobian_row(
    spec: &KernelSpec,
    h: &DMatrix<f64>,
    n: usize,
) -> Result<DMatrix<f64>, KernelError> {
    spec.validate()?;
    let rows = rows_of(h);
    let channels = cross_grad_channels(spec, h)?;
    let d = h.ncols() as f64;
    let mut jac = DMatrix::zeros(h.nrows(), h.ncols());
    for m in 0..h.nrows() {
        if m == n {
            for i in 0..h.ncols() {
                jac[(m, i)] = channels.diag_chain[n] * 2.0 * spec.sigma_w2 / d * rows[n][i];
            }
        } else {
            let gaa = channels.g_aa[(n, m)];
            let gab = channels.g_ab[(n, m)];
            for i in 0..h.ncols() {
                jac[(m, i)] = gaa * 2.0 * spec.sigma_w2 / d * rows[n][i]
                    + gab * spec.sigma_w2 / d * rows[m][i];
            }
        }
    }
    Ok(jac)
}

/// Reverse-accumulated sensitivities of every kernel-matrix entry to its base
/// covariances: `g_aa[(n,m)] = d K_nm / d kaa0(n)` and
/// `g_ab[(n,m)] = d K_nm / d kab0(n,m)` for `n != m` (diagonals are zero),
/// plus `diag_chain[n] = d K_nn / d kaa0(n)`. Gradient consumers contract
/// these with the base-layer derivatives `d kaa0 / d h_n = 2 sigma_w2 h_n / d`
/// and `d kab0 / d h_n = sigma_w2 h_m / d` instead of materializing per-row
/// Jacobians.
pub struct CrossGradChannels {
    pub g_aa: DMatrix<f64>,
    pub g_ab: DMatrix<f64>,
    pub diag_chain: Vec<f64>,
}

pub fn cross_grad_channels(
    spec: &KernelSpec,
    h: &DMatrix<f64>,
) -> Result<CrossGradChannels, KernelError> {
    spec.validate()?;
    let n = h.nrows();
    let d = h.ncols() as f64;
    let rows = rows_of(h);
    for r in &rows {
        if r.iter().any(|x| !x.is_finite()) {
            return Err(KernelError::NonFinite);
        }
    }
    let base_self: Vec<f64> = rows
        .iter()
        .map(|r| spec.sigma_w2 * base_dot(r, r) / d + spec.sigma_b2)
        .collect();

    let mut diag_chain = vec![1.0; n];
    let mut self_levels: Vec<Vec<f64>> = vec![base_self.clone()];
    for _ in 0..spec.depth {
        let prev = self_levels.last().unwrap();
        let next: Vec<f64> = prev
            .iter()
            .map(|&k| diagonal_step(spec.activation, spec.sigma_w2, spec.sigma_b2, k).0)
            .collect();
        self_levels.push(next);
    }
    for (i, chain) in diag_chain.iter_mut().enumerate() {
        for level in self_levels.iter().take(spec.depth) {
            *chain *= diagonal_step(spec.activation, spec.sigma_w2, spec.sigma_b2, level[i]).1;
        }
    }

    let mut g_aa = DMatrix::zeros(n, n);
    let mut g_ab = DMatrix::zeros(n, n);
    let mut steps: Vec<KernelStep> = Vec::with_capacity(spec.depth);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut kab = spec.sigma_w2 * base_dot(&rows[i], &rows[j]) / d + spec.sigma_b2;
            steps.clear();
            for level in 0..spec.depth {
                let step = activation_step(
                    spec.activation,
                    spec.sigma_w2,
                    spec.sigma_b2,
                    self_levels[level][i],
                    kab,
                    self_levels[level][j],
                );
                kab = step.value;
                steps.push(step);
            }
            let mut gaa = 0.0;
            let mut gab = 1.0;
            for level in (0..spec.depth).rev() {
                let step = steps[level];
                let sa = diagonal_step(
                    spec.activation,
                    spec.sigma_w2,
                    spec.sigma_b2,
                    self_levels[level][i],
                )
                .1;
                gaa = gab * step.d_kaa + gaa * sa;
                gab *= step.d_kab;
            }
            g_aa[(i, j)] = gaa;
            g_ab[(i, j)] = gab;
        }
    }
    Ok(CrossGradChannels {
        g_aa,
        g_ab,
        diag_chain,
    })
}
