//! The DGL loss family: leave-one-out MSE of Bayesian GP predictions under a
//! top-network kernel, its sample-similarity matrix, its analytic gradient
//! with respect to the trainee-layer activations, and the closed-form
//! pre-classifier (linear top-network) variant.
//!
//! With B = (K + sigma^2 I)^{-1} and target rows L, the LOO residual of
//! point n is -(B L)_n / B_nn, so
//!
//!   L_DGL = sum_n |(B L)_n|^2 / B_nn^2
//!         = -sum_nm (l_n . l_m) S_nm,   S_nm = -sum_q B_nq B_qm / B_qq^2
//!
//! The two forms are algebraically identical at any jitter; both are
//! implemented as genuinely separate code paths and cross-checked.
//!
//! The gradient with respect to the activations goes through three exact
//! pieces. With r = B L, D1 = diag(2 / B_nn^2), D2 = diag(2 |r_n|^2 / B_nn^3):
//!
//!   W = dL/dB = D1 r L^T - D2 (diagonal part)
//!   G = dL/dK = -B W B = B D2 B - u r^T,   u = B D1 r
//!   dL/dh_n  = sum_m [G + G^T]_nm dK_nm/dh_n   (diagonal counted once)
//!
//! which costs a single N^3 product beyond the factorization. The kernel
//! derivatives come from the reverse-accumulated channels of the kernels
//! crate.
//!
//! When the top-network is the bare linear classifier a closed form
//! applies: with Sigma = H^T H,
//!
//!   L_linear = sum_n |l_n|^2 - sum_nm (l_n . l_m) [H Sigma^{-1} H^T]_nm
//!
//! evaluated through a d x d solve, never an N x N inverse, and its gradient
//! is 2 (H A - L) A^T with A = Sigma^{-1} H^T L.

use gp_core::{loo_predict, loo_variance, posterior_inverse, GpError, LabeledActivations, PosteriorInverse};
use kernels::{cross_grad_channels, kernel_matrix, KernelError, KernelSpec};
use nalgebra::{Cholesky, DMatrix};

#[derive(Debug, thiserror::Error)]
pub enum DglError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("kernel factorization failed after jitter escalation to {final_jitter:.3e}")]
    JitterEscalationFailed { final_jitter: f64 },
    #[error("Sigma = H^T H is singular; pass a ridge to regularize it")]
    SingularSigma,
    #[error("need at least 2 data points, got {0}")]
    TooFewPoints(usize),
    #[error("need N > d for the pre-classifier form, got N = {n}, d = {d}")]
    TooFewPointsForLinear { n: usize, d: usize },
}

/// A DGL evaluation: the loss, its per-point terms |l*_n - l_n|^2, the
/// optional variance term, the similarity matrix when requested, and the
/// jitter that was actually used after any escalation.
pub struct DglValue {
    pub loss: f64,
    pub per_point: Vec<f64>,
    pub variance_term: Option<f64>,
    pub similarity: Option<DMatrix<f64>>,
    pub effective_sigma2: f64,
}

/// Factorizes K + sigma^2 I, escalating the jitter when the factorization
/// fails: first to the scale-aware default 1e-4 trace(K)/N, then once more
/// by a factor of 100. The effective value is reported in the result.
pub fn posterior_with_escalation(
    k: &DMatrix<f64>,
    jitter: f64,
) -> Result<PosteriorInverse, DglError> {
    let n = k.nrows();
    let default = 1e-4 * k.trace() / n as f64;
    let mut attempts = vec![jitter];
    if default > jitter {
        attempts.push(default);
    }
    attempts.push(100.0 * default.max(jitter));
    let last = *attempts.last().unwrap();
    for sigma2 in attempts {
        match posterior_inverse(k, sigma2) {
            Ok(post) => return Ok(post),
            Err(GpError::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(DglError::JitterEscalationFailed { final_jitter: last })
}

/// The DGL loss via the leave-one-out path.
pub fn dgl(
    spec: &KernelSpec,
    data: &LabeledActivations,
    include_variance: bool,
) -> Result<DglValue, DglError> {
    let n = data.len();
    if n < 2 {
        return Err(DglError::TooFewPoints(n));
    }
    let k = kernel_matrix(spec, &data.h)?;
    let post = posterior_with_escalation(&k, spec.jitter)?;
    let mut per_point = Vec::with_capacity(n);
    for i in 0..n {
        let residual = loo_predict(&post, &data.targets, i) - data.targets.row(i);
        per_point.push(residual.norm_squared());
    }
    let loss = per_point.iter().sum();
    let variance_term = include_variance.then(|| (0..n).map(|i| loo_variance(&post, i)).sum());
    Ok(DglValue {
        loss,
        per_point,
        variance_term,
        similarity: None,
        effective_sigma2: post.sigma2,
    })
}

/// The DGL loss on a row subsample, evaluated on the sub-kernel. The default
/// is the full batch (`dgl`); minibatches of moderate size are known not to
/// harm DGL training.
pub fn dgl_minibatch(
    spec: &KernelSpec,
    data: &LabeledActivations,
    rows: &[usize],
    include_variance: bool,
) -> Result<DglValue, DglError> {
    dgl(spec, &data.subset(rows), include_variance)
}

/// The sample-similarity matrix S_nm = -sum_q B_nq B_qm / B_qq^2, computed
/// as -Bt Bt^T with Bt_nq = B_nq / B_qq. Symmetric and negative
/// semi-definite by construction.
pub fn dgl_similarity(post: &PosteriorInverse) -> DMatrix<f64> {
    let n = post.n;
    let mut bt = post.b.clone();
    for q in 0..n {
        let scale = 1.0 / post.b[(q, q)];
        for p in 0..n {
            bt[(p, q)] *= scale;
        }
    }
    -(&bt * bt.transpose())
}

/// Contracts a similarity matrix with the target Gram:
/// loss = -sum_nm (l_n . l_m) S_nm. Used as the second route to the DGL
/// loss; `dgl` is the first.
pub fn dgl_from_similarity(s: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let gram = targets * targets.transpose();
    -gram.zip_fold(s, 0.0, |acc, g, sv| acc + g * sv)
}

/// Analytic gradient of the DGL loss with respect to the activation rows.
///
/// The variance term is not part of this gradient; training minimizes the
/// prediction part only.
pub fn dgl_grad(spec: &KernelSpec, data: &LabeledActivations) -> Result<DMatrix<f64>, DglError> {
    let n = data.len();
    if n < 2 {
        return Err(DglError::TooFewPoints(n));
    }
    let d = data.h.ncols() as f64;
    let k = kernel_matrix(spec, &data.h)?;
    let post = posterior_with_escalation(&k, spec.jitter)?;
    let b = &post.b;

    let r = b * &data.targets;
    let mut d1r = r.clone();
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        let bnn = b[(i, i)];
        let rn2 = r.row(i).norm_squared();
        let s1 = 2.0 / (bnn * bnn);
        for c in 0..r.ncols() {
            d1r[(i, c)] *= s1;
        }
        d2[(i, i)] = 2.0 * rn2 / (bnn * bnn * bnn);
    }
    let u = b * &d1r;
    let g = b * (&d2 * b) - &u * r.transpose();
    let g_hat = &g + g.transpose();

    let channels = cross_grad_channels(spec, &data.h)?;
    let mut diag_coef = vec![0.0; n];
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut acc = g[(i, i)] * channels.diag_chain[i];
        for j in 0..n {
            if j == i {
                continue;
            }
            acc += g_hat[(i, j)] * channels.g_aa[(i, j)];
            m[(i, j)] = g_hat[(i, j)] * channels.g_ab[(i, j)];
        }
        diag_coef[i] = acc;
    }
    let mut grad = &m * &data.h * (spec.sigma_w2 / d);
    for i in 0..n {
        let coef = 2.0 * spec.sigma_w2 / d * diag_coef[i];
        for j in 0..data.h.ncols() {
            grad[(i, j)] += coef * data.h[(i, j)];
        }
    }
    Ok(grad)
}

fn sigma_cholesky(
    h: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64), DglError> {
    let d = h.ncols();
    let mut sigma = h.transpose() * h;
    let eps = ridge.unwrap_or_else(|| 1e-8 * sigma.trace() / d as f64);
    for i in 0..d {
        sigma[(i, i)] += eps;
    }
    let chol = Cholesky::new(sigma).ok_or(DglError::SingularSigma)?;
    Ok((chol, eps))
}

/// The pre-classifier DGL closed form,
/// sum_n |l_n|^2 - sum_nm (l_n . l_m) [H Sigma^{-1} H^T]_nm, through a
/// d x d solve. `ridge` of None applies the default 1e-8 trace(Sigma)/d;
/// Some(0.0) keeps the form exactly GL(d)-invariant.
pub fn linear_dgl(data: &LabeledActivations, ridge: Option<f64>) -> Result<f64, DglError> {
    let (n, d) = (data.h.nrows(), data.h.ncols());
    if n <= d {
        return Err(DglError::TooFewPointsForLinear { n, d });
    }
    let (chol, _) = sigma_cholesky(&data.h, ridge)?;
    let a = chol.solve(&(data.h.transpose() * &data.targets));
    let w = &data.h * a;
    let const_term = data.targets.norm_squared();
    let cross = data.targets.zip_fold(&w, 0.0, |acc, t, wv| acc + t * wv);
    Ok(const_term - cross)
}

/// Analytic gradient of the pre-classifier closed form: 2 (H A - L) A^T
/// with A = Sigma^{-1} H^T L, valid at any ridge.
pub fn linear_dgl_grad(
    data: &LabeledActivations,
    ridge: Option<f64>,
) -> Result<DMatrix<f64>, DglError> {
    let (n, d) = (data.h.nrows(), data.h.ncols());
    if n <= d {
        return Err(DglError::TooFewPointsForLinear { n, d });
    }
    let (chol, _) = sigma_cholesky(&data.h, ridge)?;
    let a = chol.solve(&(data.h.transpose() * &data.targets));
    let w = &data.h * &a;
    Ok(2.0 * (w - &data.targets) * a.transpose())
}

/// The projector onto the kernel (null space) of H H^T:
/// P = I - H Sigma^{-1} H^T, with P^2 = P, P H H^T = 0, trace(P) = N - d.
/// No ridge is applied; a singular Sigma is an error.
pub fn kernel_projector(h: &DMatrix<f64>) -> Result<DMatrix<f64>, DglError> {
    let n = h.nrows();
    let sigma = h.transpose() * h;
    let chol = Cholesky::new(sigma).ok_or(DglError::SingularSigma)?;
    let x = chol.solve(&h.transpose());
    Ok(DMatrix::identity(n, n) - h * x)
}

/// Pre-classifier context: Sigma = H^T H, the projector Gram H Sigma^{-1} H^T,
/// and the normalized dataset Ht = H Sigma^{-1/2} whose covariance is the
/// identity.
pub struct LinearDglContext {
    pub sigma: DMatrix<f64>,
    pub projector_gram: DMatrix<f64>,
    pub normalized: DMatrix<f64>,
}

impl LinearDglContext {
    pub fn new(h: &DMatrix<f64>) -> Result<Self, DglError> {
        let d = h.ncols();
        let sigma = h.transpose() * h;
        let chol = Cholesky::new(sigma.clone()).ok_or(DglError::SingularSigma)?;
        let projector_gram = h * chol.solve(&h.transpose());
        let eig = sigma.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(DglError::SingularSigma);
        }
        let mut inv_sqrt = DMatrix::zeros(d, d);
        for i in 0..d {
            inv_sqrt[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
        }
        let sigma_inv_sqrt = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        let normalized = h * sigma_inv_sqrt;
        Ok(Self {
            sigma,
            projector_gram,
            normalized,
        })
    }

    /// The loss in its normalized pairwise form,
    /// sum_n |l_n|^2 - sum_nm (l_n . l_m)(Ht_n . Ht_m).
    pub fn pairwise_form_loss(&self, targets: &DMatrix<f64>) -> f64 {
        let gram = &self.normalized * self.normalized.transpose();
        let label_gram = targets * targets.transpose();
        targets.norm_squared() - label_gram.zip_fold(&gram, 0.0, |acc, a, b| acc + a * b)
    }
}
