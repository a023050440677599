//! Gaussian-Process posterior algebra over a fixed covariance matrix.
//!
//! Everything downstream reads from one object: the regularized inverse
//! B = (K + sigma^2 I)^{-1}, computed once per kernel evaluation via a
//! Cholesky factorization. The leave-one-out quantities never rebuild the
//! deleted-point systems; they come from closed identities on B:
//!
//! minor inverse:  [Q^{-1}_n]_pq = B_pq - B_pn B_nq / B_nn   (p, q != n)
//! LOO prediction: l*_n = l_n - (B L)_n / B_nn
//! LOO variance:   K*_n = 1 / B_nn - sigma^2
//!
//! The prediction identity holds at every sigma^2 >= 0, not only in the
//! noiseless limit: expanding the Bayesian formula
//! l*_n = sum_qp K_nq [B(D_n)]_qp l_p through the minor-inverse relation
//! cancels the sigma^2 terms exactly. `loo_predict_expanded` keeps that
//! literal expansion alive as a second, independent code path for
//! cross-checks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, RowDVector};

#[derive(Debug, thiserror::Error)]
pub enum GpError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("factorization failed: K + sigma^2 I is not positive definite (sigma^2 = {sigma2:.3e}); raise jitter")]
    NotPositiveDefinite { sigma2: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in input")]
    NonFinite,
}

/// The matrix B = (K + sigma^2 I)^{-1} together with the factorization it
/// came from. Immutable after construction; every DGL formula reads from it.
pub struct PosteriorInverse {
    pub b: DMatrix<f64>,
    pub sigma2: f64,
    pub chol: Cholesky<f64, Dyn>,
    pub n: usize,
}

/// Activation rows H with their target rows L and integer label ids.
///
/// Target encodings: one-hot rows have a single 1; zero-mean one-hot rows
/// are one-hot shifted by -1/C so each row sums to zero.
#[derive(Clone, Debug)]
pub struct LabeledActivations {
    pub h: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl LabeledActivations {
    pub fn new(h: DMatrix<f64>, targets: DMatrix<f64>, labels: Vec<usize>) -> Result<Self, GpError> {
        if h.nrows() != targets.nrows() || h.nrows() != labels.len() {
            return Err(GpError::DimensionMismatch(format!(
                "{} activation rows, {} target rows, {} labels",
                h.nrows(),
                targets.nrows(),
                labels.len()
            )));
        }
        if h.iter().any(|x| !x.is_finite()) || targets.iter().any(|x| !x.is_finite()) {
            return Err(GpError::NonFinite);
        }
        Ok(Self { h, targets, labels })
    }

    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    /// One-hot target rows for integer labels in [0, classes).
    pub fn one_hot(h: DMatrix<f64>, labels: Vec<usize>, classes: usize) -> Result<Self, GpError> {
        let targets = encode(&labels, classes, 0.0)?;
        Self::new(h, targets, labels)
    }

    /// Zero-mean one-hot targets: one-hot minus 1/C per component.
    pub fn zero_mean_one_hot(
        h: DMatrix<f64>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, GpError> {
        let targets = encode(&labels, classes, 1.0 / classes as f64)?;
        Self::new(h, targets, labels)
    }

    /// The rows named by `indices`, in order, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let h = DMatrix::from_fn(indices.len(), self.h.ncols(), |i, j| self.h[(indices[i], j)]);
        let targets = DMatrix::from_fn(indices.len(), self.targets.ncols(), |i, j| {
            self.targets[(indices[i], j)]
        });
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { h, targets, labels }
    }
}

fn encode(labels: &[usize], classes: usize, shift: f64) -> Result<DMatrix<f64>, GpError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(GpError::DimensionMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut t = DMatrix::from_element(labels.len(), classes, -shift);
    for (n, &l) in labels.iter().enumerate() {
        t[(n, l)] += 1.0;
    }
    Ok(t)
}

/// Factorizes K + sigma^2 I and materializes its inverse.
///
/// The inverse comes from the Cholesky factor, never from cofactor
/// expansion. A non-positive-definite input is reported back to the caller,
/// whose job is to raise the jitter.
pub fn posterior_inverse(k: &DMatrix<f64>, sigma2: f64) -> Result<PosteriorInverse, GpError> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(GpError::NotSquare(n, k.ncols()));
    }
    if k.iter().any(|x| !x.is_finite()) || !sigma2.is_finite() {
        return Err(GpError::NonFinite);
    }
    let scale = k.amax().max(sigma2).max(1.0);
    let asym = (k - k.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(GpError::NotSymmetric(asym));
    }
    let mut reg = k.clone();
    for i in 0..n {
        reg[(i, i)] += sigma2;
    }
    let chol = Cholesky::new(reg).ok_or(GpError::NotPositiveDefinite { sigma2 })?;
    let b = chol.inverse();
    Ok(PosteriorInverse { b, sigma2, chol, n })
}

/// Inverse of the (n,n)-minor of K + sigma^2 I, straight from B:
/// [Q^{-1}_n]_pq = B_pq - B_pn B_nq / B_nn. Row/column order of the result
/// preserves the original indices with n removed.
pub fn minor_inverse(post: &PosteriorInverse, n: usize) -> DMatrix<f64> {
    assert!(n < post.n, "index {n} out of range for size {}", post.n);
    let b = &post.b;
    let bnn = b[(n, n)];
    let keep: Vec<usize> = (0..post.n).filter(|&i| i != n).collect();
    DMatrix::from_fn(post.n - 1, post.n - 1, |p, q| {
        let (i, j) = (keep[p], keep[q]);
        b[(i, j)] - b[(i, n)] * b[(n, j)] / bnn
    })
}

/// Leave-one-out Bayesian prediction for point n: l*_n = l_n - (B L)_n / B_nn.
pub fn loo_predict(post: &PosteriorInverse, targets: &DMatrix<f64>, n: usize) -> RowDVector<f64> {
    assert_eq!(targets.nrows(), post.n, "targets row count mismatch");
    let bnn = post.b[(n, n)];
    let bl = post.b.row(n) * targets;
    targets.row(n) - bl / bnn
}

/// The same prediction through the literal Bayesian formula
/// l*_n = sum_qp K_nq [B(D_n)]_qp l_p, with B(D_n) built by the
/// minor-inverse identity. Exists as an independent route for consistency
/// tests; `loo_predict` is the production path.
pub fn loo_predict_expanded(
    post: &PosteriorInverse,
    k: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    n: usize,
) -> RowDVector<f64> {
    assert_eq!(targets.nrows(), post.n, "targets row count mismatch");
    let minor = minor_inverse(post, n);
    let keep: Vec<usize> = (0..post.n).filter(|&i| i != n).collect();
    let k_row = DVector::from_fn(post.n - 1, |p, _| k[(n, keep[p])]);
    let sub_targets = DMatrix::from_fn(post.n - 1, targets.ncols(), |p, c| targets[(keep[p], c)]);
    let weights = &minor * k_row;
    RowDVector::from_fn(targets.ncols(), |_, c| {
        weights.iter().zip(sub_targets.column(c).iter()).map(|(w, t)| w * t).sum()
    })
}

/// Leave-one-out posterior variance K*_n = 1 / B_nn - sigma^2.
///
/// Positive definiteness bounds every eigenvalue of B by 1/sigma^2, so the
/// value is non-negative; round-off from the materialized inverse is clamped.
pub fn loo_variance(post: &PosteriorInverse, n: usize) -> f64 {
    assert!(n < post.n, "index {n} out of range for size {}", post.n);
    (1.0 / post.b[(n, n)] - post.sigma2).max(0.0)
}

/// GP posterior mean at an unseen point: k_star^T B L.
pub fn gp_predict(
    post: &PosteriorInverse,
    targets: &DMatrix<f64>,
    k_star: &DVector<f64>,
) -> RowDVector<f64> {
    assert_eq!(targets.nrows(), post.n, "targets row count mismatch");
    assert_eq!(k_star.len(), post.n, "k_star length mismatch");
    let w = &post.b * k_star;
    RowDVector::from_fn(targets.ncols(), |_, c| {
        w.iter().zip(targets.column(c).iter()).map(|(a, t)| a * t).sum()
    })
}
