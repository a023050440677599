//! Brute-force cross-checks (`oracle-suite`) and information-plane dumps
//! (`ib-report`).
//!
//! The oracle suite re-derives each core identity by an independent route at
//! small sizes: direct minor inversion against the rank-one update, LOO
//! prediction against delete-and-invert, the DGL loss against its pairwise
//! similarity form, the pre-classifier loss against its normalized-gram
//! form, analytic gradients against central finite differences, projector
//! algebra, kernel symmetry and positivity, mixture-entropy endpoints, and
//! mutual-information formulas against direct pair sums. One line per check,
//! `[OK]` or `[FAIL]`, and an overall boolean for the exit code.

use crate::config::ExperimentConfig;
use crate::runner::Prepared;
use crate::CliError;
use dgl_loss::{
    dgl, dgl_from_similarity, dgl_similarity, dgl_grad, kernel_projector, linear_dgl,
    posterior_with_escalation, LinearDglContext,
};
use gp_core::{loo_predict, loo_variance, minor_inverse, posterior_inverse, LabeledActivations};
use ib_loss::{
    delta_s, mixture_entropy, mutual_info_input, mutual_info_label, pdf, MixtureEntropySpec,
    Population,
};
use kernels::{kernel_matrix, Activation, KernelSpec};
use nalgebra::DMatrix;
use nn::{forward, load_checkpoint};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::LN_2;
use std::io::Write;
use std::path::{Path, PathBuf};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn two_class_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> LabeledActivations {
    let h = randn(rng, n, d);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    LabeledActivations::zero_mean_one_hot(h, labels, 2).expect("well-formed")
}

fn check_minor_inverse() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for trial in 0..10 {
        let n = 5 + 2 * trial;
        let a = randn(&mut rng, n, n);
        let k = &a * a.transpose();
        let post = posterior_inverse(&k, 0.3).map_err(|e| e.to_string())?;
        let drop = trial % n;
        let fast = minor_inverse(&post, drop);
        let keep: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
        let mut reduced = DMatrix::zeros(n - 1, n - 1);
        for (p, &i) in keep.iter().enumerate() {
            for (q, &j) in keep.iter().enumerate() {
                reduced[(p, q)] = k[(i, j)] + if p == q { 0.3 } else { 0.0 };
            }
        }
        let direct = reduced.try_inverse().ok_or("reduced matrix not invertible")?;
        worst = worst.max((fast - direct).amax());
    }
    if worst < 1e-8 {
        Ok(worst)
    } else {
        Err(format!("max error {worst:.3e} exceeds 1e-8"))
    }
}

fn check_loo() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 16;
    let data = two_class_data(&mut rng, n, 3);
    let spec = KernelSpec {
        depth: 1,
        activation: Activation::ReLU,
        sigma_w2: 1.5,
        sigma_b2: 0.1,
        jitter: 1e-3,
    };
    let k = kernel_matrix(&spec, &data.h).map_err(|e| e.to_string())?;
    let sigma2 = 1e-3;
    let post = posterior_inverse(&k, sigma2).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut reduced = DMatrix::zeros(n - 1, n - 1);
        let mut k_star = DMatrix::zeros(n - 1, 1);
        let mut targets = DMatrix::zeros(n - 1, data.targets.ncols());
        for (p, &a) in keep.iter().enumerate() {
            k_star[(p, 0)] = k[(a, i)];
            targets.set_row(p, &data.targets.row(a));
            for (q, &b) in keep.iter().enumerate() {
                reduced[(p, q)] = k[(a, b)] + if p == q { sigma2 } else { 0.0 };
            }
        }
        let inv = reduced.try_inverse().ok_or("reduced kernel not invertible")?;
        let brute_pred = (k_star.transpose() * &inv) * &targets;
        let fast_pred = loo_predict(&post, &data.targets, i);
        worst = worst.max((fast_pred - brute_pred.row(0)).amax());
        let brute_var = k[(i, i)] - (k_star.transpose() * &inv * &k_star)[(0, 0)];
        worst = worst.max((loo_variance(&post, i) - brute_var.max(0.0)).abs());
    }
    if worst < 1e-8 {
        Ok(worst)
    } else {
        Err(format!("max error {worst:.3e} exceeds 1e-8"))
    }
}

fn check_dgl_routes() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let data = two_class_data(&mut rng, 24, 4);
    let spec = KernelSpec {
        depth: 1,
        activation: Activation::ReLU,
        sigma_w2: 2.0,
        sigma_b2: 0.1,
        jitter: 1e-8,
    };
    let loo_route = dgl(&spec, &data, false).map_err(|e| e.to_string())?;
    let k = kernel_matrix(&spec, &data.h).map_err(|e| e.to_string())?;
    let post = posterior_with_escalation(&k, spec.jitter).map_err(|e| e.to_string())?;
    let contraction = dgl_from_similarity(&dgl_similarity(&post), &data.targets);
    let err = (loo_route.loss - contraction).abs();
    if err < 1e-10 {
        Ok(err)
    } else {
        Err(format!("routes differ by {err:.3e}"))
    }
}

fn check_linear_forms() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let data = two_class_data(&mut rng, 32, 4);
    let direct = linear_dgl(&data, Some(0.0)).map_err(|e| e.to_string())?;
    let ctx = LinearDglContext::new(&data.h).map_err(|e| e.to_string())?;
    let pairwise = ctx.pairwise_form_loss(&data.targets);
    let err = (direct - pairwise).abs();
    if err < 1e-8 {
        Ok(err)
    } else {
        Err(format!("forms differ by {err:.3e}"))
    }
}

fn check_dgl_grad_fd() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let data = two_class_data(&mut rng, 8, 3);
    let spec = KernelSpec {
        depth: 1,
        activation: Activation::Erf,
        sigma_w2: 1.2,
        sigma_b2: 0.05,
        jitter: 1e-3,
    };
    let grad = dgl_grad(&spec, &data).map_err(|e| e.to_string())?;
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for r in 0..data.h.nrows() {
        for c in 0..data.h.ncols() {
            let mut plus = data.clone();
            plus.h[(r, c)] += eps;
            let mut minus = data.clone();
            minus.h[(r, c)] -= eps;
            let fd = (dgl(&spec, &plus, false).map_err(|e| e.to_string())?.loss
                - dgl(&spec, &minus, false).map_err(|e| e.to_string())?.loss)
                / (2.0 * eps);
            let scale = fd.abs().max(grad[(r, c)].abs()).max(1e-6);
            worst = worst.max((fd - grad[(r, c)]).abs() / scale);
        }
    }
    if worst < 1e-5 {
        Ok(worst)
    } else {
        Err(format!("max relative error {worst:.3e} exceeds 1e-5"))
    }
}

fn check_projector() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let h = randn(&mut rng, 12, 3);
    let p = kernel_projector(&h).map_err(|e| e.to_string())?;
    let mut worst = (&p * &p - &p).amax();
    worst = worst.max((&p * &h).amax());
    worst = worst.max((p.trace() - 9.0).abs());
    if worst < 1e-8 {
        Ok(worst)
    } else {
        Err(format!("max identity violation {worst:.3e}"))
    }
}

fn check_kernel_psd() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let h = randn(&mut rng, 12, 5);
    let spec = KernelSpec {
        depth: 2,
        activation: Activation::ReLU,
        sigma_w2: 2.0,
        sigma_b2: 0.1,
        jitter: 0.0,
    };
    let k = kernel_matrix(&spec, &h).map_err(|e| e.to_string())?;
    let asym = (&k - k.transpose()).amax();
    let min_eig = k
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let floor = -1e-10 * k.trace();
    if asym < 1e-12 && min_eig >= floor {
        Ok(asym.max((-min_eig).max(0.0)))
    } else {
        Err(format!("asymmetry {asym:.3e}, min eigenvalue {min_eig:.3e}"))
    }
}

fn check_ib_endpoints() -> Result<f64, String> {
    let spec = MixtureEntropySpec::new(3, 0.3);
    let g1d = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.3f64 * 0.3).ln();
    let coincident = mixture_entropy(&spec, 0.0).map_err(|e| e.to_string())?;
    let far = mixture_entropy(&spec, 100.0 * 0.3).map_err(|e| e.to_string())?;
    let mut worst = (coincident - 3.0 * g1d).abs();
    worst = worst.max((far - coincident - LN_2).abs());
    worst = worst.max((delta_s(&spec, 0.0).map_err(|e| e.to_string())? + LN_2).abs());
    if worst < 1e-6 {
        Ok(worst)
    } else {
        Err(format!("endpoint error {worst:.3e} exceeds 1e-6"))
    }
}

fn check_mi_direct() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let data = two_class_data(&mut rng, 24, 3);
    let spec = MixtureEntropySpec::new(3, 0.4);
    let n = data.len();
    let dist = |i: usize, j: usize| (data.h.row(i) - data.h.row(j)).norm();
    let mut all = 0.0;
    let mut opposite = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let ds = delta_s(&spec, dist(i, j)).map_err(|e| e.to_string())?;
            all += ds;
            if data.labels[i] != data.labels[j] {
                opposite += ds;
            }
        }
    }
    let direct_input = (n as f64).ln() + all / n as f64;
    let direct_label = (n as f64).ln() + opposite / n as f64;
    let mi_in = mutual_info_input(&data, &spec).map_err(|e| e.to_string())?;
    let mi_lab = mutual_info_label(&data, &spec).map_err(|e| e.to_string())?;
    let worst = (mi_in.value - direct_input)
        .abs()
        .max((mi_lab.value - direct_label).abs());
    if worst < 1e-8 {
        Ok(worst)
    } else {
        Err(format!("formula error {worst:.3e} exceeds 1e-8"))
    }
}

/// Runs every cross-check, printing one line per check. Returns true when
/// all pass.
pub fn oracle_suite() -> bool {
    let checks: [(&str, fn() -> Result<f64, String>); 9] = [
        ("minor-inverse identity", check_minor_inverse),
        ("leave-one-out vs delete-and-invert", check_loo),
        ("DGL two-route consistency", check_dgl_routes),
        ("pre-classifier two-form consistency", check_linear_forms),
        ("DGL gradient vs finite differences", check_dgl_grad_fd),
        ("projector identities", check_projector),
        ("kernel symmetry and positivity", check_kernel_psd),
        ("mixture entropy endpoints", check_ib_endpoints),
        ("mutual information vs direct sums", check_mi_direct),
    ];
    let mut all_ok = true;
    for (name, check) in checks {
        match check() {
            Ok(err) => println!("[OK]   {name} (max error {err:.3e})"),
            Err(msg) => {
                all_ok = false;
                println!("[FAIL] {name}: {msg}");
            }
        }
    }
    all_ok
}

/// Writes pairwise-distance PDFs and mutual-information estimates for the
/// train split, at the raw input and (when a checkpoint is given) at every
/// layer of the saved stack. Produces `pdf_all_<tag>.csv`,
/// `pdf_opposite_<tag>.csv` for binary labels, and one `mi.csv`.
pub fn run_ib_report(
    config: &ExperimentConfig,
    prepared: &Prepared,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out)?;
    let train = &prepared.split.train;
    let k = config.ib.subset.min(train.len()).max(2);
    let rows: Vec<usize> = (0..k).collect();
    let sub = train.subset(&rows);
    let binary = prepared.classes == 2;

    let mut reps: Vec<(String, DMatrix<f64>)> = vec![("input".into(), sub.h.clone())];
    if let Some(path) = checkpoint {
        let stack = load_checkpoint(path)?;
        if stack.input_dim() != sub.h.ncols() {
            return Err(CliError::Config(format!(
                "checkpoint expects {} inputs, dataset has {}",
                stack.input_dim(),
                sub.h.ncols()
            )));
        }
        let pass = forward(&stack, &sub.h)?;
        for l in 0..stack.len() {
            reps.push((format!("layer{l}"), pass.activations[l + 1].clone()));
        }
    }

    let mut files = Vec::new();
    let mi_path = out.join("mi.csv");
    let mut mi_file = std::fs::File::create(&mi_path)?;
    writeln!(
        mi_file,
        "representation,sigma_eps,dim,mi_input,mi_label,close_triples,pairwise_valid"
    )?;
    for (tag, h) in &reps {
        let data = LabeledActivations::new(h.clone(), sub.targets.clone(), sub.labels.clone())
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let all = pdf(&data, Population::AllPairs, config.ib.bins)?;
        let path = out.join(format!("pdf_all_{tag}.csv"));
        std::fs::write(&path, all.to_csv())?;
        files.push(path);
        if binary {
            let opp = pdf(&data, Population::OppositeLabel, config.ib.bins)?;
            let path = out.join(format!("pdf_opposite_{tag}.csv"));
            std::fs::write(&path, opp.to_csv())?;
            files.push(path);
        }
        for &sigma in &config.ib.sigma_eps {
            let spec = MixtureEntropySpec::new(h.ncols(), sigma);
            let mi_in = mutual_info_input(&data, &spec)?;
            let mi_lab = if binary {
                Some(mutual_info_label(&data, &spec)?)
            } else {
                None
            };
            writeln!(
                mi_file,
                "{tag},{sigma},{},{:.12e},{},{},{}",
                h.ncols(),
                mi_in.value,
                mi_lab
                    .as_ref()
                    .map(|m| format!("{:.12e}", m.value))
                    .unwrap_or_default(),
                mi_in.close_triples,
                mi_in.pairwise_regime_valid(),
            )?;
        }
    }
    files.push(mi_path);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_is_green() {
        assert!(oracle_suite());
    }
}
