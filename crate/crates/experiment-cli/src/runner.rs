//! The experimental procedure itself. Steps map one-to-one onto functions:
//! `run_e2e` trains the full stack under MSE, `fit_kernel_params` selects
//! top-network covariance parameters per layer by grid search on validation
//! DGL, `run_monitor` retraces the end-to-end run while recording per-layer
//! DGL values, `run_lego` optimizes each layer once under its DGL and then
//! trains only the classifier, and `run_random_baseline` is LEGO with zero
//! DGL phases.
//!
//! Determinism contract: the weight trajectory is a function of the split
//! seed, the init seed, and the shuffle seed alone. Monitoring forwards
//! activations and factorizes kernels but draws nothing from the random
//! streams and writes nothing into the stack, so a monitored run and a plain
//! run agree bit for bit. DGL evaluations during monitoring and kernel
//! fitting use a fixed leading subset of rows, sized by the DGL minibatch
//! rule, so the series is comparable across epochs.
//!
//! Divergence (a non-finite loss or gradient) does not panic and does not
//! lose the record: the run stops, a `diverged` row is appended, and the
//! summary carries `status = "diverged"` for the driver to turn into exit
//! code 4.

use crate::config::{DatasetKind, ExperimentConfig, OptimizerChoice};
use crate::record::RunRecord;
use crate::{fnv1a64, CliError};
use data_io::{gaussian_blobs, load_cifar10, load_mnist, make_split, two_moons, RawDataset, Split};
use dgl_loss::dgl;
use gp_core::LabeledActivations;
use kernels::KernelSpec;
use nalgebra::DMatrix;
use nn::{
    backward_dgl, backward_mse, forward, Layer, LayerActivation, LayerStack, NnError,
    OptimizerState,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::time::Instant;

/// A loaded and encoded dataset plus the architecture it is fed into.
pub struct Prepared {
    pub split: Split,
    pub widths: Vec<usize>,
    pub activations: Vec<LayerActivation>,
    pub classes: usize,
}

/// The result of one training run: the metric record, the final stack, the
/// selected (best validation loss) stack, and its epoch.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub stack: LayerStack,
    pub best: LayerStack,
    pub best_epoch: usize,
    pub diverged: bool,
}

/// Loads the configured dataset, carves the split, and lays out the network
/// widths: input, `hidden_layers` repeats of `width`, then one linear output
/// per class.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, CliError> {
    let ds = &config.dataset;
    let (train_raw, test_raw): (RawDataset, RawDataset) = match ds.kind {
        DatasetKind::Mnist => load_mnist(ds.dir.as_deref().expect("validated"))?,
        DatasetKind::Cifar10 => load_cifar10(ds.dir.as_deref().expect("validated"))?,
        DatasetKind::Blobs => {
            let per = synthetic_pool_size(config);
            let seed = ds.split.seed;
            (
                gaussian_blobs(per, ds.blob_classes, ds.blob_dim, ds.noise, seed),
                gaussian_blobs(per, ds.blob_classes, ds.blob_dim, ds.noise, seed ^ 0x5eed),
            )
        }
        DatasetKind::Moons => {
            let per = synthetic_pool_size(config);
            let seed = ds.split.seed;
            (
                two_moons(per, ds.noise, seed),
                two_moons(per, ds.noise, seed ^ 0x5eed),
            )
        }
    };
    let mut split = make_split(&train_raw, &test_raw, &ds.split, ds.encoding)?;
    if ds.standardize {
        standardize_in_place(&mut split);
    }
    let classes = split.classes.len();
    let arch = &config.architecture;
    let mut widths = vec![split.train.h.ncols()];
    widths.extend(std::iter::repeat(arch.width).take(arch.hidden_layers));
    widths.push(classes);
    let mut activations = vec![arch.activation; arch.hidden_layers];
    activations.push(LayerActivation::Identity);
    Ok(Prepared {
        split,
        widths,
        activations,
        classes,
    })
}

fn synthetic_pool_size(config: &ExperimentConfig) -> usize {
    let ds = &config.dataset;
    if ds.pool_per_class > 0 {
        return ds.pool_per_class;
    }
    let classes = match ds.kind {
        DatasetKind::Moons => 2,
        _ => ds.split.classes.as_ref().map_or(ds.blob_classes, |c| c.len()),
    }
    .max(1);
    3 * ds.split.train_size.div_ceil(classes) + 32
}

fn standardize_in_place(split: &mut Split) {
    let n = split.train.len() as f64;
    let cols = split.train.h.ncols();
    for c in 0..cols {
        let col = split.train.h.column(c);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        for data in [&mut split.train, &mut split.val, &mut split.test] {
            for v in data.h.column_mut(c).iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
    }
}

fn rows_of(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// Rescales summed batch gradients to the per-sample convention the
/// configured learning rates are stated in.
fn per_sample(mut grads: nn::Gradients, batch: usize) -> nn::Gradients {
    let s = 1.0 / batch.max(1) as f64;
    for w in &mut grads.weights {
        *w *= s;
    }
    for b in &mut grads.bias {
        *b *= s;
    }
    grads
}

fn accuracy(out: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = out.row(r);
        let mut best = 0;
        for c in 1..row.ncols() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Mean squared error per sample and argmax accuracy of the stack on a set.
pub fn evaluate(stack: &LayerStack, data: &LabeledActivations) -> Result<(f64, f64), CliError> {
    let pass = forward(stack, &data.h)?;
    let out = pass.output();
    let mse = (out - &data.targets).norm_squared() / data.len() as f64;
    Ok((mse, accuracy(out, &data.labels)))
}

fn make_optimizer(choice: OptimizerChoice, lr: f64, wd: f64) -> OptimizerState {
    match choice {
        OptimizerChoice::Sgd => OptimizerState::sgd(lr, wd),
        OptimizerChoice::Adam => OptimizerState::adam(lr, wd),
    }
}

struct MonitorPlan {
    specs: Vec<KernelSpec>,
    interval: usize,
    rows: Vec<usize>,
}

/// Per-sample DGL of every hidden layer on the plan's row subset, appended
/// as layer-resolved rows. Reads the stack, never writes it.
fn push_dgl_rows(
    record: &mut RunRecord,
    stack: &LayerStack,
    train: &LabeledActivations,
    plan: &MonitorPlan,
    include_variance: bool,
    epoch: usize,
) -> Result<(), CliError> {
    let sub = train.subset(&plan.rows);
    let pass = forward(stack, &sub.h)?;
    for (l, spec) in plan.specs.iter().enumerate() {
        let data = LabeledActivations::new(
            pass.activations[l + 1].clone(),
            sub.targets.clone(),
            sub.labels.clone(),
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        let v = dgl(spec, &data, include_variance)?;
        let mut value = v.loss;
        if let Some(var) = v.variance_term {
            value += var;
            record.push(epoch, "train", "dgl_variance", var / data.len() as f64, Some(l));
        }
        record.push(epoch, "train", "dgl", value / data.len() as f64, Some(l));
    }
    Ok(())
}

fn push_eval(
    record: &mut RunRecord,
    stack: &LayerStack,
    prepared: &Prepared,
    epoch: usize,
    started: &Instant,
) -> Result<(f64, f64), CliError> {
    let (train_mse, train_acc) = evaluate(stack, &prepared.split.train)?;
    let (val_mse, val_acc) = evaluate(stack, &prepared.split.val)?;
    let (_, test_acc) = evaluate(stack, &prepared.split.test)?;
    record.push(epoch, "train", "mse", train_mse, None);
    record.push(epoch, "train", "accuracy", train_acc, None);
    record.push(epoch, "val", "mse", val_mse, None);
    record.push(epoch, "val", "accuracy", val_acc, None);
    record.push(epoch, "test", "accuracy", test_acc, None);
    record.push(epoch, "train", "wall_time", started.elapsed().as_secs_f64(), None);
    Ok((train_mse, val_mse))
}

fn base_summary(record: &mut RunRecord, config: &ExperimentConfig) -> Result<(), CliError> {
    record.set("config_hash", config.hash()?);
    record.set(
        "seeds",
        json!({
            "init": config.seeds.init,
            "shuffle": config.seeds.shuffle,
            "split": config.dataset.split.seed,
        }),
    );
    record.set("standardize", config.dataset.standardize);
    Ok(())
}

fn finish_summary(record: &mut RunRecord, best_epoch: usize, diverged: bool) {
    record.set("status", if diverged { "diverged" } else { "ok" });
    record.set("best_epoch", best_epoch);
    for (key, split, metric) in [
        ("test_accuracy", "test", "accuracy"),
        ("val_accuracy", "val", "accuracy"),
        ("train_accuracy", "train", "accuracy"),
        ("best_val_mse", "val", "mse"),
    ] {
        if let Some(v) = record.value_at(best_epoch, split, metric) {
            record.set(key, v);
        }
    }
    if let Some(v) = record.last_value("test", "accuracy", None) {
        record.set("final_test_accuracy", v);
    }
    let epochs_run = record.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
    record.set("epochs_run", epochs_run);
}

fn train_full_stack(
    config: &ExperimentConfig,
    prepared: &Prepared,
    lr: f64,
    wd: f64,
    monitor: Option<&MonitorPlan>,
    kind: &str,
) -> Result<TrainOutcome, CliError> {
    let mut record = RunRecord::new(kind);
    base_summary(&mut record, config)?;
    record.set("lr", lr);
    record.set("weight_decay", wd);

    let arch = &config.architecture;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seeds.init);
    let mut stack = LayerStack::random(
        &prepared.widths,
        &prepared.activations,
        arch.sigma_w2,
        arch.sigma_b2,
        &mut init_rng,
    )?;
    let mut opt = make_optimizer(config.e2e.optimizer, lr, wd);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seeds.shuffle);
    let train = &prepared.split.train;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let started = Instant::now();
    let (train_mse0, val_mse0) = push_eval(&mut record, &stack, prepared, 0, &started)?;
    if let Some(plan) = monitor {
        push_dgl_rows(&mut record, &stack, train, plan, config.dgl.include_variance, 0)?;
    }

    let mut best = stack.clone();
    let mut best_val = val_mse0;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut diverged = !train_mse0.is_finite() || !val_mse0.is_finite();
    let mut last_epoch = 0usize;
    let mut last_monitored = 0usize;

    'epochs: for epoch in 1..=config.e2e.epochs {
        if diverged {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.e2e.batch_size) {
            let x = rows_of(&train.h, chunk);
            let t = rows_of(&train.targets, chunk);
            let grads = per_sample(backward_mse(&stack, &x, &t)?, chunk.len());
            match opt.step(&mut stack, &grads) {
                Ok(()) => {}
                Err(NnError::NonFiniteGradient(_)) => {
                    record.push(epoch, "train", "diverged", 1.0, None);
                    diverged = true;
                    last_epoch = epoch;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (train_mse, val_mse) = push_eval(&mut record, &stack, prepared, epoch, &started)?;
        last_epoch = epoch;
        if let Some(plan) = monitor {
            if epoch % plan.interval == 0 {
                push_dgl_rows(&mut record, &stack, train, plan, config.dgl.include_variance, epoch)?;
                last_monitored = epoch;
            }
        }
        if !train_mse.is_finite() || !val_mse.is_finite() {
            record.push(epoch, "train", "diverged", 1.0, None);
            diverged = true;
            break;
        }
        if val_mse < best_val {
            best_val = val_mse;
            best = stack.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.e2e.patience {
                break;
            }
        }
    }

    if let Some(plan) = monitor {
        if !diverged && last_epoch > 0 && last_monitored != last_epoch {
            push_dgl_rows(
                &mut record,
                &stack,
                train,
                plan,
                config.dgl.include_variance,
                last_epoch,
            )?;
        }
        record.set("monitored", true);
        record.set("kernel_specs", serde_json::to_value(&plan.specs)?);
    }
    record.set("wall_time_total", started.elapsed().as_secs_f64());
    finish_summary(&mut record, best_epoch, diverged);
    Ok(TrainOutcome {
        record,
        stack,
        best,
        best_epoch,
        diverged,
    })
}

/// Step 1: end-to-end training of the full stack under MSE. When lr or
/// weight-decay grids are configured, every pair is trained and the run with
/// minimal validation loss is returned, with all trials listed in its
/// summary.
pub fn run_e2e(config: &ExperimentConfig, prepared: &Prepared) -> Result<TrainOutcome, CliError> {
    let mut combos = Vec::new();
    if config.e2e.lr_grid.is_empty() {
        combos.push((config.e2e.lr, config.e2e.weight_decay));
    } else {
        let wds = if config.e2e.wd_grid.is_empty() {
            vec![config.e2e.weight_decay]
        } else {
            config.e2e.wd_grid.clone()
        };
        for &lr in &config.e2e.lr_grid {
            for &wd in &wds {
                combos.push((lr, wd));
            }
        }
    }

    let mut chosen: Option<(TrainOutcome, f64, f64)> = None;
    let mut chosen_key = f64::INFINITY;
    let mut trials = Vec::new();
    for (lr, wd) in combos {
        let out = train_full_stack(config, prepared, lr, wd, None, "e2e")?;
        let key = if out.diverged {
            f64::INFINITY
        } else {
            out.record
                .summary
                .get("best_val_mse")
                .and_then(Value::as_f64)
                .unwrap_or(f64::INFINITY)
        };
        trials.push(json!({
            "lr": lr,
            "weight_decay": wd,
            "best_val_mse": out.record.summary.get("best_val_mse").cloned().unwrap_or(Value::Null),
            "status": out.record.summary.get("status").cloned().unwrap_or(Value::Null),
        }));
        if chosen.is_none() || key < chosen_key {
            chosen_key = key;
            chosen = Some((out, lr, wd));
        }
    }
    let (mut out, lr, wd) = chosen.expect("at least one combo");
    out.record.set("lr", json!(lr));
    out.record.set("weight_decay", json!(wd));
    if trials.len() > 1 {
        out.record.set("grid_trials", Value::Array(trials));
    }
    Ok(out)
}

/// One evaluated cell of the covariance grid. A non-finite value marks a
/// cell whose factorization failed.
#[derive(Clone, Copy, Debug)]
pub struct GridCell {
    pub layer: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub dgl: f64,
}

pub struct KernelFit {
    pub specs: Vec<KernelSpec>,
    pub cells: Vec<GridCell>,
    pub record: RunRecord,
}

/// Step 2: for each hidden layer, grid-search (sigma_w2, sigma_b2) of the
/// top-network covariance by minimizing per-sample validation DGL on the
/// trained stack's activations. The top network above hidden layer l of
/// `hidden` has `hidden - 1 - l` activated layers plus the implied readout.
pub fn fit_kernel_params(
    config: &ExperimentConfig,
    prepared: &Prepared,
    stack: &LayerStack,
) -> Result<KernelFit, CliError> {
    let mut record = RunRecord::new("fit-kernel");
    base_summary(&mut record, config)?;
    let val = &prepared.split.val;
    let limit = config.dgl.batch_limit(val.len());
    let rows: Vec<usize> = (0..limit).collect();
    let sub = val.subset(&rows);
    let pass = forward(stack, &sub.h)?;
    let hidden = config.architecture.hidden_layers;

    let mut specs = Vec::with_capacity(hidden);
    let mut cells = Vec::new();
    for l in 0..hidden {
        let data = LabeledActivations::new(
            pass.activations[l + 1].clone(),
            sub.targets.clone(),
            sub.labels.clone(),
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        let mut best: Option<(f64, KernelSpec)> = None;
        for &sw2 in &config.kernel_grid.sigma_w2 {
            for &sb2 in &config.kernel_grid.sigma_b2 {
                let spec = KernelSpec {
                    depth: hidden - 1 - l,
                    activation: config.architecture.activation.kernel_activation(),
                    sigma_w2: sw2,
                    sigma_b2: sb2,
                    jitter: config.dgl.jitter,
                };
                let value = match dgl(&spec, &data, config.dgl.include_variance) {
                    Ok(v) => {
                        (v.loss + v.variance_term.unwrap_or(0.0)) / data.len() as f64
                    }
                    Err(_) => f64::NAN,
                };
                cells.push(GridCell {
                    layer: l,
                    sigma_w2: sw2,
                    sigma_b2: sb2,
                    dgl: value,
                });
                if value.is_finite() && best.map_or(true, |(b, _)| value < b) {
                    best = Some((value, spec));
                }
            }
        }
        let (best_value, best_spec) = best.ok_or_else(|| {
            CliError::Numerical(format!("every kernel grid cell failed for layer {l}"))
        })?;
        record.push(0, "val", "dgl", best_value, Some(l));
        specs.push(best_spec);
    }
    record.set("kernel_specs", serde_json::to_value(&specs)?);
    record.set(
        "grid",
        Value::Array(
            cells
                .iter()
                .map(|c| {
                    json!({
                        "layer": c.layer,
                        "sigma_w2": c.sigma_w2,
                        "sigma_b2": c.sigma_b2,
                        "dgl": if c.dgl.is_finite() { Value::from(c.dgl) } else { Value::Null },
                    })
                })
                .collect(),
        ),
    );
    record.set("rows_used", limit);
    Ok(KernelFit {
        specs,
        cells,
        record,
    })
}

/// Step 3: the step-1 run retraced with read-only per-layer DGL monitoring
/// on a fixed train subset, at the configured cadence plus the initial and
/// final epochs.
///
/// Trains with the scalar `e2e.lr` and `e2e.weight_decay`. When step 1
/// selected them from a grid, pin the chosen values into the config before
/// calling, so the trajectory retraces the selected run.
pub fn run_monitor(
    config: &ExperimentConfig,
    prepared: &Prepared,
    specs: &[KernelSpec],
) -> Result<TrainOutcome, CliError> {
    if specs.len() != config.architecture.hidden_layers {
        return Err(CliError::Config(format!(
            "{} kernel specs for {} hidden layers",
            specs.len(),
            config.architecture.hidden_layers
        )));
    }
    let limit = config.dgl.batch_limit(prepared.split.train.len());
    let plan = MonitorPlan {
        specs: specs.to_vec(),
        interval: config.monitor.interval,
        rows: (0..limit).collect(),
    };
    train_full_stack(
        config,
        prepared,
        config.e2e.lr,
        config.e2e.weight_decay,
        Some(&plan),
        "monitor",
    )
}

fn layer_checksum(layer: &Layer) -> u64 {
    let mut bytes = Vec::with_capacity(8 * (layer.weights.len() + layer.bias.len()));
    for v in layer.weights.iter().chain(layer.bias.iter()) {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Steps 4 and 5: sequential per-layer DGL optimization with Adam, freezing
/// each layer at the end of its phase, followed by classifier-only MSE
/// training on the frozen features.
pub fn run_lego(
    config: &ExperimentConfig,
    prepared: &Prepared,
    specs: &[KernelSpec],
) -> Result<TrainOutcome, CliError> {
    if specs.len() != config.architecture.hidden_layers {
        return Err(CliError::Config(format!(
            "{} kernel specs for {} hidden layers",
            specs.len(),
            config.architecture.hidden_layers
        )));
    }
    lego_with_phases(config, prepared, Some(specs))
}

/// The frozen-random control: identical to LEGO with zero DGL phases, so
/// only the classifier ever trains.
pub fn run_random_baseline(
    config: &ExperimentConfig,
    prepared: &Prepared,
) -> Result<TrainOutcome, CliError> {
    lego_with_phases(config, prepared, None)
}

fn lego_with_phases(
    config: &ExperimentConfig,
    prepared: &Prepared,
    specs: Option<&[KernelSpec]>,
) -> Result<TrainOutcome, CliError> {
    let kind = if specs.is_some() { "lego" } else { "random-baseline" };
    let mut record = RunRecord::new(kind);
    base_summary(&mut record, config)?;

    let arch = &config.architecture;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seeds.init);
    let mut stack = LayerStack::random(
        &prepared.widths,
        &prepared.activations,
        arch.sigma_w2,
        arch.sigma_b2,
        &mut init_rng,
    )?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seeds.shuffle);
    let train = &prepared.split.train;
    let n = train.len();
    let hidden = config.architecture.hidden_layers;
    let started = Instant::now();
    let mut global_epoch = 0usize;
    let mut diverged = false;

    if let Some(specs) = specs {
        let limit = config.dgl.batch_limit(n);
        let eval_rows: Vec<usize> = (0..limit).collect();
        let mut order: Vec<usize> = (0..n).collect();
        'phases: for (l, spec) in specs.iter().enumerate() {
            let mut opt = OptimizerState::adam(config.lego.lr, config.lego.weight_decay);
            for _ in 0..config.lego.epochs_per_layer {
                global_epoch += 1;
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(limit) {
                    if chunk.len() < 2 {
                        continue;
                    }
                    let x = rows_of(&train.h, chunk);
                    let t = rows_of(&train.targets, chunk);
                    let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                    let grads = per_sample(backward_dgl(&stack, l, &x, &t, &labels, spec)?, chunk.len());
                    match opt.step(&mut stack, &grads) {
                        Ok(()) => {}
                        Err(NnError::NonFiniteGradient(_)) => {
                            record.push(global_epoch, "train", "diverged", 1.0, Some(l));
                            diverged = true;
                            break 'phases;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                let sub = train.subset(&eval_rows);
                let pass = forward(&stack, &sub.h)?;
                let data = LabeledActivations::new(
                    pass.activations[l + 1].clone(),
                    sub.targets.clone(),
                    sub.labels.clone(),
                )
                .map_err(|e| CliError::Numerical(e.to_string()))?;
                let v = dgl(spec, &data, config.dgl.include_variance)?;
                let value = (v.loss + v.variance_term.unwrap_or(0.0)) / data.len() as f64;
                record.push(global_epoch, "train", "dgl", value, Some(l));
                record.push(global_epoch, "train", "wall_time", started.elapsed().as_secs_f64(), None);
                if !value.is_finite() {
                    record.push(global_epoch, "train", "diverged", 1.0, Some(l));
                    diverged = true;
                    break 'phases;
                }
            }
            stack.set_frozen(l, true);
        }
        record.set("kernel_specs", serde_json::to_value(specs)?);
    }
    for l in 0..hidden {
        stack.set_frozen(l, true);
    }
    let checksums: Vec<u64> = stack.layers[..hidden].iter().map(layer_checksum).collect();
    record.set("dgl_epochs", global_epoch);

    let mut best_epoch = global_epoch;
    if !diverged {
        let (clf_best_epoch, clf_diverged) = train_classifier(
            config,
            prepared,
            &mut stack,
            &mut record,
            &mut shuffle_rng,
            global_epoch,
            &started,
        )?;
        best_epoch = clf_best_epoch;
        diverged = clf_diverged;
    }

    for (l, &sum) in checksums.iter().enumerate() {
        if layer_checksum(&stack.layers[l]) != sum {
            return Err(CliError::Numerical(format!(
                "freeze audit failed: layer {l} changed after its phase"
            )));
        }
    }
    record.set(
        "freeze_audit",
        Value::Array(
            checksums
                .iter()
                .map(|c| Value::String(format!("{c:016x}")))
                .collect(),
        ),
    );
    record.set("wall_time_total", started.elapsed().as_secs_f64());
    finish_summary(&mut record, best_epoch, diverged);
    let best = stack.clone();
    Ok(TrainOutcome {
        record,
        stack,
        best,
        best_epoch,
        diverged,
    })
}

/// Trains only the classifier layer on features precomputed through the
/// frozen hidden stack, then writes the best-validation classifier back.
/// Returns the global epoch of the selected classifier and the divergence
/// flag.
fn train_classifier(
    config: &ExperimentConfig,
    prepared: &Prepared,
    stack: &mut LayerStack,
    record: &mut RunRecord,
    shuffle_rng: &mut ChaCha8Rng,
    epoch_offset: usize,
    started: &Instant,
) -> Result<(usize, bool), CliError> {
    let hidden = stack.len() - 1;
    let features = |data: &LabeledActivations| -> Result<DMatrix<f64>, CliError> {
        Ok(forward(stack, &data.h)?.activations[hidden].clone())
    };
    let fx_train = features(&prepared.split.train)?;
    let fx_val = features(&prepared.split.val)?;
    let fx_test = features(&prepared.split.test)?;

    let mut clf = LayerStack::new(vec![stack.layers[hidden].clone()])?;
    clf.set_frozen(0, false);
    let mut opt = make_optimizer(
        config.lego.classifier_optimizer,
        config.lego.classifier_lr,
        config.lego.classifier_weight_decay,
    );
    let train = &prepared.split.train;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let eval = |clf: &LayerStack, fx: &DMatrix<f64>, data: &LabeledActivations| -> Result<(f64, f64), CliError> {
        let pass = forward(clf, fx)?;
        let out = pass.output();
        let mse = (out - &data.targets).norm_squared() / data.len() as f64;
        Ok((mse, accuracy(out, &data.labels)))
    };
    let push_all = |record: &mut RunRecord, clf: &LayerStack, epoch: usize| -> Result<(f64, f64), CliError> {
        let (train_mse, train_acc) = eval(clf, &fx_train, &prepared.split.train)?;
        let (val_mse, val_acc) = eval(clf, &fx_val, &prepared.split.val)?;
        let (_, test_acc) = eval(clf, &fx_test, &prepared.split.test)?;
        record.push(epoch, "train", "mse", train_mse, None);
        record.push(epoch, "train", "accuracy", train_acc, None);
        record.push(epoch, "val", "mse", val_mse, None);
        record.push(epoch, "val", "accuracy", val_acc, None);
        record.push(epoch, "test", "accuracy", test_acc, None);
        record.push(epoch, "train", "wall_time", started.elapsed().as_secs_f64(), None);
        Ok((train_mse, val_mse))
    };

    let (_, val_mse0) = push_all(record, &clf, epoch_offset)?;
    let mut best = clf.clone();
    let mut best_val = val_mse0;
    let mut best_epoch = epoch_offset;
    let mut stale = 0usize;
    let mut diverged = false;

    'epochs: for e in 1..=config.lego.classifier_epochs {
        let epoch = epoch_offset + e;
        order.shuffle(shuffle_rng);
        for chunk in order.chunks(config.lego.classifier_batch_size) {
            let x = rows_of(&fx_train, chunk);
            let t = rows_of(&train.targets, chunk);
            let grads = per_sample(backward_mse(&clf, &x, &t)?, chunk.len());
            match opt.step(&mut clf, &grads) {
                Ok(()) => {}
                Err(NnError::NonFiniteGradient(_)) => {
                    record.push(epoch, "train", "diverged", 1.0, None);
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (train_mse, val_mse) = push_all(record, &clf, epoch)?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            record.push(epoch, "train", "diverged", 1.0, None);
            diverged = true;
            break;
        }
        if val_mse < best_val {
            best_val = val_mse;
            best = clf.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.lego.patience {
                break;
            }
        }
    }

    stack.layers[hidden] = best.layers[0].clone();
    stack.set_frozen(hidden, false);
    Ok((best_epoch, diverged))
}
