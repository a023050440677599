//! Small fully-connected networks with exact backpropagation, per-layer
//! freezing, and three optimizers: SGD, Adam, and overdamped Langevin
//! gradient descent.
//!
//! A `LayerStack` is an ordered list of affine layers `z = h W^T + b`
//! followed elementwise by ReLU, erf, or the identity. Initialization draws
//! `w ~ N(0, sigma_w2 / fan_in)` and `b ~ N(0, sigma_b2)`, matching the
//! Gaussian prior under which the analytic kernels describe the network at
//! birth, so kernel-based monitoring is meaningful from step 0.
//!
//! `backward_mse` differentiates the unaveraged square loss
//! `sum_n |z(x_n) - l_n|^2`. `backward_dgl` trains one layer in isolation:
//! it forwards the batch up to the trainee layer, evaluates the layer-wise
//! loss gradient with respect to the trainee's output activations, and chains
//! it through the trainee's activation and affine map alone. Layers above the
//! trainee are represented by the `KernelSpec` handed to the loss, not by
//! weights.
//!
//! LangevinGD is the Euler discretization of
//!
//!   dw = -(g + 2 w / sigma_w2) dt + sqrt(2 T) dxi
//!
//! applied with step `lr` to every unfrozen parameter, bias included: the
//! weight-decay force realizes the prior sum w^2 / sigma_w2 of the Boltzmann
//! measure P[W] ~ exp(-(L + sum w^2 / sigma_w2) / T), and the noise term is
//! `sqrt(2 lr T) xi` with unit normal `xi`. At T = 0 it reduces to SGD with
//! L2 coefficient 2 / sigma_w2. ReLU backpropagation uses subgradient 0 at
//! exactly 0.
//!
//! Checkpoints serialize the full stack to a little-endian binary layout
//! documented at `save_checkpoint`, and round-trip bit-identically.

use dgl_loss::dgl_grad;
use gp_core::LabeledActivations;
use kernels::KernelSpec;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("layer {0} expects input width {1}, got {2}")]
    WidthMismatch(usize, usize, usize),
    #[error("stack has no layers")]
    EmptyStack,
    #[error("gradient shapes do not conform to the stack at layer {0}")]
    GradientShape(usize),
    #[error("non-finite gradient entry in layer {0}")]
    NonFiniteGradient(usize),
    #[error("trainee index {0} out of range for {1} layers")]
    BadTrainee(usize, usize),
    #[error("invalid batch: {0}")]
    BadBatch(String),
    #[error("dgl loss failed: {0}")]
    Dgl(#[from] dgl_loss::DglError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Elementwise nonlinearity of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerActivation {
    ReLU,
    Erf,
    Identity,
}

impl LayerActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            LayerActivation::ReLU => z.max(0.0),
            LayerActivation::Erf => libm::erf(z),
            LayerActivation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            LayerActivation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LayerActivation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp(),
            LayerActivation::Identity => 1.0,
        }
    }

    /// The covariance family describing a top-network built from this
    /// nonlinearity.
    pub fn kernel_activation(self) -> kernels::Activation {
        match self {
            LayerActivation::ReLU => kernels::Activation::ReLU,
            LayerActivation::Erf => kernels::Activation::Erf,
            LayerActivation::Identity => kernels::Activation::Linear,
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: LayerActivation,
    pub frozen: bool,
}

impl Layer {
    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }
}

/// An ordered stack of layers with conforming widths.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::EmptyStack);
        }
        for i in 1..layers.len() {
            if layers[i].d_in() != layers[i - 1].d_out() {
                return Err(NnError::WidthMismatch(
                    i,
                    layers[i - 1].d_out(),
                    layers[i].d_in(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Draws a stack with `widths[0]` inputs and one layer per activation,
    /// `w ~ N(0, sigma_w2 / fan_in)` and `b ~ N(0, sigma_b2)`.
    pub fn random(
        widths: &[usize],
        activations: &[LayerActivation],
        sigma_w2: f64,
        sigma_b2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if widths.len() != activations.len() + 1 || activations.is_empty() {
            return Err(NnError::EmptyStack);
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (l, &act) in activations.iter().enumerate() {
            let d_in = widths[l];
            let d_out = widths[l + 1];
            let w_std = (sigma_w2 / d_in as f64).sqrt();
            let b_std = sigma_b2.sqrt();
            let weights = DMatrix::from_fn(d_out, d_in, |_, _| {
                w_std * rng.sample::<f64, _>(StandardNormal)
            });
            let bias =
                DVector::from_fn(d_out, |_, _| b_std * rng.sample::<f64, _>(StandardNormal));
            layers.push(Layer {
                weights,
                bias,
                activation: act,
                frozen: false,
            });
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.layers[layer].frozen = frozen;
    }
}

/// Every intermediate of one forward evaluation. `activations[0]` is the
/// input batch; `activations[l + 1]` and `pre_activations[l]` belong to
/// layer `l`.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub activations: Vec<DMatrix<f64>>,
    pub pre_activations: Vec<DMatrix<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.activations[self.activations.len() - 1]
    }
}

/// Runs the batch `x` (one row per sample) through the stack, keeping all
/// intermediates.
pub fn forward(stack: &LayerStack, x: &DMatrix<f64>) -> Result<ForwardPass, NnError> {
    if x.ncols() != stack.input_dim() {
        return Err(NnError::WidthMismatch(0, stack.input_dim(), x.ncols()));
    }
    let mut activations = Vec::with_capacity(stack.len() + 1);
    let mut pre_activations = Vec::with_capacity(stack.len());
    activations.push(x.clone());
    for layer in &stack.layers {
        let h = &activations[activations.len() - 1];
        let mut z = h * layer.weights.transpose();
        let bias_row = layer.bias.transpose();
        for mut row in z.row_iter_mut() {
            row += &bias_row;
        }
        let a = z.map(|v| layer.activation.apply(v));
        pre_activations.push(z);
        activations.push(a);
    }
    Ok(ForwardPass {
        activations,
        pre_activations,
    })
}

/// Per-layer parameter gradients, shaped like the stack.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(stack: &LayerStack) -> Self {
        Self {
            weights: stack
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.d_out(), l.d_in()))
                .collect(),
            bias: stack
                .layers
                .iter()
                .map(|l| DVector::zeros(l.d_out()))
                .collect(),
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |c, _| m.column(c).sum())
}

/// Exact gradients of the unaveraged square loss `sum_n |z(x_n) - l_n|^2`
/// for every layer.
pub fn backward_mse(
    stack: &LayerStack,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<Gradients, NnError> {
    let pass = forward(stack, x)?;
    if targets.shape() != pass.output().shape() {
        return Err(NnError::WidthMismatch(
            stack.len() - 1,
            stack.output_dim(),
            targets.ncols(),
        ));
    }
    let mut grads = Gradients::zeros_like(stack);
    let mut delta = 2.0 * (pass.output() - targets);
    for l in (0..stack.len()).rev() {
        let z = &pass.pre_activations[l];
        let phi_prime = z.map(|v| stack.layers[l].activation.derivative(v));
        delta.component_mul_assign(&phi_prime);
        grads.weights[l] = delta.transpose() * &pass.activations[l];
        grads.bias[l] = column_sums(&delta);
        if l > 0 {
            delta = &delta * &stack.layers[l].weights;
        }
    }
    Ok(grads)
}

/// Gradient of the layer-wise DGL objective for one trainee layer.
///
/// The batch is forwarded through layers `0..=trainee`, the loss gradient is
/// taken with respect to the trainee's output activations under the given
/// top-network covariance, and chained through the trainee's activation and
/// affine map. All other layers receive zero gradient; layers below the
/// trainee act as a fixed input transform.
pub fn backward_dgl(
    stack: &LayerStack,
    trainee: usize,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    labels: &[usize],
    spec: &KernelSpec,
) -> Result<Gradients, NnError> {
    if trainee >= stack.len() {
        return Err(NnError::BadTrainee(trainee, stack.len()));
    }
    let pass = forward(stack, x)?;
    let h = pass.activations[trainee + 1].clone();
    let data = LabeledActivations::new(h, targets.clone(), labels.to_vec())
        .map_err(|e| NnError::BadBatch(e.to_string()))?;
    let g_h = dgl_grad(spec, &data)?;
    let z = &pass.pre_activations[trainee];
    let phi_prime = z.map(|v| stack.layers[trainee].activation.derivative(v));
    let delta = g_h.component_mul(&phi_prime);
    let mut grads = Gradients::zeros_like(stack);
    grads.weights[trainee] = delta.transpose() * &pass.activations[trainee];
    grads.bias[trainee] = column_sums(&delta);
    Ok(grads)
}

/// Which update rule an `OptimizerState` applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    LangevinGd,
}

struct AdamMoments {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
}

/// Optimizer configuration plus whatever state the rule accumulates: Adam
/// moments, the Langevin RNG, and the step counter.
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub sigma_w2: f64,
    moments: Option<AdamMoments>,
    t: u64,
    rng: ChaCha8Rng,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
            temperature: 0.0,
            sigma_w2: 1.0,
            moments: None,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay,
            temperature: 0.0,
            sigma_w2: 1.0,
            moments: None,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn langevin(lr: f64, temperature: f64, sigma_w2: f64, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::LangevinGd,
            lr,
            weight_decay: 0.0,
            temperature,
            sigma_w2,
            moments: None,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn ensure_moments(&mut self, stack: &LayerStack) {
        if self.moments.is_none() {
            self.moments = Some(AdamMoments {
                m_w: stack
                    .layers
                    .iter()
                    .map(|l| DMatrix::zeros(l.d_out(), l.d_in()))
                    .collect(),
                v_w: stack
                    .layers
                    .iter()
                    .map(|l| DMatrix::zeros(l.d_out(), l.d_in()))
                    .collect(),
                m_b: stack.layers.iter().map(|l| DVector::zeros(l.d_out())).collect(),
                v_b: stack.layers.iter().map(|l| DVector::zeros(l.d_out())).collect(),
            });
        }
    }

    /// Applies one update. Frozen layers are left untouched down to the bit
    /// level; a non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, stack: &mut LayerStack, grads: &Gradients) -> Result<(), NnError> {
        if grads.weights.len() != stack.len() || grads.bias.len() != stack.len() {
            return Err(NnError::GradientShape(0));
        }
        for (l, layer) in stack.layers.iter().enumerate() {
            if grads.weights[l].shape() != layer.weights.shape()
                || grads.bias[l].len() != layer.bias.len()
            {
                return Err(NnError::GradientShape(l));
            }
            if !layer.frozen
                && (grads.weights[l].iter().any(|v| !v.is_finite())
                    || grads.bias[l].iter().any(|v| !v.is_finite()))
            {
                return Err(NnError::NonFiniteGradient(l));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, layer) in stack.layers.iter_mut().enumerate() {
                    if layer.frozen {
                        continue;
                    }
                    let lr = self.lr;
                    let wd = self.weight_decay;
                    layer
                        .weights
                        .zip_apply(&grads.weights[l], |w, g| *w -= lr * (g + wd * *w));
                    layer
                        .bias
                        .zip_apply(&grads.bias[l], |b, g| *b -= lr * (g + wd * *b));
                }
            }
            OptimizerKind::Adam => {
                self.ensure_moments(stack);
                self.t += 1;
                let mom = self.moments.as_mut().expect("moments initialized");
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (l, layer) in stack.layers.iter_mut().enumerate() {
                    if layer.frozen {
                        continue;
                    }
                    let lr = self.lr;
                    let wd = self.weight_decay;
                    adam_update(
                        &mut layer.weights,
                        &grads.weights[l],
                        &mut mom.m_w[l],
                        &mut mom.v_w[l],
                        lr,
                        wd,
                        bc1,
                        bc2,
                    );
                    adam_update_vec(
                        &mut layer.bias,
                        &grads.bias[l],
                        &mut mom.m_b[l],
                        &mut mom.v_b[l],
                        lr,
                        wd,
                        bc1,
                        bc2,
                    );
                }
            }
            OptimizerKind::LangevinGd => {
                let lr = self.lr;
                let wd = 2.0 / self.sigma_w2;
                let noise = (2.0 * lr * self.temperature).sqrt();
                for (l, layer) in stack.layers.iter_mut().enumerate() {
                    if layer.frozen {
                        continue;
                    }
                    for (w, g) in layer.weights.iter_mut().zip(grads.weights[l].iter()) {
                        let xi: f64 = self.rng.sample(StandardNormal);
                        *w = *w - lr * (g + wd * *w) + noise * xi;
                    }
                    for (b, g) in layer.bias.iter_mut().zip(grads.bias[l].iter()) {
                        let xi: f64 = self.rng.sample(StandardNormal);
                        *b = *b - lr * (g + wd * *b) + noise * xi;
                    }
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    w: &mut DMatrix<f64>,
    g: &DMatrix<f64>,
    m: &mut DMatrix<f64>,
    v: &mut DMatrix<f64>,
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..w.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * w[i]);
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update_vec(
    w: &mut DVector<f64>,
    g: &DVector<f64>,
    m: &mut DVector<f64>,
    v: &mut DVector<f64>,
    lr: f64,
    wd: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..w.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * w[i]);
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DGLCKPT1";

fn activation_tag(a: LayerActivation) -> u8 {
    match a {
        LayerActivation::ReLU => 0,
        LayerActivation::Erf => 1,
        LayerActivation::Identity => 2,
    }
}

fn tag_activation(t: u8) -> Result<LayerActivation, NnError> {
    match t {
        0 => Ok(LayerActivation::ReLU),
        1 => Ok(LayerActivation::Erf),
        2 => Ok(LayerActivation::Identity),
        other => Err(NnError::Corrupt(format!("unknown activation tag {other}"))),
    }
}

/// Writes the stack to a little-endian binary checkpoint.
///
/// Layout: magic `DGLCKPT1`; u32 layer count; then per layer a u8 activation
/// tag (0 relu, 1 erf, 2 identity), u8 frozen flag, u32 d_out, u32 d_in,
/// d_out * d_in row-major f64 weights, d_out f64 bias entries.
pub fn save_checkpoint(stack: &LayerStack, path: &Path) -> Result<(), NnError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(stack.len() as u32).to_le_bytes());
    for layer in &stack.layers {
        buf.push(activation_tag(layer.activation));
        buf.push(layer.frozen as u8);
        buf.extend_from_slice(&(layer.d_out() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.d_in() as u32).to_le_bytes());
        for r in 0..layer.d_out() {
            for c in 0..layer.d_in() {
                buf.extend_from_slice(&layer.weights[(r, c)].to_le_bytes());
            }
        }
        for r in 0..layer.d_out() {
            buf.extend_from_slice(&layer.bias[r].to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.at + n > self.bytes.len() {
            return Err(NnError::Corrupt("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(path: &Path) -> Result<LayerStack, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let activation = tag_activation(cur.u8()?)?;
        let frozen = cur.u8()? != 0;
        let d_out = cur.u32()? as usize;
        let d_in = cur.u32()? as usize;
        let mut weights = DMatrix::zeros(d_out, d_in);
        for r in 0..d_out {
            for c in 0..d_in {
                weights[(r, c)] = cur.f64()?;
            }
        }
        let mut bias = DVector::zeros(d_out);
        for r in 0..d_out {
            bias[r] = cur.f64()?;
        }
        layers.push(Layer {
            weights,
            bias,
            activation,
            frozen,
        });
    }
    if cur.at != bytes.len() {
        return Err(NnError::Corrupt("trailing bytes".into()));
    }
    LayerStack::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        DMatrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn identity_net_passes_input_through() {
        let layer = Layer {
            weights: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
            activation: LayerActivation::Identity,
            frozen: false,
        };
        let stack = LayerStack::new(vec![layer]).unwrap();
        let x = random_batch(5, 3, 1);
        let pass = forward(&stack, &x).unwrap();
        assert_eq!(pass.output(), &x);
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let layer = Layer {
            weights: DMatrix::identity(2, 2),
            bias: DVector::zeros(2),
            activation: LayerActivation::ReLU,
            frozen: false,
        };
        let stack = LayerStack::new(vec![layer]).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[-3.0, -0.5]);
        let pass = forward(&stack, &x).unwrap();
        assert_eq!(pass.output(), &DMatrix::from_row_slice(1, 2, &[0.0, 0.0]));
    }

    #[test]
    fn forward_matches_manual_recomputation() {
        let mut r = rng(7);
        let stack = LayerStack::random(
            &[4, 3, 2],
            &[LayerActivation::Erf, LayerActivation::Identity],
            1.7,
            0.2,
            &mut r,
        )
        .unwrap();
        let x = random_batch(6, 4, 8);
        let pass = forward(&stack, &x).unwrap();
        for n in 0..6 {
            let mut h: Vec<f64> = (0..4).map(|j| x[(n, j)]).collect();
            for layer in &stack.layers {
                let mut next = vec![0.0; layer.d_out()];
                for (i, slot) in next.iter_mut().enumerate() {
                    let mut z = layer.bias[i];
                    for (j, hv) in h.iter().enumerate() {
                        z += layer.weights[(i, j)] * hv;
                    }
                    *slot = layer.activation.apply(z);
                }
                h = next;
            }
            for (j, hv) in h.iter().enumerate() {
                assert!((pass.output()[(n, j)] - hv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_gradient_vanishes_at_exact_fit() {
        let mut r = rng(3);
        let stack = LayerStack::random(
            &[3, 2],
            &[LayerActivation::Identity],
            1.0,
            0.1,
            &mut r,
        )
        .unwrap();
        let x = random_batch(5, 3, 4);
        let targets = forward(&stack, &x).unwrap().output().clone();
        let grads = backward_mse(&stack, &x, &targets).unwrap();
        assert!(grads.weights[0].amax() < 1e-12);
        assert!(grads.bias[0].amax() < 1e-12);
    }

    #[test]
    fn linear_net_gradient_matches_least_squares_form() {
        let mut r = rng(5);
        let stack = LayerStack::random(&[3, 2], &[LayerActivation::Identity], 1.0, 0.0, &mut r)
            .unwrap();
        let x = random_batch(7, 3, 6);
        let targets = random_batch(7, 2, 9);
        let grads = backward_mse(&stack, &x, &targets).unwrap();
        let z = &x * stack.layers[0].weights.transpose();
        let closed = 2.0 * (z - &targets).transpose() * &x;
        assert!((&grads.weights[0] - closed).amax() < 1e-10);
    }

    #[test]
    fn frozen_layers_are_bit_identical_after_steps() {
        let mut r = rng(11);
        let mut stack = LayerStack::random(
            &[3, 4, 2],
            &[LayerActivation::ReLU, LayerActivation::Identity],
            2.0,
            0.1,
            &mut r,
        )
        .unwrap();
        stack.set_frozen(0, true);
        let before: Vec<u64> = stack.layers[0]
            .weights
            .iter()
            .chain(stack.layers[0].bias.iter())
            .map(|v| v.to_bits())
            .collect();
        let x = random_batch(6, 3, 12);
        let targets = random_batch(6, 2, 13);
        for opt in [
            &mut OptimizerState::sgd(0.05, 0.01),
            &mut OptimizerState::adam(0.05, 0.01),
            &mut OptimizerState::langevin(0.05, 0.3, 1.0, 99),
        ] {
            for _ in 0..5 {
                let grads = backward_mse(&stack, &x, &targets).unwrap();
                opt.step(&mut stack, &grads).unwrap();
            }
        }
        let after: Vec<u64> = stack.layers[0]
            .weights
            .iter()
            .chain(stack.layers[0].bias.iter())
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
        let fresh = LayerStack::random(
            &[3, 4, 2],
            &[LayerActivation::ReLU, LayerActivation::Identity],
            2.0,
            0.1,
            &mut rng(11),
        )
        .unwrap();
        assert!((&stack.layers[1].weights - &fresh.layers[1].weights).amax() > 0.0);
    }

    #[test]
    fn zero_temperature_langevin_is_sgd_with_l2() {
        let mut r = rng(21);
        let sigma_w2 = 0.8;
        let stack0 = LayerStack::random(&[3, 2], &[LayerActivation::Identity], 1.0, 0.1, &mut r)
            .unwrap();
        let x = random_batch(5, 3, 22);
        let targets = random_batch(5, 2, 23);

        let mut a = stack0.clone();
        let mut langevin = OptimizerState::langevin(0.03, 0.0, sigma_w2, 7);
        let mut b = stack0.clone();
        let mut sgd = OptimizerState::sgd(0.03, 2.0 / sigma_w2);
        for _ in 0..4 {
            let ga = backward_mse(&a, &x, &targets).unwrap();
            langevin.step(&mut a, &ga).unwrap();
            let gb = backward_mse(&b, &x, &targets).unwrap();
            sgd.step(&mut b, &gb).unwrap();
        }
        assert_eq!(a.layers[0].weights, b.layers[0].weights);
        assert_eq!(a.layers[0].bias, b.layers[0].bias);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut r = rng(31);
        let stack0 = LayerStack::random(&[2, 2], &[LayerActivation::Erf], 1.0, 0.3, &mut r)
            .unwrap();
        let x = random_batch(4, 2, 32);
        let targets = random_batch(4, 2, 33);
        for opt in [
            &mut OptimizerState::sgd(0.0, 0.5),
            &mut OptimizerState::adam(0.0, 0.5),
            &mut OptimizerState::langevin(0.0, 2.0, 1.0, 5),
        ] {
            let mut stack = stack0.clone();
            let grads = backward_mse(&stack, &x, &targets).unwrap();
            opt.step(&mut stack, &grads).unwrap();
            let same = stack.layers[0]
                .weights
                .iter()
                .zip(stack0.layers[0].weights.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn fixed_seed_reproduces_langevin_trajectory() {
        let mut r = rng(41);
        let stack0 = LayerStack::random(&[2, 1], &[LayerActivation::Identity], 1.0, 0.0, &mut r)
            .unwrap();
        let x = random_batch(6, 2, 42);
        let targets = random_batch(6, 1, 43);
        let run = |seed: u64| {
            let mut stack = stack0.clone();
            let mut opt = OptimizerState::langevin(0.01, 0.5, 1.0, seed);
            for _ in 0..50 {
                let grads = backward_mse(&stack, &x, &targets).unwrap();
                opt.step(&mut stack, &grads).unwrap();
            }
            stack.layers[0].weights.clone()
        };
        assert_eq!(run(123), run(123));
        assert_ne!(run(123), run(124));
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut r = rng(51);
        let mut stack = LayerStack::random(&[2, 1], &[LayerActivation::Identity], 1.0, 0.0, &mut r)
            .unwrap();
        let mut grads = Gradients::zeros_like(&stack);
        grads.weights[0][(0, 0)] = f64::NAN;
        let mut opt = OptimizerState::sgd(0.1, 0.0);
        assert!(matches!(
            opt.step(&mut stack, &grads),
            Err(NnError::NonFiniteGradient(0))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let mut r = rng(61);
        let mut stack = LayerStack::random(
            &[5, 4, 3],
            &[LayerActivation::ReLU, LayerActivation::Erf],
            1.3,
            0.2,
            &mut r,
        )
        .unwrap();
        stack.set_frozen(1, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.ckpt");
        save_checkpoint(&stack, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(stack.len(), loaded.len());
        for (a, b) in stack.layers.iter().zip(loaded.layers.iter()) {
            assert_eq!(a.activation, b.activation);
            assert_eq!(a.frozen, b.frozen);
            let same_w = a
                .weights
                .iter()
                .zip(b.weights.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            let same_b = a
                .bias
                .iter()
                .zip(b.bias.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same_w && same_b);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::Corrupt(_))
        ));
    }

    #[test]
    fn initialization_matches_declared_variances() {
        let mut r = rng(71);
        let stack =
            LayerStack::random(&[400, 300], &[LayerActivation::ReLU], 2.0, 0.5, &mut r).unwrap();
        let w = &stack.layers[0].weights;
        let var_w = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var_w - 2.0 / 400.0).abs() < 0.1 * (2.0 / 400.0));
        let b = &stack.layers[0].bias;
        let var_b = b.iter().map(|v| v * v).sum::<f64>() / b.len() as f64;
        assert!((var_b - 0.5).abs() < 0.15);
    }
}
