//! Self-contained trainer for the lightweight residual enhancer:
//! conv(1→C, 3×3, same) → batch norm → ReLU → conv(C→1, 3×3, same).
//!
//! With the default 9 channels the model carries 190 learnable parameters
//! and 208 floats of serialized state. All arithmetic runs in f64; weights
//! are stored and attached to archives as f32. The output convolution is
//! zero-initialized, so a fresh model predicts exactly zero residual and
//! enhancement starts as the identity map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grouping::MaskedPair;
use crate::volume::Grid2;
use crate::wire::{ByteReader, ByteWriter};

pub const DEFAULT_CHANNELS: usize = 9;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
const KERNEL: usize = 3;

/// Serializable enhancer state. Learnable parameters plus batch-norm
/// running statistics, all f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    channels: usize,
    pub conv1_w: Vec<f32>,
    pub conv1_b: Vec<f32>,
    pub bn_gamma: Vec<f32>,
    pub bn_beta: Vec<f32>,
    pub bn_running_mean: Vec<f32>,
    pub bn_running_var: Vec<f32>,
    pub conv2_w: Vec<f32>,
    pub conv2_b: f32,
}

impl ModelWeights {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Learnable parameter count: 21·C + 1 (190 at the default width).
    pub fn param_count(&self) -> usize {
        21 * self.channels + 1
    }

    /// Serialized float count: learnables plus running stats, 23·C + 1.
    pub fn state_count(&self) -> usize {
        23 * self.channels + 1
    }

    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        fn eq(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.channels == other.channels
            && eq(&self.conv1_w, &other.conv1_w)
            && eq(&self.conv1_b, &other.conv1_b)
            && eq(&self.bn_gamma, &other.bn_gamma)
            && eq(&self.bn_beta, &other.bn_beta)
            && eq(&self.bn_running_mean, &other.bn_running_mean)
            && eq(&self.bn_running_var, &other.bn_running_var)
            && eq(&self.conv2_w, &other.conv2_w)
            && self.conv2_b.to_bits() == other.conv2_b.to_bits()
    }
}

/// Fresh default-width model for `seed`; see [`init_model_with`].
pub fn init_model(seed: u64) -> ModelWeights {
    init_model_with(seed, DEFAULT_CHANNELS)
}

/// Fresh model: conv1 from a fan-in-scaled normal (std √(2/9)), batch norm
/// at identity, conv2 all zero so the initial prediction is exactly zero.
pub fn init_model_with(seed: u64, channels: usize) -> ModelWeights {
    assert!(channels >= 1, "channels must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, (2.0f64 / 9.0).sqrt()).unwrap();
    let conv1_w = (0..channels * KERNEL * KERNEL)
        .map(|_| normal.sample(&mut rng) as f32)
        .collect();
    ModelWeights {
        channels,
        conv1_w,
        conv1_b: vec![0.0; channels],
        bn_gamma: vec![1.0; channels],
        bn_beta: vec![0.0; channels],
        bn_running_mean: vec![0.0; channels],
        bn_running_var: vec![1.0; channels],
        conv2_w: vec![0.0; channels * KERNEL * KERNEL],
        conv2_b: 0.0,
    }
}

/// Fixed field order, little-endian f32: conv1_w, conv1_b, bn_gamma,
/// bn_beta, bn_running_mean, bn_running_var, conv2_w, conv2_b.
/// 832 bytes at the default width.
pub fn serialize_weights(w: &ModelWeights) -> Vec<u8> {
    let mut out = ByteWriter::new();
    for part in [
        &w.conv1_w,
        &w.conv1_b,
        &w.bn_gamma,
        &w.bn_beta,
        &w.bn_running_mean,
        &w.bn_running_var,
        &w.conv2_w,
    ] {
        for &v in part.iter() {
            out.f32(v);
        }
    }
    out.f32(w.conv2_b);
    out.into_bytes()
}

/// Inverse of [`serialize_weights`]; the width is implied by the length.
pub fn deserialize_weights(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "weight blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let floats = bytes.len() / 4;
    if floats < 1 + 23 || (floats - 1) % 23 != 0 {
        return Err(Error::Format(format!(
            "weight blob holds {floats} floats, expected 23·channels + 1"
        )));
    }
    let channels = (floats - 1) / 23;
    let mut r = ByteReader::new(bytes, "weight blob");
    let read_vec = |n: usize, r: &mut ByteReader| -> Result<Vec<f32>> {
        (0..n).map(|_| r.f32()).collect()
    };
    let conv1_w = read_vec(channels * 9, &mut r)?;
    let conv1_b = read_vec(channels, &mut r)?;
    let bn_gamma = read_vec(channels, &mut r)?;
    let bn_beta = read_vec(channels, &mut r)?;
    let bn_running_mean = read_vec(channels, &mut r)?;
    let bn_running_var = read_vec(channels, &mut r)?;
    let conv2_w = read_vec(channels * 9, &mut r)?;
    let conv2_b = r.f32()?;
    r.expect_end()?;
    if bn_running_var.iter().any(|&v| v < 0.0) {
        return Err(Error::Format("negative running variance".into()));
    }
    Ok(ModelWeights {
        channels,
        conv1_w,
        conv1_b,
        bn_gamma,
        bn_beta,
        bn_running_mean,
        bn_running_var,
        conv2_w,
        conv2_b,
    })
}

/// Training hyperparameters. Defaults: 300 epochs, batches of 10 slices,
/// initial rate 1e-3 halved every 30 epochs, plain SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 10,
            lr0: 1e-3,
            lr_gamma: 0.5,
            lr_step_epochs: 30,
            seed: 0,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_epsilon: DEFAULT_BN_EPSILON,
            channels: DEFAULT_CHANNELS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_step_epochs must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "lr_gamma must be in (0, 1], got {}",
                self.lr_gamma
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("invalid batch-norm constants".into()));
        }
        if self.channels == 0 || self.channels > 255 {
            return Err(Error::Config(format!(
                "channels must be in 1..=255, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Step-decayed learning rate in effect at a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Mode switch for the public forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Normalize with current-batch statistics and update running stats.
    Train,
    /// Normalize with stored running statistics only.
    Eval,
}

/// Runs the enhancer on one slice. `Train` mode updates the running
/// batch-norm statistics inside `w`.
pub fn forward(w: &mut ModelWeights, input: &Grid2, mode: ForwardMode) -> Result<Grid2> {
    if input.rows < KERNEL || input.cols < KERNEL {
        return Err(Error::Data(format!(
            "input {}x{} is smaller than the {KERNEL}x{KERNEL} kernel",
            input.rows, input.cols
        )));
    }
    let mut model = Model::from_weights(w, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPSILON);
    let x: Vec<f64> = input.values.iter().map(|&v| v as f64).collect();
    let out = match mode {
        ForwardMode::Eval => model.forward_eval(&x, 1, input.rows, input.cols),
        ForwardMode::Train => {
            let out = model.forward_train(&x, 1, input.rows, input.cols);
            let updated = model.to_weights();
            w.bn_running_mean = updated.bn_running_mean;
            w.bn_running_var = updated.bn_running_var;
            out.pred
        }
    };
    Ok(Grid2::new(
        input.rows,
        input.cols,
        out.iter().map(|&v| v as f32).collect(),
    ))
}

/// Mean squared error over in-mask entries; zero-mask inputs yield 0.
pub fn masked_mse(pred: &[f32], target: &[f32], mask: &[u8]) -> f64 {
    assert!(
        pred.len() == target.len() && pred.len() == mask.len(),
        "masked_mse shape mismatch"
    );
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for i in 0..pred.len() {
        if mask[i] != 0 {
            let d = pred[i] as f64 - target[i] as f64;
            sum += d * d;
            count += 1;
        }
    }
    sum / (count.max(1) as f64)
}

/// Per-epoch mean masked MSE, one entry per epoch.
pub type LossHistory = Vec<f64>;

/// Trains one enhancer on a group's masked pairs with plain SGD.
///
/// Returns `None` when every mask is empty (the caller should fall back to a
/// zero-model). Deterministic for a fixed seed and pair order; all pairs in
/// the set must share one shape.
pub fn train_group(pairs: &[MaskedPair], cfg: &TrainConfig) -> Result<Option<(ModelWeights, LossHistory)>> {
    cfg.validate()?;
    if pairs.is_empty() || pairs.iter().all(|p| p.mask_count() == 0) {
        return Ok(None);
    }
    let (rows, cols) = (pairs[0].rows, pairs[0].cols);
    if pairs.iter().any(|p| (p.rows, p.cols) != (rows, cols)) {
        return Err(Error::Data("training pairs must share one shape".into()));
    }
    if rows < KERNEL || cols < KERNEL {
        return Err(Error::Data(format!(
            "slices {rows}x{cols} are smaller than the {KERNEL}x{KERNEL} kernel"
        )));
    }

    let init = init_model_with(cfg.seed, cfg.channels);
    let mut model = Model::from_weights(&init, cfg.bn_momentum, cfg.bn_epsilon);

    // Decouple the shuffle stream from the init stream.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        shuffle(&mut order, &mut shuffle_rng);
        let mut sse = 0.0f64;
        let mut mask_total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MaskedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (batch_sse, batch_mask, grads) = model.loss_and_grads(&batch);
            sse += batch_sse;
            mask_total += batch_mask;
            model.sgd_step(&grads, lr);
        }
        history.push(sse / mask_total.max(1.0));
    }
    Ok(Some((model.to_weights(), history)))
}

/// Fisher–Yates driven by the given stream; `SliceRandom` would work too but
/// an explicit loop keeps the consumed random count obvious and stable.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Maximum relative disagreement between analytic and central-difference
/// gradients over every learnable parameter.
pub fn grad_check(w: &ModelWeights, pair: &MaskedPair, epsilon: f64) -> f64 {
    let (_, analytic) = analytic_flat_grads(w, pair);
    let numeric = numeric_flat_grads(w, pair, epsilon);
    max_rel_err(&analytic, &numeric)
}

/// Loss and analytic gradient as one flat vector in parameter order
/// conv1_w, conv1_b, bn_gamma, bn_beta, conv2_w, conv2_b.
pub fn analytic_flat_grads(w: &ModelWeights, pair: &MaskedPair) -> (f64, Vec<f64>) {
    let mut model = Model::from_weights(w, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPSILON);
    let (sse, mask, grads) = model.loss_and_grads(&[pair]);
    (sse / mask.max(1.0), grads.flatten())
}

/// Central finite differences of the masked loss for every learnable
/// parameter, same flat order as [`analytic_flat_grads`].
///
/// The loss is piecewise smooth in the parameters: a difference that steps
/// across a ReLU kink estimates no derivative at all. When the activation
/// pattern differs between the two probe points the step is halved until
/// the pattern stabilizes. Loss differences at machine-noise scale carry
/// no signal (batch norm makes the loss exactly invariant to the first
/// conv's bias, so that direction differences to pure rounding slop) and
/// are treated as zero.
pub fn numeric_flat_grads(w: &ModelWeights, pair: &MaskedPair, epsilon: f64) -> Vec<f64> {
    let model = Model::from_weights(w, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPSILON);
    let n = w.param_count();
    let mut grads = Vec::with_capacity(n);
    for p in 0..n {
        let mut eps = epsilon;
        let mut fd = 0.0;
        for attempt in 0..=6 {
            let mut plus = model.clone();
            plus.nudge_param(p, eps);
            let mut minus = model.clone();
            minus.nudge_param(p, -eps);
            let (lp, pat_p) = plus.loss_and_pattern(&[pair]);
            let (lm, pat_m) = minus.loss_and_pattern(&[pair]);
            let diff = lp - lm;
            let noise_floor = 1024.0 * f64::EPSILON * lp.abs().max(lm.abs());
            fd = if diff.abs() <= noise_floor {
                0.0
            } else {
                diff / (2.0 * eps)
            };
            if pat_p == pat_m || attempt == 6 {
                break;
            }
            eps *= 0.5;
        }
        grads.push(fd);
    }
    grads
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Gradient accumulator mirroring the learnable parameters.
pub struct Grads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: f64,
}

impl Grads {
    fn zeros(c: usize) -> Self {
        Self {
            conv1_w: vec![0.0; c * 9],
            conv1_b: vec![0.0; c],
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            conv2_w: vec![0.0; c * 9],
            conv2_b: 0.0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.conv1_w.len() + self.conv1_b.len() + self.gamma.len() + self.beta.len()
                + self.conv2_w.len()
                + 1,
        );
        out.extend_from_slice(&self.conv1_w);
        out.extend_from_slice(&self.conv1_b);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.conv2_w);
        out.push(self.conv2_b);
        out
    }
}

/// f64 working copy of the model used by the trainer and the eval path.
#[derive(Clone)]
pub struct Model {
    c: usize,
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: f64,
    momentum: f64,
    epsilon: f64,
}

struct TrainOut {
    pred: Vec<f64>,
    xhat: Vec<f64>,
    relu_out: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Model {
    pub fn from_weights(w: &ModelWeights, momentum: f64, epsilon: f64) -> Self {
        let up = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Self {
            c: w.channels,
            conv1_w: up(&w.conv1_w),
            conv1_b: up(&w.conv1_b),
            gamma: up(&w.bn_gamma),
            beta: up(&w.bn_beta),
            running_mean: up(&w.bn_running_mean),
            running_var: up(&w.bn_running_var),
            conv2_w: up(&w.conv2_w),
            conv2_b: w.conv2_b as f64,
            momentum,
            epsilon,
        }
    }

    pub fn to_weights(&self) -> ModelWeights {
        let down = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        ModelWeights {
            channels: self.c,
            conv1_w: down(&self.conv1_w),
            conv1_b: down(&self.conv1_b),
            bn_gamma: down(&self.gamma),
            bn_beta: down(&self.beta),
            bn_running_mean: down(&self.running_mean),
            bn_running_var: down(&self.running_var),
            conv2_w: down(&self.conv2_w),
            conv2_b: self.conv2_b as f32,
        }
    }

    /// Eval-mode pipeline on a [B,1,H,W] batch using running statistics.
    pub fn forward_eval(&self, x: &[f64], b: usize, h: usize, w: usize) -> Vec<f64> {
        let c = self.c;
        let mut y = conv3x3_forward(x, b, 1, h, w, &self.conv1_w, &self.conv1_b, c);
        let hw = h * w;
        for bi in 0..b {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var[ch] + self.epsilon).sqrt();
                let (g, be, mu) = (self.gamma[ch], self.beta[ch], self.running_mean[ch]);
                for v in &mut y[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    let n = (*v - mu) * inv;
                    *v = (g * n + be).max(0.0);
                }
            }
        }
        conv3x3_forward(&y, b, c, h, w, &self.conv2_w, &[self.conv2_b], 1)
    }

    /// Train-mode pipeline: batch statistics, running-stat momentum update,
    /// caches kept for the backward pass.
    fn forward_train(&mut self, x: &[f64], b: usize, h: usize, w: usize) -> TrainOut {
        let c = self.c;
        let hw = h * w;
        let n_per_ch = (b * hw) as f64;
        let conv1_out = conv3x3_forward(x, b, 1, h, w, &self.conv1_w, &self.conv1_b, c);

        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for bi in 0..b {
            for ch in 0..c {
                for &v in &conv1_out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    mean[ch] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n_per_ch;
        }
        for bi in 0..b {
            for ch in 0..c {
                for &v in &conv1_out[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= n_per_ch;
        }

        // running = (1 − m)·running + m·batch, biased batch variance.
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch];
        }

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = vec![0.0f64; conv1_out.len()];
        let mut relu_out = vec![0.0f64; conv1_out.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    let nrm = (conv1_out[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = nrm;
                    relu_out[base + i] = (self.gamma[ch] * nrm + self.beta[ch]).max(0.0);
                }
            }
        }
        let pred = conv3x3_forward(&relu_out, b, c, h, w, &self.conv2_w, &[self.conv2_b], 1);
        TrainOut {
            pred,
            xhat,
            relu_out,
            inv_std,
        }
    }

    /// Train-mode forward + backward over a batch of masked pairs.
    /// Returns (masked squared-error sum, mask count, gradients); gradients
    /// are of sse / max(mask count, 1). Running statistics are updated.
    pub fn loss_and_grads(&mut self, batch: &[&MaskedPair]) -> (f64, f64, Grads) {
        let (x, targets, masks, b, h, w) = stack_batch(batch);
        let c = self.c;
        let hw = h * w;
        let out = self.forward_train(&x, b, h, w);

        let mask_count: f64 = masks.iter().map(|&m| m as f64).sum();
        let denom = mask_count.max(1.0);
        let mut sse = 0.0f64;
        let mut dpred = vec![0.0f64; out.pred.len()];
        for i in 0..out.pred.len() {
            if masks[i] != 0 {
                let d = out.pred[i] - targets[i];
                sse += d * d;
                dpred[i] = 2.0 * d / denom;
            }
        }

        let mut grads = Grads::zeros(c);

        // conv2 backward: weight/bias grads and gradient into the features.
        conv3x3_weight_grads(
            &out.relu_out,
            &dpred,
            b,
            c,
            1,
            h,
            w,
            &mut grads.conv2_w,
            std::slice::from_mut(&mut grads.conv2_b),
        );
        let mut dfeat = conv3x3_input_grads(&dpred, b, c, 1, h, w, &self.conv2_w);

        // ReLU gate.
        for i in 0..dfeat.len() {
            if out.relu_out[i] <= 0.0 {
                dfeat[i] = 0.0;
            }
        }

        // Batch-norm backward through the batch statistics.
        let n_per_ch = (b * hw) as f64;
        let mut dconv1 = vec![0.0f64; dfeat.len()];
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    let dy = dfeat[base + i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * out.xhat[base + i];
                }
            }
            grads.beta[ch] = sum_dy;
            grads.gamma[ch] = sum_dy_xhat;
            let g_inv = self.gamma[ch] * out.inv_std[ch];
            let mean_dy = sum_dy / n_per_ch;
            let mean_dy_xhat = sum_dy_xhat / n_per_ch;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    dconv1[base + i] = g_inv
                        * (dfeat[base + i] - mean_dy - out.xhat[base + i] * mean_dy_xhat);
                }
            }
        }

        conv3x3_weight_grads(&x, &dconv1, b, 1, c, h, w, &mut grads.conv1_w, &mut grads.conv1_b);

        (sse, mask_count, grads)
    }

    /// Train-mode loss without gradient work or running-stat mutation;
    /// the finite-difference oracle calls this.
    pub fn loss_only(&self, batch: &[&MaskedPair]) -> f64 {
        self.loss_and_pattern(batch).0
    }

    /// Loss plus the ReLU activation pattern, so callers can tell whether
    /// two nearby parameter points lie on the same smooth piece.
    pub fn loss_and_pattern(&self, batch: &[&MaskedPair]) -> (f64, Vec<bool>) {
        let mut scratch = self.clone();
        let (x, targets, masks, b, h, w) = stack_batch(batch);
        let out = scratch.forward_train(&x, b, h, w);
        let mask_count: f64 = masks.iter().map(|&m| m as f64).sum();
        let mut sse = 0.0f64;
        for i in 0..out.pred.len() {
            if masks[i] != 0 {
                let d = out.pred[i] - targets[i];
                sse += d * d;
            }
        }
        let pattern = out.relu_out.iter().map(|&v| v > 0.0).collect();
        (sse / mask_count.max(1.0), pattern)
    }

    pub fn sgd_step(&mut self, g: &Grads, lr: f64) {
        for (p, d) in self.conv1_w.iter_mut().zip(&g.conv1_w) {
            *p -= lr * d;
        }
        for (p, d) in self.conv1_b.iter_mut().zip(&g.conv1_b) {
            *p -= lr * d;
        }
        for (p, d) in self.gamma.iter_mut().zip(&g.gamma) {
            *p -= lr * d;
        }
        for (p, d) in self.beta.iter_mut().zip(&g.beta) {
            *p -= lr * d;
        }
        for (p, d) in self.conv2_w.iter_mut().zip(&g.conv2_w) {
            *p -= lr * d;
        }
        self.conv2_b -= lr * g.conv2_b;
    }

    /// Adds `delta` to the p-th learnable parameter in flat order.
    fn nudge_param(&mut self, p: usize, delta: f64) {
        let c = self.c;
        let mut idx = p;
        for part in [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.gamma,
            &mut self.beta,
            &mut self.conv2_w,
        ] {
            if idx < part.len() {
                part[idx] += delta;
                return;
            }
            idx -= part.len();
        }
        assert_eq!(idx, 0, "parameter index out of range for {c} channels");
        self.conv2_b += delta;
    }
}

/// Stacks masked pairs into contiguous [B,1,H,W] buffers.
fn stack_batch(batch: &[&MaskedPair]) -> (Vec<f64>, Vec<f64>, Vec<u8>, usize, usize, usize) {
    assert!(!batch.is_empty(), "empty batch");
    let (h, w) = (batch[0].rows, batch[0].cols);
    let mut x = Vec::with_capacity(batch.len() * h * w);
    let mut t = Vec::with_capacity(batch.len() * h * w);
    let mut m = Vec::with_capacity(batch.len() * h * w);
    for p in batch {
        assert!(
            p.rows == h && p.cols == w,
            "batch slices must share one shape"
        );
        x.extend(p.input.iter().map(|&v| v as f64));
        t.extend(p.target.iter().map(|&v| v as f64));
        m.extend_from_slice(&p.mask);
    }
    (x, t, m, batch.len(), h, w)
}

/// Same-padded 3×3 convolution via shift-and-accumulate over the nine taps.
fn conv3x3_forward(
    input: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    debug_assert_eq!(weights.len(), cout * cin * 9);
    debug_assert_eq!(bias.len(), cout);
    let hw = h * w;
    let mut out = vec![0.0f64; b * cout * hw];
    for bi in 0..b {
        for co in 0..cout {
            let out_plane = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let in_plane = &input[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                let wbase = (co * cin + ci) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let wgt = weights[wbase + u * 3 + v];
                        accumulate_shifted(out_plane, in_plane, h, w, u, v, wgt);
                    }
                }
            }
        }
    }
    out
}

/// out[i][j] += wgt · in[i+u−1][j+v−1] over the in-range region.
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    input: &[f64],
    h: usize,
    w: usize,
    u: usize,
    v: usize,
    wgt: f64,
) {
    if wgt == 0.0 {
        return;
    }
    let (i0, i1) = shift_range(h, u);
    let (j0, j1) = shift_range(w, v);
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let src = (i + u - 1) * w + (j0 + v - 1);
        let dst = i * w + j0;
        let len = j1 - j0;
        let (o, s) = (&mut out[dst..dst + len], &input[src..src + len]);
        for k in 0..len {
            o[k] += wgt * s[k];
        }
    }
}

/// Valid output rows/cols for tap offset `u − 1` with same padding.
#[inline]
fn shift_range(extent: usize, u: usize) -> (usize, usize) {
    match u {
        0 => (1, extent),
        1 => (0, extent),
        _ => (0, extent - 1),
    }
}

/// dW[co,ci,u,v] = Σ dout[co] ⊙ shift(input[ci]); db[co] = Σ dout[co].
#[allow(clippy::too_many_arguments)]
fn conv3x3_weight_grads(
    input: &[f64],
    dout: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    debug_assert_eq!(dw.len(), cout * cin * 9);
    debug_assert_eq!(db.len(), cout);
    let hw = h * w;
    for bi in 0..b {
        for co in 0..cout {
            let dplane = &dout[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
            db[co] += dplane.iter().sum::<f64>();
            for ci in 0..cin {
                let in_plane = &input[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                let wbase = (co * cin + ci) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let (i0, i1) = shift_range(h, u);
                        let (j0, j1) = shift_range(w, v);
                        if i0 >= i1 || j0 >= j1 {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for i in i0..i1 {
                            let src = (i + u - 1) * w + (j0 + v - 1);
                            let dst = i * w + j0;
                            let len = j1 - j0;
                            let (dp, sp) = (&dplane[dst..dst + len], &in_plane[src..src + len]);
                            for k in 0..len {
                                acc += dp[k] * sp[k];
                            }
                        }
                        dw[wbase + u * 3 + v] += acc;
                    }
                }
            }
        }
    }
}

/// dIn[ci] = Σ_co transpose-conv of dout[co] with W[co,ci].
fn conv3x3_input_grads(
    dout: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weights: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    let mut din = vec![0.0f64; b * cin * hw];
    for bi in 0..b {
        for ci in 0..cin {
            let in_plane = &mut din[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
            for co in 0..cout {
                let dplane = &dout[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                let wbase = (co * cin + ci) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let wgt = weights[wbase + u * 3 + v];
                        // Transpose of out[i,j] += w·in[i+u−1,j+v−1]:
                        // din[i+u−1,j+v−1] += w·dout[i,j].
                        accumulate_shifted_transpose(in_plane, dplane, h, w, u, v, wgt);
                    }
                }
            }
        }
    }
    din
}

/// din[i+u−1][j+v−1] += wgt · dout[i][j] over the in-range region.
#[inline]
fn accumulate_shifted_transpose(
    din: &mut [f64],
    dout: &[f64],
    h: usize,
    w: usize,
    u: usize,
    v: usize,
    wgt: f64,
) {
    if wgt == 0.0 {
        return;
    }
    let (i0, i1) = shift_range(h, u);
    let (j0, j1) = shift_range(w, v);
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let dst = (i + u - 1) * w + (j0 + v - 1);
        let src = i * w + j0;
        let len = j1 - j0;
        let (o, s) = (&mut din[dst..dst + len], &dout[src..src + len]);
        for k in 0..len {
            o[k] += wgt * s[k];
        }
    }
}
