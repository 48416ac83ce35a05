//! Momentum-SGD training harness and the early-stopping error statistics.
//!
//! Regularization follows the kernel-only convention: the L2 penalty
//! `lambda |w|^2` (gradient `2 lambda w`) applies to kernel weights only,
//! never to DAC biases, batchnorm scales, or output biases. DAC biases start
//! at zero and stay unregularized. The learning rate is a right-continuous
//! step function: `base_lr * decay^(boundaries passed)`.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{DacError, Result};
use crate::graph::{Graph, Precision};
use crate::layers::BatchNormParams;
use crate::netspec::{LayerSpec, NetworkSpec, ParamKind};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    PadCropFlip,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Iteration counts at which the learning rate is cut; strictly
    /// increasing and below `total_iters`.
    pub lr_boundaries: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    /// Kernel-only L2 coefficient (penalty `lambda |w|^2`).
    pub l2_kernel: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub precision: PrecisionConfig,
    pub augmentation: Augmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionConfig {
    F32,
    F64,
}

impl From<PrecisionConfig> for Precision {
    fn from(p: PrecisionConfig) -> Precision {
        match p {
            PrecisionConfig::F32 => Precision::F32,
            PrecisionConfig::F64 => Precision::F64,
        }
    }
}

impl Default for TrainConfig {
    /// Mirrors the full-scale protocol (boundaries 32k/48k/64k with decay 0.1
    /// over 80k iterations); scale `total_iters` down for desk runs with
    /// [`TrainConfig::scaled_to`].
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            lr_boundaries: vec![32_000, 48_000, 64_000],
            lr_decay: 0.1,
            momentum: 0.9,
            l2_kernel: 2e-4,
            batch_size: 128,
            total_iters: 80_000,
            seed: 1,
            precision: PrecisionConfig::F32,
            augmentation: Augmentation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_iters == 0 {
            return Err(DacError::InvalidConfig("batch size and iterations must be positive".into()));
        }
        let mut prev = None;
        for &b in &self.lr_boundaries {
            if b >= self.total_iters {
                return Err(DacError::InvalidConfig(format!(
                    "lr boundary {b} not below total iterations {}",
                    self.total_iters
                )));
            }
            if prev.is_some_and(|p| b <= p) {
                return Err(DacError::InvalidConfig("lr boundaries must be strictly increasing".into()));
            }
            prev = Some(b);
        }
        Ok(())
    }

    /// Rescales the default schedule proportionally to a desk-scale run.
    pub fn scaled_to(mut self, total_iters: usize) -> Self {
        let scale = total_iters as f64 / self.total_iters as f64;
        self.lr_boundaries = self
            .lr_boundaries
            .iter()
            .map(|&b| ((b as f64 * scale) as usize).max(1))
            .collect();
        self.lr_boundaries.dedup();
        self.lr_boundaries.retain(|&b| b < total_iters);
        self.total_iters = total_iters;
        self
    }

    /// `base_lr * decay^(boundaries passed)` at a given iteration.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        let passed = self.lr_boundaries.iter().filter(|&&b| iter >= b).count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }
}

/// Momentum buffers, one per parameter tensor.
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[Tensor]) -> Self {
        SgdState {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
        }
    }
}

/// One momentum-SGD step. The L2 term `2 lambda w` is added to the gradient
/// of kernel-class parameters only.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    kinds: &[ParamKind],
    state: &mut SgdState,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != kinds.len() {
        return Err(DacError::Contract("parameter/gradient arity mismatch".into()));
    }
    let lr = cfg.learning_rate(iter);
    for ((p, g), (v, &kind)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut().zip(kinds))
    {
        if p.shape() != g.shape() {
            return Err(DacError::shape("sgd step", p.shape(), g.shape()));
        }
        let l2 = if kind == ParamKind::Kernel {
            2.0 * cfg.l2_kernel
        } else {
            0.0
        };
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            let total_grad = gv + l2 * *pv;
            *vv = cfg.momentum * *vv + total_grad;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// 4-pixel zero pad, random crop back to the original size, random horizontal
/// flip (p = 0.5). Per image the RNG is consumed in the order crop-row,
/// crop-column, flip.
pub fn augment(batch: &Tensor, rng: &mut ChaCha8Rng, enabled: Augmentation) -> Result<Tensor> {
    if enabled == Augmentation::None {
        return Ok(batch.clone());
    }
    let &[b, h, w, c] = batch.shape() else {
        return Err(DacError::shape("augment expects [b,h,w,c]", batch.shape(), &[]));
    };
    const PAD: usize = 4;
    let mut out = vec![0.0; batch.numel()];
    let sample = h * w * c;
    for i in 0..b {
        let src = &batch.data()[i * sample..(i + 1) * sample];
        let dst = &mut out[i * sample..(i + 1) * sample];
        let off_r = rng.random_range(0..=2 * PAD);
        let off_c = rng.random_range(0..=2 * PAD);
        let flip = rng.random_bool(0.5);
        for r in 0..h {
            // reading from the padded image at (r + off_r, col + off_c)
            let src_r = (r + off_r) as isize - PAD as isize;
            for col in 0..w {
                let src_c = (col + off_c) as isize - PAD as isize;
                let dst_c = if flip { w - 1 - col } else { col };
                let dst_off = (r * w + dst_c) * c;
                if (0..h as isize).contains(&src_r) && (0..w as isize).contains(&src_c) {
                    let src_off = (src_r as usize * w + src_c as usize) * c;
                    dst[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_err: f64,
    pub val_err: f64,
    pub test_err: f64,
    pub train_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV with six-significant-digit floats:
    /// `epoch,train_err,val_err,test_err,train_loss,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_err,val_err,test_err,train_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                sig6(e.train_err),
                sig6(e.val_err),
                sig6(e.test_err),
                sig6(e.train_loss),
                sig6(e.lr)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn sig6(v: f64) -> String {
    format!("{:.5e}", v)
}

/// Classification error of the network on the given split (inference mode).
pub fn classification_error(net: &NetworkSpec, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut wrong = 0usize;
    for chunk in indices.chunks(256) {
        let (batch, labels) = data.gather(chunk)?;
        let logits = net.forward(&batch)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / indices.len() as f64)
}

/// Trains the network in place. Deterministic for a fixed seed and thread
/// configuration; every mini-batch records a fresh graph on the tape.
/// Divergence (non-finite loss) aborts with a diagnostic.
pub fn train(net: &mut NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.splits.train.is_empty() {
        return Err(DacError::Contract("empty training split".into()));
    }
    let bindings = net.collect_params();
    let kinds: Vec<ParamKind> = bindings.iter().map(|(b, _)| b.kind).collect();
    let mut params: Vec<Tensor> = bindings.iter().map(|(_, t)| t.clone()).collect();
    let mut state = SgdState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let iters_per_epoch = data.splits.train.len().div_ceil(cfg.batch_size);
    let mut order = data.splits.train.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut history = TrainHistory::default();
    let mut epoch_loss = 0.0;
    let mut epoch_iters = 0usize;

    for iter in 0..cfg.total_iters {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch_idx = &order[cursor..cursor + cfg.batch_size.min(order.len())];
        cursor += cfg.batch_size;

        let (batch, labels) = data.gather(batch_idx)?;
        let batch = if batch.shape().len() == 4 {
            augment(&batch, &mut rng, cfg.augmentation)?
        } else {
            batch
        };

        let mut g = Graph::with_precision(cfg.precision.into());
        let xid = g.input(batch);
        let rec = net.record(&mut g, xid, &params)?;
        let loss_id = g.softmax_cross_entropy(rec.output, labels)?;
        let loss = g.value(loss_id).item()?;
        if !loss.is_finite() {
            return Err(DacError::Contract(format!(
                "training diverged at iteration {iter}: loss {loss}"
            )));
        }
        epoch_loss += loss;
        epoch_iters += 1;

        // running-statistics update for batchnorm layers
        for &(layer_idx, input_node) in &rec.bn_inputs {
            if let LayerSpec::BatchNorm(p) = &mut net.layers[layer_idx] {
                update_running(p, g.value(input_node))?;
            }
        }

        let grads = g.backward(loss_id)?;
        let grad_tensors: Vec<Tensor> = rec
            .param_nodes
            .iter()
            .map(|&n| grads.get(n).expect("parameter gradient").clone())
            .collect();
        sgd_step(&mut params, &grad_tensors, &kinds, &mut state, cfg, iter)?;

        if (iter + 1) % iters_per_epoch == 0 || iter + 1 == cfg.total_iters {
            // write current parameters back for evaluation
            for ((binding, _), tensor) in bindings.iter().zip(&params) {
                net.set_param(*binding, tensor.clone())?;
            }
            let epoch = history.epochs.len() + 1;
            history.epochs.push(EpochStats {
                epoch,
                train_err: classification_error(net, data, &data.splits.train)?,
                val_err: classification_error(net, data, &data.splits.val)?,
                test_err: classification_error(net, data, &data.splits.test)?,
                train_loss: epoch_loss / epoch_iters.max(1) as f64,
                lr: cfg.learning_rate(iter),
            });
            epoch_loss = 0.0;
            epoch_iters = 0;
        }
    }

    // final write-back
    for ((binding, _), tensor) in bindings.iter().zip(&params) {
        net.set_param(*binding, tensor.clone())?;
    }
    Ok(history)
}

fn update_running(p: &mut BatchNormParams, input: &Tensor) -> Result<()> {
    let (mean, var) = ops::batch_stats(input, p.channels())?;
    let m = p.momentum;
    for (r, b) in p.running_mean.data_mut().iter_mut().zip(&mean) {
        *r = m * *r + (1.0 - m) * b;
    }
    for (r, b) in p.running_var.data_mut().iter_mut().zip(&var) {
        *r = m * *r + (1.0 - m) * b;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early-stopping error statistics
// ---------------------------------------------------------------------------

/// Early-stopping estimate over replicated runs: epoch `m` minimizes the
/// 5-epoch-window validation average across replicates; `t_bar` averages the
/// test error over the same window and replicates; the variance bound is
/// `sigma_sq_est / K + tau_term_est / K`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorRateEstimate {
    /// 1-based epoch index of the selected window center.
    pub m: usize,
    pub t_bar: f64,
    pub var_bound: f64,
    /// Conservative replicate-variance estimate (`sigma^2 + tau^2`).
    pub sigma_sq_est: f64,
    /// Window-mean variance estimate (`tau^2 / K`).
    pub tau_term_est: f64,
}

impl ErrorRateEstimate {
    pub fn std_err(&self) -> f64 {
        self.var_bound.sqrt()
    }
}

/// `val` and `test` are `K x E` matrices (replicates by epochs), `K = 5` in
/// the reference protocol. `m` ranges over indices whose +-2 window exists;
/// ties break to the smallest index.
pub fn early_stop_estimate(val: &[Vec<f64>], test: &[Vec<f64>]) -> Result<ErrorRateEstimate> {
    let k = val.len();
    if k < 2 || test.len() != k {
        return Err(DacError::Contract(format!(
            "need matching replicate counts >= 2, got {k} and {}",
            test.len()
        )));
    }
    let e = val[0].len();
    if e < 5 {
        return Err(DacError::Contract(format!("need at least 5 epochs, got {e}")));
    }
    if val.iter().chain(test).any(|row| row.len() != e) {
        return Err(DacError::Contract("ragged error matrices".into()));
    }

    // windowed argmin over valid centers (0-based 2 ..= e-3)
    let mut m0 = 2usize;
    let mut best = f64::INFINITY;
    for center in 2..=(e - 3) {
        let mut acc = 0.0;
        for row in val {
            for j in 0..5 {
                acc += row[center - 2 + j];
            }
        }
        let mean = acc / (5 * k) as f64;
        if mean < best {
            best = mean;
            m0 = center;
        }
    }

    let mut t_bar = 0.0;
    for row in test {
        for j in 0..5 {
            t_bar += row[m0 - 2 + j];
        }
    }
    t_bar /= (5 * k) as f64;

    let sigma_sq_est = test
        .iter()
        .map(|row| (row[m0] - t_bar).powi(2))
        .sum::<f64>()
        / (k - 1) as f64;

    let mut tau_term_est = 0.0;
    for j in 0..5 {
        let col_mean = test.iter().map(|row| row[m0 - 2 + j]).sum::<f64>() / k as f64;
        tau_term_est += (col_mean - t_bar).powi(2);
    }
    tau_term_est /= 4.0;

    Ok(ErrorRateEstimate {
        m: m0 + 1,
        t_bar,
        var_bound: sigma_sq_est / k as f64 + tau_term_est / k as f64,
        sigma_sq_est,
        tau_term_est,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;
    use crate::layers::{DenseDacParams, DenseStdParams};
    use crate::ops::Activation;

    #[test]
    fn lr_schedule_is_a_right_continuous_step_function() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            lr_boundaries: vec![10, 20, 30],
            lr_decay: 0.1,
            total_iters: 40,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        let mut levels = vec![cfg.learning_rate(0)];
        for i in 1..40 {
            let lr = cfg.learning_rate(i);
            if lr != *levels.last().unwrap() {
                levels.push(lr);
            }
        }
        assert_eq!(levels.len(), cfg.lr_boundaries.len() + 1);
        assert_eq!(cfg.learning_rate(9), 0.1);
        assert!((cfg.learning_rate(10) - 0.01).abs() < 1e-15, "right-continuous at the cut");
    }

    #[test]
    fn invalid_boundaries_rejected() {
        let cfg = TrainConfig {
            lr_boundaries: vec![10, 10],
            total_iters: 40,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            lr_boundaries: vec![50],
            total_iters: 40,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sgd_step_hand_values() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            lr_boundaries: vec![],
            momentum: 0.0,
            l2_kernel: 0.0,
            total_iters: 10,
            ..TrainConfig::default()
        };
        // zero gradient leaves parameters unchanged
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(vec![2])];
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &[ParamKind::OutBias], &mut state, &cfg, 0).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);

        // p=1, grad=1, lr=0.1, no momentum, bias-class -> 0.9
        let mut params = vec![Tensor::from_vec(vec![1.0])];
        let grads = vec![Tensor::from_vec(vec![1.0])];
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &[ParamKind::OutBias], &mut state, &cfg, 0).unwrap();
        assert_eq!(params[0].data(), &[0.9]);
    }

    #[test]
    fn l2_applies_to_kernels_only() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            lr_boundaries: vec![],
            momentum: 0.0,
            l2_kernel: 0.01,
            total_iters: 10,
            ..TrainConfig::default()
        };
        let p0 = 2.0;
        let mut params = vec![
            Tensor::from_vec(vec![p0]), // kernel
            Tensor::from_vec(vec![p0]), // dac bias
        ];
        let grads = vec![Tensor::from_vec(vec![0.5]), Tensor::from_vec(vec![0.5])];
        let mut state = SgdState::new(&params);
        sgd_step(
            &mut params,
            &grads,
            &[ParamKind::Kernel, ParamKind::DacBias],
            &mut state,
            &cfg,
            0,
        )
        .unwrap();
        // kernel: p - lr (g + 2 lambda p) = 2 - 0.1 (0.5 + 0.02 * 2)
        let expect_kernel = p0 - 0.1 * (0.5 + 2.0 * 0.01 * p0);
        assert!((params[0].data()[0] - expect_kernel).abs() < 1e-15);
        // bias-class: p - lr g
        assert!((params[1].data()[0] - (p0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn regularization_scoping_with_zero_data_gradients() {
        let cfg = TrainConfig {
            base_lr: 0.05,
            lr_boundaries: vec![],
            lr_decay: 0.1,
            momentum: 0.9,
            l2_kernel: 1e-2,
            total_iters: 100,
            ..TrainConfig::default()
        };
        let mut params = vec![
            Tensor::from_vec(vec![1.5, -0.7]), // kernel
            Tensor::from_vec(vec![0.4, -0.9]), // dac biases
        ];
        let initial = params.clone();
        let zero = vec![Tensor::zeros(vec![2]), Tensor::zeros(vec![2])];
        let mut state = SgdState::new(&params);
        for it in 0..50 {
            sgd_step(
                &mut params,
                &zero,
                &[ParamKind::Kernel, ParamKind::DacBias],
                &mut state,
                &cfg,
                it,
            )
            .unwrap();
        }
        for (after, before) in params[0].data().iter().zip(initial[0].data()) {
            assert!(after.abs() < before.abs(), "kernel weight must shrink");
            assert_eq!(after.signum(), before.signum());
        }
        assert_eq!(params[1].data(), initial[1].data(), "dac biases unchanged");
    }

    #[test]
    fn augment_shape_and_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = rng.random_range(1..4usize);
            let hw = rng.random_range(6..12usize);
            let x = Tensor::new(
                vec![b, hw, hw, 3],
                (0..b * hw * hw * 3).map(|i| i as f64).collect(),
            )
            .unwrap();
            let out = augment(&x, &mut rng, Augmentation::PadCropFlip).unwrap();
            assert_eq!(out.shape(), x.shape());
        }

        // augmentation none is the identity
        let x = Tensor::new(vec![1, 4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let out = augment(&x, &mut rng, Augmentation::None).unwrap();
        assert_eq!(out.data(), x.data());

        // flipping twice with centered crop is the identity
        let flip_once = |t: &Tensor| {
            let &[b, h, w, c] = t.shape() else { unreachable!() };
            let mut out = t.clone();
            for i in 0..b {
                for r in 0..h {
                    for col in 0..w {
                        for ch in 0..c {
                            let src = ((i * h + r) * w + col) * c + ch;
                            let dst = ((i * h + r) * w + (w - 1 - col)) * c + ch;
                            out.data_mut()[dst] = t.data()[src];
                        }
                    }
                }
            }
            out
        };
        assert_eq!(flip_once(&flip_once(&x)).data(), x.data());
    }

    #[test]
    fn estimator_constant_matrix() {
        let val = vec![vec![0.25; 20]; 5];
        let test = vec![vec![0.25; 20]; 5];
        let est = early_stop_estimate(&val, &test).unwrap();
        assert_eq!(est.m, 3, "ties break to the first valid index");
        assert_eq!(est.t_bar, 0.25);
        assert_eq!(est.var_bound, 0.0);
    }

    #[test]
    fn estimator_finds_strict_window_minimum() {
        // unique strict minimum window centered at 1-based column 7
        let mut val = vec![vec![1.0; 15]; 5];
        for row in &mut val {
            for (j, v) in row.iter_mut().enumerate() {
                // V-shaped with the minimum at 0-based index 6
                *v = 1.0 + (j as f64 - 6.0).abs() * 0.1;
            }
        }
        let test = val.clone();
        let est = early_stop_estimate(&val, &test).unwrap();
        assert_eq!(est.m, 7);
    }

    #[test]
    fn estimator_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let e = 50;
            let val: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..e).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let test: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..e).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let est = early_stop_estimate(&val, &test).unwrap();

            // independent brute-force oracle
            let window_mean = |mat: &[Vec<f64>], c: usize| -> f64 {
                let mut acc = 0.0;
                for row in mat {
                    for j in (c - 2)..=(c + 2) {
                        acc += row[j];
                    }
                }
                acc / 25.0
            };
            let mut best_c = 2;
            for c in 2..=(e - 3) {
                if window_mean(&val, c) < window_mean(&val, best_c) {
                    best_c = c;
                }
            }
            assert_eq!(est.m, best_c + 1);
            let tb = window_mean(&test, best_c);
            assert_eq!(est.t_bar, tb);
            let sigma = test.iter().map(|r| (r[best_c] - tb).powi(2)).sum::<f64>() / 4.0;
            let mut tau = 0.0;
            for j in (best_c - 2)..=(best_c + 2) {
                let col = test.iter().map(|r| r[j]).sum::<f64>() / 5.0;
                tau += (col - tb).powi(2);
            }
            tau /= 4.0;
            assert_eq!(est.sigma_sq_est, sigma);
            assert_eq!(est.tau_term_est, tau);
            assert_eq!(est.var_bound, sigma / 5.0 + tau / 5.0);
        }
    }

    #[test]
    fn estimator_rejects_short_histories() {
        let short = vec![vec![0.1; 4]; 5];
        assert!(early_stop_estimate(&short, &short).is_err());
    }

    #[test]
    fn estimator_monte_carlo_coverage() {
        // t = mu + sigma Z_k + tau Z_kj; T-bar within 3 sqrt(var_bound) of mu
        // in at least 99 of 100 seeded trials.
        let mu = 0.30;
        let (sigma, tau) = (0.01, 0.005);
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
            let e = 30;
            let mut val = Vec::new();
            let mut test = Vec::new();
            for _ in 0..5 {
                let zk: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                let mut vrow = Vec::with_capacity(e);
                let mut trow = Vec::with_capacity(e);
                for j in 0..e {
                    let dip = 0.05 * ((j as f64 - 15.0) / 10.0).powi(2);
                    let zkj: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                    vrow.push(mu + dip + sigma * zk + tau * zkj);
                    let zkj2: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                    trow.push(mu + sigma * zk + tau * zkj2);
                }
                val.push(vrow);
                test.push(trow);
            }
            let est = early_stop_estimate(&val, &test).unwrap();
            if (est.t_bar - mu).abs() <= 3.0 * est.var_bound.sqrt() {
                hits += 1;
            }
        }
        assert!(hits >= 99, "coverage {hits}/100");
    }

    fn blob_net(seed: u64) -> NetworkSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkSpec::new(vec![
            LayerSpec::DenseDac(DenseDacParams::he_normal(2, 8, &mut rng)),
            LayerSpec::DenseStd(DenseStdParams::he_normal(8, 3, Activation::None, &mut rng)),
        ])
    }

    #[test]
    fn blob_training_reaches_zero_error() {
        let data = datasets::gen_blobs(120, 3, 0.08, 5).unwrap();
        let mut net = blob_net(2);
        let cfg = TrainConfig {
            base_lr: 0.05,
            lr_boundaries: vec![300],
            lr_decay: 0.1,
            momentum: 0.9,
            l2_kernel: 0.0,
            batch_size: 16,
            total_iters: 400,
            seed: 7,
            precision: PrecisionConfig::F64,
            augmentation: Augmentation::None,
        };
        let history = train(&mut net, &data, &cfg).unwrap();
        let last = history.epochs.last().unwrap();
        assert_eq!(last.train_err, 0.0, "linearly separable blobs should fit");
    }

    #[test]
    fn zero_lr_freezes_history() {
        let data = datasets::gen_blobs(60, 3, 0.2, 6).unwrap();
        let mut net = blob_net(3);
        let cfg = TrainConfig {
            base_lr: 0.0,
            lr_boundaries: vec![],
            lr_decay: 0.1,
            momentum: 0.9,
            l2_kernel: 0.0,
            batch_size: 12,
            total_iters: 60,
            seed: 8,
            precision: PrecisionConfig::F64,
            augmentation: Augmentation::None,
        };
        let history = train(&mut net, &data, &cfg).unwrap();
        let first = &history.epochs[0];
        for e in &history.epochs {
            assert_eq!(e.train_err, first.train_err);
            assert_eq!(e.val_err, first.val_err);
        }
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let data = datasets::gen_blobs(80, 3, 0.15, 9).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.05,
            lr_boundaries: vec![],
            lr_decay: 0.1,
            momentum: 0.9,
            l2_kernel: 1e-4,
            batch_size: 16,
            total_iters: 50,
            seed: 11,
            precision: PrecisionConfig::F64,
            augmentation: Augmentation::None,
        };
        let mut a = blob_net(4);
        let mut b = blob_net(4);
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b, "parameters must match bit for bit");
        assert_eq!(ha.to_csv(), hb.to_csv());
    }

    #[test]
    fn history_csv_layout() {
        let history = TrainHistory {
            epochs: vec![EpochStats {
                epoch: 1,
                train_err: 0.123456789,
                val_err: 0.2,
                test_err: 0.3,
                train_loss: 1.5,
                lr: 0.1,
            }],
        };
        let csv = history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_err,val_err,test_err,train_loss,lr"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,1.23457e-1,"), "{row}");
    }
}
