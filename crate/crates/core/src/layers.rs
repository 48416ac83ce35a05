//! Standard and DAC fully connected / convolutional layers plus batch
//! normalization.
//!
//! A DAC layer filters every incoming edge with its own bias before the
//! linear aggregation:
//!
//! `out_i = psi(b_i + sum_j w_ij relu(d_ij + y_j))`
//!
//! where the `d_ij` are non-shared: two units reading the same input may use
//! different thresholds. `psi` and `b_i` are optional and default to absent;
//! they matter when the next operation is not another DAC layer (e.g. global
//! average pooling).
//!
//! Convolutional DAC biases depend on the (output kernel, input channel) pair
//! only, never on the kernel position. With same padding the zero-padded
//! border positions feed `relu(d_ij + 0)`, i.e. the DAC bias applies to the
//! padding too.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DacError, Result};
use crate::ops::{self, Activation, Padding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseStdParams {
    /// `[n, m]`: row i holds the weights of output unit i.
    pub weights: Tensor,
    /// `[n]`.
    pub bias: Tensor,
    pub out_activation: Activation,
}

impl DenseStdParams {
    pub fn new(weights: Tensor, bias: Tensor, out_activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(DacError::shape("dense weights must be [n,m]", weights.shape(), &[]));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(DacError::shape("dense bias", bias.shape(), weights.shape()));
        }
        Ok(DenseStdParams {
            weights,
            bias,
            out_activation,
        })
    }

    pub fn he_normal(m: usize, n: usize, act: Activation, rng: &mut impl Rng) -> Self {
        DenseStdParams {
            weights: he_normal_tensor(vec![n, m], m, rng),
            bias: Tensor::zeros(vec![n]),
            out_activation: act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseDacParams {
    /// `[n, m]`.
    pub weights: Tensor,
    /// `[n, m]`, one bias per edge.
    pub dac_biases: Tensor,
    /// Optional `[n]` output bias `b_i`.
    pub out_bias: Option<Tensor>,
    /// Optional output activation `psi`.
    pub out_activation: Activation,
}

impl DenseDacParams {
    pub fn new(
        weights: Tensor,
        dac_biases: Tensor,
        out_bias: Option<Tensor>,
        out_activation: Activation,
    ) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(DacError::shape("dense weights must be [n,m]", weights.shape(), &[]));
        }
        if dac_biases.shape() != weights.shape() {
            return Err(DacError::shape(
                "dac_biases must match weights",
                dac_biases.shape(),
                weights.shape(),
            ));
        }
        if let Some(b) = &out_bias {
            if b.shape() != [weights.shape()[0]] {
                return Err(DacError::shape("dense out_bias", b.shape(), weights.shape()));
            }
        }
        Ok(DenseDacParams {
            weights,
            dac_biases,
            out_bias,
            out_activation,
        })
    }

    /// He-normal weights, zero DAC biases, no `psi`/`b_i`.
    pub fn he_normal(m: usize, n: usize, rng: &mut impl Rng) -> Self {
        DenseDacParams {
            weights: he_normal_tensor(vec![n, m], m, rng),
            dac_biases: Tensor::zeros(vec![n, m]),
            out_bias: None,
            out_activation: Activation::None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dStdParams {
    /// `[L, L, n, m]` following the index order `w[a][b][i][j]`.
    pub kernel: Tensor,
    /// `[n]`.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
    pub out_activation: Activation,
}

impl Conv2dStdParams {
    pub fn new(
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: Padding,
        out_activation: Activation,
    ) -> Result<Self> {
        check_kernel(&kernel)?;
        if bias.shape() != [kernel.shape()[2]] {
            return Err(DacError::shape("conv bias", bias.shape(), kernel.shape()));
        }
        Ok(Conv2dStdParams {
            kernel,
            bias,
            stride,
            padding,
            out_activation,
        })
    }

    pub fn he_normal(
        l: usize,
        m: usize,
        n: usize,
        stride: usize,
        padding: Padding,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2dStdParams {
            kernel: he_normal_tensor(vec![l, l, n, m], l * l * m, rng),
            bias: Tensor::zeros(vec![n]),
            stride,
            padding,
            out_activation: act,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dDacParams {
    /// `[L, L, n, m]`.
    pub kernel: Tensor,
    /// `[n, m]`: position-independent, one bias per (output kernel, input channel).
    pub dac_biases: Tensor,
    pub out_bias: Option<Tensor>,
    pub stride: usize,
    pub padding: Padding,
    pub out_activation: Activation,
}

impl Conv2dDacParams {
    pub fn new(
        kernel: Tensor,
        dac_biases: Tensor,
        out_bias: Option<Tensor>,
        stride: usize,
        padding: Padding,
        out_activation: Activation,
    ) -> Result<Self> {
        check_kernel(&kernel)?;
        let (n, m) = (kernel.shape()[2], kernel.shape()[3]);
        if dac_biases.shape() != [n, m] {
            return Err(DacError::shape(
                "conv dac_biases must be [n,m]",
                dac_biases.shape(),
                kernel.shape(),
            ));
        }
        if let Some(b) = &out_bias {
            if b.shape() != [n] {
                return Err(DacError::shape("conv out_bias", b.shape(), kernel.shape()));
            }
        }
        Ok(Conv2dDacParams {
            kernel,
            dac_biases,
            out_bias,
            stride,
            padding,
            out_activation,
        })
    }

    /// He-normal kernel, zero DAC biases, no `psi`/`b_i`.
    pub fn he_normal(
        l: usize,
        m: usize,
        n: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2dDacParams {
            kernel: he_normal_tensor(vec![l, l, n, m], l * l * m, rng),
            dac_biases: Tensor::zeros(vec![n, m]),
            out_bias: None,
            stride,
            padding,
            out_activation: Activation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    /// Scale gamma, `[c]`.
    pub gamma: Tensor,
    /// Shift beta, `[c]`; absent in the DAC placement.
    pub beta: Option<Tensor>,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize, with_shift: bool) -> Self {
        BatchNormParams {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: with_shift.then(|| Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

fn check_kernel(kernel: &Tensor) -> Result<()> {
    let shape = kernel.shape();
    if shape.len() != 4 || shape[0] != shape[1] {
        return Err(DacError::shape("conv kernel must be [L,L,n,m]", shape, &[]));
    }
    if shape[0] % 2 == 0 {
        return Err(DacError::Contract(format!(
            "kernel size must be odd, got {}",
            shape[0]
        )));
    }
    Ok(())
}

fn he_normal_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid stddev");
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| normal.sample(rng)).collect()).expect("shape")
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

/// `out_activation(bias + y W^T)`, rowwise.
pub fn dense_std_forward(p: &DenseStdParams, y: &Tensor) -> Result<Tensor> {
    ops::dense_std(y, &p.weights, &p.bias, p.out_activation)
}

/// `psi(b_i + sum_j w_ij relu(d_ij + y_j))` with `b_i` as 0 and `psi` as
/// identity when absent.
pub fn dense_dac_forward(p: &DenseDacParams, y: &Tensor) -> Result<Tensor> {
    ops::dense_dac(
        y,
        &p.weights,
        &p.dac_biases,
        p.out_bias.as_ref(),
        p.out_activation,
    )
}

/// Factorized evaluation of the bare DAC map on a single input vector:
/// embedding row i is `relu(d_i + z)` and output i its dot with `w_i`.
/// Accumulation order matches [`dense_dac_forward`], so the output equals the
/// direct path bit-for-bit.
pub fn dense_dac_factorized(p: &DenseDacParams, z: &Tensor) -> Result<(Tensor, Tensor)> {
    if p.out_bias.is_some() || p.out_activation != Activation::None {
        return Err(DacError::Contract(
            "factorization is stated for the bare DAC map (no psi / out bias)".into(),
        ));
    }
    if z.shape() != [p.in_dim()] {
        return Err(DacError::shape("factorized input", z.shape(), p.weights.shape()));
    }
    let (n, m) = (p.out_dim(), p.in_dim());
    let mut embedding = vec![0.0; n * m];
    let mut output = vec![0.0; n];
    for i in 0..n {
        let dr = &p.dac_biases.data()[i * m..(i + 1) * m];
        let wr = &p.weights.data()[i * m..(i + 1) * m];
        let er = &mut embedding[i * m..(i + 1) * m];
        for j in 0..m {
            er[j] = ops::relu_scalar(dr[j] + z.data()[j]);
        }
        let mut acc = 0.0;
        for j in 0..m {
            acc += wr[j] * er[j];
        }
        output[i] = acc;
    }
    Ok((
        Tensor::new(vec![n, m], embedding)?,
        Tensor::new(vec![n], output)?,
    ))
}

pub fn conv2d_std_forward(p: &Conv2dStdParams, y: &Tensor) -> Result<Tensor> {
    ops::conv2d_std(
        y,
        &p.kernel,
        Some(&p.bias),
        p.stride,
        p.padding,
        p.out_activation,
    )
}

pub fn conv2d_dac_forward(p: &Conv2dDacParams, y: &Tensor) -> Result<Tensor> {
    ops::conv2d_dac(
        y,
        &p.kernel,
        &p.dac_biases,
        p.out_bias.as_ref(),
        p.stride,
        p.padding,
        p.out_activation,
    )
}

/// Batch normalization over batch and spatial dims per channel. Training mode
/// uses batch statistics; inference uses the stored running statistics. When
/// `beta` is absent no shift is added after scaling.
pub fn batchnorm_forward(p: &BatchNormParams, y: &Tensor, training: bool) -> Result<Tensor> {
    ops::batchnorm(
        y,
        &p.gamma,
        p.beta.as_ref(),
        Some((&p.running_mean, &p.running_var)),
        p.epsilon,
        training,
    )
}

/// Exponential-moving-average update of the running statistics from a batch.
pub fn batchnorm_update_running(p: &mut BatchNormParams, y: &Tensor) -> Result<()> {
    let (mean, var) = ops::batch_stats(y, p.channels())?;
    let m = p.momentum;
    for (r, b) in p.running_mean.data_mut().iter_mut().zip(&mean) {
        *r = m * *r + (1.0 - m) * b;
    }
    for (r, b) in p.running_var.data_mut().iter_mut().zip(&var) {
        *r = m * *r + (1.0 - m) * b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        use rand::Rng;
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_std_hand_values() {
        // weights [[1,1]], bias [0], relu, y [[1,-3]] -> [[0]]
        let p = DenseStdParams::new(
            Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Tensor::from_vec(vec![0.0]),
            Activation::Relu,
        )
        .unwrap();
        let out = dense_std_forward(&p, &Tensor::from_rows(&[vec![1.0, -3.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0]);

        // weights [[2]], bias [1], none, y [[3]] -> [[7]]
        let p = DenseStdParams::new(
            Tensor::from_rows(&[vec![2.0]]).unwrap(),
            Tensor::from_vec(vec![1.0]),
            Activation::None,
        )
        .unwrap();
        let out = dense_std_forward(&p, &Tensor::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn dense_std_matches_naive_double_loop() {
        let mut r = rng(11);
        let w = random_tensor(vec![4, 3], &mut r);
        let b = random_tensor(vec![4], &mut r);
        let y = random_tensor(vec![5, 3], &mut r);
        let p = DenseStdParams::new(w.clone(), b.clone(), Activation::Relu).unwrap();
        let out = dense_std_forward(&p, &y).unwrap();
        for row in 0..5 {
            for i in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += w.data()[i * 3 + j] * y.data()[row * 3 + j];
                }
                let expect = ops::relu_scalar(b.data()[i] + acc);
                assert_eq!(out.data()[row * 4 + i], expect, "exact match expected");
            }
        }
    }

    #[test]
    fn dense_dac_hand_value() {
        // m=2, n=1, w=[1,-2], d=[0.5,-0.5], y=[1,1]:
        // 1*relu(1.5) + (-2)*relu(0.5) = 0.5
        let p = DenseDacParams::new(
            Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap(),
            None,
            Activation::None,
        )
        .unwrap();
        let out = dense_dac_forward(&p, &Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn dense_dac_zero_biases_reduce_to_std_of_relu() {
        let mut r = rng(3);
        for _ in 0..10 {
            let w = random_tensor(vec![4, 6], &mut r);
            let y = random_tensor(vec![3, 6], &mut r);
            let dac = DenseDacParams::new(
                w.clone(),
                Tensor::zeros(vec![4, 6]),
                None,
                Activation::None,
            )
            .unwrap();
            let std = DenseStdParams::new(w, Tensor::zeros(vec![4]), Activation::None).unwrap();
            let lhs = dense_dac_forward(&dac, &y).unwrap();
            let rhs = dense_std_forward(&std, &ops::relu(&y)).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }

    #[test]
    fn dense_dac_zero_weights_give_out_bias() {
        let p = DenseDacParams::new(
            Tensor::zeros(vec![2, 3]),
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]).unwrap(),
            Some(Tensor::from_vec(vec![0.7, -0.3])),
            Activation::None,
        )
        .unwrap();
        let out = dense_dac_forward(&p, &Tensor::from_rows(&[vec![5.0, 6.0, 7.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.7, -0.3]);
    }

    #[test]
    fn factorization_single_row_and_zero() {
        // n=1: embedding is relu(d + z), output its dot with w.
        let p = DenseDacParams::new(
            Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap(),
            None,
            Activation::None,
        )
        .unwrap();
        let (emb, out) = dense_dac_factorized(&p, &Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        assert_eq!(emb.data(), &[1.5, 0.0]);
        assert_eq!(out.data(), &[3.0]);

        // z = 0, zero bias rows -> embedding 0, output 0.
        let p = DenseDacParams::new(
            Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Tensor::zeros(vec![1, 2]),
            None,
            Activation::None,
        )
        .unwrap();
        let (emb, out) = dense_dac_factorized(&p, &Tensor::zeros(vec![2])).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn factorization_matches_forward_bit_exactly() {
        let mut r = rng(21);
        for _ in 0..20 {
            let w = random_tensor(vec![2, 3], &mut r);
            let d = random_tensor(vec![2, 3], &mut r);
            let z = random_tensor(vec![3], &mut r);
            let p = DenseDacParams::new(w, d, None, Activation::None).unwrap();
            let (_, fact) = dense_dac_factorized(&p, &z).unwrap();
            let direct = dense_dac_forward(&p, &z).unwrap();
            assert_eq!(fact.data(), direct.data(), "bit-exact equality");
        }
    }

    #[test]
    fn factorization_rejects_psi_or_out_bias() {
        let p = DenseDacParams::new(
            Tensor::zeros(vec![1, 1]),
            Tensor::zeros(vec![1, 1]),
            Some(Tensor::zeros(vec![1])),
            Activation::None,
        )
        .unwrap();
        assert!(dense_dac_factorized(&p, &Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn non_shared_thresholds_differ() {
        // Two units with identical weights but different DAC bias rows produce
        // different outputs: the defining feature of non-shared biases.
        let p = DenseDacParams::new(
            Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap(),
            None,
            Activation::None,
        )
        .unwrap();
        let out = dense_dac_forward(&p, &Tensor::from_rows(&[vec![0.2, 0.3]]).unwrap()).unwrap();
        assert_ne!(out.data()[0], out.data()[1]);
    }

    #[test]
    fn conv_std_one_by_one_kernel_scales() {
        // 1x1 kernel [[2]] scales a single-channel input.
        let x = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let out = ops::conv2d_raw(&x, &w, 1, Padding::Same).unwrap();
        let expect: Vec<f64> = (1..=9).map(|v| 2.0 * f64::from(v)).collect();
        assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn conv_std_counting_window() {
        // all-ones 3x3 kernel on all-ones 3x3 input, valid padding -> [[9]]
        let x = Tensor::full(vec![3, 3, 1], 1.0);
        let w = Tensor::full(vec![3, 3, 1, 1], 1.0);
        let out = ops::conv2d_raw(&x, &w, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_std_saturating_bias_with_relu() {
        let mut r = rng(5);
        let x = random_tensor(vec![2, 4, 4, 3], &mut r);
        let p = Conv2dStdParams::new(
            random_tensor(vec![3, 3, 2, 3], &mut r),
            Tensor::full(vec![2], -1e6),
            1,
            Padding::Same,
            Activation::Relu,
        )
        .unwrap();
        let out = conv2d_std_forward(&p, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_std_matches_quadruple_loop_oracle() {
        let mut r = rng(17);
        let x = random_tensor(vec![5, 5, 2], &mut r);
        let w = random_tensor(vec![3, 3, 3, 2], &mut r);
        let bias = random_tensor(vec![3], &mut r);
        let p = Conv2dStdParams::new(w.clone(), bias.clone(), 1, Padding::Valid, Activation::None)
            .unwrap();
        let out = conv2d_std_forward(&p, &x).unwrap();
        assert_eq!(out.shape(), &[3, 3, 3]);
        for h in 0..3 {
            for k in 0..3 {
                for i in 0..3 {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            for j in 0..2 {
                                acc += w.data()[((a * 3 + b) * 3 + i) * 2 + j]
                                    * x.data()[((h + a) * 5 + (k + b)) * 2 + j];
                            }
                        }
                    }
                    let expect = bias.data()[i] + acc;
                    let got = out.data()[(h * 3 + k) * 3 + i];
                    assert!(
                        (got - expect).abs() <= 1e-12,
                        "oracle mismatch at ({h},{k},{i}): {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_dac_zero_biases_reduce_to_std_of_relu() {
        let mut r = rng(23);
        let x = random_tensor(vec![2, 6, 6, 2], &mut r);
        let w = random_tensor(vec![3, 3, 3, 2], &mut r);
        let dac = Conv2dDacParams::new(
            w.clone(),
            Tensor::zeros(vec![3, 2]),
            None,
            1,
            Padding::Same,
            Activation::None,
        )
        .unwrap();
        let std = Conv2dStdParams::new(w, Tensor::zeros(vec![3]), 1, Padding::Same, Activation::None)
            .unwrap();
        let lhs = conv2d_dac_forward(&dac, &x).unwrap();
        let rhs = conv2d_std_forward(&std, &ops::relu(&x)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn conv_dac_single_pixel_hand_value() {
        // 1x1 kernel, m=n=1, w=1, d=0.5, pixel 0.25 -> relu(0.75) = 0.75
        let x = Tensor::new(vec![1, 1, 1], vec![0.25]).unwrap();
        let p = Conv2dDacParams::new(
            Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            None,
            1,
            Padding::Valid,
            Activation::None,
        )
        .unwrap();
        let out = conv2d_dac_forward(&p, &x).unwrap();
        assert_eq!(out.data(), &[0.75]);
    }

    /// Oracle that recomputes the activation inside the kernel loops instead
    /// of caching the planes.
    fn conv_dac_uncached(p: &Conv2dDacParams, x: &Tensor) -> Tensor {
        let &[s, t, m] = x.shape() else { panic!("unbatched input expected") };
        let l = p.kernel.shape()[0];
        let n = p.kernel.shape()[2];
        let half = l / 2;
        let mut out = vec![0.0; s * t * n];
        for h in 0..s {
            for k in 0..t {
                for i in 0..n {
                    let mut acc = 0.0;
                    for a in 0..l {
                        for b in 0..l {
                            let (hr, kr) = (h + a, k + b);
                            for j in 0..m {
                                let v = if hr >= half && kr >= half && hr - half < s && kr - half < t
                                {
                                    x.data()[((hr - half) * t + (kr - half)) * m + j]
                                } else {
                                    0.0
                                };
                                acc += p.kernel.data()[((a * l + b) * n + i) * m + j]
                                    * ops::relu_scalar(p.dac_biases.data()[i * m + j] + v);
                            }
                        }
                    }
                    out[(h * t + k) * n + i] = acc;
                }
            }
        }
        Tensor::new(vec![s, t, n], out).unwrap()
    }

    #[test]
    fn conv_dac_cached_matches_uncached_oracle() {
        let mut r = rng(31);
        let x = random_tensor(vec![6, 6, 2], &mut r);
        let p = Conv2dDacParams::new(
            random_tensor(vec![3, 3, 3, 2], &mut r),
            random_tensor(vec![3, 2], &mut r),
            None,
            1,
            Padding::Same,
            Activation::None,
        )
        .unwrap();
        let cached = conv2d_dac_forward(&p, &x).unwrap();
        let uncached = conv_dac_uncached(&p, &x);
        assert!(cached.max_abs_diff(&uncached) <= 1e-12);
    }

    #[test]
    fn batchnorm_identity_and_zero_gamma() {
        // Per-channel mean 0 variance 1 with gamma=1 passes through (up to epsilon).
        let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let mut p = BatchNormParams::new(1, true);
        p.epsilon = 1e-12;
        let out = batchnorm_forward(&p, &x, true).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-9);

        // gamma = 0 (beta absent) -> all zeros.
        let mut p = BatchNormParams::new(1, false);
        p.gamma = Tensor::zeros(vec![1]);
        let out = batchnorm_forward(&p, &x, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_moment_check() {
        let mut r = rng(41);
        let x = random_tensor(vec![16, 4, 4, 3], &mut r);
        let mut p = BatchNormParams::new(3, false);
        p.epsilon = 1e-8;
        let out = batchnorm_forward(&p, &x, true).unwrap();
        let (mean, var) = ops::batch_stats(&out, 3).unwrap();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-10, "channel {c} mean {}", mean[c]);
            assert!((var[c] - 1.0).abs() < 1e-6, "channel {c} var {}", var[c]);
        }
    }

    #[test]
    fn gradients_for_every_layer_kind() {
        use crate::graph::grad_check;

        let mut r = rng(55);
        // dense std wrt weights
        let y = random_tensor(vec![3, 4], &mut r);
        let bias = random_tensor(vec![2], &mut r);
        let w0 = random_tensor(vec![2, 4], &mut r);
        let err = grad_check(
            |g, w| {
                let yid = g.input(y.clone());
                let bid = g.input(bias.clone());
                let out = g.dense_std(yid, w, bid, Activation::Relu)?;
                Ok(g.mean(out))
            },
            &w0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "dense std weights: {err}");

        // dense dac wrt dac biases (kink-avoiding: biases away from -y)
        let d0 = random_tensor(vec![2, 4], &mut r).map(|v| v + 2.0_f64.copysign(v));
        let w = random_tensor(vec![2, 4], &mut r);
        let err = grad_check(
            |g, d| {
                let yid = g.input(y.clone());
                let wid = g.input(w.clone());
                let out = g.dense_dac(yid, wid, d, None, Activation::None)?;
                Ok(g.mean(out))
            },
            &d0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "dense dac biases: {err}");

        // conv dac wrt kernel, mean loss
        let x = random_tensor(vec![2, 5, 5, 2], &mut r);
        let d = random_tensor(vec![3, 2], &mut r);
        let k0 = random_tensor(vec![3, 3, 3, 2], &mut r);
        let err = grad_check(
            |g, k| {
                let xid = g.input(x.clone());
                let did = g.input(d.clone());
                let out = g.conv2d_dac(xid, k, did, None, 1, Padding::Same, Activation::None)?;
                Ok(g.mean(out))
            },
            &k0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "conv dac kernel: {err}");

        // batchnorm wrt gamma
        let xb = random_tensor(vec![4, 3, 3, 2], &mut r);
        let g0 = random_tensor(vec![2], &mut r).map(|v| v + 1.5);
        let err = grad_check(
            |g, gamma| {
                let xid = g.input(xb.clone());
                let out = g.batchnorm(xid, gamma, None, None, 1e-5, true)?;
                let out = g.relu(out);
                Ok(g.mean(out))
            },
            &g0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "batchnorm gamma: {err}");
    }
}
