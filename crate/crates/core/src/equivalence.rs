//! Rewrites between standard, shared-bias preactivated, and DAC chains.
//!
//! A standard MLP chain applies `relu(b + W y)` per layer. Moving each bias +
//! ReLU pair from a unit's output to its consumers' inputs is a purely formal
//! rewrite as long as the bias stays the producer's (shared by all
//! consumers): the composed function is unchanged. The value of DAC units is
//! precisely that their per-edge biases are *not* shared, which this module
//! also demonstrates with a constructive witness.

use crate::error::{DacError, Result};
use crate::layers::DenseStdParams;
use crate::ops::{self, relu_scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainFlavor {
    Standard,
    PreactivatedShared,
    Dac,
}

/// One dense block of a multilayer perceptron chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainLayer {
    /// `[n, m]`.
    pub weights: Tensor,
    /// `[n]`: the layer's own (producer) bias.
    pub bias: Tensor,
    /// `[n, m]` per-edge biases; present only in DAC chains.
    pub dac_biases: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    pub flavor: ChainFlavor,
    pub layers: Vec<ChainLayer>,
}

impl ChainSpec {
    pub fn standard(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let layers = layers
            .into_iter()
            .map(|(weights, bias)| ChainLayer {
                weights,
                bias,
                dac_biases: None,
            })
            .collect();
        let spec = ChainSpec {
            flavor: ChainFlavor::Standard,
            layers,
        };
        spec.check_dims()?;
        Ok(spec)
    }

    fn check_dims(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if prev.weights.shape()[0] != next.weights.shape()[1] {
                return Err(DacError::shape(
                    "consecutive chain layers",
                    prev.weights.shape(),
                    next.weights.shape(),
                ));
            }
        }
        Ok(())
    }

    /// Standard chain: `y <- relu(b_l + W_l y)` through every layer.
    pub fn eval_standard(&self, x: &Tensor) -> Result<Tensor> {
        if self.flavor != ChainFlavor::Standard {
            return Err(DacError::Contract(
                "eval_standard on a non-standard chain".into(),
            ));
        }
        let mut y = x.clone();
        for layer in &self.layers {
            y = ops::dense_std(&y, &layer.weights, &layer.bias, ops::Activation::Relu)?;
        }
        Ok(y)
    }

    /// Preactivated shared-bias chain: raw inputs enter as z-values at the
    /// leaves (`z_1 = W_1 x`), and layer `l > 1` filters with the *producing*
    /// layer's bias: `z_l = W_l relu(b_{l-1} + z_{l-1})`. The final filter
    /// `relu(b_L + z_L)` is not applied here; see
    /// [`ChainSpec::eval_preactivated_filtered`].
    pub fn eval_preactivated(&self, x: &Tensor) -> Result<Tensor> {
        if self.flavor != ChainFlavor::PreactivatedShared {
            return Err(DacError::Contract(
                "eval_preactivated on a non-preactivated chain".into(),
            ));
        }
        let zero0 = Tensor::zeros(vec![self.layers[0].weights.shape()[0]]);
        let mut z = ops::dense_std(x, &self.layers[0].weights, &zero0, ops::Activation::None)?;
        for l in 1..self.layers.len() {
            let producer_bias = &self.layers[l - 1].bias;
            let filtered = ops::relu(&ops::channel_bias(&z, producer_bias)?);
            let zero = Tensor::zeros(vec![self.layers[l].weights.shape()[0]]);
            z = ops::dense_std(&filtered, &self.layers[l].weights, &zero, ops::Activation::None)?;
        }
        Ok(z)
    }

    /// Preactivated chain output with the final filter `relu(b_L + .)`,
    /// which reproduces the standard chain exactly.
    pub fn eval_preactivated_filtered(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.eval_preactivated(x)?;
        let last_bias = &self.layers.last().expect("nonempty chain").bias;
        Ok(ops::relu(&ops::channel_bias(&z, last_bias)?))
    }

    /// DAC chain: `z_l = sum_j w_ij relu(d_ij + z_{l-1,j})`, raw inputs at the
    /// first layer.
    pub fn eval_dac(&self, x: &Tensor) -> Result<Tensor> {
        if self.flavor != ChainFlavor::Dac {
            return Err(DacError::Contract("eval_dac on a non-dac chain".into()));
        }
        let mut z = x.clone();
        for layer in &self.layers {
            let dac = layer
                .dac_biases
                .as_ref()
                .ok_or_else(|| DacError::Contract("dac chain layer without dac_biases".into()))?;
            z = ops::dense_dac(&z, &layer.weights, dac, None, ops::Activation::None)?;
        }
        Ok(z)
    }
}

/// The formal rewrite: a standard chain becomes a preactivated chain with
/// shared biases (each consumer filters with the producing layer's bias).
/// Applying the final filter to the rewritten chain's output reproduces the
/// standard chain's output exactly.
pub fn standard_to_preactivated_shared(c: &ChainSpec) -> Result<ChainSpec> {
    if c.flavor != ChainFlavor::Standard {
        return Err(DacError::Contract(
            "standard_to_preactivated_shared expects a standard chain".into(),
        ));
    }
    if c.layers.is_empty() {
        return Err(DacError::Contract("empty chain".into()));
    }
    Ok(ChainSpec {
        flavor: ChainFlavor::PreactivatedShared,
        layers: c.layers.clone(),
    })
}

/// Concatenation of `r` copies of `x` in order.
pub fn replicate_input(x: &Tensor, r: usize) -> Result<Tensor> {
    ops::replicate(x, r)
}

/// Collapses a standard dense layer consuming an `r`-fold replicated input
/// into an equivalent layer over the original input: replica weights sum.
pub fn standard_replication_collapse(
    p: &DenseStdParams,
    replicas: usize,
) -> Result<DenseStdParams> {
    let rm = p.in_dim();
    if replicas == 0 || rm % replicas != 0 {
        return Err(DacError::Contract(format!(
            "input dim {rm} is not a multiple of {replicas} replicas"
        )));
    }
    let m = rm / replicas;
    let n = p.out_dim();
    let mut collapsed = vec![0.0; n * m];
    for i in 0..n {
        for c in 0..replicas {
            for j in 0..m {
                collapsed[i * m + j] += p.weights.data()[i * rm + c * m + j];
            }
        }
    }
    DenseStdParams::new(
        Tensor::new(vec![n, m], collapsed)?,
        p.bias.clone(),
        p.out_activation,
    )
}

/// A two-layer standard network with hidden weights +-1, equivalent to a 1-d
/// single-unit DAC layer over replicated input.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerStd {
    /// sign of the hidden input weight, +-1.
    pub hidden_signs: Vec<f64>,
    pub hidden_biases: Vec<f64>,
    pub output_weights: Vec<f64>,
}

impl TwoLayerStd {
    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for ((&s, &b), &w) in self
            .hidden_signs
            .iter()
            .zip(&self.hidden_biases)
            .zip(&self.output_weights)
        {
            acc += w * relu_scalar(b + s * x);
        }
        acc
    }

    pub fn units(&self) -> usize {
        self.hidden_signs.len()
    }
}

/// Rewrites the 1-d single-unit DAC layer `g(x) = sum_j w_j relu(b_j + x)`
/// as a two-layer standard network with hidden weights +-1 whose output
/// (composed with an identity outer layer) equals `g` pointwise. Terms with
/// zero weight contribute a constant scaled by zero and are dropped.
pub fn dac1d_to_two_layer_standard(w: &[f64], b: &[f64]) -> Result<TwoLayerStd> {
    if w.len() != b.len() {
        return Err(DacError::Contract(format!(
            "weights and biases disagree: {} vs {}",
            w.len(),
            b.len()
        )));
    }
    let mut out = TwoLayerStd {
        hidden_signs: Vec::new(),
        hidden_biases: Vec::new(),
        output_weights: Vec::new(),
    };
    for (&wj, &bj) in w.iter().zip(b) {
        if wj == 0.0 {
            continue;
        }
        // The DAC term w_j relu(b_j + x) already has unit inner weight, so the
        // normalized hidden weight is sign(1) = +1 and the scale lands on the
        // outer weight.
        out.hidden_signs.push(1.0);
        out.hidden_biases.push(bj);
        out.output_weights.push(wj);
    }
    Ok(out)
}

/// Evaluates the 1-d DAC layer `sum_j w_j relu(b_j + x)` directly.
pub fn eval_dac1d(w: &[f64], b: &[f64], x: f64) -> f64 {
    w.iter()
        .zip(b)
        .map(|(&wj, &bj)| wj * relu_scalar(bj + x))
        .sum()
}

/// Demonstration (not a proof) that non-shared biases matter: a fixed
/// function built from two consumers of one node with *different* biases,
/// `f(x) = relu(1 + x) - relu(-1 + x)`, against the best shared-bias
/// reassignment of the same topology. With a shared bias both consumers see
/// `relu(b + x)`, so any readout is `W relu(b + x)`; a coarse grid search
/// over `(W, b)` reports the smallest sup deviation found.
pub struct SharedBiasWitness {
    /// Smallest max-deviation any shared-bias candidate achieved.
    pub best_shared_gap: f64,
    /// Candidate grid resolution used.
    pub grid: usize,
}

pub fn shared_bias_witness(grid: usize) -> SharedBiasWitness {
    let target = |x: f64| relu_scalar(1.0 + x) - relu_scalar(-1.0 + x);
    let xs: Vec<f64> = (0..=200).map(|i| -2.0 + 4.0 * i as f64 / 200.0).collect();
    let mut best = f64::INFINITY;
    for wi in 0..=grid {
        let w = -4.0 + 8.0 * wi as f64 / grid as f64;
        for bi in 0..=grid {
            let b = -4.0 + 8.0 * bi as f64 / grid as f64;
            let gap = xs
                .iter()
                .map(|&x| (w * relu_scalar(b + x) - target(x)).abs())
                .fold(0.0, f64::max);
            best = best.min(gap);
        }
    }
    SharedBiasWitness {
        best_shared_gap: best,
        grid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(
            shape,
            (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_standard_chain(dims: &[usize], rng: &mut ChaCha8Rng) -> ChainSpec {
        let layers = dims
            .windows(2)
            .map(|w| {
                (
                    random_tensor(vec![w[1], w[0]], rng),
                    random_tensor(vec![w[1]], rng),
                )
            })
            .collect();
        ChainSpec::standard(layers).unwrap()
    }

    #[test]
    fn one_layer_rewrite_is_definition_unrolling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chain = random_standard_chain(&[3, 2], &mut rng);
        let pre = standard_to_preactivated_shared(&chain).unwrap();
        for _ in 0..5 {
            let x = random_tensor(vec![4, 3], &mut rng);
            let lhs = chain.eval_standard(&x).unwrap();
            let rhs = pre.eval_preactivated_filtered(&x).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }

    #[test]
    fn three_layer_rewrite_matches_to_1e12() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chain = random_standard_chain(&[5, 7, 6, 4], &mut rng);
        let pre = standard_to_preactivated_shared(&chain).unwrap();
        let x = random_tensor(vec![20, 5], &mut rng);
        let lhs = chain.eval_standard(&x).unwrap();
        let rhs = pre.eval_preactivated_filtered(&x).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn zero_bias_chains_reduce_to_nested_relu_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut chain = random_standard_chain(&[3, 4, 2], &mut rng);
        for layer in &mut chain.layers {
            layer.bias = Tensor::zeros(vec![layer.weights.shape()[0]]);
        }
        let pre = standard_to_preactivated_shared(&chain).unwrap();
        let x = random_tensor(vec![7, 3], &mut rng);
        let lhs = chain.eval_standard(&x).unwrap();
        let rhs = pre.eval_preactivated_filtered(&x).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        // both equal relu(W2 relu(W1 x))
        let h = ops::relu(
            &ops::dense_std(
                &x,
                &chain.layers[0].weights,
                &chain.layers[0].bias,
                ops::Activation::None,
            )
            .unwrap(),
        );
        let expect = ops::relu(
            &ops::dense_std(
                &h,
                &chain.layers[1].weights,
                &chain.layers[1].bias,
                ops::Activation::None,
            )
            .unwrap(),
        );
        assert!(lhs.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn replicate_examples() {
        let r = replicate_input(&Tensor::from_vec(vec![5.0]), 3).unwrap();
        assert_eq!(r.data(), &[5.0, 5.0, 5.0]);

        let x = Tensor::from_vec(vec![2.0, 4.0]);
        assert_eq!(replicate_input(&x, 1).unwrap().data(), x.data());

        let r = replicate_input(&Tensor::from_vec(vec![1.0, 2.0]), 2).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 1.0, 2.0]);

        assert!(replicate_input(&x, 0).is_err());
    }

    #[test]
    fn collapse_sums_replica_weights() {
        use crate::ops::Activation;
        // w = [1,2,3] over x replicated thrice -> [6]
        let p = DenseStdParams::new(
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(),
            Tensor::from_vec(vec![0.5]),
            Activation::Relu,
        )
        .unwrap();
        let collapsed = standard_replication_collapse(&p, 3).unwrap();
        assert_eq!(collapsed.weights.data(), &[6.0]);

        // zero weights stay zero
        let p0 = DenseStdParams::new(
            Tensor::zeros(vec![2, 6]),
            Tensor::zeros(vec![2]),
            Activation::Relu,
        )
        .unwrap();
        let c0 = standard_replication_collapse(&p0, 3).unwrap();
        assert!(c0.weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapse_preserves_outputs_on_random_inputs() {
        use crate::layers::dense_std_forward;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DenseStdParams::new(
            random_tensor(vec![3, 8], &mut rng),
            random_tensor(vec![3], &mut rng),
            crate::ops::Activation::Relu,
        )
        .unwrap();
        let collapsed = standard_replication_collapse(&p, 4).unwrap();
        for _ in 0..100 {
            let x = random_tensor(vec![2], &mut rng);
            let xr = replicate_input(&x, 4).unwrap();
            let lhs = dense_std_forward(&p, &xr.reshaped(vec![1, 8]).unwrap()).unwrap();
            let rhs = dense_std_forward(&collapsed, &x.reshaped(vec![1, 2]).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }

    proptest::proptest! {
        /// Splitting each weight into r parts that sum to the original leaves
        /// the standard dense output invariant under input replication.
        #[test]
        fn replication_split_invariance(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(1..4usize);
            let n = rng.random_range(1..4usize);
            let r = rng.random_range(1..4usize);
            let base = random_tensor(vec![n, m], &mut rng);
            let mut split = vec![0.0; n * r * m];
            for i in 0..n {
                for j in 0..m {
                    let mut rest = base.data()[i * m + j];
                    for c in 0..r - 1 {
                        let part = rng.random_range(-1.0..1.0);
                        split[i * r * m + c * m + j] = part;
                        rest -= part;
                    }
                    split[i * r * m + (r - 1) * m + j] = rest;
                }
            }
            let bias = random_tensor(vec![n], &mut rng);
            let p_split = DenseStdParams::new(
                Tensor::new(vec![n, r * m], split).unwrap(),
                bias.clone(),
                crate::ops::Activation::Relu,
            ).unwrap();
            let p_base = DenseStdParams::new(base, bias, crate::ops::Activation::Relu).unwrap();
            let x = random_tensor(vec![m], &mut rng);
            let xr = replicate_input(&x, r).unwrap();
            let lhs = crate::layers::dense_std_forward(&p_split, &xr.reshaped(vec![1, r * m]).unwrap()).unwrap();
            let rhs = crate::layers::dense_std_forward(&p_base, &x.reshaped(vec![1, m]).unwrap()).unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-9);
        }
    }

    #[test]
    fn dac1d_single_unit_is_plain_relu() {
        let net = dac1d_to_two_layer_standard(&[1.0], &[0.0]).unwrap();
        for x in [-1.0, -0.3, 0.0, 0.7, 2.0] {
            assert_eq!(net.eval(x), relu_scalar(x));
        }
    }

    #[test]
    fn dac1d_spike_coefficients_match_on_grid() {
        // psi_1 as a DAC layer: w = [1,-2,1], b = [-1,0,1]
        let w = [1.0, -2.0, 1.0];
        let b = [-1.0, 0.0, 1.0];
        let net = dac1d_to_two_layer_standard(&w, &b).unwrap();
        for i in 0..=200 {
            let x = -2.0 + 4.0 * i as f64 / 200.0;
            let spike = (1.0 - x.abs()).max(0.0);
            assert!((net.eval(x) - spike).abs() <= 1e-12);
            assert!((eval_dac1d(&w, &b, x) - spike).abs() <= 1e-12);
        }
    }

    #[test]
    fn dac1d_random_grid_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let net = dac1d_to_two_layer_standard(&w, &b).unwrap();
        for i in 0..=200 {
            let x = -2.0 + 4.0 * i as f64 / 200.0;
            assert!((net.eval(x) - eval_dac1d(&w, &b, x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_shared_biases_beat_any_shared_reassignment() {
        let witness = shared_bias_witness(80);
        assert!(
            witness.best_shared_gap > 0.1,
            "shared-bias gap {} should stay large",
            witness.best_shared_gap
        );
    }
}
