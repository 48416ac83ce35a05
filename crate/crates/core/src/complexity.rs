//! FLOPs and weight counting for dense and convolutional layers, standard and
//! DAC, plus whole-network reports.
//!
//! Counting convention: one multiply or one add is one FLOP; activations and
//! comparisons are free. The closed-form per-layer counts are
//!
//! - dense std: `(2m+1) n` FLOPs, `(m+1) n` weights;
//! - dense DAC: `(3m+1) n` FLOPs, `(2m+1) n` weights;
//! - conv std:  `(2 L^2 m + 1) n s t` FLOPs, `(L^2 m + 1) n` weights;
//! - conv DAC:  `m n s t + (2 L^2 m + 1) n s t` FLOPs (cached activation
//!   planes), `(m (1 + L^2) + 1) n` weights;
//!
//! with `s t` the output grid. The instrumented interpreter independently
//! counts the scalar multiplies and adds the kernels execute, mirroring their
//! loop structure (im2col products perform exactly the window
//! multiply-accumulates; DAC activation planes cost one add per interior
//! input position, the padded border being a per-(i,j) constant). With stride
//! 1 and same padding the two counts coincide exactly; strided layers
//! activate more input positions than the output-grid formula carries, and
//! the report shows both numbers.
//!
//! Batch normalization, pooling, residual additions and standalone bias
//! layers are outside the closed-form accounting and are reported in a
//! separate uncovered bucket (instrumented only).

use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::netspec::{LayerSpec, NetworkSpec};
use crate::ops::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Std,
    Dac,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(DacError::Contract("dimensions must be positive".into()));
    }
    Ok(())
}

fn check_kernel_size(l: usize) -> Result<()> {
    if l == 0 || l % 2 == 0 {
        return Err(DacError::Contract(format!(
            "kernel size must be odd, got {l}"
        )));
    }
    Ok(())
}

/// Forward FLOPs of a dense layer with `m` inputs and `n` outputs.
pub fn flops_dense(kind: UnitKind, m: usize, n: usize) -> Result<u64> {
    check_dims(&[m, n])?;
    let (m, n) = (m as u64, n as u64);
    Ok(match kind {
        UnitKind::Std => (2 * m + 1) * n,
        UnitKind::Dac => (3 * m + 1) * n,
    })
}

/// Stored weights of a dense layer.
pub fn weights_dense(kind: UnitKind, m: usize, n: usize) -> Result<u64> {
    check_dims(&[m, n])?;
    let (m, n) = (m as u64, n as u64);
    Ok(match kind {
        UnitKind::Std => (m + 1) * n,
        UnitKind::Dac => (2 * m + 1) * n,
    })
}

/// Forward FLOPs of an `L x L` convolution with `m` input channels, `n`
/// output kernels and an `s x t` output grid.
pub fn flops_conv(
    kind: UnitKind,
    l: usize,
    m: usize,
    n: usize,
    s: usize,
    t: usize,
) -> Result<u64> {
    check_kernel_size(l)?;
    check_dims(&[m, n, s, t])?;
    let (l, m, n, st) = (l as u64, m as u64, n as u64, (s * t) as u64);
    let std = (2 * l * l * m + 1) * n * st;
    Ok(match kind {
        UnitKind::Std => std,
        UnitKind::Dac => m * n * st + std,
    })
}

/// Stored weights of an `L x L` convolution.
pub fn weights_conv(kind: UnitKind, l: usize, m: usize, n: usize) -> Result<u64> {
    check_kernel_size(l)?;
    check_dims(&[m, n])?;
    let (l, m, n) = (l as u64, m as u64, n as u64);
    Ok(match kind {
        UnitKind::Std => (l * l * m + 1) * n,
        UnitKind::Dac => (m * (1 + l * l) + 1) * n,
    })
}

// ---------------------------------------------------------------------------
// Instrumented interpreter
// ---------------------------------------------------------------------------

/// Scalar multiply/add counters of an instrumented forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub muls: u64,
    pub adds: u64,
}

impl OpCounts {
    pub fn flops(&self) -> u64 {
        self.muls + self.adds
    }
}

/// Executed multiply/add counts of one layer on a single sample, mirroring
/// the kernel loop structure. `in_shape` excludes the batch axis.
pub fn instrument_layer(layer: &LayerSpec, in_shape: &[usize]) -> Result<OpCounts> {
    let mut c = OpCounts::default();
    match layer {
        LayerSpec::DenseStd(p) => {
            let (m, n) = (p.in_dim() as u64, p.out_dim() as u64);
            // per output: m multiply-accumulates, then the bias add
            c.muls += m * n;
            c.adds += m * n + n;
        }
        LayerSpec::DenseDac(p) => {
            let (m, n) = (p.in_dim() as u64, p.out_dim() as u64);
            // per edge: bias add, activation (free), multiply-accumulate;
            // the output bias add is executed with 0.0 when absent
            c.adds += m * n;
            c.muls += m * n;
            c.adds += m * n + n;
        }
        LayerSpec::DenseDacEdges(p) => {
            let e = p.edges.len() as u64;
            c.adds += e; // per-edge bias add
            c.muls += e;
            c.adds += e + p.out_dim as u64;
        }
        LayerSpec::ConvStd(p) => {
            let (oh, ow) = conv_out(in_shape, p.kernel.shape()[0], p.stride, p.padding)?;
            let l = p.kernel.shape()[0] as u64;
            let n = p.kernel.shape()[2] as u64;
            let m = p.kernel.shape()[3] as u64;
            let st = (oh * ow) as u64;
            c.muls += l * l * m * n * st;
            c.adds += l * l * m * n * st + n * st;
        }
        LayerSpec::ConvDac(p) => {
            let (oh, ow) = conv_out(in_shape, p.kernel.shape()[0], p.stride, p.padding)?;
            let &[s_in, t_in, _] = in_shape else {
                return Err(DacError::shape("conv input", in_shape, &[]));
            };
            let l = p.kernel.shape()[0] as u64;
            let n = p.kernel.shape()[2] as u64;
            let m = p.kernel.shape()[3] as u64;
            let st = (oh * ow) as u64;
            // cached activation planes: one add per interior input position
            // per (output kernel, input channel)
            c.adds += m * n * (s_in * t_in) as u64;
            c.muls += l * l * m * n * st;
            c.adds += l * l * m * n * st + n * st;
        }
        LayerSpec::BatchNorm(p) => {
            let elems: u64 = in_shape.iter().product::<usize>() as u64;
            let ch = p.channels() as u64;
            // per channel: eps add and the reciprocal-sqrt scale multiply;
            // per element: subtract mean, multiply by scale, plus shift
            c.adds += ch + elems;
            c.muls += ch + elems;
            if p.beta.is_some() {
                c.adds += elems;
            }
        }
        LayerSpec::Relu | LayerSpec::Replicate { .. } | LayerSpec::ResidualBegin { .. } => {}
        LayerSpec::Bias { .. } => {
            c.adds += in_shape.iter().product::<usize>() as u64;
        }
        LayerSpec::Gap => {
            let &[s, t, ch] = in_shape else {
                return Err(DacError::shape("gap input", in_shape, &[]));
            };
            c.adds += (s * t * ch) as u64;
            c.muls += ch as u64;
        }
        LayerSpec::ResidualEnd => {
            c.adds += in_shape.iter().product::<usize>() as u64;
        }
    }
    Ok(c)
}

fn conv_out(in_shape: &[usize], l: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    let &[s, t, _] = in_shape else {
        return Err(DacError::shape("conv input", in_shape, &[]));
    };
    crate::ops::conv_output_hw(s, t, l, stride, padding)
}

// ---------------------------------------------------------------------------
// Whole-network report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    /// Closed-form count; zero for layers outside the formulas.
    pub flops_formula: u64,
    pub flops_instrumented: u64,
    pub weights: u64,
    /// True for dense/conv layers covered by the closed-form counts.
    pub covered: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OverheadRatios {
    pub flops: f64,
    pub weights: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub layers: Vec<LayerReport>,
    /// Formula total over covered (dense/conv) layers.
    pub total_flops_formula: u64,
    /// Instrumented total over covered layers.
    pub total_flops_instrumented: u64,
    /// Instrumented count of everything the formulas do not cover
    /// (batchnorm, pooling, residual adds, standalone biases).
    pub uncovered_flops_instrumented: u64,
    pub total_weights: u64,
    /// This network's formula totals over the totals of its standard
    /// counterpart (every DAC layer replaced by the standard layer of the
    /// same shape); 1.0 for DAC-free networks.
    pub dac_overhead_ratios: OverheadRatios,
}

impl ComplexityReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>16} {:>16} {:>12}\n",
            "layer", "flops(formula)", "flops(counted)", "weights"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<18} {:>16} {:>16} {:>12}\n",
                l.name,
                if l.covered {
                    l.flops_formula.to_string()
                } else {
                    "-".to_string()
                },
                l.flops_instrumented,
                l.weights
            ));
        }
        out.push_str(&format!(
            "total (covered)    {:>16} {:>16} {:>12}\n",
            self.total_flops_formula, self.total_flops_instrumented, self.total_weights
        ));
        out.push_str(&format!(
            "uncovered (bn/pool/residual/bias) instrumented flops: {}\n",
            self.uncovered_flops_instrumented
        ));
        out.push_str(&format!(
            "dac/std overhead: flops x{:.6}, weights x{:.6}\n",
            self.dac_overhead_ratios.flops, self.dac_overhead_ratios.weights
        ));
        out
    }
}

fn layer_formula(layer: &LayerSpec, in_shape: &[usize]) -> Result<Option<(u64, u64)>> {
    Ok(match layer {
        LayerSpec::DenseStd(p) => Some((
            flops_dense(UnitKind::Std, p.in_dim(), p.out_dim())?,
            weights_dense(UnitKind::Std, p.in_dim(), p.out_dim())?,
        )),
        LayerSpec::DenseDac(p) => Some((
            flops_dense(UnitKind::Dac, p.in_dim(), p.out_dim())?,
            weights_dense(UnitKind::Dac, p.in_dim(), p.out_dim())?,
        )),
        LayerSpec::ConvStd(p) => {
            let l = p.kernel.shape()[0];
            let (oh, ow) = conv_out(in_shape, l, p.stride, p.padding)?;
            let (n, m) = (p.kernel.shape()[2], p.kernel.shape()[3]);
            Some((
                flops_conv(UnitKind::Std, l, m, n, oh, ow)?,
                weights_conv(UnitKind::Std, l, m, n)?,
            ))
        }
        LayerSpec::ConvDac(p) => {
            let l = p.kernel.shape()[0];
            let (oh, ow) = conv_out(in_shape, l, p.stride, p.padding)?;
            let (n, m) = (p.kernel.shape()[2], p.kernel.shape()[3]);
            Some((
                flops_conv(UnitKind::Dac, l, m, n, oh, ow)?,
                weights_conv(UnitKind::Dac, l, m, n)?,
            ))
        }
        _ => None,
    })
}

/// Swaps every DAC layer for its standard counterpart of the same shape.
fn std_counterpart(layer: &LayerSpec) -> LayerSpec {
    use crate::layers::{Conv2dStdParams, DenseStdParams};
    use crate::tensor::Tensor;
    match layer {
        LayerSpec::DenseDac(p) => LayerSpec::DenseStd(
            DenseStdParams::new(
                p.weights.clone(),
                Tensor::zeros(vec![p.out_dim()]),
                p.out_activation,
            )
            .expect("shapes align"),
        ),
        LayerSpec::ConvDac(p) => LayerSpec::ConvStd(
            Conv2dStdParams::new(
                p.kernel.clone(),
                Tensor::zeros(vec![p.kernel.shape()[2]]),
                p.stride,
                p.padding,
                p.out_activation,
            )
            .expect("shapes align"),
        ),
        other => other.clone(),
    }
}

/// Walks the network, applying the per-layer closed-form counts and the
/// instrumented interpreter. `input_shape` excludes the batch axis.
pub fn model_report(net: &NetworkSpec, input_shape: &[usize]) -> Result<ComplexityReport> {
    let shapes = net.trace_shapes(input_shape)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut total_formula = 0u64;
    let mut total_instr = 0u64;
    let mut total_weights = 0u64;
    let mut uncovered = 0u64;

    let mut in_shape = input_shape.to_vec();
    for (idx, layer) in net.layers.iter().enumerate() {
        let counts = instrument_layer(layer, &in_shape)?;
        let formula = layer_formula(layer, &in_shape)?;
        let (flops_formula, weights, covered) = match formula {
            Some((f, w)) => (f, w, true),
            None => (0, 0, false),
        };
        if covered {
            total_formula += flops_formula;
            total_instr += counts.flops();
            total_weights += weights;
        } else {
            uncovered += counts.flops();
        }
        layers.push(LayerReport {
            name: format!("{idx:02}:{}", layer.kind()),
            kind: layer.kind().to_string(),
            flops_formula,
            flops_instrumented: counts.flops(),
            weights,
            covered,
        });
        in_shape = shapes[idx].clone();
    }

    // standard counterpart totals for the overhead ratios
    let mut std_formula = 0u64;
    let mut std_weights = 0u64;
    let mut in_shape = input_shape.to_vec();
    for (idx, layer) in net.layers.iter().enumerate() {
        let counterpart = std_counterpart(layer);
        if let Some((f, w)) = layer_formula(&counterpart, &in_shape)? {
            std_formula += f;
            std_weights += w;
        }
        in_shape = shapes[idx].clone();
    }

    Ok(ComplexityReport {
        layers,
        total_flops_formula: total_formula,
        total_flops_instrumented: total_instr,
        uncovered_flops_instrumented: uncovered,
        total_weights,
        dac_overhead_ratios: OverheadRatios {
            flops: total_formula as f64 / std_formula.max(1) as f64,
            weights: total_weights as f64 / std_weights.max(1) as f64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv2dDacParams, Conv2dStdParams, DenseDacParams, DenseStdParams};
    use crate::ops::Activation;
    use crate::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_flop_formulas() {
        assert_eq!(flops_dense(UnitKind::Std, 16, 32).unwrap(), 1056);
        assert_eq!(flops_dense(UnitKind::Dac, 16, 32).unwrap(), 1568);
        // about a 50% increase
        let ratio: f64 = 1568.0 / 1056.0;
        assert!((ratio - 1.485).abs() < 0.001, "{ratio}");
    }

    #[test]
    fn dense_weight_formulas() {
        assert_eq!(weights_dense(UnitKind::Std, 16, 32).unwrap(), 544);
        assert_eq!(weights_dense(UnitKind::Dac, 16, 32).unwrap(), 1056);
        assert_eq!(weights_dense(UnitKind::Std, 1, 1).unwrap(), 2);
        assert_eq!(weights_dense(UnitKind::Dac, 1, 1).unwrap(), 3);
        assert!(weights_dense(UnitKind::Std, 0, 1).is_err());
    }

    #[test]
    fn conv_flop_formulas() {
        assert_eq!(flops_conv(UnitKind::Std, 3, 16, 32, 8, 8).unwrap(), 591_872);
        assert_eq!(flops_conv(UnitKind::Dac, 3, 16, 32, 8, 8).unwrap(), 624_640);
        let ratio: f64 = 624_640.0 / 591_872.0;
        assert!((ratio - (1.0 + 1.0 / 18.0)).abs() < 1e-3, "{ratio}");
        assert!(flops_conv(UnitKind::Std, 2, 16, 32, 8, 8).is_err());
    }

    #[test]
    fn conv_weight_formulas() {
        assert_eq!(weights_conv(UnitKind::Std, 3, 16, 32).unwrap(), 4640);
        assert_eq!(weights_conv(UnitKind::Dac, 3, 16, 32).unwrap(), 5152);
        let ratio: f64 = 5152.0 / 4640.0;
        assert!((ratio - (1.0 + 1.0 / 9.0)).abs() < 2e-3, "{ratio}");
        assert!(weights_conv(UnitKind::Dac, 4, 16, 32).is_err());
    }

    #[test]
    fn overhead_limits() {
        // dense: flops ratio -> 1.5 and weights -> 2 as m grows
        let f_ratio = flops_dense(UnitKind::Dac, 1024, 7).unwrap() as f64
            / flops_dense(UnitKind::Std, 1024, 7).unwrap() as f64;
        assert!((f_ratio - 1.5).abs() < 0.001, "{f_ratio}");
        let w_ratio = weights_dense(UnitKind::Dac, 1024, 7).unwrap() as f64
            / weights_dense(UnitKind::Std, 1024, 7).unwrap() as f64;
        assert!((w_ratio - 2.0).abs() / 2.0 < 0.001, "{w_ratio}");

        // conv: ratios -> 1 + 1/(2 L^2) and 1 + 1/L^2 at m = 256, L = 3
        let f_ratio = flops_conv(UnitKind::Dac, 3, 256, 8, 5, 5).unwrap() as f64
            / flops_conv(UnitKind::Std, 3, 256, 8, 5, 5).unwrap() as f64;
        assert!((f_ratio - (1.0 + 1.0 / 18.0)).abs() < 0.005, "{f_ratio}");
        let w_ratio = weights_conv(UnitKind::Dac, 3, 256, 8).unwrap() as f64
            / weights_conv(UnitKind::Std, 3, 256, 8).unwrap() as f64;
        assert!((w_ratio - (1.0 + 1.0 / 9.0)).abs() < 0.005, "{w_ratio}");
    }

    #[test]
    fn formula_equals_instrumented_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let m = rng.random_range(1..24usize);
            let n = rng.random_range(1..24usize);

            let dense_std = LayerSpec::DenseStd(
                DenseStdParams::new(
                    Tensor::zeros(vec![n, m]),
                    Tensor::zeros(vec![n]),
                    Activation::Relu,
                )
                .unwrap(),
            );
            assert_eq!(
                instrument_layer(&dense_std, &[m]).unwrap().flops(),
                flops_dense(UnitKind::Std, m, n).unwrap()
            );

            let dense_dac = LayerSpec::DenseDac(
                DenseDacParams::new(
                    Tensor::zeros(vec![n, m]),
                    Tensor::zeros(vec![n, m]),
                    None,
                    Activation::None,
                )
                .unwrap(),
            );
            assert_eq!(
                instrument_layer(&dense_dac, &[m]).unwrap().flops(),
                flops_dense(UnitKind::Dac, m, n).unwrap()
            );

            // stride-1 same-padded convs: formula and executed count coincide
            let l = *[1usize, 3, 5].choose(&mut rng).unwrap();
            let s = rng.random_range(l..l + 9);
            let t = rng.random_range(l..l + 9);
            let conv_std = LayerSpec::ConvStd(
                Conv2dStdParams::new(
                    Tensor::zeros(vec![l, l, n, m]),
                    Tensor::zeros(vec![n]),
                    1,
                    Padding::Same,
                    Activation::None,
                )
                .unwrap(),
            );
            assert_eq!(
                instrument_layer(&conv_std, &[s, t, m]).unwrap().flops(),
                flops_conv(UnitKind::Std, l, m, n, s, t).unwrap()
            );

            let conv_dac = LayerSpec::ConvDac(
                Conv2dDacParams::new(
                    Tensor::zeros(vec![l, l, n, m]),
                    Tensor::zeros(vec![n, m]),
                    None,
                    1,
                    Padding::Same,
                    Activation::None,
                )
                .unwrap(),
            );
            assert_eq!(
                instrument_layer(&conv_dac, &[s, t, m]).unwrap().flops(),
                flops_conv(UnitKind::Dac, l, m, n, s, t).unwrap()
            );
        }
    }

    #[test]
    fn single_layer_report_matches_formulas() {
        let net = NetworkSpec::new(vec![LayerSpec::DenseStd(
            DenseStdParams::new(
                Tensor::zeros(vec![4, 9]),
                Tensor::zeros(vec![4]),
                Activation::None,
            )
            .unwrap(),
        )]);
        let report = model_report(&net, &[9]).unwrap();
        assert_eq!(
            report.total_flops_formula,
            flops_dense(UnitKind::Std, 9, 4).unwrap()
        );
        assert_eq!(
            report.total_weights,
            weights_dense(UnitKind::Std, 9, 4).unwrap()
        );
        assert_eq!(report.total_flops_formula, report.total_flops_instrumented);
        assert_eq!(report.dac_overhead_ratios.flops, 1.0);

        // totals equal sums of entries
        let sum: u64 = report
            .layers
            .iter()
            .filter(|l| l.covered)
            .map(|l| l.flops_formula)
            .sum();
        assert_eq!(sum, report.total_flops_formula);
    }

    #[test]
    fn dac_conv_report_counts_cached_planes() {
        let net = NetworkSpec::new(vec![LayerSpec::ConvDac(
            Conv2dDacParams::new(
                Tensor::zeros(vec![3, 3, 5, 2]),
                Tensor::zeros(vec![5, 2]),
                None,
                1,
                Padding::Same,
                Activation::None,
            )
            .unwrap(),
        )]);
        let report = model_report(&net, &[7, 7, 2]).unwrap();
        assert_eq!(
            report.total_flops_formula,
            flops_conv(UnitKind::Dac, 3, 2, 5, 7, 7).unwrap()
        );
        assert_eq!(report.total_flops_formula, report.total_flops_instrumented);
        let ratio = report.dac_overhead_ratios.flops;
        assert!(ratio > 1.0 && ratio < 1.1, "{ratio}");
    }
}
