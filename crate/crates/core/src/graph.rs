//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only record of operations over immutable tensors:
//! node inputs always precede the node, so the tape is a topological order of
//! the DAG by construction. `backward` walks it once in reverse.
//!
//! A graph is single-threaded during construction and backward. Recorded
//! tensors are never mutated; batch-level data parallelism happens inside the
//! kernels (over samples) and reduces in index order, so evaluation is
//! deterministic for any thread count.

use crate::error::{DacError, Result};
use crate::ops::{self, Activation, Padding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Numeric mode of a graph. `F32` emulates single-precision storage by
/// rounding every operation result to `f32`; it exists for the training
/// harness. All tests and the approximator use `F64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
pub enum Op {
    Leaf,
    Relu,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    Matmul,
    Conv2dRaw {
        stride: usize,
        padding: Padding,
    },
    DenseStd {
        act: Activation,
    },
    DenseDac {
        act: Activation,
        out_bias: bool,
    },
    Conv2dStd {
        stride: usize,
        padding: Padding,
        act: Activation,
        bias: bool,
    },
    Conv2dDac {
        stride: usize,
        padding: Padding,
        act: Activation,
        out_bias: bool,
    },
    BatchNorm {
        epsilon: f64,
        training: bool,
        shift: bool,
    },
    ChannelBias,
    Gap,
    ShortcutProject {
        stride: usize,
        out_channels: usize,
    },
    Replicate {
        factor: usize,
    },
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients produced by [`Graph::backward`], indexed by node id. Every
/// trainable parameter holds a gradient of its own shape (zero when the
/// parameter did not influence the loss); other leaf gradients are available
/// on request via [`Gradients::get`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, mut value: Tensor, trainable: bool) -> NodeId {
        if self.precision == Precision::F32 && !matches!(op, Op::Leaf) {
            value.round_to_f32();
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            trainable,
        });
        id
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        self.push(Op::Relu, vec![x], value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], value, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], value, false))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![x], value, false)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value, false)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean, vec![x], value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], value, false))
    }

    pub fn conv2d_raw(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let value = ops::conv2d_raw(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(Op::Conv2dRaw { stride, padding }, vec![x, w], value, false))
    }

    pub fn dense_std(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        act: Activation,
    ) -> Result<NodeId> {
        let value = ops::dense_std(self.value(x), self.value(w), self.value(bias), act)?;
        Ok(self.push(Op::DenseStd { act }, vec![x, w, bias], value, false))
    }

    pub fn dense_dac(
        &mut self,
        x: NodeId,
        w: NodeId,
        dac_biases: NodeId,
        out_bias: Option<NodeId>,
        act: Activation,
    ) -> Result<NodeId> {
        let value = ops::dense_dac(
            self.value(x),
            self.value(w),
            self.value(dac_biases),
            out_bias.map(|b| self.value(b)),
            act,
        )?;
        let mut inputs = vec![x, w, dac_biases];
        if let Some(b) = out_bias {
            inputs.push(b);
        }
        Ok(self.push(
            Op::DenseDac {
                act,
                out_bias: out_bias.is_some(),
            },
            inputs,
            value,
            false,
        ))
    }

    pub fn conv2d_std(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
        act: Activation,
    ) -> Result<NodeId> {
        let value = ops::conv2d_std(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            act,
        )?;
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(
            Op::Conv2dStd {
                stride,
                padding,
                act,
                bias: bias.is_some(),
            },
            inputs,
            value,
            false,
        ))
    }

    pub fn conv2d_dac(
        &mut self,
        x: NodeId,
        w: NodeId,
        dac_biases: NodeId,
        out_bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
        act: Activation,
    ) -> Result<NodeId> {
        let value = ops::conv2d_dac(
            self.value(x),
            self.value(w),
            self.value(dac_biases),
            out_bias.map(|b| self.value(b)),
            stride,
            padding,
            act,
        )?;
        let mut inputs = vec![x, w, dac_biases];
        if let Some(b) = out_bias {
            inputs.push(b);
        }
        Ok(self.push(
            Op::Conv2dDac {
                stride,
                padding,
                act,
                out_bias: out_bias.is_some(),
            },
            inputs,
            value,
            false,
        ))
    }

    /// In training mode batch statistics are used (and can be read back via
    /// [`ops::batch_stats`] for running-average updates); in inference mode
    /// `running` must point at mean/variance leaves.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: Option<NodeId>,
        running: Option<(NodeId, NodeId)>,
        epsilon: f64,
        training: bool,
    ) -> Result<NodeId> {
        let value = ops::batchnorm(
            self.value(x),
            self.value(gamma),
            beta.map(|b| self.value(b)),
            running.map(|(m, v)| (self.value(m), self.value(v))),
            epsilon,
            training,
        )?;
        let mut inputs = vec![x, gamma];
        if let Some(b) = beta {
            inputs.push(b);
        }
        if let Some((m, v)) = running {
            inputs.push(m);
            inputs.push(v);
        }
        Ok(self.push(
            Op::BatchNorm {
                epsilon,
                training,
                shift: beta.is_some(),
            },
            inputs,
            value,
            false,
        ))
    }

    pub fn channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::channel_bias(self.value(x), self.value(bias))?;
        Ok(self.push(Op::ChannelBias, vec![x, bias], value, false))
    }

    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::gap(self.value(x))?;
        Ok(self.push(Op::Gap, vec![x], value, false))
    }

    pub fn shortcut_project(
        &mut self,
        x: NodeId,
        stride: usize,
        out_channels: usize,
    ) -> Result<NodeId> {
        let value = ops::shortcut_project(self.value(x), stride, out_channels)?;
        Ok(self.push(
            Op::ShortcutProject {
                stride,
                out_channels,
            },
            vec![x],
            value,
            false,
        ))
    }

    pub fn replicate(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::replicate(self.value(x), factor)?;
        Ok(self.push(Op::Replicate { factor }, vec![x], value, false))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let value = ops::softmax_cross_entropy(self.value(logits), &labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { labels },
            vec![logits],
            value,
            false,
        ))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every node that
    /// feeds it. Trainable leaves always come back with a gradient tensor of
    /// their own shape, zero-filled when unused.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(DacError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contribs = self.op_backward(node, &dy)?;
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        *acc = acc.zip(&contrib, |a, b| a + b)?;
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Per-op gradient contributions, one slot per input (None = no gradient).
    fn op_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |i: usize| self.value(node.inputs[i]);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Relu => vec![Some(ops::relu_backward(val(0), dy))],
            Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
            Op::Mul => vec![
                Some(dy.zip(val(1), |g, b| g * b)?),
                Some(dy.zip(val(0), |g, a| g * a)?),
            ],
            Op::Scale(factor) => vec![Some(dy.map(|g| g * factor))],
            Op::Sum => {
                let g = dy.item()?;
                vec![Some(Tensor::full(val(0).shape().to_vec(), g))]
            }
            Op::Mean => {
                let g = dy.item()? / val(0).numel() as f64;
                vec![Some(Tensor::full(val(0).shape().to_vec(), g))]
            }
            Op::Matmul => {
                let (da, db) = ops::matmul_backward(val(0), val(1), dy)?;
                vec![Some(da), Some(db)]
            }
            Op::Conv2dRaw { stride, padding } => {
                let grads = ops::conv2d_std_backward(
                    val(0),
                    val(1),
                    None,
                    *stride,
                    *padding,
                    Activation::None,
                    dy,
                )?;
                vec![Some(grads.dx), Some(grads.dw)]
            }
            Op::DenseStd { act } => {
                let grads = ops::dense_std_backward(val(0), val(1), val(2), *act, dy)?;
                vec![Some(grads.dy), Some(grads.dw), Some(grads.dbias)]
            }
            Op::DenseDac { act, out_bias } => {
                let ob = out_bias.then(|| val(3));
                let grads = ops::dense_dac_backward(val(0), val(1), val(2), ob, *act, dy)?;
                let mut out = vec![Some(grads.dy), Some(grads.dw), Some(grads.ddac_biases)];
                if *out_bias {
                    out.push(grads.dout_bias);
                }
                out
            }
            Op::Conv2dStd {
                stride,
                padding,
                act,
                bias,
            } => {
                let b = bias.then(|| val(2));
                let grads =
                    ops::conv2d_std_backward(val(0), val(1), b, *stride, *padding, *act, dy)?;
                let mut out = vec![Some(grads.dx), Some(grads.dw)];
                if *bias {
                    out.push(grads.dbias);
                }
                out
            }
            Op::Conv2dDac {
                stride,
                padding,
                act,
                out_bias,
            } => {
                let ob = out_bias.then(|| val(3));
                let grads =
                    ops::conv2d_dac_backward(val(0), val(1), val(2), ob, *stride, *padding, *act, dy)?;
                let mut out = vec![Some(grads.dx), Some(grads.dw), Some(grads.ddac_biases)];
                if *out_bias {
                    out.push(grads.dout_bias);
                }
                out
            }
            Op::BatchNorm {
                epsilon,
                training,
                shift,
            } => {
                let beta = shift.then(|| val(2));
                let run_off = 2 + usize::from(*shift);
                let running = (node.inputs.len() > run_off)
                    .then(|| (val(run_off), val(run_off + 1)));
                let grads = ops::batchnorm_backward(
                    val(0),
                    val(1),
                    beta,
                    running,
                    *epsilon,
                    *training,
                    dy,
                )?;
                let mut out = vec![Some(grads.dx), Some(grads.dgamma)];
                if *shift {
                    out.push(grads.dbeta);
                }
                if running.is_some() {
                    out.push(None);
                    out.push(None);
                }
                out
            }
            Op::ChannelBias => {
                let (dx, db) = ops::channel_bias_backward(val(0), val(1), dy)?;
                vec![Some(dx), Some(db)]
            }
            Op::Gap => vec![Some(ops::gap_backward(val(0), dy)?)],
            Op::ShortcutProject {
                stride,
                out_channels,
            } => vec![Some(ops::shortcut_project_backward(
                val(0),
                *stride,
                *out_channels,
                dy,
            )?)],
            Op::Replicate { factor } => {
                vec![Some(ops::replicate_backward(val(0), *factor, dy)?)]
            }
            Op::SoftmaxCrossEntropy { labels } => {
                vec![Some(ops::softmax_cross_entropy_backward(
                    val(0),
                    labels,
                    dy.item()?,
                )?)]
            }
        })
    }
}

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`, over all coordinates. The relative
/// error denominator is `max(|analytic|, |numeric|, 1e-12)`.
///
/// `f` records a scalar-valued computation of a single tensor onto a graph.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(DacError::Contract(format!("grad_check requires h > 0, got {h}")));
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.input(t.clone());
        let out = f(&mut g, id)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let xid = g.param(x.clone());
    let out = f(&mut g, xid)?;
    if g.value(out).numel() != 1 {
        return Err(DacError::Contract(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    let mut grads = g.backward(out)?;
    let analytic = grads.take(xid).expect("parameter gradient");

    let mut max_rel = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.5]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn relu_gradient_of_sum() {
        // gradient of sum(relu(x)) at [-1, 2] is [0, 1]
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = g.relu(x);
        let loss = g.sum(y);
        let mut grads = g.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[0.0, 1.0]);

        let err = grad_check(
            |g, x| {
                let y = g.relu(x);
                Ok(g.sum(y))
            },
            &Tensor::from_vec(vec![-1.0, 2.0]),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relu grad check: {err}");
    }

    #[test]
    fn matmul_identity_and_selection() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = ops::matmul(&a, &Tensor::identity(2)).unwrap();
        assert_eq!(c.data(), a.data());

        let u = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        let c = ops::matmul(&u, &v).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let err = ops::matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_linear_and_quadratic() {
        // loss = sum(p) -> all ones
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![3.0, -1.0, 4.0]));
        let loss = g.sum(p);
        let mut grads = g.backward(loss).unwrap();
        assert_eq!(grads.take(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        // loss = sum(p*p) at [1, -2] -> [2, -4]
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, -2.0]));
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let mut grads = g.backward(loss).unwrap();
        assert_eq!(grads.take(p).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.relu(p);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param(Tensor::from_vec(vec![1.0]));
        let unused = g.param(Tensor::zeros(vec![2, 2]));
        let loss = g.sum(used);
        let mut grads = g.backward(loss).unwrap();
        let gz = grads.take(unused).unwrap();
        assert_eq!(gz.shape(), &[2, 2]);
        assert!(gz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_check_exact_linear() {
        let err = grad_check(
            |g, x| Ok(g.sum(x)),
            &Tensor::from_vec(vec![0.3, -0.8, 2.0]),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-10, "linear grad check should be exact: {err}");
    }

    #[test]
    fn grad_check_rejects_bad_h() {
        let r = grad_check(|g, x| Ok(g.sum(x)), &Tensor::from_vec(vec![1.0]), 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn deterministic_reevaluation() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(
            vec![2, 5, 5, 3],
            (0..150).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![3, 3, 4, 3],
            (0..108).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let a = ops::conv2d_raw(&x, &w, 1, Padding::Same).unwrap();
        let b = ops::conv2d_raw(&x, &w, 1, Padding::Same).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn f32_mode_rounds_results() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.input(Tensor::from_vec(vec![0.1, 0.2]));
        let y = g.add(x, x).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
