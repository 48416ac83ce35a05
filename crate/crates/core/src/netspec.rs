//! Serializable network description.
//!
//! A [`NetworkSpec`] is the IR shared by the builder, trainer, analyzer and
//! approximator: an ordered list of layers with their parameter tensors. It
//! serializes to a JSON document
//!
//! ```json
//! {"version": 1, "layers": [{"kind": "dense_dac", ...}, ...]}
//! ```
//!
//! Parameter tensors are stored as nested arrays inline, except tensors above
//! 1 MB which go to a little-endian binary sidecar (`<name>.blobs.bin`, shape
//! header per tensor) referenced as `{"blob": {"file": ..., "offset": ...}}`.
//! Serialization round-trips losslessly.
//!
//! A `dense_dac` layer carries either dense `weights`/`dac_biases` matrices or
//! a sparse `edges` list `[unit, input, weight, bias]`. The edge form permits
//! several edges between the same unit pair with different biases (input
//! replication inside the graph), which the emitted approximator networks use
//! in their final layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{DacError, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{
    self, BatchNormParams, Conv2dDacParams, Conv2dStdParams, DenseDacParams, DenseStdParams,
};
use crate::ops::{self, Activation, Padding};
use crate::tensor::Tensor;

pub const SPEC_VERSION: u32 = 1;

/// Tensors above this many bytes go to the binary sidecar.
pub const BLOB_THRESHOLD_BYTES: usize = 1 << 20;

/// One edge of a sparse DAC layer: `weight * relu(bias + y[input])`
/// contributed to `unit`. Multiple edges may share `(unit, input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DacEdge {
    pub unit: usize,
    pub input: usize,
    pub weight: f64,
    pub bias: f64,
}

/// Sparse DAC dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDacEdgesLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub edges: Vec<DacEdge>,
    pub out_bias: Option<Tensor>,
    pub out_activation: Activation,
}

impl DenseDacEdgesLayer {
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (batch, m) = match *y.shape() {
            [m] => (1, m),
            [b, m] => (b, m),
            _ => return Err(DacError::shape("dense input", y.shape(), &[self.in_dim])),
        };
        if m != self.in_dim {
            return Err(DacError::shape("dense input", y.shape(), &[self.in_dim]));
        }
        let n = self.out_dim;
        let mut out = vec![0.0; batch * n];
        for r in 0..batch {
            let yr = &y.data()[r * m..(r + 1) * m];
            let or = &mut out[r * n..(r + 1) * n];
            if let Some(b) = &self.out_bias {
                or.copy_from_slice(b.data());
            }
            for e in &self.edges {
                or[e.unit] += e.weight * ops::relu_scalar(e.bias + yr[e.input]);
            }
            if self.out_activation == Activation::Relu {
                for v in or.iter_mut() {
                    *v = ops::relu_scalar(*v);
                }
            }
        }
        let shape = if y.shape().len() == 1 {
            vec![n]
        } else {
            vec![batch, n]
        };
        Tensor::new(shape, out)
    }

    /// Number of incoming edges per unit.
    pub fn fan_in(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.out_dim];
        for e in &self.edges {
            counts[e.unit] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    DenseStd(DenseStdParams),
    DenseDac(DenseDacParams),
    DenseDacEdges(DenseDacEdgesLayer),
    ConvStd(Conv2dStdParams),
    ConvDac(Conv2dDacParams),
    BatchNorm(BatchNormParams),
    Relu,
    Bias { bias: Tensor },
    Gap,
    ResidualBegin { stride: usize, out_channels: usize },
    ResidualEnd,
    Replicate { factor: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::DenseStd(_) => "dense_std",
            LayerSpec::DenseDac(_) | LayerSpec::DenseDacEdges(_) => "dense_dac",
            LayerSpec::ConvStd(_) => "conv_std",
            LayerSpec::ConvDac(_) => "conv_dac",
            LayerSpec::BatchNorm(_) => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Bias { .. } => "bias",
            LayerSpec::Gap => "gap",
            LayerSpec::ResidualBegin { .. } => "residual_begin",
            LayerSpec::ResidualEnd => "residual_end",
            LayerSpec::Replicate { .. } => "replicate",
        }
    }

    /// Output shape for a given input shape (batch axis excluded).
    fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::DenseStd(p) => {
                expect_vec(in_shape, p.in_dim(), "dense_std")?;
                Ok(vec![p.out_dim()])
            }
            LayerSpec::DenseDac(p) => {
                expect_vec(in_shape, p.in_dim(), "dense_dac")?;
                Ok(vec![p.out_dim()])
            }
            LayerSpec::DenseDacEdges(p) => {
                expect_vec(in_shape, p.in_dim, "dense_dac")?;
                Ok(vec![p.out_dim])
            }
            LayerSpec::ConvStd(p) => conv_shape(in_shape, &p.kernel, p.stride, p.padding),
            LayerSpec::ConvDac(p) => conv_shape(in_shape, &p.kernel, p.stride, p.padding),
            LayerSpec::BatchNorm(p) => {
                expect_channels(in_shape, p.channels(), "batchnorm")?;
                Ok(in_shape.to_vec())
            }
            LayerSpec::Relu => Ok(in_shape.to_vec()),
            LayerSpec::Bias { bias } => {
                expect_channels(in_shape, bias.numel(), "bias")?;
                Ok(in_shape.to_vec())
            }
            LayerSpec::Gap => match *in_shape {
                [_, _, c] => Ok(vec![c]),
                _ => Err(DacError::shape("gap expects [s,t,c]", in_shape, &[])),
            },
            LayerSpec::ResidualBegin { .. } | LayerSpec::ResidualEnd => Ok(in_shape.to_vec()),
            LayerSpec::Replicate { factor } => {
                let mut s = in_shape.to_vec();
                let last = s
                    .last_mut()
                    .ok_or_else(|| DacError::Contract("replicate needs an axis".into()))?;
                *last *= factor;
                Ok(s)
            }
        }
    }
}

fn expect_vec(in_shape: &[usize], dim: usize, what: &str) -> Result<()> {
    if in_shape != [dim] {
        return Err(DacError::shape(format!("{what} input"), in_shape, &[dim]));
    }
    Ok(())
}

fn expect_channels(in_shape: &[usize], c: usize, what: &str) -> Result<()> {
    if in_shape.last() != Some(&c) {
        return Err(DacError::shape(format!("{what} channels"), in_shape, &[c]));
    }
    Ok(())
}

fn conv_shape(
    in_shape: &[usize],
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Vec<usize>> {
    let &[s, t, m] = in_shape else {
        return Err(DacError::shape("conv expects [s,t,m]", in_shape, kernel.shape()));
    };
    let l = kernel.shape()[0];
    let n = kernel.shape()[2];
    if kernel.shape()[3] != m {
        return Err(DacError::shape("conv channels", in_shape, kernel.shape()));
    }
    let (oh, ow) = ops::conv_output_hw(s, t, l, stride, padding)?;
    Ok(vec![oh, ow, n])
}

// ---------------------------------------------------------------------------
// Parameter bindings (for the trainer)
// ---------------------------------------------------------------------------

/// Regularization class of a parameter tensor. Only kernel weights receive
/// L2; DAC biases are never regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    DacBias,
    OutBias,
    BnScale,
    BnShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Weights,
    DacBiases,
    Bias,
    OutBias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBinding {
    pub layer: usize,
    pub slot: ParamSlot,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub version: u32,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            version: SPEC_VERSION,
            layers,
        }
    }

    /// Per-layer output shapes (batch axis excluded), checking consistency.
    pub fn trace_shapes(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = input_shape.to_vec();
        let mut stack: Vec<Vec<usize>> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::ResidualBegin {
                    stride,
                    out_channels,
                } => {
                    let &[s, t, _] = current.as_slice() else {
                        return Err(DacError::shape("residual expects [s,t,c]", &current, &[]));
                    };
                    stack.push(vec![s.div_ceil(*stride), t.div_ceil(*stride), *out_channels]);
                }
                LayerSpec::ResidualEnd => {
                    let saved = stack.pop().ok_or_else(|| {
                        DacError::Contract(format!("layer {idx}: residual_end without begin"))
                    })?;
                    if saved != current {
                        return Err(DacError::shape(
                            format!("layer {idx}: residual shapes"),
                            &saved,
                            &current,
                        ));
                    }
                }
                _ => {}
            }
            current = layer.out_shape(&current)?;
            shapes.push(current.clone());
        }
        if !stack.is_empty() {
            return Err(DacError::Contract("unterminated residual block".into()));
        }
        Ok(shapes)
    }

    /// Inference forward pass (batch normalization uses running statistics).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_mode(x, false)
    }

    /// Forward pass; `training` selects batch statistics inside batchnorm.
    pub fn forward_mode(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut current = x.clone();
        let mut stack: Vec<Tensor> = Vec::new();
        for layer in &self.layers {
            current = match layer {
                LayerSpec::DenseStd(p) => layers::dense_std_forward(p, &current)?,
                LayerSpec::DenseDac(p) => layers::dense_dac_forward(p, &current)?,
                LayerSpec::DenseDacEdges(p) => p.forward(&current)?,
                LayerSpec::ConvStd(p) => layers::conv2d_std_forward(p, &current)?,
                LayerSpec::ConvDac(p) => layers::conv2d_dac_forward(p, &current)?,
                LayerSpec::BatchNorm(p) => layers::batchnorm_forward(p, &current, training)?,
                LayerSpec::Relu => ops::relu(&current),
                LayerSpec::Bias { bias } => ops::channel_bias(&current, bias)?,
                LayerSpec::Gap => ops::gap(&current)?,
                LayerSpec::ResidualBegin {
                    stride,
                    out_channels,
                } => {
                    let shortcut =
                        if *stride == 1 && current.shape().last() == Some(out_channels) {
                            current.clone()
                        } else {
                            ops::shortcut_project(&current, *stride, *out_channels)?
                        };
                    stack.push(shortcut);
                    current
                }
                LayerSpec::ResidualEnd => {
                    let shortcut = stack
                        .pop()
                        .ok_or_else(|| DacError::Contract("residual_end without begin".into()))?;
                    current.zip(&shortcut, |a, b| a + b)?
                }
                LayerSpec::Replicate { factor } => ops::replicate(&current, *factor)?,
            };
        }
        Ok(current)
    }

    /// Evaluates the network on a single point given as a slice.
    pub fn eval_point(&self, x: &[f64]) -> Result<f64> {
        let out = self.forward(&Tensor::from_vec(x.to_vec()))?;
        out.item()
    }

    /// Trainable parameters in canonical order.
    pub fn collect_params(&self) -> Vec<(ParamBinding, Tensor)> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut push = |slot, kind, t: &Tensor| {
                out.push((
                    ParamBinding {
                        layer: idx,
                        slot,
                        kind,
                    },
                    t.clone(),
                ))
            };
            match layer {
                LayerSpec::DenseStd(p) => {
                    push(ParamSlot::Weights, ParamKind::Kernel, &p.weights);
                    push(ParamSlot::Bias, ParamKind::OutBias, &p.bias);
                }
                LayerSpec::DenseDac(p) => {
                    push(ParamSlot::Weights, ParamKind::Kernel, &p.weights);
                    push(ParamSlot::DacBiases, ParamKind::DacBias, &p.dac_biases);
                    if let Some(b) = &p.out_bias {
                        push(ParamSlot::OutBias, ParamKind::OutBias, b);
                    }
                }
                LayerSpec::ConvStd(p) => {
                    push(ParamSlot::Weights, ParamKind::Kernel, &p.kernel);
                    push(ParamSlot::Bias, ParamKind::OutBias, &p.bias);
                }
                LayerSpec::ConvDac(p) => {
                    push(ParamSlot::Weights, ParamKind::Kernel, &p.kernel);
                    push(ParamSlot::DacBiases, ParamKind::DacBias, &p.dac_biases);
                    if let Some(b) = &p.out_bias {
                        push(ParamSlot::OutBias, ParamKind::OutBias, b);
                    }
                }
                LayerSpec::BatchNorm(p) => {
                    push(ParamSlot::Gamma, ParamKind::BnScale, &p.gamma);
                    if let Some(b) = &p.beta {
                        push(ParamSlot::Beta, ParamKind::BnShift, b);
                    }
                }
                LayerSpec::Bias { bias } => {
                    push(ParamSlot::Bias, ParamKind::OutBias, bias);
                }
                LayerSpec::DenseDacEdges(_)
                | LayerSpec::Relu
                | LayerSpec::Gap
                | LayerSpec::ResidualBegin { .. }
                | LayerSpec::ResidualEnd
                | LayerSpec::Replicate { .. } => {}
            }
        }
        out
    }

    pub fn set_param(&mut self, binding: ParamBinding, value: Tensor) -> Result<()> {
        let layer = self
            .layers
            .get_mut(binding.layer)
            .ok_or_else(|| DacError::Contract(format!("no layer {}", binding.layer)))?;
        let slot: &mut Tensor = match (layer, binding.slot) {
            (LayerSpec::DenseStd(p), ParamSlot::Weights) => &mut p.weights,
            (LayerSpec::DenseStd(p), ParamSlot::Bias) => &mut p.bias,
            (LayerSpec::DenseDac(p), ParamSlot::Weights) => &mut p.weights,
            (LayerSpec::DenseDac(p), ParamSlot::DacBiases) => &mut p.dac_biases,
            (LayerSpec::DenseDac(p), ParamSlot::OutBias) => p
                .out_bias
                .as_mut()
                .ok_or_else(|| DacError::Contract("layer has no out_bias".into()))?,
            (LayerSpec::ConvStd(p), ParamSlot::Weights) => &mut p.kernel,
            (LayerSpec::ConvStd(p), ParamSlot::Bias) => &mut p.bias,
            (LayerSpec::ConvDac(p), ParamSlot::Weights) => &mut p.kernel,
            (LayerSpec::ConvDac(p), ParamSlot::DacBiases) => &mut p.dac_biases,
            (LayerSpec::ConvDac(p), ParamSlot::OutBias) => p
                .out_bias
                .as_mut()
                .ok_or_else(|| DacError::Contract("layer has no out_bias".into()))?,
            (LayerSpec::BatchNorm(p), ParamSlot::Gamma) => &mut p.gamma,
            (LayerSpec::BatchNorm(p), ParamSlot::Beta) => p
                .beta
                .as_mut()
                .ok_or_else(|| DacError::Contract("batchnorm has no beta".into()))?,
            (LayerSpec::Bias { bias }, ParamSlot::Bias) => bias,
            _ => return Err(DacError::Contract("binding does not match layer".into())),
        };
        if slot.shape() != value.shape() {
            return Err(DacError::shape("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Total number of stored parameter scalars (an edge counts its weight
    /// and bias).
    pub fn weight_count(&self) -> usize {
        let mut total = 0;
        for layer in &self.layers {
            total += match layer {
                LayerSpec::DenseStd(p) => p.weights.numel() + p.bias.numel(),
                LayerSpec::DenseDac(p) => {
                    p.weights.numel()
                        + p.dac_biases.numel()
                        + p.out_bias.as_ref().map_or(0, Tensor::numel)
                }
                LayerSpec::DenseDacEdges(p) => {
                    2 * p.edges.len() + p.out_bias.as_ref().map_or(0, Tensor::numel)
                }
                LayerSpec::ConvStd(p) => p.kernel.numel() + p.bias.numel(),
                LayerSpec::ConvDac(p) => {
                    p.kernel.numel()
                        + p.dac_biases.numel()
                        + p.out_bias.as_ref().map_or(0, Tensor::numel)
                }
                LayerSpec::BatchNorm(p) => {
                    p.gamma.numel() + p.beta.as_ref().map_or(0, Tensor::numel)
                }
                LayerSpec::Bias { bias } => bias.numel(),
                _ => 0,
            };
        }
        total
    }

    /// Records a training-mode forward pass on a graph. `params` must follow
    /// the order of [`NetworkSpec::collect_params`] (pass its tensors to train
    /// from the current optimizer state). Returns the output node, the
    /// parameter nodes (same order), and the batchnorm input nodes for
    /// running-statistics updates.
    pub fn record(&self, g: &mut Graph, x: NodeId, params: &[Tensor]) -> Result<Recording> {
        let bindings = self.collect_params();
        if bindings.len() != params.len() {
            return Err(DacError::Contract(format!(
                "expected {} parameter tensors, got {}",
                bindings.len(),
                params.len()
            )));
        }
        let mut param_nodes = Vec::with_capacity(params.len());
        for t in params {
            param_nodes.push(g.param(t.clone()));
        }
        // Group parameter nodes by layer in slot order.
        let mut by_layer: BTreeMap<usize, Vec<(ParamSlot, NodeId)>> = BTreeMap::new();
        for ((binding, _), node) in bindings.iter().zip(&param_nodes) {
            by_layer
                .entry(binding.layer)
                .or_default()
                .push((binding.slot, *node));
        }
        let slot = |layer: usize, s: ParamSlot| -> Option<NodeId> {
            by_layer
                .get(&layer)
                .and_then(|v| v.iter().find(|(sl, _)| *sl == s).map(|(_, n)| *n))
        };

        let mut current = x;
        let mut stack: Vec<NodeId> = Vec::new();
        let mut bn_inputs = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            current = match layer {
                LayerSpec::DenseStd(p) => {
                    let w = slot(idx, ParamSlot::Weights).expect("weights bound");
                    let b = slot(idx, ParamSlot::Bias).expect("bias bound");
                    g.dense_std(current, w, b, p.out_activation)?
                }
                LayerSpec::DenseDac(p) => {
                    let w = slot(idx, ParamSlot::Weights).expect("weights bound");
                    let d = slot(idx, ParamSlot::DacBiases).expect("dac biases bound");
                    let ob = slot(idx, ParamSlot::OutBias);
                    g.dense_dac(current, w, d, ob, p.out_activation)?
                }
                LayerSpec::DenseDacEdges(_) => {
                    return Err(DacError::Contract(
                        "edge-form DAC layers are inference-only".into(),
                    ))
                }
                LayerSpec::ConvStd(p) => {
                    let w = slot(idx, ParamSlot::Weights).expect("kernel bound");
                    let b = slot(idx, ParamSlot::Bias);
                    g.conv2d_std(current, w, b, p.stride, p.padding, p.out_activation)?
                }
                LayerSpec::ConvDac(p) => {
                    let w = slot(idx, ParamSlot::Weights).expect("kernel bound");
                    let d = slot(idx, ParamSlot::DacBiases).expect("dac biases bound");
                    let ob = slot(idx, ParamSlot::OutBias);
                    g.conv2d_dac(current, w, d, ob, p.stride, p.padding, p.out_activation)?
                }
                LayerSpec::BatchNorm(p) => {
                    let gamma = slot(idx, ParamSlot::Gamma).expect("gamma bound");
                    let beta = slot(idx, ParamSlot::Beta);
                    bn_inputs.push((idx, current));
                    g.batchnorm(current, gamma, beta, None, p.epsilon, true)?
                }
                LayerSpec::Relu => g.relu(current),
                LayerSpec::Bias { .. } => {
                    let b = slot(idx, ParamSlot::Bias).expect("bias bound");
                    g.channel_bias(current, b)?
                }
                LayerSpec::Gap => g.gap(current)?,
                LayerSpec::ResidualBegin {
                    stride,
                    out_channels,
                } => {
                    let cur_shape = g.value(current).shape().to_vec();
                    let shortcut = if *stride == 1 && cur_shape.last() == Some(out_channels) {
                        current
                    } else {
                        g.shortcut_project(current, *stride, *out_channels)?
                    };
                    stack.push(shortcut);
                    current
                }
                LayerSpec::ResidualEnd => {
                    let shortcut = stack
                        .pop()
                        .ok_or_else(|| DacError::Contract("residual_end without begin".into()))?;
                    g.add(current, shortcut)?
                }
                LayerSpec::Replicate { factor } => g.replicate(current, *factor)?,
            };
        }
        Ok(Recording {
            output: current,
            param_nodes,
            bn_inputs,
        })
    }

    // -- serialization ------------------------------------------------------

    pub fn to_json_value(&self) -> Value {
        let mut blobs = BlobWriter::disabled();
        self.json_with_blobs(&mut blobs)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("json")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s)?;
        Self::from_json_value(&v, &BlobReader::none())
    }

    /// Writes the JSON document; tensors above the blob threshold go to a
    /// `<stem>.blobs.bin` sidecar next to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("network");
        let blob_name = format!("{stem}.blobs.bin");
        let mut blobs = BlobWriter::new(blob_name.clone());
        let value = self.json_with_blobs(&mut blobs);
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(&value)?)?;
        if blobs.used() {
            let blob_path = path.with_file_name(blob_name);
            fs::write(blob_path, blobs.into_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        let dir = path.parent().map(PathBuf::from).unwrap_or_default();
        Self::from_json_value(&v, &BlobReader::in_dir(dir))
    }

    fn json_with_blobs(&self, blobs: &mut BlobWriter) -> Value {
        let layers: Vec<Value> = self
            .layers
            .iter()
            .map(|l| layer_to_json(l, blobs))
            .collect();
        json!({ "version": self.version, "layers": layers })
    }

    pub fn from_json_value(v: &Value, blobs: &BlobReader) -> Result<Self> {
        let version = v
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| DacError::Data("missing version".into()))? as u32;
        let layers_v = v
            .get("layers")
            .and_then(Value::as_array)
            .ok_or_else(|| DacError::Data("missing layers".into()))?;
        let mut layers = Vec::with_capacity(layers_v.len());
        for lv in layers_v {
            layers.push(layer_from_json(lv, blobs)?);
        }
        Ok(NetworkSpec { version, layers })
    }
}

pub struct Recording {
    pub output: NodeId,
    pub param_nodes: Vec<NodeId>,
    pub bn_inputs: Vec<(usize, NodeId)>,
}

// ---------------------------------------------------------------------------
// JSON encoding helpers
// ---------------------------------------------------------------------------

pub struct BlobWriter {
    file: Option<String>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn new(file: String) -> Self {
        BlobWriter {
            file: Some(file),
            bytes: Vec::new(),
        }
    }

    fn disabled() -> Self {
        BlobWriter {
            file: None,
            bytes: Vec::new(),
        }
    }

    fn used(&self) -> bool {
        !self.bytes.is_empty()
    }

    fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Encodes a tensor either inline as nested arrays or as a blob reference.
    fn tensor(&mut self, t: &Tensor) -> Value {
        match &self.file {
            Some(file) if t.numel() * 8 > BLOB_THRESHOLD_BYTES => {
                let offset = self.bytes.len() as u64;
                self.bytes
                    .extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
                for &d in t.shape() {
                    self.bytes.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    self.bytes.extend_from_slice(&v.to_le_bytes());
                }
                json!({ "blob": { "file": file, "offset": offset } })
            }
            _ => tensor_to_nested(t),
        }
    }
}

pub struct BlobReader {
    dir: Option<PathBuf>,
}

impl BlobReader {
    pub fn none() -> Self {
        BlobReader { dir: None }
    }

    pub fn in_dir(dir: PathBuf) -> Self {
        BlobReader { dir: Some(dir) }
    }

    fn read(&self, file: &str, offset: u64) -> Result<Tensor> {
        let dir = self
            .dir
            .as_ref()
            .ok_or_else(|| DacError::Data("blob reference without a base directory".into()))?;
        let bytes = fs::read(dir.join(file))?;
        let mut pos = offset as usize;
        let take_u64 = |pos: &mut usize| -> Result<u64> {
            let end = *pos + 8;
            let slice = bytes
                .get(*pos..end)
                .ok_or_else(|| DacError::Data("blob truncated".into()))?;
            *pos = end;
            Ok(u64::from_le_bytes(slice.try_into().unwrap()))
        };
        let ndim = take_u64(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u64(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let end = pos + 8;
            let slice = bytes
                .get(pos..end)
                .ok_or_else(|| DacError::Data("blob truncated".into()))?;
            pos = end;
            data.push(f64::from_le_bytes(slice.try_into().unwrap()));
        }
        Tensor::new(shape, data)
    }
}

fn tensor_to_nested(t: &Tensor) -> Value {
    fn build(shape: &[usize], data: &[f64]) -> Value {
        match shape {
            [] => json!(data[0]),
            [_] => Value::Array(data.iter().map(|&v| json!(v)).collect()),
            [first, rest @ ..] => {
                let chunk: usize = rest.iter().product();
                Value::Array(
                    (0..*first)
                        .map(|i| build(rest, &data[i * chunk..(i + 1) * chunk]))
                        .collect(),
                )
            }
        }
    }
    build(t.shape(), t.data())
}

fn tensor_from_json(v: &Value, expected: &[usize], blobs: &BlobReader) -> Result<Tensor> {
    if let Some(blob) = v.get("blob") {
        let file = blob
            .get("file")
            .and_then(Value::as_str)
            .ok_or_else(|| DacError::Data("blob file missing".into()))?;
        let offset = blob
            .get("offset")
            .and_then(Value::as_u64)
            .ok_or_else(|| DacError::Data("blob offset missing".into()))?;
        let t = blobs.read(file, offset)?;
        if t.shape() != expected {
            return Err(DacError::shape("blob tensor", t.shape(), expected));
        }
        return Ok(t);
    }
    fn collect(v: &Value, shape: &[usize], data: &mut Vec<f64>) -> Result<()> {
        match shape {
            [] => {
                data.push(
                    v.as_f64()
                        .ok_or_else(|| DacError::Data("expected a number".into()))?,
                );
                Ok(())
            }
            [first, rest @ ..] => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| DacError::Data("expected an array".into()))?;
                if arr.len() != *first {
                    return Err(DacError::Data(format!(
                        "expected {} entries, got {}",
                        first,
                        arr.len()
                    )));
                }
                for item in arr {
                    collect(item, rest, data)?;
                }
                Ok(())
            }
        }
    }
    let mut data = Vec::with_capacity(expected.iter().product());
    collect(v, expected, &mut data)?;
    Tensor::new(expected.to_vec(), data)
}

fn act_to_json(a: Activation) -> Value {
    match a {
        Activation::None => json!("none"),
        Activation::Relu => json!("relu"),
    }
}

fn act_from_json(v: Option<&Value>) -> Result<Activation> {
    match v.and_then(Value::as_str) {
        Some("none") | None => Ok(Activation::None),
        Some("relu") => Ok(Activation::Relu),
        Some(other) => Err(DacError::Data(format!("unknown activation {other:?}"))),
    }
}

fn padding_to_json(p: Padding) -> Value {
    match p {
        Padding::Same => json!("same"),
        Padding::Valid => json!("valid"),
    }
}

fn padding_from_json(v: Option<&Value>) -> Result<Padding> {
    match v.and_then(Value::as_str) {
        Some("same") => Ok(Padding::Same),
        Some("valid") => Ok(Padding::Valid),
        other => Err(DacError::Data(format!("unknown padding {other:?}"))),
    }
}

fn opt_tensor_to_json(t: &Option<Tensor>, blobs: &mut BlobWriter) -> Value {
    match t {
        Some(t) => blobs.tensor(t),
        None => Value::Null,
    }
}

fn layer_to_json(layer: &LayerSpec, blobs: &mut BlobWriter) -> Value {
    match layer {
        LayerSpec::DenseStd(p) => json!({
            "kind": "dense_std",
            "in_dim": p.in_dim(),
            "out_dim": p.out_dim(),
            "activation": act_to_json(p.out_activation),
            "weights": blobs.tensor(&p.weights),
            "bias": blobs.tensor(&p.bias),
        }),
        LayerSpec::DenseDac(p) => json!({
            "kind": "dense_dac",
            "in_dim": p.in_dim(),
            "out_dim": p.out_dim(),
            "activation": act_to_json(p.out_activation),
            "weights": blobs.tensor(&p.weights),
            "dac_biases": blobs.tensor(&p.dac_biases),
            "out_bias": opt_tensor_to_json(&p.out_bias, blobs),
        }),
        LayerSpec::DenseDacEdges(p) => json!({
            "kind": "dense_dac",
            "in_dim": p.in_dim,
            "out_dim": p.out_dim,
            "activation": act_to_json(p.out_activation),
            "edges": p.edges.iter()
                .map(|e| json!([e.unit, e.input, e.weight, e.bias]))
                .collect::<Vec<_>>(),
            "out_bias": opt_tensor_to_json(&p.out_bias, blobs),
        }),
        LayerSpec::ConvStd(p) => json!({
            "kind": "conv_std",
            "kernel_size": p.kernel.shape()[0],
            "out_channels": p.kernel.shape()[2],
            "in_channels": p.kernel.shape()[3],
            "stride": p.stride,
            "padding": padding_to_json(p.padding),
            "activation": act_to_json(p.out_activation),
            "kernel": blobs.tensor(&p.kernel),
            "bias": blobs.tensor(&p.bias),
        }),
        LayerSpec::ConvDac(p) => json!({
            "kind": "conv_dac",
            "kernel_size": p.kernel.shape()[0],
            "out_channels": p.kernel.shape()[2],
            "in_channels": p.kernel.shape()[3],
            "stride": p.stride,
            "padding": padding_to_json(p.padding),
            "activation": act_to_json(p.out_activation),
            "kernel": blobs.tensor(&p.kernel),
            "dac_biases": blobs.tensor(&p.dac_biases),
            "out_bias": opt_tensor_to_json(&p.out_bias, blobs),
        }),
        LayerSpec::BatchNorm(p) => json!({
            "kind": "batchnorm",
            "channels": p.channels(),
            "epsilon": p.epsilon,
            "momentum": p.momentum,
            "gamma": blobs.tensor(&p.gamma),
            "beta": opt_tensor_to_json(&p.beta, blobs),
            "running_mean": blobs.tensor(&p.running_mean),
            "running_var": blobs.tensor(&p.running_var),
        }),
        LayerSpec::Relu => json!({ "kind": "relu" }),
        LayerSpec::Bias { bias } => json!({
            "kind": "bias",
            "channels": bias.numel(),
            "bias": blobs.tensor(bias),
        }),
        LayerSpec::Gap => json!({ "kind": "gap" }),
        LayerSpec::ResidualBegin {
            stride,
            out_channels,
        } => json!({
            "kind": "residual_begin",
            "stride": stride,
            "out_channels": out_channels,
        }),
        LayerSpec::ResidualEnd => json!({ "kind": "residual_end" }),
        LayerSpec::Replicate { factor } => json!({ "kind": "replicate", "factor": factor }),
    }
}

fn get_usize(v: &Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(Value::as_u64)
        .map(|u| u as usize)
        .ok_or_else(|| DacError::Data(format!("missing field {key}")))
}

fn get_f64(v: &Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| DacError::Data(format!("missing field {key}")))
}

fn opt_tensor_from_json(
    v: Option<&Value>,
    expected: &[usize],
    blobs: &BlobReader,
) -> Result<Option<Tensor>> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(t) => Ok(Some(tensor_from_json(t, expected, blobs)?)),
    }
}

fn layer_from_json(v: &Value, blobs: &BlobReader) -> Result<LayerSpec> {
    let kind = v
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| DacError::Data("layer missing kind".into()))?;
    Ok(match kind {
        "dense_std" => {
            let m = get_usize(v, "in_dim")?;
            let n = get_usize(v, "out_dim")?;
            LayerSpec::DenseStd(DenseStdParams::new(
                tensor_from_json(
                    v.get("weights")
                        .ok_or_else(|| DacError::Data("weights".into()))?,
                    &[n, m],
                    blobs,
                )?,
                tensor_from_json(
                    v.get("bias").ok_or_else(|| DacError::Data("bias".into()))?,
                    &[n],
                    blobs,
                )?,
                act_from_json(v.get("activation"))?,
            )?)
        }
        "dense_dac" => {
            let m = get_usize(v, "in_dim")?;
            let n = get_usize(v, "out_dim")?;
            let act = act_from_json(v.get("activation"))?;
            let out_bias = opt_tensor_from_json(v.get("out_bias"), &[n], blobs)?;
            if let Some(edges_v) = v.get("edges") {
                let arr = edges_v
                    .as_array()
                    .ok_or_else(|| DacError::Data("edges must be an array".into()))?;
                let mut edges = Vec::with_capacity(arr.len());
                for e in arr {
                    let quad = e
                        .as_array()
                        .filter(|a| a.len() == 4)
                        .ok_or_else(|| DacError::Data("edge must be [unit,input,w,b]".into()))?;
                    let unit = quad[0]
                        .as_u64()
                        .ok_or_else(|| DacError::Data("edge unit".into()))?
                        as usize;
                    let input = quad[1]
                        .as_u64()
                        .ok_or_else(|| DacError::Data("edge input".into()))?
                        as usize;
                    if unit >= n || input >= m {
                        return Err(DacError::Data(format!(
                            "edge ({unit},{input}) out of range ({n},{m})"
                        )));
                    }
                    edges.push(DacEdge {
                        unit,
                        input,
                        weight: quad[2]
                            .as_f64()
                            .ok_or_else(|| DacError::Data("edge weight".into()))?,
                        bias: quad[3]
                            .as_f64()
                            .ok_or_else(|| DacError::Data("edge bias".into()))?,
                    });
                }
                LayerSpec::DenseDacEdges(DenseDacEdgesLayer {
                    in_dim: m,
                    out_dim: n,
                    edges,
                    out_bias,
                    out_activation: act,
                })
            } else {
                LayerSpec::DenseDac(DenseDacParams::new(
                    tensor_from_json(
                        v.get("weights")
                            .ok_or_else(|| DacError::Data("weights".into()))?,
                        &[n, m],
                        blobs,
                    )?,
                    tensor_from_json(
                        v.get("dac_biases")
                            .ok_or_else(|| DacError::Data("dac_biases".into()))?,
                        &[n, m],
                        blobs,
                    )?,
                    out_bias,
                    act,
                )?)
            }
        }
        "conv_std" | "conv_dac" => {
            let l = get_usize(v, "kernel_size")?;
            let n = get_usize(v, "out_channels")?;
            let m = get_usize(v, "in_channels")?;
            let kernel = tensor_from_json(
                v.get("kernel")
                    .ok_or_else(|| DacError::Data("kernel".into()))?,
                &[l, l, n, m],
                blobs,
            )?;
            let stride = get_usize(v, "stride")?;
            let padding = padding_from_json(v.get("padding"))?;
            let act = act_from_json(v.get("activation"))?;
            if kind == "conv_std" {
                LayerSpec::ConvStd(Conv2dStdParams::new(
                    kernel,
                    tensor_from_json(
                        v.get("bias").ok_or_else(|| DacError::Data("bias".into()))?,
                        &[n],
                        blobs,
                    )?,
                    stride,
                    padding,
                    act,
                )?)
            } else {
                LayerSpec::ConvDac(Conv2dDacParams::new(
                    kernel,
                    tensor_from_json(
                        v.get("dac_biases")
                            .ok_or_else(|| DacError::Data("dac_biases".into()))?,
                        &[n, m],
                        blobs,
                    )?,
                    opt_tensor_from_json(v.get("out_bias"), &[n], blobs)?,
                    stride,
                    padding,
                    act,
                )?)
            }
        }
        "batchnorm" => {
            let c = get_usize(v, "channels")?;
            LayerSpec::BatchNorm(BatchNormParams {
                gamma: tensor_from_json(
                    v.get("gamma")
                        .ok_or_else(|| DacError::Data("gamma".into()))?,
                    &[c],
                    blobs,
                )?,
                beta: opt_tensor_from_json(v.get("beta"), &[c], blobs)?,
                running_mean: tensor_from_json(
                    v.get("running_mean")
                        .ok_or_else(|| DacError::Data("running_mean".into()))?,
                    &[c],
                    blobs,
                )?,
                running_var: tensor_from_json(
                    v.get("running_var")
                        .ok_or_else(|| DacError::Data("running_var".into()))?,
                    &[c],
                    blobs,
                )?,
                epsilon: get_f64(v, "epsilon")?,
                momentum: get_f64(v, "momentum")?,
            })
        }
        "relu" => LayerSpec::Relu,
        "bias" => {
            let c = get_usize(v, "channels")?;
            LayerSpec::Bias {
                bias: tensor_from_json(
                    v.get("bias").ok_or_else(|| DacError::Data("bias".into()))?,
                    &[c],
                    blobs,
                )?,
            }
        }
        "gap" => LayerSpec::Gap,
        "residual_begin" => LayerSpec::ResidualBegin {
            stride: get_usize(v, "stride")?,
            out_channels: get_usize(v, "out_channels")?,
        },
        "residual_end" => LayerSpec::ResidualEnd,
        "replicate" => LayerSpec::Replicate {
            factor: get_usize(v, "factor")?,
        },
        other => return Err(DacError::Data(format!("unknown layer kind {other:?}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_spec() -> NetworkSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        NetworkSpec::new(vec![
            LayerSpec::Replicate { factor: 2 },
            LayerSpec::DenseDac(DenseDacParams::he_normal(4, 3, &mut rng)),
            LayerSpec::DenseDacEdges(DenseDacEdgesLayer {
                in_dim: 3,
                out_dim: 1,
                edges: vec![
                    DacEdge {
                        unit: 0,
                        input: 0,
                        weight: 1.0,
                        bias: 0.5,
                    },
                    DacEdge {
                        unit: 0,
                        input: 0,
                        weight: -2.0,
                        bias: 0.0,
                    },
                    DacEdge {
                        unit: 0,
                        input: 2,
                        weight: 0.25,
                        bias: -0.5,
                    },
                ],
                out_bias: None,
                out_activation: Activation::None,
            }),
        ])
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let spec = sample_spec();
        let text = spec.to_json_string();
        let back = NetworkSpec::from_json_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn file_round_trip_with_blob_sidecar() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 200_000 doubles = 1.6 MB > threshold, forces the sidecar.
        let big = Tensor::new(
            vec![500, 400],
            (0..200_000).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let spec = NetworkSpec::new(vec![LayerSpec::DenseStd(
            DenseStdParams::new(big, Tensor::zeros(vec![500]), Activation::None).unwrap(),
        )]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        spec.save(&path).unwrap();
        assert!(dir.path().join("net.blobs.bin").exists());
        let back = NetworkSpec::load(&path).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn edge_layer_forward_supports_multi_edges() {
        let layer = DenseDacEdgesLayer {
            in_dim: 1,
            out_dim: 1,
            edges: vec![
                DacEdge {
                    unit: 0,
                    input: 0,
                    weight: 1.0,
                    bias: 1.0,
                },
                DacEdge {
                    unit: 0,
                    input: 0,
                    weight: -2.0,
                    bias: 0.0,
                },
                DacEdge {
                    unit: 0,
                    input: 0,
                    weight: 1.0,
                    bias: -1.0,
                },
            ],
            out_bias: None,
            out_activation: Activation::None,
        };
        // This is the 1-d spike: relu(1+x) - 2 relu(x) + relu(x-1).
        let at = |x: f64| {
            layer
                .forward(&Tensor::from_vec(vec![x]))
                .unwrap()
                .item()
                .unwrap()
        };
        assert_eq!(at(0.0), 1.0);
        assert_eq!(at(1.0), 0.0);
        assert_eq!(at(-1.0), 0.0);
        assert_eq!(at(0.5), 0.5);
    }

    #[test]
    fn trace_shapes_checks_consistency() {
        let spec = sample_spec();
        let shapes = spec.trace_shapes(&[2]).unwrap();
        assert_eq!(shapes, vec![vec![4], vec![3], vec![1]]);
        assert!(spec.trace_shapes(&[3]).is_err());
    }

    #[test]
    fn record_matches_forward() {
        let spec = sample_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(
            vec![5, 2],
            (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // The edge layer is inference-only, so record a spec without it.
        let spec = NetworkSpec::new(spec.layers[..2].to_vec());
        let params: Vec<Tensor> = spec.collect_params().into_iter().map(|(_, t)| t).collect();
        let mut g = Graph::new();
        let xid = g.input(x.clone());
        let rec = spec.record(&mut g, xid, &params).unwrap();
        let direct = spec.forward_mode(&x, true).unwrap();
        assert_eq!(g.value(rec.output).data(), direct.data());
    }
}
