//! CIFAR-style ResNet assembly (v1 post-activated, v2 preactivated; depths
//! 6n+2) and the DAC rewrite.
//!
//! The rewrite turns every 3x3 convolution into a DAC convolution without
//! output activation or bias, removes the ReLU that fed each such convolution
//! (the DAC edges activate their inputs themselves), and drops the trainable
//! shift of the batch normalization that feeds a DAC convolution. On v1 this
//! moves the activation off the information backbone, so a plain bias layer
//! and a ReLU are inserted after the last residual block, before global
//! average pooling. Shortcuts are identity with stride subsampling and
//! zero-padded channel growth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DacError, Result};
use crate::layers::{BatchNormParams, Conv2dDacParams, Conv2dStdParams, DenseStdParams};
use crate::netspec::{LayerSpec, NetworkSpec};
use crate::ops::{Activation, Padding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResNetVersion {
    V1,
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResNetConfig {
    pub version: ResNetVersion,
    /// Blocks per stage; depth is 6n + 2 (n = 3, 5, 7, 9 for 20..56 layers).
    pub n_blocks_per_stage: usize,
    pub num_classes: usize,
    pub dac: bool,
    /// `[height, width, channels]`.
    pub input_shape: [usize; 3],
}

impl ResNetConfig {
    pub fn depth(&self) -> usize {
        6 * self.n_blocks_per_stage + 2
    }

    fn validate(&self) -> Result<()> {
        if self.n_blocks_per_stage == 0 {
            return Err(DacError::InvalidConfig("blocks per stage must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(DacError::InvalidConfig("need at least two classes".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(DacError::InvalidConfig("input shape must be positive".into()));
        }
        Ok(())
    }
}

/// Parses preset names like `resnet20`, `resnet32-dac`, `resnet20-v2-dac`.
pub fn parse_preset(name: &str) -> Option<ResNetConfig> {
    let rest = name.strip_prefix("resnet")?;
    let mut parts = rest.split('-');
    let depth: usize = parts.next()?.parse().ok()?;
    if depth < 8 || (depth - 2) % 6 != 0 {
        return None;
    }
    let mut version = ResNetVersion::V1;
    let mut dac = false;
    for p in parts {
        match p {
            "v1" => version = ResNetVersion::V1,
            "v2" => version = ResNetVersion::V2,
            "dac" => dac = true,
            _ => return None,
        }
    }
    Some(ResNetConfig {
        version,
        n_blocks_per_stage: (depth - 2) / 6,
        num_classes: 10,
        dac,
        input_shape: [32, 32, 3],
    })
}

fn conv3(m: usize, n: usize, stride: usize, rng: &mut ChaCha8Rng) -> LayerSpec {
    LayerSpec::ConvStd(Conv2dStdParams::he_normal(
        3,
        m,
        n,
        stride,
        Padding::Same,
        Activation::None,
        rng,
    ))
}

fn bn(c: usize) -> LayerSpec {
    LayerSpec::BatchNorm(BatchNormParams::new(c, true))
}

/// Builds the CIFAR ResNet of the configuration. The DAC variant is the
/// rewrite applied to the standard construction, so both construction paths
/// agree structurally.
pub fn build_resnet(cfg: &ResNetConfig, seed: u64) -> Result<NetworkSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_blocks_per_stage;
    let mut layers: Vec<LayerSpec> = Vec::new();
    let stem_ch = 16;

    layers.push(conv3(cfg.input_shape[2], stem_ch, 1, &mut rng));
    match cfg.version {
        ResNetVersion::V1 => {
            layers.push(bn(stem_ch));
            layers.push(LayerSpec::Relu);
            let mut ch = stem_ch;
            for stage in 0..3 {
                let out_ch = stem_ch << stage;
                for block in 0..n {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    layers.push(LayerSpec::ResidualBegin {
                        stride,
                        out_channels: out_ch,
                    });
                    layers.push(conv3(ch, out_ch, stride, &mut rng));
                    layers.push(bn(out_ch));
                    layers.push(LayerSpec::Relu);
                    layers.push(conv3(out_ch, out_ch, 1, &mut rng));
                    layers.push(bn(out_ch));
                    layers.push(LayerSpec::ResidualEnd);
                    layers.push(LayerSpec::Relu);
                    ch = out_ch;
                }
            }
        }
        ResNetVersion::V2 => {
            let mut ch = stem_ch;
            for stage in 0..3 {
                let out_ch = stem_ch << stage;
                for block in 0..n {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    layers.push(LayerSpec::ResidualBegin {
                        stride,
                        out_channels: out_ch,
                    });
                    layers.push(bn(ch));
                    layers.push(LayerSpec::Relu);
                    layers.push(conv3(ch, out_ch, stride, &mut rng));
                    layers.push(bn(out_ch));
                    layers.push(LayerSpec::Relu);
                    layers.push(conv3(out_ch, out_ch, 1, &mut rng));
                    layers.push(LayerSpec::ResidualEnd);
                    ch = out_ch;
                }
            }
            layers.push(bn(ch));
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::Gap);
    layers.push(LayerSpec::DenseStd(DenseStdParams::he_normal(
        64,
        cfg.num_classes,
        Activation::None,
        &mut rng,
    )));

    let net = NetworkSpec::new(layers);
    let net = if cfg.dac { dacify(&net)? } else { net };
    let mut in_shape = cfg.input_shape.to_vec();
    net.trace_shapes(&in_shape)?;
    in_shape.clear();
    Ok(net)
}

/// True when the layer is a 3x3 convolution (standard or DAC).
fn is_conv3(layer: &LayerSpec) -> bool {
    match layer {
        LayerSpec::ConvStd(p) => p.kernel.shape()[0] == 3,
        LayerSpec::ConvDac(p) => p.kernel.shape()[0] == 3,
        _ => false,
    }
}

/// Applies the DAC rewrite to a recognized ResNet description; idempotent.
/// Refuses structures it does not recognize rather than guessing.
pub fn dacify(net: &NetworkSpec) -> Result<NetworkSpec> {
    // Recognition: balanced residual markers, a global average pooling head,
    // and only layer kinds a ResNet uses.
    let mut depth = 0i32;
    let mut has_gap = false;
    let mut blocks = 0;
    for layer in &net.layers {
        match layer {
            LayerSpec::ResidualBegin { .. } => {
                depth += 1;
                blocks += 1;
            }
            LayerSpec::ResidualEnd => {
                depth -= 1;
                if depth < 0 {
                    return Err(DacError::Contract(
                        "dacify: residual_end without begin".into(),
                    ));
                }
            }
            LayerSpec::Gap => has_gap = true,
            LayerSpec::ConvStd(_)
            | LayerSpec::ConvDac(_)
            | LayerSpec::BatchNorm(_)
            | LayerSpec::Relu
            | LayerSpec::Bias { .. }
            | LayerSpec::DenseStd(_) => {}
            other => {
                return Err(DacError::Contract(format!(
                    "dacify: unrecognized layer kind {:?} in a resnet description",
                    other.kind()
                )))
            }
        }
    }
    if depth != 0 || !has_gap || blocks == 0 {
        return Err(DacError::Contract(
            "dacify: not a recognizable resnet (needs residual blocks and a gap head)".into(),
        ));
    }

    let layers = &net.layers;
    let len = layers.len();

    // A ReLU is removed when the value it produces feeds a 3x3 convolution
    // (scanning past residual_begin, which only forks the value).
    let feeds_conv3 = |mut i: usize| -> bool {
        i += 1;
        while i < len {
            match &layers[i] {
                LayerSpec::ResidualBegin { .. } => i += 1,
                other => return is_conv3(other),
            }
        }
        false
    };
    // v1 tail: the post-add ReLU right before gap turns into bias + ReLU.
    let is_tail_relu = |i: usize| -> bool {
        i > 0
            && matches!(layers[i - 1], LayerSpec::ResidualEnd)
            && matches!(layers.get(i + 1), Some(LayerSpec::Gap))
    };
    // A batchnorm loses its shift when its output reaches a 3x3 convolution
    // through nothing but (removed) ReLUs and residual_begin markers.
    let bn_feeds_conv3 = |mut i: usize| -> bool {
        i += 1;
        while i < len {
            match &layers[i] {
                LayerSpec::Relu | LayerSpec::ResidualBegin { .. } => i += 1,
                other => return is_conv3(other),
            }
        }
        false
    };

    let mut out: Vec<LayerSpec> = Vec::with_capacity(len + 2);
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::ConvStd(p) if is_conv3(layer) => {
                let n = p.kernel.shape()[2];
                let m = p.kernel.shape()[3];
                out.push(LayerSpec::ConvDac(Conv2dDacParams::new(
                    p.kernel.clone(),
                    Tensor::zeros(vec![n, m]),
                    None,
                    p.stride,
                    p.padding,
                    Activation::None,
                )?));
            }
            LayerSpec::Relu if feeds_conv3(i) => {}
            LayerSpec::Relu if is_tail_relu(i) => {
                let channels = tail_channels(layers, i)?;
                out.push(LayerSpec::Bias {
                    bias: Tensor::zeros(vec![channels]),
                });
                out.push(LayerSpec::Relu);
            }
            LayerSpec::BatchNorm(p) if bn_feeds_conv3(i) && p.beta.is_some() => {
                let mut stripped = p.clone();
                stripped.beta = None;
                out.push(LayerSpec::BatchNorm(stripped));
            }
            other => out.push(other.clone()),
        }
    }
    Ok(NetworkSpec::new(out))
}

/// Channel count flowing into the v1 tail ReLU at index `i`.
fn tail_channels(layers: &[LayerSpec], i: usize) -> Result<usize> {
    for layer in layers[..i].iter().rev() {
        match layer {
            LayerSpec::BatchNorm(p) => return Ok(p.channels()),
            LayerSpec::ConvStd(p) => return Ok(p.kernel.shape()[2]),
            LayerSpec::ConvDac(p) => return Ok(p.kernel.shape()[2]),
            _ => {}
        }
    }
    Err(DacError::Contract("dacify: cannot infer tail channels".into()))
}
