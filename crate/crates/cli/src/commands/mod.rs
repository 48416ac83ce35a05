pub mod approx;
pub mod demo;
pub mod equiv;
pub mod flops;
pub mod train;

use dacnet_core::datasets::{self, Dataset};
use dacnet_core::netspec::NetworkSpec;
use dacnet_core::resnet;
use dacnet_core::Result;

use crate::{EXIT_RUNTIME, EXIT_USAGE};

/// Maps an error to the runtime-failure exit code after printing it.
pub fn fail(err: impl std::fmt::Display) -> i32 {
    eprintln!("error: {err}");
    EXIT_RUNTIME
}

pub fn usage(err: impl std::fmt::Display) -> i32 {
    eprintln!("usage error: {err}");
    EXIT_USAGE
}

/// Loads `synthetic:<name>` datasets or a CIFAR binary directory.
pub fn load_dataset(spec: &str, seed: u64) -> Result<Dataset> {
    if let Some(name) = spec.strip_prefix("synthetic:") {
        return match name {
            "square" => datasets::gen_square_dataset(2000, seed),
            "three-point" => Ok(datasets::gen_three_point_dataset()),
            "blobs" => datasets::gen_blobs(600, 3, 0.15, seed),
            "images10" => datasets::gen_class_image_dataset(2000, 10, 32, 3, 0.25, seed),
            other => Err(dacnet_core::DacError::InvalidConfig(format!(
                "unknown synthetic dataset {other:?} \
                 (try square, three-point, blobs, images10)"
            ))),
        };
    }
    let dir = std::path::Path::new(spec);
    if dir.join("data_batch_1.bin").exists() {
        datasets::load_cifar10_bin(dir, 0, seed)
    } else if dir.join("train.bin").exists() {
        datasets::load_cifar100_bin(dir, 0, seed)
    } else {
        Err(dacnet_core::DacError::InvalidConfig(format!(
            "{spec}: not a synthetic dataset name or a CIFAR binary directory"
        )))
    }
}

/// Builds a model from a preset name or loads a NetworkSpec file. Presets
/// adapt their class count and input shape to the dataset.
pub fn load_model(spec: &str, data: &Dataset, seed: u64) -> Result<NetworkSpec> {
    if let Some(mut cfg) = resnet::parse_preset(spec) {
        let shape = data.sample_shape();
        let &[h, w, c] = shape else {
            return Err(dacnet_core::DacError::InvalidConfig(format!(
                "preset {spec} needs image data [h,w,c], got sample shape {shape:?}"
            )));
        };
        cfg.input_shape = [h, w, c];
        cfg.num_classes = data.num_classes;
        return resnet::build_resnet(&cfg, seed);
    }
    match spec {
        "dac-mlp" | "mlp" => {
            use dacnet_core::layers::{DenseDacParams, DenseStdParams};
            use dacnet_core::netspec::LayerSpec;
            use dacnet_core::Activation;
            use rand::SeedableRng;
            let &[m] = data.sample_shape() else {
                return Err(dacnet_core::DacError::InvalidConfig(format!(
                    "preset {spec} needs vector data, got sample shape {:?}",
                    data.sample_shape()
                )));
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let hidden = 32;
            let first = if spec == "dac-mlp" {
                LayerSpec::DenseDac(DenseDacParams::he_normal(m, hidden, &mut rng))
            } else {
                LayerSpec::DenseStd(DenseStdParams::he_normal(
                    m,
                    hidden,
                    Activation::Relu,
                    &mut rng,
                ))
            };
            Ok(NetworkSpec::new(vec![
                first,
                LayerSpec::DenseStd(DenseStdParams::he_normal(
                    hidden,
                    data.num_classes,
                    Activation::None,
                    &mut rng,
                )),
            ]))
        }
        path => NetworkSpec::load(std::path::Path::new(path)),
    }
}
