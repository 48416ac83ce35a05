use dacnet_core::datasets;
use dacnet_core::layers::{DenseDacParams, DenseStdParams};
use dacnet_core::netspec::{LayerSpec, NetworkSpec};
use dacnet_core::training::*;
use dacnet_core::{Activation, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn net_mlp(seed: u64, hidden: usize, bias_spread: f64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dac = DenseDacParams::he_normal(2, hidden, &mut rng);
    if bias_spread > 0.0 {
        let n = dac.dac_biases.numel();
        dac.dac_biases = Tensor::new(
            vec![hidden, 2],
            (0..n).map(|_| rng.random_range(-bias_spread..bias_spread)).collect(),
        ).unwrap();
    }
    NetworkSpec::new(vec![
        LayerSpec::DenseDac(dac),
        LayerSpec::DenseStd(DenseStdParams::he_normal(hidden, 2, Activation::None, &mut rng)),
    ])
}

fn run(data: &datasets::Dataset, net: &mut NetworkSpec, lr: f64, iters: usize, seed: u64) -> (f64, f64) {
    let cfg = TrainConfig {
        base_lr: lr,
        lr_boundaries: vec![iters*3/5, iters*4/5],
        lr_decay: 0.1,
        momentum: 0.9,
        l2_kernel: 0.0,
        batch_size: data.splits.train.len().min(32),
        total_iters: iters,
        seed,
        precision: PrecisionConfig::F64,
        augmentation: Augmentation::None,
    };
    let h = train(net, data, &cfg).unwrap();
    let last = h.epochs.last().unwrap();
    let test_err = classification_error(net, data, &data.splits.test).unwrap();
    (last.train_err, test_err)
}

fn main() {
    let square = datasets::gen_square_dataset(1000, 1).unwrap();
    println!("== square ==");
    for hidden in [2usize, 4, 8] {
        for lr in [0.05, 0.1, 0.2] {
            for spread in [0.0, 0.5] {
                let mut ok = 0;
                for seed in 0..10u64 {
                    let mut net = net_mlp(seed, hidden, spread);
                    let (tr, te) = run(&square, &mut net, lr, 2000, seed);
                    if tr == 0.0 && te == 0.0 { ok += 1; }
                }
                println!("hidden={hidden} lr={lr} spread={spread}: {ok}/10 perfect");
            }
        }
    }
    println!("== three-point (mlp, centered) ==");
    let mut tp = datasets::gen_three_point_dataset();
    tp.normalize_with_train_stats();
    for hidden in [4usize, 8] {
        for lr in [0.05, 0.1] {
            for spread in [0.5, 1.0] {
                let mut ok = 0;
                for seed in 0..10u64 {
                    let mut net = net_mlp(seed, hidden, spread);
                    let (tr, _) = run(&tp, &mut net, lr, 1500, seed);
                    if tr == 0.0 { ok += 1; }
                }
                println!("hidden={hidden} lr={lr} spread={spread}: {ok}/10 perfect");
            }
        }
    }
}
