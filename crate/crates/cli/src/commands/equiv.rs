use clap::Args;
use dacnet_core::equivalence::{standard_to_preactivated_shared, ChainSpec};
use dacnet_core::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{EXIT_CRITERION, EXIT_OK};

use super::{fail, usage};

#[derive(Args)]
pub struct EquivArgs {
    /// Number of dense layers in the random standard chain.
    #[arg(long, default_value_t = 3)]
    pub layers: usize,

    /// Width of every layer.
    #[arg(long, default_value_t = 8)]
    pub width: usize,

    /// Number of random inputs to compare on.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,

    #[arg(long)]
    pub json: bool,
}

#[derive(Serialize, Deserialize)]
pub struct EquivReport {
    pub layers: usize,
    pub width: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_abs_deviation: f64,
    pub passed: bool,
}

pub fn run(args: EquivArgs, seed: u64) -> i32 {
    if args.layers == 0 || args.width == 0 || args.samples == 0 {
        return usage("layers, width, and samples must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_tensor = |shape: Vec<usize>| {
        let numel = shape.iter().product();
        Tensor::new(
            shape,
            (0..numel)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        )
        .expect("shape")
    };
    let layer_params: Vec<(Tensor, Tensor)> = (0..args.layers)
        .map(|_| {
            (
                rand_tensor(vec![args.width, args.width]),
                rand_tensor(vec![args.width]),
            )
        })
        .collect();
    let chain = match ChainSpec::standard(layer_params) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let rewritten = match standard_to_preactivated_shared(&chain) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let inputs = rand_tensor(vec![args.samples, args.width]);
    let deviation = match (chain.eval_standard(&inputs), rewritten.eval_preactivated_filtered(&inputs)) {
        (Ok(a), Ok(b)) => a.max_abs_diff(&b),
        (Err(e), _) | (_, Err(e)) => return fail(e),
    };
    let report = EquivReport {
        layers: args.layers,
        width: args.width,
        samples: args.samples,
        seed,
        max_abs_deviation: deviation,
        passed: deviation <= 1e-12,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        println!(
            "standard vs preactivated shared-bias rewrite over {} layers x {} inputs",
            report.layers, report.samples
        );
        println!("max abs deviation = {:e}", report.max_abs_deviation);
        println!("result = {}", if report.passed { "PASS" } else { "FAIL" });
    }
    if report.passed {
        EXIT_OK
    } else {
        EXIT_CRITERION
    }
}
