use std::path::PathBuf;

use clap::Args;
use dacnet_core::training::{
    early_stop_estimate, train, Augmentation, ErrorRateEstimate, PrecisionConfig, TrainConfig,
    TrainHistory,
};
use serde::{Deserialize, Serialize};

use crate::EXIT_OK;

use super::{fail, load_dataset, load_model, usage};

#[derive(Args)]
pub struct TrainArgs {
    /// Preset (resnet20, resnet20-dac, ..., dac-mlp, mlp) or NetworkSpec file.
    #[arg(long)]
    pub model: String,

    /// `synthetic:<name>` (square, three-point, blobs, images10) or a CIFAR
    /// binary directory.
    #[arg(long)]
    pub data: String,

    /// JSON file with the full training configuration; overrides below apply
    /// on top.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory for history CSVs, the final model, and the summary.
    #[arg(long)]
    pub out: PathBuf,

    /// Number of replicate runs (5 enables the early-stopping estimate).
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,

    #[arg(long)]
    pub iters: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub json: bool,
}

#[derive(Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub data: String,
    pub replicates: usize,
    pub epochs: usize,
    pub final_train_err: f64,
    pub final_val_err: f64,
    pub final_test_err: f64,
    pub early_stop: Option<ErrorRateEstimate>,
}

fn desk_config(args: &TrainArgs, seed: u64) -> Result<TrainConfig, String> {
    let mut cfg = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str::<TrainConfig>(&text).map_err(|e| e.to_string())?
    } else {
        TrainConfig {
            seed,
            precision: PrecisionConfig::F64,
            augmentation: Augmentation::None,
            batch_size: 32,
            ..TrainConfig::default()
        }
        .scaled_to(2000)
    };
    if let Some(iters) = args.iters {
        cfg = cfg.scaled_to(iters);
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.base_lr = lr;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn run(args: TrainArgs, seed: u64) -> i32 {
    let data = match load_dataset(&args.data, seed) {
        Ok(d) => d,
        Err(e) => return usage(e),
    };
    let base_cfg = match desk_config(&args, seed) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        return fail(e);
    }

    let mut histories: Vec<TrainHistory> = Vec::new();
    let mut final_model = None;
    for r in 0..args.replicates.max(1) {
        let mut net = match load_model(&args.model, &data, seed + r as u64) {
            Ok(n) => n,
            Err(e) => return usage(e),
        };
        let mut cfg = base_cfg.clone();
        cfg.seed = seed + 101 * r as u64;
        let history = match train(&mut net, &data, &cfg) {
            Ok(h) => h,
            Err(e) => return fail(e),
        };
        let name = if args.replicates > 1 {
            format!("history_{r}.csv")
        } else {
            "history.csv".to_string()
        };
        if let Err(e) = history.write_csv(&args.out.join(name)) {
            return fail(e);
        }
        histories.push(history);
        if r == 0 {
            final_model = Some(net);
        }
    }

    if let Some(net) = &final_model {
        if let Err(e) = net.save(&args.out.join("model.json")) {
            return fail(e);
        }
    }

    let early_stop = if histories.len() >= 2 && histories[0].epochs.len() >= 5 {
        let val: Vec<Vec<f64>> = histories
            .iter()
            .map(|h| h.epochs.iter().map(|e| e.val_err).collect())
            .collect();
        let test: Vec<Vec<f64>> = histories
            .iter()
            .map(|h| h.epochs.iter().map(|e| e.test_err).collect())
            .collect();
        match early_stop_estimate(&val, &test) {
            Ok(est) => Some(est),
            Err(e) => return fail(e),
        }
    } else {
        None
    };

    let last = histories[0].epochs.last().expect("at least one epoch");
    let summary = TrainSummary {
        model: args.model.clone(),
        data: args.data.clone(),
        replicates: args.replicates.max(1),
        epochs: histories[0].epochs.len(),
        final_train_err: last.train_err,
        final_val_err: last.val_err,
        final_test_err: last.test_err,
        early_stop,
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("json");
    if let Err(e) = std::fs::write(args.out.join("summary.json"), &summary_json) {
        return fail(e);
    }
    let mut text = format!(
        "model = {}\ndata = {}\nreplicates = {}\nepochs = {}\n\
         final train err = {:.4}\nfinal val err = {:.4}\nfinal test err = {:.4}\n",
        summary.model,
        summary.data,
        summary.replicates,
        summary.epochs,
        summary.final_train_err,
        summary.final_val_err,
        summary.final_test_err,
    );
    if let Some(est) = &summary.early_stop {
        text.push_str(&format!(
            "early stopping: m = {}, T-bar = {:.4}, stderr = {:.5}\n",
            est.m,
            est.t_bar,
            est.std_err()
        ));
    }
    if let Err(e) = std::fs::write(args.out.join("summary.txt"), &text) {
        return fail(e);
    }
    if args.json {
        println!("{summary_json}");
    } else {
        print!("{text}");
    }
    EXIT_OK
}
