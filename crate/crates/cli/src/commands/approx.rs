use std::path::PathBuf;

use clap::Args;
use dacnet_core::approximator::{
    approx_nd, dac_layer_widths, default_grid, named_function, select_params, sup_error,
    Certificate, TargetFn,
};
use dacnet_core::DacError;

use crate::{EXIT_CRITERION, EXIT_OK};

use super::{fail, usage};

#[derive(Args)]
pub struct ApproxArgs {
    /// Target dimension d >= 1.
    #[arg(long)]
    pub dim: usize,

    /// Target function: a named target (sin_pi, product, abs_sum, linear,
    /// constant) or, for --dim 1, a CSV table `x,value` interpolated linearly.
    #[arg(long = "fn")]
    pub function: String,

    /// Sup-error budget (> 0).
    #[arg(long)]
    pub epsilon: f64,

    /// Where to write the emitted NetworkSpec (a .cert.txt lands next to it).
    #[arg(long)]
    pub emit: Option<PathBuf>,

    /// Print the certificate as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

fn table_target(path: &str) -> Result<Box<TargetFn>, DacError> {
    let text = std::fs::read_to_string(path)?;
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('x') {
            continue;
        }
        let mut parts = line.split(',');
        let x: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DacError::Data(format!("{path}:{}: bad x", no + 1)))?;
        let v: f64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DacError::Data(format!("{path}:{}: bad value", no + 1)))?;
        samples.push((x, v));
    }
    if samples.len() < 2 {
        return Err(DacError::Data(format!("{path}: need at least two samples")));
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Box::new(move |p: &[f64]| {
        let x = p[0];
        match samples.binary_search_by(|s| s.0.total_cmp(&x)) {
            Ok(i) => samples[i].1,
            Err(0) => samples[0].1,
            Err(i) if i >= samples.len() => samples[samples.len() - 1].1,
            Err(i) => {
                let (x0, v0) = samples[i - 1];
                let (x1, v1) = samples[i];
                v0 + (v1 - v0) * (x - x0) / (x1 - x0)
            }
        }
    }))
}

pub fn run(args: ApproxArgs, _seed: u64) -> i32 {
    if args.epsilon <= 0.0 {
        return usage("epsilon must be > 0");
    }
    if args.dim < 1 {
        return usage("dim must be >= 1");
    }
    let target: Box<TargetFn> = match named_function(&args.function) {
        Some(f) => f,
        None if args.dim == 1 && std::path::Path::new(&args.function).exists() => {
            match table_target(&args.function) {
                Ok(f) => f,
                Err(e) => return usage(e),
            }
        }
        None => {
            return usage(format!(
                "unknown target {:?} (named targets: sin_pi, product, abs_sum, linear, constant)",
                args.function
            ))
        }
    };

    let (delta, mesh) = match select_params(&*target, args.dim, args.epsilon) {
        Ok(pair) => pair,
        Err(e @ DacError::Unreachable(_)) => {
            eprintln!("criterion unmet: {e}");
            return EXIT_CRITERION;
        }
        Err(e) => return fail(e),
    };
    let net = match approx_nd(&*target, args.dim, delta, mesh) {
        Ok(net) => net,
        Err(e) => return fail(e),
    };
    let grid = default_grid(args.dim);
    let err = match sup_error(&net, &*target, args.dim, grid) {
        Ok(err) => err,
        Err(e) => return fail(e),
    };
    let cert = Certificate {
        dim: args.dim,
        delta,
        mesh,
        cell_count: mesh.pow(args.dim as u32),
        layer_widths: dac_layer_widths(&net),
        sup_error: err,
        grid_points_per_axis: grid,
        epsilon: args.epsilon,
        passed: err < args.epsilon,
    };

    if let Some(path) = &args.emit {
        if let Err(e) = net.save(path) {
            return fail(e);
        }
        let cert_path = path.with_extension("cert.txt");
        if let Err(e) = std::fs::write(&cert_path, cert.render_text()) {
            return fail(e);
        }
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&cert).expect("json"));
    } else {
        print!("{}", cert.render_text());
    }
    if cert.passed {
        EXIT_OK
    } else {
        EXIT_CRITERION
    }
}
