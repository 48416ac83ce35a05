use clap::Args;
use dacnet_core::complexity::model_report;
use dacnet_core::netspec::NetworkSpec;
use dacnet_core::resnet;

use crate::EXIT_OK;

use super::{fail, usage};

#[derive(Args)]
pub struct FlopsArgs {
    /// Preset name (resnet20, resnet20-dac, ...) or NetworkSpec file.
    #[arg(long)]
    pub model: String,

    /// Input shape `HxWxC` for image models, or a single integer for vector
    /// models.
    #[arg(long = "input-shape")]
    pub input_shape: String,

    /// Emit the report as JSON only.
    #[arg(long)]
    pub json: bool,
}

fn parse_shape(spec: &str) -> Option<Vec<usize>> {
    let parts: Vec<usize> = spec
        .split('x')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    (!parts.is_empty() && parts.iter().all(|&d| d > 0)).then_some(parts)
}

pub fn run(args: FlopsArgs) -> i32 {
    let Some(shape) = parse_shape(&args.input_shape) else {
        return usage(format!("bad --input-shape {:?}, expected HxWxC", args.input_shape));
    };
    let net = if let Some(mut cfg) = resnet::parse_preset(&args.model) {
        let &[h, w, c] = shape.as_slice() else {
            return usage("resnet presets need an HxWxC input shape");
        };
        cfg.input_shape = [h, w, c];
        match resnet::build_resnet(&cfg, 1) {
            Ok(net) => net,
            Err(e) => return fail(e),
        }
    } else {
        match NetworkSpec::load(std::path::Path::new(&args.model)) {
            Ok(net) => net,
            Err(e) => return usage(e),
        }
    };
    let report = match model_report(&net, &shape) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        print!("{}", report.render_text());
        println!("--- json ---");
        println!("{}", serde_json::to_string(&report).expect("json"));
    }
    EXIT_OK
}
