use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use gpam_core::model::{StackConfig, Task};
use gpam_lab::{parse_grid, run, ExperimentSpec, Kind};

#[derive(Debug, Parser)]
#[command(name = "gpam-lab", version, about = "Rank-collapse and gradient experiments for signed attention")]
struct Args {
    #[arg(long, value_enum)]
    kind: Kind,
    /// `key = value` stack config applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    lambda_pos: Option<f64>,
    #[arg(long)]
    lambda_neg: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    /// 256-wide, 4-head, 15-layer stacks.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// copy, markov (alias next-token-synthetic)
    #[arg(long)]
    task: Option<String>,
    /// `lp:ln,lp:ln,...`
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    seq_len: Option<usize>,
}

fn build_spec(args: &Args) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::new(args.kind, &args.out);
    if args.full_scale {
        spec.cfg = StackConfig::full_scale();
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        spec.cfg = StackConfig::parse_onto(spec.cfg.clone(), &text)?;
        let sets_init = text
            .lines()
            .filter_map(|l| l.split('#').next()?.split_once('='))
            .any(|(k, _)| k.trim() == "init_std");
        if sets_init {
            spec.init_std = Some(spec.cfg.init_std);
        }
    }
    spec.seed = args.seed;
    spec.cfg.seed = args.seed;
    if let Some(n) = args.layers {
        spec.cfg.n_layers = n;
    }
    if args.init_std.is_some() {
        spec.init_std = args.init_std;
    }
    spec.lambda_pos = args.lambda_pos;
    spec.lambda_neg = args.lambda_neg;
    macro_rules! copy_opt {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { spec.$f = v; })* };
    }
    copy_opt!(n_seeds, instances, repeats, steps, lr, seq_len);
    if let Some(t) = &args.task {
        spec.task = t.parse::<Task>()?;
    }
    if let Some(g) = &args.grid {
        spec.grid = Some(parse_grid(g)?);
    }
    Ok(spec)
}

fn configure_threads() -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("GPAM_LAB_THREADS") {
        let n: usize = v.parse().with_context(|| format!("GPAM_LAB_THREADS='{v}' is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn error_json(kind: &str, message: String, details: &[String]) -> String {
    serde_json::json!({ "error": kind, "message": message, "details": details }).to_string()
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = configure_threads().and_then(|_| build_spec(&args)).and_then(|spec| run(&spec));
    match result {
        Ok(report) => {
            for note in &report.notes {
                eprintln!("note: {note}");
            }
            for f in &report.files {
                println!("{}", f.display());
            }
            let code = report.exit_code();
            if code != 0 {
                let n = report.violations.len();
                eprintln!("{}", error_json("violations", format!("{n} check(s) failed"), &report.violations));
            }
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("{}", error_json("failure", format!("{e:#}"), &[]));
            ExitCode::from(1)
        }
    }
}
