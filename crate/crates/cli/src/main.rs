use std::path::PathBuf;
use std::process::ExitCode;

use boxprior::commands;
use boxprior::config::RunConfig;
use boxprior::trainer::LossWeights;
use boxprior::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boxprior", version, about = "Box-supervised 3D segmentation with geometric and contrastive priors")]
struct Cli {
    /// TOML run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `loss.weights` as `ori,geo,cons`.
    #[arg(long, global = true, value_parser = parse_weights)]
    weights: Option<LossWeights>,
    /// Overrides `check.filter`.
    #[arg(long, global = true)]
    filter: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image, ground truth, box and template.
    Generate,
    /// Pre-train the embedding head on a generated dataset.
    Pretrain,
    /// Optimise the mask on a generated dataset and write a report.
    Train,
    /// Compare a predicted mask volume with a ground-truth volume.
    Eval { pred: PathBuf, gt: PathBuf },
    /// Rigidly register a template point cloud onto a proposal cloud.
    Register { template: PathBuf, proposal: PathBuf },
    /// Chamfer distance between two point clouds.
    Chamfer { a: PathBuf, b: PathBuf },
    /// Run the oracle and gradient checks.
    Check,
}

fn parse_weights(s: &str) -> std::result::Result<LossWeights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [ori, geo, cons] => Ok(LossWeights { ori, geo, cons }),
        _ => Err(format!("expected three comma-separated weights, got {}", v.len())),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(w) = cli.weights {
        cfg.loss.weights = w;
    }
    if let Some(f) = &cli.filter {
        cfg.check.filter = Some(f.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BOXPRIOR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("BOXPRIOR_THREADS", format!("expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("BOXPRIOR_THREADS", e.to_string()))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialise")
}

fn run(cli: &Cli) -> Result<bool> {
    configure_threads()?;
    let cfg = load_config(cli)?;
    log::debug!("configuration:\n{}", cfg.to_toml());
    match &cli.command {
        Command::Generate => println!("{}", to_json(&commands::cmd_generate(&cfg)?)),
        Command::Pretrain => {
            commands::cmd_pretrain(&cfg)?;
            println!("wrote {}", cfg.out.join(commands::HEAD).display());
        }
        Command::Train => {
            let r = commands::cmd_train(&cfg)?;
            print!("{}", commands::metric_table(&r.measured.metrics));
            println!("wrote {}", cfg.out.join(commands::REPORT).display());
        }
        Command::Eval { pred, gt } => print!("{}", commands::metric_table(&commands::cmd_eval(pred, gt)?)),
        Command::Register { template, proposal } => {
            let o = commands::cmd_register(&cfg, template, proposal)?;
            println!("{}", to_json(&o.transform));
            log::info!("{} iterations, converged: {}", o.iterations, o.converged);
        }
        Command::Chamfer { a, b } => println!("{}", commands::cmd_chamfer(a, b)?),
        Command::Check => {
            let out = commands::cmd_check(&cfg);
            for o in &out {
                println!("{o}");
            }
            let failed = out.iter().filter(|o| !o.passed).count();
            println!("{} checks, {failed} failed", out.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
