use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tube_il::evalbench::Domain;
use tubeil_bench::{cmd_compare, cmd_eval, cmd_train, cmd_tube, EvalTarget, RunConfig, Session};

#[derive(Parser)]
#[command(name = "tubeil", version, about = "Tube-guided imitation learning benchmark")]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set il.epochs=10`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (overrides `output_dir`)
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads for parallel evaluation (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    T1,
    T2,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the disturbance tube and write artifacts/tube.json
    Tube,
    /// Collect demonstrations and train one policy per demonstration count
    Train,
    /// Evaluate a checkpoint or the expert in one domain
    Eval {
        #[arg(long, conflicts_with = "expert", required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
        /// Defaults to the configured target task
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
    },
    /// Run every configured method over all seeds and write the comparison table
    Compare,
    /// Print the resolved configuration
    Config,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool");
    }
    match run(cli.command, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, tubeil_bench::ConfigError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&cli.overrides)?;
    if let Some(o) = &cli.output {
        config.output_dir = o.clone();
    }
    Ok(config)
}

fn run(command: Command, config: RunConfig) -> anyhow::Result<()> {
    if let Command::Config = command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let session = Session::open(config)?;
    match command {
        Command::Tube => {
            cmd_tube(&session)?;
            let z = &session.expert.tube().z_box;
            for (i, (lo, hi)) in z.lower().iter().zip(z.upper()).enumerate() {
                println!("z[{i}] = [{lo:+.4}, {hi:+.4}]");
            }
        }
        Command::Train => {
            let r = cmd_train(&session)?;
            for c in &r.checkpoints {
                println!("demo {:2}  samples {:6}  loss {:.5}  {}", c.demo, c.dataset_size, c.final_loss, c.file);
            }
        }
        Command::Eval { checkpoint, expert, domain } => {
            let target = match (checkpoint, expert) {
                (Some(p), false) => EvalTarget::Checkpoint(p),
                _ => EvalTarget::Expert,
            };
            let domain = match domain {
                Some(DomainArg::Source) => Domain::Source,
                Some(DomainArg::T1) => Domain::TargetT1,
                Some(DomainArg::T2) => Domain::TargetT2,
                None => session.config.disturbance.task.domain(),
            };
            let r = cmd_eval(&session, &target, domain)?;
            println!("{} on {}: success {:.2}  mean cost {:.3}", r.controller, r.domain, r.success_rate, r.mean_stage_cost);
        }
        Command::Compare => {
            let t = cmd_compare(&session)?;
            for row in &t.rows {
                println!("{:18} {:10} demos {:2}  success {:.2}", row.method, row.domain, row.demos, row.success_rate);
            }
        }
        Command::Config => unreachable!(),
    }
    Ok(())
}
