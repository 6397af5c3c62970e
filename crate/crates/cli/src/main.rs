use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mempi::runner::{self, RunConfig};
use mempi::Error;

/// Train and evaluate an abstaining memory policy on a simulated agent.
///
/// Any `--section.key=value` argument overrides the matching field of the
/// JSON config, e.g. `--stage2.group_size=8`. Top-level snake_case fields
/// work the same way: `--init_scale=0`.
#[derive(Parser, Debug)]
#[command(name = "mempi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the environment spec and the split experience bank.
    Gen(Common),
    /// Distill the bank into a policy.
    Stage1(Common),
    /// Refine the distilled policy against task outcomes.
    Stage2(Common),
    /// Compare base, retrieval and policy on the test contexts.
    Eval(Common),
    /// Run every ablation through stage 2 and evaluation.
    Ablate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// none | no-stage1-init | unified | no-structured-rollout | no-delta-gating | no-length-reward
    #[arg(long)]
    ablation: Option<String>,
    /// Policy checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of difficulty bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Same as `--ablation no-stage1-init`.
    #[arg(long)]
    no_stage1_init: bool,
}

/// Splits config overrides (`--a.b=v`, `--snake_case=v`) from the arguments
/// clap should see. Clap flags are kebab-case, so they never collide.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            Some((key, value)) if key.contains(['.', '_']) => overrides.push((key.to_string(), value.to_string())),
            _ => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn build_config(common: &Common, mut overrides: Vec<(String, String)>) -> mempi::Result<RunConfig> {
    let mut push = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(out) = &common.out {
        push("out_dir", serde_string(&out.to_string_lossy()));
    }
    if let Some(seed) = common.seed {
        push("seed", seed.to_string());
    }
    if let Some(w) = common.workers {
        push("workers", w.to_string());
    }
    if let Some(a) = &common.ablation {
        push("ablation", serde_string(a));
    }
    if common.no_stage1_init {
        push("ablation", serde_string("no-stage1-init"));
    }
    if let Some(c) = &common.checkpoint {
        push("checkpoint", serde_string(&c.to_string_lossy()));
    }
    if let Some(b) = common.bins {
        push("eval.n_bins", b.to_string());
    }
    runner::load_config(common.config.as_deref(), &overrides)
}

fn serde_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn print_json<T: serde::Serialize>(value: &T) -> mempi::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(command: &Command, overrides: Vec<(String, String)>) -> mempi::Result<()> {
    let common = match command {
        Command::Gen(c) | Command::Stage1(c) | Command::Stage2(c) | Command::Eval(c) | Command::Ablate(c) => c,
    };
    let cfg = build_config(common, overrides).map_err(|e| match e {
        Error::Config(_) | Error::UnknownName { .. } => e,
        other => Error::Config(other.to_string()),
    })?;
    match command {
        Command::Gen(_) => print_json(&runner::cmd_gen(&cfg)?),
        Command::Stage1(_) => print_json(&runner::cmd_stage1(&cfg)?),
        Command::Stage2(_) => print_json(&runner::cmd_stage2(&cfg)?),
        Command::Eval(_) => {
            let report = runner::cmd_eval(&cfg)?;
            print_json(&report.methods)
        }
        Command::Ablate(_) => {
            let rows = runner::cmd_ablate(&cfg)?;
            print!("{}", runner::ablation_csv(&rows));
            Ok(())
        }
    }
}

fn is_usage(err: &Error) -> bool {
    matches!(err, Error::Config(_) | Error::UnknownName { .. })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
