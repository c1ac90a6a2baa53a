//! quantlab: desk-scale laboratory for CNN quantization robustness.
//!
//! Exit codes: 0 success, 1 config error, 2 completed with divergence
//! flags, 3 I/O error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use quantlab::error::Error;

use quantlab_cli::commands::{self, Flags, Outcome};
use quantlab_cli::config;

#[derive(Parser)]
#[command(
    name = "quantlab",
    version,
    about = "Quantization robustness experiments: initializer studies and \
             graph hypernetworks over sampled CNN architectures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file merged over built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the command (study seed, sampler seed, schedule
    /// seed, or eval seed, depending on the command).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 (the default) is fully deterministic, 0 means
    /// all cores.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Also emit SVG plots where the command has any.
    #[arg(long)]
    plots: bool,
    /// Weight/activation bitwidths, e.g. 4/8. Narrows the study or eval
    /// to one setting, or sets the QAT bitwidths.
    #[arg(long, value_name = "W/A")]
    bits: Option<String>,
    /// ghn-train objective: fp32, qat:W/A, or qat-noise:W/A.
    #[arg(long)]
    mode: Option<String>,
    /// Config overrides, e.g. study.sched.epochs=2 or data.source=synthetic.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the architecture-variant x initializer grid and tabulate
    /// float vs quantized accuracy.
    InitStudy(Common),
    /// Sample the architecture dataset: train split plus held-out
    /// in-distribution, deep, wide, and BN-free splits.
    GenGraphs(Common),
    /// Train the graph hypernetwork (float finetuning or QAT).
    GhnTrain(Common),
    /// Evaluate a hypernetwork checkpoint across splits and bitwidths.
    GhnEval(Common),
    /// Re-emit tables and plots from a run directory's JSON artifacts.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::InitStudy(_) => "init-study",
            Command::GenGraphs(_) => "gen-graphs",
            Command::GhnTrain(_) => "ghn-train",
            Command::GhnEval(_) => "ghn-eval",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::InitStudy(c)
            | Command::GenGraphs(c)
            | Command::GhnTrain(c)
            | Command::GhnEval(c)
            | Command::Report(c) => c,
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn execute(cmd: &Command) -> quantlab::error::Result<Outcome> {
    let common = cmd.common();
    let cfg = config::resolve(common.config.as_deref(), &common.overrides)?;

    let threads = match common.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    quantlab::parallel::set_max_threads(threads);

    let default_out = match cmd {
        // The dataset must land where downstream commands look for it.
        Command::GenGraphs(_) => cfg.graphs.dir.clone(),
        _ => PathBuf::from("runs").join(cmd.name()),
    };
    let flags = Flags {
        out: common.out.clone().unwrap_or(default_out),
        threads,
        plots: common.plots,
        seed: common.seed,
        bits: common.bits.as_deref().map(config::parse_bits).transpose()?,
        mode: common.mode.clone(),
    };

    match cmd {
        Command::InitStudy(_) => commands::cmd_init_study(cfg, &flags),
        Command::GenGraphs(_) => commands::cmd_gen_graphs(cfg, &flags),
        Command::GhnTrain(_) => commands::cmd_ghn_train(cfg, &flags),
        Command::GhnEval(_) => commands::cmd_ghn_eval(cfg, &flags),
        Command::Report(_) => commands::cmd_report(cfg, &flags),
    }
}

fn main() {
    // Clap's own exit code for usage errors is 2, which this tool
    // reserves for divergence; fold usage problems into config errors.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            std::process::exit(1);
        }
        Err(e) => {
            let _ = e.print();
            std::process::exit(0);
        }
    };
    let code = match execute(&cli.command) {
        Ok(Outcome::Clean) => 0,
        Ok(Outcome::Flagged(msg)) => {
            eprintln!("completed with divergence flags: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
