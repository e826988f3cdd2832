use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualrate_cli::config::{parse_config_with, render_defaults, Command};
use dualrate_cli::pipeline::{run, RunError};

#[derive(Parser)]
#[command(name = "dualrate", version, about = "Dual-rate diffusion experiments on 2-D toy data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long = "K")]
        heavy: Option<usize>,
        #[arg(long = "k")]
        light: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "guidance-w")]
        guidance_w: Option<f64>,
        /// Also write the per-step trace to `<output_dir>/trace.csv`.
        #[arg(long = "trace-out")]
        trace_out: bool,
    },
    /// Distill a standard teacher into a dual-rate student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// standard | rollout
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long = "K")]
        heavy: Option<usize>,
        #[arg(long = "k")]
        light: Option<usize>,
    },
    /// Score a checkpoint.
    Eval(Common),
    /// Train and score every combination of the ablation grid.
    Ablate(Common),
    /// Print every config key with its default.
    Defaults,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    config: PathBuf,
    /// Extra `key=value` assignments applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn push<T: ToString>(over: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        over.push((key.to_string(), v.to_string()));
    }
}

fn execute(common: Common, command: Command, mut extra: Vec<(String, String)>) -> Result<(), RunError> {
    let text = std::fs::read_to_string(&common.config)?;
    let mut over = Vec::new();
    let declared = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "command")
        .map(|(_, v)| v.trim().to_string());
    match declared {
        Some(d) if d.parse::<Command>().ok() != Some(command) => {
            return Err(dualrate_cli::config::ConfigError::Value {
                key: "command".into(),
                message: format!("config declares `{d}` but `{command}` was invoked"),
            }
            .into());
        }
        Some(_) => {}
        None => over.push(("command".to_string(), command.to_string())),
    }
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| dualrate_cli::config::ConfigError::Syntax {
            line: 0,
            text: s.clone(),
        })?;
        over.push((k.trim().to_string(), v.trim().to_string()));
    }
    push(&mut over, "seed", common.seed);
    over.append(&mut extra);
    if let Ok(dir) = std::env::var("DUALRATE_OUT") {
        over.push(("output_dir".to_string(), dir));
    }
    let cfg = parse_config_with(&text, &over)?;
    let summary = run(&cfg)?;
    for (name, v) in &summary.metrics {
        println!("{name} = {v}");
    }
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Defaults => {
            print!("{}", render_defaults());
            Ok(())
        }
        Cmd::Train(c) => execute(c, Command::Train, vec![]),
        Cmd::Eval(c) => execute(c, Command::Eval, vec![]),
        Cmd::Ablate(c) => execute(c, Command::Ablate, vec![]),
        Cmd::Sample {
            common,
            heavy,
            light,
            n,
            guidance_w,
            trace_out,
        } => {
            let mut o = Vec::new();
            push(&mut o, "sample.heavy_steps", heavy);
            push(&mut o, "sample.light_steps", light);
            push(&mut o, "sample.n", n);
            push(&mut o, "sample.guidance", guidance_w);
            push(&mut o, "sample.trace", trace_out.then_some(true));
            execute(common, Command::Sample, o)
        }
        Cmd::Distill {
            common,
            variant,
            teacher,
            heavy,
            light,
        } => {
            let mut o = Vec::new();
            push(&mut o, "distill.variant", variant);
            push(&mut o, "distill.teacher", teacher.map(|p| p.display().to_string()));
            push(&mut o, "distill.heavy_steps", heavy);
            push(&mut o, "distill.light_steps", light);
            execute(common, Command::Distill, o)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
