use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use treecast_core::harness::{self, parse_assignment, parse_value, Command, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "treecast", version, about = "Broadcast-process experiments on d-ary trees")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Mutual information between the root and leaf subsets, by subset size.
    MiScan(Opts),
    /// Degree-restricted correlation with the root, by degree.
    LowdegScan(Opts),
    /// Root-recovery error rates of an estimator.
    RootAccuracy(Opts),
    /// Unknown-tree recovery from samples or exact moments.
    TreeReconstruct(Opts),
    /// Unknown-tree recovery through a VSTAT oracle.
    SqRun(Opts),
    /// Write a repeated-model dataset and its hidden state.
    Simulate(Opts),
}

#[derive(Args, Debug)]
struct Opts {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `example`, `bsc:<θ>`, `uniform:<q>` or a chain JSON file.
    #[arg(long)]
    chain: Option<String>,
    /// Branching factor(s), comma separated.
    #[arg(long)]
    d: Option<String>,
    /// Depth(s), comma separated.
    #[arg(long)]
    depth: Option<String>,
    /// Leaf noise rate(s), comma separated.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    /// Extra `key=value` settings.
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn overrides(&self) -> Result<Map<String, Value>, treecast_core::Error> {
        let mut map = Map::new();
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            map.insert(k, v);
        }
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(k.into(), v);
            }
        };
        put("chain", self.chain.clone().map(Value::String));
        put("d", self.d.as_deref().map(parse_value));
        put("depth", self.depth.as_deref().map(parse_value));
        put("eps", self.eps.as_deref().map(parse_value));
        put("m", self.m.map(Value::from));
        put("degree", self.degree.map(Value::from));
        put("trials", self.trials.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("out", self.out.as_ref().map(|p| Value::String(p.display().to_string())));
        put("estimator", self.estimator.clone().map(Value::String));
        put("alpha", self.alpha.map(Value::from));
        put("mode", self.mode.clone().map(Value::String));
        Ok(map)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (command, opts) = match &cli.command {
        Cmd::MiScan(o) => (Command::MiScan, o),
        Cmd::LowdegScan(o) => (Command::LowdegScan, o),
        Cmd::RootAccuracy(o) => (Command::RootAccuracy, o),
        Cmd::TreeReconstruct(o) => (Command::TreeReconstruct, o),
        Cmd::SqRun(o) => (Command::SqRun, o),
        Cmd::Simulate(o) => (Command::Simulate, o),
    };
    let result = opts
        .overrides()
        .and_then(|ov| ExperimentConfig::resolve(opts.config.as_deref(), ov))
        .map_err(|e| (2, e))
        .and_then(|cfg| {
            harness::run(command, &cfg, std::io::stdout().lock()).map_err(|e| (harness::exit_code(&e), e))
        });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("treecast {}: {e}", command.name());
            ExitCode::from(code as u8)
        }
    }
}
