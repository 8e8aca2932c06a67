use std::process::ExitCode;

use clap::Parser;

use hamlab::config::{schema, ExperimentConfig, Subcommand};
use hamlab::report;

/// Run one experiment and write its artifacts to `--out`.
///
/// Every subcommand takes `--key value` pairs; `--seed`, `--shards` and `--out`
/// are common to all. Exit status: 0 all checks pass, 1 a check failed,
/// 2 invalid configuration, 3 runtime error.
#[derive(Parser)]
#[command(name = "hamlab", version, after_help = keys_help())]
struct Cli {
    subcommand: Subcommand,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    args: Vec<String>,
}

fn keys_help() -> String {
    use clap::ValueEnum;
    let mut s = String::from("Keys:\n");
    for sub in Subcommand::value_variants() {
        s.push_str(&format!("  {sub}\n"));
        for k in schema(*sub) {
            let d = k.default.map(|d| format!(" [default: {d}]")).unwrap_or_else(|| " (required)".into());
            s.push_str(&format!("    --{:<11} {}{d}\n", k.name, k.help));
        }
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match ExperimentConfig::parse(cli.subcommand, &cli.args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let report = match hamlab::run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(3);
        }
    };
    if let Err(e) = report::write_outputs(&cfg, &report) {
        eprintln!("error: writing {}: {e:#}", cfg.out_dir.display());
        return ExitCode::from(3);
    }
    print!("{}", report::summary(&report));
    if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
