//! Config-driven experiment runner behind the `exseq` binary.
//!
//! Every subcommand reads one TOML file (all keys optional), applies
//! `--set key=value` overrides, and writes CSV (JSON for `propcheck`)
//! headed by the crate version, schema id, SHA-256 of the resolved config
//! and the resolved config itself.

mod commands;
mod config;

pub use commands::{
    active_curves, active_experiment, arch_experiment, bandit_curves, bandit_experiment, gap_rows,
    propcheck_report, train_experiment, uq_rows, ActiveConfig, ArchConfig, ArchRow, BanditConfig,
    Budgeted, ConjugateParams, CurveOutput, GapConfig, GapGrid, GapRow, PropcheckConfig,
    PropcheckModel, PropcheckReport, SummaryRow, TrainCmdConfig, TrainLogRow, UqConfig, UqRow,
    DEFAULT_BUDGET_FLOPS,
};
pub use config::{config_hash, load_config, parse_override};

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "exseq",
    version,
    about = "Exchangeable sequence modeling experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// One-step vs multi-step information gap on a grid (closed form and Monte Carlo).
    Gap(CommonArgs),
    /// Multi-step log-loss of one-step and multi-step inference on GP data.
    Uq(CommonArgs),
    /// Thompson-sampling regret curves.
    Bandit(CommonArgs),
    /// Uncertainty-sampling active learning curves.
    Active(CommonArgs),
    /// Exchangeability property checks; writes JSON.
    Propcheck(CommonArgs),
    /// Trains both masks on identical data and evaluates log-loss by context length.
    Arch(CommonArgs),
    /// Trains one transformer and writes a checkpoint plus the epoch log.
    Train(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file; omitted keys take their defaults.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set grid.sigma=[1.0]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set out=PATH`.
    #[arg(short, long)]
    pub out: Option<String>,
    /// Shorthand for `--set budget_flops=X`.
    #[arg(long)]
    pub budget: Option<f64>,
    /// Worker threads for replication-level parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Print the resolved config as TOML and exit without running.
    #[arg(long)]
    pub print_config: bool,
}

impl CommonArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(p) = &self.out {
            o.push(format!("out={}", toml::Value::String(p.clone())));
        }
        if let Some(b) = self.budget {
            o.push(format!("budget_flops={b:e}"));
        }
        o
    }

    fn config_text(&self) -> Result<String> {
        match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config {
                key: "<file>".into(),
                message: format!("{}: {e}", p.display()),
            }),
            None => Ok(String::new()),
        }
    }
}

/// Exit status for an error: 2 config, 3 budget, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::Budget { .. } => 3,
        _ => 1,
    }
}

pub fn header_lines(schema: &str, config_json: &str, hash: &str) -> String {
    format!(
        "# exseq {}\n# schema: {schema}\n# config_sha256: {hash}\n# config: {config_json}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn write_output(out: &Option<String>, text: &str) -> Result<()> {
    match out {
        Some(p) if p != "-" => std::fs::write(p, text)?,
        _ => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn csv_text<R: serde::Serialize>(header: &str, rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(format!(
        "{header}{}",
        String::from_utf8(body).expect("csv is utf-8")
    ))
}

/// Loads and validates the config; `None` when it was only printed.
fn resolve<C>(args: &CommonArgs) -> Result<Option<C>>
where
    C: serde::de::DeserializeOwned + serde::Serialize + Budgeted,
{
    let cfg: C = load_config(&args.config_text()?, &args.all_overrides())?;
    if args.print_config {
        let text = toml::to_string(&cfg).map_err(|e| Error::Config {
            key: "<config>".into(),
            message: e.to_string(),
        })?;
        std::io::stdout().write_all(text.as_bytes())?;
        return Ok(None);
    }
    cfg.check_budget()?;
    Ok(Some(cfg))
}

fn run_csv<C, R, F>(args: &CommonArgs, schema: &str, run: F) -> Result<()>
where
    C: serde::de::DeserializeOwned + serde::Serialize + commands::Budgeted,
    R: serde::Serialize,
    F: FnOnce(&C) -> Result<Vec<R>>,
{
    let Some(cfg) = resolve::<C>(args)? else {
        return Ok(());
    };
    let (json, hash) = config_hash(&cfg)?;
    let rows = run(&cfg)?;
    write_output(
        cfg.out(),
        &csv_text(&header_lines(schema, &json, &hash), &rows)?,
    )
}

/// Parses `argv` and runs the chosen subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let args = match &cli.command {
        Command::Gap(a)
        | Command::Uq(a)
        | Command::Bandit(a)
        | Command::Active(a)
        | Command::Propcheck(a)
        | Command::Arch(a)
        | Command::Train(a) => a.clone(),
    };
    if let Some(n) = args.workers {
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match cli.command {
        Command::Gap(_) => run_csv::<GapConfig, _, _>(&args, "gap/v1", gap_rows),
        Command::Uq(_) => run_csv::<UqConfig, _, _>(&args, "uq/v1", uq_rows),
        Command::Bandit(_) => {
            run_with_summary::<BanditConfig, _>(&args, "result_rows/v1", bandit_experiment)
        }
        Command::Active(_) => {
            run_with_summary::<ActiveConfig, _>(&args, "result_rows/v1", active_experiment)
        }
        Command::Arch(_) => {
            run_csv::<ArchConfig, _, _>(&args, "arch/v1", |c| arch_experiment(c, |_, _| {}))
        }
        Command::Train(_) => run_csv::<TrainCmdConfig, _, _>(&args, "train_log/v1", |c| {
            train_experiment(c, |e| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {:.5}  lr {:.3e}",
                    e.epoch, e.train_nll, e.val_nll, e.lr
                )
            })
        }),
        Command::Propcheck(_) => {
            let Some(cfg) = resolve::<PropcheckConfig>(&args)? else {
                return Ok(());
            };
            let (json, hash) = config_hash(&cfg)?;
            let report = propcheck_report(&cfg)?;
            let doc = serde_json::json!({
                "exseq_version": env!("CARGO_PKG_VERSION"),
                "schema": "propcheck/v1",
                "config_sha256": hash,
                "config": serde_json::from_str::<serde_json::Value>(&json)?,
                "report": report,
            });
            write_output(&cfg.out, &(serde_json::to_string_pretty(&doc)? + "\n"))
        }
    }
}

/// Experiments whose rows come with a per-step mean ± SE summary.
fn run_with_summary<C, F>(args: &CommonArgs, schema: &str, run: F) -> Result<()>
where
    C: serde::de::DeserializeOwned + serde::Serialize + commands::Budgeted,
    F: FnOnce(&C) -> Result<commands::CurveOutput>,
{
    let Some(cfg) = resolve::<C>(args)? else {
        return Ok(());
    };
    let (json, hash) = config_hash(&cfg)?;
    let output = run(&cfg)?;
    write_output(
        cfg.out(),
        &csv_text(&header_lines(schema, &json, &hash), &output.rows)?,
    )?;
    let summary = csv_text(
        &header_lines("curve_summary/v1", &json, &hash),
        &output.summary,
    )?;
    match cfg.summary_out() {
        Some(p) => std::fs::write(p, summary)?,
        None => eprint!("{summary}"),
    }
    Ok(())
}
