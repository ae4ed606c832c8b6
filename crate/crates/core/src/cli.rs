//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on contract or configuration errors
//! (including usage errors), 2 on I/O or file-format errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::checks::{fixture_checks, GradcheckCase, GRADCHECK_SEED, GRADCHECK_TEMPERATURE, GRADCHECK_TOL};
use crate::config::ExperimentConfig;
use crate::encoders::{save_embeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSpec, Split, TextSource};
use crate::federation::{run_training_with, Simulation};
use crate::report::{
    compare_to_reference, emit_charts, fmt2, fmt2_signed, read_csv, render_deltas, render_summary,
    summarize, summary_json, write_csv, EvalResult, ReferenceFixture,
};
use crate::seed;

#[derive(Debug, Parser)]
#[command(name = "fedprompt", about = "Federated prompt-generator simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key after the file is read, e.g. `--set federation.rounds=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::from_file(p, &self.overrides),
            None => ExperimentConfig::parse("", &self.overrides),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic world and write its embedding tables.
    MakeWorld {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run federated training, writing checkpoints and a round log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the base and new splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides applied on top of the config stored in the checkpoint.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to `eval.report_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary table, reference comparison and charts.
    Report {
        /// Result CSVs (`name,base,new,gap`). The embedded published
        /// table is used when none are given.
        #[arg(long = "results")]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full translator + loss gradient.
    Gradcheck,
    /// Reproduce the published table arithmetic from embedded values.
    Selftest,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn dispatch<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = write!(out, "{}", e.render());
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::file(path, e)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::MakeWorld { cfg, out: dir } => {
            let config = cfg.load()?;
            make_world(&config, &dir, out)?;
            Ok(0)
        }
        Command::Train { cfg, out: dir } => {
            let config = cfg.load()?;
            train(&config, &dir, out)?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            overrides,
            out: dir,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let config = ExperimentConfig::parse(&ck.config.to_text(), &overrides)?;
            let dir = dir.unwrap_or_else(|| config.eval.report_dir.clone());
            let report = eval_checkpoint(&config, &ck.params)?;
            write_eval(&report, &dir)?;
            let _ = writeln!(
                out,
                "base {}  new {}  gap {}  (zero-context base {}  new {})",
                fmt2(report.result.base_acc),
                fmt2(report.result.new_acc),
                fmt2_signed(report.result.gap),
                fmt2(report.zero_context.base_acc),
                fmt2(report.zero_context.new_acc)
            );
            Ok(0)
        }
        Command::Report { results, out: dir } => {
            report(&results, &dir, out)?;
            Ok(0)
        }
        Command::Gradcheck => {
            let err = GradcheckCase::standard(GRADCHECK_SEED, GRADCHECK_TEMPERATURE)?.run()?;
            let ok = err < GRADCHECK_TOL;
            let _ = writeln!(
                out,
                "max relative error {err:.3e} (tolerance {GRADCHECK_TOL:e}): {}",
                if ok { "PASS" } else { "FAIL" }
            );
            Ok(if ok { 0 } else { 1 })
        }
        Command::Selftest => {
            let checks = fixture_checks()?;
            let mut all = true;
            for c in &checks {
                all &= c.passed();
                let _ = writeln!(
                    out,
                    "[{}] {}: expected {}, got {}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.expected,
                    c.actual
                );
            }
            Ok(if all { 0 } else { 1 })
        }
    }
}

fn make_world(config: &ExperimentConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    ensure_dir(dir)?;
    let sim = Simulation::new(config)?;
    let w = &sim.world;
    let labels: Vec<String> = (0..w.num_classes())
        .map(|c| {
            if c < w.config.n_base {
                format!("base_{c}")
            } else {
                format!("new_{c}")
            }
        })
        .collect();
    save_embeddings(
        &dir.join("class_embeddings.ftpg"),
        &EmbeddingTable {
            labels: labels.clone(),
            embeddings: w.class_embeddings.clone(),
        },
    )?;
    save_embeddings(
        &dir.join("centers.ftpg"),
        &EmbeddingTable {
            labels,
            embeddings: w.centers.clone(),
        },
    )?;
    let _ = writeln!(
        out,
        "wrote {} classes ({} base, {} new) at d={} to {}",
        w.num_classes(),
        w.base_ids.len(),
        w.new_ids.len(),
        w.dim(),
        dir.display()
    );
    Ok(())
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.ftpg";
pub const ROUND_LOG: &str = "rounds.jsonl";

fn train(config: &ExperimentConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    ensure_dir(dir)?;
    let sim = Simulation::new(config)?;
    let log_path = dir.join(ROUND_LOG);
    let mut log = String::new();
    let every = config.federation.checkpoint_every;
    let outcome = run_training_with(config, &sim, |entry, params| {
        log.push_str(&serde_json::to_string(entry).map_err(|e| Error::contract(e.to_string()))?);
        log.push('\n');
        let done = entry.t + 1;
        if every > 0 && done % every == 0 {
            let p = dir.join(format!("checkpoint_round_{done:04}.ftpg"));
            save_checkpoint(&p, params, config, done as u64)?;
        }
        Ok(())
    })?;
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    let path = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&path, &outcome.params, config, config.federation.rounds as u64)?;
    if let Some(last) = outcome.logs.last() {
        let mean = last.client_loss.iter().map(|c| c.mean_loss).sum::<f64>() / last.client_loss.len() as f64;
        let _ = writeln!(out, "trained {} rounds, final mean client loss {mean:.4}", outcome.logs.len());
    }
    let _ = writeln!(out, "checkpoint: {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub result: EvalResult,
    pub zero_context: EvalResult,
}

/// Base/new accuracy of `params` and of the zero-context baseline.
pub fn eval_checkpoint(config: &ExperimentConfig, params: &crate::params::ParameterSet) -> Result<EvalReport> {
    let sim = Simulation::new(config)?;
    let spec = EvalSpec {
        world: &sim.world,
        head: &sim.head,
        translator: &config.translator,
        n_test: config.eval.n_test,
        temperature: config.optimizer.temperature,
        seed: config.derived_seed(seed::stream::EVAL),
    };
    let trained = TextSource::Translator(params);
    let result = EvalResult::new(
        "synthetic",
        evaluate(trained, Split::Base, &spec)?,
        evaluate(trained, Split::New, &spec)?,
    )?;
    let zero_context = EvalResult::new(
        "synthetic-zero-context",
        evaluate(TextSource::ZeroContext, Split::Base, &spec)?,
        evaluate(TextSource::ZeroContext, Split::New, &spec)?,
    )?;
    Ok(EvalReport { result, zero_context })
}

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

pub fn write_eval(report: &EvalReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_csv(&dir.join(EVAL_CSV), &[report.result.clone(), report.zero_context.clone()])?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::contract(e.to_string()))?;
    let p = dir.join(EVAL_JSON);
    fs::write(&p, json + "\n").map_err(io_err(&p))
}

fn report(inputs: &[PathBuf], dir: &Path, out: &mut dyn Write) -> Result<()> {
    ensure_dir(dir)?;
    let fixture = ReferenceFixture::published();
    let results = if inputs.is_empty() {
        fixture.ours_results()?
    } else {
        let mut all = Vec::new();
        for p in inputs {
            all.extend(read_csv(p)?);
        }
        all
    };
    let summary = summarize(&results)?;
    let comparison = if results.iter().all(|r| fixture.rows.iter().any(|f| f.dataset == r.dataset)) {
        Some(compare_to_reference(&summary, &fixture)?)
    } else {
        None
    };
    let _ = write!(out, "{}", render_summary(&summary));
    if let Some(c) = &comparison {
        let _ = writeln!(out);
        let _ = write!(out, "{}", render_deltas(c));
        let _ = writeln!(
            out,
            "\naverage deltas vs reference: base {}  new {}",
            fmt2_signed(c.average.delta_base),
            fmt2_signed(c.average.delta_new)
        );
    }
    write_csv(&dir.join("summary.csv"), &summary.rows)?;
    let p = dir.join("summary.json");
    fs::write(&p, summary_json(&summary, comparison.as_ref())? + "\n").map_err(io_err(&p))?;
    emit_charts(&summary.rows, dir)?;
    Ok(())
}
