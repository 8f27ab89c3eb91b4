use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slimroute::checkpoint;
use slimroute::config::RunConfig;
use slimroute::data::{generate_synthetic, load_jsonl_with, sweep::run_sweep, Dataset};
use slimroute::flops::{count_forward_with, layer_param_count, router_param_count, write_breakdowns, write_report};
use slimroute::hardness::dump_history;
use slimroute::model::Model;
use slimroute::training::{evaluate_with, train, write_logs, EvalMode, EvalReport};
use slimroute::{Error, Result};

/// Hardness-routed dynamic-width transformer classifier.
#[derive(Parser)]
#[command(name = "slimroute", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic task as train.jsonl and eval.jsonl.
    GenData(Common),
    /// Train, then write the checkpoint, logs and an eval report.
    Train(Common),
    /// Evaluate a checkpoint in routed and every fixed-width mode.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every cell of the configured grid.
    Sweep(Common),
    /// Static FLOPs of every reduction factor.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Token count per sequence, CLS excluded; default is the
        /// synthetic sequence length.
        #[arg(long)]
        seq_len: Option<usize>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut config = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    fs::create_dir_all(&c.out)?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Report rows for the routed mode and each fixed factor.
fn full_report(model: &Model, eval: &Dataset, config: &RunConfig, run_id: &str, dir: &Path) -> Result<EvalReport> {
    let factors = model.config().reduction_factors.clone();
    let routed = evaluate_with(model, eval, EvalMode::Routed, config.flops)?;
    let mut rows = vec![routed.report_row(run_id, "eval", &factors)];
    for &r in &factors {
        rows.push(evaluate_with(model, eval, EvalMode::Fixed(r), config.flops)?.report_row(run_id, "eval", &factors));
    }
    write_report(create(dir, "report.csv")?, &factors, &rows, false)?;
    routed.write_decisions(&mut create(dir, "routing.jsonl")?)?;
    for row in &rows {
        println!(
            "{:<12} accuracy {:.4}  mean FLOPs {:.0}",
            row.mode, row.accuracy, row.mean_flops_per_sample
        );
    }
    Ok(routed)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let config = load_config(&c)?;
            let (train, eval) = generate_synthetic(&config.data.synthetic, config.seed)?
                .split(config.data.eval_fraction, config.seed)?;
            train.write_jsonl(&c.out.join("train.jsonl"))?;
            eval.write_jsonl(&c.out.join("eval.jsonl"))?;
            println!("wrote {} train and {} eval samples", train.len(), eval.len());
        }
        Command::Train(c) => {
            let config = load_config(&c)?;
            let (train_set, eval_set) = config.datasets()?;
            let encoder = config.encoder_for(&[&train_set, &eval_set])?;
            let model = Model::new(&encoder, config.seed)?;
            let outcome = train(model, &train_set, &config.train)?;
            checkpoint::save(&c.out.join("checkpoint.json"), &outcome.model, &train_set.vocab, config.seed)?;
            write_logs(&outcome.logs, &mut create(&c.out, "train_log.jsonl")?)?;
            dump_history(&outcome.history, &config.train.thresholds, &mut create(&c.out, "hardness.jsonl")?)?;
            full_report(&outcome.model, &eval_set, &config, &format!("seed={}", config.seed), &c.out)?;
        }
        Command::Eval { common, checkpoint } => {
            let config = load_config(&common)?;
            let loaded = checkpoint::load(&checkpoint)?;
            let num_classes = loaded.model.config().num_classes;
            let eval_set = match (&config.data.eval_path, &config.data.train_path) {
                (Some(p), _) => load_jsonl_with(p, Some(&loaded.vocab), Some(num_classes))?,
                (None, Some(_)) => config.datasets()?.1,
                (None, None) => {
                    let seed = common.seed.unwrap_or(loaded.seed);
                    generate_synthetic(&config.data.synthetic, seed)?
                        .split(config.data.eval_fraction, seed)?
                        .1
                }
            };
            full_report(&loaded.model, &eval_set, &config, &format!("seed={}", loaded.seed), &common.out)?;
        }
        Command::Sweep(c) => {
            let config = load_config(&c)?;
            let (train_set, eval_set) = config.datasets()?;
            let result = run_sweep(&config, &train_set, &eval_set)?;
            result.write_csv(create(&c.out, "sweep.csv")?)?;
            let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells, {failed} failed", result.rows.len());
        }
        Command::Flops { common, seq_len } => {
            let config = load_config(&common)?;
            let l = seq_len.unwrap_or(config.data.synthetic.seq_len) + 1;
            let mut encoder = config.encoder.clone();
            encoder.max_seq_len = encoder.max_seq_len.max(l);
            encoder.validate()?;
            let mut rows = Vec::new();
            for &r in &encoder.reduction_factors {
                for routed in [false, true] {
                    rows.push((r, routed, l, count_forward_with(&encoder, l, r, routed, config.flops)?));
                }
            }
            write_breakdowns(create(&common.out, "flops.csv")?, &rows)?;
            let full = rows.iter().find(|(r, routed, ..)| *r == 1.0 && !routed).map(|x| x.3.total());
            for (r, routed, _, b) in &rows {
                let ratio = full.map_or(f64::NAN, |f| b.total() as f64 / f as f64);
                let mode = if *routed { "routed" } else { "fixed" };
                println!("r={r:<5} {mode:<7} {:>12} FLOPs  ({ratio:.3} of full)", b.total());
            }
            let router = router_param_count(&encoder);
            println!(
                "router parameters {router}, one layer {}, ratio {:.3}",
                layer_param_count(&encoder),
                router as f64 / layer_param_count(&encoder) as f64
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
