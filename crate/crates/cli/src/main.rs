use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gformer::config::{resolve_output, ExperimentConfig};
use gformer::gtransformer::EpochLog;
use gformer::{io, pipeline, Error, Result};

/// Counterfactual trajectory simulation under treatment regimes.
#[derive(Parser)]
#[command(name = "gformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config); relative paths resolve
    /// against $GFORMER_OUTPUT_ROOT.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Force serial reductions. Every reduction is already serial, so this
    /// has no effect on results.
    #[arg(long)]
    deterministic: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(p) = &self.output {
            o.push(format!("output_dir={}", toml_string(&p.display().to_string())));
        }
        let cfg = ExperimentConfig::load(self.config.as_deref(), &o)?;
        for w in cfg.range_warnings() {
            eprintln!("warning: {w}");
        }
        let out = resolve_output(&cfg.output_dir);
        Ok((cfg, out))
    }

    fn progress(&self) -> impl FnMut(&str, &EpochLog) + '_ {
        move |what, e| {
            if !self.quiet {
                eprintln!(
                    "{what} epoch {:>3}  lr {:.2e}  train {:.5}/{:.5}  val {:.5}",
                    e.epoch, e.learning_rate, e.train_ce, e.train_mse, e.val_total
                );
            }
        }
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Generate observational and counterfactual datasets.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the estimator (and optionally the observational policy).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Monte Carlo simulation under one regime.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regime: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Units to simulate; defaults to the regime's counterfactual split
        /// when it exists, else the test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Policy file, needed for the `observational_policy` regime.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        end: Option<usize>,
        /// Result file; defaults to `<output>/sim/sim_<model>_<regime>.gfs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a simulation against a truth dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the counterfactual split of the simulated regime.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Comma-separated metrics; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
    },
    /// Predictive check under the fitted observational policy.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// First simulated row.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Compare Monte Carlo simulation with exact enumeration on the oracle
    /// system.
    VerifyOracle {
        #[command(flatten)]
        common: Common,
    },
    /// gen, train, simulate and eval in one go.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Export a dataset file as a lossless CSV bundle.
    Export {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn or_default(p: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.clone().unwrap_or(default)
}

fn split_path(out: &Path, regime: &str) -> PathBuf {
    let cf = out.join("data").join(format!("{}.gfd", pipeline::counterfactual_name(regime)));
    if cf.exists() {
        cf
    } else {
        out.join("data/test.gfd")
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen { common } => {
            let (cfg, out) = common.load()?;
            for p in pipeline::generate(&cfg, &out.join("data"))? {
                println!("{}", p.display());
            }
        }
        Command::Train { common, train, val } => {
            let (cfg, out) = common.load()?;
            let tr = io::load_dataset(&or_default(&train, out.join("data/train.gfd")))?;
            let va = io::load_dataset(&or_default(&val, out.join("data/val.gfd")))?;
            let res = pipeline::train(&cfg, &tr, &va, &out.join("model"), &mut common.progress())?;
            println!("{}", res.checkpoint.display());
            if let Some(p) = res.policy {
                println!("{}", p.display());
            }
        }
        Command::Simulate {
            common,
            regime,
            checkpoint,
            data,
            policy,
            draws,
            start,
            end,
            out: dest,
        } => {
            let (cfg, out) = common.load()?;
            let ckpt = io::load_checkpoint(&or_default(&checkpoint, out.join("model").join(pipeline::CHECKPOINT_FILE)))?;
            let policy = policy.as_deref().map(io::load_policy).transpose()?;
            let data = io::load_dataset(&or_default(&data, split_path(&out, &regime)))?;
            let (s, e) = cfg.window();
            let res = pipeline::simulate(
                &cfg,
                &ckpt,
                policy.as_ref(),
                &data,
                &regime,
                draws.unwrap_or(cfg.simulation.draws),
                start.unwrap_or(s),
                end.unwrap_or(e),
            )?;
            let dest = or_default(&dest, out.join("sim").join(pipeline::simulation_name(ckpt.model.name(), &regime)));
            pipeline::save_simulation(&cfg, &ckpt, &res, &dest)?;
            if let Some(dir) = dest.parent() {
                pipeline::write_effective_config(&cfg, dir)?;
            }
            println!("{}", dest.display());
        }
        Command::Eval {
            common,
            results,
            truth,
            metrics,
        } => {
            let (cfg, out) = common.load()?;
            let (header, res) = io::load_simulation(&results)?;
            let truth = io::load_dataset(&or_default(&truth, split_path(&out, &header.regime_id)))?;
            let metrics = if metrics.is_empty() { cfg.evaluation.metrics.clone() } else { metrics };
            let reports = pipeline::evaluate(&cfg, &header, &res, &truth, &metrics)?;
            let tag = results
                .file_stem()
                .map(|s| s.to_string_lossy().trim_start_matches("sim_").to_string())
                .unwrap_or_else(|| header.regime_id.clone());
            pipeline::write_reports(&cfg, &reports, &out.join("eval"), &tag)?;
            for r in &reports {
                println!("{} {} {:.6}", r.regime_id, r.metric, r.aggregate);
            }
        }
        Command::Check {
            common,
            checkpoint,
            policy,
            data,
            start,
        } => {
            let (cfg, out) = common.load()?;
            let model = out.join("model");
            let ckpt = io::load_checkpoint(&or_default(&checkpoint, model.join(pipeline::CHECKPOINT_FILE)))?;
            let policy = io::load_policy(&or_default(&policy, model.join(pipeline::POLICY_FILE)))?;
            let data = io::load_dataset(&or_default(&data, out.join("data/test.gfd")))?;
            let k = start
                .or(cfg.evaluation.predictive_check_start)
                .unwrap_or_else(|| cfg.window().0);
            let reports = pipeline::predictive_check(&cfg, &ckpt, &policy, &data, k)?;
            pipeline::write_reports(&cfg, &reports, &out.join("eval"), &format!("{}_check", ckpt.model.name()))?;
            for r in &reports {
                println!("{} {} {:.6}", r.regime_id, r.metric, r.aggregate);
            }
        }
        Command::VerifyOracle { common } => {
            let (cfg, _) = common.load()?;
            let rows = pipeline::verify_oracle(&cfg)?;
            print!("{}", pipeline::oracle_table(&rows));
            if !rows.iter().all(|r| r.pass) {
                eprintln!("oracle verification failed");
                return Ok(ExitCode::from(Error::numerical("").exit_code()));
            }
        }
        Command::Run { common } => {
            let (cfg, out) = common.load()?;
            let s = pipeline::run_all(&cfg, &out, &mut common.progress())?;
            for (regime, metric, v) in &s.aggregates {
                println!("{regime} {metric} {v:.6}");
            }
        }
        Command::Export { data, dir } => {
            io::export_csv_bundle(&io::load_dataset(&data)?, &dir)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
