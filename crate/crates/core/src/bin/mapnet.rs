use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mapnet::config::{parse_config, RunConfig};
use mapnet::episodes::{load_embeddings, synth_generate, Dataset, Split};
use mapnet::error::Error;
use mapnet::oracle::{gradcheck_case, gradcheck_modes, neumann_gap, pipeline_gradcheck, scripted_gap};
use mapnet::persist::{load_params_into, save_params};
use mapnet::report::{ablation_csv, write_json, Report};
use mapnet::train::{ablation_run, evaluate, init_params, lambda_sweep, train_with_progress};

const GRADCHECK_TOL: f64 = 1e-4;
const NEUMANN_TOL: f64 = 1e-8;
const SCRIPTED_TOL: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "mapnet", version, about = "Modal-alternating propagation for few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output file (directory for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run seed. For `synth` this is the dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Evaluation workers; 0 runs single-threaded.
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic dataset as features.txt and attributes.txt.
    Synth,
    /// Train a model and write its parameters and epoch log.
    Train,
    /// Evaluate saved parameters on the test split.
    Eval,
    /// Train and test every component ablation.
    Ablate,
    /// Fusion-weight statistics per shot count.
    Lambda,
    /// Finite-difference check of the full pipeline in every mode.
    Gradcheck,
    /// Closed-form vs series propagation and the scripted end-to-end case.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Lambda => "lambda",
            Command::Gradcheck => "gradcheck",
            Command::Oracle => "oracle",
        }
    }
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Error> {
    match (&cfg.features, &cfg.attributes) {
        (Some(f), Some(a)) => load_embeddings(f, a),
        _ => synth_generate(&cfg.synth, cfg.synth_seed),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.to_path_buf();
    p.set_extension(ext);
    p
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        let key = if cli.command == Command::Synth { "synth.seed" } else { "seed" };
        overrides.push(format!("{key}={seed}"));
    }
    let cfg = parse_config(cli.config.as_deref(), &overrides)?;
    let name = cli.command.name();
    match cli.command {
        Command::Synth => {
            let dir = out_path(cli, ".");
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            let ds = synth_generate(&cfg.synth, cfg.synth_seed)?;
            let features = dir.join("features.txt");
            let attributes = dir.join("attributes.txt");
            ds.write_files(&features, &attributes)?;
            println!("wrote {} and {}", features.display(), attributes.display());
        }
        Command::Train => {
            let ds = load_dataset(&cfg)?;
            let out = out_path(cli, "params.bin");
            let (params, log) = train_with_progress(&ds, &cfg.train, |e| println!("{}", e.line()))?;
            save_params(&out, &params)?;
            let log_path = with_extension(&out, "log");
            fs::write(&log_path, log.render()).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            println!("best epoch {}; wrote {} and {}", log.best_epoch, out.display(), log_path.display());
        }
        Command::Eval => {
            let ds = load_dataset(&cfg)?;
            let Some(params_path) = cfg.params.clone() else {
                return Err(Error::InvalidConfig("eval needs `params = <file>`".into()).into());
            };
            let mut params = init_params(&ds, &cfg.train);
            load_params_into(&params_path, &mut params)?;
            let report = evaluate(&params, &ds, Split::Test, &cfg.train, cfg.train.eval_episodes, cli.threads)?;
            eprintln!("wall time {:.2}s", report.wall_time);
            println!("accuracy {:.2} +- {:.2}", report.accuracy, report.ci95);
            write_json(&out_path(cli, "eval.json"), &Report::new(name, &cfg, report))?;
        }
        Command::Ablate => {
            let ds = load_dataset(&cfg)?;
            let rows = ablation_run(&ds, &cfg.train, cli.threads)?;
            for r in &rows {
                println!("{:<10} {:6.2} +- {:.2}", r.label, r.report.accuracy, r.report.ci95);
            }
            let out = out_path(cli, "ablation.json");
            let csv = with_extension(&out, "csv");
            fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::Io { path: csv.clone(), source: e })?;
            write_json(&out, &Report::new(name, &cfg, rows))?;
        }
        Command::Lambda => {
            let ds = load_dataset(&cfg)?;
            let rows = lambda_sweep(&ds, &cfg.train, &cfg.shots, cli.threads)?;
            for r in &rows {
                println!(
                    "K={} support {:?} query {:?}",
                    r.k_shot, r.lambda_mean_support, r.lambda_mean_query
                );
            }
            write_json(&out_path(cli, "lambda.json"), &Report::new(name, &cfg, rows))?;
        }
        Command::Gradcheck => {
            let (episode, params) = gradcheck_case(cfg.train.seed)?;
            let mut worst: f64 = 0.0;
            for mode in gradcheck_modes() {
                let r = pipeline_gradcheck(&episode, &params, mode, cfg.train.alpha, cfg.train.mu)?;
                println!(
                    "{:<14} max_rel_error {:.3e} ({}[{}])",
                    mode.label(),
                    r.max_rel_error,
                    r.worst_param,
                    r.worst_index
                );
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e}");
            if worst > GRADCHECK_TOL {
                return Err(Failure::Check(format!("gradient check {worst:.3e} exceeds {GRADCHECK_TOL:e}")));
            }
        }
        Command::Oracle => {
            let gap = neumann_gap(cfg.train.seed, 100, 20, cfg.train.alpha)?;
            println!("closed-form vs neumann max gap {gap:.3e}");
            let scripted = scripted_gap()?;
            println!("scripted end-to-end max gap {scripted:.3e}");
            if gap > NEUMANN_TOL || scripted > SCRIPTED_TOL {
                return Err(Failure::Check("oracle mismatch".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            let config_or_io = matches!(
                e,
                Error::InvalidConfig(_) | Error::ConfigKey { .. } | Error::Io { .. } | Error::Format { .. }
            );
            ExitCode::from(if config_or_io { 2 } else { 1 })
        }
    }
}
