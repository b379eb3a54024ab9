use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use cgr::harness::{ablate_rho, evaluate, gradcheck, Checkpoint, HarnessError, RunConfig, Scope, Trainer};
use cgr::metrics::MetricReport;
use cgr::scene::{generate_dataset, load_dataset, save_dataset};

/// Points sampled per gradient check.
const CHECK_POINTS: usize = 10;

#[derive(Parser)]
#[command(name = "cgr", version, about = "Context-conditioned group ranking on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying the rank table and scene settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train once per rho and print held-out metrics for each.
    AblateRho {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-emit a saved report as JSON or as per-image CSV rows.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string(value).map_err(|e| Failure::Validation(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate { seed, n, out, config } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => RunConfig::default(),
            };
            let table = cfg.data.table()?;
            let scenes = generate_dataset(seed, n, &table, &cfg.data.scene).map_err(HarnessError::from)?;
            let mut w = create(&out)?;
            save_dataset(&scenes, &mut w).map_err(HarnessError::from)?;
            w.flush()?;
            info!("wrote {n} scenes to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let mut t = Trainer::new(cfg)?;
            let logged = t.run(|t| {
                if let Some(row) = t.trace.last() {
                    print_json(row).map_err(|_| HarnessError::Invalid("cannot write trace".into()))?;
                }
                Ok(())
            });
            if let Err(e) = logged {
                if e.is_numerical() {
                    t.checkpoint(None).save(&out)?;
                    info!("kept the last finite state in {}", out.display());
                }
                return Err(e.into());
            }
            let theta = match t.cfg.theta_rel {
                Some(v) => v,
                None => cgr::harness::calibrate_theta_rel(&t.model, t.scenes(), t.cfg.det_thresh)?,
            };
            t.checkpoint(Some(theta)).save(&out)?;
            info!("checkpoint at iteration {} written to {}", t.iteration, out.display());
        }
        Command::Eval { ckpt, data, report } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let table = ck.cfg.data.table()?;
            let scenes = load_dataset(&data, &table.vocabulary()).map_err(HarnessError::from)?;
            let theta = ck
                .theta_rel()
                .ok_or_else(|| Failure::Validation("checkpoint carries no relevance threshold".into()))?;
            let r = evaluate(&model, &scenes, theta, ck.cfg.det_thresh)?;
            let mut w = create(&report)?;
            r.write_json(&mut w)?;
            w.flush()?;
            for (name, v) in r.headline() {
                println!("{name}\t{v:.4}");
            }
        }
        Command::AblateRho { config, values } => {
            let cfg = load_config(&config)?;
            for row in ablate_rho(&cfg, &values)? {
                print_json(&row)?;
            }
        }
        Command::Gradcheck { scope, seed } => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Model => Scope::Model,
            };
            let lines = gradcheck(scope, seed, CHECK_POINTS)?;
            for l in &lines {
                let mark = if l.passed { "pass" } else { "FAIL" };
                let at = l.worst.map(|(i, c)| format!(" at input {i} coordinate {c}")).unwrap_or_default();
                println!("{mark}\t{}\tmax rel err {:.3e} (tol {:.0e}){at}", l.name, l.max_rel_err, l.tol);
            }
            let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Numerical(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Report { input, format } => {
            let file = File::open(&input).map_err(|e| Failure::Validation(format!("{}: {e}", input.display())))?;
            let r: MetricReport = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| Failure::Validation(format!("{}: {e}", input.display())))?;
            let mut out = io::stdout().lock();
            match format {
                Format::Json => r.write_json(&mut out)?,
                Format::Csv => r.write_csv(&mut out)?,
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
    }
}
