use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvqem::config::ConfigMap;
use cvqem::daem::{self, DaemConfig, Dataset};
use cvqem::dynamics::{self, Regime};
use cvqem::evaluate::{self, Experiment, SweepModel};
use cvqem::fock::{self, CoherentAmplitude};
use cvqem::model::{Checkpoint, Model, ModelConfig};
use cvqem::parallel::{self, Execution};
use cvqem::training::{self, TrainConfig, TrainOptions};
use cvqem::{wigner, Error};

const SEED_ENV: &str = "CVQEM_SEED";

#[derive(Parser)]
#[command(name = "cvqem", version, about = "Noisy bosonic dynamics, DAEM datasets and learned Wigner-function error mitigation")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training dataset from a `daem.*` config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `daem.seed` (falls back to $CVQEM_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint, keeping its step counter.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss curve CSV (default: `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Overrides `train.seed` (falls back to $CVQEM_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an extrapolation sweep for one or more checkpoints.
    Eval {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evolve one state and write its Wigner raster.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        parallel::set_threads(n);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::ModelConfig(_) => 2,
        Error::Io { .. } => 2,
        _ => 3,
    }
}

fn read_config(path: &Path) -> Result<ConfigMap, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    ConfigMap::parse(&text)
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config { line: 0, message: format!("{SEED_ENV}=`{s}` is not an unsigned integer") }),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, Error> {
    Ok(match flag {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData { config, out, seed } => {
            let mut c = read_config(&config)?;
            if let Some(s) = resolve_seed(seed)? {
                c.insert("daem.seed", s);
            }
            let cfg = DaemConfig::from_config(&c)?;
            let ds = daem::generate(&cfg, Execution::Parallel)?;
            ds.save(&out)?;
            println!("{} records, sha256 {}", ds.records.len(), ds.digest()?);
        }
        Command::Train { data, model_config, train_config, out, resume, loss_csv, seed } => {
            let ds = Dataset::load(&data)?;
            let model = ModelConfig::from_config(&read_config(&model_config)?)?;
            let mut tc = read_config(&train_config)?;
            if let Some(s) = resolve_seed(seed)? {
                tc.insert("train.seed", s);
            }
            let train_cfg = TrainConfig::from_config(&tc)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let loss_csv = loss_csv.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_os_string();
                s.push(".loss.csv");
                s.into()
            });
            let opts = TrainOptions {
                exec: Execution::Parallel,
                checkpoint: Some(out),
                loss_csv: Some(loss_csv),
                resume,
                verbose: true,
            };
            let outcome = training::train(&ds, &model, &train_cfg, &opts)?;
            let last = outcome.losses.last().map_or(f64::NAN, |r| r.loss);
            println!("step {} loss {last:.6e}", outcome.checkpoint.step);
        }
        Command::Eval { ckpt, experiment, out } => {
            let exp = Experiment::from_config(&read_config(&experiment)?)?;
            let loaded: Vec<(Model, Checkpoint)> = ckpt.iter().map(|p| training::load_model(p)).collect::<Result<_, _>>()?;
            let models: Vec<SweepModel> = loaded.iter().map(|(m, c)| SweepModel { model: m, params: &c.params }).collect();
            let report = evaluate::extrapolation_sweep(&exp, &models, Some(&out), Execution::Parallel)?;
            print!("{}", report.to_csv());
        }
        Command::Simulate { config, t, out } => simulate(&read_config(&config)?, t, &out)?,
    }
    Ok(())
}

/// `daem.*` physics plus `simulate.alpha=re,im` (default vacuum) and
/// `simulate.kappa` (default `daem.kappa_forward`).
fn simulate(c: &ConfigMap, t: f64, out: &Path) -> Result<(), Error> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("t must be finite and >= 0, got {t}")));
    }
    c.reject_unknown("simulate.", &["alpha", "kappa"])?;
    let mut physics_keys = ConfigMap::default();
    for line in c.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.starts_with("daem.") {
                physics_keys.insert(k, v);
            }
        }
    }
    let cfg = DaemConfig::from_config(&physics_keys)?;
    let alpha = match c.get_list::<f64>("simulate.alpha")? {
        None => CoherentAmplitude::new(0.0, 0.0),
        Some(v) if v.len() == 2 => CoherentAmplitude::new(v[0], v[1]),
        Some(_) => return Err(Error::Config { line: 0, message: "simulate.alpha takes re,im".into() }),
    };
    let kappa = c.get_or("simulate.kappa", cfg.kappa_forward)?;
    let rho0 = fock::coherent(alpha, cfg.cutoff)?;
    let spec = cfg.spec(kappa)?;
    let rho = match cfg.regime {
        Regime::Markovian => dynamics::evolve(&rho0, &spec, t)?,
        Regime::ReactionCoordinate => {
            let rc = cfg.rc_params(kappa);
            let ext = dynamics::evolve(&dynamics::rc_embed(&rho0, cfg.rc_cutoff)?, &dynamics::rc_extend(&spec, &rc)?, t)?;
            dynamics::rc_reduce(&ext, cfg.cutoff, cfg.rc_cutoff)?
        }
    };
    let w = wigner::wigner(&rho, &cfg.grid)?;
    daem::save_raster(&w, out)?;
    let mut manifest = cfg.to_config();
    manifest.insert("simulate.alpha", format!("{},{}", alpha.re, alpha.im));
    manifest.insert("simulate.kappa", kappa);
    manifest.insert("simulate.t", t);
    std::fs::write(daem::manifest_path(out), manifest.to_text()).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    println!("norm {:.6}", wigner::norm_integral(&w));
    Ok(())
}
