use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use genxfer::checkpoint::{load_pipeline, save_pipeline};
use genxfer::data::{load_samples, save_samples};
use genxfer::harness::config::ConfigFile;
use genxfer::harness::dgp::{draw_dgp, DgpSpec, Role};
use genxfer::harness::plot::emit_plot;
use genxfer::harness::results::ExperimentResult;
use genxfer::harness::sweep::{dgp_kind, run_sweep, Cell, SweepConfig};
use genxfer::metrics::{sinkhorn_wasserstein, tv_binned};
use genxfer::rng;
use genxfer::transfer::{fit_pipeline, generate, Family, Fitted, Mode, Regime, SourceData, TargetData};
use genxfer::{Error, Result};

#[derive(Parser)]
#[command(name = "genxfer", version, about = "Transfer learning for diffusion models and coupling flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one pipeline on simulated data and save it as a directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_family)]
        family: Option<Family>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Source sample size for transfer runs.
        #[arg(long)]
        n_s: Option<usize>,
    },
    /// Sample from a saved pipeline directory.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Covariate CSV for conditional pipelines: one row, or `n` rows.
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance between two sample files.
    Eval {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Wasserstein)]
        metric: MetricArg,
    },
    /// Source-size sweep over the simulation designs.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Restrict to one family.
        #[arg(long, value_parser = parse_family)]
        family: Option<Family>,
        /// Restrict to one mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Write zero wall times so reruns give byte-identical CSVs.
        #[arg(long)]
        no_timing: bool,
    },
    /// Render a results CSV as SVG.
    Plot {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Tv,
    Wasserstein,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    Family::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).map_err(|e| e.to_string())
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    Regime::parse(s).map_err(|e| e.to_string())
}

fn load_config(common: &Common) -> Result<(ConfigFile, SweepConfig)> {
    let file = match &common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut cfg = file.apply(SweepConfig::default())?;
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    Ok((file, cfg))
}

fn train(
    common: &Common,
    out: &Path,
    family: Option<Family>,
    mode: Option<Mode>,
    regime: Option<Regime>,
    n_s: Option<usize>,
) -> Result<()> {
    let (file, cfg) = load_config(common)?;
    let mut choice = file.pipeline()?;
    choice.family = family.unwrap_or(choice.family);
    choice.mode = mode.unwrap_or(choice.mode);
    choice.regime = regime.unwrap_or(choice.regime);
    choice.n_s = n_s.unwrap_or(choice.n_s);
    let seed = common.seed.unwrap_or(choice.seed);
    let cell = Cell {
        family: choice.family,
        mode: choice.mode,
        regime: choice.regime,
        n_s: if choice.regime == Regime::Transfer { choice.n_s } else { 0 },
        replication: 0,
        seed,
    };
    let plan = cfg.plan(&cell);
    let spec = DgpSpec {
        kind: dgp_kind(cell.mode),
        seed,
    };
    let tgt = draw_dgp(spec.kind, Role::Target, cfg.n_t, &mut spec.rng(Role::Target, "train"));
    let target = TargetData::new(tgt.x, tgt.aux)?;
    let source = match cell.regime {
        Regime::Transfer => {
            let src = draw_dgp(spec.kind, Role::Source, cell.n_s, &mut spec.rng(Role::Source, "train"));
            Some(match cell.mode {
                Mode::Conditional => SourceData::new(src.x, src.aux)?,
                Mode::Unconditional => SourceData::latents(src.aux),
            })
        }
        Regime::NonTransfer => None,
    };
    log::info!("fitting {} {} {} (n_s = {}, n_t = {})", cell.family, cell.mode, cell.regime, cell.n_s, cfg.n_t);
    let fitted = fit_pipeline(&plan, source.as_ref(), &target, None)?;
    save_pipeline(&fitted, out)?;
    println!("saved {}", out.display());
    Ok(())
}

fn generate_cmd(dir: &Path, n: usize, cond: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let (_, fitted) = load_pipeline(dir)?;
    let z = match (&fitted, cond) {
        (Fitted::Conditional { .. }, Some(p)) => Some(load_samples(p)?),
        (Fitted::Conditional { .. }, None) => {
            return Err(Error::Config("conditional pipeline: pass covariates with --cond".into()))
        }
        (Fitted::Unconditional { .. }, Some(_)) => {
            return Err(Error::Config("unconditional pipeline takes no --cond".into()))
        }
        (Fitted::Unconditional { .. }, None) => None,
    };
    let samples = generate(&fitted, z.as_ref().map(|z| z.view()), n, &mut rng::seeded(seed))?;
    save_samples(&samples, out)?;
    println!("wrote {} rows to {}", samples.len(), out.display());
    Ok(())
}

fn eval(common: &Common, a: &Path, b: &Path, metric: MetricArg) -> Result<()> {
    let (_, cfg) = load_config(common)?;
    let (a, b) = (load_samples(a)?, load_samples(b)?);
    match metric {
        MetricArg::Tv => println!("tv {}", tv_binned(&a, &b, &cfg.tv)?),
        MetricArg::Wasserstein => {
            let out = sinkhorn_wasserstein(&a, &b, &cfg.sinkhorn)?;
            if !out.converged {
                log::warn!("sinkhorn did not reach tol after {} iterations", out.iterations);
            }
            println!("wasserstein {}", out.cost);
        }
    }
    Ok(())
}

fn sweep(common: &Common, out: &Path, workers: Option<usize>, family: Option<Family>, mode: Option<Mode>, no_timing: bool) -> Result<()> {
    let (_, mut cfg) = load_config(common)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(f) = family {
        cfg.families = vec![f];
    }
    if let Some(m) = mode {
        cfg.modes = vec![m];
    }
    if no_timing {
        cfg.record_timing = false;
    }
    let outcome = run_sweep(&cfg, out)?;
    let failed = outcome.result.rows.iter().filter(|r| !r.is_ok()).count();
    emit_plot(&outcome.result, &out.join("plot.svg"))?;
    println!(
        "{} rows ({failed} failed) in {}",
        outcome.result.rows.len(),
        out.join("results.csv").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            out,
            family,
            mode,
            regime,
            n_s,
        } => train(&common, &out, family, mode, regime, n_s),
        Command::Generate {
            checkpoint,
            n,
            cond,
            seed,
            out,
        } => generate_cmd(&checkpoint, n, cond.as_deref(), seed, &out),
        Command::Eval { common, a, b, metric } => eval(&common, &a, &b, metric),
        Command::Sweep {
            common,
            out,
            workers,
            family,
            mode,
            no_timing,
        } => sweep(&common, &out, workers, family, mode, no_timing),
        Command::Plot { input, out } => emit_plot(&ExperimentResult::load(&input)?, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GENXFER_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
