use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use pilotforge::estimators::equally_spaced_pattern;
use pilotforge::experiment::{
    cmd_eval, cmd_gen_data, cmd_report, cmd_select, cmd_train, init_threads, load_pattern,
    ExperimentConfig, Layout, PatternSource, SnrWindow,
};
use pilotforge::Result;

#[derive(Parser)]
#[command(
    name = "pilotforge",
    version,
    about = "Learned OFDM pilot placement and channel estimation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, validation and test datasets.
    GenData,
    /// Learn a pilot pattern with the Concrete selector.
    Select {
        /// Pilot count; every entry of np_list when omitted.
        #[arg(long)]
        np: Option<usize>,
    },
    /// Train an estimation cascade end to end.
    Train {
        /// Pilot source: `cae` (learned pattern) or `uniform` (equally spaced lattice).
        #[arg(long, value_parser = parse::<PatternSource>)]
        pattern: PatternSource,
        /// Training SNRs: `full`, `low` (at or below window_split_db) or `high` (at or above it).
        #[arg(long, default_value = "full", value_parser = parse::<SnrWindow>)]
        snr_window: SnrWindow,
        /// Pilot count; every entry of np_list when omitted.
        #[arg(long)]
        np: Option<usize>,
    },
    /// Evaluate all methods and write the report CSV.
    Eval,
    /// Turn the report CSV into plot-ready files and pattern renderings.
    Report {
        /// Report CSV; defaults to the eval output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run gen-data, select, train, eval and report in sequence.
    All,
}

fn parse<T: std::str::FromStr<Err = pilotforge::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: pilotforge::Error| e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn nps(cfg: &ExperimentConfig, np: Option<usize>) -> Vec<usize> {
    np.map_or_else(|| cfg.np_list.clone(), |n| vec![n])
}

fn select(cfg: &ExperimentConfig, np: Option<usize>) -> Result<()> {
    for np in nps(cfg, np) {
        let s = cmd_select(cfg, np)?;
        println!(
            "np={np}: {} distinct subcarriers, {} collisions, mean max-probability {:.4}",
            s.pattern.distinct_subcarriers(),
            s.collisions,
            s.mean_max_prob
        );
        print!("{}", s.pattern.render_ascii());
    }
    Ok(())
}

fn train(
    cfg: &ExperimentConfig,
    source: PatternSource,
    window: SnrWindow,
    np: Option<usize>,
) -> Result<()> {
    for np in nps(cfg, np) {
        println!("{}", cmd_train(cfg, source, window, np)?.display());
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig, csv: Option<PathBuf>) -> Result<()> {
    let layout = Layout::new(cfg);
    let csv = csv.unwrap_or_else(|| layout.report_csv());
    let mut patterns = Vec::new();
    for &np in &cfg.np_list {
        if layout.pattern(np).is_file() {
            patterns.push((format!("cae-np{np}"), load_pattern(cfg, np)?));
        }
        patterns.push((
            format!("uniform-np{np}"),
            equally_spaced_pattern(cfg.nf, cfg.nn, np)?,
        ));
    }
    for path in cmd_report(&csv, &patterns, &layout.report_dir())? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => println!("manifest {}", cmd_gen_data(&cfg)?),
        Command::Select { np } => select(&cfg, np)?,
        Command::Train {
            pattern,
            snr_window,
            np,
        } => train(&cfg, pattern, snr_window, np)?,
        Command::Eval => {
            let rows = cmd_eval(&cfg)?;
            println!(
                "{} rows -> {}",
                rows.len(),
                Layout::new(&cfg).report_csv().display()
            );
        }
        Command::Report { csv } => report(&cfg, csv)?,
        Command::All => {
            let manifest = cmd_gen_data(&cfg)?;
            info!("manifest {manifest}");
            select(&cfg, None)?;
            train(&cfg, PatternSource::Cae, SnrWindow::Full, None)?;
            train(&cfg, PatternSource::Uniform, SnrWindow::Full, None)?;
            for &np in &cfg.snr_sweep_np {
                train(&cfg, PatternSource::Uniform, SnrWindow::Low, Some(np))?;
                train(&cfg, PatternSource::Uniform, SnrWindow::High, Some(np))?;
            }
            cmd_eval(&cfg)?;
            report(&cfg, None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
