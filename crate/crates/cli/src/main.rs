//! `sideband-limit`: derived quantities, synthetic cooling experiments and
//! their analysis from a JSON config.
//!
//! Exit codes: 0 on success, 1 for usage, config or I/O errors, 2 when a run
//! completed and wrote its outputs but some analysis stage failed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sideband_core::pipeline::{self, CurveAnalysis};
use sideband_core::ExperimentConfig;

/// `println!` that ignores a closed stdout, as when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(
    name = "sideband-limit",
    version,
    about = "Sideband cooling toward the quantum backaction limit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print derived quantities (s, n_ba, optimal detuning, regimes) as JSON.
    Model(Common),
    /// Synthesize and analyze one cooling curve.
    Cool(Common),
    /// Run a cooling curve at every configured detuning.
    Sweep(Common),
    /// Analyze spectrum CSV files.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Spectrum files, one per drive strength.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write synthetic spectra only.
    Synth(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed, overriding the config.
    #[arg(long, env = "SIDEBAND_LIMIT_SEED")]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this single detuning (Hz, negative) instead of the configured list.
    #[arg(long, allow_hyphen_values = true)]
    detuning: Option<f64>,
    /// Noiseless spectra (the infinite-averaging limit).
    #[arg(long)]
    no_noise: bool,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(d) = self.detuning {
            config.detunings_hz = vec![d];
        }
        config.validate()?;
        Ok(config)
    }

    /// The output directory is kept out of the config so that it does not
    /// enter the config hash.
    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| config.output_dir.clone())
    }
}

fn single_detuning(config: &ExperimentConfig) -> Result<()> {
    if config.detunings_hz.len() != 1 {
        bail!(
            "this command needs exactly one detuning, the config has {}; pass --detuning or use `sweep`",
            config.detunings_hz.len()
        );
    }
    Ok(())
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

fn summarize(analysis: &CurveAnalysis) {
    let d_mhz = analysis.detuning_hz / 1e6;
    match analysis.final_point() {
        Some(p) => say!(
            "detuning {d_mhz:.4} MHz: final n_bar = {:.4} +/- {:.4}",
            p.n_bar,
            p.sigma_n
        ),
        None => say!("detuning {d_mhz:.4} MHz: no final point"),
    }
    if let Some(c) = &analysis.curve {
        say!(
            "  n_ba = {:.4} +/- {:.4} (predicted {:.4}), n0 = {:.1} +/- {:.1}",
            c.n_ba_fit,
            c.sigma_n_ba,
            analysis.n_ba_predicted,
            c.n0_fit,
            c.sigma_n0
        );
    }
    let flags: Vec<_> = analysis.flags().iter().map(|f| f.as_str()).collect();
    if !flags.is_empty() {
        say!("  flags: {}", flags.join(", "));
    }
    for e in &analysis.errors {
        eprintln!("  error: {e}");
    }
}

fn stage_status(failed: bool) -> ExitCode {
    if failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Model(common) => {
            let config = common.config()?;
            let report = pipeline::model_report(&config)?;
            say!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Cool(common) => {
            let config = common.config()?;
            single_detuning(&config)?;
            let out = common.out_dir(&config);
            let (records, analysis) = pipeline::run_curve(&config, 0, !common.no_noise)?;
            write_config(&out, &config)?;
            pipeline::write_spectra(&out, &records)?;
            pipeline::write_curve_outputs(&out, &config, &analysis)?;
            summarize(&analysis);
            Ok(stage_status(analysis.failed()))
        }
        Command::Sweep(common) => {
            let config = common.config()?;
            let out = common.out_dir(&config);
            let run = pipeline::run_sweep(&config, !common.no_noise, common.jobs)?;
            write_config(&out, &config)?;
            pipeline::write_sweep_outputs(&out, &config, &run)?;
            for entry in &run.entries {
                match entry {
                    Ok((_, analysis)) => summarize(analysis),
                    Err(e) => eprintln!("detuning failed: {e}"),
                }
            }
            Ok(stage_status(run.any_failed()))
        }
        Command::Fit { common, inputs } => {
            let config = common.config()?;
            let out = common.out_dir(&config);
            let fallback = common.detuning.unwrap_or(config.detunings_hz[0]);
            let (detuning_hz, records) = pipeline::load_records(&inputs, fallback)?;
            let analysis = pipeline::analyze_curve(&config, detuning_hz, &records)?;
            std::fs::create_dir_all(&out)?;
            pipeline::write_curve_outputs(&out, &config, &analysis)?;
            summarize(&analysis);
            Ok(stage_status(analysis.failed()))
        }
        Command::Synth(common) => {
            let config = common.config()?;
            let out = common.out_dir(&config);
            write_config(&out, &config)?;
            let many = config.detunings_hz.len() > 1;
            for k in 0..config.detunings_hz.len() {
                let records = pipeline::synthesize_curve(&config, k, !common.no_noise)?;
                let dir = if many {
                    out.join(format!("detuning_{k:02}"))
                } else {
                    out.clone()
                };
                let paths = pipeline::write_spectra(&dir, &records)?;
                say!("wrote {} spectra to {}", paths.len(), dir.join("spectra").display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn jobs_of(command: &Command) -> Option<usize> {
    match command {
        Command::Model(c) | Command::Cool(c) | Command::Sweep(c) | Command::Synth(c) => c.jobs,
        Command::Fit { common, .. } => common.jobs,
    }
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
    if let Some(n) = jobs_of(&cli.command) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
