mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use config::{config_err, ConfigError, DftMode, RunConfig};
use foloc::pipeline::{inputs_from_recorded, label_bands, locate, GeneratorInput, LocateSettings, StageMode};
use foloc::report::Report;
use foloc::simkit::io::{read_dataset, write_dataset, RecordedDataset, LABELS_FILE};
use foloc::simkit::simulate;

const EXIT_CONFIG: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "foloc", version, about = "Locate forced-oscillation sources from generator PMU data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Full,
    Stage1,
    Stage2,
}

impl From<StageArg> for StageMode {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Full => StageMode::Full,
            StageArg::Stage1 => StageMode::Stage1,
            StageArg::Stage2 => StageMode::Stage2,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write one CSV per generator plus labels.json.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in name (four_bus, ten_gen) or scenario JSON file.
        #[arg(long)]
        scenario: Option<String>,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run both estimation stages on a dataset and write the source report.
    Locate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the prior perturbation when no priors file is given.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, allow_negative_numbers = true)]
        lambda0: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        iota: Option<f64>,
        /// Run a single stage (debugging).
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Use the DFT noise constant of 2 instead of 1/2.
        #[arg(long)]
        paper_dft_constant: bool,
    },
    /// Print an existing report, optionally regenerating its figure tables.
    Report {
        path: PathBuf,
        #[arg(long)]
        figures: Option<PathBuf>,
    },
}

fn load(config: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_simulate(cfg: &RunConfig) -> anyhow::Result<u8> {
    let sc = cfg.scenario()?;
    sc.validate().map_err(|e| config_err(e.to_string()))?;
    let out = cfg.data_dir()?;
    let ds = simulate(&sc).with_context(|| format!("simulating {}", sc.name))?;
    for p in write_dataset(&ds, out)? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn inputs(cfg: &RunConfig, ds: &RecordedDataset) -> anyhow::Result<Vec<GeneratorInput>> {
    let mut inputs = inputs_from_recorded(ds, &cfg.prior, cfg.seed.unwrap_or(0))?;
    if let Some(priors) = cfg.priors()? {
        for input in &mut inputs {
            input.prior = priors
                .get(&input.name)
                .cloned()
                .ok_or_else(|| config_err(format!("priors file has no entry for {}", input.name)))?;
        }
    }
    Ok(inputs)
}

fn settings(cfg: &RunConfig, ds: &RecordedDataset) -> anyhow::Result<LocateSettings> {
    let bands = match &cfg.bands {
        Some(b) => b.clone(),
        None => label_bands(&ds.meta.labels, cfg.band_halfwidth_hz),
    };
    let nyquist = ds.meta.fs / 2.0;
    if let Some(b) = bands.iter().find(|b| b.freq_hz + b.halfwidth_hz > nyquist) {
        return Err(config_err(format!("band {} ± {} Hz exceeds Nyquist {nyquist} Hz", b.freq_hz, b.halfwidth_hz)));
    }
    let s = LocateSettings {
        bands,
        solver: cfg.solver.clone(),
        lambda0: cfg.lambda0,
        iota: cfg.iota,
        dft_constant: cfg.dft.constant(),
        stage: cfg.stage,
    };
    s.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(s)
}

fn cmd_locate(cfg: &RunConfig) -> anyhow::Result<u8> {
    let t0 = Instant::now();
    let data = cfg.data_dir()?;
    if !data.join(LABELS_FILE).is_file() {
        return Err(config_err(format!("{} has no {LABELS_FILE}", data.display())));
    }
    let out = cfg.output_dir()?;
    let ds = read_dataset(data).with_context(|| format!("reading {}", data.display()))?;
    let settings = settings(cfg, &ds)?;
    let inputs = inputs(cfg, &ds)?;
    let outcome = locate(&inputs, &settings)?;
    let report = Report::build(&ds.meta.scenario, &settings, &outcome, t0.elapsed().as_secs_f64());
    write_outputs(&report, out)?;
    print!("{}", report.render_table());
    for r in outcome.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("error: {}", r.error.as_ref().unwrap());
    }
    Ok(if report.all_converged() { 0 } else { EXIT_NOT_CONVERGED })
}

fn write_outputs(report: &Report, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    report.write(out.join("report.json"))?;
    fs::write(out.join("report.txt"), report.render_table())?;
    report.write_figure_tables(out)?;
    Ok(())
}

fn cmd_report(path: &Path, figures: Option<&Path>) -> anyhow::Result<u8> {
    if !path.is_file() {
        return Err(config_err(format!("report file {} does not exist", path.display())));
    }
    let report = Report::read(path).with_context(|| format!("reading {}", path.display()))?;
    print!("{}", report.render_table());
    if let Some(dir) = figures {
        report.write_figure_tables(dir)?;
    }
    Ok(0)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Simulate { config, scenario, out, seed } => {
            let mut cfg = load(&config)?;
            cfg.scenario = scenario.or(cfg.scenario);
            cfg.data_dir = out.or(cfg.data_dir);
            cfg.seed = seed.or(cfg.seed);
            cmd_simulate(&cfg)
        }
        Command::Locate {
            config,
            data,
            out,
            seed,
            lambda0,
            iota,
            stage,
            paper_dft_constant,
        } => {
            let mut cfg = load(&config)?;
            cfg.data_dir = data.or(cfg.data_dir);
            cfg.output_dir = out.or(cfg.output_dir);
            cfg.seed = seed.or(cfg.seed);
            cfg.lambda0 = lambda0.unwrap_or(cfg.lambda0);
            cfg.iota = iota.or(cfg.iota);
            if let Some(s) = stage {
                cfg.stage = s.into();
            }
            if paper_dft_constant {
                cfg.dft = DftMode::Paper;
            }
            cmd_locate(&cfg)
        }
        Command::Report { path, figures } => cmd_report(&path, figures.as_deref()),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<foloc::Error>(), Some(foloc::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { 1 })
        }
    }
}
