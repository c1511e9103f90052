use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use specvol::io::pipeline::{self, Layout, Timings};
use specvol::io::PipelineConfig;

/// Spectral-volume reconstruction of continuously heterogeneous densities.
#[derive(Parser, Debug)]
#[command(name = "specvol", version)]
struct Cli {
    /// INI configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Results directory, overriding `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Keep the results tree byte-identical across runs; timings go to stderr.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Dataset seed, overriding `[dataset] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output; repeat for debug messages.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset into `<out>/dataset`.
    Simulate,
    /// Low-resolution mean, covariance and PCA coordinates.
    Lowres,
    /// Affinity graph and Laplacian eigenvectors from the PCA coordinates.
    Embed,
    /// Solve for the spectral volumes.
    ReconstructSpectral,
    /// Write per-image reconstructions.
    Reconstruct {
        /// Image indices counted from zero, comma separated; defaults to
        /// `[eval] reconstruct`.
        #[arg(long, value_delimiter = ',')]
        index: Option<Vec<usize>>,
    },
    /// Score the spectral volumes against the simulated ground truth.
    Eval,
    /// Run every stage.
    Pipeline,
}

fn load_config(cli: &Cli) -> specvol::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
    }
    if cli.deterministic {
        cfg.specvols.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> specvol::Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cfg.output);
    let mut t = Timings::default();
    match &cli.command {
        Command::Pipeline => {
            let report = pipeline::run_pipeline(&cfg)?;
            for (i, v) in report.low_band_fsc.iter().enumerate() {
                println!("r={:<3} low-band FSC {v:.4}", i + 1);
            }
            if let Some(w) = report.embedding.winding {
                println!("winding {w}");
            }
            if let Some(rank) = report.embedding.rank {
                println!("embedding rank {rank}");
            }
            println!("results in {}", cfg.output.display());
            return Ok(());
        }
        Command::Simulate => {
            let ds = pipeline::run_simulate(&cfg, &layout, &mut t)?;
            println!("n={} N={} sigma2={:.6e}", ds.len(), ds.n, ds.sigma2);
        }
        Command::Lowres => {
            let ds = pipeline::load_dataset(&layout)?;
            let coords = pipeline::run_lowres(&ds, &cfg, &layout, &mut t)?;
            println!("{} coordinates of dimension {}", coords.len(), coords.q());
        }
        Command::Embed => {
            let coords = pipeline::read_betas(&layout.lowres().join("betas.csv"))?;
            let basis = pipeline::run_embed(&coords, &cfg, &layout, &mut t)?;
            println!("eigenvalues {:?}", basis.eigvals);
        }
        Command::ReconstructSpectral => {
            let ds = pipeline::load_dataset(&layout)?;
            let basis = pipeline::load_basis(&layout)?;
            let sv = pipeline::run_specvols(&ds, &basis, &cfg, &layout, &mut t)?;
            println!("{} spectral volumes", sv.r());
        }
        Command::Reconstruct { index } => {
            let basis = pipeline::load_basis(&layout)?;
            let sv = pipeline::load_specvols(&layout)?;
            let indices = index
                .clone()
                .unwrap_or_else(|| cfg.eval.reconstruct.clone());
            for p in pipeline::run_reconstruct(&sv, &basis, &indices, &layout)? {
                println!("{}", p.display());
            }
        }
        Command::Eval => {
            let ds = pipeline::load_dataset(&layout)?;
            let basis = pipeline::load_basis(&layout)?;
            let sv = pipeline::load_specvols(&layout)?;
            let report = pipeline::run_eval(&ds, &sv, &basis, &cfg, &layout, &mut t)?;
            for (i, v) in report.low_band_fsc.iter().enumerate() {
                println!("r={:<3} low-band FSC {v:.4}", i + 1);
            }
        }
    }
    t.report(&layout.root, cfg.specvols.deterministic)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
