use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biliscope::denoiser::save_weights;
use biliscope::phantom::{generate_corpus_with, write_corpus, CorpusSpec};
use biliscope::pipeline::{
    build_dataset, evaluate_all, read_dataset_csv, read_scaler, train_bundle, train_denoiser, write_intermediates,
    Pipeline, PipelineConfig,
};
use biliscope::service::{serve, AppState, ServiceConfig};
use biliscope::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biliscope", version, about = "Biliary-tree MRI screening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a balanced synthetic corpus with ground-truth masks and a manifest.
    Phantom {
        /// Images per class.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the cascade on one image and write numbered intermediates.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract scaled features for every manifest entry.
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate the configured models on a feature CSV.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train every model on all rows and save the bundle here.
        #[arg(long)]
        models_out: Option<PathBuf>,
    },
    /// Train the residual denoiser on clean phantoms.
    TrainDenoiser {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "biliscope-store")]
        storage_dir: PathBuf,
        /// Defaults to the configured worker count.
        #[arg(long)]
        worker_count: Option<usize>,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), PipelineConfig::load)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { n, out, config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = generate_corpus_with(&CorpusSpec::new(n, cfg.phantom, seed.unwrap_or(cfg.rng_seed)))?;
            let manifest = write_corpus(&out, &corpus)?;
            println!("{}", manifest.display());
        }
        Command::Run { config, image, out } => {
            let pipeline = Pipeline::new(load_config(config.as_deref())?)?;
            let bytes = fs::read(&image).map_err(|e| Error::Io(format!("{}: {e}", image.display())))?;
            let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let res = pipeline.run_bytes(&id, &bytes);
            write_intermediates(&res, &out)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("result.json"), res.to_json())?;
            println!("{}", res.to_json());
            if let Some(err) = res.error {
                return Err(Error::Io(err.to_string()));
            }
        }
        Command::Dataset { config, manifest, out } => {
            let ds = build_dataset(&load_config(config.as_deref())?, &manifest)?;
            ds.write_csv(&out)?;
            eprintln!("{} rows, {} degenerate", ds.rows.len(), ds.degenerate_count());
        }
        Command::Eval { config, features, out, models_out } => {
            let cfg = load_config(config.as_deref())?;
            let rows = read_dataset_csv(&features)?;
            let report = evaluate_all(&cfg, &rows)?;
            fs::write(&out, report.to_json()?)?;
            for m in &report.models {
                eprintln!("{:<4} accuracy {:.3} auc {:.3}", m.model, m.accuracy, m.auc);
            }
            if let Some(dir) = models_out {
                train_bundle(&cfg, &rows, &read_scaler(&features)?)?.save(&dir)?;
            }
        }
        Command::TrainDenoiser { config, out } => {
            let net = train_denoiser(&load_config(config.as_deref())?)?;
            fs::write(&out, save_weights(&net))?;
        }
        Command::Serve { config, port, storage_dir, worker_count, ui_dir } => {
            let cfg = load_config(config.as_deref())?;
            let svc = ServiceConfig { worker_count: worker_count.unwrap_or(cfg.worker_count), ui_dir, ..ServiceConfig::new(storage_dir) };
            let state = AppState::open(Pipeline::new(cfg)?, svc)?;
            let addr = SocketAddr::from(([0, 0, 0, 0], port));
            eprintln!("listening on {addr}");
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
