use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cia_bench::report::{write_csv_to, RunReport};
use cia_bench::runner::reproduce::{reproduce, TableId};
use cia_bench::runner::{data_root_from_env, download_hint, preflight, DatasetCache, ExperimentConfig, RunOptions, DATA_ROOT_ENV};
use cia_bench::Error;

/// Community inference attack benchmark for federated and gossip
/// recommender training.
#[derive(Parser, Debug)]
#[command(name = "cia-bench", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,

    /// Directory holding the datasets.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every cell of a TOML (or echoed JSON) config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate one result table (t2..t8).
    Reproduce {
        table: TableId,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip rows whose dataset is missing instead of failing.
        #[arg(long)]
        only_available: bool,
    },
    /// Check a config and the files it refers to without running it.
    Validate { config: PathBuf },
}

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATASET: u8 = 3;

fn fail(err: &Error, root: &std::path::Path, manifest: Option<&cia_bench::data::DatasetManifest>) -> ExitCode {
    match err {
        Error::Config(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Error::MissingDataset { name, path } => {
            match manifest.filter(|m| &m.name == name) {
                Some(m) => eprintln!("error: {}", download_hint(m, root)),
                None => eprintln!("error: dataset `{name}` not found at {}", path.display()),
            }
            ExitCode::from(EXIT_DATASET)
        }
        other => {
            eprintln!("error: {other}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}

fn finish(report: &RunReport) -> ExitCode {
    let rows: Vec<_> = report.cells.iter().map(|c| c.summary_row()).collect();
    if let Err(e) = write_csv_to(std::io::stdout().lock(), &rows) {
        eprintln!("error: {e}");
    }
    if report.complete {
        ExitCode::SUCCESS
    } else {
        eprintln!("run incomplete; the partial report is flagged");
        ExitCode::from(EXIT_FAILED)
    }
}

fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ExitCode> {
    let cfg = ExperimentConfig::from_file(path).map_err(|e| match e {
        Error::Io { .. } => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Error::Config(msg) => {
            eprintln!("error: {}: {msg}", path.display());
            ExitCode::from(EXIT_CONFIG)
        }
        other => {
            eprintln!("error: {}: {other}", path.display());
            ExitCode::from(EXIT_CONFIG)
        }
    })?;
    if let Err(d) = cfg.validate() {
        eprintln!("error: {} is invalid:\n{d}", path.display());
        return Err(ExitCode::from(EXIT_CONFIG));
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_FAILED);
        }
    }
    let root = cli.data_root.clone().unwrap_or_else(data_root_from_env);

    match cli.command {
        Command::Validate { config } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let cells = match cfg.expand(cli.seed_offset) {
                Ok(c) => c,
                Err(e) => return fail(&e, &root, None),
            };
            let mut cache = DatasetCache::new(Some(root.clone()));
            for c in &cells {
                let checked = cache.get(&c.dataset).and_then(|ds| preflight(c, &ds));
                if let Err(e) = checked {
                    return fail(&e, &root, Some(&c.dataset));
                }
            }
            println!("{}: ok, {} cell(s)", config.display(), cells.len());
            ExitCode::SUCCESS
        }
        Command::Run { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let manifest = cfg.manifest().ok();
            let opts = RunOptions {
                data_root: Some(root.clone()),
                seed_offset: cli.seed_offset,
                output_dir: out,
            };
            match cia_bench::runner::run_experiment(&cfg, &opts) {
                Ok(report) => finish(&report),
                Err(e) => fail(&e, &root, manifest.as_ref()),
            }
        }
        Command::Reproduce {
            table,
            out,
            only_available,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(table.name()));
            let mut cache = DatasetCache::new(Some(root.clone()));
            match reproduce(table, &mut cache, cli.seed_offset, only_available, &out) {
                Ok(r) => {
                    if let Err(e) = write_csv_to(std::io::stdout().lock(), &r.rows) {
                        eprintln!("error: {e}");
                    }
                    if r.report.complete {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAILED)
                    }
                }
                Err(e) => {
                    let manifests = [
                        cia_bench::runner::reproduce::movielens(),
                        cia_bench::runner::reproduce::foursquare(),
                        cia_bench::runner::reproduce::gowalla(),
                    ];
                    let m = match &e {
                        Error::MissingDataset { name, .. } => manifests.iter().find(|m| &m.name == name),
                        _ => None,
                    };
                    fail(&e, &root, m)
                }
            }
        }
    }
}
