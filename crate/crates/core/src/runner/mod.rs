//! Experiment execution: config cells to reports on disk.

mod config;
pub mod reproduce;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub use config::{defense_label, CellConfig, DatasetRef, Diagnostics, ExperimentConfig, MatrixConfig, ProtocolConfig};

use crate::attack::{AdversaryConfig, AdversaryHook, CiaHarness};
use crate::data::{DatasetManifest, InteractionDataset};
use crate::defenses::{gaussian_rdp_epsilon, DefenseKind};
use crate::error::{Error, Result};
use crate::federated::{run_federated, RunOutcome};
use crate::gossip::run_gossip;
use crate::linalg::mix_seed;
use crate::metrics::aggregate_report;
use crate::models::{ModelKind, TrainConfig};
use crate::report::{
    build_stamp, AiaSummary, CellLabel, DatasetStats, ExperimentReport, MiaSummary, ReportBody, ReportMeta, RunReport,
};

/// Environment variable holding the dataset root directory.
pub const DATA_ROOT_ENV: &str = "CIA_BENCH_DATA";

/// Dataset root from the environment, else `./data`.
pub fn data_root_from_env() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// How to obtain a dataset the manifest points at.
pub fn download_hint(manifest: &DatasetManifest, root: &Path) -> String {
    let target = manifest.resolve(Some(root));
    let how = match manifest.name.as_str() {
        "ml-100k" | "movielens-100k" => format!(
            "curl -LO https://files.grouplens.org/datasets/movielens/ml-100k.zip && unzip -j ml-100k.zip ml-100k/u.data -d {}",
            target.parent().unwrap_or(root).display()
        ),
        "gowalla-nyc" => "download loc-gowalla_totalCheckins.txt.gz from https://snap.stanford.edu/data/loc-gowalla.html, \
             keep check-ins inside New York City and write `user<TAB>location<TAB>` lines (cut -f1,5)"
            .to_string(),
        "foursquare-nyc" => "use the Foursquare NYC check-in dump (dataset_TSMC2014_NYC.txt); its first two \
             tab-separated columns are user and venue and it can be used as is"
            .to_string(),
        _ => "place the interaction file at the path above".to_string(),
    };
    format!(
        "dataset `{}` not found at {}\n  {}\n  (set {DATA_ROOT_ENV} to change the data root)",
        manifest.name,
        target.display(),
        how
    )
}

/// Loads datasets once per manifest.
#[derive(Default)]
pub struct DatasetCache {
    root: Option<PathBuf>,
    loaded: HashMap<String, Arc<InteractionDataset>>,
}

impl DatasetCache {
    pub fn new(root: Option<PathBuf>) -> Self {
        DatasetCache {
            root,
            loaded: HashMap::new(),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn get(&mut self, manifest: &DatasetManifest) -> Result<Arc<InteractionDataset>> {
        let key = serde_json::to_string(manifest)?;
        if let Some(ds) = self.loaded.get(&key) {
            return Ok(ds.clone());
        }
        let ds = Arc::new(manifest.load(self.root.as_deref())?);
        log::info!(
            "loaded {}: {} users, {} items, {} train interactions",
            ds.name,
            ds.n_users(),
            ds.n_items(),
            ds.n_train_interactions()
        );
        self.loaded.insert(key, ds.clone());
        Ok(ds)
    }
}

/// Component configs with seeds derived from the cell seed.
struct Seeded {
    train: TrainConfig,
    adversary: Option<AdversaryConfig>,
}

fn seeded(cell: &CellConfig) -> Seeded {
    Seeded {
        train: TrainConfig {
            seed: mix_seed(cell.seed, &[1, cell.train.seed]),
            ..cell.train.clone()
        },
        adversary: cell.adversary.clone().map(|a| AdversaryConfig {
            seed: mix_seed(cell.seed, &[3, a.seed]),
            ..a
        }),
    }
}

/// Checks that need the loaded data (view size, explicit targets, K).
pub fn preflight(cell: &CellConfig, dataset: &InteractionDataset) -> Result<()> {
    if let Some(g) = cell.protocol.gossip() {
        g.validate(dataset.n_users())?;
    }
    cell.train.validate()?;
    if let Some(a) = &cell.adversary {
        if a.k > dataset.n_users() {
            return Err(Error::Config(format!(
                "adversary.K={} exceeds the {} users of {}",
                a.k,
                dataset.n_users(),
                dataset.name
            )));
        }
        if a.target.is_some() {
            a.build_targets(dataset, &[])?;
        }
    }
    Ok(())
}

/// Runs one cell. Setup errors are returned; failures after training
/// started come back as an incomplete report.
pub fn run_cell(cell: &CellConfig, dataset: &InteractionDataset) -> Result<ExperimentReport> {
    preflight(cell, dataset)?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let s = seeded(cell);

    let mut harness = match (&s.adversary, &cell.protocol) {
        (None, _) => None,
        (Some(a), ProtocolConfig::Fed(_)) => Some(CiaHarness::server(dataset, a, cell.model, &s.train)?),
        (Some(a), _) => Some(CiaHarness::gossip(dataset, a, cell.model, &s.train)?),
    };
    let hook = harness.as_mut().map(|h| h as &mut dyn AdversaryHook);
    let outcome = match &cell.protocol {
        ProtocolConfig::Fed(f) => {
            let f = crate::federated::FedConfig {
                seed: mix_seed(cell.seed, &[2, f.seed]),
                ..f.clone()
            };
            run_federated(dataset, cell.model, &s.train, &f, &cell.defense, hook)?
        }
        _ => {
            let g = cell.protocol.gossip().expect("gossip variant");
            let g = crate::gossip::GossipConfig {
                seed: mix_seed(cell.seed, &[2, g.seed]),
                ..g
            };
            run_gossip(dataset, cell.model, &s.train, &g, &cell.defense, hook)?
        }
    };
    let body = build_body(cell, dataset, &outcome, harness.as_ref())?;
    if let Some(reason) = &body.incomplete_reason {
        log::warn!("{}: run incomplete: {reason}", cell.name);
    }
    Ok(ExperimentReport {
        body,
        meta: ReportMeta {
            wall_clock_secs: started.elapsed().as_secs_f64(),
            started_unix,
            build: build_stamp(),
            threads: rayon::current_num_threads(),
        },
    })
}

fn build_body(
    cell: &CellConfig,
    dataset: &InteractionDataset,
    outcome: &RunOutcome,
    harness: Option<&CiaHarness>,
) -> Result<ReportBody> {
    let n = dataset.n_users();
    let mut incomplete_reason = outcome.incomplete.clone();
    let (mut cia, mut mia, mut aia, mut targets, mut checkpoints, mut observations) =
        (None, Vec::new(), None, Vec::new(), Vec::new(), 0);
    if let (Some(h), Some(a)) = (harness, &cell.adversary) {
        targets = h.outcomes();
        checkpoints = h.checkpoints.clone();
        observations = h.observations();
        if !checkpoints.is_empty() {
            let traces: Vec<_> = targets.iter().map(|o| o.cia.clone()).collect();
            cia = Some(aggregate_report(&traces, a.k, n)?);
            for (j, &rho) in h.rhos().iter().enumerate() {
                let traces: Vec<_> = targets.iter().map(|o| o.mia[j].clone()).collect();
                mia.push(MiaSummary {
                    rho,
                    summary: aggregate_report(&traces, a.k, n)?,
                });
            }
        } else if incomplete_reason.is_none() {
            incomplete_reason = Some("no checkpoint was recorded".into());
        }
        let launches = targets.iter().map(|o| o.aia.len()).min().unwrap_or(0);
        if a.aia.is_some() && launches > 0 {
            let mean_accuracy: Vec<f64> = (0..launches)
                .map(|r| targets.iter().map(|o| o.aia[r]).sum::<f64>() / targets.len() as f64)
                .collect();
            let max_accuracy = mean_accuracy.iter().copied().fold(0.0, f64::max);
            aia = Some(AiaSummary {
                mean_accuracy,
                max_accuracy,
            });
        }
    }
    let dp_epsilon_advisory = (cell.defense.kind == DefenseKind::DpSgd).then(|| {
        // local rounds each user took part in
        let steps = match &cell.protocol {
            ProtocolConfig::Fed(f) => (outcome.rounds_completed as f64 * f.participation_fraction).ceil() as usize,
            _ => outcome.rounds_completed,
        };
        gaussian_rdp_epsilon(cell.defense.noise_mult, steps, cell.defense.delta)
    });
    let echo = serde_json::to_value(cell.echo())?;
    Ok(ReportBody {
        config: echo,
        label: CellLabel {
            dataset: cell.dataset.name.clone(),
            protocol: cell.protocol.name().to_string(),
            model: cell.model.to_string(),
            defense: cell.defense_label(),
        },
        dataset: DatasetStats {
            name: dataset.name.clone(),
            n_users: n,
            n_items: dataset.n_items(),
            n_train: dataset.n_train_interactions(),
            n_test: dataset.n_interactions() - dataset.n_train_interactions(),
        },
        complete: incomplete_reason.is_none(),
        incomplete_reason,
        rounds_completed: outcome.rounds_completed,
        messages: outcome.messages,
        adversary_observations: observations,
        checkpoints,
        cia,
        mia,
        aia,
        utility_metric: match cell.model {
            ModelKind::Gmf => "hr@20".into(),
            ModelKind::Prme => "f1@20".into(),
        },
        utility: outcome.utility.clone(),
        final_utility: outcome.utility.last().map(|u| u.value),
        dp_epsilon_advisory,
        targets,
    })
}

/// Options shared by `run` and `reproduce`.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub data_root: Option<PathBuf>,
    pub seed_offset: u64,
    /// Overrides the config's `output_dir`.
    pub output_dir: Option<PathBuf>,
}

/// Runs every cell, rewriting `report.json` and `summary.csv` after each
/// one so an interrupted matrix still leaves a (flagged) partial report.
pub fn run_cells(cells: &[CellConfig], cache: &mut DatasetCache, out: Option<&Path>) -> Result<RunReport> {
    // data-dependent checks for every cell before anything runs
    for c in cells {
        let ds = cache.get(&c.dataset)?;
        preflight(c, &ds)?;
    }
    let mut report = RunReport {
        complete: false,
        cells: Vec::with_capacity(cells.len()),
    };
    for (i, c) in cells.iter().enumerate() {
        log::info!(
            "cell {}/{}: {} {} {} seed {}",
            i + 1,
            cells.len(),
            c.protocol.name(),
            c.model,
            c.defense_label(),
            c.seed
        );
        let ds = cache.get(&c.dataset)?;
        let cell = run_cell(c, &ds)?;
        report.cells.push(cell);
        report.complete = i + 1 == cells.len() && report.cells.iter().all(|c| c.body.complete);
        if let Some(dir) = out {
            report.write(dir)?;
        }
    }
    Ok(report)
}

/// `cia-bench run`: validate, expand and execute a config file.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    if let Err(d) = cfg.validate() {
        return Err(Error::Config(format!("config is invalid:\n{d}")));
    }
    let cells = cfg.expand(opts.seed_offset)?;
    let out = opts
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    let mut cache = DatasetCache::new(opts.data_root.clone());
    run_cells(&cells, &mut cache, Some(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionDataset;
    use crate::federated::FedConfig;
    use crate::gossip::GossipConfig;

    fn toy_dataset() -> InteractionDataset {
        // two taste groups of four users over ten items
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..8usize {
            let base = if u < 4 { 0 } else { 5 };
            train.push(vec![base, base + 1, base + 2, base + 3]);
            test.push(vec![base + 4]);
        }
        InteractionDataset::from_sets("toy", 10, train, test).unwrap()
    }

    fn toy_cell(protocol: ProtocolConfig) -> CellConfig {
        CellConfig {
            name: "toy".into(),
            dataset: DatasetManifest {
                name: "toy".into(),
                format: crate::data::DatasetFormat::CheckinTsv,
                path: "unused".into(),
                test_fraction: 0.2,
                seed: 0,
            },
            model: ModelKind::Gmf,
            protocol,
            train: TrainConfig {
                dim: 4,
                ..TrainConfig::default()
            },
            defense: Default::default(),
            adversary: Some(AdversaryConfig {
                k: 3,
                n_adversaries: Some(4),
                rho: vec![0.5],
                ..Default::default()
            }),
            seed: 5,
        }
    }

    #[test]
    fn fed_cell_produces_a_complete_body() {
        let ds = toy_dataset();
        let cell = toy_cell(ProtocolConfig::Fed(FedConfig {
            rounds: 4,
            eval_every: 2,
            ..Default::default()
        }));
        let r = run_cell(&cell, &ds).unwrap();
        assert!(r.body.complete);
        assert_eq!(r.body.checkpoints, vec![2, 4]);
        assert_eq!(r.body.utility.len(), 2);
        assert_eq!(r.body.mia.len(), 1);
        let cia = r.body.cia.unwrap();
        assert_eq!(cia.aac.len(), 2);
        assert!((cia.random_bound - 3.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn gossip_cell_bodies_are_reproducible() {
        let ds = toy_dataset();
        let cell = toy_cell(ProtocolConfig::RandGossip(GossipConfig {
            rounds: 3,
            p: 2,
            eval_every: 1,
            ..Default::default()
        }));
        let a = run_cell(&cell, &ds).unwrap();
        let b = run_cell(&cell, &ds).unwrap();
        assert_eq!(serde_json::to_string(&a.body).unwrap(), serde_json::to_string(&b.body).unwrap());
        let mut other = cell.clone();
        other.seed += 1;
        assert_ne!(seeded(&cell).train.seed, seeded(&other).train.seed);
    }

    #[test]
    fn preflight_rejects_oversized_views_and_k() {
        let ds = toy_dataset();
        let cell = toy_cell(ProtocolConfig::RandGossip(GossipConfig {
            p: 8,
            ..Default::default()
        }));
        assert!(matches!(preflight(&cell, &ds), Err(Error::Config(_))));
        let mut cell = toy_cell(ProtocolConfig::Fed(FedConfig::default()));
        cell.adversary.as_mut().unwrap().k = 9;
        assert!(matches!(preflight(&cell, &ds), Err(Error::Config(_))));
    }

    #[test]
    fn missing_dataset_hint_mentions_the_env_var() {
        let m = DatasetManifest {
            name: "ml-100k".into(),
            format: crate::data::DatasetFormat::Movielens100k,
            path: "ml-100k/u.data".into(),
            test_fraction: 0.2,
            seed: 7,
        };
        let hint = download_hint(&m, Path::new("/nowhere"));
        assert!(hint.contains("/nowhere/ml-100k/u.data"));
        assert!(hint.contains(DATA_ROOT_ENV));
        let mut cache = DatasetCache::new(Some("/nowhere".into()));
        assert!(matches!(cache.get(&m), Err(Error::MissingDataset { .. })));
    }
}
