use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AdversaryConfig;
use crate::data::DatasetManifest;
use crate::defenses::{DefenseKind, DefensePolicy};
use crate::error::{Error, Result};
use crate::federated::FedConfig;
use crate::gossip::{GossipConfig, PeerSampler};
use crate::models::{ModelKind, TrainConfig};

/// Training protocol of one cell. The gossip peer sampler is implied by
/// the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolConfig {
    Fed(FedConfig),
    RandGossip(GossipConfig),
    PersGossip(GossipConfig),
}

impl ProtocolConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolConfig::Fed(_) => "fed",
            ProtocolConfig::RandGossip(_) => "rand_gossip",
            ProtocolConfig::PersGossip(_) => "pers_gossip",
        }
    }

    pub fn rounds(&self) -> usize {
        match self {
            ProtocolConfig::Fed(c) => c.rounds,
            ProtocolConfig::RandGossip(c) | ProtocolConfig::PersGossip(c) => c.rounds,
        }
    }

    pub fn is_gossip(&self) -> bool {
        !matches!(self, ProtocolConfig::Fed(_))
    }

    /// Gossip config with the sampler forced to match the variant.
    pub fn gossip(&self) -> Option<GossipConfig> {
        match self {
            ProtocolConfig::Fed(_) => None,
            ProtocolConfig::RandGossip(c) => Some(GossipConfig {
                sampler: PeerSampler::Random,
                ..c.clone()
            }),
            ProtocolConfig::PersGossip(c) => Some(GossipConfig {
                sampler: PeerSampler::Personalized,
                ..c.clone()
            }),
        }
    }
}

/// A dataset given inline or as a path to a JSON manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Inline(DatasetManifest),
    Manifest(PathBuf),
}

// Hand-written so a bad inline table reports the offending field instead
// of "did not match any variant".
impl<'de> Deserialize<'de> for DatasetRef {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = DatasetRef;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a manifest path or a dataset table")
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<DatasetRef, E> {
                Ok(DatasetRef::Manifest(PathBuf::from(v)))
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(self, map: A) -> std::result::Result<DatasetRef, A::Error> {
                DatasetManifest::deserialize(serde::de::value::MapAccessDeserializer::new(map)).map(DatasetRef::Inline)
            }
        }
        de.deserialize_any(V)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default)]
    pub protocols: Vec<ProtocolConfig>,
    #[serde(default)]
    pub defenses: Vec<DefensePolicy>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_name() -> String {
    "experiment".into()
}

/// A run config as written in TOML (or echoed back as JSON). A `[matrix]`
/// block expands into the Cartesian product of its protocols and defenses;
/// every seed is a separate cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub protocol: Option<ProtocolConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub defense: Option<DefensePolicy>,
    #[serde(default)]
    pub adversary: Option<AdversaryConfig>,
    #[serde(default)]
    pub matrix: Option<MatrixConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Field-level problems found while validating a config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics(pub Vec<String>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {d}")?;
        }
        Ok(())
    }
}

/// One fully resolved cell of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct CellConfig {
    pub name: String,
    pub dataset: DatasetManifest,
    pub model: ModelKind,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub defense: DefensePolicy,
    pub adversary: Option<AdversaryConfig>,
    pub seed: u64,
}

impl CellConfig {
    /// The cell as a standalone config, suitable for `run`.
    pub fn echo(&self) -> ExperimentConfig {
        ExperimentConfig {
            name: self.name.clone(),
            dataset: DatasetRef::Inline(self.dataset.clone()),
            model: self.model,
            protocol: Some(self.protocol.clone()),
            train: self.train.clone(),
            defense: Some(self.defense),
            adversary: self.adversary.clone(),
            matrix: None,
            seeds: vec![self.seed],
            output_dir: None,
        }
    }

    pub fn defense_label(&self) -> String {
        defense_label(&self.defense)
    }
}

pub fn defense_label(d: &DefensePolicy) -> String {
    match d.kind {
        DefenseKind::None => "none".into(),
        DefenseKind::ShareLess => format!("share_less(tau={})", d.tau),
        DefenseKind::DpSgd => format!("dp_sgd(C={},noise={})", d.clip, d.noise_mult),
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the file ends in `.json`. Relative
    /// manifest paths are resolved against the config's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let DatasetRef::Manifest(m) = &mut cfg.dataset {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.dataset {
            DatasetRef::Inline(m) => Ok(m.clone()),
            DatasetRef::Manifest(p) => DatasetManifest::from_json_file(p),
        }
    }

    /// Checks everything that does not need the data loaded.
    pub fn validate(&self) -> std::result::Result<(), Diagnostics> {
        let mut diags = Vec::new();
        let mut push = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                let msg = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                diags.push(format!("{field}: {msg}"));
            }
        };
        if self.seeds.is_empty() {
            push("seeds", Err(Error::Config("at least one seed is needed".into())));
        }
        match self.manifest() {
            Ok(m) => {
                if !(0.0..1.0).contains(&m.test_fraction) {
                    push("dataset.test_fraction", Err(Error::Config(format!("{} outside [0, 1)", m.test_fraction))));
                }
            }
            Err(e) => push("dataset", Err(e)),
        }
        push("train", self.train.validate());
        let protocols = self.protocols();
        if protocols.is_empty() {
            push("protocol", Err(Error::Config("give a [protocol] block or matrix.protocols".into())));
        }
        if self.protocol.is_some() && self.matrix.as_ref().is_some_and(|m| !m.protocols.is_empty()) {
            push("protocol", Err(Error::Config("use either [protocol] or matrix.protocols, not both".into())));
        }
        if self.defense.is_some() && self.matrix.as_ref().is_some_and(|m| !m.defenses.is_empty()) {
            push("defense", Err(Error::Config("use either [defense] or matrix.defenses, not both".into())));
        }
        for (i, p) in protocols.iter().enumerate() {
            let field = if self.protocol.is_some() { "protocol".to_string() } else { format!("matrix.protocols[{i}]") };
            match p {
                ProtocolConfig::Fed(c) => push(&field, c.validate()),
                ProtocolConfig::RandGossip(c) => {
                    // P is checked against the user count once data is loaded
                    push(&field, c.validate(usize::MAX));
                    if c.sampler != PeerSampler::Random {
                        push(&field, Err(Error::Config("rand_gossip implies sampler = random".into())));
                    }
                }
                ProtocolConfig::PersGossip(c) => push(&field, c.validate(usize::MAX)),
            }
        }
        for (i, d) in self.defenses().iter().enumerate() {
            let field = if self.defense.is_some() { "defense".to_string() } else { format!("matrix.defenses[{i}]") };
            push(&field, d.validate());
        }
        if let Some(a) = &self.adversary {
            push("adversary", a.validate());
            if a.aia.is_some() && protocols.iter().any(|p| p.is_gossip()) {
                push("adversary.aia", Err(Error::Config("the AIA proxy needs the fed protocol".into())));
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Diagnostics(diags))
        }
    }

    fn protocols(&self) -> Vec<ProtocolConfig> {
        match (&self.protocol, &self.matrix) {
            (Some(p), _) => vec![p.clone()],
            (None, Some(m)) => m.protocols.clone(),
            (None, None) => Vec::new(),
        }
    }

    fn defenses(&self) -> Vec<DefensePolicy> {
        match (&self.defense, &self.matrix) {
            (Some(d), _) => vec![*d],
            (None, Some(m)) if !m.defenses.is_empty() => m.defenses.clone(),
            _ => vec![DefensePolicy::none()],
        }
    }

    /// Cells in protocol-major, then defense, then seed order. `seed_offset`
    /// is added to every seed.
    pub fn expand(&self, seed_offset: u64) -> Result<Vec<CellConfig>> {
        let dataset = self.manifest()?;
        let mut cells = Vec::new();
        for p in self.protocols() {
            for d in self.defenses() {
                for &s in &self.seeds {
                    cells.push(CellConfig {
                        name: self.name.clone(),
                        dataset: dataset.clone(),
                        model: self.model,
                        protocol: p.clone(),
                        train: self.train.clone(),
                        defense: d,
                        adversary: self.adversary.clone(),
                        seed: s.wrapping_add(seed_offset),
                    });
                }
            }
        }
        Ok(cells)
    }
}
