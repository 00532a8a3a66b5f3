//! Run configuration (TOML) and the genome text format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{max_flops, min_flops, GroupVector, ModuleKind, NetworkConfig};
use crate::error::{Error, Result};
use crate::evolve::SearchConfig;
use crate::train::TrainConfig;

/// Everything one run needs. The TOML config file mirrors this structure
/// field for field; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub module_kind: String,
    pub width_multiplier: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            module_kind: "M1".into(),
            width_multiplier: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub population_size: usize,
    pub top_k: usize,
    pub num_crossover: usize,
    pub num_mutation: usize,
    pub max_iterations: usize,
    /// Absolute FLOP budget. When absent, the midpoint of the feasible
    /// range (halfway between the cheapest and the all-groups-1 genome).
    pub flop_budget: Option<f64>,
    pub mutation_prob: f64,
    /// Separate search seed; defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            population_size: 50,
            top_k: 10,
            num_crossover: 25,
            num_mutation: 25,
            max_iterations: 20,
            flop_budget: None,
            mutation_prob: 0.1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub supernet_epochs: usize,
    pub retrain_epochs: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            supernet_epochs: 5,
            retrain_epochs: 20,
        }
    }
}

/// Position of the default search budget inside the feasible FLOP range:
/// `min + fraction·(max − min)`. A fraction of the range (rather than of the
/// maximum) stays feasible no matter how much of the network's cost is the
/// fixed full-precision floor.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.5;

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.name.is_empty() {
            return Err(Error::config("dataset.name must be set"));
        }
        if !(self.network.width_multiplier > 0.0) {
            return Err(Error::config("network.width_multiplier must be positive"));
        }
        ModuleKind::parse(&self.network.module_kind)?;
        self.train_config(1).validate()?;
        if self.pipeline.supernet_epochs == 0 || self.pipeline.retrain_epochs == 0 {
            return Err(Error::config("epoch counts must be positive"));
        }
        if let Some(budget) = self.search.flop_budget {
            if !(budget > 0.0) {
                return Err(Error::config("search.flop_budget must be positive"));
            }
        }
        Ok(())
    }

    pub fn module_kind(&self) -> ModuleKind {
        ModuleKind::parse(&self.network.module_kind).expect("validated")
    }

    /// Builds the architecture for a dataset's input shape and class count.
    pub fn network_config(&self, input: (usize, usize, usize), classes: usize) -> Result<NetworkConfig> {
        NetworkConfig::mobilenet13(self.module_kind(), self.network.width_multiplier, input, classes)
    }

    pub fn train_config(&self, total_steps: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            total_steps,
            batch_size: self.train.batch_size,
        }
    }

    /// Search configuration with the budget resolved against the network.
    pub fn search_config(&self, net: &NetworkConfig) -> SearchConfig {
        let budget = self.search.flop_budget.unwrap_or_else(|| {
            let (lo, hi) = (min_flops(net), max_flops(net));
            lo + DEFAULT_BUDGET_FRACTION * (hi - lo)
        });
        SearchConfig {
            population_size: self.search.population_size,
            top_k: self.search.top_k,
            num_crossover: self.search.num_crossover,
            num_mutation: self.search.num_mutation,
            max_iterations: self.search.max_iterations,
            flop_budget: budget,
            mutation_prob: self.search.mutation_prob,
            seed: self.search.seed.unwrap_or(self.seed),
        }
    }
}

/// Writes a genome as `slot index → group count` lines.
pub fn write_genome_file(path: &Path, genome: &GroupVector) -> Result<()> {
    let mut text = String::from("# slot group\n");
    for (i, g) in genome.0.iter().enumerate() {
        text.push_str(&format!("{i} {g}\n"));
    }
    std::fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write genome {}: {e}", path.display())))
}

/// Reads a genome file written by [`write_genome_file`].
pub fn read_genome_file(path: &Path) -> Result<GroupVector> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read genome {}: {e}", path.display())))?;
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| {
                Error::data(format!("{}:{}: expected 'slot group'", path.display(), lineno + 1))
            })?
            .parse()
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        let slot = parse(parts.next())?;
        let group = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::data(format!(
                "{}:{}: trailing tokens",
                path.display(),
                lineno + 1
            )));
        }
        entries.push((slot, group));
    }
    entries.sort_by_key(|&(slot, _)| slot);
    for (i, &(slot, _)) in entries.iter().enumerate() {
        if slot != i {
            return Err(Error::data(format!(
                "{}: slot indices must be 0..n without gaps, found {slot} at position {i}",
                path.display()
            )));
        }
    }
    if entries.is_empty() {
        return Err(Error::data(format!("{}: empty genome", path.display())));
    }
    Ok(GroupVector(entries.into_iter().map(|(_, g)| g).collect()))
}
