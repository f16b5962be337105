//! Experiment configuration and the data/training pipeline shared by the
//! command-line tool and the examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, ParameterVector};
use crate::error::{Error, Result};
use crate::fedsim::{self, ClientState, FedConfig, RoundRecord, TeacherReport};
use crate::metrics::{self, EvalReport};
use crate::model::{LteConfig, LteModel, ModelSection};
use crate::roadnet::{generate_grid_network, GridSpec, RoadNetwork};
use crate::seed::sub_seed;
use crate::trajdata::{
    generate_synthetic_trajectories, make_pairs, partition_clients, read_matched_csv, write_matched_csv,
    ClientDataset, DatasetManifest, MapMatchedTrajectory, PartitionMode, TrajectoryPair,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub spacing: f64,
    pub cell_size: f64,
    pub trajectories: usize,
    pub traj_len: usize,
    pub epsilon: f64,
    pub keep_ratio: f64,
    pub partition: PartitionMode,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            grid_rows: 8,
            grid_cols: 8,
            spacing: 100.0,
            cell_size: 100.0,
            trajectories: 800,
            traj_len: 30,
            epsilon: 15.0,
            keep_ratio: 0.125,
            partition: PartitionMode::Iid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub fed: FedConfig,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection::default(),
            fed: FedConfig::default(),
            seed: 0,
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.fed.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.fed.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.keep_ratio > 0.0 && d.keep_ratio <= 1.0) {
            return Err(Error::InvalidConfig("data.keep_ratio must lie in (0, 1]".into()));
        }
        if d.traj_len < 2 {
            return Err(Error::InvalidConfig("data.traj_len must be >= 2".into()));
        }
        if !(d.epsilon > 0.0 && d.spacing > 0.0 && d.cell_size > 0.0) {
            return Err(Error::InvalidConfig("data.epsilon, spacing and cell_size must be positive".into()));
        }
        self.fed.validate()
    }

    pub fn network(&self) -> Result<RoadNetwork> {
        generate_grid_network(self.data.grid_rows, self.data.grid_cols, self.data.spacing, self.seed)
    }

    pub fn grid(&self, net: &RoadNetwork) -> Result<GridSpec> {
        GridSpec::covering(net, self.data.cell_size)
    }

    pub fn model_config(&self, net: &RoadNetwork) -> Result<LteConfig> {
        LteConfig::from_section(&self.model, net, &self.grid(net)?, self.data.traj_len)
    }

    pub fn init_model(&self, net: &RoadNetwork) -> Result<LteModel> {
        LteModel::new(self.model_config(net)?, sub_seed(self.seed, "init", &[]))
    }
}

/// Ground truth, downsampled pairs and their client assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub truths: Vec<MapMatchedTrajectory>,
    pub clients: Vec<ClientDataset>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn pairs(&self) -> impl Iterator<Item = &TrajectoryPair> {
        self.clients.iter().flat_map(|c| c.train.iter().chain(&c.valid).chain(&c.test))
    }
}

/// Synthesize trajectories on the configured lattice, downsample them and
/// partition them over `fed.clients` clients.
pub fn generate_dataset(cfg: &ExperimentConfig, net: &RoadNetwork) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let truths =
        generate_synthetic_trajectories(net, d.trajectories, d.traj_len, d.epsilon, sub_seed(cfg.seed, "trajectories", &[]))?;
    let pairs = make_pairs(truths.clone(), d.keep_ratio, cfg.seed)?;
    let clients = partition_clients(pairs, cfg.fed.clients, d.partition, cfg.seed, net)?;
    let manifest = DatasetManifest::describe(&clients, d.epsilon, d.keep_ratio, cfg.seed, d.partition);
    Ok(Dataset { truths, clients, manifest })
}

pub const NETWORK_FILE: &str = "network.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const OBSERVED_FILE: &str = "observed.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const GLOBAL_FILE: &str = "global.ckpt";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const STATE_FILE: &str = "state.json";
pub const REPORT_FILE: &str = "report.json";

pub fn write_dataset(dir: &Path, net: &RoadNetwork, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    net.save(&dir.join(NETWORK_FILE))?;
    let mut pairs: Vec<&TrajectoryPair> = data.pairs().collect();
    pairs.sort_by_key(|p| p.id);
    let truth: Vec<(usize, &[_])> = pairs.iter().map(|p| (p.id, p.truth.points())).collect();
    let observed: Vec<(usize, &[_])> = pairs.iter().map(|p| (p.id, p.observed.points())).collect();
    write_matched_csv(&dir.join(TRUTH_FILE), &truth)?;
    write_matched_csv(&dir.join(OBSERVED_FILE), &observed)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&data.manifest)? + "\n")?;
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}

/// Read back what [`write_dataset`] produced.
pub fn load_dataset(dir: &Path) -> Result<(RoadNetwork, Vec<ClientDataset>, DatasetManifest)> {
    let net = RoadNetwork::load(&require(dir.join(NETWORK_FILE))?)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(require(dir.join(MANIFEST_FILE))?)?)?;
    let truth = read_matched_csv(&require(dir.join(TRUTH_FILE))?)?;
    let observed = read_matched_csv(&require(dir.join(OBSERVED_FILE))?)?;
    let clients = manifest.assemble(truth, observed)?;
    Ok((net, clients, manifest))
}

/// Number of rounds already completed in an output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub rounds_done: usize,
}

impl TrainState {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(require(dir.join(STATE_FILE))?)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(STATE_FILE), serde_json::to_string(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub teacher: LteModel,
    pub teacher_report: Option<TeacherReport>,
    pub global: Option<LteModel>,
    pub records: Vec<RoundRecord>,
}

/// Teacher pre-training followed by federated rounds. With `resume`, the
/// teacher and global checkpoints in `dir` are reused and round numbering
/// continues from the saved state.
pub fn train(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (net, datasets, _) = load_dataset(dir)?;
    if datasets.len() != cfg.fed.clients {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} clients but fed.clients is {}",
            datasets.len(),
            cfg.fed.clients
        )));
    }
    let init = cfg.init_model(&net)?;
    let clients = fedsim::prepare_clients(datasets, &init, &net, &cfg.grid(&net)?, &cfg.fed)?;
    let load_into = |path: PathBuf| -> Result<LteModel> {
        let params = checkpoint::load(&path)?;
        let mut m = init.clone();
        m.load(&params)?;
        Ok(m)
    };

    let (teacher, teacher_report, start, global) = if resume {
        let state = TrainState::load(dir)?;
        let teacher = load_into(dir.join(TEACHER_FILE))?;
        let global = if state.rounds_done > 0 { load_into(dir.join(GLOBAL_FILE))? } else { init.clone() };
        (teacher, None, state.rounds_done, global)
    } else {
        let (teacher, report) = fedsim::train_teacher(&clients, &init, &cfg.fed)?;
        checkpoint::save(&dir.join(TEACHER_FILE), teacher.params())?;
        TrainState { rounds_done: 0 }.save(dir)?;
        (teacher, Some(report), 0, init.clone())
    };

    if cfg.fed.rounds == 0 {
        return Ok(TrainOutcome { teacher, teacher_report, global: None, records: Vec::new() });
    }
    let guide = (cfg.fed.lambda0 > 0.0).then_some(&teacher);
    let (global, records) = fedsim::run_rounds(&clients, &global, guide, &cfg.fed, start + 1)?;
    checkpoint::save(&dir.join(GLOBAL_FILE), global.params())?;
    fedsim::write_rounds_csv(&dir.join(ROUNDS_FILE), &records, resume)?;
    TrainState { rounds_done: start + cfg.fed.rounds }.save(dir)?;
    Ok(TrainOutcome { teacher, teacher_report, global: Some(global), records })
}

/// Evaluate a parameter vector on every client's test split.
pub fn evaluate_params(
    cfg: &ExperimentConfig,
    net: &RoadNetwork,
    clients: &[ClientDataset],
    params: &ParameterVector,
) -> Result<EvalReport> {
    let mut model = cfg.init_model(net)?;
    model.load(params)?;
    let grid = cfg.grid(net)?;
    let sets: Vec<(usize, &[TrajectoryPair])> = clients.iter().map(|c| (c.id, c.test.as_slice())).collect();
    metrics::evaluate(net, &sets, |p| model.recover(&p.observed, net, &grid))
}

/// Test-set report of a model that already lives in memory.
pub fn evaluate_model(model: &LteModel, net: &RoadNetwork, grid: &GridSpec, clients: &[ClientState]) -> Result<EvalReport> {
    let sets: Vec<(usize, &[TrajectoryPair])> = clients.iter().map(|c| (c.id, c.dataset.test.as_slice())).collect();
    metrics::evaluate(net, &sets, |p| model.recover(&p.observed, net, grid))
}
