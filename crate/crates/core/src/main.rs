use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedtraj::diffcore::checkpoint;
use fedtraj::experiment::{self, ExperimentConfig};
use fedtraj::roadnet::RoadNetwork;
use fedtraj::trajdata::{read_matched_csv, IncompleteTrajectory, PartitionMode};
use fedtraj::{Error, Result};

#[derive(Parser)]
#[command(name = "fedtraj", version, about = "Federated trajectory recovery simulator")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads used for client training.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataOverrides {
    #[arg(long = "keep-ratio")]
    keep_ratio: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    partition: Option<PartitionMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the lattice network, synthetic trajectories and client split.
    GenData(DataOverrides),
    /// Teacher pre-training followed by federated rounds.
    Train {
        #[command(flatten)]
        data: DataOverrides,
        #[arg(long = "fed.rounds")]
        rounds: Option<usize>,
        /// Continue from the checkpoints and round counter in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on every client's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recover full trajectories from sparse matched points.
    Recover {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV of observed points: traj_id,t,edge,r
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Network JSON; defaults to the output directory's network, else the configured lattice.
        #[arg(long)]
        network: Option<PathBuf>,
    },
}

fn apply(cfg: &mut ExperimentConfig, d: &DataOverrides) {
    if let Some(k) = d.keep_ratio {
        cfg.data.keep_ratio = k;
    }
    if let Some(n) = d.clients {
        cfg.fed.clients = n;
    }
    if let Some(p) = d.partition {
        cfg.data.partition = p;
    }
}

#[derive(Serialize)]
struct RecoveredRow {
    traj_id: usize,
    t: f64,
    x: f64,
    y: f64,
    edge: usize,
    r: f64,
    observed: bool,
}

fn network_for(cfg: &ExperimentConfig, explicit: Option<&Path>) -> Result<RoadNetwork> {
    if let Some(p) = explicit {
        if !p.exists() {
            return Err(Error::MissingFile(p.to_path_buf()));
        }
        return RoadNetwork::load(p);
    }
    let saved = cfg.output.join(experiment::NETWORK_FILE);
    if saved.exists() {
        RoadNetwork::load(&saved)
    } else {
        cfg.network()
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(w) = cli.workers {
        cfg.fed.workers = w;
    }
    if let Some(o) = cli.out {
        cfg.output = o;
    }
    let dir = cfg.output.clone();

    match cli.command {
        Command::GenData(d) => {
            apply(&mut cfg, &d);
            let net = cfg.network()?;
            let data = experiment::generate_dataset(&cfg, &net)?;
            experiment::write_dataset(&dir, &net, &data)?;
            eprintln!("wrote {} trajectories for {} clients to {}", data.truths.len(), data.clients.len(), dir.display());
        }
        Command::Train { data, rounds, resume } => {
            apply(&mut cfg, &data);
            if let Some(r) = rounds {
                cfg.fed.rounds = r;
            }
            let out = experiment::train(&cfg, &dir, resume)?;
            for r in &out.records {
                eprintln!("round {} recall {:.4} lambda {:.4}", r.round, r.global_recall, r.mean_lambda());
            }
        }
        Command::Evaluate { checkpoint: ckpt } => {
            let (net, clients, _) = experiment::load_dataset(&dir)?;
            let params = checkpoint::load(&ckpt.unwrap_or_else(|| dir.join(experiment::GLOBAL_FILE)))?;
            let report = experiment::evaluate_params(&cfg, &net, &clients, &params)?;
            let json = report.to_json()?;
            std::fs::write(dir.join(experiment::REPORT_FILE), json.clone() + "\n")?;
            let _ = writeln!(std::io::stdout(), "{json}");
        }
        Command::Recover { checkpoint: ckpt, input, output, network } => {
            let net = network_for(&cfg, network.as_deref())?;
            let grid = cfg.grid(&net)?;
            let mut model = cfg.init_model(&net)?;
            model.load(&checkpoint::load(&ckpt.unwrap_or_else(|| dir.join(experiment::GLOBAL_FILE)))?)?;
            if !input.exists() {
                return Err(Error::MissingFile(input));
            }
            let mut w = csv::Writer::from_path(&output)?;
            for (id, points) in read_matched_csv(&input)? {
                let icp = IncompleteTrajectory::new(points, cfg.data.epsilon)?;
                let observed: Vec<f64> = icp.points().iter().map(|p| p.t).collect();
                let rec = model.recover(&icp, &net, &grid)?;
                for p in rec.points() {
                    let (x, y) = net.point_position(p)?;
                    w.serialize(RecoveredRow {
                        traj_id: id,
                        t: p.t,
                        x,
                        y,
                        edge: p.edge,
                        r: p.r,
                        observed: observed.contains(&p.t),
                    })?;
                }
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
