//! Teacher pre-training plus federated rounds, compared against plain
//! federated averaging on the same spatially skewed clients.
//!
//!     cargo run --release --example federated_training -- [rounds]

use fedtraj::experiment::{self, ExperimentConfig};
use fedtraj::fedsim::{self, FedConfig};
use fedtraj::model::ModelSection;
use fedtraj::trajdata::PartitionMode;

fn main() -> fedtraj::Result<()> {
    let rounds = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut cfg = ExperimentConfig::default();
    cfg.data.partition = PartitionMode::Spatial;
    cfg.model = ModelSection { hidden_dim: 32, dropout: 0.0, gamma: 5e4, mask_radius: 1000.0, ..ModelSection::default() };
    cfg.fed = FedConfig {
        rounds,
        clients: 4,
        local_epochs: 4,
        lambda0: 0.05,
        teacher_cycles: 3,
        teacher_fraction: 1.0,
        batch_size: 4,
        lr: 0.5,
        ..FedConfig::default()
    };
    cfg.set_seed(0);

    let net = cfg.network()?;
    let grid = cfg.grid(&net)?;
    let data = experiment::generate_dataset(&cfg, &net)?;
    let init = cfg.init_model(&net)?;
    let clients = fedsim::prepare_clients(data.clients, &init, &net, &grid, &cfg.fed)?;

    let (teacher, report) = fedsim::train_teacher(&clients, &init, &cfg.fed)?;
    println!("teacher: {} cycles, validation recall {:?}", report.cycles_run, report.recall_history);

    let (distilled, with_teacher) = fedsim::run_rounds(&clients, &init, Some(&teacher), &cfg.fed, 1)?;
    let mut plain_cfg = cfg.fed.clone();
    plain_cfg.lambda0 = 0.0;
    let (plain, without) = fedsim::run_rounds(&clients, &init, None, &plain_cfg, 1)?;

    println!("\nround  distilled  fedavg   mean lambda   bytes");
    for (a, b) in with_teacher.iter().zip(&without) {
        println!("{:>5}  {:>9.4}  {:>6.4}   {:>11.4}   {}", a.round, a.global_recall, b.global_recall, a.mean_lambda(), a.bytes);
    }
    let t1 = experiment::evaluate_model(&distilled, &net, &grid, &clients)?;
    let t2 = experiment::evaluate_model(&plain, &net, &grid, &clients)?;
    println!("\ntest recall: distilled {:.4}, fedavg {:.4}", t1.recall, t2.recall);
    Ok(())
}
