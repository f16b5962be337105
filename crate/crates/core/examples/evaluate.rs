//! Per-client and macro-averaged recovery metrics for an untrained and a
//! briefly trained model.
//!
//!     cargo run --release --example evaluate

use fedtraj::experiment::{self, ExperimentConfig};
use fedtraj::fedsim;
use fedtraj::model::ModelSection;

fn main() -> fedtraj::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.trajectories = 600;
    cfg.model = ModelSection { hidden_dim: 32, dropout: 0.0, gamma: 5e4, mask_radius: 1000.0, ..ModelSection::default() };
    cfg.fed.clients = 3;
    cfg.fed.rounds = 8;
    cfg.fed.local_epochs = 4;
    cfg.fed.batch_size = 4;
    cfg.fed.lr = 0.5;
    cfg.fed.lambda0 = 0.0;
    cfg.set_seed(1);

    let net = cfg.network()?;
    let grid = cfg.grid(&net)?;
    let data = experiment::generate_dataset(&cfg, &net)?;
    let init = cfg.init_model(&net)?;
    let clients = fedsim::prepare_clients(data.clients, &init, &net, &grid, &cfg.fed)?;
    let (trained, _) = fedsim::run_rounds(&clients, &init, None, &cfg.fed, 1)?;

    for (name, model) in [("untrained", &init), ("trained", &trained)] {
        let report = experiment::evaluate_model(model, &net, &grid, &clients)?;
        println!(
            "{name}: recall {:.3}, precision {:.3}, MAE {:.1} m, RMSE {:.1} m over {} points",
            report.recall, report.precision, report.mae_m, report.rmse_m, report.n_points
        );
        for c in &report.clients {
            println!("  client {}: recall {:.3}, precision {:.3} over {} trajectories", c.client, c.recall, c.precision, c.n_traj);
        }
    }
    Ok(())
}
