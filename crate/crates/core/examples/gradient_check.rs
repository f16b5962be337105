//! Compare backpropagated gradients with central differences on a tiny
//! model, with dropout and a distillation teacher switched on.
//!
//!     cargo run --release --example gradient_check

use fedtraj::gradcheck::check_gradients;
use fedtraj::model::{LteConfig, LteModel, ModelSection};
use fedtraj::roadnet::{generate_grid_network, GridSpec};
use fedtraj::trajdata::{generate_synthetic_trajectories, make_pairs};

fn main() -> fedtraj::Result<()> {
    let net = generate_grid_network(3, 3, 100.0, 0)?;
    let grid = GridSpec::covering(&net, 100.0)?;
    let section = ModelSection { hidden_dim: 8, seg_embed_dim: 4, blocks: 2, ..ModelSection::default() };
    let cfg = LteConfig::from_section(&section, &net, &grid, 8)?;
    let pairs = make_pairs(generate_synthetic_trajectories(&net, 3, 8, 15.0, 2)?, 0.25, 2)?;

    for (seed, pair) in pairs.iter().enumerate() {
        let student = LteModel::new(cfg.clone(), seed as u64)?;
        let teacher = LteModel::new(cfg.clone(), 100 + seed as u64)?;
        let sample = student.prepare(&pair.observed, Some(&pair.truth), &net, &grid)?;
        let report = check_gradients(&student, &sample, Some(&teacher), 1.0, 0.5, seed as u64, 1e-4)?;
        println!(
            "seed {seed}: {} parameters, max relative error {:.2e} at index {} (analytic {:.6}, numeric {:.6})",
            report.checked, report.max_rel_error, report.worst_index, report.analytic, report.numeric
        );
    }
    Ok(())
}
