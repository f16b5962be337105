//! Fit one model on a handful of trajectories until it recovers them, then
//! print one recovered trajectory next to its ground truth.
//!
//!     cargo run --release --example memorize -- [epochs]

use fedtraj::diffcore::OptimizerState;
use fedtraj::fedsim::train_epoch;
use fedtraj::metrics::{mae_rmse, recall_precision};
use fedtraj::model::{LteConfig, LteModel, ModelSection};
use fedtraj::roadnet::{generate_grid_network, GridSpec};
use fedtraj::seed::rng_for;
use fedtraj::trajdata::{generate_synthetic_trajectories, make_pairs};

fn main() -> fedtraj::Result<()> {
    let epochs: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let net = generate_grid_network(8, 8, 100.0, 0)?;
    let grid = GridSpec::covering(&net, 100.0)?;
    let pairs = make_pairs(generate_synthetic_trajectories(&net, 50, 30, 15.0, 7)?, 0.125, 7)?;

    // a wide mask and no dropout so the model can overfit
    let section = ModelSection { dropout: 0.0, gamma: 5e4, mask_radius: 1000.0, ..ModelSection::default() };
    let mut model = LteModel::new(LteConfig::from_section(&section, &net, &grid, 30)?, 0)?;
    println!("{} parameters", model.num_params());

    let samples = pairs
        .iter()
        .map(|p| model.prepare(&p.observed, Some(&p.truth), &net, &grid))
        .collect::<fedtraj::Result<Vec<_>>>()?;
    let refs: Vec<_> = samples.iter().collect();
    let mut opt = OptimizerState::sgd(0.5);
    for epoch in 0..epochs {
        let loss = train_epoch(&mut model, &refs, &mut opt, 4, None, 0.0, &mut rng_for(0, "memorize", &[epoch]))?;
        if epoch % 25 == 0 || epoch + 1 == epochs {
            println!("epoch {epoch:>3}  loss {loss:.4}");
        }
    }

    let (mut recall, mut mae) = (0.0, 0.0);
    for p in &pairs {
        let out = model.recover(&p.observed, &net, &grid)?;
        recall += recall_precision(&out, &p.truth)?.0;
        mae += mae_rmse(&net, &out, &p.truth)?.0;
    }
    let n = pairs.len() as f64;
    println!("train recall {:.3}, MAE {:.1} m", recall / n, mae / n);

    let p = &pairs[0];
    let out = model.recover(&p.observed, &net, &grid)?;
    println!("\n   t  truth        recovered");
    for (a, b) in p.truth.points().iter().zip(out.points()) {
        let seen = if p.observed.points().contains(b) { "*" } else { " " };
        println!("{:>4}  {:>3} r={:.2}   {:>3} r={:.2} {seen}", a.t, a.edge, a.r, b.edge, b.r);
    }
    Ok(())
}
