//! Snap noisy GPS fixes onto the lattice with the HMM matcher and check how
//! close the result is to the route they were sampled from.
//!
//!     cargo run --example map_matching

use rand::{Rng as _, SeedableRng};

use fedtraj::metrics::{mae_rmse, recall_precision};
use fedtraj::roadnet::generate_grid_network;
use fedtraj::seed::Rng;
use fedtraj::trajdata::{generate_synthetic_trajectories, hmm_map_match, MatchParams, RawPoint, RawTrajectory};

fn main() -> fedtraj::Result<()> {
    let net = generate_grid_network(6, 6, 100.0, 0)?;
    let params = MatchParams::default();
    let mut rng = Rng::seed_from_u64(7);
    for (i, truth) in generate_synthetic_trajectories(&net, 5, 20, params.epsilon, 7)?.iter().enumerate() {
        let mut raw = Vec::new();
        for p in truth.points() {
            let (x, y) = net.point_position(p)?;
            raw.push(RawPoint { x: x + rng.gen_range(-8.0..8.0), y: y + rng.gen_range(-8.0..8.0), t: p.t });
        }
        let matched = hmm_map_match(&net, &RawTrajectory::new(raw)?, params)?;
        let (recall, precision) = recall_precision(&matched, truth)?;
        let (mae, _) = mae_rmse(&net, &matched, truth)?;
        println!("trajectory {i}: {} points, recall {recall:.2}, precision {precision:.2}, MAE {mae:.1} m", matched.len());
    }
    Ok(())
}
