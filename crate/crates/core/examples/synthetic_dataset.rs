//! Generate a federated dataset, write it to disk and read it back.
//!
//!     cargo run --example synthetic_dataset -- [spatial|iid] [out-dir]

use fedtraj::experiment::{self, ExperimentConfig};
use fedtraj::trajdata::{to_grid_sequence, PartitionMode};

fn main() -> fedtraj::Result<()> {
    let mut args = std::env::args().skip(1);
    let partition: PartitionMode = args.next().as_deref().unwrap_or("spatial").parse()?;
    let dir = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("fedtraj-dataset"));

    let mut cfg = ExperimentConfig::default();
    cfg.data.partition = partition;
    cfg.data.trajectories = 400;
    cfg.fed.clients = 4;
    let net = cfg.network()?;
    let data = experiment::generate_dataset(&cfg, &net)?;
    experiment::write_dataset(&dir, &net, &data)?;

    let (_, clients, manifest) = experiment::load_dataset(&dir)?;
    println!("{} trajectories, keep ratio {}, written to {}", data.truths.len(), manifest.keep_ratio, dir.display());
    for c in &clients {
        println!("client {}: train {} / valid {} / test {}", c.id, c.train.len(), c.valid.len(), c.test.len());
    }

    let pair = &clients[0].train[0];
    let grid = cfg.grid(&net)?;
    println!("trajectory {}: {} true points, {} observed", pair.id, pair.truth.len(), pair.observed.points().len());
    for tok in to_grid_sequence(&pair.observed, &net, &grid)? {
        println!("  {tok:?}");
    }
    Ok(())
}
