//! Shortest paths and on-network distances between matched points.
//!
//!     cargo run --example road_distances

use fedtraj::roadnet::{generate_grid_network, MapMatchedPoint};

fn main() -> fedtraj::Result<()> {
    let net = generate_grid_network(4, 4, 100.0, 0)?;
    println!("{} nodes, {} directed edges", net.nodes().len(), net.num_edges());

    let corner = net.nodes().len() - 1;
    let d = net.shortest_path_distance(0, corner)?.unwrap();
    let path = net.shortest_path_edges(0, corner)?.unwrap();
    println!("node 0 -> node {corner}: {d:.1} m over edges {path:?}");

    let a = MapMatchedPoint::new(0, 0.25, 0.0);
    let b = MapMatchedPoint::new(path[path.len() - 1], 0.5, 60.0);
    let (ax, ay) = net.point_position(&a)?;
    let (bx, by) = net.point_position(&b)?;
    println!("a at ({ax:.0}, {ay:.0}), b at ({bx:.0}, {by:.0})");
    println!("straight line     {:.1} m", (bx - ax).hypot(by - ay));
    println!("a -> b on network {:.1} m", net.rn_distance_directed(&a, &b)?.unwrap());
    println!("b -> a on network {:.1} m", net.rn_distance_directed(&b, &a)?.unwrap());
    println!("rn_distance       {:.1} m", net.rn_distance(&a, &b)?.unwrap());
    Ok(())
}
