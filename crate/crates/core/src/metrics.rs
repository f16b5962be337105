//! Recovery quality: segment-set recall/precision and road-network
//! distance errors, aggregated into dataset reports.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{EdgeId, MapMatchedPoint, RoadNetwork};
use crate::trajdata::{MapMatchedTrajectory, TrajectoryPair};

/// Recall and precision of the distinct-edge sets.
pub fn edge_set_scores(pred: impl IntoIterator<Item = EdgeId>, truth: impl IntoIterator<Item = EdgeId>) -> Result<(f64, f64)> {
    let p: BTreeSet<EdgeId> = pred.into_iter().collect();
    let g: BTreeSet<EdgeId> = truth.into_iter().collect();
    if p.is_empty() || g.is_empty() {
        return Err(Error::EmptySet("recall/precision need non-empty trajectories".into()));
    }
    let hit = p.intersection(&g).count() as f64;
    Ok((hit / g.len() as f64, hit / p.len() as f64))
}

pub fn recall_precision(pred: &MapMatchedTrajectory, truth: &MapMatchedTrajectory) -> Result<(f64, f64)> {
    edge_set_scores(pred.points().iter().map(|p| p.edge), truth.points().iter().map(|p| p.edge))
}

/// Distance between two matched points along the network, or straight-line
/// distance when neither direction is connected.
pub fn point_distance(net: &RoadNetwork, a: &MapMatchedPoint, b: &MapMatchedPoint) -> Result<f64> {
    match net.rn_distance(a, b)? {
        Some(d) => Ok(d),
        None => {
            let (ax, ay) = net.point_position(a)?;
            let (bx, by) = net.point_position(b)?;
            Ok((ax - bx).hypot(ay - by))
        }
    }
}

/// Per-point distances between aligned trajectories.
pub fn point_errors(net: &RoadNetwork, pred: &MapMatchedTrajectory, truth: &MapMatchedTrajectory) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    truth.points().iter().zip(pred.points()).map(|(g, p)| point_distance(net, g, p)).collect()
}

/// Mean absolute and root-mean-square error of the distances.
pub fn mae_rmse_of(distances: &[f64]) -> Result<(f64, f64)> {
    if distances.is_empty() {
        return Err(Error::EmptySet("no distances to average".into()));
    }
    let n = distances.len() as f64;
    let mae = distances.iter().map(|d| d.abs()).sum::<f64>() / n;
    let rmse = (distances.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    Ok((mae, rmse.max(mae)))
}

pub fn mae_rmse(net: &RoadNetwork, pred: &MapMatchedTrajectory, truth: &MapMatchedTrajectory) -> Result<(f64, f64)> {
    mae_rmse_of(&point_errors(net, pred, truth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: usize,
    pub recall: f64,
    pub precision: f64,
    pub n_traj: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub precision: f64,
    pub mae_m: f64,
    pub rmse_m: f64,
    pub n_traj: usize,
    pub n_points: usize,
    pub clients: Vec<ClientReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Recovered trajectories of one client next to their ground truth.
#[derive(Debug, Clone)]
pub struct ClientResults {
    pub client: usize,
    pub pairs: Vec<(MapMatchedTrajectory, MapMatchedTrajectory)>,
}

/// Recall/precision macro-averaged per trajectory, then per client, then
/// across clients; distance errors pooled over every point.
pub fn report(net: &RoadNetwork, results: &[ClientResults]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::EmptySet("no clients to evaluate".into()));
    }
    let mut clients = Vec::with_capacity(results.len());
    let mut distances = Vec::new();
    let mut n_traj = 0;
    for c in results {
        if c.pairs.is_empty() {
            return Err(Error::EmptySet(format!("client {} has no test trajectories", c.client)));
        }
        let (mut r, mut p) = (0.0, 0.0);
        for (pred, truth) in &c.pairs {
            let (cr, cp) = recall_precision(pred, truth)?;
            r += cr;
            p += cp;
            distances.extend(point_errors(net, pred, truth)?);
        }
        let k = c.pairs.len() as f64;
        n_traj += c.pairs.len();
        clients.push(ClientReport { client: c.client, recall: r / k, precision: p / k, n_traj: c.pairs.len() });
    }
    let (mae_m, rmse_m) = mae_rmse_of(&distances)?;
    let m = clients.len() as f64;
    Ok(EvalReport {
        recall: clients.iter().map(|c| c.recall).sum::<f64>() / m,
        precision: clients.iter().map(|c| c.precision).sum::<f64>() / m,
        mae_m,
        rmse_m,
        n_traj,
        n_points: distances.len(),
        clients,
    })
}

/// Recover every test pair with `recover` and report.
pub fn evaluate<F>(net: &RoadNetwork, test_sets: &[(usize, &[TrajectoryPair])], mut recover: F) -> Result<EvalReport>
where
    F: FnMut(&TrajectoryPair) -> Result<MapMatchedTrajectory>,
{
    let results = test_sets
        .iter()
        .map(|(client, pairs)| {
            let pairs = pairs
                .iter()
                .map(|pair| Ok((recover(pair)?, pair.truth.clone())))
                .collect::<Result<_>>()?;
            Ok(ClientResults { client: *client, pairs })
        })
        .collect::<Result<Vec<_>>>()?;
    report(net, &results)
}
