//! Trajectory datasets: map matching, downsampling, grid tokens, splits,
//! synthetic generation, federated partitioning and CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roadnet::{EdgeId, GridSpec, MapMatchedPoint, RoadNetwork};
use crate::seed::{self, Rng};

const TIME_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawPoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

/// Timestamped planar positions, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    points: Vec<RawPoint>,
}

impl RawTrajectory {
    pub fn new(points: Vec<RawPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidTrajectory("raw trajectory is empty".into()));
        }
        if points.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidTrajectory(
                "raw timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RawPoint] {
        &self.points
    }
}

/// A complete trajectory sampled every `epsilon` seconds on the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMatchedTrajectory {
    points: Vec<MapMatchedPoint>,
    epsilon: f64,
}

impl MapMatchedTrajectory {
    pub fn new(points: Vec<MapMatchedPoint>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidTrajectory(format!("sampling interval {epsilon} must be positive")));
        }
        if points.is_empty() {
            return Err(Error::InvalidTrajectory("matched trajectory is empty".into()));
        }
        for w in points.windows(2) {
            if ((w[1].t - w[0].t) - epsilon).abs() > TIME_TOL * epsilon.max(1.0) {
                return Err(Error::InvalidTrajectory(format!(
                    "timestamps {} and {} are not {epsilon} s apart",
                    w[0].t, w[1].t
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(&p.r)) {
            return Err(Error::InvalidTrajectory(format!("moving ratio {} outside [0, 1]", p.r)));
        }
        Ok(Self { points, epsilon })
    }

    pub fn points(&self) -> &[MapMatchedPoint] {
        &self.points
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate_on(&self, net: &RoadNetwork) -> Result<()> {
        self.points.iter().try_for_each(|p| net.validate_point(p))
    }
}

/// The observed subset of a trajectory on its `epsilon` grid. The first and
/// last grid timestamps are always observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncompleteTrajectory {
    points: Vec<MapMatchedPoint>,
    epsilon: f64,
    t_start: f64,
    t_end: f64,
}

impl IncompleteTrajectory {
    pub fn new(points: Vec<MapMatchedPoint>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidTrajectory(format!("sampling interval {epsilon} must be positive")));
        }
        let (first, last) = match (points.first(), points.last()) {
            (Some(f), Some(l)) => (f.t, l.t),
            _ => return Err(Error::InvalidTrajectory("incomplete trajectory is empty".into())),
        };
        let mut prev_slot: Option<i64> = None;
        for p in &points {
            let k = (p.t - first) / epsilon;
            let slot = k.round();
            if (k - slot).abs() > TIME_TOL || slot < 0.0 {
                return Err(Error::InvalidTrajectory(format!(
                    "timestamp {} is not on the {epsilon} s grid starting at {first}",
                    p.t
                )));
            }
            let slot = slot as i64;
            if prev_slot.is_some_and(|s| slot <= s) {
                return Err(Error::InvalidTrajectory("observed timestamps must increase".into()));
            }
            if !(0.0..=1.0).contains(&p.r) {
                return Err(Error::InvalidTrajectory(format!("moving ratio {} outside [0, 1]", p.r)));
            }
            prev_slot = Some(slot);
        }
        Ok(Self { points, epsilon, t_start: first, t_end: last })
    }

    pub fn points(&self) -> &[MapMatchedPoint] {
        &self.points
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Number of grid timestamps in `[t_start, t_end]`.
    pub fn grid_len(&self) -> usize {
        ((self.t_end - self.t_start) / self.epsilon).round() as usize + 1
    }

    /// Grid index of an observed point.
    pub fn slot_of(&self, p: &MapMatchedPoint) -> usize {
        ((p.t - self.t_start) / self.epsilon).round() as usize
    }

    /// Observed point per grid slot.
    pub fn slots(&self) -> Vec<Option<MapMatchedPoint>> {
        let mut out = vec![None; self.grid_len()];
        for p in &self.points {
            out[self.slot_of(p)] = Some(*p);
        }
        out
    }
}

/// Encoder input unit: grid cell plus time slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridToken {
    pub x: usize,
    pub y: usize,
    pub tid: usize,
}

/// An incomplete trajectory together with the complete ground truth it was
/// derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub id: usize,
    pub observed: IncompleteTrajectory,
    pub truth: MapMatchedTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Vec<TrajectoryPair>,
    pub valid: Vec<TrajectoryPair>,
    pub test: Vec<TrajectoryPair>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// HMM map matching

/// Matching parameters. Emission is Gaussian in the perpendicular distance
/// (`sigma`), transition is exponential in the difference between route and
/// straight-line distance (`beta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub sigma: f64,
    pub beta: f64,
    pub radius: f64,
    pub epsilon: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { sigma: 10.0, beta: 5.0, radius: 50.0, epsilon: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub edge: EdgeId,
    pub r: f64,
    pub distance: f64,
}

/// Candidate states of every raw point, with the HMM scores between them.
#[derive(Debug, Clone)]
pub struct MatchLattice {
    pub candidates: Vec<Vec<Candidate>>,
    params: MatchParams,
    straight: Vec<f64>,
}

impl MatchLattice {
    pub fn build(net: &RoadNetwork, raw: &RawTrajectory, params: MatchParams) -> Result<Self> {
        if !(params.radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "candidate radius {} must be positive",
                params.radius
            )));
        }
        let mut candidates = Vec::with_capacity(raw.points().len());
        for (index, p) in raw.points().iter().enumerate() {
            let mut cands = Vec::new();
            for e in net.edges() {
                let (distance, r) = net.project(e.id, p.x, p.y)?;
                if distance <= params.radius {
                    cands.push(Candidate { edge: e.id, r, distance });
                }
            }
            if cands.is_empty() {
                return Err(Error::NoCandidates { index, radius: params.radius });
            }
            candidates.push(cands);
        }
        let straight = raw
            .points()
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .collect();
        Ok(Self { candidates, params, straight })
    }

    pub fn log_emission(&self, c: &Candidate) -> f64 {
        -c.distance * c.distance / (2.0 * self.params.sigma * self.params.sigma)
    }

    /// Log transition score from candidate `a` of point `step` to candidate
    /// `b` of point `step + 1`; `-inf` when the route does not exist.
    pub fn log_transition(&self, net: &RoadNetwork, step: usize, a: &Candidate, b: &Candidate) -> Result<f64> {
        let pa = MapMatchedPoint::new(a.edge, a.r, 0.0);
        let pb = MapMatchedPoint::new(b.edge, b.r, 0.0);
        Ok(match net.rn_distance_directed(&pa, &pb)? {
            Some(route) => -(route - self.straight[step]).abs() / self.params.beta,
            None => f64::NEG_INFINITY,
        })
    }

    /// Most likely candidate index per point and its joint log score.
    /// Ties resolve to the lowest candidate index.
    pub fn viterbi(&self, net: &RoadNetwork) -> Result<(Vec<usize>, f64)> {
        let n = self.candidates.len();
        let mut score: Vec<f64> = self.candidates[0].iter().map(|c| self.log_emission(c)).collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
        for step in 1..n {
            let prev = &self.candidates[step - 1];
            let cur = &self.candidates[step];
            let mut next = Vec::with_capacity(cur.len());
            let mut ptr = Vec::with_capacity(cur.len());
            for b in cur {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (i, a) in prev.iter().enumerate() {
                    let s = score[i] + self.log_transition(net, step - 1, a, b)?;
                    if s > best {
                        best = s;
                        arg = i;
                    }
                }
                next.push(best + self.log_emission(b));
                ptr.push(arg);
            }
            score = next;
            back.push(ptr);
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for (i, &s) in score.iter().enumerate() {
            if s > best {
                best = s;
                last = i;
            }
        }
        if best == f64::NEG_INFINITY {
            return Err(Error::InvalidTrajectory(
                "no connected candidate sequence for the raw trajectory".into(),
            ));
        }
        let mut path = vec![last; n];
        for step in (1..n).rev() {
            path[step - 1] = back[step - 1][path[step]];
        }
        Ok((path, best))
    }
}

/// One stretch of a route: an edge traversed from ratio `from` to `to`.
#[derive(Debug, Clone, Copy)]
struct Leg {
    edge: EdgeId,
    from: f64,
    to: f64,
    length: f64,
}

fn route_legs(net: &RoadNetwork, a: &MapMatchedPoint, b: &MapMatchedPoint) -> Result<Option<Vec<Leg>>> {
    let ea = *net.edge(a.edge)?;
    let eb = *net.edge(b.edge)?;
    if a.edge == b.edge && a.r <= b.r {
        return Ok(Some(vec![Leg { edge: a.edge, from: a.r, to: b.r, length: ea.length }]));
    }
    let Some(middle) = net.shortest_path_edges(ea.to, eb.from)? else {
        return Ok(None);
    };
    let mut legs = vec![Leg { edge: a.edge, from: a.r, to: 1.0, length: ea.length }];
    for e in middle {
        legs.push(Leg { edge: e, from: 0.0, to: 1.0, length: net.edge(e)?.length });
    }
    legs.push(Leg { edge: b.edge, from: 0.0, to: b.r, length: eb.length });
    Ok(Some(legs))
}

fn position_along(legs: &[Leg], fraction: f64) -> (EdgeId, f64) {
    let total: f64 = legs.iter().map(|l| (l.to - l.from) * l.length).sum();
    let mut remaining = fraction.clamp(0.0, 1.0) * total;
    for leg in legs {
        let span = (leg.to - leg.from) * leg.length;
        if remaining <= span {
            let r = leg.from + remaining / leg.length;
            return (leg.edge, r.clamp(0.0, 1.0));
        }
        remaining -= span;
    }
    let last = legs.last().expect("route has at least one leg");
    (last.edge, last.to)
}

/// Viterbi map matching followed by arc-length resampling onto the
/// `params.epsilon` grid starting at the first raw timestamp.
pub fn hmm_map_match(net: &RoadNetwork, raw: &RawTrajectory, params: MatchParams) -> Result<MapMatchedTrajectory> {
    let lattice = MatchLattice::build(net, raw, params)?;
    let (path, _) = lattice.viterbi(net)?;
    let raw_pts = raw.points();
    let states: Vec<MapMatchedPoint> = path
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let cand = lattice.candidates[i][c];
            MapMatchedPoint::new(cand.edge, cand.r, raw_pts[i].t)
        })
        .collect();

    let eps = params.epsilon;
    let t0 = raw_pts[0].t;
    let span = raw_pts[raw_pts.len() - 1].t - t0;
    let steps = (span / eps + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut seg = 0;
    let mut legs_cache: HashMap<usize, Vec<Leg>> = HashMap::new();
    for k in 0..=steps {
        let t = t0 + k as f64 * eps;
        while seg + 1 < states.len() && states[seg + 1].t <= t {
            seg += 1;
        }
        if seg + 1 == states.len() || (t - states[seg].t).abs() < 1e-9 {
            out.push(MapMatchedPoint::new(states[seg].edge, states[seg].r, t));
            continue;
        }
        let a = states[seg];
        let b = states[seg + 1];
        let legs = match legs_cache.entry(seg) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(route_legs(net, &a, &b)?.ok_or_else(|| {
                Error::InvalidTrajectory("matched states are not connected".into())
            })?),
        };
        let frac = (t - a.t) / (b.t - a.t);
        let (edge, r) = position_along(legs, frac);
        out.push(MapMatchedPoint::new(edge, r, t));
    }
    MapMatchedTrajectory::new(out, eps)
}

// ---------------------------------------------------------------------------
// Downsampling, tokens, splits

/// Keep both endpoints and each interior point independently with
/// probability `keep_ratio`.
pub fn downsample(traj: &MapMatchedTrajectory, keep_ratio: f64, seed: u64) -> Result<IncompleteTrajectory> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidRatio(keep_ratio));
    }
    let pts = traj.points();
    if pts.len() < 2 {
        return Err(Error::InvalidTrajectory("downsampling needs at least two points".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let last = pts.len() - 1;
    let kept = pts
        .iter()
        .enumerate()
        .filter(|&(i, _)| {
            let keep = rng.gen::<f64>() < keep_ratio;
            i == 0 || i == last || keep
        })
        .map(|(_, p)| *p)
        .collect();
    IncompleteTrajectory::new(kept, traj.epsilon())
}

pub fn tid_of(t: f64, t0: f64, epsilon: f64) -> usize {
    ((t - t0) / epsilon + 1e-9).floor().max(0.0) as usize
}

/// One token per observed point: the grid cell of its position and its time
/// slot relative to the trajectory start.
pub fn to_grid_sequence(traj: &IncompleteTrajectory, net: &RoadNetwork, grid: &GridSpec) -> Result<Vec<GridToken>> {
    traj.points()
        .iter()
        .map(|p| {
            let (x, y) = net.point_position(p)?;
            let (cx, cy) = grid.cell_of(x, y)?;
            Ok(GridToken { x: cx, y: cy, tid: tid_of(p.t, traj.t_start(), traj.epsilon()) })
        })
        .collect()
}

/// Seeded shuffle followed by a contiguous split. Valid and test sizes are
/// floor allocations; the remainder goes to train.
pub fn split_dataset<T>(mut items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!("({tr}, {va}, {te}) must be fractions summing to 1")));
    }
    if items.is_empty() {
        return Err(Error::EmptySet("nothing to split".into()));
    }
    let n = items.len() as f64;
    let n_valid = (n * va + 1e-9).floor() as usize;
    let n_test = (n * te + 1e-9).floor() as usize;
    let mut rng = Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_train = items.len() - n_valid - n_test;
    let test = items.split_off(n_train + n_valid);
    let valid = items.split_off(n_train);
    Ok((items, valid, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Spatial,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "spatial" => Ok(Self::Spatial),
            other => Err(Error::InvalidConfig(format!("unknown partition mode {other:?}"))),
        }
    }
}

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.2, 0.1);

/// Distribute pairs over clients and split each client's share 7:2:1.
///
/// `Iid` deals a seeded shuffle round-robin. `Spatial` orders pairs by the
/// angle of their start position around the network centroid and cuts the
/// circle into `n_clients` count-balanced sectors.
pub fn partition_clients(
    pairs: Vec<TrajectoryPair>,
    n_clients: usize,
    mode: PartitionMode,
    seed: u64,
    net: &RoadNetwork,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if pairs.len() < n_clients {
        return Err(Error::TooFewTrajectories { have: pairs.len(), clients: n_clients });
    }
    let mut shares: Vec<Vec<TrajectoryPair>> = (0..n_clients).map(|_| Vec::new()).collect();
    match mode {
        PartitionMode::Iid => {
            let mut pairs = pairs;
            pairs.shuffle(&mut seed::rng_for(seed, "partition", &[]));
            for (i, p) in pairs.into_iter().enumerate() {
                shares[i % n_clients].push(p);
            }
        }
        PartitionMode::Spatial => {
            let (cx, cy) = net.centroid();
            let mut keyed = Vec::with_capacity(pairs.len());
            for p in pairs {
                let (x, y) = net.point_position(&p.truth.points()[0])?;
                keyed.push(((y - cy).atan2(x - cx), p));
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
            let total = keyed.len();
            let base = total / n_clients;
            let extra = total % n_clients;
            let mut iter = keyed.into_iter();
            for (c, share) in shares.iter_mut().enumerate() {
                let size = base + usize::from(c < extra);
                share.extend(iter.by_ref().take(size).map(|(_, p)| p));
            }
        }
    }
    shares
        .into_iter()
        .enumerate()
        .map(|(id, share)| {
            let (train, valid, test) =
                split_dataset(share, SPLIT_RATIOS, seed::sub_seed(seed, "split", &[id as u64]))?;
            Ok(ClientDataset { id, train, valid, test })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Seeded random walks over directed edges at a constant per-trajectory
/// speed in [5, 15] m/s, emitted every `epsilon` seconds. Walks avoid
/// immediate U-turns unless the road ends.
pub fn generate_synthetic_trajectories(
    net: &RoadNetwork,
    count: usize,
    length: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<MapMatchedTrajectory>> {
    if length < 2 {
        return Err(Error::InvalidDimension(format!("trajectory length {length} must be >= 2")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidDimension(format!("sampling interval {epsilon} must be positive")));
    }
    if net.num_edges() == 0 {
        return Err(Error::InvalidNetwork("network has no edges".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let speed = rng.gen_range(5.0..=15.0);
        let mut edge = rng.gen_range(0..net.num_edges());
        let mut r: f64 = rng.gen_range(0.0..1.0);
        let mut points = Vec::with_capacity(length);
        points.push(MapMatchedPoint::new(edge, r, 0.0));
        for k in 1..length {
            let mut travel = speed * epsilon;
            loop {
                let e = net.edge(edge)?;
                let remaining = (1.0 - r) * e.length;
                if travel <= remaining {
                    r = (r + travel / e.length).min(1.0);
                    break;
                }
                let options: Vec<EdgeId> = net
                    .outgoing(e.to)?
                    .iter()
                    .copied()
                    .filter(|&o| net.edges()[o].to != e.from)
                    .collect();
                let options = if options.is_empty() { net.outgoing(e.to)?.to_vec() } else { options };
                if options.is_empty() {
                    r = 1.0;
                    break;
                }
                travel -= remaining;
                edge = options[rng.gen_range(0..options.len())];
                r = 0.0;
            }
            points.push(MapMatchedPoint::new(edge, r, k as f64 * epsilon));
        }
        out.push(MapMatchedTrajectory::new(points, epsilon)?);
    }
    Ok(out)
}

/// Downsample every trajectory with a per-trajectory sub-seed and pair it
/// with its ground truth.
pub fn make_pairs(truths: Vec<MapMatchedTrajectory>, keep_ratio: f64, seed: u64) -> Result<Vec<TrajectoryPair>> {
    truths
        .into_iter()
        .enumerate()
        .map(|(id, truth)| {
            let observed = downsample(&truth, keep_ratio, seed::sub_seed(seed, "downsample", &[id as u64]))?;
            Ok(TrajectoryPair { id, observed, truth })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV

#[derive(Debug, Serialize)]
struct MatchedRow {
    traj_id: usize,
    t: f64,
    edge: EdgeId,
    r: f64,
}

#[derive(Debug, Serialize)]
struct RawRow {
    traj_id: usize,
    t: f64,
    x: f64,
    y: f64,
}

/// Write matched points as `traj_id,t,edge,r` rows.
pub fn write_matched_csv(path: &Path, trajectories: &[(usize, &[MapMatchedPoint])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, pts) in trajectories {
        for p in pts.iter() {
            w.serialize(MatchedRow { traj_id: *id, t: p.t, edge: p.edge, r: p.r })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write raw points as `traj_id,t,x,y` rows.
pub fn write_raw_csv(path: &Path, trajectories: &[(usize, &RawTrajectory)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, traj) in trajectories {
        for p in traj.points() {
            w.serialize(RawRow { traj_id: *id, t: p.t, x: p.x, y: p.y })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_rows<const N: usize>(path: &Path, columns: [&str; N]) -> Result<Vec<(u64, usize, [f64; N])>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut index = [0usize; N];
    if !headers.is_empty() {
        for (slot, name) in index.iter_mut().zip(columns) {
            *slot = headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MalformedRow {
                line: 1,
                reason: format!("missing column {name:?}"),
            })?;
        }
    }
    let id_col = headers.iter().position(|h| h.trim() == "traj_id");
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id_col = id_col.ok_or_else(|| Error::MalformedRow { line: 1, reason: "missing column \"traj_id\"".into() })?;
        let field = |i: usize, name: &str| -> Result<&str> {
            record.get(i).map(str::trim).ok_or_else(|| Error::MalformedRow {
                line,
                reason: format!("missing field {name:?}"),
            })
        };
        let id: usize = field(id_col, "traj_id")?.parse().map_err(|_| Error::MalformedRow {
            line,
            reason: "traj_id is not a non-negative integer".into(),
        })?;
        let mut values = [0.0; N];
        for ((v, &i), name) in values.iter_mut().zip(&index).zip(columns) {
            let text = field(i, name)?;
            *v = text.parse().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("{name} value {text:?} is not numeric"),
            })?;
        }
        rows.push((line, id, values));
    }
    Ok(rows)
}

fn group<T>(rows: Vec<(usize, T)>) -> Vec<(usize, Vec<T>)> {
    let mut order = Vec::new();
    let mut groups: HashMap<usize, Vec<T>> = HashMap::new();
    for (id, item) in rows {
        groups
            .entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(item);
    }
    order
        .into_iter()
        .map(|id| {
            let items = groups.remove(&id).unwrap_or_default();
            (id, items)
        })
        .collect()
}

/// Read `traj_id,t,edge,r` rows grouped by trajectory id in order of first
/// appearance.
pub fn read_matched_csv(path: &Path) -> Result<Vec<(usize, Vec<MapMatchedPoint>)>> {
    let rows = read_rows(path, ["t", "edge", "r"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, id, [t, edge, r]) in rows {
        if edge < 0.0 || edge.fract() != 0.0 {
            return Err(Error::MalformedRow { line, reason: format!("edge {edge} is not an edge id") });
        }
        out.push((id, MapMatchedPoint::new(edge as usize, r, t)));
    }
    Ok(group(out))
}

/// Read `traj_id,t,x,y` rows grouped by trajectory id.
pub fn read_raw_csv(path: &Path) -> Result<Vec<(usize, RawTrajectory)>> {
    let rows = read_rows(path, ["t", "x", "y"])?;
    let points = rows.into_iter().map(|(_, id, [t, x, y])| (id, RawPoint { x, y, t })).collect();
    group(points)
        .into_iter()
        .map(|(id, pts)| Ok((id, RawTrajectory::new(pts)?)))
        .collect()
}

/// Dataset manifest written next to the trajectory CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub epsilon: f64,
    pub keep_ratio: f64,
    pub seed: u64,
    pub partition: PartitionMode,
    pub clients: Vec<ClientManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub id: usize,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn describe(clients: &[ClientDataset], epsilon: f64, keep_ratio: f64, seed: u64, partition: PartitionMode) -> Self {
        let ids = |v: &[TrajectoryPair]| v.iter().map(|p| p.id).collect();
        Self {
            epsilon,
            keep_ratio,
            seed,
            partition,
            clients: clients
                .iter()
                .map(|c| ClientManifest { id: c.id, train: ids(&c.train), valid: ids(&c.valid), test: ids(&c.test) })
                .collect(),
        }
    }

    /// Rebuild client datasets from matched ground-truth and observed rows.
    pub fn assemble(
        &self,
        truth: Vec<(usize, Vec<MapMatchedPoint>)>,
        observed: Vec<(usize, Vec<MapMatchedPoint>)>,
    ) -> Result<Vec<ClientDataset>> {
        let mut truth: HashMap<usize, Vec<MapMatchedPoint>> = truth.into_iter().collect();
        let mut observed: HashMap<usize, Vec<MapMatchedPoint>> = observed.into_iter().collect();
        let mut take = |id: usize| -> Result<TrajectoryPair> {
            let t = truth
                .remove(&id)
                .ok_or_else(|| Error::InvalidConfig(format!("trajectory {id} missing from ground truth")))?;
            let o = observed
                .remove(&id)
                .ok_or_else(|| Error::InvalidConfig(format!("trajectory {id} missing from observations")))?;
            Ok(TrajectoryPair {
                id,
                observed: IncompleteTrajectory::new(o, self.epsilon)?,
                truth: MapMatchedTrajectory::new(t, self.epsilon)?,
            })
        };
        self.clients
            .iter()
            .map(|c| {
                Ok(ClientDataset {
                    id: c.id,
                    train: c.train.iter().map(|&i| take(i)).collect::<Result<_>>()?,
                    valid: c.valid.iter().map(|&i| take(i)).collect::<Result<_>>()?,
                    test: c.test.iter().map(|&i| take(i)).collect::<Result<_>>()?,
                })
            })
            .collect()
    }
}
