//! Directed road networks with planar geometry.
//!
//! Coordinates are planar meters. Node and edge ids are dense indices into
//! the network's node and edge tables. Shortest-path trees are computed on
//! demand and memoized per source node.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    pub length: f64,
}

/// A position on the network: an edge plus the fraction of it already
/// traversed from its start node, stamped with a time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMatchedPoint {
    pub edge: EdgeId,
    pub r: f64,
    pub t: f64,
}

impl MapMatchedPoint {
    pub fn new(edge: EdgeId, r: f64, t: f64) -> Self {
        Self { edge, r, t }
    }
}

/// Single-source shortest path tree.
#[derive(Debug)]
struct PathTree {
    dist: Vec<f64>,
    pred: Vec<Option<EdgeId>>,
}

pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    outgoing: Vec<Vec<EdgeId>>,
    memo: Mutex<HashMap<NodeId, Arc<PathTree>>>,
}

impl Clone for RoadNetwork {
    fn clone(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            outgoing: self.outgoing.clone(),
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl std::fmt::Debug for RoadNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoadNetwork")
            .field("nodes", &self.nodes.len())
            .field("edges", &self.edges.len())
            .finish()
    }
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: NodeId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over an adjacency list of `(target, length, edge id)` entries.
pub(crate) fn dijkstra(
    adjacency: &[Vec<(NodeId, f64, EdgeId)>],
    source: NodeId,
) -> (Vec<f64>, Vec<Option<EdgeId>>) {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapEntry { dist: 0.0, node: source });
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, len, edge) in &adjacency[node] {
            let nd = d + len;
            if nd < dist[next] {
                dist[next] = nd;
                pred[next] = Some(edge);
                heap.push(HeapEntry { dist: nd, node: next });
            }
        }
    }
    (dist, pred)
}

/// Perpendicular distance from `(x, y)` to the segment `a -> b`, together with
/// the ratio of the closest point along the segment.
pub fn project_onto_segment(ax: f64, ay: f64, bx: f64, by: f64, x: f64, y: f64) -> (f64, f64) {
    let dx = bx - ax;
    let dy = by - ay;
    let len2 = dx * dx + dy * dy;
    let r = if len2 > 0.0 {
        (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let px = ax + r * dx;
    let py = ay + r * dy;
    (((x - px).powi(2) + (y - py).powi(2)).sqrt(), r)
}

impl RoadNetwork {
    /// Build a network from node coordinates and `(from, to)` node pairs.
    /// Ids are the positions in the given lists; lengths are Euclidean.
    pub fn new(coords: &[(f64, f64)], links: &[(NodeId, NodeId)]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidNetwork("network has no nodes".into()));
        }
        let nodes: Vec<Node> = coords
            .iter()
            .enumerate()
            .map(|(id, &(x, y))| Node { id, x, y })
            .collect();
        if nodes.iter().any(|n| !n.x.is_finite() || !n.y.is_finite()) {
            return Err(Error::InvalidNetwork("non-finite node coordinate".into()));
        }
        let mut edges = Vec::with_capacity(links.len());
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (id, &(from, to)) in links.iter().enumerate() {
            let (a, b) = match (nodes.get(from), nodes.get(to)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidNetwork(format!(
                        "edge {id} references a missing node"
                    )))
                }
            };
            let length = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
            if length <= 0.0 {
                return Err(Error::InvalidNetwork(format!("edge {id} has zero length")));
            }
            edges.push(Edge { id, from, to, length });
            outgoing[from].push(id);
        }
        Ok(Self {
            nodes,
            edges,
            outgoing,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn edge(&self, id: EdgeId) -> Result<&Edge> {
        self.edges.get(id).ok_or(Error::UnknownEdge(id))
    }

    pub fn outgoing(&self, node: NodeId) -> Result<&[EdgeId]> {
        self.outgoing
            .get(node)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownNode(node))
    }

    /// Endpoint coordinates `(x1, y1, x2, y2)` of an edge.
    pub fn edge_endpoints(&self, id: EdgeId) -> Result<(f64, f64, f64, f64)> {
        let e = self.edge(id)?;
        let a = &self.nodes[e.from];
        let b = &self.nodes[e.to];
        Ok((a.x, a.y, b.x, b.y))
    }

    /// Perpendicular distance from a coordinate to an edge, and the ratio of
    /// the projected point.
    pub fn project(&self, edge: EdgeId, x: f64, y: f64) -> Result<(f64, f64)> {
        let (ax, ay, bx, by) = self.edge_endpoints(edge)?;
        Ok(project_onto_segment(ax, ay, bx, by, x, y))
    }

    /// Bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.nodes.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), n| (a.min(n.x), b.min(n.y), c.max(n.x), d.max(n.y)),
        )
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.nodes.len() as f64;
        let (sx, sy) = self
            .nodes
            .iter()
            .fold((0.0, 0.0), |(sx, sy), node| (sx + node.x, sy + node.y));
        (sx / n, sy / n)
    }

    pub fn validate_point(&self, p: &MapMatchedPoint) -> Result<()> {
        self.edge(p.edge)?;
        if !(0.0..=1.0).contains(&p.r) {
            return Err(Error::InvalidTrajectory(format!(
                "moving ratio {} outside [0, 1]",
                p.r
            )));
        }
        Ok(())
    }

    /// Planar coordinates of a map-matched point: `N1 + r (N2 - N1)`.
    pub fn point_position(&self, p: &MapMatchedPoint) -> Result<(f64, f64)> {
        let (ax, ay, bx, by) = self.edge_endpoints(p.edge)?;
        Ok((ax + p.r * (bx - ax), ay + p.r * (by - ay)))
    }

    fn tree(&self, source: NodeId) -> Result<Arc<PathTree>> {
        self.node(source)?;
        if let Some(tree) = self.memo.lock().expect("memo poisoned").get(&source) {
            return Ok(Arc::clone(tree));
        }
        let adjacency: Vec<Vec<(NodeId, f64, EdgeId)>> = self
            .outgoing
            .iter()
            .map(|out| {
                out.iter()
                    .map(|&e| (self.edges[e].to, self.edges[e].length, e))
                    .collect()
            })
            .collect();
        let (dist, pred) = dijkstra(&adjacency, source);
        let tree = Arc::new(PathTree { dist, pred });
        self.memo
            .lock()
            .expect("memo poisoned")
            .insert(source, Arc::clone(&tree));
        Ok(tree)
    }

    /// Length of the shortest directed path, or `None` when unreachable.
    pub fn shortest_path_distance(&self, from: NodeId, to: NodeId) -> Result<Option<f64>> {
        self.node(to)?;
        let tree = self.tree(from)?;
        let d = tree.dist[to];
        Ok(d.is_finite().then_some(d))
    }

    /// Edge sequence of a shortest directed path, or `None` when unreachable.
    pub fn shortest_path_edges(&self, from: NodeId, to: NodeId) -> Result<Option<Vec<EdgeId>>> {
        self.node(to)?;
        let tree = self.tree(from)?;
        if !tree.dist[to].is_finite() {
            return Ok(None);
        }
        let mut path = Vec::new();
        let mut cur = to;
        while cur != from {
            let e = tree.pred[cur].expect("reachable node has a predecessor");
            path.push(e);
            cur = self.edges[e].from;
        }
        path.reverse();
        Ok(Some(path))
    }

    /// Directed network distance from `a` to `b`, or `None` if `b` cannot
    /// be reached from `a`.
    pub fn rn_distance_directed(
        &self,
        a: &MapMatchedPoint,
        b: &MapMatchedPoint,
    ) -> Result<Option<f64>> {
        let ea = *self.edge(a.edge)?;
        let eb = *self.edge(b.edge)?;
        if a.edge == b.edge && a.r <= b.r {
            return Ok(Some((b.r - a.r) * ea.length));
        }
        Ok(self
            .shortest_path_distance(ea.to, eb.from)?
            .map(|mid| (1.0 - a.r) * ea.length + mid + b.r * eb.length))
    }

    /// Road-network constrained distance: the smaller of the two directed
    /// distances. `None` when neither direction is connected.
    pub fn rn_distance(&self, a: &MapMatchedPoint, b: &MapMatchedPoint) -> Result<Option<f64>> {
        let ab = self.rn_distance_directed(a, b)?;
        let ba = self.rn_distance_directed(b, a)?;
        Ok(match (ab, ba) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        })
    }

    pub fn to_json(&self) -> NetworkFile {
        NetworkFile {
            nodes: self.nodes.iter().map(|n| (n.id, n.x, n.y)).collect(),
            edges: self.edges.iter().map(|e| (e.id, e.from, e.to)).collect(),
        }
    }

    pub fn from_json(file: &NetworkFile) -> Result<Self> {
        let mut nodes = file.nodes.clone();
        nodes.sort_by_key(|n| n.0);
        if nodes.iter().enumerate().any(|(i, n)| n.0 != i) {
            return Err(Error::InvalidNetwork("node ids must be dense from 0".into()));
        }
        let mut edges = file.edges.clone();
        edges.sort_by_key(|e| e.0);
        if edges.iter().enumerate().any(|(i, e)| e.0 != i) {
            return Err(Error::InvalidNetwork("edge ids must be dense from 0".into()));
        }
        let coords: Vec<(f64, f64)> = nodes.iter().map(|n| (n.1, n.2)).collect();
        let links: Vec<(NodeId, NodeId)> = edges.iter().map(|e| (e.1, e.2)).collect();
        Self::new(&coords, &links)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file: NetworkFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_json(&file)
    }
}

/// On-disk network: `{"nodes": [[id, x, y], ...], "edges": [[id, n1, n2], ...]}`.
/// Edge lengths are recomputed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub nodes: Vec<(usize, f64, f64)>,
    pub edges: Vec<(usize, usize, usize)>,
}

/// Lattice of `rows x cols` nodes spaced `spacing` meters apart, with one
/// directed edge in each direction between lattice neighbours.
///
/// The lattice is fully determined by its dimensions; `seed` is accepted so
/// every generator in the crate shares the same calling convention.
pub fn generate_grid_network(rows: usize, cols: usize, spacing: f64, _seed: u64) -> Result<RoadNetwork> {
    if rows < 2 || cols < 1 {
        return Err(Error::InvalidDimension(format!(
            "lattice needs rows >= 2 and cols >= 1, got {rows}x{cols}"
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidDimension(format!("spacing {spacing} must be positive")));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut coords = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            coords.push((c as f64 * spacing, r as f64 * spacing));
        }
    }
    let mut links = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                links.push((idx(r, c), idx(r, c + 1)));
                links.push((idx(r, c + 1), idx(r, c)));
            }
            if r + 1 < rows {
                links.push((idx(r, c), idx(r + 1, c)));
                links.push((idx(r + 1, c), idx(r, c)));
            }
        }
    }
    RoadNetwork::new(&coords, &links)
}

/// Regular grid over the plane used to discretize positions into cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub cols: usize,
    pub rows: usize,
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, cols: usize, rows: usize) -> Result<Self> {
        if !(cell_size > 0.0) || cols == 0 || rows == 0 {
            return Err(Error::InvalidDimension(format!(
                "grid needs a positive cell size and at least one cell, got {cell_size} m, {cols}x{rows}"
            )));
        }
        Ok(Self { origin_x, origin_y, cell_size, cols, rows })
    }

    /// Smallest grid anchored at the network's lower-left corner whose extent
    /// covers every node.
    pub fn covering(net: &RoadNetwork, cell_size: f64) -> Result<Self> {
        let (min_x, min_y, max_x, max_y) = net.bounds();
        let cols = ((max_x - min_x) / cell_size).floor() as usize + 1;
        let rows = ((max_y - min_y) / cell_size).floor() as usize + 1;
        Self::new(min_x, min_y, cell_size, cols, rows)
    }

    /// Cell indices `(x index, y index)` containing a coordinate. Coordinates
    /// on the far boundary of the extent fall into the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let fx = (x - self.origin_x) / self.cell_size;
        let fy = (y - self.origin_y) / self.cell_size;
        let inside = |f: f64, n: usize| f >= 0.0 && f <= n as f64;
        if !inside(fx, self.cols) || !inside(fy, self.rows) {
            return Err(Error::OutOfExtent { x, y });
        }
        let ix = (fx.floor() as usize).min(self.cols - 1);
        let iy = (fy.floor() as usize).min(self.rows - 1);
        Ok((ix, iy))
    }
}
