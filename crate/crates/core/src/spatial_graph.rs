//! Directed proposal graphs over 3D box centers.
//!
//! Two strategies: k nearest neighbours and fixed radius. Both are served by a
//! static kd-tree; [`crate::oracle`] holds the quadratic reference
//! construction the tree is tested against.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("knn strategy needs k >= 1")]
    ZeroK,
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("neighbor index {index} out of range for {num_nodes} nodes")]
    IndexOutOfRange { index: usize, num_nodes: usize },
    #[error("node {0} lists itself as a neighbor")]
    SelfLoop(usize),
}

/// Squared Euclidean distance, summed in x, y, z order.
#[inline]
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// How neighbours are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphStrategy {
    Knn { k: usize },
    Radius { r: f64 },
}

impl GraphStrategy {
    pub fn validate(&self) -> Result<(), GraphError> {
        match *self {
            GraphStrategy::Knn { k: 0 } => Err(GraphError::ZeroK),
            GraphStrategy::Radius { r } if !(r > 0.0) || !r.is_finite() => {
                Err(GraphError::BadRadius(r))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, centers: &[[f64; 3]]) -> Result<RelationGraph, GraphError> {
        self.validate()?;
        Ok(match *self {
            GraphStrategy::Knn { k } => knn_graph(centers, k),
            GraphStrategy::Radius { r } => radius_graph(centers, r),
        })
    }
}

impl Default for GraphStrategy {
    fn default() -> Self {
        GraphStrategy::Knn { k: 16 }
    }
}

/// Directed graph: `neighbors[i]` is N(i), edge `(i, j)` exists for each
/// `j` in N(i). Neighbour lists are kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct RelationGraph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawGraph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
}

impl TryFrom<RawGraph> for RelationGraph {
    type Error = GraphError;

    fn try_from(raw: RawGraph) -> Result<Self, Self::Error> {
        if raw.neighbors.len() != raw.num_nodes {
            return Err(GraphError::IndexOutOfRange {
                index: raw.neighbors.len(),
                num_nodes: raw.num_nodes,
            });
        }
        RelationGraph::from_neighbors(raw.neighbors)
    }
}

impl RelationGraph {
    /// Validates indices and canonicalizes neighbour order. Duplicate entries
    /// are collapsed.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let num_nodes = neighbors.len();
        for (i, list) in neighbors.iter_mut().enumerate() {
            for &j in list.iter() {
                if j >= num_nodes {
                    return Err(GraphError::IndexOutOfRange {
                        index: j,
                        num_nodes,
                    });
                }
                if j == i {
                    return Err(GraphError::SelfLoop(i));
                }
            }
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            num_nodes,
            neighbors,
        })
    }

    /// Graph with no edges.
    pub fn edgeless(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            neighbors: vec![Vec::new(); num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Directed edges `(i, j)` in node order, then neighbour order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn contains_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors
            .get(i)
            .is_some_and(|list| list.binary_search(&j).is_ok())
    }

    /// Relabels nodes: old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_nodes, "permutation length");
        let mut neighbors = vec![Vec::new(); self.num_nodes];
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut mapped: Vec<usize> = list.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            neighbors[perm[i]] = mapped;
        }
        Self {
            num_nodes: self.num_nodes,
            neighbors,
        }
    }

    pub fn degree_stats(&self) -> DegreeStats {
        graph_degree_stats(self)
    }
}

/// Out-degree statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

pub fn graph_degree_stats(g: &RelationGraph) -> DegreeStats {
    if g.num_nodes == 0 {
        return DegreeStats {
            min: 0,
            max: 0,
            mean: 0.0,
        };
    }
    let degrees = g.neighbors.iter().map(Vec::len);
    DegreeStats {
        min: degrees.clone().min().unwrap_or(0),
        max: degrees.clone().max().unwrap_or(0),
        mean: g.num_edges() as f64 / g.num_nodes as f64,
    }
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over 3D points.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

/// Candidate ordered by `(distance, index)`; the heap keeps the worst on top.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl SpatialIndex {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            root: None,
        };
        if !points.is_empty() {
            let root = index.build_node(0, points.len());
            index.root = Some(root);
        }
        index
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        let slot = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query` sorted by `(distance, index)`,
    /// skipping `exclude` if given.
    pub fn nearest(&self, query: &[f64; 3], k: usize, exclude: Option<usize>) -> Vec<usize> {
        let Some(root) = self.root else {
            return Vec::new();
        };
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_visit(root, query, k, exclude, &mut heap);
        heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
    }

    fn knn_visit(
        &self,
        node: usize,
        query: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    if Some(index) == exclude {
                        continue;
                    }
                    let cand = Candidate {
                        dist2: squared_distance(query, &self.points[index]),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if heap.peek().is_some_and(|worst| cand < *worst) {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_visit(near, query, k, exclude, heap);
                // Points beyond the plane are at least |diff| away; equal
                // distances must still be visited for index tie-breaking.
                let bound = diff * diff;
                let prune = heap.len() == k && heap.peek().is_some_and(|w| bound > w.dist2);
                if !prune {
                    self.knn_visit(far, query, k, exclude, heap);
                }
            }
        }
    }

    /// All points with squared distance `<= r*r`, ascending by index.
    pub fn within_radius(&self, query: &[f64; 3], r: f64, exclude: Option<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(root) = self.root {
            self.radius_visit(root, query, r * r, exclude, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_visit(
        &self,
        node: usize,
        query: &[f64; 3],
        r2: f64,
        exclude: Option<usize>,
        out: &mut Vec<usize>,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                out.extend(self.order[start..end].iter().copied().filter(|&i| {
                    Some(i) != exclude && squared_distance(query, &self.points[i]) <= r2
                }));
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.radius_visit(near, query, r2, exclude, out);
                if diff * diff <= r2 {
                    self.radius_visit(far, query, r2, exclude, out);
                }
            }
        }
    }
}

/// Each node points to its `min(k, n-1)` nearest other nodes. Equal
/// distances are resolved toward the lower node index.
pub fn knn_graph(centers: &[[f64; 3]], k: usize) -> RelationGraph {
    let index = SpatialIndex::build(centers);
    let k = k.min(centers.len().saturating_sub(1));
    let neighbors = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut list = index.nearest(c, k, Some(i));
            list.sort_unstable();
            list
        })
        .collect();
    RelationGraph {
        num_nodes: centers.len(),
        neighbors,
    }
}

/// Each node points to every other node within distance `r` (inclusive).
pub fn radius_graph(centers: &[[f64; 3]], r: f64) -> RelationGraph {
    let index = SpatialIndex::build(centers);
    let neighbors = centers
        .iter()
        .enumerate()
        .map(|(i, c)| index.within_radius(c, r, Some(i)))
        .collect();
    RelationGraph {
        num_nodes: centers.len(),
        neighbors,
    }
}
