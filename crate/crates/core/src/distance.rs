//! Distance backends: the homogeneous box norm and the epsilon-Riemannian
//! shortest-path approximation on a lattice graph.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::group::{BoxNormParams, StratifiedAlgebra};
use crate::lattice::Lattice;
use crate::scalar::Scalar;

/// Distance backend selector.
#[derive(Debug, Clone)]
pub enum DistanceBackend<F> {
    /// Homogeneous box quasi-distance (equivalent to the
    /// Carnot-Caratheodory distance up to structure constants).
    Box(BoxNormParams<F>),
    /// Shortest-path distance in the epsilon-Riemannian metric on a lattice
    /// graph; a lower bound for d_cc up to mesh error, increasing as
    /// epsilon decreases.
    RiemannianEps(Arc<RiemannianGraph<F>>),
}

impl<F: Scalar> DistanceBackend<F> {
    pub fn boxed(group: &StratifiedAlgebra<F>) -> Self {
        DistanceBackend::Box(BoxNormParams::ones(group.step()))
    }

    pub fn distance(&self, group: &StratifiedAlgebra<F>, x: &[F], y: &[F]) -> Result<F> {
        match self {
            DistanceBackend::Box(params) => Ok(group.box_distance(params, x, y)),
            DistanceBackend::RiemannianEps(graph) => graph.distance(x, y),
        }
    }

    pub fn distance_to_origin(&self, group: &StratifiedAlgebra<F>, x: &[F]) -> Result<F> {
        let origin = vec![F::zero(); group.dim()];
        self.distance(group, x, &origin)
    }
}

/// Lattice graph with edge lengths measured in the metric that makes
/// `eps^{d(i)-1} X_i` orthonormal. Edges connect each node to its full
/// Moore neighborhood (all +/-1 index offsets).
#[derive(Debug)]
pub struct RiemannianGraph<F> {
    group: Arc<StratifiedAlgebra<F>>,
    lattice: Arc<Lattice<F>>,
    eps: F,
    /// forward offsets in index space and per-node edge lengths
    offsets: Vec<i64>,
    lengths: Vec<Vec<F>>,
    neighbor_deltas: Vec<Vec<i64>>,
}

impl<F: Scalar> RiemannianGraph<F> {
    pub fn new(
        group: Arc<StratifiedAlgebra<F>>,
        lattice: Arc<Lattice<F>>,
        eps: F,
    ) -> Result<Self> {
        if eps <= F::zero() {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        let n = lattice.ndim();
        if n != group.dim() {
            return Err(Error::InvalidArgument(
                "lattice/group dimension mismatch".into(),
            ));
        }
        // forward half of the Moore stencil (lexicographically positive)
        let mut deltas: Vec<Vec<i64>> = Vec::new();
        let mut cur = vec![-1i64; n];
        'gen: loop {
            if cur.iter().any(|&d| d != 0) {
                let first_nonzero = cur.iter().find(|&&d| d != 0).copied().unwrap();
                if first_nonzero > 0 {
                    deltas.push(cur.clone());
                }
            }
            for axis in (0..n).rev() {
                cur[axis] += 1;
                if cur[axis] <= 1 {
                    continue 'gen;
                }
                cur[axis] = -1;
            }
            break;
        }

        let strides: Vec<i64> = (0..n)
            .map(|axis| lattice.counts()[axis + 1..].iter().product::<usize>() as i64)
            .collect();
        let offsets: Vec<i64> = deltas
            .iter()
            .map(|d| d.iter().zip(&strides).map(|(&a, &s)| a * s).sum())
            .collect();

        // weights per direction i: ||v||_eps^2 = sum_i alpha_i^2 eps^{2(1 - d(i))}
        let metric_weights: Vec<F> = (0..n)
            .map(|i| eps.powi(2 * (1 - group.coord_degree(i) as i32)))
            .collect();

        let nodes = lattice.num_nodes();
        let mut lengths: Vec<Vec<F>> = vec![vec![F::zero(); deltas.len()]; nodes];
        let mut coords = vec![F::zero(); n];
        let mut mid = vec![F::zero(); n];
        let mut disp = vec![F::zero(); n];
        let half = F::of(0.5);
        for idx in 0..nodes {
            lattice.coords_into(idx, &mut coords);
            let multi = lattice.multi_index(idx);
            for (di, delta) in deltas.iter().enumerate() {
                let ok = (0..n).all(|axis| {
                    let t = multi[axis] as i64 + delta[axis];
                    t >= 0 && t < lattice.counts()[axis] as i64
                });
                if !ok {
                    continue;
                }
                for axis in 0..n {
                    disp[axis] = F::of(delta[axis] as f64) * lattice.spacing()[axis];
                    mid[axis] = coords[axis] + disp[axis] * half;
                }
                let alpha = group.frame_coordinates(&mid, &disp);
                let mut len2 = F::zero();
                for i in 0..n {
                    len2 += alpha[i] * alpha[i] * metric_weights[i];
                }
                lengths[idx][di] = len2.sqrt();
            }
        }
        Ok(RiemannianGraph {
            group,
            lattice,
            eps,
            offsets,
            lengths,
            neighbor_deltas: deltas,
        })
    }

    pub fn eps(&self) -> F {
        self.eps
    }

    pub fn lattice(&self) -> &Arc<Lattice<F>> {
        &self.lattice
    }

    pub fn group(&self) -> &Arc<StratifiedAlgebra<F>> {
        &self.group
    }

    /// Shortest-path distances from a source node to every node.
    pub fn distance_field(&self, src: usize) -> Vec<F> {
        let nodes = self.lattice.num_nodes();
        let mut dist = vec![F::infinity(); nodes];
        let mut done = vec![false; nodes];
        let mut heap: BinaryHeap<HeapEntry<F>> = BinaryHeap::new();
        dist[src] = F::zero();
        heap.push(HeapEntry {
            cost: F::zero(),
            node: src as u32,
        });
        while let Some(HeapEntry { cost, node }) = heap.pop() {
            let u = node as usize;
            if done[u] {
                continue;
            }
            done[u] = true;
            let umulti = self.lattice.multi_index(u);
            for (di, delta) in self.neighbor_deltas.iter().enumerate() {
                // forward edge
                let fwd_ok = (0..delta.len()).all(|axis| {
                    let t = umulti[axis] as i64 + delta[axis];
                    t >= 0 && t < self.lattice.counts()[axis] as i64
                });
                if fwd_ok {
                    let v = (u as i64 + self.offsets[di]) as usize;
                    let nd = cost + self.lengths[u][di];
                    if nd < dist[v] {
                        dist[v] = nd;
                        heap.push(HeapEntry {
                            cost: nd,
                            node: v as u32,
                        });
                    }
                }
                // backward edge: stored at the other endpoint
                let bwd_ok = (0..delta.len()).all(|axis| {
                    let t = umulti[axis] as i64 - delta[axis];
                    t >= 0 && t < self.lattice.counts()[axis] as i64
                });
                if bwd_ok {
                    let v = (u as i64 - self.offsets[di]) as usize;
                    let nd = cost + self.lengths[v][di];
                    if nd < dist[v] {
                        dist[v] = nd;
                        heap.push(HeapEntry {
                            cost: nd,
                            node: v as u32,
                        });
                    }
                }
            }
        }
        dist
    }

    /// Distance between two points after snapping to the nearest nodes.
    pub fn distance(&self, x: &[F], y: &[F]) -> Result<F> {
        let sx = self.lattice.nearest_node(x)?;
        let sy = self.lattice.nearest_node(y)?;
        if sx == sy {
            return Ok(F::zero());
        }
        let field = self.distance_field(sx);
        let d = field[sy];
        if !d.is_finite() {
            return Err(Error::SolverFailure("unreachable lattice node".into()));
        }
        Ok(d)
    }
}

struct HeapEntry<F> {
    cost: F,
    node: u32,
}

impl<F: Scalar> PartialEq for HeapEntry<F> {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.node == other.node
    }
}
impl<F: Scalar> Eq for HeapEntry<F> {}
impl<F: Scalar> Ord for HeapEntry<F> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then lowest index for determinism
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl<F: Scalar> PartialOrd for HeapEntry<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
