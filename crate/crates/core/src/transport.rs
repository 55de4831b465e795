//! Wasserstein distances between grid measures: support compression, exact
//! min-cost transport (successive shortest augmenting paths with
//! potentials) and entropic regularization (log-domain Sinkhorn).

use crate::distance::{DistanceBackend, RiemannianGraph};
use crate::error::{Error, Result};
use crate::group::StratifiedAlgebra;
use crate::lattice::{FlowTrace, GridMeasure};
use crate::scalar::{tree_sum, Scalar};

/// Weighted point cloud with positive weights summing to one.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure<F> {
    pub points: Vec<Vec<F>>,
    pub weights: Vec<F>,
}

impl<F: Scalar> DiscreteMeasure<F> {
    pub fn new(points: Vec<Vec<F>>, weights: Vec<F>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::InvalidMeasure("points/weights mismatch".into()));
        }
        if weights.iter().any(|&w| w <= F::zero()) {
            return Err(Error::InvalidMeasure("weights must be positive".into()));
        }
        let total = tree_sum(&weights);
        if (total - F::one()).abs() > F::of(1e-12) {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {:e}, expected 1",
                total.to_f64_lossy()
            )));
        }
        Ok(DiscreteMeasure { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Shared block partition of a lattice used for support compression. All
/// measures compressed with the same partition share block geometry, so
/// compression errors largely cancel in distance differences.
#[derive(Debug, Clone)]
pub struct Partition {
    /// node index blocks; each node of the lattice occurs in at most one
    pub blocks: Vec<Vec<u32>>,
}

/// Build a partition adapted to a reference density by greedy
/// mass-times-squared-diameter splitting along the widest axis.
pub fn build_partition<F: Scalar>(mu: &GridMeasure<F>, max_points: usize) -> Result<Partition> {
    if max_points < 8 {
        return Err(Error::InvalidArgument("need max_points >= 8".into()));
    }
    let lattice = mu.lattice();
    let n = lattice.ndim();
    let rho = mu.density();

    struct Block {
        lo: Vec<usize>,
        hi: Vec<usize>, // inclusive index bounds
        mass: f64,
        score: f64,
    }
    let block_mass = |lo: &[usize], hi: &[usize]| -> f64 {
        let mut total = 0.0;
        let mut multi = lo.to_vec();
        loop {
            let idx = multi
                .iter()
                .zip(lattice.counts().iter().enumerate())
                .fold(0usize, |acc, (&i, (axis, _))| {
                    acc + i * lattice.counts()[axis + 1..].iter().product::<usize>()
                });
            total += rho[idx].to_f64_lossy();
            let mut axis = n;
            loop {
                if axis == 0 {
                    return total;
                }
                axis -= 1;
                multi[axis] += 1;
                if multi[axis] <= hi[axis] {
                    break;
                }
                multi[axis] = lo[axis];
            }
        }
    };
    let score_of = |lo: &[usize], hi: &[usize], mass: f64| -> f64 {
        let diam2: f64 = (0..n)
            .map(|axis| {
                let ext = (hi[axis] - lo[axis]) as f64 * lattice.spacing()[axis].to_f64_lossy();
                ext * ext
            })
            .sum();
        mass * diam2
    };

    let lo0 = vec![0usize; n];
    let hi0: Vec<usize> = lattice.counts().iter().map(|&c| c - 1).collect();
    let m0 = block_mass(&lo0, &hi0);
    let mut blocks = vec![Block {
        score: score_of(&lo0, &hi0, m0),
        lo: lo0,
        hi: hi0,
        mass: m0,
    }];

    while blocks.len() < max_points {
        // split the block with the largest score along its widest axis
        let (bi, _) = match blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.score > 0.0 && b.lo != b.hi)
            .max_by(|a, b| {
                a.1.score
                    .partial_cmp(&b.1.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| b.0.cmp(&a.0))
            }) {
            Some(x) => x,
            None => break,
        };
        let block = &blocks[bi];
        let axis = (0..n)
            .max_by(|&a, &b| {
                let ea = (block.hi[a] - block.lo[a]) as f64 * lattice.spacing()[a].to_f64_lossy();
                let eb = (block.hi[b] - block.lo[b]) as f64 * lattice.spacing()[b].to_f64_lossy();
                ea.partial_cmp(&eb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| b.cmp(&a))
            })
            .unwrap();
        if block.hi[axis] == block.lo[axis] {
            blocks[bi].score = 0.0;
            continue;
        }
        // mass median along the axis
        let (lo, hi) = (blocks[bi].lo.clone(), blocks[bi].hi.clone());
        let mut slice_masses = Vec::with_capacity(hi[axis] - lo[axis] + 1);
        for pos in lo[axis]..=hi[axis] {
            let mut slo = lo.clone();
            let mut shi = hi.clone();
            slo[axis] = pos;
            shi[axis] = pos;
            slice_masses.push(block_mass(&slo, &shi));
        }
        let total: f64 = slice_masses.iter().sum();
        let mut acc = 0.0;
        let mut cut = lo[axis];
        for (k, &sm) in slice_masses.iter().enumerate() {
            acc += sm;
            if acc >= total / 2.0 {
                cut = lo[axis] + k;
                break;
            }
        }
        let cut = cut.min(hi[axis] - 1); // keep both halves nonempty
        let mut hi_left = hi.clone();
        hi_left[axis] = cut;
        let mut lo_right = lo.clone();
        lo_right[axis] = cut + 1;
        let m_left = block_mass(&lo, &hi_left);
        let m_right = blocks[bi].mass - m_left;
        let left = Block {
            score: score_of(&lo, &hi_left, m_left),
            lo,
            hi: hi_left,
            mass: m_left,
        };
        let right = Block {
            score: score_of(&lo_right, &hi, m_right.max(0.0)),
            lo: lo_right,
            hi,
            mass: m_right.max(0.0),
        };
        blocks[bi] = left;
        blocks.push(right);
    }

    let mut out = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let mut nodes = Vec::new();
        let mut multi = b.lo.clone();
        loop {
            nodes.push(lattice.index(&multi) as u32);
            let mut axis = n;
            let mut done = false;
            loop {
                if axis == 0 {
                    done = true;
                    break;
                }
                axis -= 1;
                multi[axis] += 1;
                if multi[axis] <= b.hi[axis] {
                    break;
                }
                multi[axis] = b.lo[axis];
            }
            if done {
                break;
            }
        }
        out.push(nodes);
    }
    Ok(Partition { blocks: out })
}

/// Compress a measure onto the blocks of a partition: block weights are the
/// contained mass (mass-preserving) and block points the mass-weighted
/// coordinate barycenters.
pub fn compress_with_partition<F: Scalar>(
    mu: &GridMeasure<F>,
    partition: &Partition,
) -> Result<DiscreteMeasure<F>> {
    let lattice = mu.lattice();
    let n = lattice.ndim();
    let vol = lattice.cell_volume();
    let rho = mu.density();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut coords = vec![F::zero(); n];
    for block in &partition.blocks {
        let mut w = F::zero();
        let mut bary = vec![F::zero(); n];
        for &node in block {
            let m = rho[node as usize] * vol;
            if m == F::zero() {
                continue;
            }
            w += m;
            lattice.coords_into(node as usize, &mut coords);
            for axis in 0..n {
                bary[axis] += m * coords[axis];
            }
        }
        if w > F::zero() {
            for b in &mut bary {
                *b /= w;
            }
            points.push(bary);
            weights.push(w);
        }
    }
    // exact mass preservation: renormalize the rounding residue
    let total = tree_sum(&weights);
    for w in &mut weights {
        *w /= total;
    }
    DiscreteMeasure::new(points, weights)
}

/// Compress a measure into at most `max_points` weighted points.
pub fn support_compress<F: Scalar>(
    mu: &GridMeasure<F>,
    max_points: usize,
) -> Result<DiscreteMeasure<F>> {
    let partition = build_partition(mu, max_points)?;
    compress_with_partition(mu, &partition)
}

/// Matrix of squared distances between two point sets.
pub fn cost_matrix<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    backend: &DistanceBackend<F>,
    a: &[Vec<F>],
    b: &[Vec<F>],
) -> Result<Vec<Vec<F>>> {
    match backend {
        DistanceBackend::Box(params) => Ok(a
            .iter()
            .map(|x| {
                b.iter()
                    .map(|y| {
                        let d = group.box_distance(params, x, y);
                        d * d
                    })
                    .collect()
            })
            .collect()),
        DistanceBackend::RiemannianEps(graph) => cost_matrix_graph(graph, a, b),
    }
}

fn cost_matrix_graph<F: Scalar>(
    graph: &RiemannianGraph<F>,
    a: &[Vec<F>],
    b: &[Vec<F>],
) -> Result<Vec<Vec<F>>> {
    let lattice = graph.lattice();
    let targets: Vec<usize> = b
        .iter()
        .map(|y| lattice.nearest_node(y))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(a.len());
    // group rows by snapped source node to share Dijkstra runs
    let sources: Vec<usize> = a
        .iter()
        .map(|x| lattice.nearest_node(x))
        .collect::<Result<_>>()?;
    let mut cache: std::collections::BTreeMap<usize, Vec<F>> = std::collections::BTreeMap::new();
    for &src in &sources {
        if !cache.contains_key(&src) {
            cache.insert(src, graph.distance_field(src));
        }
        if cache.len() > 64 {
            // keep memory bounded; rows arrive roughly sorted by geometry
            let evict = *cache.keys().next().unwrap();
            if evict != src {
                cache.remove(&evict);
            }
        }
    }
    for &src in &sources {
        let field = match cache.get(&src) {
            Some(f) => f.clone(),
            None => graph.distance_field(src),
        };
        let row: Vec<F> = targets
            .iter()
            .map(|&t| {
                let d = field[t];
                d * d
            })
            .collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure("unreachable node in cost matrix".into()));
        }
        out.push(row);
    }
    Ok(out)
}

/// Coupling between two discrete measures.
#[derive(Debug, Clone)]
pub struct TransportPlan<F> {
    /// (source index, target index, mass) triples with positive mass
    pub entries: Vec<(u32, u32, F)>,
    /// transport cost `sum pi_ab c_ab`
    pub cost: F,
    /// maximum L1 marginal violation
    pub marginal_residual: F,
    /// verified optimal (exact solver only)
    pub certified_optimal: bool,
    /// |primal - dual| / max(1, primal) from the potentials (exact solver)
    pub duality_gap: F,
}

impl<F: Scalar> TransportPlan<F> {
    /// Row and column sums of the plan.
    pub fn marginals(&self, m: usize, n: usize) -> (Vec<F>, Vec<F>) {
        let mut rows = vec![F::zero(); m];
        let mut cols = vec![F::zero(); n];
        for &(a, b, w) in &self.entries {
            rows[a as usize] += w;
            cols[b as usize] += w;
        }
        (rows, cols)
    }
}

/// Exact optimal transport by successive shortest augmenting paths with
/// Johnson potentials. Deterministic: sources are drained in index order and
/// ties in the path search resolve to the lowest node index.
pub fn solve_exact<F: Scalar>(
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cost: &[Vec<F>],
) -> Result<TransportPlan<F>> {
    let m = mu.len();
    let n = nu.len();
    if m > 4096 || n > 4096 {
        return Err(Error::InvalidArgument(
            "exact solver capped at 4096 support points".into(),
        ));
    }
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("cost matrix shape mismatch".into()));
    }

    let mut supply: Vec<F> = mu.weights.clone();
    let mut demand: Vec<F> = nu.weights.clone();
    let mut flow = vec![vec![F::zero(); n]; m];
    // potentials over sources then sinks
    let mut pot = vec![F::zero(); m + n];
    let big = F::infinity();
    let tol = F::of(1e-15);

    // reverse-arc bottlenecks mean more than m+n-1 augmentations can occur
    // with real-valued weights; the cap only guards against stalls
    let max_aug = 64 * (m + n) + 64;
    let mut augmentations = 0usize;
    loop {
        let active: Vec<usize> = (0..m).filter(|&a| supply[a] > tol).collect();
        let remaining: F = {
            let vals: Vec<F> = active.iter().map(|&a| supply[a]).collect();
            tree_sum(&vals)
        };
        // stop once only rounding dust remains on either side
        if active.is_empty() || remaining <= F::of(1e-12) {
            break;
        }
        augmentations += 1;
        if augmentations > max_aug {
            return Err(Error::SolverFailure(format!(
                "exact OT: augmentation cap {max_aug} exceeded"
            )));
        }
        // multi-source Dijkstra on the residual graph with reduced costs
        let total = m + n;
        let mut dist = vec![big; total];
        let mut done = vec![false; total];
        let mut parent = vec![usize::MAX; total];
        for &a in &active {
            dist[a] = F::zero();
        }
        let demand_left: F = {
            let vals: Vec<F> = (0..n).map(|b| demand[b].max(F::zero())).collect();
            tree_sum(&vals)
        };
        if demand_left <= F::of(1e-12) {
            break;
        }
        let mut settled_sink = usize::MAX;
        loop {
            let mut u = usize::MAX;
            let mut best = big;
            for v in 0..total {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= m && demand[u - m] > tol {
                settled_sink = u - m;
                break;
            }
            if u < m {
                // forward arcs to all sinks
                for b in 0..n {
                    let rc = cost[u][b] + pot[u] - pot[m + b];
                    let nd = dist[u] + rc.max(F::zero());
                    if nd < dist[m + b] {
                        dist[m + b] = nd;
                        parent[m + b] = u;
                    }
                }
            } else {
                // residual reverse arcs where flow is positive
                let b = u - m;
                for a in 0..m {
                    if flow[a][b] > tol {
                        let rc = -cost[a][b] + pot[u] - pot[a];
                        let nd = dist[u] + rc.max(F::zero());
                        if nd < dist[a] {
                            dist[a] = nd;
                            parent[a] = u;
                        }
                    }
                }
            }
        }
        let sink = settled_sink;
        if sink == usize::MAX {
            return Err(Error::SolverFailure(
                "exact OT: no reachable sink with demand".into(),
            ));
        }
        // bottleneck along the path
        let mut bottleneck = demand[sink];
        let mut v = m + sink;
        loop {
            let p = parent[v];
            if v >= m {
                if p == usize::MAX {
                    break;
                }
                v = p; // arrived at a source via forward arc
            } else {
                bottleneck = bottleneck.min(flow[v][p - m]);
                v = p;
            }
            if v < m && parent[v] == usize::MAX {
                bottleneck = bottleneck.min(supply[v]);
                break;
            }
        }
        // augment
        let mut v = m + sink;
        loop {
            let p = parent[v];
            if v >= m {
                flow[p][v - m] += bottleneck;
                v = p;
            } else {
                flow[v][p - m] -= bottleneck;
                v = p;
            }
            if v < m && parent[v] == usize::MAX {
                supply[v] -= bottleneck;
                break;
            }
        }
        demand[sink] -= bottleneck;
        // potential update capped at the settled distance keeps reduced
        // costs nonnegative (Johnson with early termination)
        let cap = dist[m + sink];
        for vtx in 0..total {
            pot[vtx] += dist[vtx].min(cap);
        }
    }

    // assemble plan and certify
    let mut entries = Vec::new();
    let mut cost_vals = Vec::new();
    for a in 0..m {
        for b in 0..n {
            if flow[a][b] > F::zero() {
                entries.push((a as u32, b as u32, flow[a][b]));
                cost_vals.push(flow[a][b] * cost[a][b]);
            }
        }
    }
    let total_cost = tree_sum(&cost_vals);
    let plan = TransportPlan {
        entries,
        cost: total_cost,
        marginal_residual: F::zero(),
        certified_optimal: false,
        duality_gap: F::zero(),
    };
    certify(plan, mu, nu, cost, &flow, &pot)
}

/// Complementary-slackness certificate: no residual arc has negative
/// reduced cost (so no negative cycle exists) and every positive flow rides
/// a tightly reduced arc.
fn certify<F: Scalar>(
    mut plan: TransportPlan<F>,
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cost: &[Vec<F>],
    flow: &[Vec<F>],
    pot: &[F],
) -> Result<TransportPlan<F>> {
    let m = mu.len();
    let n = nu.len();
    let scale = cost
        .iter()
        .flat_map(|r| r.iter())
        .fold(F::one(), |a, &b| a.max(b.abs()));
    let tol = F::of(1e-9) * scale;
    let mut ok = true;
    for a in 0..m {
        for b in 0..n {
            let rc = cost[a][b] + pot[a] - pot[m + b];
            if rc < -tol {
                ok = false;
            }
            if flow[a][b] > F::of(1e-12) && rc.abs() > tol {
                ok = false;
            }
        }
    }
    let (rows, cols) = plan.marginals(m, n);
    let mut res = F::zero();
    for (r, w) in rows.iter().zip(&mu.weights) {
        res = res.max((*r - *w).abs());
    }
    for (c, w) in cols.iter().zip(&nu.weights) {
        res = res.max((*c - *w).abs());
    }
    plan.marginal_residual = res;
    ok &= res <= F::of(1e-9);
    // dual value: sum_a u_a w_a + sum_b v_b w'_b with u = -pot_src,
    // v = pot_sink (reduced cost c - u_a - v_b >= 0)
    let dual_vals: Vec<F> = (0..m)
        .map(|a| -pot[a] * mu.weights[a])
        .chain((0..n).map(|b| pot[m + b] * nu.weights[b]))
        .collect();
    let dual = tree_sum(&dual_vals);
    plan.duality_gap = (plan.cost - dual).abs() / F::one().max(plan.cost);
    ok &= plan.duality_gap <= F::of(1e-9);
    plan.certified_optimal = ok;
    if !ok {
        return Err(Error::SolverFailure(format!(
            "exact OT certificate failed: residual {:e}, gap {:e}",
            plan.marginal_residual.to_f64_lossy(),
            plan.duality_gap.to_f64_lossy()
        )));
    }
    Ok(plan)
}

/// Result of the entropic solver.
#[derive(Debug, Clone)]
pub struct SinkhornResult<F> {
    pub plan: TransportPlan<F>,
    /// entropic bracket [primal - reg * H(plan), primal] containing the
    /// unregularized optimum
    pub bracket: (F, F),
    pub converged: bool,
    pub iterations: usize,
}

/// Log-domain Sinkhorn with an epsilon-scaling schedule (halving from the
/// median cost down to the target regularization).
pub fn solve_sinkhorn<F: Scalar>(
    mu: &DiscreteMeasure<F>,
    nu: &DiscreteMeasure<F>,
    cost: &[Vec<F>],
    reg: F,
    max_iter: usize,
    tol: F,
) -> Result<SinkhornResult<F>> {
    if reg <= F::zero() {
        return Err(Error::InvalidArgument("regularization must be positive".into()));
    }
    let m = mu.len();
    let n = nu.len();
    let log_wa: Vec<F> = mu.weights.iter().map(|w| w.ln()).collect();
    let log_wb: Vec<F> = nu.weights.iter().map(|w| w.ln()).collect();

    // epsilon-scaling schedule
    let mut flat: Vec<F> = cost.iter().flat_map(|r| r.iter().copied()).collect();
    flat.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = flat[flat.len() / 2].max(F::of(1e-300));
    let mut schedule = Vec::new();
    let mut e = median;
    while e > reg * F::of(1.5) {
        schedule.push(e);
        e = e / F::of(2.0);
    }
    schedule.push(reg);

    let mut f = vec![F::zero(); m];
    let mut g = vec![F::zero(); n];
    let mut iterations = 0usize;
    let mut converged = false;
    for (si, &eps) in schedule.iter().enumerate() {
        let last = si + 1 == schedule.len();
        let inner_cap = if last { max_iter } else { 60 };
        for _ in 0..inner_cap {
            iterations += 1;
            // f-update: rows match mu exactly afterwards
            for i in 0..m {
                let mut max = F::neg_infinity();
                for j in 0..n {
                    let v = (g[j] - cost[i][j]) / eps;
                    if v > max {
                        max = v;
                    }
                }
                let mut acc = F::zero();
                for j in 0..n {
                    acc += ((g[j] - cost[i][j]) / eps - max).exp();
                }
                f[i] = eps * (log_wa[i] - max - acc.ln());
            }
            // g-update
            let mut delta = F::zero();
            for j in 0..n {
                let mut max = F::neg_infinity();
                for i in 0..m {
                    let v = (f[i] - cost[i][j]) / eps;
                    if v > max {
                        max = v;
                    }
                }
                let mut acc = F::zero();
                for i in 0..m {
                    acc += ((f[i] - cost[i][j]) / eps - max).exp();
                }
                let new = eps * (log_wb[j] - max - acc.ln());
                delta = delta.max((new - g[j]).abs());
                g[j] = new;
            }
            if delta <= tol * eps {
                if last {
                    converged = true;
                }
                break;
            }
        }
    }

    // assemble the plan at the target regularization
    let eps = reg;
    let mut entries = Vec::new();
    let mut cost_vals = Vec::new();
    let mut ent_vals = Vec::new();
    let mut rows = vec![F::zero(); m];
    let mut cols = vec![F::zero(); n];
    for i in 0..m {
        for j in 0..n {
            let v = ((f[i] + g[j] - cost[i][j]) / eps).exp();
            if v > F::of(1e-300) {
                entries.push((i as u32, j as u32, v));
                rows[i] += v;
                cols[j] += v;
                cost_vals.push(v * cost[i][j]);
                ent_vals.push(-v * v.ln());
            }
        }
    }
    let primal = tree_sum(&cost_vals);
    let entropy = tree_sum(&ent_vals);
    let mut residual = F::zero();
    for (r, w) in rows.iter().zip(&mu.weights) {
        residual = residual.max((*r - *w).abs());
    }
    for (c, w) in cols.iter().zip(&nu.weights) {
        residual = residual.max((*c - *w).abs());
    }
    let plan = TransportPlan {
        entries,
        cost: primal,
        marginal_residual: residual,
        certified_optimal: false,
        duality_gap: F::infinity(),
    };
    Ok(SinkhornResult {
        bracket: (primal - eps * entropy, primal),
        plan,
        converged,
        iterations,
    })
}

/// Options for grid-level Wasserstein queries.
#[derive(Debug, Clone)]
pub struct WassersteinOpts<F> {
    pub backend: DistanceBackend<F>,
    pub support_budget: usize,
    /// entropic regularization; `None` solves exactly
    pub sinkhorn_reg: Option<F>,
    /// re-solve at twice the budget and report the difference
    pub quantify_compression: bool,
}

impl<F: Scalar> WassersteinOpts<F> {
    pub fn exact_box(group: &StratifiedAlgebra<F>, support_budget: usize) -> Self {
        WassersteinOpts {
            backend: DistanceBackend::boxed(group),
            support_budget,
            sinkhorn_reg: None,
            quantify_compression: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WassersteinResult<F> {
    pub distance: F,
    /// change in the distance when the support budget is doubled
    pub compression_uncertainty: Option<F>,
}

/// Wasserstein distance between two grid measures. Both measures are
/// compressed with one shared partition built from their average so block
/// geometry cancels in the comparison.
pub fn wasserstein<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    nu: &GridMeasure<F>,
    opts: &WassersteinOpts<F>,
) -> Result<WassersteinResult<F>> {
    let solve_at = |budget: usize| -> Result<F> {
        let avg: Vec<F> = mu
            .density()
            .iter()
            .zip(nu.density())
            .map(|(&a, &b)| (a + b) / F::of(2.0))
            .collect();
        let (avg_mu, _) = GridMeasure::from_values(mu.lattice().clone(), avg)?;
        let partition = build_partition(&avg_mu, budget)?;
        let da = compress_with_partition(mu, &partition)?;
        let db = compress_with_partition(nu, &partition)?;
        let cost = cost_matrix(group, &opts.backend, &da.points, &db.points)?;
        let c = match opts.sinkhorn_reg {
            None => solve_exact(&da, &db, &cost)?.cost,
            Some(reg) => solve_sinkhorn(&da, &db, &cost, reg, 20_000, F::of(1e-9))?.plan.cost,
        };
        Ok(c.max(F::zero()).sqrt())
    };
    let d = solve_at(opts.support_budget)?;
    let uncertainty = if opts.quantify_compression {
        Some((solve_at(opts.support_budget * 2)? - d).abs())
    } else {
        None
    };
    Ok(WassersteinResult {
        distance: d,
        compression_uncertainty: uncertainty,
    })
}

/// Central-difference metric derivative of a trace at an interior index:
/// `W(mu_{i+1}, mu_{i-1}) / (t_{i+1} - t_{i-1})`.
pub fn metric_derivative<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    trace: &FlowTrace<F>,
    index: usize,
    opts: &WassersteinOpts<F>,
) -> Result<F> {
    if index == 0 || index + 1 >= trace.len() {
        return Err(Error::InvalidArgument(
            "metric derivative needs an interior time index".into(),
        ));
    }
    let w = wasserstein(
        group,
        &trace.measures[index + 1],
        &trace.measures[index - 1],
        opts,
    )?;
    Ok(w.distance / (trace.times[index + 1] - trace.times[index - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::StratifiedAlgebra;
    use std::sync::Arc;
    use crate::lattice::Lattice;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn dirac<F: Scalar>(p: Vec<F>) -> DiscreteMeasure<F> {
        DiscreteMeasure::new(vec![p], vec![F::one()]).unwrap()
    }

    /// Brute-force optimal transportation cost by enumerating the vertices
    /// of the transportation polytope (spanning-tree basic solutions).
    fn brute_force_cost(wa: &[f64], wb: &[f64], cost: &[Vec<f64>]) -> f64 {
        let m = wa.len();
        let n = wb.len();
        let cells: Vec<(usize, usize)> = (0..m)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .collect();
        let k = m + n - 1;
        let mut best = f64::INFINITY;
        let mut choose = vec![0usize; k];
        fn rec(
            cells: &[(usize, usize)],
            choose: &mut [usize],
            pos: usize,
            start: usize,
            m: usize,
            n: usize,
            wa: &[f64],
            wb: &[f64],
            cost: &[Vec<f64>],
            best: &mut f64,
        ) {
            let k = choose.len();
            if pos == k {
                // solve the tree system by leaf elimination
                let mut deg = vec![0usize; m + n];
                for &ci in choose.iter() {
                    let (a, b) = cells[ci];
                    deg[a] += 1;
                    deg[m + b] += 1;
                }
                let mut supply: Vec<f64> = wa.iter().copied().collect();
                let mut demand: Vec<f64> = wb.iter().copied().collect();
                let mut flows = vec![0.0f64; k];
                let mut used = vec![false; k];
                let mut remaining = k;
                while remaining > 0 {
                    let mut progress = false;
                    for (idx, &ci) in choose.iter().enumerate() {
                        if used[idx] {
                            continue;
                        }
                        let (a, b) = cells[ci];
                        if deg[a] == 1 {
                            flows[idx] = supply[a];
                            supply[a] = 0.0;
                            demand[b] -= flows[idx];
                            deg[a] -= 1;
                            deg[m + b] -= 1;
                            used[idx] = true;
                            remaining -= 1;
                            progress = true;
                        } else if deg[m + b] == 1 {
                            flows[idx] = demand[b];
                            demand[b] = 0.0;
                            supply[a] -= flows[idx];
                            deg[a] -= 1;
                            deg[m + b] -= 1;
                            used[idx] = true;
                            remaining -= 1;
                            progress = true;
                        }
                    }
                    if !progress {
                        return; // cyclic support, not a tree
                    }
                }
                if supply.iter().any(|v| v.abs() > 1e-9)
                    || demand.iter().any(|v| v.abs() > 1e-9)
                {
                    return;
                }
                if flows.iter().any(|&f| f < -1e-12) {
                    return; // infeasible vertex
                }
                let c: f64 = choose
                    .iter()
                    .enumerate()
                    .map(|(idx, &ci)| {
                        let (a, b) = cells[ci];
                        flows[idx] * cost[a][b]
                    })
                    .sum();
                if c < *best {
                    *best = c;
                }
                return;
            }
            for s in start..cells.len() {
                choose[pos] = s;
                rec(cells, choose, pos + 1, s + 1, m, n, wa, wb, cost, best);
            }
        }
        rec(&cells, &mut choose, 0, 0, m, n, wa, wb, cost, &mut best);
        best
    }

    fn random_instance(
        rng: &mut ChaCha12Rng,
        m: usize,
        n: usize,
    ) -> (DiscreteMeasure<f64>, DiscreteMeasure<f64>, Vec<Vec<f64>>) {
        let mut wa: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let mut wb: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sa: f64 = wa.iter().sum();
        let sb: f64 = wb.iter().sum();
        wa.iter_mut().for_each(|w| *w /= sa);
        wb.iter_mut().for_each(|w| *w /= sb);
        // exact unit sums
        let ra: f64 = wa.iter().sum();
        wa[0] += 1.0 - ra;
        let rb: f64 = wb.iter().sum();
        wb[0] += 1.0 - rb;
        let cost: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..4.0)).collect())
            .collect();
        let pa: Vec<Vec<f64>> = (0..m).map(|i| vec![i as f64]).collect();
        let pb: Vec<Vec<f64>> = (0..n).map(|j| vec![j as f64]).collect();
        (
            DiscreteMeasure::new(pa, wa).unwrap(),
            DiscreteMeasure::new(pb, wb).unwrap(),
            cost,
        )
    }

    #[test]
    fn exact_solver_single_pair() {
        let a = dirac(vec![0.0, 0.0]);
        let b = dirac(vec![3.0, 4.0]);
        let cost = vec![vec![25.0]];
        let plan = solve_exact(&a, &b, &cost).unwrap();
        assert_eq!(plan.entries, vec![(0, 0, 1.0)]);
        assert_relative_eq!(plan.cost, 25.0);
        assert!(plan.certified_optimal);
    }

    #[test]
    fn exact_solver_identity_plan_has_zero_cost() {
        let w = vec![0.5, 1.0 / 3.0, 1.0 / 6.0];
        let pts: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        let mu = DiscreteMeasure::new(pts.clone(), w.clone()).unwrap();
        let nu = DiscreteMeasure::new(pts, w).unwrap();
        let cost: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| ((i as f64) - (j as f64)).powi(2)).collect())
            .collect();
        let plan = solve_exact(&mu, &nu, &cost).unwrap();
        assert!(plan.cost.abs() < 1e-15);
    }

    #[test]
    fn exact_solver_matches_spec_3x3_instance() {
        // weights (1/2, 1/3, 1/6) vs (1/6, 1/3, 1/2), random costs
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let wa = vec![0.5, 1.0 / 3.0, 1.0 / 6.0];
        let wb = vec![1.0 / 6.0, 1.0 / 3.0, 0.5];
        let cost: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.gen_range(0.0..2.0)).collect())
            .collect();
        let pts: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        let mu = DiscreteMeasure::new(pts.clone(), wa.clone()).unwrap();
        let nu = DiscreteMeasure::new(pts, wb.clone()).unwrap();
        let plan = solve_exact(&mu, &nu, &cost).unwrap();
        let oracle = brute_force_cost(&wa, &wb, &cost);
        assert!((plan.cost - oracle).abs() <= 1e-9, "{} vs {oracle}", plan.cost);
    }

    #[test]
    fn exact_solver_matches_vertex_enumeration_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(20240811);
        for trial in 0..10 {
            let (m, n) = if trial % 2 == 0 { (3, 3) } else { (4, 4) };
            let (mu, nu, cost) = random_instance(&mut rng, m, n);
            let plan = solve_exact(&mu, &nu, &cost).unwrap();
            let oracle = brute_force_cost(&mu.weights, &nu.weights, &cost);
            assert!(
                (plan.cost - oracle).abs() <= 1e-9,
                "trial {trial}: {} vs {oracle}",
                plan.cost
            );
            assert!(plan.certified_optimal);
            assert!(plan.marginal_residual <= 1e-9);
        }
    }

    #[test]
    fn sinkhorn_product_coupling_limit() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (mu, nu, cost) = random_instance(&mut rng, 4, 5);
        let res = solve_sinkhorn(&mu, &nu, &cost, 1e6, 4000, 1e-12).unwrap();
        for &(a, b, w) in &res.plan.entries {
            let product = mu.weights[a as usize] * nu.weights[b as usize];
            assert!((w - product).abs() <= 1e-6, "{w} vs {product}");
        }
    }

    #[test]
    fn sinkhorn_cost_monotone_in_regularization_and_bracket_valid() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let (mu, nu, cost) = random_instance(&mut rng, 3, 3);
        let exact = solve_exact(&mu, &nu, &cost).unwrap().cost;
        let mut prev = f64::INFINITY;
        let flat: Vec<f64> = cost.iter().flatten().copied().collect();
        let median = {
            let mut f = flat.clone();
            f.sort_by(|a, b| a.partial_cmp(b).unwrap());
            f[f.len() / 2]
        };
        for reg_frac in [0.3, 0.1, 0.03, 1e-3] {
            let reg = median * reg_frac;
            let res = solve_sinkhorn(&mu, &nu, &cost, reg, 50_000, 1e-10).unwrap();
            assert!(res.converged, "not converged at reg {reg}");
            // cost nonincreasing as regularization decreases
            assert!(res.plan.cost <= prev + 1e-7, "{} vs {prev}", res.plan.cost);
            prev = res.plan.cost;
            // bracket contains the exact optimum
            assert!(res.bracket.0 <= exact + 1e-7, "{:?} vs {exact}", res.bracket);
            assert!(res.bracket.1 >= exact - 1e-7);
        }
        // at reg = 1e-3 * median the plan cost is within 1% of exact
        let res = solve_sinkhorn(&mu, &nu, &cost, median * 1e-3, 200_000, 1e-10).unwrap();
        assert!(
            (res.plan.cost - exact).abs() <= 0.01 * exact.max(1e-9),
            "{} vs {exact}",
            res.plan.cost
        );
    }

    #[test]
    fn compression_preserves_mass_and_embeds_small_supports() {
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[33, 33]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1]) * 8.0).exp()
        })
        .unwrap();
        let dm = support_compress(&mu, 64).unwrap();
        assert!(dm.len() <= 64);
        assert_relative_eq!(tree_sum(&dm.weights), 1.0, epsilon = 1e-12);
        // measure supported on few cells embeds exactly
        let mut rho = vec![0.0; lat.num_nodes()];
        rho[100] = 1.0;
        rho[700] = 2.0;
        let (sparse, _) = GridMeasure::from_values(lat, rho).unwrap();
        let dm = support_compress(&sparse, 64).unwrap();
        assert!(dm.len() <= 64);
        let total: f64 = dm.weights.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn compression_moment_drift_bounded_by_block_diameter() {
        let g = StratifiedAlgebra::<f64>::preset("r2").unwrap();
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[33, 33]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1]) * 2.0).exp()
        })
        .unwrap();
        let partition = build_partition(&mu, 128).unwrap();
        let dm = compress_with_partition(&mu, &partition).unwrap();
        let params = crate::group::BoxNormParams::ones(1);
        let grid_moment = crate::lattice::second_moment(&mu, |x| g.box_norm(&params, x));
        let dm_moment: f64 = dm
            .points
            .iter()
            .zip(&dm.weights)
            .map(|(p, w)| {
                let d = g.box_norm(&params, p);
                w * d * d
            })
            .sum();
        // block diameter bound: largest block extent
        let mut max_diam2: f64 = 0.0;
        for block in &partition.blocks {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for &node in block {
                let c = lat.node_coords(node as usize);
                for a in 0..2 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
            let d2 = (hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2);
            max_diam2 = max_diam2.max(d2);
        }
        assert!(
            (grid_moment - dm_moment).abs() <= max_diam2,
            "drift {} vs bound {max_diam2}",
            (grid_moment - dm_moment).abs()
        );
    }

    #[test]
    fn cost_matrix_symmetry_and_zero_diagonal() {
        let g = StratifiedAlgebra::<f64>::preset("h1").unwrap();
        let backend = DistanceBackend::boxed(&g);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let c = cost_matrix(&g, &backend, &pts, &pts).unwrap();
        for i in 0..6 {
            assert_eq!(c[i][i], 0.0);
            for j in 0..6 {
                // left-invariant distance with x^{-1} = -x gives symmetry
                assert!((c[i][j] - c[j][i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn wasserstein_identity_and_dirac_distance() {
        let g = Arc::new(StratifiedAlgebra::<f64>::preset("r2").unwrap());
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[33, 33]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-((c[0] - 0.4).powi(2) + c[1] * c[1]) * 30.0).exp()
        })
        .unwrap();
        let opts = WassersteinOpts::exact_box(&g, 64);
        let d0 = wasserstein(&g, &mu, &mu, &opts).unwrap().distance;
        assert!(d0.abs() <= 1e-9);
        // two narrow bumps: W approx the center distance
        let (nu, _) = GridMeasure::discretize(lat, |c| {
            (-((c[0] + 0.4).powi(2) + c[1] * c[1]) * 30.0).exp()
        })
        .unwrap();
        let d = wasserstein(&g, &mu, &nu, &opts).unwrap().distance;
        assert!((d - 0.8).abs() <= 0.08, "{d}");
    }

    #[test]
    fn wasserstein_triangle_inequality_on_random_measures() {
        let g = Arc::new(StratifiedAlgebra::<f64>::preset("r2").unwrap());
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[25, 25]).unwrap());
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let opts = WassersteinOpts::exact_box(&g, 64);
        for _ in 0..3 {
            let mut mk = || {
                let cx = rng.gen_range(-0.4..0.4);
                let cy = rng.gen_range(-0.4..0.4);
                let s = rng.gen_range(4.0..12.0);
                GridMeasure::discretize(lat.clone(), move |c| {
                    (-(((c[0] - cx).powi(2) + (c[1] - cy).powi(2)) * s)).exp()
                })
                .unwrap()
                .0
            };
            let (a, b, c) = (mk(), mk(), mk());
            let dab = wasserstein(&g, &a, &b, &opts).unwrap().distance;
            let dbc = wasserstein(&g, &b, &c, &opts).unwrap().distance;
            let dac = wasserstein(&g, &a, &c, &opts).unwrap().distance;
            assert!(dac <= dab + dbc + 1e-6, "{dac} vs {dab} + {dbc}");
            assert!((dab - wasserstein(&g, &b, &a, &opts).unwrap().distance).abs() <= 1e-9);
        }
    }

    #[test]
    fn metric_derivative_of_translating_bump() {
        // 1D bump translating at speed v: |mu'| = |v|
        let g = Arc::new(StratifiedAlgebra::<f64>::preset("r1").unwrap());
        let lat = Arc::new(Lattice::<f64>::symmetric(&[2.0], &[257]).unwrap());
        let v = 0.7;
        let times: Vec<f64> = (0..5).map(|k| 0.1 * k as f64).collect();
        let measures: Vec<GridMeasure<f64>> = times
            .iter()
            .map(|&t| {
                GridMeasure::discretize(lat.clone(), move |c| {
                    (-((c[0] - v * t + 0.2) / 0.25).powi(2)).exp()
                })
                .unwrap()
                .0
            })
            .collect();
        let trace = FlowTrace::new(times, measures).unwrap();
        let opts = WassersteinOpts::exact_box(&g, 257);
        let speed = metric_derivative(&g, &trace, 2, &opts).unwrap();
        assert!((speed - v).abs() / v <= 0.05, "{speed}");
        assert!(metric_derivative(&g, &trace, 0, &opts).is_err());
        // constant trace has zero derivative
        let const_trace = FlowTrace::new(
            vec![0.0, 0.1, 0.2],
            vec![trace.measures[0].clone(); 3],
        )
        .unwrap();
        assert!(metric_derivative(&g, &const_trace, 1, &opts).unwrap().abs() <= 1e-9);
    }
}

