//! Flow analysis: continuity-equation residuals, entropy dissipation, the
//! energy dissipation identity along heat flow, the minimizing-movement
//! (JKO) scheme and the HWI inequality.

use std::sync::Arc;

use crate::distance::DistanceBackend;
use crate::error::{Error, Result};
use crate::functionals::{
    entropy, fisher_threshold, horizontal_fisher, horizontal_gradient, HorizontalField,
};
use crate::group::StratifiedAlgebra;
use crate::lattice::{FlowTrace, GridMeasure, Lattice};
use crate::scalar::{tree_sum, Scalar};
use crate::transport::{
    build_partition, solve_exact, wasserstein, DiscreteMeasure, Partition, WassersteinOpts,
};

/// Velocity field of a heat marginal: `v = -grad_G rho / rho` where
/// `rho > tau`, zero elsewhere and on the boundary ring (matching the Fisher
/// quadrature, so that the squared L2(mu) norm reproduces the Fisher
/// information by construction).
pub fn velocity_field<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
) -> HorizontalField<F> {
    let lattice = mu.lattice();
    let rho = mu.density();
    let tau = fisher_threshold(rho);
    let mut field = horizontal_gradient(group, lattice, rho);
    let counts = lattice.counts().to_vec();
    for idx in 0..rho.len() {
        let multi = lattice.multi_index(idx);
        let interior = multi
            .iter()
            .zip(&counts)
            .all(|(&i, &c)| i > 0 && i + 1 < c);
        for comp in &mut field.components {
            comp[idx] = if interior && rho[idx] > tau {
                -comp[idx] / rho[idx]
            } else {
                F::zero()
            };
        }
    }
    field
}

/// Smooth space-time test function with analytic derivatives.
pub struct TestFunction<F> {
    pub value: Box<dyn Fn(F, &[F]) -> F + Send + Sync>,
    pub dt: Box<dyn Fn(F, &[F]) -> F + Send + Sync>,
    /// Euclidean spatial gradient
    pub grad: Box<dyn Fn(F, &[F], &mut [F]) + Send + Sync>,
}

/// Deterministic bank of tensor bump test functions: low-order polynomials
/// times a smooth compactly supported bump in space and time.
pub fn test_function_bank<F: Scalar>(
    lattice: &Lattice<F>,
    t_lo: F,
    t_hi: F,
    count: usize,
    seed: u64,
) -> Vec<TestFunction<F>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let n = lattice.ndim();
    let half: Vec<f64> = lattice
        .hi()
        .iter()
        .map(|&h| h.to_f64_lossy() * 0.75)
        .collect();
    let t_mid = (t_lo + t_hi).to_f64_lossy() / 2.0;
    let t_half = (t_hi - t_lo).to_f64_lossy() / 2.0;
    (0..count)
        .map(|_| {
            let centers: Vec<f64> = (0..n).map(|a| rng.gen_range(-0.2..0.2) * half[a]).collect();
            let widths: Vec<f64> = (0..n).map(|a| half[a] * rng.gen_range(0.55..0.85)).collect();
            let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let quad: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let c0: f64 = rng.gen_range(0.2..1.0);
            let tw = 0.95 * t_half;
            make_bump_test::<F>(centers, widths, lin, quad, c0, t_mid, tw)
        })
        .collect()
}

fn make_bump_test<F: Scalar>(
    centers: Vec<f64>,
    widths: Vec<f64>,
    lin: Vec<f64>,
    quad: Vec<f64>,
    c0: f64,
    t_mid: f64,
    t_half: f64,
) -> TestFunction<F> {
    let n = centers.len();
    // bump B(s) = (1 - s^2)^3 on |s| < 1
    let bump = |s: f64| -> f64 {
        let u = 1.0 - s * s;
        if u > 0.0 {
            u * u * u
        } else {
            0.0
        }
    };
    let dbump = |s: f64| -> f64 {
        let u = 1.0 - s * s;
        if u > 0.0 {
            -6.0 * s * u * u
        } else {
            0.0
        }
    };
    let poly = {
        let lin = lin.clone();
        let quad = quad.clone();
        move |x: &[f64]| -> f64 {
            let mut p = c0;
            for a in 0..x.len() {
                p += lin[a] * x[a] + quad[a] * x[a] * x[a];
            }
            p
        }
    };
    let spatial = {
        let centers = centers.clone();
        let widths = widths.clone();
        let poly = poly.clone();
        move |x: &[f64]| -> f64 {
            let mut b = 1.0;
            for a in 0..x.len() {
                b *= bump((x[a] - centers[a]) / widths[a]);
            }
            b * poly(x)
        }
    };
    let value = {
        let spatial = spatial.clone();
        move |t: F, x: &[F]| -> F {
            let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
            let s = (t.to_f64_lossy() - t_mid) / t_half;
            F::of(spatial(&xf) * bump(s))
        }
    };
    let dt = {
        let spatial = spatial.clone();
        move |t: F, x: &[F]| -> F {
            let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
            let s = (t.to_f64_lossy() - t_mid) / t_half;
            F::of(spatial(&xf) * dbump(s) / t_half)
        }
    };
    let grad = move |t: F, x: &[F], out: &mut [F]| {
        let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
        let s = (t.to_f64_lossy() - t_mid) / t_half;
        let bt = bump(s);
        let mut bumps = vec![0.0; n];
        let mut dbumps = vec![0.0; n];
        for a in 0..n {
            let sa = (xf[a] - centers[a]) / widths[a];
            bumps[a] = bump(sa);
            dbumps[a] = dbump(sa) / widths[a];
        }
        let p = poly(&xf);
        for a in 0..n {
            let mut db = dbumps[a] * p;
            db += bumps[a] * (lin[a] + 2.0 * quad[a] * xf[a]);
            for b in 0..n {
                if b != a {
                    db *= bumps[b];
                }
            }
            out[a] = F::of(db * bt);
        }
    };
    TestFunction {
        value: Box::new(value),
        dt: Box::new(dt),
        grad: Box::new(grad),
    }
}

/// Weak continuity-equation residual
/// `| int int (dphi/dt + <v, grad_G phi>_G) dmu_t dt |` per test function,
/// by trapezoid in time and cell quadrature in space.
pub fn continuity_residual<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    trace: &FlowTrace<F>,
    velocities: &[HorizontalField<F>],
    tests: &[TestFunction<F>],
) -> Result<Vec<F>> {
    if velocities.len() != trace.len() {
        return Err(Error::InvalidArgument(
            "one velocity field per trace frame required".into(),
        ));
    }
    let lattice = trace.lattice().clone();
    let n = lattice.ndim();
    let m1 = group.horizontal_dim();
    let vol = lattice.cell_volume();
    let mut residuals = Vec::with_capacity(tests.len());
    let mut coords = vec![F::zero(); n];
    let mut gradbuf = vec![F::zero(); n];
    for test in tests {
        let mut per_time = Vec::with_capacity(trace.len());
        for (ti, &t) in trace.times.iter().enumerate() {
            let rho = trace.measures[ti].density();
            let v = &velocities[ti];
            let mut vals = Vec::with_capacity(rho.len());
            for idx in 0..rho.len() {
                if rho[idx] == F::zero() {
                    vals.push(F::zero());
                    continue;
                }
                lattice.coords_into(idx, &mut coords);
                let mut integrand = (test.dt)(t, &coords);
                (test.grad)(t, &coords, &mut gradbuf);
                for j in 0..m1 {
                    let vj = v.components[j][idx];
                    if vj == F::zero() {
                        continue;
                    }
                    // X_j phi = sum_k a_jk d_k phi
                    let mut xj_phi = F::zero();
                    for k in 0..n {
                        let a = group.frame_coeff(j, k, &coords);
                        if a != F::zero() {
                            xj_phi += a * gradbuf[k];
                        }
                    }
                    integrand += vj * xj_phi;
                }
                vals.push(integrand * rho[idx]);
            }
            per_time.push(tree_sum(&vals) * vol);
        }
        // trapezoid in time
        let mut acc = F::zero();
        for i in 0..trace.len() - 1 {
            let dt = trace.times[i + 1] - trace.times[i];
            acc += (per_time[i] + per_time[i + 1]) * dt / F::of(2.0);
        }
        residuals.push(acc.abs());
    }
    Ok(residuals)
}

/// Per-time record of the entropy dissipation identity
/// `d/dt Ent = -Fisher`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DissipationRecord {
    pub t: f64,
    pub dent_dt: f64,
    pub fisher: f64,
    pub rel_mismatch: f64,
}

/// Central-difference entropy derivative against the Fisher information at
/// all interior trace times.
pub fn dissipation_check<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    trace: &FlowTrace<F>,
) -> Result<Vec<DissipationRecord>> {
    if trace.len() < 5 {
        return Err(Error::InvalidArgument("need at least 5 frames".into()));
    }
    trace.uniform_dt()?;
    let ents: Vec<F> = trace.measures.iter().map(entropy).collect();
    let mut out = Vec::new();
    for i in 1..trace.len() - 1 {
        let dent = (ents[i + 1] - ents[i - 1]) / (trace.times[i + 1] - trace.times[i - 1]);
        let fisher = if trace.diagnostics.len() == trace.len() {
            trace.diagnostics[i].fisher
        } else {
            horizontal_fisher(group, &trace.measures[i])
        };
        let mismatch = (dent + fisher).abs() / dent.abs().max(F::of(1e-300));
        out.push(DissipationRecord {
            t: trace.times[i].to_f64_lossy(),
            dent_dt: dent.to_f64_lossy(),
            fisher: fisher.to_f64_lossy(),
            rel_mismatch: mismatch.to_f64_lossy(),
        });
    }
    Ok(out)
}

/// Energy-dissipation report for one interval.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EDIReport {
    pub t_start: f64,
    pub t_end: f64,
    pub ent_start: f64,
    pub ent_end: f64,
    /// (1/2) int |mu'|^2 dr
    pub action: f64,
    /// (1/2) int F_G dr  (slope term via the slope = sqrt(Fisher) identity)
    pub slope: f64,
    /// Ent(end) + action + slope - Ent(start); <= 0 is the EDI
    pub residual: f64,
    /// |residual| / entropy drop
    pub equality_rel_residual: f64,
}

/// Verify the EDI on dyadic subintervals of `[trace.times[i0],
/// trace.times[i1]]` down to `levels` splits. The slope term uses the
/// Fisher information; the action integrates squared central-difference
/// metric derivatives. Both integrals use the trapezoid rule on the trace
/// grid.
pub fn edi_verify<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    trace: &FlowTrace<F>,
    i0: usize,
    i1: usize,
    levels: usize,
    opts: &WassersteinOpts<F>,
) -> Result<Vec<EDIReport>> {
    if i0 >= i1 || i1 >= trace.len() {
        return Err(Error::InvalidArgument("bad interval indices".into()));
    }
    if i0 == 0 || i1 + 1 >= trace.len() {
        return Err(Error::InvalidArgument(
            "interval endpoints must be interior (central differences)".into(),
        ));
    }
    // metric derivative at every grid index in [i0, i1]
    let mut speeds = vec![F::zero(); trace.len()];
    for i in i0..=i1 {
        speeds[i] = crate::transport::metric_derivative(group, trace, i, opts)?;
    }
    edi_assemble(group, trace, i0, i1, levels, &speeds)
}

fn edi_assemble<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    trace: &FlowTrace<F>,
    i0: usize,
    i1: usize,
    levels: usize,
    speeds: &[F],
) -> Result<Vec<EDIReport>> {
    let ents: Vec<F> = trace.measures.iter().map(entropy).collect();
    let fishers: Vec<F> = if trace.diagnostics.len() == trace.len() {
        trace.diagnostics.iter().map(|d| d.fisher).collect()
    } else {
        trace
            .measures
            .iter()
            .map(|m| horizontal_fisher(group, m))
            .collect()
    };

    let trapezoid = |vals: &dyn Fn(usize) -> F, a: usize, b: usize| -> F {
        let mut acc = F::zero();
        for i in a..b {
            let dt = trace.times[i + 1] - trace.times[i];
            acc += (vals(i) + vals(i + 1)) * dt / F::of(2.0);
        }
        acc
    };

    let mut reports = Vec::new();
    let mut stack = vec![(i0, i1, 0usize)];
    while let Some((a, b, level)) = stack.pop() {
        let action = trapezoid(&|i| speeds[i] * speeds[i], a, b) / F::of(2.0);
        let slope = trapezoid(&|i| fishers[i], a, b) / F::of(2.0);
        let residual = ents[b] + action + slope - ents[a];
        let drop = (ents[a] - ents[b]).abs().max(F::of(1e-300));
        reports.push(EDIReport {
            t_start: trace.times[a].to_f64_lossy(),
            t_end: trace.times[b].to_f64_lossy(),
            ent_start: ents[a].to_f64_lossy(),
            ent_end: ents[b].to_f64_lossy(),
            action: action.to_f64_lossy(),
            slope: slope.to_f64_lossy(),
            residual: residual.to_f64_lossy(),
            equality_rel_residual: (residual.abs() / drop).to_f64_lossy(),
        });
        if level < levels && b - a >= 2 {
            let mid = (a + b) / 2;
            stack.push((a, mid, level + 1));
            stack.push((mid, b, level + 1));
        }
    }
    reports.sort_by(|x, y| {
        (x.t_start, x.t_end)
            .partial_cmp(&(y.t_start, y.t_end))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(reports)
}

/// Minimal continuity-equation speed of a trace at an interior index: the
/// squared metric derivative is recovered by solving the weighted elliptic
/// problem `-div_G(rho grad_G phi) = d rho / dt` and evaluating the
/// Dirichlet energy `int |grad_G phi|^2 rho = <phi, drho/dt>`. This is the
/// minimal-norm velocity characterization of the Wasserstein metric
/// derivative, evaluated on the full grid with no support compression.
pub fn ce_metric_speed<F: Scalar>(
    trace: &FlowTrace<F>,
    index: usize,
    group: &Arc<StratifiedAlgebra<F>>,
) -> Result<F> {
    if index == 0 || index + 1 >= trace.len() {
        return Err(Error::InvalidArgument(
            "metric speed needs an interior time index".into(),
        ));
    }
    let lattice = trace.lattice().clone();
    let vol = lattice.cell_volume();
    let n = lattice.num_nodes();
    // density weight with a small floor so the form stays definite on the
    // empty regions (they carry no rhs mass)
    let rho = trace.measures[index].density();
    let max = rho.iter().fold(F::zero(), |a, &b| a.max(b));
    let floor = max * F::of(1e-9);
    let weights: Vec<F> = rho.iter().map(|&r| r.max(floor)).collect();
    let op = crate::heat::SubLaplacian::assemble_density_weighted(
        group.clone(),
        lattice,
        &weights,
    )?;
    // mean-zero right-hand side
    let dt2 = trace.times[index + 1] - trace.times[index - 1];
    let mut rhs: Vec<F> = trace.measures[index + 1]
        .density()
        .iter()
        .zip(trace.measures[index - 1].density())
        .map(|(&a, &b)| (a - b) / dt2)
        .collect();
    let mean = tree_sum(&rhs) / F::of_usize(n);
    for v in &mut rhs {
        *v -= mean;
    }
    // CG on -L phi = rhs with Jacobi preconditioning
    let mut diag = vec![F::zero(); n];
    for (p, cols, vals) in op.rows() {
        for (&q, &v) in cols.iter().zip(vals) {
            if q as usize == p {
                diag[p] = (-v).max(F::of(1e-300));
            }
        }
    }
    let apply = |x: &[F], out: &mut [F]| {
        op.apply_into(x, out);
        for v in out.iter_mut() {
            *v = -*v;
        }
    };
    let mut phi = vec![F::zero(); n];
    let mut r = rhs.clone();
    let mut z: Vec<F> = r.iter().zip(&diag).map(|(&a, &d)| a / d).collect();
    let mut pvec = z.clone();
    let mut apvec = vec![F::zero(); n];
    let mut rz = {
        let vals: Vec<F> = r.iter().zip(&z).map(|(&a, &b)| a * b).collect();
        tree_sum(&vals)
    };
    let rhs_norm = {
        let vals: Vec<F> = rhs.iter().map(|&a| a * a).collect();
        tree_sum(&vals).sqrt().max(F::of(1e-300))
    };
    for _ in 0..20_000 {
        let rn = {
            let vals: Vec<F> = r.iter().map(|&a| a * a).collect();
            tree_sum(&vals).sqrt()
        };
        if rn <= F::of(1e-9) * rhs_norm {
            break;
        }
        apply(&pvec, &mut apvec);
        let pap = {
            let vals: Vec<F> = pvec.iter().zip(&apvec).map(|(&a, &b)| a * b).collect();
            tree_sum(&vals)
        };
        if pap <= F::zero() {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            phi[i] += alpha * pvec[i];
            r[i] -= alpha * apvec[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = {
            let vals: Vec<F> = r.iter().zip(&z).map(|(&a, &b)| a * b).collect();
            tree_sum(&vals)
        };
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            pvec[i] = z[i] + beta * pvec[i];
        }
    }
    // speed^2 = Dirichlet energy = <phi, rhs> vol
    let vals: Vec<F> = phi.iter().zip(&rhs).map(|(&a, &b)| a * b).collect();
    let speed_sq = (tree_sum(&vals) * vol).max(F::zero());
    Ok(speed_sq.sqrt())
}

/// EDI verification with metric derivatives from the continuity-equation
/// speed estimator.
pub fn edi_verify_ce<F: Scalar>(
    group: &Arc<StratifiedAlgebra<F>>,
    trace: &FlowTrace<F>,
    i0: usize,
    i1: usize,
    levels: usize,
) -> Result<Vec<EDIReport>> {
    if i0 >= i1 || i1 >= trace.len() {
        return Err(Error::InvalidArgument("bad interval indices".into()));
    }
    if i0 == 0 || i1 + 1 >= trace.len() {
        return Err(Error::InvalidArgument(
            "interval endpoints must be interior (central differences)".into(),
        ));
    }
    let mut speeds = vec![F::zero(); trace.len()];
    for i in i0..=i1 {
        speeds[i] = ce_metric_speed(trace, i, group)?;
    }
    edi_assemble(group, trace, i0, i1, levels, &speeds)
}

/// Configuration of the minimizing-movement scheme.
#[derive(Debug, Clone)]
pub struct JKOConfig<F> {
    /// proximal time step
    pub tau: F,
    /// support budget for the compressed state
    pub support_budget: usize,
    /// entropic regularization of the proximal subproblem; `None` picks
    /// 0.1 * tau * median(cost)
    pub reg: Option<F>,
    /// inner iteration cap
    pub max_inner: usize,
    /// stationarity tolerance on the inner dual objective
    pub tol: F,
    /// evaluate the reported movement with one exact-OT solve
    pub exact_polish: bool,
}

impl<F: Scalar> JKOConfig<F> {
    pub fn new(tau: F) -> Self {
        JKOConfig {
            tau,
            support_budget: 512,
            reg: None,
            max_inner: 20_000,
            tol: F::of(1e-8),
            exact_polish: true,
        }
    }
}

/// Compressed JKO state: weights on fixed support points with reference
/// volumes (the Lebesgue measure of each block), so the entropy of the
/// block-uniform density is `sum w ln(w / V)`.
#[derive(Debug, Clone)]
pub struct JKOState<F> {
    pub partition: Partition,
    pub points: Vec<Vec<F>>,
    pub ref_vols: Vec<F>,
    pub weights: Vec<F>,
    lattice: Arc<Lattice<F>>,
}

impl<F: Scalar> JKOState<F> {
    /// Build the state from an initial grid measure. The partition adapts
    /// to a blend of the density with the uniform density so that later
    /// spreading stays resolved.
    pub fn from_measure(mu: &GridMeasure<F>, support_budget: usize) -> Result<Self> {
        let lattice = mu.lattice().clone();
        let uniform = F::one() / (F::of_usize(lattice.num_nodes()) * lattice.cell_volume());
        let blend: Vec<F> = mu
            .density()
            .iter()
            .map(|&r| F::of(0.7) * r + F::of(0.3) * uniform)
            .collect();
        let (blend_mu, _) = GridMeasure::from_values(lattice.clone(), blend)?;
        let partition = build_partition(&blend_mu, support_budget)?;
        Self::with_partition(mu, partition)
    }

    pub fn with_partition(mu: &GridMeasure<F>, partition: Partition) -> Result<Self> {
        let lattice = mu.lattice().clone();
        let vol = lattice.cell_volume();
        let n = lattice.ndim();
        let rho = mu.density();
        let mut points = Vec::new();
        let mut ref_vols = Vec::new();
        let mut weights = Vec::new();
        let mut coords = vec![F::zero(); n];
        let mut kept_blocks = Vec::new();
        for block in &partition.blocks {
            let mut w = F::zero();
            let mut bary = vec![F::zero(); n];
            let mut geo = vec![F::zero(); n];
            for &node in block {
                let m = rho[node as usize] * vol;
                w += m;
                lattice.coords_into(node as usize, &mut coords);
                for a in 0..n {
                    bary[a] += m * coords[a];
                    geo[a] += coords[a];
                }
            }
            // keep every block: the JKO iterates may move mass anywhere
            let point: Vec<F> = if w > F::zero() {
                bary.iter().map(|&b| b / w).collect()
            } else {
                geo.iter().map(|&g| g / F::of_usize(block.len())).collect()
            };
            points.push(point);
            ref_vols.push(F::of_usize(block.len()) * vol);
            weights.push(w);
            kept_blocks.push(block.clone());
        }
        // strictly positive weights for the entropic solver
        let floor = F::of(1e-14);
        let mut total = F::zero();
        for w in &mut weights {
            *w = w.max(floor);
            total += *w;
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(JKOState {
            partition: Partition { blocks: kept_blocks },
            points,
            ref_vols,
            weights,
            lattice,
        })
    }

    /// Discrete entropy `sum w ln(w / V)`, equal to the grid entropy of the
    /// block-uniform density.
    pub fn entropy(&self) -> F {
        let vals: Vec<F> = self
            .weights
            .iter()
            .zip(&self.ref_vols)
            .map(|(&w, &v)| if w > F::zero() { w * (w / v).ln() } else { F::zero() })
            .collect();
        tree_sum(&vals)
    }

    /// Expand the block weights into the block-uniform grid measure.
    pub fn to_measure(&self) -> Result<GridMeasure<F>> {
        let mut rho = vec![F::zero(); self.lattice.num_nodes()];
        for (block, (&w, &v)) in self
            .partition
            .blocks
            .iter()
            .zip(self.weights.iter().zip(&self.ref_vols))
        {
            let dens = w / v;
            for &node in block {
                rho[node as usize] = dens;
            }
        }
        Ok(GridMeasure::from_values(self.lattice.clone(), rho)?.0)
    }

    pub fn discrete(&self) -> Result<DiscreteMeasure<F>> {
        DiscreteMeasure::new(self.points.clone(), normalized(&self.weights))
    }
}

fn normalized<F: Scalar>(w: &[F]) -> Vec<F> {
    let total = tree_sum(w);
    w.iter().map(|&v| v / total).collect()
}

/// Outcome of one proximal step.
#[derive(Debug, Clone)]
pub struct JKOStepReport<F> {
    pub entropy: F,
    /// squared movement W^2(out, in): exact-OT polish when enabled,
    /// otherwise the entropic primal cost
    pub movement_sq: F,
    /// Ent + W^2 / (2 tau)
    pub objective: F,
    pub inner_iterations: usize,
    pub converged: bool,
}

/// One minimizing-movement step on a compressed state:
/// `argmin_rho Ent(rho) + W^2(rho, w)/(2 tau)` via the entropic proximal
/// fixed point (alternating scaling against the current iterate and the
/// pointwise entropy proximal update). The inner dual objective is
/// monotonically nondecreasing and iteration stops at stationarity.
pub fn jko_step<F: Scalar>(
    _group: &StratifiedAlgebra<F>,
    state: &mut JKOState<F>,
    cost: &[Vec<F>],
    cfg: &JKOConfig<F>,
) -> Result<JKOStepReport<F>> {
    if cfg.tau <= F::zero() {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let m = state.weights.len();
    let two_tau = cfg.tau + cfg.tau;
    let eps = match cfg.reg {
        Some(r) => r,
        None => {
            let mut flat: Vec<F> = cost.iter().flat_map(|r| r.iter().copied()).collect();
            flat.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            (F::of(0.1) * cfg.tau * flat[flat.len() / 2]).max(F::of(1e-12))
        }
    };

    let w = normalized(&state.weights);
    let log_w: Vec<F> = w.iter().map(|v| v.ln()).collect();
    let log_v: Vec<F> = state.ref_vols.iter().map(|v| v.ln()).collect();

    let mut u = vec![F::zero(); m];
    let mut g = vec![F::zero(); m];
    let mut log_z = vec![F::zero(); m];
    let mut dual_prev = F::neg_infinity();
    let mut converged = false;
    let mut iterations = 0usize;
    // dual of min <C, pi> + eps H(pi) + 2 tau sum rho ln(rho / V) over
    // pi >= 0 with pi 1 = w, rho = pi^T 1:
    //   D(u, g) = <u, w> - eps sum_ij exp((u_i - g_j - C_ij)/eps)
    //                    - 2 tau sum_j V_j exp(g_j/(2 tau) - 1)
    // both updates are exact block maximizations, so D is nondecreasing.
    for it in 0..cfg.max_inner {
        iterations = it + 1;
        // u-update: rows match w exactly afterwards
        for i in 0..m {
            let mut max = F::neg_infinity();
            for j in 0..m {
                let v = (-g[j] - cost[i][j]) / eps;
                if v > max {
                    max = v;
                }
            }
            let mut acc = F::zero();
            for j in 0..m {
                acc += ((-g[j] - cost[i][j]) / eps - max).exp();
            }
            u[i] = eps * (log_w[i] - max - acc.ln());
        }
        // g-update: entropy proximal condition
        // e^{-g/eps} z = V e^{g/(2tau) - 1},  z_j = sum_i e^{(u_i - C_ij)/eps}
        for j in 0..m {
            let mut max = F::neg_infinity();
            for i in 0..m {
                let v = (u[i] - cost[i][j]) / eps;
                if v > max {
                    max = v;
                }
            }
            let mut acc = F::zero();
            for i in 0..m {
                acc += ((u[i] - cost[i][j]) / eps - max).exp();
            }
            log_z[j] = max + acc.ln();
            g[j] = (log_z[j] - log_v[j] + F::one()) / (F::one() / eps + F::one() / two_tau);
        }
        // dual value
        let mut mid = F::zero();
        let mut prox = F::zero();
        let mut inner = F::zero();
        for j in 0..m {
            mid += (log_z[j] - g[j] / eps).exp();
            prox += state.ref_vols[j] * (g[j] / two_tau - F::one()).exp();
        }
        for i in 0..m {
            inner += u[i] * w[i];
        }
        let dual = inner - eps * mid - two_tau * prox;
        if dual < dual_prev - F::of(1e-9) * (F::one() + dual.abs()) {
            return Err(Error::SolverFailure(format!(
                "JKO inner dual decreased: {:e} -> {:e}",
                dual_prev.to_f64_lossy(),
                dual.to_f64_lossy()
            )));
        }
        if (dual - dual_prev).abs() <= cfg.tol * (F::one() + dual.abs()) {
            converged = true;
            break;
        }
        dual_prev = dual;
    }

    // marginal rho_j = e^{-g_j/eps} z_j
    let mut rho: Vec<F> = (0..m).map(|j| (log_z[j] - g[j] / eps).exp()).collect();
    let total = tree_sum(&rho);
    for r in &mut rho {
        *r /= total;
    }

    // movement cost for the reported objective
    let prev = DiscreteMeasure::new(state.points.clone(), w.clone())?;
    let next = DiscreteMeasure::new(state.points.clone(), rho.clone())?;
    let movement_sq = if cfg.exact_polish {
        solve_exact(&prev, &next, cost)?.cost
    } else {
        // entropic primal cost of the final plan
        let mut vals: Vec<F> = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                vals.push(((u[i] - g[j] - cost[i][j]) / eps).exp() * cost[i][j]);
            }
        }
        tree_sum(&vals)
    };

    state.weights = rho;
    let ent = state.entropy();
    Ok(JKOStepReport {
        entropy: ent,
        movement_sq,
        objective: ent + movement_sq / two_tau,
        inner_iterations: iterations,
        converged,
    })
}

/// Full minimizing-movement chain from a grid measure.
pub struct JKORun<F> {
    pub state: JKOState<F>,
    pub reports: Vec<JKOStepReport<F>>,
    pub times: Vec<F>,
}

pub fn jko_run<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu0: &GridMeasure<F>,
    total_time: F,
    cfg: &JKOConfig<F>,
    backend: &DistanceBackend<F>,
) -> Result<JKORun<F>> {
    let steps = (total_time / cfg.tau).round().to_f64_lossy() as usize;
    if steps == 0
        || ((F::of_usize(steps) * cfg.tau - total_time).abs() > F::of(1e-9) * total_time)
    {
        return Err(Error::InvalidArgument(
            "total time must be an integer multiple of tau".into(),
        ));
    }
    let mut state = JKOState::from_measure(mu0, cfg.support_budget)?;
    let cost = crate::transport::cost_matrix(group, backend, &state.points, &state.points)?;
    let mut reports = Vec::with_capacity(steps);
    let mut times = Vec::with_capacity(steps);
    for k in 0..steps {
        let report = jko_step(group, &mut state, &cost, cfg)?;
        times.push(F::of_usize(k + 1) * cfg.tau);
        reports.push(report);
    }
    Ok(JKORun {
        state,
        reports,
        times,
    })
}

/// HWI inequality report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HWIReport {
    pub ent_mu: f64,
    pub ent_nu: f64,
    pub fisher_eps: f64,
    pub w_eps: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Evaluate `Ent(nu) - Ent(mu) + sqrt(F_eps(mu)) W_eps(nu, mu)
/// + K/(2 eps^2) W_eps(nu, mu)^2 >= 0`.
pub fn hwi_check<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    nu: &GridMeasure<F>,
    eps: F,
    ricci_k: F,
    opts: &WassersteinOpts<F>,
) -> Result<HWIReport> {
    if eps <= F::zero() {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let ent_mu = entropy(mu);
    let ent_nu = entropy(nu);
    let fisher_eps = crate::functionals::epsilon_fisher(group, mu, eps)?;
    let w = wasserstein(group, nu, mu, opts)?.distance;
    let margin = ent_nu - ent_mu
        + fisher_eps.sqrt() * w
        + ricci_k / (F::of(2.0) * eps * eps) * w * w;
    Ok(HWIReport {
        ent_mu: ent_mu.to_f64_lossy(),
        ent_nu: ent_nu.to_f64_lossy(),
        fisher_eps: fisher_eps.to_f64_lossy(),
        w_eps: w.to_f64_lossy(),
        margin: margin.to_f64_lossy(),
        pass: margin >= F::of(-1e-9),
    })
}

/// Convolve a density and per-component momenta with one nonnegative
/// quadrature kernel of left translates (shared weights), returning the
/// unnormalized smoothed density and momenta. Feeding the ratio
/// `sigma*(u rho) / sigma*rho` into a squared norm against `sigma*rho`
/// realizes the Jensen smoothing inequality exactly at the discrete level.
pub fn convolve_density_and_momentum<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
    rho: &[F],
    momenta: &[Vec<F>],
    quad: &[(Vec<F>, F)],
) -> (Vec<F>, Vec<Vec<F>>) {
    let n = lattice.ndim();
    let nodes = lattice.num_nodes();
    let mut out_rho = vec![F::zero(); nodes];
    let mut out_m: Vec<Vec<F>> = vec![vec![F::zero(); nodes]; momenta.len()];
    let mut x = vec![F::zero(); n];
    let mut zinv = vec![F::zero(); n];
    let mut y = vec![F::zero(); n];
    for idx in 0..nodes {
        lattice.coords_into(idx, &mut x);
        let mut acc_r = F::zero();
        let mut acc_m = vec![F::zero(); momenta.len()];
        for (z, wq) in quad {
            for (t, &v) in zinv.iter_mut().zip(z.iter()) {
                *t = -v;
            }
            group.multiply_into(&zinv, &x, &mut y);
            acc_r += lattice.interpolate(rho, &y) * *wq;
            for (c, m) in acc_m.iter_mut().zip(momenta) {
                *c += lattice.interpolate(m, &y) * *wq;
            }
        }
        out_rho[idx] = acc_r;
        for (c, m) in out_m.iter_mut().zip(&acc_m) {
            c[idx] = *m;
        }
    }
    (out_rho, out_m)
}

/// `int || m / rho ||^2 rho` over nodes with positive density.
pub fn kinetic_energy<F: Scalar>(lattice: &Lattice<F>, rho: &[F], momenta: &[Vec<F>]) -> F {
    let tau = fisher_threshold(rho);
    let vol = lattice.cell_volume();
    let vals: Vec<F> = (0..rho.len())
        .map(|idx| {
            if rho[idx] <= tau {
                return F::zero();
            }
            let mut m2 = F::zero();
            for m in momenta {
                m2 += m[idx] * m[idx];
            }
            m2 / rho[idx]
        })
        .collect();
    tree_sum(&vals) * vol
}
