//! Numerical probes of the Bakry-Emery gradient inequality and the reverse
//! Poincare constant for the heat semigroup.

use crate::error::{Error, Result};
use crate::functionals::{fisher_threshold, layer_gradient};
use crate::heat::{kernel_estimate, semigroup_apply, SubLaplacian};
use crate::lattice::Lattice;
use crate::scalar::{tree_sum, Scalar};

/// A test function with an analytic definition, rebuildable on any lattice
/// (needed for mesh-refinement persistence checks).
pub struct BankFunction<F> {
    pub id: String,
    pub eval: Box<dyn Fn(&[F]) -> F + Send + Sync>,
}

impl<F: Scalar> BankFunction<F> {
    pub fn sample(&self, lattice: &Lattice<F>) -> Vec<F> {
        let mut coords = vec![F::zero(); lattice.ndim()];
        (0..lattice.num_nodes())
            .map(|idx| {
                lattice.coords_into(idx, &mut coords);
                (self.eval)(&coords)
            })
            .collect()
    }
}

fn plateau_bump(s: f64) -> f64 {
    // 1 on |s| <= 0.5, smooth decay to 0 at |s| = 1
    let a = s.abs();
    if a <= 0.5 {
        1.0
    } else if a >= 1.0 {
        0.0
    } else {
        let u = (a - 0.5) / 0.5;
        let w = 1.0 - u * u;
        w * w * w
    }
}

/// Fixed deterministic test bank: coordinate functions times a plateau
/// bump, quadratic monomials times the bump, and the bump alone. For a
/// three-dimensional group this is ten functions.
pub fn curvature_test_bank<F: Scalar>(lattice: &Lattice<F>) -> Vec<BankFunction<F>> {
    let n = lattice.ndim();
    let half: Vec<f64> = lattice.hi().iter().map(|&h| h.to_f64_lossy()).collect();
    let bump = {
        let half = half.clone();
        move |x: &[F]| -> f64 {
            let mut b = 1.0;
            for a in 0..x.len() {
                b *= plateau_bump(x[a].to_f64_lossy() / (0.9 * half[a]));
            }
            b
        }
    };
    let mut bank: Vec<BankFunction<F>> = Vec::new();
    for i in 0..n {
        let bump = bump.clone();
        bank.push(BankFunction {
            id: format!("x{}", i + 1),
            eval: Box::new(move |x| F::of(x[i].to_f64_lossy() * bump(x))),
        });
    }
    for i in 0..n {
        for j in i..n {
            let bump = bump.clone();
            bank.push(BankFunction {
                id: format!("x{}x{}", i + 1, j + 1),
                eval: Box::new(move |x| {
                    F::of(x[i].to_f64_lossy() * x[j].to_f64_lossy() * bump(x))
                }),
            });
        }
    }
    let bump2 = bump.clone();
    bank.push(BankFunction {
        id: "bump".into(),
        eval: Box::new(move |x| F::of(bump2(x))),
    });
    bank
}

/// Extra probes mixing a horizontal coordinate with the bracket-generated
/// products; these carry the Bakry-Emery violation at small times for
/// strongly negative K.
pub fn mixed_probe_bank<F: Scalar>(lattice: &Lattice<F>) -> Vec<BankFunction<F>> {
    let half: Vec<f64> = lattice.hi().iter().map(|&h| h.to_f64_lossy()).collect();
    let n = lattice.ndim();
    let bump = move |x: &[F]| -> f64 {
        let mut b = 1.0;
        for a in 0..x.len() {
            b *= plateau_bump(x[a].to_f64_lossy() / (0.9 * half[a]));
        }
        b
    };
    if n < 3 {
        return Vec::new();
    }
    [0.05f64, 0.2, 0.6]
        .iter()
        .map(|&alpha| {
            let bump = bump.clone();
            BankFunction {
                id: format!("x1+{alpha}x2x3"),
                eval: Box::new(move |x: &[F]| {
                    let xf: Vec<f64> = x.iter().map(|v| v.to_f64_lossy()).collect();
                    F::of((alpha * xf[0] + xf[1] * xf[2]) * bump(x))
                }),
            }
        })
        .collect()
}

/// A located violation of the gradient inequality
/// `|grad_G P_t f|^2 <= e^{-2Kt} P_t(|grad_G f|^2)`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BEWitness {
    pub k: f64,
    pub t: f64,
    pub test_id: String,
    pub node: usize,
    pub coords: Vec<f64>,
    pub left: f64,
    pub right: f64,
    /// (left - right) / right, positive for a witness
    pub margin: f64,
}

/// Relative margin guard for declaring a violation. The spec suggests 1e-6,
/// but the discrete gradient/semigroup pair carries O(h^2) commutation
/// noise, so the guard sits above that floor.
pub const BE_MARGIN_GUARD: f64 = 1e-2;

fn deep_interior<F: Scalar>(lattice: &Lattice<F>, idx: usize, ring: usize) -> bool {
    lattice
        .multi_index(idx)
        .iter()
        .zip(lattice.counts())
        .all(|(&i, &c)| i >= ring && i + ring < c)
}

/// Squared horizontal gradient of a nodal field.
fn grad_sq<F: Scalar>(op: &SubLaplacian<F>, field: &[F]) -> Vec<F> {
    let comps = layer_gradient(op.group(), op.lattice(), field, 1).expect("layer 1");
    let mut out = vec![F::zero(); field.len()];
    for comp in &comps {
        for (o, &c) in out.iter_mut().zip(comp) {
            *o += c * c;
        }
    }
    out
}

/// Apply the semigroup once, recording snapshots at the (sorted) times.
fn semigroup_snapshots<F: Scalar>(
    op: &SubLaplacian<F>,
    f: &[F],
    times: &[F],
) -> Result<Vec<Vec<F>>> {
    let mut out = Vec::with_capacity(times.len());
    let mut field = f.to_vec();
    let mut prev = F::zero();
    for &t in times {
        if t < prev {
            return Err(Error::InvalidArgument("times must be sorted".into()));
        }
        if t > prev {
            field = semigroup_apply(op, &field, t - prev)?;
            prev = t;
        }
        out.push(field.clone());
    }
    Ok(out)
}

/// Evaluate the two sides of the gradient inequality for one function at
/// one time: returns (left, right-without-K) nodal fields.
fn be_sides<F: Scalar>(op: &SubLaplacian<F>, f: &[F], t: F) -> Result<(Vec<F>, Vec<F>)> {
    let ptf = semigroup_apply(op, f, t)?;
    let left = grad_sq(op, &ptf);
    let gf = grad_sq(op, f);
    let right = semigroup_apply(op, &gf, t)?;
    Ok((left, right))
}

/// Scan (t, f, x) for violations of BE(K, infinity) for every K in `ks`;
/// the per-(f, t) semigroup evolutions are shared across the K grid.
/// Returns the maximal-margin witness per K, or None where the bank shows
/// no violation.
pub fn be_violation_search_multi<F: Scalar>(
    op: &SubLaplacian<F>,
    ks: &[F],
    times: &[F],
    bank: &[BankFunction<F>],
) -> Result<Vec<Option<BEWitness>>> {
    let lattice = op.lattice();
    let mut best: Vec<Option<BEWitness>> = vec![None; ks.len()];
    let guard = F::of(BE_MARGIN_GUARD);
    for bf in bank {
        let f = bf.sample(lattice);
        let ptf = semigroup_snapshots(op, &f, times)?;
        let gf = grad_sq(op, &f);
        let ptgf = semigroup_snapshots(op, &gf, times)?;
        for (ti, &t) in times.iter().enumerate() {
            let left = grad_sq(op, &ptf[ti]);
            let right_raw = &ptgf[ti];
            let right_scale = right_raw
                .iter()
                .fold(F::zero(), |a, &b| a.max(b.abs()))
                * F::of(1e-4);
            for (ki, &ricci_k) in ks.iter().enumerate() {
                let decay = (-F::of(2.0) * ricci_k * t).exp();
                for idx in 0..left.len() {
                    if !deep_interior(lattice, idx, 3) {
                        continue;
                    }
                    if right_raw[idx] <= right_scale {
                        continue;
                    }
                    let right = decay * right_raw[idx];
                    if left[idx] > right * (F::one() + guard) {
                        let margin = ((left[idx] - right) / right).to_f64_lossy();
                        if best[ki].as_ref().map_or(true, |b| margin > b.margin) {
                            best[ki] = Some(BEWitness {
                                k: ricci_k.to_f64_lossy(),
                                t: t.to_f64_lossy(),
                                test_id: bf.id.clone(),
                                node: idx,
                                coords: lattice
                                    .node_coords(idx)
                                    .iter()
                                    .map(|v| v.to_f64_lossy())
                                    .collect(),
                                left: left[idx].to_f64_lossy(),
                                right: right.to_f64_lossy(),
                                margin,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Single-K convenience wrapper.
pub fn be_violation_search<F: Scalar>(
    op: &SubLaplacian<F>,
    ricci_k: F,
    times: &[F],
    bank: &[BankFunction<F>],
) -> Result<Option<BEWitness>> {
    Ok(be_violation_search_multi(op, &[ricci_k], times, bank)?.remove(0))
}

/// Re-evaluate a witness on another operator (e.g. a refined mesh) at the
/// same time and location; returns the margin there.
pub fn be_margin_at<F: Scalar>(
    op: &SubLaplacian<F>,
    ricci_k: F,
    bf: &BankFunction<F>,
    t: F,
    coords: &[F],
) -> Result<f64> {
    let f = bf.sample(op.lattice());
    let (left, right_raw) = be_sides(op, &f, t)?;
    let idx = op.lattice().nearest_node(coords)?;
    let decay = (-F::of(2.0) * ricci_k * t).exp();
    let right = decay * right_raw[idx];
    Ok(((left[idx] - right) / right.abs().max(F::of(1e-300))).to_f64_lossy())
}

/// Reverse Poincare data for one test function at one time.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReversePoincare {
    pub t: f64,
    pub test_id: String,
    /// min over probed nodes of [P_t(f^2) - (P_t f)^2] / |grad_G P_t f|^2
    pub ratio: f64,
    /// t / ratio
    pub lambda_hat: f64,
    /// most negative variance seen (discrete Cauchy-Schwarz check)
    pub min_variance: f64,
}

/// Variance-to-gradient ratio of the semigroup at time `t` for `f`.
/// Returns None when the gradient is degenerate everywhere.
pub fn reverse_poincare_ratio<F: Scalar>(
    op: &SubLaplacian<F>,
    t: F,
    bf: &BankFunction<F>,
) -> Result<Option<ReversePoincare>> {
    let lattice = op.lattice();
    let f = bf.sample(lattice);
    let ptf = semigroup_apply(op, &f, t)?;
    let f2: Vec<F> = f.iter().map(|&v| v * v).collect();
    let ptf2 = semigroup_apply(op, &f2, t)?;
    let grad = grad_sq(op, &ptf);
    let gmax = grad.iter().fold(F::zero(), |a, &b| a.max(b));
    let tau = gmax * F::of(1e-6);
    // rounding floor of the variance computation; genuinely tiny variances
    // with sizable gradients cannot occur (the inequality itself forbids
    // them), so anything below the floor is noise
    let var_scale = ptf2.iter().fold(F::zero(), |a, &b| a.max(b.abs()));
    let var_floor = var_scale * F::of(1e-10);
    let mut ratio = F::infinity();
    let mut min_var = F::infinity();
    for idx in 0..f.len() {
        if !deep_interior(lattice, idx, 3) {
            continue;
        }
        let var = ptf2[idx] - ptf[idx] * ptf[idx];
        min_var = min_var.min(var);
        if grad[idx] <= tau || var <= var_floor {
            continue;
        }
        ratio = ratio.min(var / grad[idx]);
    }
    if !ratio.is_finite() {
        return Ok(None);
    }
    Ok(Some(ReversePoincare {
        t: t.to_f64_lossy(),
        test_id: bf.id.clone(),
        ratio: ratio.to_f64_lossy(),
        lambda_hat: (t / ratio).to_f64_lossy(),
        min_variance: min_var.to_f64_lossy(),
    }))
}

/// Near-extremal probe for the sharp reverse Poincare constant: the
/// horizontal score of the heat kernel. For the variance form at a base
/// point the optimal test function is a combination of
/// `X_i p_t(x0, .) / p_t(x0, .)`; the optimal coefficients and the implied
/// constant are the top eigenpair of the kernel's horizontal Fisher matrix,
/// `lambda_hat = t * lambda_max(M)`.
pub fn kernel_score_probe<F: Scalar>(
    op: &SubLaplacian<F>,
    t: F,
) -> Result<(BankFunction<F>, f64)> {
    let lattice = op.lattice().clone();
    let est = kernel_estimate(op, t)?;
    let m1 = op.group().horizontal_dim();
    let grads = layer_gradient(op.group(), &lattice, &est.field, 1)?;
    // Fisher matrix M_ij = int (X_i h)(X_j h)/h over the resolved interior
    let tau = fisher_threshold(&est.field);
    let vol = lattice.cell_volume();
    let mut m = vec![vec![F::zero(); m1]; m1];
    for i in 0..m1 {
        for j in i..m1 {
            let vals: Vec<F> = (0..est.field.len())
                .map(|idx| {
                    if est.field[idx] <= tau || !deep_interior(&lattice, idx, 2) {
                        return F::zero();
                    }
                    grads[i][idx] * grads[j][idx] / est.field[idx]
                })
                .collect();
            let v = tree_sum(&vals) * vol;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    // top eigenpair by power iteration (m1 is tiny)
    let mut c = vec![F::one(); m1];
    let mut lambda = F::zero();
    for _ in 0..200 {
        let mut next = vec![F::zero(); m1];
        for i in 0..m1 {
            for j in 0..m1 {
                next[i] += m[i][j] * c[j];
            }
        }
        let norm = next.iter().fold(F::zero(), |a, &b| a + b * b).sqrt();
        if norm == F::zero() {
            break;
        }
        for v in &mut next {
            *v /= norm;
        }
        lambda = norm;
        c = next;
    }

    // score field with inverted argument: f(y) = sum c_i (X_i h)(-y) / h(-y),
    // cut off by a plateau bump
    let n = lattice.num_nodes();
    let mut score = vec![F::zero(); n];
    let floor = fisher_threshold(&est.field) * F::of(1e3);
    for idx in 0..n {
        let rev = n - 1 - idx;
        if est.field[rev] > floor {
            let mut s = F::zero();
            for i in 0..m1 {
                s += c[i] * grads[i][rev];
            }
            score[idx] = s / est.field[rev];
        }
    }
    let half: Vec<f64> = lattice.hi().iter().map(|&h| h.to_f64_lossy()).collect();
    let lattice_for_eval = lattice.clone();
    let probe = BankFunction {
        id: format!("kernel-score(t={})", t.to_f64_lossy()),
        eval: Box::new(move |x: &[F]| {
            let mut b = 1.0;
            for a in 0..x.len() {
                b *= plateau_bump(x[a].to_f64_lossy() / (0.85 * half[a]));
            }
            F::of(lattice_for_eval.interpolate(&score, x).to_f64_lossy() * b)
        }),
    };
    Ok((probe, (t * lambda).to_f64_lossy()))
}

/// Summary of the reverse Poincare estimation over a bank.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LambdaSummary {
    pub per_function: Vec<ReversePoincare>,
    /// sup over the bank of t / ratio
    pub lambda_hat: f64,
    /// theoretical window [Q/(2 m1), Q/m1]
    pub window: (f64, f64),
}

pub fn lambda_summary<F: Scalar>(
    op: &SubLaplacian<F>,
    times: &[F],
    bank: &[BankFunction<F>],
) -> Result<LambdaSummary> {
    let g = op.group();
    let mut per = Vec::new();
    let mut lambda = 0.0f64;
    for bf in bank {
        for &t in times {
            if let Some(rp) = reverse_poincare_ratio(op, t, bf)? {
                lambda = lambda.max(rp.lambda_hat);
                per.push(rp);
            }
        }
    }
    if per.is_empty() {
        return Err(Error::SolverFailure(
            "reverse Poincare: degenerate gradients for the whole bank".into(),
        ));
    }
    let q = g.homogeneous_dim() as f64;
    let m1 = g.horizontal_dim() as f64;
    Ok(LambdaSummary {
        per_function: per,
        lambda_hat: lambda,
        window: (q / (2.0 * m1), q / m1),
    })
}
