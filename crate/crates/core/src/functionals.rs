//! Entropy, truncated entropy, layer gradients, Fisher information and the
//! first variation of the entropy along horizontal fields.

use crate::error::{Error, Result};
use crate::group::StratifiedAlgebra;
use crate::lattice::{GridMeasure, Lattice};
use crate::scalar::{tree_sum, Scalar};

/// Vector field with one component per first-layer frame direction.
#[derive(Debug, Clone)]
pub struct HorizontalField<F> {
    pub components: Vec<Vec<F>>,
}

impl<F: Scalar> HorizontalField<F> {
    pub fn zeros(m1: usize, nodes: usize) -> Self {
        HorizontalField {
            components: vec![vec![F::zero(); nodes]; m1],
        }
    }

    /// Squared L^2(mu) norm, same quadrature as the Fisher integrals.
    pub fn l2_sq(&self, mu: &GridMeasure<F>) -> F {
        let vol = mu.lattice().cell_volume();
        let n = mu.density().len();
        let vals: Vec<F> = (0..n)
            .map(|i| {
                let mut s = F::zero();
                for c in &self.components {
                    s += c[i] * c[i];
                }
                s * mu.density()[i]
            })
            .collect();
        tree_sum(&vals) * vol
    }
}

/// Per-time diagnostics attached to flow traces.
#[derive(Debug, Clone)]
pub struct DiagnosticsRecord<F> {
    pub t: F,
    pub mass: F,
    pub entropy: F,
    pub fisher: F,
    /// (epsilon, epsilon-Fisher) pairs for the configured epsilon list.
    pub fisher_eps: Vec<(F, F)>,
    pub second_moment: F,
    pub min_rho: F,
    pub max_rho: F,
}

impl<F: Scalar> DiagnosticsRecord<F> {
    pub fn csv_header(eps: &[F]) -> String {
        let mut s = String::from("t,mass,entropy,fisher");
        for e in eps {
            s.push_str(&format!(",fisher_eps_{}", e.to_f64_lossy()));
        }
        s.push_str(",moment,min_rho,max_rho");
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{:.17e},{:.17e},{:.17e},{:.17e}",
            self.t.to_f64_lossy(),
            self.mass.to_f64_lossy(),
            self.entropy.to_f64_lossy(),
            self.fisher.to_f64_lossy()
        );
        for (_, v) in &self.fisher_eps {
            s.push_str(&format!(",{:.17e}", v.to_f64_lossy()));
        }
        s.push_str(&format!(
            ",{:.17e},{:.17e},{:.17e}",
            self.second_moment.to_f64_lossy(),
            self.min_rho.to_f64_lossy(),
            self.max_rho.to_f64_lossy()
        ));
        s
    }
}

/// Entropy with respect to the Haar (Lebesgue) measure, in nats.
pub fn entropy<F: Scalar>(mu: &GridMeasure<F>) -> F {
    let vol = mu.lattice().cell_volume();
    let vals: Vec<F> = mu
        .density()
        .iter()
        .map(|&r| if r > F::zero() { r * r.ln() } else { F::zero() })
        .collect();
    tree_sum(&vals) * vol
}

/// Relative entropy of `mu` against a reference density given nodally.
/// The reference need not be normalized. Fails when `mu` puts mass where
/// the reference vanishes.
pub fn relative_entropy<F: Scalar>(mu: &GridMeasure<F>, reference: &[F]) -> Result<F> {
    let vol = mu.lattice().cell_volume();
    if reference.len() != mu.density().len() {
        return Err(Error::InvalidArgument("reference size mismatch".into()));
    }
    let mut vals = Vec::with_capacity(reference.len());
    for (&r, &nu) in mu.density().iter().zip(reference) {
        if r > F::zero() {
            if nu <= F::zero() {
                return Err(Error::InvalidMeasure(
                    "mu is not absolutely continuous w.r.t. the reference".into(),
                ));
            }
            vals.push(r * (r / nu).ln());
        } else {
            vals.push(F::zero());
        }
    }
    Ok(tree_sum(&vals) * vol)
}

/// Truncation profile `z_m(r) = min(m, max(1 + log r, -m))`.
pub fn z_m<F: Scalar>(m: usize, r: F) -> F {
    let mf = F::of_usize(m);
    if r <= F::zero() {
        return -mf;
    }
    (F::one() + r.ln()).max(-mf).min(mf)
}

/// `H_m(r) = int_0^r z_m(s) ds`, in closed form.
pub fn h_m<F: Scalar>(m: usize, r: F) -> F {
    let mf = F::of_usize(m);
    let lo = (-mf - F::one()).exp(); // e^{-m-1}
    let hi = (mf - F::one()).exp(); // e^{m-1}
    if r <= lo {
        -mf * r
    } else if r <= hi {
        r * r.ln() + lo
    } else {
        mf * r - hi + lo
    }
}

/// Truncated entropy `int H_m(rho) dx`.
pub fn truncated_entropy<F: Scalar>(mu: &GridMeasure<F>, m: usize) -> Result<F> {
    if m == 0 {
        return Err(Error::InvalidArgument("truncation level must be >= 1".into()));
    }
    let vol = mu.lattice().cell_volume();
    let vals: Vec<F> = mu.density().iter().map(|&r| h_m(m, r)).collect();
    Ok(tree_sum(&vals) * vol)
}

/// Gradient along the fields of one layer: component `j` of the result is
/// `X_{h+j} rho` by centered differences with the frame coefficients
/// (one-sided at the boundary).
pub fn layer_gradient<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
    rho: &[F],
    layer: usize,
) -> Result<Vec<Vec<F>>> {
    let range = group.layer_range(layer)?;
    let n = lattice.ndim();
    let nodes = lattice.num_nodes();
    if rho.len() != nodes {
        return Err(Error::InvalidArgument("field size mismatch".into()));
    }
    // Euclidean partial derivatives
    let mut partials: Vec<Vec<F>> = Vec::with_capacity(n);
    for axis in 0..n {
        partials.push(partial_derivative(lattice, rho, axis));
    }
    let mut out = Vec::with_capacity(range.len());
    let mut coords = vec![F::zero(); n];
    for j in range {
        let mut comp = vec![F::zero(); nodes];
        for idx in 0..nodes {
            lattice.coords_into(idx, &mut coords);
            let mut s = F::zero();
            for k in 0..n {
                let a = group.frame_coeff(j, k, &coords);
                if a != F::zero() {
                    s += a * partials[k][idx];
                }
            }
            comp[idx] = s;
        }
        out.push(comp);
    }
    Ok(out)
}

/// Horizontal gradient (layer 1) as a `HorizontalField`.
pub fn horizontal_gradient<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
    rho: &[F],
) -> HorizontalField<F> {
    HorizontalField {
        components: layer_gradient(group, lattice, rho, 1).expect("layer 1 always exists"),
    }
}

/// Centered difference along one axis, one-sided at the boundary.
pub fn partial_derivative<F: Scalar>(lattice: &Lattice<F>, f: &[F], axis: usize) -> Vec<F> {
    let counts = lattice.counts();
    let nodes = lattice.num_nodes();
    let h = lattice.spacing()[axis];
    let stride: usize = counts[axis + 1..].iter().product();
    let mut out = vec![F::zero(); nodes];
    let two_h = h + h;
    for idx in 0..nodes {
        let i = (idx / stride) % counts[axis];
        out[idx] = if i == 0 {
            (f[idx + stride] - f[idx]) / h
        } else if i == counts[axis] - 1 {
            (f[idx] - f[idx - stride]) / h
        } else {
            (f[idx + stride] - f[idx - stride]) / two_h
        };
    }
    out
}

/// Positivity threshold for Fisher quadratures.
pub fn fisher_threshold<F: Scalar>(rho: &[F]) -> F {
    let max = rho.iter().fold(F::zero(), |a, &b| a.max(b));
    F::of(1e-12) * max
}

fn is_boundary_node<F: Scalar>(lattice: &Lattice<F>, idx: usize) -> bool {
    let multi = lattice.multi_index(idx);
    multi
        .iter()
        .zip(lattice.counts())
        .any(|(&i, &c)| i == 0 || i == c - 1)
}

/// Fisher-type quadrature `sum_{rho > tau} |grad|^2 / rho * vol` over
/// interior nodes.
fn gradient_fisher<F: Scalar>(
    lattice: &Lattice<F>,
    rho: &[F],
    grad_components: &[Vec<F>],
) -> F {
    let tau = fisher_threshold(rho);
    let vol = lattice.cell_volume();
    let vals: Vec<F> = (0..rho.len())
        .map(|idx| {
            if rho[idx] <= tau || is_boundary_node(lattice, idx) {
                return F::zero();
            }
            let mut g2 = F::zero();
            for c in grad_components {
                g2 += c[idx] * c[idx];
            }
            g2 / rho[idx]
        })
        .collect();
    tree_sum(&vals) * vol
}

/// Horizontal Fisher information `int |grad_G rho|^2 / rho`.
pub fn horizontal_fisher<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
) -> F {
    let grad = layer_gradient(group, mu.lattice(), mu.density(), 1).expect("layer 1");
    gradient_fisher(mu.lattice(), mu.density(), &grad)
}

/// Fisher information of one layer (no epsilon weight applied).
pub fn layer_fisher<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    layer: usize,
) -> Result<F> {
    let grad = layer_gradient(group, mu.lattice(), mu.density(), layer)?;
    Ok(gradient_fisher(mu.lattice(), mu.density(), &grad))
}

/// epsilon-Fisher information: horizontal Fisher plus the weighted layer
/// terms `eps^{2(i-1)} int |grad_{V_i} rho|^2 / rho`.
pub fn epsilon_fisher<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    eps: F,
) -> Result<F> {
    if eps <= F::zero() {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut total = horizontal_fisher(group, mu);
    for layer in 2..=group.step() {
        let w = eps.powi(2 * (layer as i32 - 1));
        total += w * layer_fisher(group, mu, layer)?;
    }
    Ok(total)
}

/// Same value assembled through the full epsilon-frame in one pass; used to
/// cross-check the decomposition identity.
pub fn epsilon_fisher_full_frame<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    eps: F,
) -> Result<F> {
    if eps <= F::zero() {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let lattice = mu.lattice();
    let rho = mu.density();
    let tau = fisher_threshold(rho);
    let vol = lattice.cell_volume();
    let mut grads: Vec<(F, Vec<F>)> = Vec::new();
    for layer in 1..=group.step() {
        let w = eps.powi(2 * (layer as i32 - 1));
        for comp in layer_gradient(group, lattice, rho, layer)? {
            grads.push((w, comp));
        }
    }
    let vals: Vec<F> = (0..rho.len())
        .map(|idx| {
            if rho[idx] <= tau || is_boundary_node(lattice, idx) {
                return F::zero();
            }
            let mut g2 = F::zero();
            for (w, c) in &grads {
                g2 += *w * c[idx] * c[idx];
            }
            g2 / rho[idx]
        })
        .collect();
    Ok(tree_sum(&vals) * vol)
}

/// First variation of the entropy along a horizontal field:
/// `-int rho div(V) dx` with the Euclidean divergence of the coordinate
/// expression of `V`. Fails when `V` touches the boundary.
pub fn entropy_first_variation<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    field: &HorizontalField<F>,
) -> Result<F> {
    let lattice = mu.lattice();
    let coords_field = coordinate_expression(group, lattice, field)?;
    // reject fields touching the outermost two node layers
    for axis_comp in coords_field.iter() {
        for (idx, &v) in axis_comp.iter().enumerate() {
            if v != F::zero() {
                let multi = lattice.multi_index(idx);
                if multi
                    .iter()
                    .zip(lattice.counts())
                    .any(|(&i, &c)| i < 2 || i + 2 >= c)
                {
                    return Err(Error::InvalidArgument(
                        "field support touches the boundary".into(),
                    ));
                }
            }
        }
    }
    let nodes = lattice.num_nodes();
    let mut div = vec![F::zero(); nodes];
    for (axis, comp) in coords_field.iter().enumerate() {
        let d = partial_derivative(lattice, comp, axis);
        for (dv, &v) in div.iter_mut().zip(&d) {
            *dv += v;
        }
    }
    let vol = lattice.cell_volume();
    let vals: Vec<F> = (0..nodes)
        .map(|i| mu.density()[i] * div[i])
        .collect();
    Ok(-tree_sum(&vals) * vol)
}

/// Coordinate expression `W_k = sum_j V_j a_{jk}` of a horizontal field.
pub fn coordinate_expression<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
    field: &HorizontalField<F>,
) -> Result<Vec<Vec<F>>> {
    let n = lattice.ndim();
    let nodes = lattice.num_nodes();
    if field.components.len() != group.horizontal_dim() {
        return Err(Error::InvalidArgument(
            "horizontal field must have m_1 components".into(),
        ));
    }
    let mut out = vec![vec![F::zero(); nodes]; n];
    let mut coords = vec![F::zero(); n];
    for idx in 0..nodes {
        lattice.coords_into(idx, &mut coords);
        for (j, comp) in field.components.iter().enumerate() {
            let v = comp[idx];
            if v == F::zero() {
                continue;
            }
            for k in 0..n {
                let a = group.frame_coeff(j, k, &coords);
                if a != F::zero() {
                    out[k][idx] += v * a;
                }
            }
        }
    }
    Ok(out)
}

/// Push a grid measure forward by the Euler flow `x -> x + t W(x)` of a
/// horizontal field (coordinate expression) and requadrature onto the grid
/// by multilinear scattering.
pub fn pushforward_euler<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    field: &HorizontalField<F>,
    t: F,
) -> Result<GridMeasure<F>> {
    let lattice = mu.lattice().clone();
    let coords_field = coordinate_expression(group, &lattice, field)?;
    let n = lattice.ndim();
    let nodes = lattice.num_nodes();
    let mut rho = vec![F::zero(); nodes];
    let mut x = vec![F::zero(); n];
    let mut target = vec![F::zero(); n];
    for idx in 0..nodes {
        let w = mu.density()[idx];
        if w == F::zero() {
            continue;
        }
        lattice.coords_into(idx, &mut x);
        for axis in 0..n {
            target[axis] = x[axis] + t * coords_field[axis][idx];
        }
        scatter_multilinear(&lattice, &mut rho, &target, w);
    }
    Ok(GridMeasure::from_values(lattice, rho)?.0)
}

fn scatter_multilinear<F: Scalar>(lattice: &Lattice<F>, rho: &mut [F], p: &[F], w: F) {
    let n = lattice.ndim();
    let mut base = [0i64; 8];
    let mut frac = [F::zero(); 8];
    for axis in 0..n {
        let u = (p[axis] - lattice.lo()[axis]) / lattice.spacing()[axis];
        let uf = u.floor();
        base[axis] = uf.to_f64_lossy() as i64;
        frac[axis] = u - uf;
    }
    for corner in 0..(1usize << n) {
        let mut weight = w;
        let mut idx = 0usize;
        let mut ok = true;
        for axis in 0..n {
            let upper = (corner >> axis) & 1 == 1;
            let node = base[axis] + if upper { 1 } else { 0 };
            if node < 0 || node >= lattice.counts()[axis] as i64 {
                ok = false;
                break;
            }
            weight = weight * if upper { frac[axis] } else { F::one() - frac[axis] };
            idx += node as usize
                * lattice.counts()[axis + 1..].iter().product::<usize>();
        }
        if ok && weight != F::zero() {
            rho[idx] += weight;
        }
    }
}

/// Full diagnostics for one measure.
pub fn diagnose<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    t: F,
    eps_list: &[F],
    dist_to_origin: impl Fn(&[F]) -> F,
) -> DiagnosticsRecord<F> {
    let fisher = horizontal_fisher(group, mu);
    let fisher_eps = eps_list
        .iter()
        .map(|&e| (e, epsilon_fisher(group, mu, e).expect("eps > 0")))
        .collect();
    DiagnosticsRecord {
        t,
        mass: mu.mass(),
        entropy: entropy(mu),
        fisher,
        fisher_eps,
        second_moment: crate::lattice::second_moment(mu, dist_to_origin),
        min_rho: mu.min_density(),
        max_rho: mu.max_density(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{BoxNormParams, StratifiedAlgebra};
    use crate::lattice::Lattice;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn h1_setup() -> (StratifiedAlgebra<f64>, Arc<Lattice<f64>>) {
        let g = StratifiedAlgebra::preset("h1").unwrap();
        let lat = Arc::new(Lattice::symmetric(&[2.0, 2.0, 3.0], &[25, 25, 31]).unwrap());
        (g, lat)
    }

    #[test]
    fn entropy_of_uniform_density_is_minus_log_volume() {
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[41, 41]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |_| 1.0).unwrap();
        // support volume as seen by the node quadrature: nodes * cellvol
        let v = lat.num_nodes() as f64 * lat.cell_volume();
        assert_relative_eq!(entropy(&mu), -v.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_two_cell_example() {
        // two cells with weights (3/4, 1/4) and unit cell volume
        let lat = Arc::new(Lattice::<f64>::new(&[0.0], &[3.0], &[4]).unwrap());
        assert_relative_eq!(lat.cell_volume(), 1.0);
        let (mu, _) =
            GridMeasure::from_values(lat, vec![0.75, 0.25, 0.0, 0.0]).unwrap();
        let expected = 0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln();
        assert_relative_eq!(entropy(&mu), expected, epsilon = 1e-12);
        assert!((expected + 0.5623).abs() < 1e-3);
    }

    #[test]
    fn entropy_is_additive_on_products() {
        let lat1 = Arc::new(Lattice::<f64>::symmetric(&[1.0], &[65]).unwrap());
        let lat2 = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[65, 65]).unwrap());
        let f1 = |x: f64| (-(x * x) * 3.0).exp();
        let f2 = |x: f64| (1.0 - 0.5 * x * x).max(0.0);
        let (m1, _) = GridMeasure::discretize(lat1.clone(), |c| f1(c[0])).unwrap();
        let (m2, _) = GridMeasure::discretize(lat1.clone(), |c| f2(c[0])).unwrap();
        let (mp, _) = GridMeasure::discretize(lat2, |c| f1(c[0]) * f2(c[1])).unwrap();
        assert_relative_eq!(
            entropy(&mp),
            entropy(&m1) + entropy(&m2),
            epsilon = 1e-10
        );
    }

    #[test]
    fn relative_entropy_of_measure_to_itself_is_zero() {
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0], &[33]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat, |c| 1.5 - c[0] * c[0]).unwrap();
        let r = relative_entropy(&mu, mu.density()).unwrap();
        assert!(r.abs() < 1e-14);
    }

    #[test]
    fn relative_entropy_nonnegative_against_probability_reference() {
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0], &[65]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| (1.0 - c[0] * c[0]).max(0.0) + 0.05).unwrap();
        let (nu, _) = GridMeasure::discretize(lat, |c| (-(c[0] * c[0]) * 2.0).exp()).unwrap();
        let r = relative_entropy(&mu, nu.density()).unwrap();
        assert!(r >= -1e-12, "{r}");
    }

    #[test]
    fn relative_entropy_rejects_singular_part() {
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0], &[33]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |_| 1.0).unwrap();
        let mut reference = vec![1.0; lat.num_nodes()];
        reference[3] = 0.0;
        assert!(relative_entropy(&mu, &reference).is_err());
    }

    #[test]
    fn useful_formula_links_entropy_and_moment() {
        // Ent(mu) = Ent_nu(mu) - c * moment(mu) for nu = e^{-c d^2} L^n
        let (g, lat) = h1_setup();
        let params = BoxNormParams::ones(2);
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-((c[0] - 0.3).powi(2) + c[1] * c[1] + 0.5 * c[2] * c[2])).exp()
        })
        .unwrap();
        let c = 0.7;
        let reference: Vec<f64> = (0..lat.num_nodes())
            .map(|i| {
                let x = lat.node_coords(i);
                let d = g.box_norm(&params, &x);
                (-c * d * d).exp()
            })
            .collect();
        let lhs = entropy(&mu);
        let moment = crate::lattice::second_moment(&mu, |x| g.box_norm(&params, x));
        let rhs = relative_entropy(&mu, &reference).unwrap() - c * moment;
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn truncated_entropy_profile_properties() {
        assert_eq!(h_m::<f64>(3, 0.0), 0.0);
        // H_m(r) <= 1 + r log r for r >= 1
        for m in [1usize, 2, 5, 10] {
            for r in [1.0f64, 1.5, 3.0, 10.0, 100.0] {
                assert!(h_m(m, r) <= 1.0 + r * r.ln() + 1e-12);
                assert!(h_m(m, r) >= 0.0);
            }
            // sandwich r log r <= H_{m+1} <= H_m on [0, 1]
            for r in [0.0f64, 1e-6, 0.01, 0.3, 0.9, 1.0] {
                let rl = if r > 0.0 { r * r.ln() } else { 0.0 };
                assert!(rl <= h_m(m + 1, r) + 1e-15);
                assert!(h_m(m + 1, r) <= h_m(m, r) + 1e-15);
            }
        }
    }

    #[test]
    fn truncated_entropy_converges_monotonically() {
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0, 1.0], &[33, 33]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat, |c| {
            (-(c[0] * c[0] + c[1] * c[1]) * 5.0).exp()
        })
        .unwrap();
        let ent = entropy(&mu);
        let mut prev = f64::INFINITY;
        for m in [1usize, 5, 10, 20, 40] {
            let tm = truncated_entropy(&mu, m).unwrap();
            assert!(tm <= prev + 1e-12);
            prev = tm;
        }
        assert!((truncated_entropy(&mu, 40).unwrap() - ent).abs() <= 1e-9);
    }

    #[test]
    fn layer_gradient_of_constant_vanishes() {
        let (g, lat) = h1_setup();
        let rho = vec![1.0; lat.num_nodes()];
        for layer in 1..=2 {
            let gr = layer_gradient(&g, &lat, &rho, layer).unwrap();
            for comp in gr {
                assert!(comp.iter().all(|v| v.abs() < 1e-13));
            }
        }
        assert!(layer_gradient(&g, &lat, &rho, 3).is_err());
    }

    #[test]
    fn h1_horizontal_gradient_of_coordinates() {
        let (g, lat) = h1_setup();
        // rho = x1: grad_G = (1, 0)
        let x1: Vec<f64> = (0..lat.num_nodes())
            .map(|i| lat.node_coords(i)[0])
            .collect();
        let gr = layer_gradient(&g, &lat, &x1, 1).unwrap();
        for idx in 0..lat.num_nodes() {
            let multi = lat.multi_index(idx);
            let interior = multi
                .iter()
                .zip(lat.counts())
                .all(|(&i, &c)| i > 0 && i + 1 < c);
            if interior {
                assert!((gr[0][idx] - 1.0).abs() < 1e-12);
                assert!(gr[1][idx].abs() < 1e-12);
            }
        }
        // rho = x3: grad_G = (-x2/2, x1/2)
        let x3: Vec<f64> = (0..lat.num_nodes())
            .map(|i| lat.node_coords(i)[2])
            .collect();
        let gr = layer_gradient(&g, &lat, &x3, 1).unwrap();
        for idx in (0..lat.num_nodes()).step_by(7) {
            let multi = lat.multi_index(idx);
            let interior = multi
                .iter()
                .zip(lat.counts())
                .all(|(&i, &c)| i > 0 && i + 1 < c);
            if interior {
                let c = lat.node_coords(idx);
                assert!((gr[0][idx] + c[1] / 2.0).abs() < 1e-10);
                assert!((gr[1][idx] - c[0] / 2.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fisher_of_uniform_vanishes_and_gaussian_matches_closed_form() {
        let g = StratifiedAlgebra::<f64>::preset("r1").unwrap();
        let lat = Arc::new(Lattice::<f64>::symmetric(&[2.0], &[257]).unwrap());
        let (uni, _) = GridMeasure::discretize(lat.clone(), |_| 1.0).unwrap();
        assert!(horizontal_fisher(&g, &uni).abs() < 1e-20);
        // Gaussian with variance sigma^2: Fisher = 1 / sigma^2
        let sigma2 = 0.16;
        let (gauss, _) =
            GridMeasure::discretize(lat, |c| (-(c[0] * c[0]) / (2.0 * sigma2)).exp()).unwrap();
        let f = horizontal_fisher(&g, &gauss);
        assert!((f - 1.0 / sigma2).abs() / (1.0 / sigma2) < 0.02, "{f}");
    }

    #[test]
    fn fisher_dilation_homogeneity() {
        // Fisher(delta_lambda # mu) = lambda^{-2} Fisher(mu) on H1
        let (g, lat) = h1_setup();
        let lambda = 1.2;
        let density = |c: &[f64]| {
            (-(4.0 * c[0] * c[0] + 4.0 * c[1] * c[1] + 2.0 * c[2] * c[2])).exp()
        };
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| density(c)).unwrap();
        // pushforward under delta_lambda has density rho(delta_{1/lambda} x) / lambda^Q
        let (mu_l, _) = GridMeasure::discretize(lat.clone(), |c| {
            let inv = g.dilate(1.0 / lambda, c).unwrap();
            density(&inv)
        })
        .unwrap();
        let f = horizontal_fisher(&g, &mu);
        let fl = horizontal_fisher(&g, &mu_l);
        assert!(
            (fl - f / (lambda * lambda)).abs() / f < 0.01,
            "{fl} vs {}",
            f / (lambda * lambda)
        );
    }

    #[test]
    fn epsilon_fisher_decomposition_and_monotonicity() {
        let (g, lat) = h1_setup();
        let (mu, _) = GridMeasure::discretize(lat, |c| {
            (-(c[0] * c[0] + 1.3 * c[1] * c[1] + 0.4 * c[2] * c[2])).exp()
        })
        .unwrap();
        let fg = horizontal_fisher(&g, &mu);
        let mut prev = fg;
        for eps in [0.25, 0.5, 1.0] {
            let fe = epsilon_fisher(&g, &mu, eps).unwrap();
            // monotone nondecreasing in eps and above the horizontal Fisher
            assert!(fe >= prev - 1e-12);
            assert!(fe >= fg - 1e-12);
            // decomposition identity: two-path evaluation agrees
            let full = epsilon_fisher_full_frame(&g, &mu, eps).unwrap();
            assert!((fe - full).abs() <= 1e-12 * (1.0 + fe.abs()));
            prev = fe;
        }
        // eps -> 0 recovers the horizontal Fisher
        let f0 = epsilon_fisher(&g, &mu, 1e-8).unwrap();
        assert!((f0 - fg).abs() <= 1e-10 * (1.0 + fg.abs()));
        assert!(epsilon_fisher(&g, &mu, 0.0).is_err());
    }

    fn interior_bump(lat: &Lattice<f64>, c: &[f64], center: &[f64], width: f64) -> f64 {
        let mut r2 = 0.0;
        for axis in 0..lat.ndim() {
            r2 += (c[axis] - center[axis]).powi(2);
        }
        let s = r2 / (width * width);
        if s < 1.0 {
            (1.0 - s).powi(3)
        } else {
            0.0
        }
    }

    #[test]
    fn first_variation_zero_field_and_divergence_free() {
        let (g, lat) = h1_setup();
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1] + 0.5 * c[2] * c[2])).exp()
        })
        .unwrap();
        let zero = HorizontalField::zeros(2, lat.num_nodes());
        assert_eq!(entropy_first_variation(&g, &mu, &zero).unwrap(), 0.0);
    }

    #[test]
    fn first_variation_rejects_boundary_support() {
        let (g, lat) = h1_setup();
        let (mu, _) = GridMeasure::discretize(lat.clone(), |_| 1.0).unwrap();
        let mut field = HorizontalField::zeros(2, lat.num_nodes());
        field.components[0][0] = 1.0; // corner node
        assert!(entropy_first_variation(&g, &mu, &field).is_err());
    }

    #[test]
    fn first_variation_matches_pushforward_difference() {
        let (g, lat) = h1_setup();
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1] + 0.4 * c[2] * c[2]) * 1.5).exp() + 1e-4
        })
        .unwrap();
        // smooth interior bump field
        let mut field = HorizontalField::zeros(2, lat.num_nodes());
        for idx in 0..lat.num_nodes() {
            let c = lat.node_coords(idx);
            let b = interior_bump(&lat, &c, &[0.2, -0.1, 0.0], 1.2);
            field.components[0][idx] = 0.8 * b;
            field.components[1][idx] = -0.5 * b;
        }
        let fv = entropy_first_variation(&g, &mu, &field).unwrap();
        let t = 1e-3;
        let fwd = pushforward_euler(&g, &mu, &field, t).unwrap();
        let bwd = pushforward_euler(&g, &mu, &field, -t).unwrap();
        let fd = (entropy(&fwd) - entropy(&bwd)) / (2.0 * t);
        // The two routes differ by a discrete chain-rule commutator of
        // order h^2; the acceptance suite runs the tight version on a fine
        // grid. Here the grid is coarse, so only the O(h^2) scale is checked.
        assert!(
            (fv - fd).abs() <= 5e-2 * fv.abs().max(fd.abs()),
            "first variation {fv} vs pushforward difference {fd}"
        );
    }
}
