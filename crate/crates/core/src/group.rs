//! Stratified Lie groups in exponential coordinates.
//!
//! A group is built once from its layer dimensions and structure constants.
//! Construction validates the algebra (antisymmetry, grading, Jacobi,
//! bracket generation), then expands the Campbell-Hausdorff series with the
//! Dynkin formula truncated at the step; nilpotency makes the truncation
//! exact. The group law and the left-translation frames are stored as
//! polynomial tables and every later operation just evaluates them.

use crate::error::{Error, Result};
use crate::poly::Poly;
use crate::scalar::Scalar;

/// Point in exponential coordinates. The identity is the origin and the
/// inverse is coordinate negation.
pub type GroupPoint<F> = Vec<F>;

/// Constants of the homogeneous box norm, one per layer with `c[0] == 1`.
#[derive(Debug, Clone)]
pub struct BoxNormParams<F> {
    pub c: Vec<F>,
}

impl<F: Scalar> BoxNormParams<F> {
    /// All layer constants equal to one.
    pub fn ones(step: usize) -> Self {
        BoxNormParams {
            c: vec![F::one(); step],
        }
    }

    pub fn new(c: Vec<F>) -> Result<Self> {
        if c.is_empty() || c[0] != F::one() {
            return Err(Error::InvalidArgument(
                "box norm requires c_1 = 1".into(),
            ));
        }
        if c.iter().any(|&v| v <= F::zero() || v > F::one()) {
            return Err(Error::InvalidArgument(
                "box norm constants must lie in (0, 1]".into(),
            ));
        }
        Ok(BoxNormParams { c })
    }
}

/// Bracket coefficient `[X_i, X_j] = sum_k c * X_k` (indices 0-based).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BracketCoeff {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub c: f64,
}

/// Validated stratified algebra with derived group law and frames.
#[derive(Debug, Clone)]
pub struct StratifiedAlgebra<F> {
    name: String,
    layer_dims: Vec<usize>,
    /// degree of each basis coordinate, 1-based values
    degree: Vec<usize>,
    dim: usize,
    homogeneous_dim: usize,
    /// dense structure constants, index [(i * n + j) * n + k]
    c: Vec<F>,
    /// sparse nonzero brackets (i, j, k, c)
    brackets: Vec<(usize, usize, usize, F)>,
    /// group law z_k(x, y); variables 0..n are x, n..2n are y
    law: Vec<Poly<F>>,
    /// frame coefficients a[j][k](x): X_j = sum_k a[j][k] d/dx_k
    frame: Vec<Vec<Poly<F>>>,
}

impl<F: Scalar> StratifiedAlgebra<F> {
    /// Build and validate a group from layer dimensions and bracket
    /// coefficients given on basis pairs.
    pub fn new(name: &str, layer_dims: &[usize], brackets: &[BracketCoeff]) -> Result<Self> {
        if layer_dims.is_empty() || layer_dims.iter().any(|&m| m == 0) {
            return Err(Error::InvalidGroup("layer dimensions must be positive".into()));
        }
        let step = layer_dims.len();
        let dim: usize = layer_dims.iter().sum();
        let mut degree = Vec::with_capacity(dim);
        for (li, &m) in layer_dims.iter().enumerate() {
            degree.extend(std::iter::repeat(li + 1).take(m));
        }
        let homogeneous_dim = layer_dims
            .iter()
            .enumerate()
            .map(|(li, &m)| (li + 1) * m)
            .sum();

        let mut c = vec![F::zero(); dim * dim * dim];
        let idx = |i: usize, j: usize, k: usize| (i * dim + j) * dim + k;
        for b in brackets {
            if b.i >= dim || b.j >= dim || b.k >= dim {
                return Err(Error::InvalidGroup(format!(
                    "bracket index out of range: [{}, {}] -> {}",
                    b.i, b.j, b.k
                )));
            }
            c[idx(b.i, b.j, b.k)] += F::of(b.c);
        }
        // fill the antisymmetric counterparts when only one orientation given
        for i in 0..dim {
            for j in (i + 1)..dim {
                for k in 0..dim {
                    let up = c[idx(i, j, k)];
                    let dn = c[idx(j, i, k)];
                    if up != F::zero() && dn == F::zero() {
                        c[idx(j, i, k)] = -up;
                    } else if dn != F::zero() && up == F::zero() {
                        c[idx(i, j, k)] = -dn;
                    }
                }
            }
        }

        let tol = F::of(1e-12);
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    let v = c[idx(i, j, k)];
                    if (v + c[idx(j, i, k)]).abs() > tol {
                        return Err(Error::InvalidGroup(format!(
                            "antisymmetry violated at [X_{}, X_{}] -> X_{}",
                            i + 1,
                            j + 1,
                            k + 1
                        )));
                    }
                    if v != F::zero() && degree[k] != degree[i] + degree[j] {
                        return Err(Error::InvalidGroup(format!(
                            "grading violated: [X_{}, X_{}] -> X_{} has degree {} != {} + {}",
                            i + 1,
                            j + 1,
                            k + 1,
                            degree[k],
                            degree[i],
                            degree[j]
                        )));
                    }
                }
            }
        }

        // Jacobi identity on all basis triples
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    for l in 0..dim {
                        let mut s = F::zero();
                        for m in 0..dim {
                            s += c[idx(i, j, m)] * c[idx(m, k, l)]
                                + c[idx(j, k, m)] * c[idx(m, i, l)]
                                + c[idx(k, i, m)] * c[idx(m, j, l)];
                        }
                        if s.abs() > tol {
                            return Err(Error::InvalidGroup(format!(
                                "Jacobi identity fails on triple ({}, {}, {})",
                                i + 1,
                                j + 1,
                                k + 1
                            )));
                        }
                    }
                }
            }
        }

        // First layer must bracket-generate every higher layer.
        let m1 = layer_dims[0];
        let mut reached: Vec<Vec<F>> = (0..m1)
            .map(|i| {
                let mut e = vec![F::zero(); dim];
                e[i] = F::one();
                e
            })
            .collect();
        for li in 1..step {
            let mut produced: Vec<Vec<F>> = Vec::new();
            for a in 0..m1 {
                for w in &reached {
                    let mut out = vec![F::zero(); dim];
                    for (j, &wj) in w.iter().enumerate() {
                        if wj == F::zero() {
                            continue;
                        }
                        for k in 0..dim {
                            out[k] += wj * c[idx(a, j, k)];
                        }
                    }
                    produced.push(out);
                }
            }
            let offset: usize = layer_dims[..li].iter().sum();
            let width = layer_dims[li];
            let rank = rank_of(&produced, offset, width, tol);
            if rank < width {
                return Err(Error::InvalidGroup(format!(
                    "first layer does not bracket-generate layer {} (rank {} < {})",
                    li + 1,
                    rank,
                    width
                )));
            }
            produced.retain(|v| v.iter().any(|&x| x != F::zero()));
            reached = produced;
        }

        let brackets_sparse: Vec<(usize, usize, usize, F)> = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .flat_map(|(i, j)| (0..dim).map(move |k| (i, j, k)))
            .filter_map(|(i, j, k)| {
                let v = c[idx(i, j, k)];
                (v != F::zero()).then_some((i, j, k, v))
            })
            .collect();

        let law = bch_law(dim, step, &brackets_sparse);
        // a[j][k](x) = d z_k / d y_j at y = 0
        let frame = (0..dim)
            .map(|j| {
                (0..dim)
                    .map(|k| law[k].diff(dim + j).truncate_vars(dim))
                    .collect()
            })
            .collect();

        Ok(StratifiedAlgebra {
            name: name.to_string(),
            layer_dims: layer_dims.to_vec(),
            degree,
            dim,
            homogeneous_dim,
            c,
            brackets: brackets_sparse,
            law,
            frame,
        })
    }

    /// Named presets: "r1", "r2", "h1", "h1xr".
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "r1" => Self::new("r1", &[1], &[]),
            "r2" => Self::new("r2", &[2], &[]),
            "h1" => Self::new(
                "h1",
                &[2, 1],
                &[BracketCoeff { i: 0, j: 1, k: 2, c: 1.0 }],
            ),
            "h1xr" => Self::new(
                "h1xr",
                &[3, 1],
                &[BracketCoeff { i: 0, j: 1, k: 3, c: 1.0 }],
            ),
            other => Err(Error::InvalidGroup(format!("unknown preset '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn horizontal_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn homogeneous_dim(&self) -> usize {
        self.homogeneous_dim
    }

    /// Degree (layer index, 1-based) of coordinate `i`.
    pub fn coord_degree(&self, i: usize) -> usize {
        self.degree[i]
    }

    /// Basis index range of layer `layer` (1-based layer).
    pub fn layer_range(&self, layer: usize) -> Result<std::ops::Range<usize>> {
        if layer == 0 || layer > self.step() {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range 1..={}",
                layer,
                self.step()
            )));
        }
        let lo: usize = self.layer_dims[..layer - 1].iter().sum();
        Ok(lo..lo + self.layer_dims[layer - 1])
    }

    pub fn is_commutative(&self) -> bool {
        self.step() == 1
    }

    /// Group product by the truncated Campbell-Hausdorff law.
    pub fn multiply(&self, x: &[F], y: &[F]) -> GroupPoint<F> {
        let mut out = vec![F::zero(); self.dim];
        self.multiply_into(x, y, &mut out);
        out
    }

    pub fn multiply_into(&self, x: &[F], y: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        let mut vars = Vec::with_capacity(2 * self.dim);
        vars.extend_from_slice(x);
        vars.extend_from_slice(y);
        for k in 0..self.dim {
            out[k] = self.law[k].eval(&vars);
        }
    }

    pub fn inverse(&self, x: &[F]) -> GroupPoint<F> {
        x.iter().map(|&v| -v).collect()
    }

    /// `y^{-1} x`, the left-quotient used by distances.
    pub fn left_quotient(&self, y: &[F], x: &[F]) -> GroupPoint<F> {
        let yi = self.inverse(y);
        self.multiply(&yi, x)
    }

    /// Anisotropic dilation: coordinate `i` scales by `lambda^{d(i)}`.
    pub fn dilate(&self, lambda: F, x: &[F]) -> Result<GroupPoint<F>> {
        if lambda < F::zero() {
            return Err(Error::InvalidArgument("dilation requires lambda >= 0".into()));
        }
        Ok(x.iter()
            .enumerate()
            .map(|(i, &v)| v * lambda.powi(self.degree[i] as i32))
            .collect())
    }

    /// Jacobian determinant of the dilation, equal to `lambda^Q`.
    pub fn dilation_jacobian(&self, lambda: F) -> F {
        lambda.powi(self.homogeneous_dim as i32)
    }

    /// Homogeneous box norm of `x`.
    pub fn box_norm(&self, params: &BoxNormParams<F>, x: &[F]) -> F {
        let mut best = F::zero();
        for layer in 1..=self.step() {
            let range = self.layer_range(layer).expect("layer in range");
            let mut s = F::zero();
            for i in range {
                s += x[i] * x[i];
            }
            let norm = s.sqrt();
            let v = params.c[layer - 1] * norm.powf(F::one() / F::of_usize(layer));
            if v > best {
                best = v;
            }
        }
        best
    }

    /// Left-invariant homogeneous distance `d_inf(x, y) = |y^{-1} x|_box`.
    pub fn box_distance(&self, params: &BoxNormParams<F>, x: &[F], y: &[F]) -> F {
        self.box_norm(params, &self.left_quotient(y, x))
    }

    /// Coefficient rows of the first-layer frame at `x`: row `j` holds the
    /// coordinates of `X_j(x)`.
    pub fn horizontal_frame(&self, x: &[F]) -> Vec<Vec<F>> {
        (0..self.horizontal_dim())
            .map(|j| self.frame_row(j, x))
            .collect()
    }

    /// Coefficient rows for the fields of layer `layer` (1-based).
    pub fn layer_frame(&self, x: &[F], layer: usize) -> Result<Vec<Vec<F>>> {
        let range = self.layer_range(layer)?;
        Ok(range.map(|j| self.frame_row(j, x)).collect())
    }

    /// Coordinates of the basis field `X_j` at `x`.
    pub fn frame_row(&self, j: usize, x: &[F]) -> Vec<F> {
        (0..self.dim).map(|k| self.frame[j][k].eval(x)).collect()
    }

    /// Evaluate a single frame coefficient `a_{jk}(x)`.
    pub fn frame_coeff(&self, j: usize, k: usize, x: &[F]) -> F {
        self.frame[j][k].eval(x)
    }

    /// Solve `J(x) alpha = v` where the columns of `J` are the frame fields.
    /// The graded triangular structure makes forward substitution exact.
    pub fn frame_coordinates(&self, x: &[F], v: &[F]) -> Vec<F> {
        let n = self.dim;
        let mut alpha = vec![F::zero(); n];
        for k in 0..n {
            // J_{k j} = a_{j k}(x), nonzero only for d(j) <= d(k), with
            // J_{k k} = 1 and J_{k j} = 0 for d(j) = d(k), j != k.
            let mut s = v[k];
            for j in 0..n {
                if self.degree[j] < self.degree[k] {
                    s -= self.frame[j][k].eval(x) * alpha[j];
                }
            }
            alpha[k] = s;
        }
        alpha
    }

    /// Sparse nonzero structure constants as (i, j, k, c).
    pub fn sparse_brackets(&self) -> &[(usize, usize, usize, F)] {
        &self.brackets
    }

    /// Structure constant `c^k_{ij}`.
    pub fn structure_constant(&self, i: usize, j: usize, k: usize) -> F {
        self.c[(i * self.dim + j) * self.dim + k]
    }
}

fn rank_of<F: Scalar>(rows: &[Vec<F>], offset: usize, width: usize, tol: F) -> usize {
    let mut m: Vec<Vec<F>> = rows
        .iter()
        .map(|r| r[offset..offset + width].to_vec())
        .collect();
    let mut rank = 0;
    for col in 0..width {
        let pivot = (rank..m.len()).max_by(|&a, &b| {
            m[a][col]
                .abs()
                .partial_cmp(&m[b][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let Some(p) = pivot else { break };
        if m[p][col].abs() <= tol {
            continue;
        }
        m.swap(rank, p);
        for r in (rank + 1)..m.len() {
            let f = m[r][col] / m[rank][col];
            for cc in col..width {
                let sub = f * m[rank][cc];
                m[r][cc] = m[r][cc] - sub;
            }
        }
        rank += 1;
    }
    rank
}

/// Lie algebra element with polynomial coefficients, one per basis vector.
type PolyVec<F> = Vec<Poly<F>>;

fn bracket<F: Scalar>(
    dim: usize,
    brackets: &[(usize, usize, usize, F)],
    u: &PolyVec<F>,
    v: &PolyVec<F>,
) -> PolyVec<F> {
    let mut out: PolyVec<F> = vec![Poly::zero(); dim];
    for &(i, j, k, c) in brackets {
        if u[i].is_zero() || v[j].is_zero() {
            continue;
        }
        out[k] = out[k].add_scaled(&u[i].mul(&v[j]), c);
    }
    out
}

/// Dynkin expansion of log(exp x * exp y) truncated at the step. Exact for
/// nilpotent algebras.
fn bch_law<F: Scalar>(
    dim: usize,
    step: usize,
    brackets: &[(usize, usize, usize, F)],
) -> Vec<Poly<F>> {
    let x: PolyVec<F> = (0..dim).map(Poly::var).collect();
    let y: PolyVec<F> = (0..dim).map(|k| Poly::var(dim + k)).collect();

    let mut z: PolyVec<F> = vec![Poly::zero(); dim];
    // sequences of (p_i, q_i), p_i + q_i >= 1, total weight <= step
    let mut seq: Vec<(usize, usize)> = Vec::new();
    expand_sequences(dim, step, brackets, &x, &y, &mut seq, 0, &mut z);
    z
}

fn expand_sequences<F: Scalar>(
    dim: usize,
    step: usize,
    brackets: &[(usize, usize, usize, F)],
    x: &PolyVec<F>,
    y: &PolyVec<F>,
    seq: &mut Vec<(usize, usize)>,
    weight: usize,
    acc: &mut PolyVec<F>,
) {
    if !seq.is_empty() {
        let term = dynkin_term(dim, brackets, x, y, seq);
        if let Some(term) = term {
            let n = seq.len();
            let fact: f64 = seq
                .iter()
                .map(|&(p, q)| factorial(p) * factorial(q))
                .product();
            let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
            let coeff = F::of(sign / (n as f64 * weight as f64 * fact));
            for k in 0..dim {
                acc[k] = acc[k].add_scaled(&term[k], coeff);
            }
        }
    }
    for w in 1..=(step - weight) {
        for p in 0..=w {
            let q = w - p;
            seq.push((p, q));
            expand_sequences(dim, step, brackets, x, y, seq, weight + w, acc);
            seq.pop();
        }
    }
}

/// Right-nested bracket of the word x^{p_1} y^{q_1} ... x^{p_n} y^{q_n}.
/// Returns None when the word is structurally zero.
fn dynkin_term<F: Scalar>(
    dim: usize,
    brackets: &[(usize, usize, usize, F)],
    x: &PolyVec<F>,
    y: &PolyVec<F>,
    seq: &[(usize, usize)],
) -> Option<PolyVec<F>> {
    let mut letters: Vec<&PolyVec<F>> = Vec::new();
    for &(p, q) in seq {
        letters.extend(std::iter::repeat(x).take(p));
        letters.extend(std::iter::repeat(y).take(q));
    }
    debug_assert!(!letters.is_empty());
    if letters.len() == 1 {
        return Some(letters[0].clone());
    }
    // [w1, [w2, [... [w_{m-1}, w_m] ...]]]
    let mut acc = bracket(
        dim,
        brackets,
        letters[letters.len() - 2],
        letters[letters.len() - 1],
    );
    if acc.iter().all(Poly::is_zero) {
        return None;
    }
    for i in (0..letters.len() - 2).rev() {
        acc = bracket(dim, brackets, letters[i], &acc);
        if acc.iter().all(Poly::is_zero) {
            return None;
        }
    }
    Some(acc)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn h1() -> StratifiedAlgebra<f64> {
        StratifiedAlgebra::preset("h1").unwrap()
    }

    #[test]
    fn h1_preset_dimensions() {
        let g = h1();
        assert_eq!(g.step(), 2);
        assert_eq!(g.dim(), 3);
        assert_eq!(g.homogeneous_dim(), 4);
    }

    #[test]
    fn r2_preset_dimensions() {
        let g = StratifiedAlgebra::<f64>::preset("r2").unwrap();
        assert_eq!(g.step(), 1);
        assert_eq!(g.homogeneous_dim(), 2);
    }

    #[test]
    fn h1xr_preset_dimensions() {
        let g = StratifiedAlgebra::<f64>::preset("h1xr").unwrap();
        assert_eq!(g.dim(), 4);
        assert_eq!(g.homogeneous_dim(), 5);
        assert_eq!(g.horizontal_dim(), 3);
    }

    #[test]
    fn antisymmetry_violation_rejected() {
        // c^3_{12} = c^3_{21} = 1 breaks antisymmetry
        let err = StratifiedAlgebra::<f64>::new(
            "bad",
            &[2, 1],
            &[
                BracketCoeff { i: 0, j: 1, k: 2, c: 1.0 },
                BracketCoeff { i: 1, j: 0, k: 2, c: 1.0 },
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("antisymmetry"));
    }

    #[test]
    fn grading_violation_rejected() {
        // bracket of two first-layer fields landing in the first layer
        let err = StratifiedAlgebra::<f64>::new(
            "bad",
            &[2, 1],
            &[BracketCoeff { i: 0, j: 1, k: 1, c: 1.0 }],
        )
        .unwrap_err();
        assert!(err.to_string().contains("grading"));
    }

    #[test]
    fn non_generating_first_layer_rejected() {
        // two layers, no brackets at all
        let err =
            StratifiedAlgebra::<f64>::new("bad", &[2, 1], &[]).unwrap_err();
        assert!(err.to_string().contains("bracket-generate"));
    }

    #[test]
    fn h1_identity_and_inverse() {
        let g = h1();
        let e = vec![0.0, 0.0, 0.0];
        let p = vec![0.3, -1.2, 0.7];
        assert_eq!(g.multiply(&e, &p), p);
        assert_eq!(g.multiply(&p, &e), p);
        let q = g.multiply(&p, &g.inverse(&p));
        for v in q {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn h1_bch_product_example() {
        let g = h1();
        let z = g.multiply(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert_relative_eq!(z[0], 1.0);
        assert_relative_eq!(z[1], 1.0);
        assert_relative_eq!(z[2], 0.5);
    }

    #[test]
    fn h1_dilation_scales_by_degree() {
        let g = h1();
        let z = g.dilate(2.0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(z, vec![2.0, 2.0, 4.0]);
        let id = g.dilate(1.0, &[0.4, -0.2, 1.1]).unwrap();
        assert_eq!(id, vec![0.4, -0.2, 1.1]);
        assert!(g.dilate(-1.0, &[0.0, 0.0, 0.0]).is_err());
        assert_eq!(g.dilation_jacobian(2.0), 16.0);
    }

    #[test]
    fn h1_box_distances() {
        let g = h1();
        let p = BoxNormParams::ones(2);
        assert_relative_eq!(g.box_distance(&p, &[3.0, 4.0, 0.0], &[0.0; 3]), 5.0);
        assert_relative_eq!(g.box_distance(&p, &[0.0, 0.0, 4.0], &[0.0; 3]), 2.0);
    }

    #[test]
    fn frame_at_origin_is_standard_basis() {
        for name in ["r2", "h1", "h1xr"] {
            let g = StratifiedAlgebra::<f64>::preset(name).unwrap();
            let rows = g.horizontal_frame(&vec![0.0; g.dim()]);
            for (j, row) in rows.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    assert_eq!(v, if j == k { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn h1_frame_matches_symbolic_differential() {
        let g = h1();
        let (a, b) = (0.7, -1.3);
        let rows = g.horizontal_frame(&[a, b, 0.25]);
        assert_eq!(rows[0], vec![1.0, 0.0, -b / 2.0]);
        assert_eq!(rows[1], vec![0.0, 1.0, a / 2.0]);
    }

    #[test]
    fn h1_layer_two_frame_is_vertical() {
        let g = h1();
        let rows = g.layer_frame(&[0.9, 0.1, -2.0], 2).unwrap();
        assert_eq!(rows, vec![vec![0.0, 0.0, 1.0]]);
        assert!(g.layer_frame(&[0.0; 3], 3).is_err());
        let r2 = StratifiedAlgebra::<f64>::preset("r2").unwrap();
        assert!(r2.layer_frame(&[0.0; 2], 2).is_err());
    }

    #[test]
    fn layer_one_frame_equals_horizontal_frame() {
        let g = StratifiedAlgebra::<f64>::preset("h1xr").unwrap();
        let x = vec![0.2, -0.8, 1.4, 0.3];
        assert_eq!(g.layer_frame(&x, 1).unwrap(), g.horizontal_frame(&x));
    }

    #[test]
    fn engel_step3_group_law_is_associative() {
        // Engel group: [X1,X2]=X3, [X1,X3]=X4
        let g = StratifiedAlgebra::<f64>::new(
            "engel",
            &[2, 1, 1],
            &[
                BracketCoeff { i: 0, j: 1, k: 2, c: 1.0 },
                BracketCoeff { i: 0, j: 2, k: 3, c: 1.0 },
            ],
        )
        .unwrap();
        assert_eq!(g.homogeneous_dim(), 2 + 2 + 3);
        let x = vec![0.3, 0.7, -0.2, 0.9];
        let y = vec![-1.1, 0.4, 0.6, 0.05];
        let z = vec![0.8, -0.3, 0.1, -0.7];
        let lhs = g.multiply(&g.multiply(&x, &y), &z);
        let rhs = g.multiply(&x, &g.multiply(&y, &z));
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn frame_coordinates_invert_frame_matrix() {
        let g = StratifiedAlgebra::<f64>::new(
            "engel",
            &[2, 1, 1],
            &[
                BracketCoeff { i: 0, j: 1, k: 2, c: 1.0 },
                BracketCoeff { i: 0, j: 2, k: 3, c: 1.0 },
            ],
        )
        .unwrap();
        let x = vec![0.4, -0.9, 0.3, 1.2];
        let v = vec![0.7, 0.2, -1.5, 0.4];
        let alpha = g.frame_coordinates(&x, &v);
        // reassemble sum_j alpha_j X_j(x)
        let mut w = vec![0.0; 4];
        for j in 0..4 {
            let row = g.frame_row(j, &x);
            for k in 0..4 {
                w[k] += alpha[j] * row[k];
            }
        }
        for (a, b) in w.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    fn point_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn prop_h1_associativity(x in point_strategy(), y in point_strategy(), z in point_strategy()) {
            let g = h1();
            let lhs = g.multiply(&g.multiply(&x, &y), &z);
            let rhs = g.multiply(&x, &g.multiply(&y, &z));
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_h1_dilation_automorphism(x in point_strategy(), y in point_strategy(), l in 0.0f64..3.0) {
            let g = h1();
            let lhs = g.dilate(l, &g.multiply(&x, &y)).unwrap();
            let rhs = g.multiply(&g.dilate(l, &x).unwrap(), &g.dilate(l, &y).unwrap());
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_h1_box_left_invariance(x in point_strategy(), y in point_strategy(), z in point_strategy()) {
            let g = h1();
            let p = BoxNormParams::ones(2);
            let zx = g.multiply(&z, &x);
            let zy = g.multiply(&z, &y);
            prop_assert!((g.box_distance(&p, &zx, &zy) - g.box_distance(&p, &x, &y)).abs() <= 1e-12);
        }

        #[test]
        fn prop_h1_box_homogeneity(x in point_strategy(), y in point_strategy(), l in 0.01f64..4.0) {
            let g = h1();
            let p = BoxNormParams::ones(2);
            let dx = g.dilate(l, &x).unwrap();
            let dy = g.dilate(l, &y).unwrap();
            let lhs = g.box_distance(&p, &dx, &dy);
            let rhs = l * g.box_distance(&p, &x, &y);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn prop_h1_frame_left_invariance(x in point_strategy()) {
            // X_j(x) must equal d(l_x) applied to X_j(0) = e_j
            let g = h1();
            let rows = g.horizontal_frame(&x);
            for (j, row) in rows.iter().enumerate() {
                // differential of l_x at 0 in direction e_j: d/dt x * (t e_j)
                let t = 1e-6;
                let mut dir = vec![0.0; 3];
                dir[j] = t;
                let fwd = g.multiply(&x, &dir);
                for k in 0..3 {
                    let fd = (fwd[k] - x[k]) / t;
                    // law is polynomial of degree <= 2 in t, so the error is O(t)
                    prop_assert!((fd - row[k]).abs() <= 1e-5);
                }
            }
        }
    }
}
