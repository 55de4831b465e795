//! Uniform box lattice in exponential coordinates: measures, quadrature,
//! group convolution and mollification in space and time.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::functionals::DiagnosticsRecord;
use crate::group::StratifiedAlgebra;
use crate::scalar::{tree_sum, Scalar};

/// Node-centered uniform lattice on a box. Node index order is row-major
/// over coordinates with the last coordinate fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice<F> {
    lo: Vec<F>,
    hi: Vec<F>,
    counts: Vec<usize>,
    spacing: Vec<F>,
    strides: Vec<usize>,
    cell_vol: F,
}

/// Serializable lattice metadata (JSON sidecar).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LatticeMeta {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl<F: Scalar> Lattice<F> {
    pub fn new(lo: &[F], hi: &[F], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() || lo.is_empty() {
            return Err(Error::InvalidLattice("inconsistent axis counts".into()));
        }
        if counts.iter().any(|&c| c < 3) {
            return Err(Error::InvalidLattice("need at least 3 nodes per axis".into()));
        }
        if lo.iter().zip(hi).any(|(&a, &b)| a >= b) {
            return Err(Error::InvalidLattice("lower bound must be below upper".into()));
        }
        let spacing: Vec<F> = lo
            .iter()
            .zip(hi)
            .zip(counts)
            .map(|((&a, &b), &c)| (b - a) / F::of_usize(c - 1))
            .collect();
        let mut strides = vec![1usize; counts.len()];
        for axis in (0..counts.len() - 1).rev() {
            strides[axis] = strides[axis + 1] * counts[axis + 1];
        }
        let cell_vol = spacing.iter().fold(F::one(), |acc, &h| acc * h);
        Ok(Lattice {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            counts: counts.to_vec(),
            spacing,
            strides,
            cell_vol,
        })
    }

    /// Box symmetric about the origin with odd node counts, so the origin is
    /// a node and coordinate negation maps nodes to nodes.
    pub fn symmetric(half_widths: &[F], counts: &[usize]) -> Result<Self> {
        if counts.iter().any(|&c| c % 2 == 0) {
            return Err(Error::InvalidLattice(
                "symmetric lattice needs odd node counts".into(),
            ));
        }
        let lo: Vec<F> = half_widths.iter().map(|&w| -w).collect();
        Self::new(&lo, half_widths, counts)
    }

    pub fn ndim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn spacing(&self) -> &[F] {
        &self.spacing
    }

    pub fn lo(&self) -> &[F] {
        &self.lo
    }

    pub fn hi(&self) -> &[F] {
        &self.hi
    }

    pub fn cell_volume(&self) -> F {
        self.cell_vol
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.strides)
            .map(|(&i, &s)| i * s)
            .sum()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.ndim()];
        for axis in 0..self.ndim() {
            out[axis] = idx / self.strides[axis];
            idx %= self.strides[axis];
        }
        out
    }

    pub fn node_coords(&self, idx: usize) -> Vec<F> {
        let mut out = vec![F::zero(); self.ndim()];
        self.coords_into(idx, &mut out);
        out
    }

    pub fn coords_into(&self, mut idx: usize, out: &mut [F]) {
        for axis in 0..self.ndim() {
            let i = idx / self.strides[axis];
            idx %= self.strides[axis];
            out[axis] = self.lo[axis] + F::of_usize(i) * self.spacing[axis];
        }
    }

    pub fn contains(&self, p: &[F]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&x, (&a, &b))| x >= a && x <= b)
    }

    /// Index of the node nearest to `p`.
    pub fn nearest_node(&self, p: &[F]) -> Result<usize> {
        if !self.contains(p) {
            return Err(Error::OutOfDomain(format!("{p:?}")));
        }
        let mut idx = 0;
        for axis in 0..self.ndim() {
            let u = ((p[axis] - self.lo[axis]) / self.spacing[axis])
                .round()
                .to_f64_lossy() as usize;
            idx += u.min(self.counts[axis] - 1) * self.strides[axis];
        }
        Ok(idx)
    }

    /// Index of the origin node (requires a symmetric lattice).
    pub fn origin_index(&self) -> usize {
        let multi: Vec<usize> = self.counts.iter().map(|&c| c / 2).collect();
        self.index(&multi)
    }

    /// Multilinear interpolation of a nodal field; zero outside the box.
    pub fn interpolate(&self, field: &[F], p: &[F]) -> F {
        let n = self.ndim();
        debug_assert_eq!(field.len(), self.num_nodes());
        let mut base = [0usize; 8];
        let mut frac = [F::zero(); 8];
        debug_assert!(n <= 8);
        for axis in 0..n {
            let u = (p[axis] - self.lo[axis]) / self.spacing[axis];
            let uf = u.floor();
            let i = uf.to_f64_lossy() as i64;
            // cells fully outside contribute nothing
            if i < -1 || i >= self.counts[axis] as i64 {
                return F::zero();
            }
            base[axis] = i.max(-1) as usize; // adjusted per-corner below
            frac[axis] = u - uf;
            // store the signed base via a parallel check in the corner loop
            if i == -1 {
                base[axis] = usize::MAX; // sentinel: only the upper corner exists
            } else {
                base[axis] = i as usize;
            }
        }
        let mut acc = F::zero();
        for corner in 0..(1usize << n) {
            let mut w = F::one();
            let mut idx = 0usize;
            let mut ok = true;
            for axis in 0..n {
                let upper = (corner >> axis) & 1 == 1;
                let (node, weight) = if base[axis] == usize::MAX {
                    if upper {
                        (0usize, frac[axis])
                    } else {
                        ok = false;
                        break;
                    }
                } else {
                    let b = base[axis];
                    if upper {
                        if b + 1 >= self.counts[axis] {
                            ok = false;
                            break;
                        }
                        (b + 1, frac[axis])
                    } else {
                        (b, F::one() - frac[axis])
                    }
                };
                w = w * weight;
                idx += node * self.strides[axis];
            }
            if ok && w != F::zero() {
                acc += w * field[idx];
            }
        }
        acc
    }

    pub fn meta(&self) -> LatticeMeta {
        LatticeMeta {
            lo: self.lo.iter().map(|v| v.to_f64_lossy()).collect(),
            hi: self.hi.iter().map(|v| v.to_f64_lossy()).collect(),
            counts: self.counts.clone(),
        }
    }

    pub fn from_meta(meta: &LatticeMeta) -> Result<Self> {
        let lo: Vec<F> = meta.lo.iter().map(|&v| F::of(v)).collect();
        let hi: Vec<F> = meta.hi.iter().map(|&v| F::of(v)).collect();
        Self::new(&lo, &hi, &meta.counts)
    }
}

/// Nonnegative density on a lattice, normalized to unit mass.
#[derive(Debug, Clone)]
pub struct GridMeasure<F> {
    lattice: Arc<Lattice<F>>,
    rho: Vec<F>,
}

impl<F: Scalar> GridMeasure<F> {
    /// Wrap nodal values, validating nonnegativity and normalizing to unit
    /// mass. Returns the measure and the normalization factor applied.
    pub fn from_values(lattice: Arc<Lattice<F>>, mut rho: Vec<F>) -> Result<(Self, F)> {
        if rho.len() != lattice.num_nodes() {
            return Err(Error::InvalidMeasure(format!(
                "expected {} nodal values, got {}",
                lattice.num_nodes(),
                rho.len()
            )));
        }
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite density value".into()));
        }
        if rho.iter().any(|&v| v < F::zero()) {
            return Err(Error::InvalidMeasure("negative density value".into()));
        }
        let mass = tree_sum(&rho) * lattice.cell_volume();
        if mass <= F::zero() {
            return Err(Error::InvalidMeasure("density has zero mass".into()));
        }
        let factor = F::one() / mass;
        for v in &mut rho {
            *v *= factor;
        }
        Ok((GridMeasure { lattice, rho }, factor))
    }

    /// Sample a density function at the nodes and normalize.
    pub fn discretize(
        lattice: Arc<Lattice<F>>,
        f: impl Fn(&[F]) -> F,
    ) -> Result<(Self, F)> {
        let n = lattice.num_nodes();
        let mut rho = Vec::with_capacity(n);
        let mut coords = vec![F::zero(); lattice.ndim()];
        for idx in 0..n {
            lattice.coords_into(idx, &mut coords);
            let v = f(&coords);
            if v < F::zero() {
                return Err(Error::InvalidMeasure(format!(
                    "density function negative at {coords:?}"
                )));
            }
            rho.push(v);
        }
        Self::from_values(lattice, rho)
    }

    pub fn lattice(&self) -> &Arc<Lattice<F>> {
        &self.lattice
    }

    pub fn density(&self) -> &[F] {
        &self.rho
    }

    pub fn mass(&self) -> F {
        tree_sum(&self.rho) * self.lattice.cell_volume()
    }

    pub fn min_density(&self) -> F {
        self.rho.iter().fold(F::infinity(), |a, &b| a.min(b))
    }

    pub fn max_density(&self) -> F {
        self.rho.iter().fold(F::zero(), |a, &b| a.max(b))
    }

    /// Write the density as one value per line, row-major node order, plus a
    /// JSON lattice sidecar next to it.
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.rho {
            writeln!(out, "{:.17e}", v.to_f64_lossy())?;
        }
        out.flush()?;
        let sidecar = path.with_extension("lattice.json");
        let meta = serde_json::to_string_pretty(&self.lattice.meta()).expect("serialize");
        std::fs::write(sidecar, meta)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<(Self, F)> {
        let sidecar = path.with_extension("lattice.json");
        let meta: LatticeMeta = serde_json::from_str(
            &std::fs::read_to_string(&sidecar)
                .map_err(|e| Error::InvalidMeasure(format!("sidecar: {e}")))?,
        )
        .map_err(|e| Error::InvalidMeasure(format!("sidecar: {e}")))?;
        let lattice = Arc::new(Lattice::from_meta(&meta)?);
        let file = std::fs::File::open(path)
            .map_err(|e| Error::InvalidMeasure(format!("csv: {e}")))?;
        let mut rho = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::InvalidMeasure(format!("csv: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|e| Error::InvalidMeasure(format!("csv value: {e}")))?;
            rho.push(F::of(v));
        }
        Self::from_values(lattice, rho)
    }
}

/// Time-indexed sequence of measures with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct FlowTrace<F> {
    pub times: Vec<F>,
    pub measures: Vec<GridMeasure<F>>,
    pub diagnostics: Vec<DiagnosticsRecord<F>>,
}

impl<F: Scalar> FlowTrace<F> {
    pub fn new(times: Vec<F>, measures: Vec<GridMeasure<F>>) -> Result<Self> {
        if times.len() != measures.len() || times.is_empty() {
            return Err(Error::InvalidArgument(
                "trace needs one measure per time".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "trace times must be strictly increasing".into(),
            ));
        }
        let lat = measures[0].lattice().clone();
        if measures.iter().any(|m| !Arc::ptr_eq(m.lattice(), &lat) && **m.lattice() != *lat) {
            return Err(Error::InvalidArgument(
                "all trace measures must share one lattice".into(),
            ));
        }
        Ok(FlowTrace {
            times,
            measures,
            diagnostics: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn lattice(&self) -> &Arc<Lattice<F>> {
        self.measures[0].lattice()
    }

    /// Uniform step of the time grid, failing when the grid is not uniform.
    pub fn uniform_dt(&self) -> Result<F> {
        if self.len() < 2 {
            return Err(Error::InvalidArgument("trace too short".into()));
        }
        let dt = self.times[1] - self.times[0];
        let tol = F::of(1e-9) * dt.abs();
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > tol {
                return Err(Error::InvalidArgument("trace time grid not uniform".into()));
            }
        }
        Ok(dt)
    }
}

/// Group convolution `(f * k)(x) = sum_y f(y) k(y^{-1} x) vol`, evaluated by
/// summing over the kernel support and interpolating `f` at the group
/// translates. Contributions from outside the box are zero.
pub fn group_convolve<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
    f: &[F],
    kernel: &[F],
    support_radius: usize,
) -> Result<Vec<F>> {
    let n = lattice.ndim();
    if n != group.dim() {
        return Err(Error::InvalidArgument("lattice/group dimension mismatch".into()));
    }
    if kernel.len() != lattice.num_nodes() || f.len() != lattice.num_nodes() {
        return Err(Error::InvalidArgument("field size mismatch".into()));
    }
    for (axis, &c) in lattice.counts().iter().enumerate() {
        if 2 * support_radius + 1 > c {
            return Err(Error::InvalidArgument(format!(
                "kernel support exceeds half the box on axis {axis}"
            )));
        }
    }
    // collect kernel support points around the origin node
    let origin = lattice.multi_index(lattice.origin_index());
    let mut support: Vec<(Vec<F>, F)> = Vec::new();
    let r = support_radius as i64;
    let mut offsets = vec![-r; n];
    'outer: loop {
        let mut multi = Vec::with_capacity(n);
        let mut inside = true;
        for axis in 0..n {
            let i = origin[axis] as i64 + offsets[axis];
            if i < 0 || i >= lattice.counts()[axis] as i64 {
                inside = false;
                break;
            }
            multi.push(i as usize);
        }
        if inside {
            let idx = lattice.index(&multi);
            if kernel[idx] != F::zero() {
                support.push((lattice.node_coords(idx), kernel[idx]));
            }
        }
        for axis in (0..n).rev() {
            offsets[axis] += 1;
            if offsets[axis] <= r {
                continue 'outer;
            }
            offsets[axis] = -r;
        }
        break;
    }

    let vol = lattice.cell_volume();
    let mut out = vec![F::zero(); lattice.num_nodes()];
    let mut x = vec![F::zero(); n];
    let mut zinv = vec![F::zero(); n];
    let mut y = vec![F::zero(); n];
    for idx in 0..lattice.num_nodes() {
        lattice.coords_into(idx, &mut x);
        let mut acc = F::zero();
        for (z, kz) in &support {
            for (t, &v) in zinv.iter_mut().zip(z.iter()) {
                *t = -v;
            }
            group.multiply_into(&x, &zinv, &mut y);
            let fv = lattice.interpolate(f, &y);
            acc += fv * *kz;
        }
        out[idx] = acc * vol;
    }
    Ok(out)
}

/// Kernel-left group convolution `sum_y k(x y^{-1}) f(y) vol`, i.e. a
/// superposition of left translates of `f`. This is the orientation used by
/// the spatial mollifier; on commutative groups it coincides with
/// `group_convolve`.
fn convolve_left_translates<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
    f: &[F],
    quad: &[(Vec<F>, F)],
) -> Vec<F> {
    let n = lattice.ndim();
    let mut out = vec![F::zero(); lattice.num_nodes()];
    let mut x = vec![F::zero(); n];
    let mut zinv = vec![F::zero(); n];
    let mut y = vec![F::zero(); n];
    for idx in 0..lattice.num_nodes() {
        lattice.coords_into(idx, &mut x);
        let mut acc = F::zero();
        for (z, w) in quad {
            for (t, &v) in zinv.iter_mut().zip(z.iter()) {
                *t = -v;
            }
            group.multiply_into(&zinv, &x, &mut y);
            acc += lattice.interpolate(f, &y) * *w;
        }
        out[idx] = acc;
    }
    out
}

/// Quadrature points and normalized weights for the mollifier
/// `eta_k(x) = k^Q eta(delta_k x)`, with `eta` the tensor bump
/// `prod (1 - s_i^2)^2` on the unit box.
pub fn mollifier_quadrature<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    bandwidth: usize,
    points_per_axis: usize,
) -> Vec<(Vec<F>, F)> {
    let n = group.dim();
    let m = points_per_axis;
    let k_inv = F::one() / F::of_usize(bandwidth);
    // tensor grid on the open unit box, midpoint rule
    let mut quad: Vec<(Vec<F>, F)> = Vec::new();
    let mut multi = vec![0usize; n];
    loop {
        let mut s = vec![F::zero(); n];
        let mut w = F::one();
        for axis in 0..n {
            let u = (F::of_usize(multi[axis]) + F::of(0.5)) / F::of_usize(m);
            let si = u * F::of(2.0) - F::one();
            s[axis] = si;
            let b = F::one() - si * si;
            w = w * b * b;
        }
        if w > F::zero() {
            // z = delta_{1/k}(s)
            let z = group.dilate(k_inv, &s).expect("dilate");
            quad.push((z, w));
        }
        let mut axis = n;
        loop {
            if axis == 0 {
                let total = tree_sum(&quad.iter().map(|(_, w)| *w).collect::<Vec<_>>());
                for (_, w) in &mut quad {
                    *w /= total;
                }
                return quad;
            }
            axis -= 1;
            multi[axis] += 1;
            if multi[axis] < m {
                break;
            }
            multi[axis] = 0;
        }
    }
}

/// Smallest admissible mollifier bandwidth rejection threshold for a lattice:
/// the first-layer support radius `1/k` must cover at least one cell.
pub fn max_mollifier_bandwidth<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    lattice: &Lattice<F>,
) -> usize {
    let m1 = group.horizontal_dim();
    let hmax = lattice.spacing()[..m1]
        .iter()
        .fold(F::zero(), |a, &b| a.max(b));
    (F::one() / hmax).to_f64_lossy().floor().max(1.0) as usize
}

/// Convolve a measure with the group mollifier `eta_k` and renormalize.
/// Returns the measure and the renormalization factor (boundary leakage).
pub fn space_mollify<F: Scalar>(
    group: &StratifiedAlgebra<F>,
    mu: &GridMeasure<F>,
    bandwidth: usize,
) -> Result<(GridMeasure<F>, F)> {
    if bandwidth == 0 {
        return Err(Error::InvalidArgument("bandwidth must be >= 1".into()));
    }
    let lattice = mu.lattice();
    let kmax = max_mollifier_bandwidth(group, lattice);
    if bandwidth > kmax {
        return Err(Error::InvalidArgument(format!(
            "mollifier bandwidth {bandwidth} is sub-grid on this lattice; \
             use k <= {kmax} or refine the mesh"
        )));
    }
    let quad = mollifier_quadrature(group, bandwidth, 9);
    let rho = convolve_left_translates(group, lattice, mu.density(), &quad);
    GridMeasure::from_values(lattice.clone(), rho)
}

/// Mollify a trace in time with `theta_j(t) = j theta(j t)`,
/// `theta(s) = (1 - s^2)^2` on [-1, 1]. The trace is extended by constants
/// at both ends and the discrete weights are normalized so mass is exact.
pub fn time_mollify<F: Scalar>(trace: &FlowTrace<F>, bandwidth: usize) -> Result<FlowTrace<F>> {
    if trace.len() < 3 {
        return Err(Error::InvalidArgument("trace needs at least 3 frames".into()));
    }
    if bandwidth == 0 {
        return Err(Error::InvalidArgument("bandwidth must be >= 1".into()));
    }
    let dt = trace.uniform_dt()?;
    let j = F::of_usize(bandwidth);
    let radius = (F::one() / (j * dt)).ceil().to_f64_lossy() as i64;
    let mut weights = Vec::new();
    for m in -radius..=radius {
        let t = F::of(m as f64) * dt;
        let s = j * t;
        let w = if s.abs() < F::one() {
            let b = F::one() - s * s;
            b * b
        } else {
            F::zero()
        };
        weights.push(w);
    }
    let total = tree_sum(&weights);
    if total <= F::zero() {
        // kernel narrower than one time step: identity
        return Ok(trace.clone());
    }
    for w in &mut weights {
        *w /= total;
    }

    let nt = trace.len();
    let nodes = trace.lattice().num_nodes();
    let mut measures = Vec::with_capacity(nt);
    for ti in 0..nt {
        let mut rho = vec![F::zero(); nodes];
        for (off, &w) in weights.iter().enumerate() {
            if w == F::zero() {
                continue;
            }
            let shift = off as i64 - radius;
            let src = (ti as i64 + shift).clamp(0, nt as i64 - 1) as usize;
            let d = trace.measures[src].density();
            for (r, &v) in rho.iter_mut().zip(d) {
                *r += w * v;
            }
        }
        let (m, _) = GridMeasure::from_values(trace.lattice().clone(), rho)?;
        measures.push(m);
    }
    FlowTrace::new(trace.times.clone(), measures)
}

/// Second moment `int d(x, 0)^2 dmu` for a given distance-to-origin map.
pub fn second_moment<F: Scalar>(mu: &GridMeasure<F>, dist_to_origin: impl Fn(&[F]) -> F) -> F {
    let lat = mu.lattice();
    let mut coords = vec![F::zero(); lat.ndim()];
    let vals: Vec<F> = (0..lat.num_nodes())
        .map(|idx| {
            lat.coords_into(idx, &mut coords);
            let d = dist_to_origin(&coords);
            d * d * mu.density()[idx]
        })
        .collect();
    tree_sum(&vals) * lat.cell_volume()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::BoxNormParams;
    use approx::assert_relative_eq;

    fn r2_lattice() -> Arc<Lattice<f64>> {
        Arc::new(Lattice::symmetric(&[1.0, 1.0], &[21, 21]).unwrap())
    }

    #[test]
    fn lattice_indexing_roundtrip() {
        let lat = Lattice::<f64>::new(&[-1.0, -2.0, 0.0], &[1.0, 2.0, 3.0], &[5, 7, 9]).unwrap();
        for idx in [0, 1, 17, 100, 5 * 7 * 9 - 1] {
            assert_eq!(lat.index(&lat.multi_index(idx)), idx);
        }
        assert_eq!(lat.num_nodes(), 5 * 7 * 9);
        // last axis fastest
        assert_eq!(lat.multi_index(1), vec![0, 0, 1]);
    }

    #[test]
    fn lattice_rejects_degenerate_axes() {
        assert!(Lattice::<f64>::new(&[0.0], &[1.0], &[2]).is_err());
        assert!(Lattice::<f64>::new(&[1.0], &[0.0], &[5]).is_err());
        assert!(Lattice::<f64>::symmetric(&[1.0], &[4]).is_err());
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let lat = r2_lattice();
        let field: Vec<f64> = (0..lat.num_nodes())
            .map(|i| {
                let c = lat.node_coords(i);
                2.0 * c[0] - 3.0 * c[1] + 0.5
            })
            .collect();
        for p in [[0.13, -0.41], [0.99, 0.99], [-1.0, 1.0]] {
            assert_relative_eq!(
                lat.interpolate(&field, &p),
                2.0 * p[0] - 3.0 * p[1] + 0.5,
                max_relative = 1e-12,
                epsilon = 1e-12
            );
        }
        // outside the box the extension is zero
        assert_eq!(lat.interpolate(&field, &[1.7, 0.0]), 0.0);
    }

    #[test]
    fn discretize_uniform_box_density() {
        let lat = r2_lattice();
        let (mu, _) = GridMeasure::discretize(lat.clone(), |_| 1.0).unwrap();
        assert_relative_eq!(mu.mass(), 1.0, epsilon = 1e-12);
        let expected = 1.0 / (lat.num_nodes() as f64 * lat.cell_volume());
        for &v in mu.density() {
            assert_relative_eq!(v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn discretize_rejects_negative_and_zero() {
        let lat = r2_lattice();
        assert!(GridMeasure::discretize(lat.clone(), |c| c[0]).is_err());
        assert!(GridMeasure::discretize(lat.clone(), |_| 0.0).is_err());
    }

    #[test]
    fn narrow_bump_normalizes_to_unit_mass() {
        let lat = r2_lattice();
        let (mu, factor) = GridMeasure::discretize(lat, |c| {
            (-(c[0] * c[0] + c[1] * c[1]) / 0.005).exp()
        })
        .unwrap();
        assert_relative_eq!(mu.mass(), 1.0, epsilon = 1e-12);
        assert!(factor > 0.0);
    }

    #[test]
    fn convolve_with_delta_is_identity() {
        let g = StratifiedAlgebra::<f64>::preset("h1").unwrap();
        let lat = Lattice::<f64>::symmetric(&[1.0, 1.0, 1.0], &[9, 9, 9]).unwrap();
        let f: Vec<f64> = (0..lat.num_nodes())
            .map(|i| {
                let c = lat.node_coords(i);
                (1.0 - c[0] * c[0]) * (1.0 + 0.3 * c[1]) + 0.1 * c[2]
            })
            .collect();
        let mut kernel = vec![0.0; lat.num_nodes()];
        kernel[lat.origin_index()] = 1.0 / lat.cell_volume();
        let out = group_convolve(&g, &lat, &f, &kernel, 0).unwrap();
        for (a, b) in out.iter().zip(&f) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn convolve_matches_plain_convolution_on_r2() {
        let g = StratifiedAlgebra::<f64>::preset("r2").unwrap();
        let lat = Lattice::<f64>::symmetric(&[1.0, 1.0], &[17, 17]).unwrap();
        let f: Vec<f64> = (0..lat.num_nodes())
            .map(|i| {
                let c = lat.node_coords(i);
                (-(c[0] * c[0] + c[1] * c[1]) * 4.0).exp()
            })
            .collect();
        let mut kernel = vec![0.0; lat.num_nodes()];
        let origin = lat.multi_index(lat.origin_index());
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let multi = [
                    (origin[0] as i64 + di) as usize,
                    (origin[1] as i64 + dj) as usize,
                ];
                kernel[lat.index(&multi)] = 1.0 / ((di * di + dj * dj) as f64 + 1.0);
            }
        }
        let out = group_convolve(&g, &lat, &f, &kernel, 1).unwrap();
        // direct summation oracle: out(x) = sum_y f(y) k(x - y) vol
        let vol = lat.cell_volume();
        for idx in (0..lat.num_nodes()).step_by(13) {
            let x = lat.node_coords(idx);
            let mut acc = 0.0;
            for yi in 0..lat.num_nodes() {
                let y = lat.node_coords(yi);
                let d = [x[0] - y[0], x[1] - y[1]];
                if lat.contains(&d) {
                    if let Ok(ki) = lat.nearest_node(&d) {
                        let kc = lat.node_coords(ki);
                        if (kc[0] - d[0]).abs() < 1e-9 && (kc[1] - d[1]).abs() < 1e-9 {
                            acc += f[yi] * kernel[ki] * vol;
                        }
                    }
                }
            }
            assert!((out[idx] - acc).abs() <= 1e-12, "{} vs {}", out[idx], acc);
        }
    }

    #[test]
    fn convolve_mass_is_product_of_masses() {
        let g = StratifiedAlgebra::<f64>::preset("r2").unwrap();
        let lat = Lattice::<f64>::symmetric(&[2.0, 2.0], &[33, 33]).unwrap();
        // compactly supported bump well inside the box
        let f: Vec<f64> = (0..lat.num_nodes())
            .map(|i| {
                let c = lat.node_coords(i);
                let r2 = c[0] * c[0] + c[1] * c[1];
                if r2 < 0.49 {
                    (1.0 - r2 / 0.49).powi(2)
                } else {
                    0.0
                }
            })
            .collect();
        let mut kernel = vec![0.0; lat.num_nodes()];
        let origin = lat.multi_index(lat.origin_index());
        for di in -2i64..=2 {
            for dj in -2i64..=2 {
                let multi = [
                    (origin[0] as i64 + di) as usize,
                    (origin[1] as i64 + dj) as usize,
                ];
                kernel[lat.index(&multi)] = 1.0;
            }
        }
        let out = group_convolve(&g, &lat, &f, &kernel, 2).unwrap();
        let vol = lat.cell_volume();
        let fm: f64 = f.iter().sum::<f64>() * vol;
        let km: f64 = kernel.iter().sum::<f64>() * vol;
        let om: f64 = out.iter().sum::<f64>() * vol;
        assert!((om - fm * km).abs() <= 1e-6 * fm * km);
    }

    #[test]
    fn convolve_rejects_oversized_support() {
        let g = StratifiedAlgebra::<f64>::preset("r2").unwrap();
        let lat = Lattice::<f64>::symmetric(&[1.0, 1.0], &[9, 9]).unwrap();
        let f = vec![0.0; lat.num_nodes()];
        assert!(group_convolve(&g, &lat, &f, &f, 5).is_err());
    }

    #[test]
    fn mollify_preserves_mass_and_rejects_subgrid() {
        let g = StratifiedAlgebra::<f64>::preset("h1").unwrap();
        let lat = Arc::new(Lattice::<f64>::symmetric(&[2.0, 2.0, 3.0], &[17, 17, 21]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1] + 0.5 * c[2] * c[2]) * 2.0).exp()
        })
        .unwrap();
        let (sm, factor) = space_mollify(&g, &mu, 2).unwrap();
        assert_relative_eq!(sm.mass(), 1.0, epsilon = 1e-12);
        assert!(factor.is_finite());
        // threshold documented by max_mollifier_bandwidth
        let kmax = max_mollifier_bandwidth(&g, &lat);
        assert!(space_mollify(&g, &mu, kmax + 1).is_err());
    }

    #[test]
    fn mollify_keeps_symmetric_density_nearly_symmetric() {
        let g = StratifiedAlgebra::<f64>::preset("h1").unwrap();
        let lat = Arc::new(Lattice::<f64>::symmetric(&[2.0, 2.0, 3.0], &[17, 17, 21]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            let a = (-((c[0] - 0.5).powi(2) + c[1] * c[1] + c[2] * c[2]) * 3.0).exp();
            let b = (-((c[0] + 0.5).powi(2) + c[1] * c[1] + c[2] * c[2]) * 3.0).exp();
            a + b
        })
        .unwrap();
        // On a noncommutative group the left mollification satisfies
        // (eta * rho)(x^{-1}) = (rho * eta)(x), so inversion symmetry of the
        // output holds up to a commutator term of order 1/k^2. Check the cap
        // and the decay in the bandwidth.
        let rel_asym = |k: usize| {
            let (sm, _) = space_mollify(&g, &mu, k).unwrap();
            let n = lat.num_nodes();
            let mut asym: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for idx in 0..n {
                let v = sm.density()[idx];
                let w = sm.density()[n - 1 - idx];
                asym += (v - w).abs();
                scale += v.abs();
            }
            asym / scale
        };
        let a2 = rel_asym(2);
        let a4 = rel_asym(4);
        assert!(a2 < 6e-2, "asymmetry {a2}");
        assert!(a4 < a2, "no decay: {a4} vs {a2}");
    }

    #[test]
    fn time_mollify_constant_trace_unchanged() {
        let lat = r2_lattice();
        let (mu, _) = GridMeasure::discretize(lat.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1]) * 2.0).exp()
        })
        .unwrap();
        let times: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let trace = FlowTrace::new(times, vec![mu.clone(); 5]).unwrap();
        let out = time_mollify(&trace, 4).unwrap();
        for m in &out.measures {
            for (a, b) in m.density().iter().zip(mu.density()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn time_mollify_preserves_mass_and_needs_three_frames() {
        let lat = r2_lattice();
        let mk = |s: f64| {
            GridMeasure::discretize(lat.clone(), |c| {
                (-(c[0] * c[0] + c[1] * c[1]) / s).exp()
            })
            .unwrap()
            .0
        };
        let times: Vec<f64> = (0..6).map(|i| i as f64 * 0.05).collect();
        let measures: Vec<_> = (0..6).map(|i| mk(0.1 + 0.05 * i as f64)).collect();
        let trace = FlowTrace::new(times.clone(), measures).unwrap();
        let out = time_mollify(&trace, 3).unwrap();
        for m in &out.measures {
            assert_relative_eq!(m.mass(), 1.0, epsilon = 1e-12);
        }
        let short = FlowTrace::new(times[..2].to_vec(), vec![mk(0.1), mk(0.2)]).unwrap();
        assert!(time_mollify(&short, 3).is_err());
    }

    #[test]
    fn second_moment_of_origin_concentration_vanishes() {
        let lat = r2_lattice();
        let origin = lat.origin_index();
        let mut rho = vec![0.0; lat.num_nodes()];
        rho[origin] = 1.0;
        let (mu, _) = GridMeasure::from_values(lat.clone(), rho).unwrap();
        let m = second_moment(&mu, |c| (c[0] * c[0] + c[1] * c[1]).sqrt());
        assert_eq!(m, 0.0);
    }

    #[test]
    fn second_moment_uniform_r1_matches_integral() {
        // uniform on [-1, 1]: second moment 1/3
        let lat = Arc::new(Lattice::<f64>::symmetric(&[1.0], &[257]).unwrap());
        let (mu, _) = GridMeasure::discretize(lat, |_| 1.0).unwrap();
        let m = second_moment(&mu, |c| c[0].abs());
        // node quadrature carries an O(h) boundary term
        assert!((m - 1.0 / 3.0).abs() < 3e-3, "{m}");
    }

    #[test]
    fn second_moment_dilation_homogeneity_on_points() {
        // moment(delta_lambda # mu) = lambda^2 moment(mu) for point masses
        let g = StratifiedAlgebra::<f64>::preset("h1").unwrap();
        let p = BoxNormParams::ones(2);
        let pts = [
            (vec![0.5, -0.25, 0.1], 0.3),
            (vec![-0.75, 0.4, -0.3], 0.45),
            (vec![0.2, 0.9, 0.6], 0.25),
        ];
        let lambda = 1.7;
        let moment = |scale: f64| -> f64 {
            pts.iter()
                .map(|(x, w)| {
                    let xs = g.dilate(scale, x).unwrap();
                    let d = g.box_norm(&p, &xs);
                    w * d * d
                })
                .sum()
        };
        assert_relative_eq!(
            moment(lambda),
            lambda * lambda * moment(1.0),
            max_relative = 1e-9
        );
    }
}
