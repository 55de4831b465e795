//! Sparse multivariate polynomials with scalar coefficients.
//!
//! Used to hold the group law and left-translation frames of a stratified
//! group symbolically: both are polynomial in exponential coordinates, so one
//! table per group suffices and every evaluation afterwards is exact
//! arithmetic on the table.

use crate::scalar::Scalar;

/// A monomial as a sparse list of (variable index, exponent), sorted by index.
type Monomial = Vec<(u16, u8)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Poly<F> {
    /// (coefficient, monomial) pairs, sorted by monomial, no duplicates,
    /// no zero coefficients.
    terms: Vec<(F, Monomial)>,
}

impl<F: Scalar> Poly<F> {
    pub fn zero() -> Self {
        Poly { terms: Vec::new() }
    }

    pub fn constant(c: F) -> Self {
        if c == F::zero() {
            Self::zero()
        } else {
            Poly {
                terms: vec![(c, Vec::new())],
            }
        }
    }

    /// The polynomial `v_i` for variable index `i`.
    pub fn var(i: usize) -> Self {
        Poly {
            terms: vec![(F::one(), vec![(i as u16, 1)])],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    fn normalize(mut terms: Vec<(F, Monomial)>) -> Self {
        terms.sort_by(|a, b| a.1.cmp(&b.1));
        let mut out: Vec<(F, Monomial)> = Vec::with_capacity(terms.len());
        for (c, m) in terms {
            match out.last_mut() {
                Some((lc, lm)) if *lm == m => *lc += c,
                _ => out.push((c, m)),
            }
        }
        out.retain(|(c, _)| *c != F::zero());
        Poly { terms: out }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self::normalize(terms)
    }

    pub fn add_scaled(&self, other: &Self, s: F) -> Self {
        if s == F::zero() {
            return self.clone();
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|(c, m)| (*c * s, m.clone())));
        Self::normalize(terms)
    }

    pub fn scale(&self, s: F) -> Self {
        if s == F::zero() {
            return Self::zero();
        }
        Poly {
            terms: self.terms.iter().map(|(c, m)| (*c * s, m.clone())).collect(),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ca, ma) in &self.terms {
            for (cb, mb) in &other.terms {
                terms.push((*ca * *cb, merge_monomials(ma, mb)));
            }
        }
        Self::normalize(terms)
    }

    /// Partial derivative with respect to variable `i`.
    pub fn diff(&self, i: usize) -> Self {
        let i = i as u16;
        let mut terms = Vec::new();
        for (c, m) in &self.terms {
            if let Some(pos) = m.iter().position(|&(v, _)| v == i) {
                let (_, e) = m[pos];
                let mut nm = m.clone();
                if e == 1 {
                    nm.remove(pos);
                } else {
                    nm[pos].1 = e - 1;
                }
                terms.push((*c * F::of_usize(e as usize), nm));
            }
        }
        Self::normalize(terms)
    }

    /// Substitute zero for every variable with index >= `cut`.
    pub fn truncate_vars(&self, cut: usize) -> Self {
        let cut = cut as u16;
        Poly {
            terms: self
                .terms
                .iter()
                .filter(|(_, m)| m.iter().all(|&(v, _)| v < cut))
                .cloned()
                .collect(),
        }
    }

    pub fn eval(&self, vars: &[F]) -> F {
        let mut acc = F::zero();
        for (c, m) in &self.terms {
            let mut t = *c;
            for &(v, e) in m {
                let x = vars[v as usize];
                for _ in 0..e {
                    t = t * x;
                }
            }
            acc += t;
        }
        acc
    }
}

fn merge_monomials(a: &Monomial, b: &Monomial) -> Monomial {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push((a[i].0, a[i].1 + b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}
