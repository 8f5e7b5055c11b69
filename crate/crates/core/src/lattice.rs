//! Lattice geometry: generation matrices, Gram-Schmidt, LLL reduction,
//! Babai rounding and a brute-force closest-vector oracle.
//!
//! Basis vectors are the *columns* of a [`GenerationMatrix`]; a lattice point
//! is `G * z` for an integer vector `z`.

use nalgebra::{DMatrix, DVector};

use crate::error::{GlvqError, Result};

/// Smallest admissible ratio of the smallest to the largest singular value.
const RANK_TOLERANCE: f64 = 1e-12;

/// A square, full-rank lattice basis stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationMatrix {
    entries: DMatrix<f64>,
}

impl GenerationMatrix {
    /// Validates squareness, finiteness and numerical full rank.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(GlvqError::ShapeMismatch(format!(
                "generation matrix must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(GlvqError::NonFinite("generation matrix"));
        }
        let sv = entries.singular_values();
        let max = sv.max();
        let min = sv.min();
        if max <= 0.0 || min <= RANK_TOLERANCE * max {
            return Err(GlvqError::SingularBasis);
        }
        Ok(Self { entries })
    }

    /// Builds a basis from its column vectors.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let d = columns.len();
        let mut m = DMatrix::zeros(d, d);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != d {
                return Err(GlvqError::ShapeMismatch(format!(
                    "basis column {j} has length {}, expected {d}",
                    col.len()
                )));
            }
            m.column_mut(j).copy_from_slice(col);
        }
        Self::new(m)
    }

    pub fn identity(dim: usize) -> Self {
        Self { entries: DMatrix::identity(dim, dim) }
    }

    /// Skips validation; callers guarantee full rank (e.g. clamped singular values).
    pub(crate) fn from_matrix_unchecked(entries: DMatrix<f64>) -> Self {
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.entries.column(i).into_owned()
    }
}

/// Integer lattice coordinates of a single point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeVector(pub Vec<i64>);

impl CodeVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }
}

impl From<Vec<i64>> for CodeVector {
    fn from(v: Vec<i64>) -> Self {
        Self(v)
    }
}

/// Gram-Schmidt decomposition `b_i = b*_i + sum_{j<i} c(j,i) b*_j`.
#[derive(Debug, Clone)]
pub struct GramSchmidtBasis {
    /// Column `j` is the orthogonalized vector `b*_j`.
    pub ortho: DMatrix<f64>,
    /// Strictly upper-triangular projection coefficients; entry `(j, i)`
    /// is `<b_i, b*_j> / |b*_j|^2` for `j < i`.
    pub gs_coeff: DMatrix<f64>,
}

impl GramSchmidtBasis {
    pub fn dim(&self) -> usize {
        self.ortho.ncols()
    }

    /// Squared norms `|b*_j|^2`.
    pub fn ortho_norms_sq(&self) -> Vec<f64> {
        self.ortho.column_iter().map(|c| c.norm_squared()).collect()
    }

    /// Largest `|c(j,i)|` over `j < i`.
    pub fn max_abs_coeff(&self) -> f64 {
        let d = self.dim();
        let mut m = 0.0f64;
        for i in 0..d {
            for j in 0..i {
                m = m.max(self.gs_coeff[(j, i)].abs());
            }
        }
        m
    }
}

pub fn gram_schmidt(basis: &GenerationMatrix) -> Result<GramSchmidtBasis> {
    gram_schmidt_matrix(basis.matrix())
}

fn gram_schmidt_matrix(b: &DMatrix<f64>) -> Result<GramSchmidtBasis> {
    let d = b.ncols();
    let mut ortho = DMatrix::<f64>::zeros(b.nrows(), d);
    let mut coeff = DMatrix::<f64>::zeros(d, d);
    let mut norms_sq = vec![0.0; d];
    let scale = b.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    for i in 0..d {
        let bi = b.column(i);
        let mut v = bi.into_owned();
        for j in 0..i {
            // Modified Gram-Schmidt: project the running remainder.
            let c = ortho.column(j).dot(&v) / norms_sq[j];
            v.axpy(-c, &ortho.column(j), 1.0);
        }
        // Coefficients against the original vector, as defined.
        for j in 0..i {
            coeff[(j, i)] = bi.dot(&ortho.column(j)) / norms_sq[j];
        }
        let n2 = v.norm_squared();
        if !(n2.sqrt() > RANK_TOLERANCE * scale) {
            return Err(GlvqError::SingularBasis);
        }
        norms_sq[i] = n2;
        ortho.set_column(i, &v);
    }
    Ok(GramSchmidtBasis { ortho, gs_coeff: coeff })
}

/// `floor(x + 0.5)`: round to nearest with halves going toward +infinity.
#[inline]
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// LLL-reduces a copy of `basis` with Lovasz parameter `delta`.
pub fn lll_reduce(basis: &GenerationMatrix, delta: f64) -> Result<GenerationMatrix> {
    if !(delta > 0.25 && delta <= 1.0) {
        return Err(GlvqError::InvalidArgument(format!(
            "LLL delta must lie in (1/4, 1], got {delta}"
        )));
    }
    let d = basis.dim();
    let mut b = basis.matrix().clone();
    let mut gs = gram_schmidt_matrix(&b)?;
    let mut k = 1;
    // Guard against floating-point cycling on pathological inputs.
    let max_steps = 100_000 * d.max(1);
    let mut steps = 0;
    while k < d {
        steps += 1;
        if steps > max_steps {
            break;
        }
        for j in (0..k).rev() {
            let c = gs.gs_coeff[(j, k)];
            let r = round_half_up(c);
            if r != 0.0 && c.abs() > 0.5 {
                let bj = b.column(j).into_owned();
                b.column_mut(k).axpy(-r, &bj, 1.0);
                gs = gram_schmidt_matrix(&b)?;
            }
        }
        let norms = gs.ortho_norms_sq();
        let c = gs.gs_coeff[(k - 1, k)];
        if norms[k] >= (delta - c * c) * norms[k - 1] {
            k += 1;
        } else {
            b.swap_columns(k - 1, k);
            gs = gram_schmidt_matrix(&b)?;
            k = (k - 1).max(1);
        }
    }
    Ok(GenerationMatrix::from_matrix_unchecked(b))
}

/// Real coordinates `G^{-1} t` through an LU solve.
pub fn lattice_coordinates(basis: &GenerationMatrix, target: &[f64]) -> Result<DVector<f64>> {
    let d = basis.dim();
    if target.len() != d {
        return Err(GlvqError::ShapeMismatch(format!(
            "target has length {}, basis dimension is {d}",
            target.len()
        )));
    }
    let t = DVector::from_column_slice(target);
    if d == 1 {
        return Ok(t / basis.matrix()[(0, 0)]);
    }
    basis.matrix().clone().lu().solve(&t).ok_or(GlvqError::SingularBasis)
}

/// Babai rounding: `floor(G^{-1} t + 0.5)` coordinate-wise.
pub fn babai_round(basis: &GenerationMatrix, target: &[f64]) -> Result<CodeVector> {
    let x = lattice_coordinates(basis, target)?;
    Ok(CodeVector(x.iter().map(|&v| round_half_up(v) as i64).collect()))
}

pub fn decode(basis: &GenerationMatrix, codes: &CodeVector) -> Result<DVector<f64>> {
    if codes.len() != basis.dim() {
        return Err(GlvqError::ShapeMismatch(format!(
            "code vector has length {}, basis dimension is {}",
            codes.len(),
            basis.dim()
        )));
    }
    let z = DVector::from_iterator(codes.len(), codes.0.iter().map(|&c| c as f64));
    Ok(basis.matrix() * z)
}

/// Euclidean distance between `target` and the lattice point of `codes`.
pub fn residual_norm(basis: &GenerationMatrix, target: &[f64], codes: &CodeVector) -> Result<f64> {
    let v = decode(basis, codes)?;
    Ok(v.iter().zip(target).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
}

pub const DEFAULT_CVP_RADIUS: u32 = 2;

/// Exhaustive closest-vector search over the box of half-width `radius`
/// centred at the Babai point. Ties resolve to the lexicographically
/// smallest code. Intended as a test oracle for small dimensions.
pub fn exact_cvp(basis: &GenerationMatrix, target: &[f64], radius: u32) -> Result<CodeVector> {
    let d = basis.dim();
    if d > 8 {
        return Err(GlvqError::InvalidArgument(format!(
            "exact_cvp enumerates (2r+1)^d points; dimension {d} exceeds 8"
        )));
    }
    if radius == 0 {
        return Err(GlvqError::InvalidArgument("search radius must be at least 1".into()));
    }
    let center = babai_round(basis, target)?;
    let g = basis.matrix();
    let t = DVector::from_column_slice(target);
    let r = radius as i64;
    let span = 2 * r + 1;
    let total = (span as u64).pow(d as u32);

    let mut best: Option<(f64, Vec<i64>)> = None;
    let mut offset = vec![-r; d];
    let mut z = vec![0i64; d];
    let mut point = DVector::<f64>::zeros(d);
    for _ in 0..total {
        for i in 0..d {
            z[i] = center.0[i] + offset[i];
        }
        point.fill(0.0);
        for (i, &zi) in z.iter().enumerate() {
            point.axpy(zi as f64, &g.column(i), 1.0);
        }
        let dist = (&t - &point).norm_squared();
        let better = match &best {
            None => true,
            Some((bd, bz)) => dist < *bd || (dist == *bd && z < *bz),
        };
        if better {
            best = Some((dist, z.clone()));
        }
        // Odometer increment, last coordinate fastest: lexicographic order.
        for i in (0..d).rev() {
            offset[i] += 1;
            if offset[i] <= r {
                break;
            }
            offset[i] = -r;
        }
    }
    Ok(CodeVector(best.map(|(_, z)| z).unwrap_or_default()))
}

/// Upper bounds on the Babai rounding residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BabaiBound {
    /// `1/2 sqrt(sum_j (1 + (n-j)/2)^2 |b*_j|^2)`, valid for size-reduced bases.
    pub lll_form: f64,
    /// `1/2 sqrt(sum_j (1 + sum_{i>j} |c(j,i)|)^2 |b*_j|^2)`, valid for any basis.
    pub general: f64,
}

pub fn babai_error_bound(gs: &GramSchmidtBasis) -> BabaiBound {
    let n = gs.dim();
    let norms = gs.ortho_norms_sq();
    let mut lll = 0.0;
    let mut general = 0.0;
    for j in 0..n {
        // j is zero-based here, so (n - j) - 1 later vectors follow b*_j.
        let later = (n - j - 1) as f64;
        let a = 1.0 + later / 2.0;
        lll += a * a * norms[j];
        let s: f64 = ((j + 1)..n).map(|i| gs.gs_coeff[(j, i)].abs()).sum();
        general += (1.0 + s) * (1.0 + s) * norms[j];
    }
    BabaiBound { lll_form: 0.5 * lll.sqrt(), general: 0.5 * general.sqrt() }
}
