//! Eigen and singular value decompositions with a fixed ordering and sign
//! convention, so dictionaries and codes are reproducible bit for bit.
//!
//! Convention: values descending; every eigenvector / left singular vector
//! has its largest-magnitude entry positive (first such entry on ties).

use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigendecomposition `S = V diag(values) V^T` of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

/// Thin SVD `A = U diag(singulars) V^T` with `min(rows, cols)` factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singulars: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    /// `U diag(weights) V^T`.
    pub fn recompose_with(&self, weights: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (j, w) in weights.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*w);
        }
        scaled * self.v.transpose()
    }

    pub fn recompose(&self) -> DMatrix<f64> {
        self.recompose_with(&self.singulars)
    }
}

/// Sign factor that makes the largest-magnitude entry of `v` positive.
fn canonical_sign<'a>(v: impl Iterator<Item = &'a f64>) -> f64 {
    let mut best = 0.0f64;
    for &x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn to_faer(a: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn sorted_order(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps the solver's order on exact ties.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

pub fn sym_eigen(s: &DMatrix<f64>) -> Result<SymEigen> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite entry in symmetric matrix"));
    }
    // Symmetrize exactly; the solver reads only one triangle anyway.
    let sym = (s + s.transpose()) * 0.5;
    let n = s.nrows();
    let eig = to_faer(&sym).selfadjoint_eigendecomposition(Side::Lower);
    let raw_values = DVector::from_fn(n, |i, _| eig.s().column_vector().read(i));
    let u = eig.u();
    let order = sorted_order(&raw_values);
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = raw_values[src];
        let col = DVector::from_fn(n, |r, _| u.read(r, src));
        let sign = canonical_sign(col.iter());
        vectors.set_column(dst, &(col * sign));
    }
    Ok(SymEigen { values, vectors })
}

pub fn thin_svd(a: &DMatrix<f64>) -> Result<ThinSvd> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite entry in matrix passed to SVD"));
    }
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    let svd = to_faer(a).thin_svd();
    let raw = DVector::from_fn(k, |i, _| svd.s_diagonal().read(i));
    let (u_raw, v_raw) = (svd.u(), svd.v());
    let order = sorted_order(&raw);
    let mut u = DMatrix::zeros(rows, k);
    let mut v = DMatrix::zeros(cols, k);
    let mut singulars = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        singulars[dst] = raw[src];
        let ucol = DVector::from_fn(rows, |r, _| u_raw.read(r, src));
        let sign = canonical_sign(ucol.iter());
        u.set_column(dst, &(ucol * sign));
        v.set_column(dst, &DVector::from_fn(cols, |r, _| v_raw.read(r, src) * sign));
    }
    Ok(ThinSvd { u, singulars, v })
}
