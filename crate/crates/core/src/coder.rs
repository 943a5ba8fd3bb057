//! Joint group and residual sparse coding of a single patch group.
//!
//! A group is split into its mean patch and a residual. The residual is
//! coded over the eigenbasis of the best-matching mixture component with a
//! weighted soft threshold; mean plus coded residual is then coded over its
//! own SVD basis by hard thresholding the singular values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm_prior::{ComponentSelector, GmmModel};
use crate::linalg::{thin_svd, ThinSvd};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoderParams {
    /// Noise scale used for component selection and residual thresholds.
    pub sigma_n: f64,
    /// Internal-dictionary weight; singular values at or below
    /// `sqrt(2 * lambda1)` are zeroed.
    pub lambda1: f64,
    /// Lower bound on the per-coefficient standard deviation.
    pub sigma_floor: f64,
}

impl CoderParams {
    pub fn new(sigma_n: f64, lambda1: f64) -> Self {
        Self {
            sigma_n,
            lambda1,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return Err(Error::invalid(format!("sigma_n must be >= 0, got {}", self.sigma_n)));
        }
        if !(self.lambda1 > 0.0) {
            return Err(Error::invalid(format!("lambda1 must be > 0, got {}", self.lambda1)));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::invalid("sigma_floor must be > 0"));
        }
        Ok(())
    }
}

/// Mean patch and residual of a group; `group = mean * 1^T + residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSplit {
    pub mean: DVector<f64>,
    pub residual: DMatrix<f64>,
}

impl GroupSplit {
    pub fn recompose(&self) -> DMatrix<f64> {
        add_mean(&self.residual, &self.mean)
    }
}

fn add_mean(residual: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = residual.clone();
    for mut col in out.column_iter_mut() {
        col += mean;
    }
    out
}

pub fn split_group(group: &DMatrix<f64>) -> Result<GroupSplit> {
    if group.ncols() == 0 {
        return Err(Error::invalid("cannot split an empty group"));
    }
    let mean = group.column_mean();
    let mut residual = group.clone();
    for mut col in residual.column_iter_mut() {
        col -= &mean;
    }
    Ok(GroupSplit { mean, residual })
}

/// Threshold applied to coefficient `i`: `2 sqrt(2) sigma_n^2 / sigma_i`
/// with `sigma_i = max(sqrt(lambda_i), sigma_floor)`.
pub fn residual_thresholds(eigvals: &DVector<f64>, params: &CoderParams) -> DVector<f64> {
    let scale = 2.0 * std::f64::consts::SQRT_2 * params.sigma_n * params.sigma_n;
    eigvals.map(|l| scale / l.max(0.0).sqrt().max(params.sigma_floor))
}

#[inline]
pub fn soft_threshold(a: f64, t: f64) -> f64 {
    a.signum() * (a.abs() - t).max(0.0)
}

/// Soft-thresholds the residual's coefficients in the eigenbasis `dict`.
/// Reconstruct with `dict * codes`.
pub fn code_residual(
    residual: &DMatrix<f64>,
    dict: &DMatrix<f64>,
    eigvals: &DVector<f64>,
    params: &CoderParams,
) -> Result<DMatrix<f64>> {
    let n = residual.nrows();
    if dict.shape() != (n, n) || eigvals.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "residual has {n} rows but dictionary is {}x{} with {} eigenvalues",
            dict.nrows(),
            dict.ncols(),
            eigvals.len()
        )));
    }
    let thresholds = residual_thresholds(eigvals, params);
    let mut codes = dict.tr_mul(residual);
    for mut col in codes.column_iter_mut() {
        for (a, &t) in col.iter_mut().zip(thresholds.iter()) {
            *a = soft_threshold(*a, t);
        }
    }
    Ok(codes)
}

/// SVD basis of the recomposed group: `U diag(s) V^T`, descending.
pub fn internal_dictionary(recomposed: &DMatrix<f64>) -> Result<ThinSvd> {
    thin_svd(recomposed)
}

/// Hard threshold at `sqrt(2 * lambda1)`; values equal to the threshold
/// are zeroed.
pub fn code_group_internal(singulars: &DVector<f64>, lambda1: f64) -> DVector<f64> {
    let t = (2.0 * lambda1).sqrt();
    singulars.map(|s| if s.abs() > t { s } else { 0.0 })
}

/// Everything produced while coding one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCodes {
    pub selected_component: usize,
    pub alpha_residual: DMatrix<f64>,
    pub alpha_internal: DVector<f64>,
    pub internal: ThinSvd,
}

/// Codes groups against a fixed model and parameters. Holds the per-model
/// precomputation for component selection.
#[derive(Debug, Clone)]
pub struct GroupCoder<'m> {
    model: &'m GmmModel,
    selector: ComponentSelector,
    params: CoderParams,
}

impl<'m> GroupCoder<'m> {
    pub fn new(model: &'m GmmModel, params: CoderParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            model,
            selector: ComponentSelector::new(model, params.sigma_n),
            params,
        })
    }

    pub fn params(&self) -> &CoderParams {
        &self.params
    }

    /// One pass: split, select a component, code the residual, recompose,
    /// then hard-threshold the singular values of the recomposed group.
    pub fn code(&self, group: &DMatrix<f64>) -> Result<(DMatrix<f64>, GroupCodes)> {
        if group.nrows() != self.model.patch_dim() {
            return Err(Error::DimensionMismatch(format!(
                "group has {} rows, model patch dimension is {}",
                group.nrows(),
                self.model.patch_dim()
            )));
        }
        let split = split_group(group)?;
        let k = self.selector.select(&split.residual);
        let comp = &self.model.components()[k];
        let alpha_residual =
            code_residual(&split.residual, &comp.eigenvectors, &comp.eigenvalues, &self.params)?;
        let recomposed = add_mean(&(&comp.eigenvectors * &alpha_residual), &split.mean);
        let internal = internal_dictionary(&recomposed)?;
        let alpha_internal = code_group_internal(&internal.singulars, self.params.lambda1);
        let coded = internal.recompose_with(&alpha_internal);
        Ok((
            coded,
            GroupCodes {
                selected_component: k,
                alpha_residual,
                alpha_internal,
                internal,
            },
        ))
    }
}

pub fn code_group(
    group: &DMatrix<f64>,
    model: &GmmModel,
    params: &CoderParams,
) -> Result<(DMatrix<f64>, GroupCodes)> {
    GroupCoder::new(model, *params)?.code(group)
}
