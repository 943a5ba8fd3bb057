//! Zero-mean Gaussian mixture prior over residual patch groups.
//!
//! Every patch of a residual group is assumed drawn from the same mixture
//! component, so a group `X` (`n x M`) enters the likelihood only through
//! its scatter matrix `S = X X^T`:
//!
//! `log prod_m N(x_m | 0, C) = -1/2 (M n log 2pi + M log|C| + tr(C^-1 S))`.
//!
//! All density work is done in the log domain.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::binio::{read_file, write_atomic, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{sym_eigen, SymEigen};
use crate::patch_groups::{block_match, gather_group};

pub const DEFAULT_COMPONENTS: usize = 64;
pub const DEFAULT_RIDGE: f64 = 1e-3;
pub const DEFAULT_EM_ITERS: usize = 100;
pub const DEFAULT_SAMPLES: usize = 20_000;
/// Relative log-likelihood change below which EM stops early.
pub const EM_REL_TOL: f64 = 1e-6;
/// Components whose effective count drops below this are reseeded.
const EMPTY_COMPONENT: f64 = 1e-8;

const JGMM_MAGIC: &[u8; 4] = b"JGMM";
const JGMM_VERSION: u32 = 1;
const JGMM_HEADER_LEN: usize = 4 + 4 * 4 + 8;

/// Mean-subtracted patch groups sampled from clean images.
#[derive(Debug, Clone)]
pub struct ResidualTrainingSet {
    pub groups: Vec<DMatrix<f64>>,
    pub patch_size: usize,
    pub group_size: usize,
}

impl ResidualTrainingSet {
    pub fn new(groups: Vec<DMatrix<f64>>, patch_size: usize, group_size: usize) -> Result<Self> {
        let n = patch_size * patch_size;
        for (i, g) in groups.iter().enumerate() {
            if g.nrows() != n || g.ncols() != group_size {
                return Err(Error::DimensionMismatch(format!(
                    "group {i} is {}x{}, expected {n}x{group_size}",
                    g.nrows(),
                    g.ncols()
                )));
            }
        }
        Ok(Self {
            groups,
            patch_size,
            group_size,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Subtracts the group's mean patch from every column.
pub fn subtract_group_mean(group: &mut DMatrix<f64>) {
    let mean = group.column_mean();
    for mut col in group.column_iter_mut() {
        col -= &mean;
    }
}

/// Samples `count` reference positions uniformly over all valid patch
/// positions of all images, groups each by block matching, and stores the
/// mean-subtracted group.
pub fn collect_residual_groups(
    images: &[Image],
    patch_size: usize,
    group_size: usize,
    window: usize,
    count: usize,
    seed: u64,
) -> Result<ResidualTrainingSet> {
    if images.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut offsets = Vec::with_capacity(images.len());
    let mut total = 0usize;
    for (i, img) in images.iter().enumerate() {
        if img.width() < patch_size || img.height() < patch_size {
            return Err(Error::invalid(format!(
                "training image {i} ({}x{}) smaller than patch size {patch_size}",
                img.width(),
                img.height()
            )));
        }
        offsets.push(total);
        total += (img.width() - patch_size + 1) * (img.height() - patch_size + 1);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let picks: Vec<(usize, (usize, usize))> = (0..count)
        .map(|_| {
            let u = rng.gen_range(0..total);
            let i = offsets.partition_point(|&o| o <= u) - 1;
            let local = u - offsets[i];
            let cols = images[i].width() - patch_size + 1;
            (i, (local / cols, local % cols))
        })
        .collect();

    let groups = picks
        .par_iter()
        .map(|&(i, pos)| {
            let idx = block_match(&images[i], pos, patch_size, group_size, window)?;
            if idx.len() != group_size {
                return Err(Error::invalid(format!(
                    "training image {i} too small for groups of {group_size}"
                )));
            }
            let mut g = gather_group(&images[i], &idx)?.data;
            subtract_group_mean(&mut g);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    ResidualTrainingSet::new(groups, patch_size, group_size)
}

/// One zero-mean mixture component with its eigendictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    /// Always `eigenvectors * diag(eigenvalues) * eigenvectors^T`.
    pub covariance: DMatrix<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

impl GmmComponent {
    /// Builds a component from a symmetric PSD covariance.
    pub fn from_covariance(weight: f64, covariance: &DMatrix<f64>) -> Result<Self> {
        let SymEigen { values, vectors } = sym_eigen(covariance)?;
        let values = values.map(|v| v.max(0.0));
        Ok(Self::from_eigen(weight, vectors, values))
    }

    pub fn from_eigen(weight: f64, eigenvectors: DMatrix<f64>, eigenvalues: DVector<f64>) -> Self {
        let covariance = recompose(&eigenvectors, &eigenvalues);
        Self {
            weight,
            covariance,
            eigenvectors,
            eigenvalues,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }
}

fn recompose(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*v);
    }
    let c = scaled * vectors.transpose();
    (&c + c.transpose()) * 0.5
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub samples: usize,
    pub em_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    components: Vec<GmmComponent>,
    patch_size: usize,
    group_size: usize,
    pub meta: TrainingMeta,
}

impl GmmModel {
    pub fn new(
        components: Vec<GmmComponent>,
        patch_size: usize,
        group_size: usize,
        meta: TrainingMeta,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::CorruptModel("model has no components".into()));
        }
        let n = patch_size * patch_size;
        for (k, c) in components.iter().enumerate() {
            if c.dim() != n
                || c.eigenvectors.shape() != (n, n)
                || c.covariance.shape() != (n, n)
            {
                return Err(Error::CorruptModel(format!(
                    "component {k} has dimension {}, expected {n}",
                    c.dim()
                )));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::CorruptModel(format!(
                    "component {k} weight {} outside (0, 1]",
                    c.weight
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::CorruptModel(format!(
                "mixing weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            components,
            patch_size,
            group_size,
            meta,
        })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Serialized size in bytes of a model with `k` components of dimension `n`.
    pub fn file_size(n: usize, k: usize) -> usize {
        JGMM_HEADER_LEN + k * 8 * (1 + n + n * n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.patch_dim();
        let mut w = LeWriter::with_capacity(Self::file_size(n, self.num_components()));
        w.bytes(JGMM_MAGIC);
        w.u32(JGMM_VERSION);
        w.u32(n as u32);
        w.u32(self.num_components() as u32);
        w.u32(self.group_size as u32);
        w.u64(self.meta.seed);
        for c in &self.components {
            w.f64(c.weight);
            for v in c.eigenvalues.iter() {
                w.f64(*v);
            }
            // nalgebra storage is column-major already.
            for v in c.eigenvectors.iter() {
                w.f64(*v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptModel(m);
        let mut r = LeReader::new(bytes);
        if r.bytes(4).map_err(corrupt)? != JGMM_MAGIC {
            return Err(corrupt("bad magic, expected JGMM".into()));
        }
        let version = r.u32().map_err(corrupt)?;
        if version != JGMM_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = r.u32().map_err(corrupt)? as usize;
        let k = r.u32().map_err(corrupt)? as usize;
        let group_size = r.u32().map_err(corrupt)? as usize;
        let seed = r.u64().map_err(corrupt)?;
        let patch_size = (n as f64).sqrt().round() as usize;
        if n == 0 || patch_size * patch_size != n {
            return Err(corrupt(format!("patch dimension {n} is not a square")));
        }
        if k == 0 {
            return Err(corrupt("model has no components".into()));
        }
        let expected = Self::file_size(n, k) - JGMM_HEADER_LEN;
        if r.remaining() != expected {
            return Err(corrupt(format!(
                "payload is {} bytes, header implies {expected}",
                r.remaining()
            )));
        }
        let mut components = Vec::with_capacity(k);
        for idx in 0..k {
            let weight = r.f64().map_err(corrupt)?;
            let mut values = DVector::zeros(n);
            for i in 0..n {
                values[i] = r.f64().map_err(corrupt)?;
            }
            let mut vectors = DMatrix::zeros(n, n);
            for v in vectors.iter_mut() {
                *v = r.f64().map_err(corrupt)?;
            }
            if values.iter().any(|v| !v.is_finite() || *v < 0.0)
                || values.as_slice().windows(2).any(|w| w[0] < w[1])
            {
                return Err(corrupt(format!(
                    "component {idx} eigenvalues are not nonnegative and descending"
                )));
            }
            let gram_err = (vectors.transpose() * &vectors - DMatrix::identity(n, n)).amax();
            if !(gram_err <= 1e-6) {
                return Err(corrupt(format!(
                    "component {idx} eigenvectors not orthonormal (error {gram_err:e})"
                )));
            }
            components.push(GmmComponent::from_eigen(weight, vectors, values));
        }
        let meta = TrainingMeta {
            seed,
            ..TrainingMeta::default()
        };
        Self::new(components, patch_size, group_size, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn save_model(model: &GmmModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<GmmModel> {
    GmmModel::load(path)
}

/// Returns the eigendictionary of component `k`: orthonormal eigenvectors
/// (columns) and descending eigenvalues.
pub fn component_dictionary(model: &GmmModel, k: usize) -> Result<(&DMatrix<f64>, &DVector<f64>)> {
    let c = model.components.get(k).ok_or_else(|| {
        Error::invalid(format!(
            "component {k} out of range for a {}-component model",
            model.num_components()
        ))
    })?;
    Ok((&c.eigenvectors, &c.eigenvalues))
}

/// `sum_ij a_ij b_ij`.
#[inline]
fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Precision matrix and log-determinant of `covariance + shift * I`,
/// computed from the component's eigendecomposition.
#[derive(Debug, Clone)]
struct GaussianTerms {
    log_weight: f64,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl GaussianTerms {
    fn new(c: &GmmComponent, shift: f64) -> Self {
        let shifted = c.eigenvalues.map(|v| v + shift);
        let log_det = shifted.iter().map(|v| v.ln()).sum();
        let inv = shifted.map(|v| 1.0 / v);
        Self {
            log_weight: c.weight.ln(),
            precision: recompose(&c.eigenvectors, &inv),
            log_det,
        }
    }

    /// `log prod_m N(x_m | 0, C)` for `m` columns with scatter `S`.
    fn group_log_density(&self, scatter: &DMatrix<f64>, m: usize) -> f64 {
        let n = scatter.nrows() as f64;
        let m = m as f64;
        -0.5 * (m * n * (2.0 * PI).ln() + m * self.log_det + frobenius_dot(&self.precision, scatter))
    }
}

/// Scores residual groups against every component under added noise
/// `sigma_n^2 I`. Precomputes one precision matrix per component.
#[derive(Debug, Clone)]
pub struct ComponentSelector {
    terms: Vec<GaussianTerms>,
}

impl ComponentSelector {
    pub fn new(model: &GmmModel, sigma_n: f64) -> Self {
        let shift = sigma_n * sigma_n;
        Self {
            terms: model
                .components
                .iter()
                .map(|c| GaussianTerms::new(c, shift))
                .collect(),
        }
    }

    /// `log pi_k + sum_i log N(x_i | 0, Sigma_k + sigma_n^2 I)` for every k.
    pub fn log_scores(&self, residual: &DMatrix<f64>) -> Vec<f64> {
        let scatter = residual * residual.transpose();
        self.terms
            .iter()
            .map(|t| t.log_weight + t.group_log_density(&scatter, residual.ncols()))
            .collect()
    }

    /// Index of the highest score, lowest index on ties.
    pub fn select(&self, residual: &DMatrix<f64>) -> usize {
        argmax_first(&self.log_scores(residual))
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// MAP component for a residual group:
/// `argmax_k pi_k prod_i N(x_i | 0, Sigma_k + sigma_n^2 I)`.
pub fn select_component(residual: &DMatrix<f64>, model: &GmmModel, sigma_n: f64) -> Result<usize> {
    if !(sigma_n >= 0.0) {
        return Err(Error::invalid(format!("sigma_n must be >= 0, got {sigma_n}")));
    }
    if residual.nrows() != model.patch_dim() {
        return Err(Error::DimensionMismatch(format!(
            "residual has {} rows, model patch dimension is {}",
            residual.nrows(),
            model.patch_dim()
        )));
    }
    Ok(ComponentSelector::new(model, sigma_n).select(residual))
}

fn scatters(data: &ResidualTrainingSet) -> Vec<DMatrix<f64>> {
    data.groups.par_iter().map(|g| g * g.transpose()).collect()
}

fn total_log_likelihood(scatters: &[DMatrix<f64>], m: usize, model: &GmmModel) -> f64 {
    let terms: Vec<_> = model
        .components
        .iter()
        .map(|c| GaussianTerms::new(c, 0.0))
        .collect();
    scatters
        .par_iter()
        .map(|s| {
            let scores: Vec<f64> = terms
                .iter()
                .map(|t| t.log_weight + t.group_log_density(s, m))
                .collect();
            log_sum_exp(&scores)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// `sum_n log sum_k pi_k prod_m N(x_{n,m} | 0, Sigma_k)`.
pub fn log_likelihood(data: &ResidualTrainingSet, model: &GmmModel) -> Result<f64> {
    if data.patch_dim() != model.patch_dim() {
        return Err(Error::DimensionMismatch(format!(
            "training patches have dimension {}, model {}",
            data.patch_dim(),
            model.patch_dim()
        )));
    }
    Ok(total_log_likelihood(&scatters(data), data.group_size, model))
}

/// Responsibilities and effective counts of one E-step.
#[derive(Debug, Clone)]
pub struct EmState {
    /// `N x K`; row `n` holds `gamma_{n,k}`.
    pub responsibilities: DMatrix<f64>,
    pub counts: DVector<f64>,
    pub log_likelihood: f64,
}

fn e_step(scatters: &[DMatrix<f64>], m: usize, weights: &[f64], covs: &[DMatrix<f64>]) -> Result<EmState> {
    let k = weights.len();
    let terms = covs
        .iter()
        .zip(weights)
        .map(|(c, &w)| {
            let comp = GmmComponent::from_covariance(w, c)?;
            Ok(GaussianTerms::new(&comp, 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(Vec<f64>, f64)> = scatters
        .par_iter()
        .map(|s| {
            let scores: Vec<f64> = terms
                .iter()
                .map(|t| t.log_weight + t.group_log_density(s, m))
                .collect();
            let lse = log_sum_exp(&scores);
            let gamma: Vec<f64> = scores.iter().map(|v| (v - lse).exp()).collect();
            (gamma, lse)
        })
        .collect();
    let n = scatters.len();
    let mut responsibilities = DMatrix::zeros(n, k);
    let mut log_likelihood = 0.0;
    for (i, (gamma, lse)) in rows.into_iter().enumerate() {
        let sum: f64 = gamma.iter().sum();
        for (j, g) in gamma.into_iter().enumerate() {
            responsibilities[(i, j)] = g / sum;
        }
        log_likelihood += lse;
    }
    let counts = DVector::from_iterator(k, (0..k).map(|j| responsibilities.column(j).sum()));
    Ok(EmState {
        responsibilities,
        counts,
        log_likelihood,
    })
}

/// Diagnostics from [`train_gmm_report`].
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub model: GmmModel,
    /// Log-likelihood of the parameters entering each E-step, plus the final
    /// model's log-likelihood as the last entry.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

/// Trains a zero-mean GMM by EM. See [`train_gmm_report`].
pub fn train_gmm(
    data: &ResidualTrainingSet,
    k: usize,
    em_iters: usize,
    ridge: f64,
    seed: u64,
) -> Result<GmmModel> {
    Ok(train_gmm_report(data, k, em_iters, ridge, seed)?.model)
}

/// EM for a zero-mean mixture in which all columns of a group share one
/// component. The M-step sets
/// `Sigma_k = (1 / (M N_k)) sum_n gamma_{n,k} S_n + ridge I` and
/// `pi_k = N_k / N`. Initialization is k-means++ seeding on the per-group
/// sample covariances `S_n / M`.
pub fn train_gmm_report(
    data: &ResidualTrainingSet,
    k: usize,
    em_iters: usize,
    ridge: f64,
    seed: u64,
) -> Result<TrainingReport> {
    if k == 0 {
        return Err(Error::invalid("need at least one component"));
    }
    if data.len() < k {
        return Err(Error::invalid(format!(
            "{} groups cannot train {k} components",
            data.len()
        )));
    }
    if !(ridge > 0.0) {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    let n = data.patch_dim();
    let m = data.group_size;
    let scat = scatters(data);
    let signatures: Vec<DMatrix<f64>> = scat.iter().map(|s| s / m as f64).collect();
    let ridge_eye = DMatrix::<f64>::identity(n, n) * ridge;

    let (mut weights, mut covs) = kmeanspp_init(&signatures, k, &ridge_eye, seed);
    let mut lls = Vec::with_capacity(em_iters + 1);
    let mut reseeded = 0;
    let mut iterations = 0;

    for _ in 0..em_iters {
        let state = e_step(&scat, m, &weights, &covs)?;
        let ll = state.log_likelihood;
        let converged = lls
            .last()
            .map(|&prev: &f64| ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < EM_REL_TOL)
            .unwrap_or(false);
        lls.push(ll);
        iterations += 1;

        // M-step, accumulated in group order.
        let total = data.len() as f64;
        let mut new_covs = Vec::with_capacity(k);
        let mut new_weights = Vec::with_capacity(k);
        let mut empty = Vec::new();
        for j in 0..k {
            let nk = state.counts[j];
            if nk < EMPTY_COMPONENT {
                empty.push(j);
                new_covs.push(ridge_eye.clone());
                new_weights.push(0.0);
                continue;
            }
            let mut acc = DMatrix::zeros(n, n);
            for (i, s) in scat.iter().enumerate() {
                let g = state.responsibilities[(i, j)];
                if g != 0.0 {
                    for (a, v) in acc.as_mut_slice().iter_mut().zip(s.as_slice()) {
                        *a += g * v;
                    }
                }
            }
            acc /= m as f64 * nk;
            let sym = (&acc + acc.transpose()) * 0.5 + &ridge_eye;
            new_covs.push(sym);
            new_weights.push(nk / total);
        }
        if !empty.is_empty() {
            reseed_empty(&state, &signatures, &ridge_eye, &empty, &mut new_weights, &mut new_covs);
            reseeded += empty.len();
        }
        weights = new_weights;
        covs = new_covs;
        if converged {
            break;
        }
    }

    let components = weights
        .iter()
        .zip(&covs)
        .map(|(&w, c)| GmmComponent::from_covariance(w, c))
        .collect::<Result<Vec<_>>>()?;
    let mut model = GmmModel::new(
        components,
        data.patch_size,
        m,
        TrainingMeta {
            seed,
            samples: data.len(),
            em_iters: iterations,
        },
    )?;
    // Eigenvalues below the ridge only come from rounding.
    for c in &mut model.components {
        c.eigenvalues.iter_mut().for_each(|v| *v = v.max(ridge));
        c.covariance = recompose(&c.eigenvectors, &c.eigenvalues);
    }
    lls.push(total_log_likelihood(&scat, m, &model));
    Ok(TrainingReport {
        model,
        log_likelihoods: lls,
        iterations,
        reseeded,
    })
}

/// Reseeds empty components from the groups the model explains worst
/// (lowest maximum responsibility), then renormalizes the weights.
fn reseed_empty(
    state: &EmState,
    signatures: &[DMatrix<f64>],
    ridge_eye: &DMatrix<f64>,
    empty: &[usize],
    weights: &mut [f64],
    covs: &mut [DMatrix<f64>],
) {
    let mut order: Vec<usize> = (0..signatures.len()).collect();
    let max_resp: Vec<f64> = (0..signatures.len())
        .map(|i| state.responsibilities.row(i).max())
        .collect();
    order.sort_by(|&a, &b| max_resp[a].total_cmp(&max_resp[b]));
    let floor = 1.0 / signatures.len() as f64;
    for (slot, &j) in empty.iter().enumerate() {
        let src = order[slot % order.len()];
        covs[j] = &signatures[src] + ridge_eye;
        weights[j] = floor;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
}

fn frob_dist2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// k-means++ seeding on covariance signatures, then one hard assignment to
/// form initial covariances and weights.
fn kmeanspp_init(
    signatures: &[DMatrix<f64>],
    k: usize,
    ridge_eye: &DMatrix<f64>,
    seed: u64,
) -> (Vec<f64>, Vec<DMatrix<f64>>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let count = signatures.len();
    let mut centers = vec![rng.gen_range(0..count)];
    let mut d2: Vec<f64> = signatures
        .par_iter()
        .map(|s| frob_dist2(s, &signatures[centers[0]]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = count - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..count)
        };
        centers.push(next);
        let c = &signatures[next];
        let fresh: Vec<f64> = signatures.par_iter().map(|s| frob_dist2(s, c)).collect();
        for (d, f) in d2.iter_mut().zip(fresh) {
            *d = d.min(f);
        }
    }

    let assignment: Vec<usize> = signatures
        .par_iter()
        .map(|s| {
            let dists: Vec<f64> = centers
                .iter()
                .map(|&c| frob_dist2(s, &signatures[c]))
                .collect();
            let mut best = 0;
            for (i, &d) in dists.iter().enumerate() {
                if d < dists[best] {
                    best = i;
                }
            }
            best
        })
        .collect();

    let n = ridge_eye.nrows();
    let mut sums = vec![DMatrix::zeros(n, n); k];
    let mut sizes = vec![0usize; k];
    for (s, &a) in signatures.iter().zip(&assignment) {
        sums[a] += s;
        sizes[a] += 1;
    }
    let mut weights = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        // Every center is assigned at least itself unless it duplicates an
        // earlier center; fall back to the center's own signature.
        let (cov, size) = if sizes[j] > 0 {
            (&sums[j] / sizes[j] as f64, sizes[j])
        } else {
            (signatures[centers[j]].clone(), 1)
        };
        covs.push(cov + ridge_eye);
        weights.push(size as f64);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (weights, covs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_set(count: usize, p: usize, m: usize, seed: u64) -> ResidualTrainingSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = p * p;
        let groups = (0..count)
            .map(|i| {
                let scale = if i % 3 == 0 { 5.0 } else { 1.0 };
                let mut g = DMatrix::from_fn(n, m, |r, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * scale * (1.0 + r as f64)
                });
                subtract_group_mean(&mut g);
                g
            })
            .collect();
        ResidualTrainingSet::new(groups, p, m).unwrap()
    }

    fn diag_model(diags: &[(f64, Vec<f64>)]) -> GmmModel {
        let n = diags[0].1.len();
        let p = (n as f64).sqrt() as usize;
        let comps = diags
            .iter()
            .map(|(w, d)| {
                GmmComponent::from_covariance(*w, &DMatrix::from_diagonal(&DVector::from_vec(d.clone())))
                    .unwrap()
            })
            .collect();
        GmmModel::new(comps, p, 2, TrainingMeta::default()).unwrap()
    }

    #[test]
    fn constant_images_give_zero_residuals() {
        let imgs = vec![Image::filled(20, 20, 42.0)];
        let set = collect_residual_groups(&imgs, 4, 5, 10, 8, 3).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.groups.iter().all(|g| g.amax() == 0.0));
    }

    #[test]
    fn collection_is_deterministic() {
        let img = Image::from_fn(24, 20, |r, c| ((r * 7 + c * 13) % 17) as f64);
        let a = collect_residual_groups(std::slice::from_ref(&img), 4, 6, 12, 1, 9).unwrap();
        let b = collect_residual_groups(&[img], 4, 6, 12, 1, 9).unwrap();
        assert_eq!(a.groups, b.groups);
    }

    #[test]
    fn collection_rejects_empty_inputs() {
        assert!(collect_residual_groups(&[], 4, 6, 12, 1, 9).is_err());
        assert!(collect_residual_groups(&[Image::zeros(8, 8)], 4, 6, 12, 0, 9).is_err());
    }

    #[test]
    fn single_component_equals_second_moment() {
        let set = random_set(40, 2, 5, 1);
        let ridge = 1e-3;
        let model = train_gmm(&set, 1, 5, ridge, 0).unwrap();
        let n = 4;
        let mut oracle = DMatrix::<f64>::zeros(n, n);
        for g in &set.groups {
            for col in g.column_iter() {
                oracle += &col * col.transpose();
            }
        }
        oracle /= (set.len() * set.group_size) as f64;
        oracle += DMatrix::identity(n, n) * ridge;
        let c = &model.components()[0];
        assert_eq!(c.weight, 1.0);
        assert!((&c.covariance - &oracle).amax() < 1e-10 * oracle.amax());
    }

    #[test]
    fn zero_data_gives_ridge_covariances() {
        let groups = vec![DMatrix::zeros(4, 3); 6];
        let set = ResidualTrainingSet::new(groups, 2, 3).unwrap();
        let model = train_gmm(&set, 2, 4, 0.01, 5).unwrap();
        for c in model.components() {
            assert!((&c.covariance - DMatrix::identity(4, 4) * 0.01).amax() < 1e-15);
        }
    }

    #[test]
    fn em_is_monotone() {
        let set = random_set(120, 2, 6, 7);
        let report = train_gmm_report(&set, 3, 30, 1e-3, 2).unwrap();
        for w in report.log_likelihoods.windows(2) {
            assert!(w[1] - w[0] >= -1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        let total: f64 = report.model.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn responsibilities_rows_sum_to_one() {
        let set = random_set(30, 2, 4, 3);
        let scat = scatters(&set);
        let covs = vec![DMatrix::identity(4, 4), DMatrix::identity(4, 4) * 30.0];
        let state = e_step(&scat, 4, &[0.3, 0.7], &covs).unwrap();
        for i in 0..30 {
            assert!((state.responsibilities.row(i).sum() - 1.0).abs() < 1e-10);
        }
        let total: f64 = state.counts.sum();
        assert!((total - 30.0).abs() < 1e-9);
    }

    #[test]
    fn log_likelihood_of_zero_patch_under_standard_normal() {
        let model = diag_model(&[(1.0, vec![1.0; 4])]);
        let set = ResidualTrainingSet::new(vec![DMatrix::zeros(4, 1)], 2, 1).unwrap();
        let ll = log_likelihood(&set, &model).unwrap();
        assert!((ll + 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let c = GmmComponent::from_covariance(0.5, &DMatrix::identity(4, 4)).unwrap();
        let mut doubled = c.clone();
        doubled.weight = 1.0;
        assert!(GmmModel::new(vec![c, doubled], 2, 2, TrainingMeta::default()).is_err());
    }

    #[test]
    fn selects_wide_component_for_large_residual() {
        let model = diag_model(&[(0.5, vec![1.0; 4]), (0.5, vec![100.0; 4])]);
        let residual = DMatrix::from_fn(4, 3, |r, c| if (r + c) % 2 == 0 { 10.0 } else { -10.0 });
        assert_eq!(select_component(&residual, &model, 0.0).unwrap(), 1);
    }

    #[test]
    fn zero_residual_prefers_smallest_weighted_determinant() {
        let model = diag_model(&[(0.5, vec![4.0; 4]), (0.5, vec![1.0; 4])]);
        assert_eq!(select_component(&DMatrix::zeros(4, 3), &model, 0.5).unwrap(), 1);
    }

    #[test]
    fn single_component_always_zero() {
        let model = diag_model(&[(1.0, vec![2.0; 4])]);
        let r = DMatrix::from_element(4, 2, 100.0);
        assert_eq!(select_component(&r, &model, 3.0).unwrap(), 0);
    }

    #[test]
    fn select_rejects_negative_sigma() {
        let model = diag_model(&[(1.0, vec![2.0; 4])]);
        assert!(select_component(&DMatrix::zeros(4, 2), &model, -1.0).is_err());
    }

    #[test]
    fn dictionary_of_identity_and_diagonal() {
        let model = diag_model(&[(0.5, vec![1.0; 4]), (0.5, vec![1.0, 4.0, 1.0, 1.0])]);
        let (d, l) = component_dictionary(&model, 0).unwrap();
        assert!((d - DMatrix::<f64>::identity(4, 4)).amax() < 1e-14);
        assert!(l.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        let (d, l) = component_dictionary(&model, 1).unwrap();
        assert!((l[0] - 4.0).abs() < 1e-14);
        assert!((d[(1, 0)] - 1.0).abs() < 1e-14);
        assert!(component_dictionary(&model, 2).is_err());
    }

    #[test]
    fn jgmm_round_trip_and_truncation() {
        let set = random_set(30, 2, 4, 11);
        let model = train_gmm(&set, 2, 5, 1e-3, 4).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(bytes.len(), GmmModel::file_size(4, 2));
        let back = GmmModel::from_bytes(&bytes).unwrap();
        for (a, b) in model.components().iter().zip(back.components()) {
            assert!((a.weight - b.weight).abs() <= 1e-12);
            assert!((&a.covariance - &b.covariance).amax() <= 1e-12);
            assert_eq!(a.eigenvectors, b.eigenvectors);
        }
        assert!(matches!(
            GmmModel::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::CorruptModel(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(GmmModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn jgmm_rejects_non_orthonormal_vectors() {
        let model = diag_model(&[(1.0, vec![3.0, 2.0, 1.0, 0.5])]);
        let mut bytes = model.to_bytes();
        // first eigenvector entry lives after header, weight and 4 eigenvalues
        let off = JGMM_HEADER_LEN + 8 + 4 * 8;
        bytes[off..off + 8].copy_from_slice(&2.0f64.to_le_bytes());
        assert!(matches!(GmmModel::from_bytes(&bytes), Err(Error::CorruptModel(_))));
    }

    #[test]
    fn file_size_for_full_model() {
        assert_eq!(GmmModel::file_size(64, 64), 28 + 64 * 8 * (1 + 64 + 4096));
    }
}
