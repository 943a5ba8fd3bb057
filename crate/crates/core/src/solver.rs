//! Split Bregman reconstruction.
//!
//! Each outer iteration runs
//! 1. the x-subproblem `min 1/2 |y - Phi x|^2 + mu/2 |x - z - b|^2`, solved
//!    in closed form (the operator is row-orthonormal per block) or by a
//!    few warm-started gradient steps, see [`XSolver`],
//! 2. the groupwise sparsifying step on `x - b`, aggregated into `z`,
//! 3. the Bregman update `b <- b - (x - z)`.
//!
//! All images inside the loop live on the padded measurement grid; the
//! returned image is cropped to the original size and clamped to `[0, 255]`.

use std::fmt::Write as _;
use std::path::Path;

use log::debug;
use rayon::prelude::*;

use crate::binio::write_atomic;
use crate::coder::{CoderParams, GroupCoder, DEFAULT_SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::gmm_prior::GmmModel;
use crate::image::Image;
use crate::metrics::psnr;
use crate::patch_groups::{gather_group, group_image, reference_positions, scatter_accumulate, GroupingParams};
use crate::sensing::{initial_estimate, Measurements};

/// PSNR must fall this many iterations in a row to trigger the
/// reference-based early stop.
const PSNR_DECREASE_PATIENCE: usize = 3;

/// How the quadratic x-subproblem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XSolver {
    /// `inner_grad_steps` gradient steps of size `eta`, warm-started.
    Gradient,
    /// Closed form for a row-orthonormal operator:
    /// `(Phi^T Phi + mu I)^-1 = P / (1 + mu) + (I - P) / mu` with `P = Phi^T Phi`.
    Exact,
}

impl std::str::FromStr for XSolver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Self::Gradient),
            "exact" => Ok(Self::Exact),
            other => Err(Error::Config(format!("unknown x solver {other:?}"))),
        }
    }
}

impl std::fmt::Display for XSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gradient => "gradient",
            Self::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub subrate: f64,
    pub patch_size: usize,
    pub group_size: usize,
    pub stride: usize,
    pub window: usize,
    /// Expected number of mixture components; checked against the model.
    pub components: usize,
    pub sigma_n: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Gradient step; `None` means `1 / (1 + mu)`.
    pub eta: Option<f64>,
    pub inner_grad_steps: usize,
    pub x_solver: XSolver,
    pub max_iter: usize,
    pub stop_tol: f64,
    pub seed: u64,
    pub early_stop_on_reference: bool,
    /// Replace the measured component of each iterate by the measured
    /// values before cropping (noiseless measurements).
    pub project_final: bool,
    pub sigma_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::for_subrate(0.3)
    }
}

impl SolverConfig {
    /// Defaults for a subrate: patch 6 and lambda 0.082 at low rates
    /// (below 0.15), patch 8 and lambda 0.146 otherwise.
    pub fn for_subrate(subrate: f64) -> Self {
        let (patch_size, lambda) = if subrate < 0.15 { (6, 0.082) } else { (8, 0.146) };
        Self {
            subrate,
            patch_size,
            group_size: 60,
            stride: 4,
            window: 40,
            components: 64,
            sigma_n: 4.5,
            lambda,
            mu: 0.0025,
            eta: None,
            inner_grad_steps: 10,
            x_solver: XSolver::Exact,
            max_iter: 120,
            stop_tol: 5e-4,
            seed: 0,
            early_stop_on_reference: false,
            project_final: true,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.eta.unwrap_or(1.0 / (1.0 + self.mu))
    }

    pub fn grouping(&self) -> GroupingParams {
        GroupingParams {
            patch_size: self.patch_size,
            group_size: self.group_size,
            stride: self.stride,
            window: self.window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lambda", self.lambda), ("mu", self.mu), ("sigma_floor", self.sigma_floor)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!("eta must be >= 0, got {eta}")));
            }
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return Err(Error::Config(format!("sigma_n must be >= 0, got {}", self.sigma_n)));
        }
        if !(self.subrate > 0.0 && self.subrate <= 1.0) {
            return Err(Error::Config(format!("subrate must lie in (0, 1], got {}", self.subrate)));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config("stop_tol must be >= 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be >= 1".into()));
        }
        self.grouping().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Groupwise threshold weight `lambda * Q / (mu * N)` with
/// `Q = n * m * M_groups` and `N` the pixel count.
pub fn lambda1_from_config(cfg: &SolverConfig, m_groups: usize, n_pixels: usize) -> f64 {
    let q = (cfg.patch_size * cfg.patch_size * cfg.group_size * m_groups) as f64;
    cfg.lambda * q / (cfg.mu * n_pixels as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub rel_change: f64,
    pub psnr: Option<f64>,
    /// `|y - Phi x|` of the iterate, before any final projection.
    pub data_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Image,
    pub b: Image,
    pub z: Image,
    pub iter: usize,
    pub trace: Vec<TraceRecord>,
}

impl SolverState {
    /// `x = z = Phi^T y`, `b = 0`.
    pub fn initial(meas: &Measurements) -> Self {
        let x = initial_estimate(meas);
        let b = Image::zeros(x.width(), x.height());
        Self {
            z: x.clone(),
            x,
            b,
            iter: 0,
            trace: Vec::new(),
        }
    }
}

/// `1/2 |y - Phi x|^2 + mu/2 |x - z - b|^2`.
pub fn x_objective(x: &Image, meas: &Measurements, z: &Image, b: &Image, mu: f64) -> Result<f64> {
    let r = meas.forward(x)? - meas.blocks();
    let d = x.zip_map(z, |a, c| a - c).zip_map(b, |a, c| a - c);
    Ok(0.5 * r.norm_squared() + 0.5 * mu * d.dot(&d))
}

/// `Phi^T Phi x - Phi^T y + mu (x - z - b)`.
pub fn x_gradient(x: &Image, meas: &Measurements, z: &Image, b: &Image, mu: f64) -> Result<Image> {
    let data = meas.data_gradient(x)?;
    let mut g = data;
    for (((gv, &xv), &zv), &bv) in g
        .pixels_mut()
        .iter_mut()
        .zip(x.pixels())
        .zip(z.pixels())
        .zip(b.pixels())
    {
        *gv += mu * (xv - zv - bv);
    }
    Ok(g)
}

/// Exact minimizer of `1/2 |y - Phi x|^2 + mu/2 |x - z - b|^2` for a
/// row-orthonormal `Phi`.
pub fn x_solve_exact(meas: &Measurements, z: &Image, b: &Image, mu: f64) -> Result<Image> {
    z.check_shape(b, "z vs b")?;
    let v = z.zip_map(b, |a, c| a + c);
    let pv = meas.adjoint_of(&meas.forward(&v)?);
    let aty = meas.adjoint_of(meas.blocks());
    let scale = 1.0 / (1.0 + mu);
    let mut x = v.zip_map(&pv, |a, p| a - p);
    for ((xv, &p), &a) in x.pixels_mut().iter_mut().zip(pv.pixels()).zip(aty.pixels()) {
        *xv += scale * (a + mu * p);
    }
    Ok(x)
}

/// Updates `x` with the configured solver: `cfg.inner_grad_steps`
/// gradient steps from `state.x`, or the closed-form solve.
pub fn x_update(state: &SolverState, meas: &Measurements, cfg: &SolverConfig) -> Result<Image> {
    state.x.check_shape(&state.z, "x vs z")?;
    state.x.check_shape(&state.b, "x vs b")?;
    if cfg.x_solver == XSolver::Exact {
        let x = x_solve_exact(meas, &state.z, &state.b, cfg.mu)?;
        if !x.is_finite() {
            return Err(Error::Diverged { iter: state.iter });
        }
        return Ok(x);
    }
    let eta = cfg.step_size();
    let mut x = state.x.clone();
    for _ in 0..cfg.inner_grad_steps {
        let g = x_gradient(&x, meas, &state.z, &state.b, cfg.mu)?;
        for (xv, gv) in x.pixels_mut().iter_mut().zip(g.pixels()) {
            *xv -= eta * gv;
        }
        if !x.is_finite() {
            return Err(Error::Diverged { iter: state.iter });
        }
    }
    Ok(x)
}

/// Groups and codes `x - b`, returning the aggregated estimate `z`.
pub fn alpha_update(state: &SolverState, model: &GmmModel, cfg: &SolverConfig) -> Result<Image> {
    let stage = SparseStage::new(model, cfg, state.x.width(), state.x.height())?;
    stage.run(&state.x.zip_map(&state.b, |x, b| x - b))
}

/// `b - (x - z)`.
pub fn b_update(state: &SolverState) -> Image {
    let mut b = state.b.clone();
    for ((bv, &x), &z) in b.pixels_mut().iter_mut().zip(state.x.pixels()).zip(state.z.pixels()) {
        *bv -= x - z;
    }
    b
}

/// Group coder with the threshold fixed for one image geometry.
struct SparseStage<'m> {
    coder: GroupCoder<'m>,
    grouping: GroupingParams,
}

impl<'m> SparseStage<'m> {
    fn new(model: &'m GmmModel, cfg: &SolverConfig, width: usize, height: usize) -> Result<Self> {
        cfg.validate()?;
        if model.patch_size() != cfg.patch_size {
            return Err(Error::DimensionMismatch(format!(
                "model patch size {} vs configured {}",
                model.patch_size(),
                cfg.patch_size
            )));
        }
        let grouping = cfg.grouping();
        let m_groups = reference_positions(width, height, cfg.patch_size, cfg.stride)?.len();
        let lambda1 = lambda1_from_config(cfg, m_groups, width * height);
        let params = CoderParams {
            sigma_n: cfg.sigma_n,
            lambda1,
            sigma_floor: cfg.sigma_floor,
        };
        debug!("lambda1 = {lambda1:.4} over {m_groups} groups");
        Ok(Self {
            coder: GroupCoder::new(model, params)?,
            grouping,
        })
    }

    fn run(&self, noisy: &Image) -> Result<Image> {
        let indices = group_image(noisy, &self.grouping)?;
        let coded = indices
            .par_iter()
            .map(|idx| {
                let mut group = gather_group(noisy, idx)?;
                group.data = self.coder.code(&group.data)?.0;
                Ok(group)
            })
            .collect::<Result<Vec<_>>>()?;
        let agg = scatter_accumulate(&coded, noisy.width(), noisy.height())?;
        debug_assert_eq!(agg.uncovered, 0);
        Ok(agg.image)
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Cropped to the original size and clamped to `[0, 255]`.
    pub image: Image,
    pub trace: Vec<TraceRecord>,
    /// Iteration the image came from (0 = initial estimate).
    pub best_iter: usize,
    /// PSNR of the initial estimate, when a reference was given.
    pub initial_psnr: Option<f64>,
}

fn finalize(x: &Image, meas: &Measurements, cfg: &SolverConfig) -> Result<Image> {
    let x = if cfg.project_final {
        meas.project_consistent(x)?
    } else {
        x.clone()
    };
    Ok(meas.crop_to_original(&x).clamped(0.0, 255.0))
}

/// Full reconstruction loop. With a reference image the trace carries PSNR;
/// with `early_stop_on_reference` the loop also stops once PSNR has dropped
/// for three iterations in a row and the best-PSNR iterate is returned.
pub fn reconstruct(
    meas: &Measurements,
    model: &GmmModel,
    cfg: &SolverConfig,
    reference: Option<&Image>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if model.num_components() != cfg.components {
        return Err(Error::Config(format!(
            "model has {} components, config expects {}",
            model.num_components(),
            cfg.components
        )));
    }
    if let Some(r) = reference {
        if r.width() != meas.orig_width() || r.height() != meas.orig_height() {
            return Err(Error::DimensionMismatch(format!(
                "reference {}x{} vs measured image {}x{}",
                r.width(),
                r.height(),
                meas.orig_width(),
                meas.orig_height()
            )));
        }
    }
    let stage = SparseStage::new(model, cfg, meas.padded_width(), meas.padded_height())?;
    let mut state = SolverState::initial(meas);

    let first = finalize(&state.x, meas, cfg)?;
    let initial_psnr = reference.map(|r| psnr(&first, r)).transpose()?;
    let mut best = (first, 0usize, initial_psnr.unwrap_or(f64::NEG_INFINITY));
    let mut last = best.0.clone();
    let mut last_iter = 0;
    let mut decreasing = 0usize;
    let mut prev_psnr = initial_psnr;

    for l in 1..=cfg.max_iter {
        state.iter = l;
        let x_new = x_update(&state, meas, cfg)?;
        let x_norm = state.x.norm();
        let rel_change = x_new.zip_map(&state.x, |a, b| a - b).norm() / x_norm.max(f64::MIN_POSITIVE);
        state.x = x_new;
        state.z = stage.run(&state.x.zip_map(&state.b, |x, b| x - b))?;
        state.b = b_update(&state);

        let data_residual = (meas.forward(&state.x)? - meas.blocks()).norm();
        let out = finalize(&state.x, meas, cfg)?;
        let p = reference.map(|r| psnr(&out, r)).transpose()?;
        state.trace.push(TraceRecord {
            iter: l,
            rel_change,
            psnr: p,
            data_residual,
        });
        debug!("iter {l}: rel_change {rel_change:.3e} psnr {p:?}");

        if let Some(p) = p {
            if p > best.2 {
                best = (out.clone(), l, p);
            }
            decreasing = match prev_psnr {
                Some(q) if p < q => decreasing + 1,
                _ => 0,
            };
            prev_psnr = Some(p);
        }
        last = out;
        last_iter = l;

        // With z = x and b = 0 the first x-update cannot move a consistent
        // initial estimate, so the change test only applies afterwards.
        if l > 1 && rel_change < cfg.stop_tol {
            break;
        }
        if reference.is_some() && cfg.early_stop_on_reference && decreasing >= PSNR_DECREASE_PATIENCE {
            break;
        }
    }

    let (image, best_iter) = if reference.is_some() && cfg.early_stop_on_reference {
        (best.0, best.1)
    } else {
        (last, last_iter)
    };
    Ok(Reconstruction {
        image,
        trace: state.trace,
        best_iter,
        initial_psnr,
    })
}

/// CSV with columns `iter,rel_change,psnr`; psnr is empty without a
/// reference and `inf` for exact reconstructions.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("iter,rel_change,psnr\n");
    for r in trace {
        let p = match r.psnr {
            Some(v) if v.is_infinite() => "inf".to_string(),
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        let _ = writeln!(out, "{},{},{}", r.iter, r.rel_change, p);
    }
    out
}

pub fn write_trace_csv(trace: &[TraceRecord], path: &Path) -> Result<()> {
    write_atomic(path, trace_csv(trace).as_bytes())
}
