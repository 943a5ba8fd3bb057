//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every solver
//! parameter has a key named after its [`SolverConfig`] field; paths use the
//! keys `meas`, `model`, `out`, `reference` and `trace`. Unknown or repeated
//! keys are errors. Keys that are absent keep the defaults for the
//! configured (or measured) subrate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunPaths {
    pub meas: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub paths: RunPaths,
}

const SOLVER_KEYS: &[&str] = &[
    "subrate",
    "patch_size",
    "group_size",
    "stride",
    "window",
    "components",
    "sigma_n",
    "lambda",
    "mu",
    "eta",
    "inner_grad_steps",
    "x_solver",
    "max_iter",
    "stop_tol",
    "seed",
    "early_stop_on_reference",
    "project_final",
    "sigma_floor",
];

const PATH_KEYS: &[&str] = &["meas", "model", "out", "reference", "trace"];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if !SOLVER_KEYS.contains(&key.as_str()) && !PATH_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
        }
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Parses `text`; `fallback_subrate` picks the defaults when the file
    /// has no `subrate` key.
    pub fn parse(text: &str, fallback_subrate: Option<f64>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let subrate = match pairs.iter().find(|(k, _)| k == "subrate") {
            Some((k, v)) => parse_value(k, v)?,
            None => fallback_subrate.unwrap_or(SolverConfig::default().subrate),
        };
        let mut s = SolverConfig::for_subrate(subrate);
        let mut paths = RunPaths::default();
        for (key, value) in &pairs {
            let v = value.as_str();
            let k = key.as_str();
            match k {
                "subrate" => {}
                "patch_size" => s.patch_size = parse_value(k, v)?,
                "group_size" => s.group_size = parse_value(k, v)?,
                "stride" => s.stride = parse_value(k, v)?,
                "window" => s.window = parse_value(k, v)?,
                "components" => s.components = parse_value(k, v)?,
                "sigma_n" => s.sigma_n = parse_value(k, v)?,
                "lambda" => s.lambda = parse_value(k, v)?,
                "mu" => s.mu = parse_value(k, v)?,
                "eta" => {
                    s.eta = if v == "auto" { None } else { Some(parse_value(k, v)?) }
                }
                "inner_grad_steps" => s.inner_grad_steps = parse_value(k, v)?,
                "x_solver" => s.x_solver = v.parse()?,
                "max_iter" => s.max_iter = parse_value(k, v)?,
                "stop_tol" => s.stop_tol = parse_value(k, v)?,
                "seed" => s.seed = parse_value(k, v)?,
                "early_stop_on_reference" => s.early_stop_on_reference = parse_value(k, v)?,
                "project_final" => s.project_final = parse_value(k, v)?,
                "sigma_floor" => s.sigma_floor = parse_value(k, v)?,
                "meas" => paths.meas = Some(v.into()),
                "model" => paths.model = Some(v.into()),
                "out" => paths.out = Some(v.into()),
                "reference" => paths.reference = Some(v.into()),
                "trace" => paths.trace = Some(v.into()),
                _ => unreachable!("keys are checked in parse_pairs"),
            }
        }
        s.validate()?;
        Ok(Self { solver: s, paths })
    }

    pub fn load(path: &Path, fallback_subrate: Option<f64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, fallback_subrate)
    }

    pub fn to_text(&self) -> String {
        let s = &self.solver;
        let mut out = String::new();
        let _ = writeln!(out, "subrate = {}", s.subrate);
        let _ = writeln!(out, "patch_size = {}", s.patch_size);
        let _ = writeln!(out, "group_size = {}", s.group_size);
        let _ = writeln!(out, "stride = {}", s.stride);
        let _ = writeln!(out, "window = {}", s.window);
        let _ = writeln!(out, "components = {}", s.components);
        let _ = writeln!(out, "sigma_n = {}", s.sigma_n);
        let _ = writeln!(out, "lambda = {}", s.lambda);
        let _ = writeln!(out, "mu = {}", s.mu);
        match s.eta {
            Some(eta) => {
                let _ = writeln!(out, "eta = {eta}");
            }
            None => out.push_str("eta = auto\n"),
        }
        let _ = writeln!(out, "inner_grad_steps = {}", s.inner_grad_steps);
        let _ = writeln!(out, "x_solver = {}", s.x_solver);
        let _ = writeln!(out, "max_iter = {}", s.max_iter);
        let _ = writeln!(out, "stop_tol = {}", s.stop_tol);
        let _ = writeln!(out, "seed = {}", s.seed);
        let _ = writeln!(out, "early_stop_on_reference = {}", s.early_stop_on_reference);
        let _ = writeln!(out, "project_final = {}", s.project_final);
        let _ = writeln!(out, "sigma_floor = {}", s.sigma_floor);
        let paths = [
            ("meas", &self.paths.meas),
            ("model", &self.paths.model),
            ("out", &self.paths.out),
            ("reference", &self.paths.reference),
            ("trace", &self.paths.trace),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                let _ = writeln!(out, "{k} = {}", p.display());
            }
        }
        out
    }
}
