//! Scenario files: JSON schema, parsing and semantic validation.

use std::path::{Path, PathBuf};

use mflab_core::gaussian_flow::GaussianState;
use mflab_core::{DMatrix, DVector, Dynamics, ProblemSpec, SymMatrix};
use serde::Deserialize;

/// A schema or semantic error located by JSON pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError {
    pub pointer: String,
    pub message: String,
}

impl std::fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let at = if self.pointer.is_empty() {
            "/"
        } else {
            &self.pointer
        };
        write!(f, "at {at}: {}", self.message)
    }
}

impl std::error::Error for ScenarioError {}

fn err(pointer: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError {
        pointer: pointer.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Moments,
    GaussianFlow,
    LinearStability,
    MeanFieldStability,
    Particles,
    Equilibration,
    Sharpness,
    AppendixChecks,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Moments => "moments",
            Experiment::GaussianFlow => "gaussian-flow",
            Experiment::LinearStability => "linear-stability",
            Experiment::MeanFieldStability => "mean-field-stability",
            Experiment::Particles => "particles",
            Experiment::Equilibration => "equilibration",
            Experiment::Sharpness => "sharpness",
            Experiment::AppendixChecks => "appendix-checks",
        }
    }

    fn needs_problem(self) -> bool {
        self != Experiment::AppendixChecks
    }

    fn gaussian_inits(self) -> usize {
        match self {
            Experiment::LinearStability | Experiment::MeanFieldStability => 2,
            Experiment::Moments
            | Experiment::GaussianFlow
            | Experiment::Equilibration
            | Experiment::Sharpness => 1,
            Experiment::Particles | Experiment::AppendixChecks => 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    #[serde(rename = "Gamma")]
    pub gamma: Vec<Vec<f64>>,
    #[serde(rename = "Gamma0")]
    pub gamma0: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBlock {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Eki,
    EkiSde,
    Eks,
    Coupled,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    #[serde(rename = "J")]
    pub j: usize,
    pub seed: u64,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<Vec<f64>>,
    pub scheme: SchemeName,
    /// Observation noise covariance for EKI schemes; defaults to `Gamma`.
    #[serde(default)]
    pub sigma_noise: Option<Vec<Vec<f64>>>,
    /// Disable the step-size guard of the SDE schemes.
    #[serde(default)]
    pub unguarded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub spacing: Spacing,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub quadrature_panels: Option<usize>,
    /// Tail fraction of the grid used for rate fits.
    #[serde(default = "default_fit_window")]
    pub fit_window: f64,
    /// Equilibration tolerance on the final `W2`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_grid_points() -> usize {
    101
}
fn default_record_every() -> usize {
    1
}
fn default_fit_window() -> f64 {
    0.5
}
fn default_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendixBlock {
    pub trials: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub experiment: Experiment,
    #[serde(default)]
    pub problem: Option<ProblemBlock>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub init: Vec<GaussianBlock>,
    /// Initial covariance of the frozen flow in linear experiments; defaults to the first init.
    #[serde(default, rename = "C0")]
    pub c0: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub ensemble: Option<EnsembleBlock>,
    #[serde(default)]
    pub appendix: Option<AppendixBlock>,
    #[serde(default)]
    pub numerics: Option<Numerics>,
    #[serde(default)]
    pub output: Option<String>,
}

/// A scenario with every block converted to core types.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub experiment: Experiment,
    pub dynamics: Option<Dynamics>,
    pub inits: Vec<GaussianState>,
    pub c0: Option<SymMatrix>,
    pub ensemble: Option<PreparedEnsemble>,
    pub appendix: Option<AppendixBlock>,
    pub numerics: Option<Numerics>,
    pub grid: Vec<f64>,
    pub output: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PreparedEnsemble {
    pub j: usize,
    pub seed: u64,
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    pub scheme: SchemeName,
    pub sigma_noise: SymMatrix,
    pub guard: bool,
}

/// Parses scenario text, reporting the JSON pointer of the first schema error.
pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        err(pointer, e.into_inner().to_string())
    })
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

fn matrix(rows: &[Vec<f64>], at: &str) -> Result<DMatrix<f64>, ScenarioError> {
    let r = rows.len();
    if r == 0 {
        return Err(err(at, "matrix must have at least one row"));
    }
    let c = rows[0].len();
    if c == 0 {
        return Err(err(format!("{at}/0"), "matrix rows must be non-empty"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(err(
                format!("{at}/{i}"),
                format!("row has {} entries, expected {c}", row.len()),
            ));
        }
        if let Some(k) = row.iter().position(|v| !v.is_finite()) {
            return Err(err(format!("{at}/{i}/{k}"), "entry must be finite"));
        }
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn sym(rows: &[Vec<f64>], at: &str, dim: usize) -> Result<SymMatrix, ScenarioError> {
    let m = matrix(rows, at)?;
    if m.nrows() != dim || m.ncols() != dim {
        return Err(err(
            at,
            format!(
                "expected a {dim}x{dim} matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    SymMatrix::try_from_symmetric(m, 1e-12).map_err(|e| err(at, e.to_string()))
}

fn vector(v: &[f64], at: &str, dim: usize) -> Result<DVector<f64>, ScenarioError> {
    if v.len() != dim {
        return Err(err(at, format!("expected {dim} entries, got {}", v.len())));
    }
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(err(format!("{at}/{k}"), "entry must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn dynamics(p: &ProblemBlock, sigma: f64) -> Result<Dynamics, ScenarioError> {
    let g = matrix(&p.g, "/problem/G")?;
    let (k, d) = g.shape();
    let gamma = sym(&p.gamma, "/problem/Gamma", k)?;
    let gamma0 = sym(&p.gamma0, "/problem/Gamma0", d)?;
    let y = vector(&p.y, "/problem/y", k)?;
    let spec = ProblemSpec::new(g, gamma, gamma0, y).map_err(|e| err("/problem", e.to_string()))?;
    Dynamics::new(spec, sigma).map_err(|e| err("/sigma", e.to_string()))
}

fn time_grid(n: &Numerics) -> Result<Vec<f64>, ScenarioError> {
    if !(n.t_start >= 0.0) {
        return Err(err("/numerics/t_start", "must be non-negative"));
    }
    if !(n.t_end >= n.t_start) || !n.t_end.is_finite() {
        return Err(err(
            "/numerics/t_end",
            "must be finite and at least t_start",
        ));
    }
    if n.grid_points < 2 {
        return Err(err("/numerics/grid_points", "need at least 2 grid points"));
    }
    let k = (n.grid_points - 1) as f64;
    let grid = match n.spacing {
        Spacing::Linear => (0..n.grid_points)
            .map(|i| n.t_start + (n.t_end - n.t_start) * i as f64 / k)
            .collect(),
        Spacing::Log => {
            if !(n.t_start > 0.0) {
                return Err(err("/numerics/t_start", "log spacing needs t_start > 0"));
            }
            let ratio = n.t_end / n.t_start;
            (0..n.grid_points)
                .map(|i| n.t_start * ratio.powf(i as f64 / k))
                .collect()
        }
    };
    Ok(grid)
}

impl Scenario {
    /// Checks experiment-specific blocks and converts them to core types.
    pub fn prepare(&self) -> Result<Prepared, ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(err("/name", "must be non-empty"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(err("/sigma", "must be finite and non-negative"));
        }
        let exp = self.experiment;
        let dynamics = match (&self.problem, exp.needs_problem()) {
            (Some(p), _) => Some(dynamics(p, self.sigma)?),
            (None, true) => return Err(err("/problem", format!("required for {}", exp.as_str()))),
            (None, false) => None,
        };
        let dim = dynamics.as_ref().map(|d| d.dim());

        let want = exp.gaussian_inits();
        if self.init.len() < want {
            return Err(err(
                format!("/init/{}", self.init.len()),
                format!("{} needs {want} initial Gaussian(s)", exp.as_str()),
            ));
        }
        let mut inits = Vec::new();
        if let Some(d) = dim {
            for (i, b) in self.init.iter().enumerate().take(want) {
                let at = format!("/init/{i}");
                let mean = vector(&b.mean, &format!("{at}/mean"), d)?;
                let cov = sym(&b.cov, &format!("{at}/cov"), d)?;
                inits.push(
                    GaussianState::new(mean, cov)
                        .map_err(|e| err(format!("{at}/cov"), e.to_string()))?,
                );
            }
        }

        let c0 = match (&self.c0, dim) {
            (Some(rows), Some(d)) => Some(sym(rows, "/C0", d)?),
            _ => None,
        };
        if matches!(exp, Experiment::GaussianFlow | Experiment::LinearStability)
            && c0.is_none()
            && inits
                .first()
                .is_some_and(|f| !mflab_core::symmat::is_spd(&f.cov))
        {
            return Err(err(
                "/C0",
                "required when the first init covariance is singular",
            ));
        }

        let ensemble = if exp == Experiment::Particles {
            let b = self
                .ensemble
                .as_ref()
                .ok_or_else(|| err("/ensemble", "required for particles"))?;
            let d = dim.expect("particles need a problem");
            if b.j < 2 {
                return Err(err("/ensemble/J", "need at least 2 particles"));
            }
            let dy = dynamics.as_ref().expect("checked above");
            let sigma_noise = match &b.sigma_noise {
                Some(rows) => sym(rows, "/ensemble/sigma_noise", dy.problem.obs_dim())?,
                None => dy.problem.gamma().clone(),
            };
            if b.scheme == SchemeName::Coupled && c0.is_none() {
                return Err(err(
                    "/C0",
                    "the coupled scheme needs the frozen covariance C0",
                ));
            }
            Some(PreparedEnsemble {
                j: b.j,
                seed: b.seed,
                mean: vector(&b.init_mean, "/ensemble/init_mean", d)?,
                cov: sym(&b.init_cov, "/ensemble/init_cov", d)?,
                scheme: b.scheme,
                sigma_noise,
                guard: !b.unguarded,
            })
        } else {
            None
        };

        let appendix = if exp == Experiment::AppendixChecks {
            let a = self
                .appendix
                .clone()
                .ok_or_else(|| err("/appendix", "required for appendix-checks"))?;
            if a.trials == 0 {
                return Err(err("/appendix/trials", "must be positive"));
            }
            if a.dim == 0 {
                return Err(err("/appendix/dim", "must be positive"));
            }
            Some(a)
        } else {
            None
        };

        let (numerics, grid) = match (&self.numerics, exp) {
            (None, Experiment::AppendixChecks) => (None, Vec::new()),
            (None, _) => return Err(err("/numerics", format!("required for {}", exp.as_str()))),
            (Some(n), _) => {
                if let Some(h) = n.h {
                    if !(h > 0.0) || !h.is_finite() {
                        return Err(err("/numerics/h", "must be positive and finite"));
                    }
                }
                if n.record_every == 0 {
                    return Err(err("/numerics/record_every", "must be at least 1"));
                }
                if n.quadrature_panels.is_some_and(|p| p < 2) {
                    return Err(err("/numerics/quadrature_panels", "need at least 2 panels"));
                }
                if !(n.fit_window > 0.0 && n.fit_window <= 1.0) {
                    return Err(err("/numerics/fit_window", "must lie in (0, 1]"));
                }
                if !(n.tolerance > 0.0) {
                    return Err(err("/numerics/tolerance", "must be positive"));
                }
                (Some(n.clone()), time_grid(n)?)
            }
        };

        let output = PathBuf::from(self.output.clone().unwrap_or_else(|| self.name.clone()));
        Ok(Prepared {
            name: self.name.clone(),
            experiment: exp,
            dynamics,
            inits,
            c0,
            ensemble,
            appendix,
            numerics,
            grid,
            output,
        })
    }
}
