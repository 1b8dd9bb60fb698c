//! Monte Carlo campaigns: convergence rates, cut-off thresholds, deviation
//! bounds for the initial sampling, and monitors along deterministic runs.

mod convergence;
mod deviation;
mod monitor;

pub use convergence::{convergence_study, cutoff_study, ConvergenceReport, CutoffEntry, CutoffReport, L1Check, PerN};
pub use deviation::{
    clopper_pearson, deviation_study_dmin, deviation_study_linf, deviation_study_w1, linf_deviation_bound, DminReport, LinfReport,
    LinfRow, W1DevReport, W1DevRow,
};
pub use monitor::{deterministic_monitor, MonitorReport};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::KernelSpec;
use crate::sampling::{epsilon_scale, DensityKind, DensitySpec, Mollifier};

/// Cut-off order in units of `eps`: `eta = eps^m_bar`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffConfig {
    pub m_bar: f64,
}

/// Kernel parameters of a study; the cut-off scale follows `N` through `eps(N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub alpha: f64,
    pub strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<CutoffConfig>,
}

impl KernelConfig {
    pub fn m_bar(&self) -> Option<f64> {
        self.cutoff.map(|c| c.m_bar)
    }

    /// Kernel for `N` particles with `eps = N^(-gamma / 2d)`; `m_bar` overrides the configured order.
    pub fn build(&self, dim: usize, n: usize, gamma: f64, m_bar: Option<f64>) -> Result<KernelSpec> {
        let k = KernelSpec::new(dim, self.alpha, self.strength)?;
        match m_bar.or(self.m_bar()) {
            Some(m) => k.with_cutoff(m, epsilon_scale(n, gamma, dim)),
            None => Ok(k),
        }
    }
}

/// `gamma` must lie in `(0, 1]` for mesh initialization and `(0, 1)` otherwise.
pub fn check_gamma(gamma: f64, init: InitKind) -> Result<()> {
    let upper_ok = match init {
        InitKind::Mesh => gamma <= 1.0,
        InitKind::Iid => gamma < 1.0,
    };
    if gamma > 0.0 && upper_ok {
        return Ok(());
    }
    let range = match init {
        InitKind::Mesh => "(0, 1] for mesh initialization",
        InitKind::Iid => "(0, 1) for i.i.d. initialization",
    };
    Err(invalid("gamma", format!("{gamma} is outside {range}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// High-N particle run standing in for the exact solution.
    Particle { n_ref: usize },
    /// Phase-space grid (d = 1 only).
    Grid { nx: usize, nv: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Iid,
    Mesh,
}

fn default_replicas() -> usize {
    16
}
fn default_n_times() -> usize {
    8
}
fn default_r() -> f64 {
    1.1
}
fn default_r_prime() -> f64 {
    1.2
}
fn default_reference() -> ReferenceConfig {
    ReferenceConfig::Particle { n_ref: 4096 }
}
fn default_init() -> InitKind {
    InitKind::Iid
}
fn default_mollifier() -> Mollifier {
    Mollifier::UniformBall
}
fn default_nodes() -> usize {
    4
}

/// Everything a study needs; every field has a documented default except the
/// physical dimension, density and kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Physical dimension `d`; phase space is `R^{2d}`.
    pub dim: usize,
    pub density: DensityKind,
    pub kernel: KernelConfig,
    pub gamma: f64,
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_r_prime")]
    pub r_prime: f64,
    #[serde(default)]
    pub n_list: Vec<usize>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub t_end: f64,
    #[serde(default)]
    pub dt: f64,
    /// Equispaced sample times in `[0, t_end]`, both ends included.
    #[serde(default = "default_n_times")]
    pub n_times: usize,
    #[serde(default = "default_reference")]
    pub reference: ReferenceConfig,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default)]
    pub m_bar_list: Vec<f64>,
    #[serde(default)]
    pub l_grid: Vec<f64>,
    #[serde(default = "default_mollifier")]
    pub mollifier: Mollifier,
    /// Quadrature nodes per blob in the deterministic monitor.
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
}

impl StudyConfig {
    pub fn density_spec(&self) -> Result<DensitySpec> {
        DensitySpec::new(2 * self.dim, self.density.clone())
    }

    /// Checks the ranges shared by all studies.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        self.density_spec()?;
        check_gamma(self.gamma, self.init)?;
        if self.n_list.contains(&0) {
            return Err(invalid("n_list", "particle counts must be positive"));
        }
        if self.t_end < 0.0 || !self.t_end.is_finite() {
            return Err(invalid("t_end", "must be finite and non-negative"));
        }
        if self.t_end > 0.0 && !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", "must be positive when t_end > 0"));
        }
        if self.n_times < 1 || (self.t_end > 0.0 && self.n_times < 2) {
            return Err(invalid("n_times", "need at least two sample times for t_end > 0"));
        }
        if self.replicas == 0 {
            return Err(invalid("replicas", "must be positive"));
        }
        self.kernel_for(1, None)?;
        Ok(())
    }

    /// The kernel used by an `n`-particle run; `m_bar` overrides the configured order.
    pub fn kernel_for(&self, n: usize, m_bar: Option<f64>) -> Result<KernelSpec> {
        self.kernel.build(self.dim, n, self.gamma, m_bar)
    }

    /// `(steps, steps between samples)` covering `[0, t_end]` with `n_times` samples.
    pub fn schedule(&self) -> Result<(usize, usize)> {
        if self.t_end == 0.0 {
            return Ok((0, 1));
        }
        let intervals = self.n_times - 1;
        let steps = (self.t_end / self.dt).round() as usize;
        if steps == 0 || steps % intervals != 0 || ((steps as f64) * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(invalid(
                "dt",
                format!("t_end / dt must be a multiple of n_times - 1 = {intervals}"),
            ));
        }
        Ok((steps, steps / intervals))
    }
}

/// One line of the long-format results table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub study: String,
    pub n: usize,
    pub replica: Option<usize>,
    pub t: Option<f64>,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn new(study: &str, n: usize, replica: Option<usize>, t: Option<f64>, metric: &str, value: f64) -> Self {
        Self {
            study: study.into(),
            n,
            replica,
            t,
            metric: metric.into(),
            value,
        }
    }
}

/// Least-squares line through `(ln N, ln value)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

/// Ordinary least squares `y = intercept + slope x`; returns `(slope, intercept, R^2)`.
/// A perfect fit of constant data has `R^2 = 1`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("points", "need at least two paired values"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("points", "abscissae must not all coincide"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-30 {
        1.0
    } else {
        0.0
    };
    Ok((slope, intercept, r2))
}

/// Power-law fit of `(N, value)` pairs in log-log coordinates.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(invalid("points", "a rate fit needs at least three points"));
    }
    if points.iter().any(|&(n, v)| !(n > 0.0) || !(v > 0.0) || !v.is_finite()) {
        return Err(invalid("points", "N and values must be positive"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, v)| (n.ln(), v.ln())).collect();
    let xs: Vec<f64> = logs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = logs.iter().map(|p| p.1).collect();
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys)?;
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points: logs,
    })
}

/// Parameter windows of the convergence theorems for given `(d, alpha)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibleParams {
    pub dim: usize,
    pub alpha: f64,
    /// `(2 + 2 alpha) / (d + alpha)`.
    pub gamma_star: f64,
    /// `(d - 1) / (1 + alpha)`.
    pub r_star: f64,
    /// `min((d-2)/(alpha-1), (2d-1)/alpha)` for `1 <= alpha < d - 1`.
    pub m_bar_star: Option<f64>,
    /// No `gamma` in `(gamma_star, 1)` exists, or the no-cut-off theorem needs `alpha < 1, d >= 3`.
    pub prob_window_empty: bool,
    pub cutoff_window_empty: bool,
}

impl AdmissibleParams {
    /// `(gamma d - (2 - gamma) alpha - 2) / (2 (1 + alpha))`.
    pub fn s_star(&self, gamma: f64) -> f64 {
        let (d, a) = (self.dim as f64, self.alpha);
        (gamma * d - (2.0 - gamma) * a - 2.0) / (2.0 * (1.0 + a))
    }
}

pub fn admissible_params(dim: usize, alpha: f64) -> Result<AdmissibleParams> {
    if dim == 0 {
        return Err(invalid("dim", "must be at least 1"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid("alpha", "must be finite and non-negative"));
    }
    let d = dim as f64;
    let gamma_star = (2.0 + 2.0 * alpha) / (d + alpha);
    let r_star = (d - 1.0) / (1.0 + alpha);
    let cutoff_ok = alpha >= 1.0 && alpha < d - 1.0 && dim >= 3;
    let m_bar_star = cutoff_ok.then(|| {
        let second = (2.0 * d - 1.0) / alpha;
        if alpha == 1.0 {
            second
        } else {
            ((d - 2.0) / (alpha - 1.0)).min(second)
        }
    });
    Ok(AdmissibleParams {
        dim,
        alpha,
        gamma_star,
        r_star,
        m_bar_star,
        prob_window_empty: !(gamma_star < 1.0 && alpha < 1.0 && dim >= 3),
        cutoff_window_empty: !cutoff_ok,
    })
}

/// Median and quartiles by linear interpolation between order statistics.
pub fn quantiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Runs `f` on `0..count`, in parallel when the pool has several threads;
/// the output order is always the index order.
pub(crate) fn map_indices<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(count: usize, f: F) -> Result<Vec<T>> {
    use rayon::prelude::*;
    if rayon::current_num_threads() > 1 {
        (0..count).into_par_iter().map(&f).collect()
    } else {
        (0..count).map(f).collect()
    }
}
