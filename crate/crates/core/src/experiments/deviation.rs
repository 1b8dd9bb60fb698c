//! Deviation statistics of the initial sampling: sup-norm of the smoothed
//! empirical measure, minimal pair distance, and `W1` to the density.

use serde::Serialize;
use statrs::distribution::{Beta, ContinuousCDF};

use super::{linear_fit, map_indices, rate_fit, RateFit, ResultRow, StudyConfig};
use crate::error::{invalid, Result};
use crate::particles::min_pair_distance;
use crate::sampling::{blob_sup_norm_exact_cube, epsilon_scale, sample_iid_replica, DensityKind, DensitySpec};
use crate::transport::{w1, WeightedCloud};

/// One-sided Clopper–Pearson limits `(lower, upper)` at confidence `level`
/// for `k` successes out of `n` trials.
pub fn clopper_pearson(k: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(invalid("trials", "need 0 <= k <= n with n > 0"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("level", "must lie in (0, 1)"));
    }
    let a = 1.0 - level;
    let beta = |p: f64, q: f64| Beta::new(p, q).map_err(|e| invalid("trials", e.to_string()));
    let lower = if k == 0 { 0.0 } else { beta(k as f64, (n - k + 1) as f64)?.inverse_cdf(a) };
    let upper = if k == n { 1.0 } else { beta((k + 1) as f64, (n - k) as f64)?.inverse_cdf(level) };
    Ok((lower, upper))
}

#[derive(Clone, Debug, Serialize)]
pub struct LinfRow {
    pub n: usize,
    pub eps: f64,
    /// `2^(1+n) ||f||_inf`.
    pub threshold: f64,
    pub exceedances: usize,
    pub frequency: f64,
    pub cp_lower: f64,
    pub cp_upper: f64,
    /// `(2 R0 + 2)^n N^gamma exp(-(2 ln 2 - 1) 2^n ||f||_inf N^(1 - gamma))`.
    pub bound: f64,
    /// One-sided exact binomial test: the data do not show the exceedance
    /// probability above the bound (lower confidence limit at or below it).
    pub pass: bool,
    /// Stricter reading: the upper confidence limit is at or below the bound.
    /// Needs about `ln(100) / bound` replicas even with no exceedances.
    pub upper_below_bound: bool,
    pub max_sup_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LinfReport {
    pub level: f64,
    pub rows: Vec<LinfRow>,
}

/// Analytic tail bound for `P(||f_N||_inf >= 2^(1+n) ||f||_inf)`.
pub fn linf_deviation_bound(phase_dim: usize, r0: f64, sup_f: f64, n: usize, gamma: f64) -> f64 {
    let p = phase_dim as i32;
    let nf = n as f64;
    let rate = (2.0 * std::f64::consts::LN_2 - 1.0) * 2f64.powi(p) * sup_f * nf.powf(1.0 - gamma);
    (2.0 * r0 + 2.0).powi(p) * nf.powf(gamma) * (-rate).exp()
}

/// Exceedance frequency of `||f_N^0||_inf >= 2^(1+n) ||f||_inf` for the cube
/// mollifier at `eps = N^(-gamma / n)`, with Clopper–Pearson limits at 99%.
pub fn deviation_study_linf(config: &StudyConfig) -> Result<(LinfReport, Vec<ResultRow>)> {
    config.validate()?;
    let density = config.density_spec()?;
    let sup_f = density
        .sup_norm()
        .ok_or_else(|| invalid("density.kind", "needs a bounded density"))?;
    let n_phase = density.phase_dim;
    let r0 = density.support_half_width();
    let level = 0.99;
    let threshold = 2f64.powi(1 + n_phase as i32) * sup_f;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &n in &config.n_list {
        let eps = epsilon_scale(n, config.gamma, config.dim);
        let norms = map_indices(config.replicas, |r| {
            let s = sample_iid_replica(&density, n, config.seed, r as u64)?;
            Ok(blob_sup_norm_exact_cube(&s, eps))
        })?;
        for (r, v) in norms.iter().enumerate() {
            rows.push(ResultRow::new("deviation_linf", n, Some(r), None, "sup_norm", *v));
        }
        let k = norms.iter().filter(|&&v| v >= threshold).count();
        let (cp_lower, cp_upper) = clopper_pearson(k, config.replicas, level)?;
        let bound = linf_deviation_bound(n_phase, r0, sup_f, n, config.gamma);
        let freq = k as f64 / config.replicas as f64;
        rows.push(ResultRow::new("deviation_linf", n, None, None, "exceedance_frequency", freq));
        rows.push(ResultRow::new("deviation_linf", n, None, None, "cp_upper", cp_upper));
        rows.push(ResultRow::new("deviation_linf", n, None, None, "bound", bound));
        out.push(LinfRow {
            n,
            eps,
            threshold,
            exceedances: k,
            frequency: freq,
            cp_lower,
            cp_upper,
            bound,
            pass: cp_lower <= bound,
            upper_below_bound: cp_upper <= bound,
            max_sup_norm: norms.iter().cloned().fold(0.0, f64::max),
        });
    }
    Ok((LinfReport { level, rows: out }, rows))
}

#[derive(Clone, Debug, Serialize)]
pub struct DminReport {
    pub n: usize,
    pub l_grid: Vec<f64>,
    /// Empirical `P(d_N >= l N^(-1/d))` per grid point.
    pub probability: Vec<f64>,
    /// Slope of `ln(-ln P)` against `ln l`; compare with the phase-space dimension.
    pub exponent: f64,
    pub r_squared: f64,
    pub target_exponent: f64,
    /// Smallest `c` with `P >= exp(-c ||f||_inf l^(2d))` at every grid point.
    pub c_fit: f64,
    /// Grid points whose probability is 0 or 1 (excluded from the fit).
    pub excluded: usize,
}

/// Law of the minimal phase-space pair distance at the scale `N^(-1/d)`.
pub fn deviation_study_dmin(config: &StudyConfig) -> Result<(Vec<DminReport>, Vec<ResultRow>)> {
    config.validate()?;
    if config.l_grid.len() < 2 || config.l_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(invalid("l_grid", "needs at least two positive values"));
    }
    let density = config.density_spec()?;
    let sup_f = density
        .sup_norm()
        .ok_or_else(|| invalid("density.kind", "needs a bounded density"))?;
    let n_phase = density.phase_dim as f64;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &n in &config.n_list {
        if n < 2 {
            return Err(invalid("n_list", "minimal distances need N >= 2"));
        }
        let dmins = map_indices(config.replicas, |r| {
            min_pair_distance(&sample_iid_replica(&density, n, config.seed, r as u64)?)
        })?;
        for (r, v) in dmins.iter().enumerate() {
            rows.push(ResultRow::new("deviation_dmin", n, Some(r), None, "d_min", *v));
        }
        let scale = (n as f64).powf(-1.0 / config.dim as f64);
        let probability: Vec<f64> = config
            .l_grid
            .iter()
            .map(|&l| dmins.iter().filter(|&&v| v >= l * scale).count() as f64 / dmins.len() as f64)
            .collect();
        for (&l, &p) in config.l_grid.iter().zip(&probability) {
            rows.push(ResultRow::new("deviation_dmin", n, None, None, &format!("p_l{l}"), p));
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = config
            .l_grid
            .iter()
            .zip(&probability)
            .filter(|(_, &p)| p > 0.0 && p < 1.0)
            .map(|(&l, &p)| (l.ln(), (-p.ln()).ln()))
            .unzip();
        let excluded = config.l_grid.len() - xs.len();
        let (exponent, _, r_squared) = linear_fit(&xs, &ys)?;
        let c_fit = config
            .l_grid
            .iter()
            .zip(&probability)
            .map(|(&l, &p)| if p > 0.0 { -p.ln() / (sup_f * l.powf(n_phase)) } else { f64::INFINITY })
            .fold(0.0, f64::max);
        rows.push(ResultRow::new("deviation_dmin", n, None, None, "exponent", exponent));
        reports.push(DminReport {
            n,
            l_grid: config.l_grid.clone(),
            probability,
            exponent,
            r_squared,
            target_exponent: n_phase,
            c_fit,
            excluded,
        });
    }
    Ok((reports, rows))
}

#[derive(Clone, Debug, Serialize)]
pub struct W1DevRow {
    pub n: usize,
    pub mean: f64,
    pub values: Vec<f64>,
    /// `W1` from the grid discretization to the density, bounded by `h sqrt(n / 12)`.
    pub discretization_error: f64,
    /// Fraction of replicas above `2 C N^(-1/2d)`.
    pub tail_frequency: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct W1DevReport {
    pub rows: Vec<W1DevRow>,
    pub fit: RateFit,
    pub target_slope: f64,
    /// `C` in the fixed-slope fit `mean = C N^(-1/2d)`.
    pub c_fit: f64,
    pub tail_monotone: bool,
}

/// Cell-centre quadrature of the density with `k` cells per axis on its support cube.
fn discretize(density: &DensitySpec, k: usize) -> Result<(WeightedCloud, f64)> {
    let n = density.phase_dim;
    let h_w = density.support_half_width();
    let grid = crate::sampling::mesh_init(k, &vec![(-h_w, h_w); n])?;
    let pts = grid.phase_points();
    let h = 2.0 * h_w / k as f64;
    let err = h * (n as f64 / 12.0).sqrt();
    if matches!(density.kind, DensityKind::UniformCube { .. }) {
        return Ok((WeightedCloud::uniform(n, pts), err));
    }
    let mut kept = Vec::new();
    let mut weights = Vec::new();
    for z in pts.chunks_exact(n) {
        let w = density.density(z);
        if w > 0.0 {
            kept.extend_from_slice(z);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((WeightedCloud::new(n, kept, weights)?, err))
}

/// `E W1(mu_N^0, f^0)` against a cell-centre discretization of `f^0` with `N`
/// cells (`N` must be a perfect `2d`-th power).
pub fn deviation_study_w1(config: &StudyConfig) -> Result<(W1DevReport, Vec<ResultRow>)> {
    config.validate()?;
    if config.n_list.len() < 3 {
        return Err(invalid("n_list", "a rate fit needs at least three particle counts"));
    }
    let density = config.density_spec()?;
    let n_phase = density.phase_dim;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &n in &config.n_list {
        let k = (n as f64).powf(1.0 / n_phase as f64).round() as usize;
        if k.pow(n_phase as u32) != n {
            return Err(invalid("n_list", format!("{n} is not a perfect {n_phase}-th power")));
        }
        let (target, err) = discretize(&density, k)?;
        let values = map_indices(config.replicas, |r| {
            let s = sample_iid_replica(&density, n, config.seed, r as u64)?;
            Ok(w1(&WeightedCloud::uniform(n_phase, s.phase_points()), &target)?.cost)
        })?;
        for (r, v) in values.iter().enumerate() {
            rows.push(ResultRow::new("deviation_w1", n, Some(r), None, "w1", *v));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        rows.push(ResultRow::new("deviation_w1", n, None, None, "mean_w1", mean));
        out.push(W1DevRow {
            n,
            mean,
            values,
            discretization_error: err,
            tail_frequency: 0.0,
        });
    }
    let fit = rate_fit(&out.iter().map(|r| (r.n as f64, r.mean)).collect::<Vec<_>>())?;
    let target_slope = -1.0 / n_phase as f64;
    let log_c = out
        .iter()
        .map(|r| r.mean.ln() - target_slope * (r.n as f64).ln())
        .sum::<f64>()
        / out.len() as f64;
    let c_fit = log_c.exp();
    for r in out.iter_mut() {
        let cut = 2.0 * c_fit * (r.n as f64).powf(target_slope);
        r.tail_frequency = r.values.iter().filter(|&&v| v > cut).count() as f64 / r.values.len() as f64;
        rows.push(ResultRow::new("deviation_w1", r.n, None, None, "tail_frequency", r.tail_frequency));
    }
    let tail_monotone = out.windows(2).all(|w| w[1].tail_frequency <= w[0].tail_frequency);
    Ok((
        W1DevReport {
            rows: out,
            fit,
            target_slope,
            c_fit,
            tail_monotone,
        },
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{InitKind, KernelConfig, ReferenceConfig};
    use crate::sampling::Mollifier;

    fn config(dim: usize, n_list: Vec<usize>, replicas: usize) -> StudyConfig {
        StudyConfig {
            dim,
            density: DensityKind::UniformCube { half_width: 1.0 },
            kernel: KernelConfig {
                alpha: 0.5,
                strength: 1.0,
                cutoff: None,
            },
            gamma: 0.5,
            r: 1.1,
            r_prime: 1.2,
            n_list,
            replicas,
            seed: 11,
            t_end: 0.0,
            dt: 0.0,
            n_times: 1,
            reference: ReferenceConfig::Particle { n_ref: 64 },
            init: InitKind::Iid,
            m_bar_list: vec![],
            l_grid: vec![],
            mollifier: Mollifier::UniformCube,
            quadrature_nodes: 4,
        }
    }

    #[test]
    fn clopper_pearson_closed_forms() {
        // k = 0: upper = 1 - (1 - level)^(1/n); k = n: lower = (1 - level)^(1/n)
        let (lo, up) = clopper_pearson(0, 1000, 0.99).unwrap();
        assert_eq!(lo, 0.0);
        assert!((up - (1.0 - 0.01f64.powf(1e-3))).abs() < 1e-9);
        let (lo, up) = clopper_pearson(50, 50, 0.99).unwrap();
        assert_eq!(up, 1.0);
        assert!((lo - 0.01f64.powf(1.0 / 50.0)).abs() < 1e-9);
        let (lo, up) = clopper_pearson(30, 100, 0.99).unwrap();
        assert!(lo < 0.3 && 0.3 < up);
        assert!(clopper_pearson(3, 2, 0.99).is_err());
    }

    #[test]
    fn bound_example() {
        let b = linf_deviation_bound(2, 1.0, 0.25, 10_000, 0.5);
        let expect = 1600.0 * (-(2.0 * std::f64::consts::LN_2 - 1.0) * 100.0).exp();
        assert!((b / expect - 1.0).abs() < 1e-12);
        assert!((1600.0f64.ln() - (2.0 * std::f64::consts::LN_2 - 1.0) * 100.0 - b.ln()).abs() < 1e-9);
    }

    #[test]
    fn linf_study_small() {
        let (rep, rows) = deviation_study_linf(&config(1, vec![100, 400], 20)).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rows.iter().filter(|r| r.metric == "sup_norm").count(), 40);
        for r in &rep.rows {
            assert!(r.cp_lower <= r.frequency && r.frequency <= r.cp_upper);
            assert!((r.threshold - 8.0 * 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dmin_exponent_near_phase_dimension() {
        let mut c = config(1, vec![300], 300);
        c.l_grid = (0..6).map(|k| 0.6 + 0.4 * k as f64).collect();
        let (rep, _) = deviation_study_dmin(&c).unwrap();
        let r = &rep[0];
        assert_eq!(r.target_exponent, 2.0);
        assert!((r.exponent - 2.0).abs() < 0.5, "{}", r.exponent);
        assert!(r.probability.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn w1_study_small() {
        let (rep, _) = deviation_study_w1(&config(1, vec![16, 64, 256], 4)).unwrap();
        assert!(rep.fit.slope < -0.2);
        assert!(rep.rows.iter().all(|r| r.discretization_error > 0.0));
        assert!(deviation_study_w1(&config(1, vec![16, 50, 256], 2)).is_err());
    }

    #[test]
    fn weighted_discretization_sums_to_one() {
        let d = DensitySpec::new(2, DensityKind::ProductTent { half_width: 1.0 }).unwrap();
        let (c, _) = discretize(&d, 8).unwrap();
        assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
