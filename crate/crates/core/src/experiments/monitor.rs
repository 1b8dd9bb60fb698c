//! Monitors along one deterministic run: distance between the particle system
//! and its blob-node refinement, the minimal-distance lower bound, and the
//! time-averaged force mismatches.

use serde::Serialize;

use super::{linear_fit, ResultRow, StudyConfig};
use crate::error::{invalid, Result};
use crate::particles::{field_derivative_series, min_pair_distance, simulate, ParticleState, SimOptions, TrajectoryWindow};
use crate::sampling::{blob_quadrature, epsilon_scale, mesh_init, sample_iid_replica, QuadraturePattern};
use crate::transport::{coupled_sup_distance, i_alpha_diag, j_alpha_rows};

/// Samples per averaging window `tau`.
const SAMPLES_PER_TAU: usize = 20;
/// Rows of the force-mismatch matrices that are tracked.
const TRACKED_ROWS: usize = 16;
/// Relative slack in the minimal-distance lower bound (time discretization).
const DMIN_SLACK: f64 = 0.05;

#[derive(Clone, Debug, Serialize)]
pub struct MonitorReport {
    pub n: usize,
    pub nodes: usize,
    pub eps: f64,
    pub tau: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Running sup of the node-to-parent phase distance.
    pub coupled_distance: Vec<f64>,
    /// `coupled_distance(0) / (c_phi eps)`.
    pub initial_ratio: f64,
    /// Least-squares rate of `ln coupled_distance` against `t`.
    pub envelope_rate: f64,
    pub envelope_r_squared: f64,
    /// Smallest `C` with `W(t) <= W(0) e^(C t)` at every sample.
    pub gronwall_rate: f64,
    pub d_min: Vec<f64>,
    pub field_derivative: Vec<f64>,
    /// `(d_N(t) + eps^(1+r')) / ([d_N(t - tau) + eps^(1+r')] e^(-tau (1 + |grad E|)))`.
    pub d_min_ratio: Vec<f64>,
    pub d_min_pass: bool,
    /// Largest tracked row of the time-averaged force mismatch.
    pub i_alpha_max: Vec<f64>,
    /// Largest tracked row mean of the time-averaged singular weight.
    pub j_alpha_max: Vec<f64>,
    /// `max_t i_alpha_max / fitted exponential trend`.
    pub i_alpha_over_trend: f64,
    pub i_alpha_pass: bool,
    pub near_collision_steps: usize,
}

fn tracked(n: usize) -> Vec<usize> {
    let k = TRACKED_ROWS.min(n);
    (0..k).map(|i| i * n / k).collect()
}

/// Runs the particle system and its blob-node refinement side by side.
///
/// Uses the first entry of `n_list`; samples every `tau / 20` with
/// `tau = eps^r'`, and steps at most `dt` (rounded down to divide the spacing).
pub fn deterministic_monitor(config: &StudyConfig) -> Result<(MonitorReport, Vec<ResultRow>)> {
    config.validate()?;
    let n = *config.n_list.first().ok_or_else(|| invalid("n_list", "needs the particle count"))?;
    let d = config.dim as f64;
    let r_star = (d - 1.0) / (1.0 + config.kernel.alpha);
    if !(config.r > 1.0 && config.r < config.r_prime) {
        return Err(invalid("r", "need 1 < r < r'"));
    }
    if config.r_prime >= r_star {
        return Err(invalid("r_prime", format!("must stay below (d - 1) / (1 + alpha) = {r_star}")));
    }
    if config.quadrature_nodes < 2 {
        return Err(invalid("quadrature_nodes", "need at least two nodes per blob"));
    }
    if !(config.t_end > 0.0) {
        return Err(invalid("t_end", "must be positive"));
    }
    let eps = epsilon_scale(n, config.gamma, config.dim);
    let tau = eps.powf(config.r_prime);
    let spacing = tau / SAMPLES_PER_TAU as f64;
    let sub = if config.dt > 0.0 { (spacing / config.dt).ceil().max(1.0) as usize } else { 2 };
    let dt = spacing / sub as f64;
    let n_samples = (config.t_end / spacing - 1e-9).ceil() as usize;
    let kernel = config.kernel_for(n, None)?;

    let init = match config.init {
        super::InitKind::Mesh => {
            let k = (n as f64).powf(1.0 / (2 * config.dim) as f64).round() as usize;
            if k.pow(2 * config.dim as u32) != n {
                return Err(invalid("n_list", format!("{n} is not a perfect {}-th power", 2 * config.dim)));
            }
            let h = config.density_spec()?.support_half_width();
            mesh_init(k, &vec![(-h, h); 2 * config.dim])?
        }
        super::InitKind::Iid => sample_iid_replica(&config.density_spec()?, n, config.seed, 0)?,
    };
    let k = config.quadrature_nodes;
    let cloud = blob_quadrature(&init, eps, config.mollifier, k, QuadraturePattern::BoundaryInclusive)?;
    let nodes = ParticleState::from_phase_points(config.dim, &cloud.points)?;
    let matching: Vec<usize> = (0..n * k).map(|p| p / k).collect();

    let mut opts = SimOptions::new(dt, n_samples * sub, sub);
    opts.collision_check_every = sub;
    let (a, diag) = simulate(init, &kernel, &opts)?;
    let (b, _) = simulate(nodes, &kernel, &SimOptions::new(dt, n_samples * sub, sub))?;
    let times: Vec<f64> = a.iter().map(|s| s.time).collect();

    let coupled = coupled_sup_distance(&a, &b, &matching)?;
    let initial_ratio = coupled[0] / (config.mollifier.c_phi(2 * config.dim) * eps);
    let logs: Vec<f64> = coupled.iter().map(|w| w.ln()).collect();
    let (envelope_rate, _, envelope_r_squared) = linear_fit(&times, &logs)?;
    let gronwall_rate = times
        .iter()
        .zip(&coupled)
        .skip(1)
        .map(|(t, w)| (w / coupled[0]).ln() / t)
        .fold(0.0, f64::max);

    let d_min = a.iter().map(min_pair_distance).collect::<Result<Vec<_>>>()?;
    let window = TrajectoryWindow::new(a.clone(), spacing, tau)?;
    let field_derivative = field_derivative_series(&window, &kernel, eps, config.r_prime)?;
    let delta = eps.powf(1.0 + config.r_prime);
    let d_min_ratio: Vec<f64> = (0..a.len())
        .map(|i| {
            let prev = d_min[i.saturating_sub(SAMPLES_PER_TAU)];
            let rhs = (prev + delta) * (-tau * (1.0 + field_derivative[i])).exp();
            (d_min[i] + delta) / rhs
        })
        .collect();
    let d_min_pass = d_min_ratio.iter().all(|&r| r >= 1.0 - DMIN_SLACK);

    let rows_b = tracked(n * k);
    let rows_a = tracked(n);
    let mut i_alpha_max = vec![0.0];
    let mut j_alpha_max = vec![0.0];
    for end in 1..a.len() {
        let lo = end.saturating_sub(SAMPLES_PER_TAU);
        let wa = TrajectoryWindow::new(a[lo..=end].to_vec(), spacing, tau)?;
        let wb = TrajectoryWindow::new(b[lo..=end].to_vec(), spacing, tau)?;
        let i_rows = i_alpha_diag(&wa, &wb, &matching, &kernel, Some(&rows_b))?;
        let j_rows = j_alpha_rows(&wa, config.kernel.alpha, eps, config.r_prime, &rows_a)?;
        i_alpha_max.push(i_rows.into_iter().fold(0.0, f64::max));
        j_alpha_max.push(j_rows.into_iter().fold(0.0, f64::max));
    }
    let (i_alpha_over_trend, i_alpha_pass) = trend_ratio(&times[1..], &i_alpha_max[1..]);

    let mut rows = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        for (name, v) in [
            ("coupled_distance", coupled[i]),
            ("d_min", d_min[i]),
            ("field_derivative", field_derivative[i]),
            ("d_min_ratio", d_min_ratio[i]),
            ("i_alpha_max", i_alpha_max[i]),
            ("j_alpha_max", j_alpha_max[i]),
        ] {
            rows.push(ResultRow::new("monitor", n, None, Some(t), name, v));
        }
    }
    Ok((
        MonitorReport {
            n,
            nodes: n * k,
            eps,
            tau,
            dt,
            times,
            coupled_distance: coupled,
            initial_ratio,
            envelope_rate,
            envelope_r_squared,
            gronwall_rate,
            d_min,
            field_derivative,
            d_min_ratio,
            d_min_pass,
            i_alpha_max,
            j_alpha_max,
            i_alpha_over_trend,
            i_alpha_pass,
            near_collision_steps: diag.near_collision_steps,
        },
        rows,
    ))
}

/// Largest ratio of a positive series to its least-squares exponential trend;
/// passes when the series stays within a factor 2 of the trend.
fn trend_ratio(times: &[f64], values: &[f64]) -> (f64, bool) {
    if values.iter().any(|v| !v.is_finite()) {
        return (f64::INFINITY, false);
    }
    if values.iter().all(|&v| v == 0.0) {
        return (0.0, true);
    }
    let floor = values.iter().cloned().fold(0.0, f64::max) * 1e-12;
    let logs: Vec<f64> = values.iter().map(|v| v.max(floor).ln()).collect();
    match linear_fit(times, &logs) {
        Ok((slope, intercept, _)) => {
            let worst = times
                .iter()
                .zip(&logs)
                .map(|(t, l)| (l - intercept - slope * t).exp())
                .fold(0.0, f64::max);
            (worst, worst <= 2.0)
        }
        Err(_) => (1.0, true),
    }
}
