//! N-particle mean-field dynamics and trajectory diagnostics.
//!
//! Particles interact through `a_i = (1/N) sum_{j != i} F(X_i - X_j)` and are
//! advanced with velocity Verlet. Pair sums use compensated (two-sum)
//! accumulation in a fixed order so single-threaded runs are bit-reproducible;
//! when the current rayon pool has more than one thread the rows are summed
//! independently in parallel instead.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernels::{kepsilon, ForceLaw, KernelSpec};

/// Positions and velocities of `N` particles in dimension `dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub time: f64,
}

impl ParticleState {
    pub fn new(dim: usize, positions: Vec<f64>, velocities: Vec<f64>, time: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if positions.len() % dim != 0 || positions.is_empty() {
            return Err(invalid("positions", "length must be a positive multiple of dim"));
        }
        if velocities.len() != positions.len() {
            return Err(Error::DimensionMismatch {
                expected: positions.len(),
                got: velocities.len(),
            });
        }
        if positions.iter().chain(&velocities).any(|v| !v.is_finite()) || !time.is_finite() {
            return Err(Error::NonFinite(0));
        }
        Ok(Self {
            dim,
            positions,
            velocities,
            time,
        })
    }

    /// Builds a state from phase-space points `(x, v)` of length `2 dim`.
    pub fn from_phase_points(dim: usize, points: &[f64]) -> Result<Self> {
        if points.len() % (2 * dim) != 0 {
            return Err(invalid("points", "length must be a multiple of 2 dim"));
        }
        let n = points.len() / (2 * dim);
        let mut x = Vec::with_capacity(n * dim);
        let mut v = Vec::with_capacity(n * dim);
        for p in points.chunks_exact(2 * dim) {
            x.extend_from_slice(&p[..dim]);
            v.extend_from_slice(&p[dim..]);
        }
        Self::new(dim, x, v, 0.0)
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn v(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.dim..(i + 1) * self.dim]
    }

    /// Phase-space points `(X_i, V_i)` flattened row-major with stride `2 dim`.
    pub fn phase_points(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.positions.len());
        for i in 0..self.n() {
            out.extend_from_slice(self.x(i));
            out.extend_from_slice(self.v(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.velocities).all(|v| v.is_finite())
    }

    /// Applies a relabeling: particle `k` of the result is particle `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim;
        let mut x = Vec::with_capacity(self.positions.len());
        let mut v = Vec::with_capacity(self.positions.len());
        for &p in perm {
            x.extend_from_slice(&self.positions[p * d..(p + 1) * d]);
            v.extend_from_slice(&self.velocities[p * d..(p + 1) * d]);
        }
        Self {
            dim: d,
            positions: x,
            velocities: v,
            time: self.time,
        }
    }

    pub fn total_momentum(&self) -> Vec<f64> {
        let d = self.dim;
        let mut p = vec![0.0; d];
        for v in self.velocities.chunks_exact(d) {
            for k in 0..d {
                p[k] += v[k];
            }
        }
        p
    }
}

#[inline(always)]
fn two_sum(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    let z = t - *sum;
    *comp += (*sum - (t - z)) + (x - z);
    *sum = t;
}

fn pair_loop_serial<const D: usize>(pos: &[f64], law: &ForceLaw, out: &mut [f64]) {
    let n = pos.len() / D;
    let mut sum = vec![0.0; n * D];
    let mut comp = vec![0.0; n * D];
    for i in 0..n {
        let mut xi = [0.0; D];
        xi.copy_from_slice(&pos[i * D..(i + 1) * D]);
        let mut si = [0.0; D];
        let mut ci = [0.0; D];
        for k in 0..D {
            si[k] = sum[i * D + k];
            ci[k] = comp[i * D + k];
        }
        for j in i + 1..n {
            let xj = &pos[j * D..(j + 1) * D];
            let mut dx = [0.0; D];
            let mut r2 = 0.0;
            for k in 0..D {
                dx[k] = xi[k] - xj[k];
                r2 += dx[k] * dx[k];
            }
            let s = law.factor(r2);
            for k in 0..D {
                let f = s * dx[k];
                two_sum(&mut si[k], &mut ci[k], f);
                two_sum(&mut sum[j * D + k], &mut comp[j * D + k], -f);
            }
        }
        for k in 0..D {
            sum[i * D + k] = si[k];
            comp[i * D + k] = ci[k];
        }
    }
    let inv_n = 1.0 / n as f64;
    for ((o, s), c) in out.iter_mut().zip(&sum).zip(&comp) {
        *o = (s + c) * inv_n;
    }
}

fn pair_loop_rows<const D: usize>(pos: &[f64], law: &ForceLaw, out: &mut [f64]) {
    let n = pos.len() / D;
    let inv_n = 1.0 / n as f64;
    out.par_chunks_mut(D).enumerate().for_each(|(i, row)| {
        let xi = &pos[i * D..(i + 1) * D];
        let mut si = [0.0; D];
        let mut ci = [0.0; D];
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &pos[j * D..(j + 1) * D];
            let mut dx = [0.0; D];
            let mut r2 = 0.0;
            for k in 0..D {
                dx[k] = xi[k] - xj[k];
                r2 += dx[k] * dx[k];
            }
            let s = law.factor(r2);
            for k in 0..D {
                two_sum(&mut si[k], &mut ci[k], s * dx[k]);
            }
        }
        for k in 0..D {
            row[k] = (si[k] + ci[k]) * inv_n;
        }
    });
}

fn pair_loop_dyn(dim: usize, pos: &[f64], law: &ForceLaw, out: &mut [f64]) {
    let n = pos.len() / dim;
    let mut sum = vec![0.0; n * dim];
    let mut comp = vec![0.0; n * dim];
    let mut dx = vec![0.0; dim];
    for i in 0..n {
        for j in i + 1..n {
            let mut r2 = 0.0;
            for k in 0..dim {
                dx[k] = pos[i * dim + k] - pos[j * dim + k];
                r2 += dx[k] * dx[k];
            }
            let s = law.factor(r2);
            for k in 0..dim {
                let f = s * dx[k];
                two_sum(&mut sum[i * dim + k], &mut comp[i * dim + k], f);
                two_sum(&mut sum[j * dim + k], &mut comp[j * dim + k], -f);
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for ((o, s), c) in out.iter_mut().zip(&sum).zip(&comp) {
        *o = (s + c) * inv_n;
    }
}

/// Mean-field accelerations for the positions `pos` (row-major, stride `dim`).
pub fn accelerations_into(dim: usize, pos: &[f64], law: &ForceLaw, out: &mut [f64]) {
    debug_assert_eq!(pos.len(), out.len());
    if law.strength() == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let parallel = rayon::current_num_threads() > 1 && pos.len() / dim >= 256;
    match (dim, parallel) {
        (1, false) => pair_loop_serial::<1>(pos, law, out),
        (2, false) => pair_loop_serial::<2>(pos, law, out),
        (3, false) => pair_loop_serial::<3>(pos, law, out),
        (1, true) => pair_loop_rows::<1>(pos, law, out),
        (2, true) => pair_loop_rows::<2>(pos, law, out),
        (3, true) => pair_loop_rows::<3>(pos, law, out),
        _ => pair_loop_dyn(dim, pos, law, out),
    }
}

pub fn accelerations(state: &ParticleState, kernel: &KernelSpec) -> Vec<f64> {
    let mut out = vec![0.0; state.positions.len()];
    accelerations_into(state.dim, &state.positions, &kernel.law(), &mut out);
    out
}

/// One velocity-Verlet step from scratch (two force evaluations).
pub fn step_verlet(state: &ParticleState, kernel: &KernelSpec, dt: f64) -> Result<ParticleState> {
    let mut stepper = Verlet::new(state.clone(), kernel)?;
    stepper.step(dt);
    Ok(stepper.into_state())
}

/// Velocity-Verlet integrator that carries the current accelerations between
/// steps so each step costs one force evaluation.
pub struct Verlet {
    state: ParticleState,
    law: ForceLaw,
    acc: Vec<f64>,
    next: Vec<f64>,
}

impl Verlet {
    pub fn new(state: ParticleState, kernel: &KernelSpec) -> Result<Self> {
        if kernel.dim != state.dim {
            return Err(Error::DimensionMismatch {
                expected: kernel.dim,
                got: state.dim,
            });
        }
        let law = kernel.law();
        let mut acc = vec![0.0; state.positions.len()];
        accelerations_into(state.dim, &state.positions, &law, &mut acc);
        let next = vec![0.0; acc.len()];
        Ok(Self {
            state,
            law,
            acc,
            next,
        })
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn accelerations(&self) -> &[f64] {
        &self.acc
    }

    pub fn into_state(self) -> ParticleState {
        self.state
    }

    pub fn step(&mut self, dt: f64) {
        let half = 0.5 * dt * dt;
        let s = &mut self.state;
        for ((x, v), a) in s.positions.iter_mut().zip(&s.velocities).zip(&self.acc) {
            *x += v * dt + half * a;
        }
        accelerations_into(s.dim, &s.positions, &self.law, &mut self.next);
        for ((v, a0), a1) in s.velocities.iter_mut().zip(&self.acc).zip(&self.next) {
            *v += 0.5 * (a0 + a1) * dt;
        }
        std::mem::swap(&mut self.acc, &mut self.next);
        s.time += dt;
    }
}

/// States sampled at uniform spacing `dt`, with an averaging window `tau`.
#[derive(Clone, Debug)]
pub struct TrajectoryWindow {
    pub states: Vec<ParticleState>,
    pub dt: f64,
    pub tau: f64,
}

impl TrajectoryWindow {
    pub fn new(states: Vec<ParticleState>, dt: f64, tau: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(invalid("states", "a trajectory needs at least one state"));
        }
        if !(dt > 0.0) || !(tau > 0.0) {
            return Err(invalid("dt", "sample spacing and window must be positive"));
        }
        let ratio = tau / dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(invalid("tau", format!("tau = {tau} is not an integer multiple of dt = {dt}")));
        }
        let (dim, n) = (states[0].dim, states[0].n());
        for (k, s) in states.iter().enumerate() {
            if s.dim != dim || s.n() != n {
                return Err(invalid("states", "particle count and dimension must stay fixed"));
            }
            let expect = states[0].time + k as f64 * dt;
            if (s.time - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                return Err(invalid("states", "samples are not uniformly spaced by dt"));
            }
        }
        Ok(Self { states, dt, tau })
    }

    /// Number of sample intervals in one averaging window.
    pub fn window_steps(&self) -> usize {
        (self.tau / self.dt).round() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.time).collect()
    }

    pub fn last(&self) -> &ParticleState {
        self.states.last().expect("non-empty by construction")
    }
}

/// Run-time options for [`simulate`].
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub dt: f64,
    pub n_steps: usize,
    /// Store a sample every `sample_every` steps (the initial state is always stored).
    pub sample_every: usize,
    /// Check for near-collisions every this many steps; 0 disables the check.
    pub collision_check_every: usize,
    /// Abort if the relative energy drift exceeds this at a sample (requires a potential).
    pub energy_guard: Option<f64>,
}

impl SimOptions {
    pub fn new(dt: f64, n_steps: usize, sample_every: usize) -> Self {
        Self {
            dt,
            n_steps,
            sample_every: sample_every.max(1),
            collision_check_every: 0,
            energy_guard: None,
        }
    }
}

/// Per-run diagnostics collected alongside the samples.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunDiagnostics {
    /// Smallest position-space pair distance seen at checked steps.
    pub min_position_distance: f64,
    /// Checked steps where some pair was closer than `10 dt |V_i - V_j|`.
    pub near_collision_steps: usize,
    pub checked_steps: usize,
    pub max_energy_drift: Option<f64>,
}

/// Integrates `initial` and returns the sampled states plus diagnostics.
pub fn simulate(
    initial: ParticleState,
    kernel: &KernelSpec,
    opts: &SimOptions,
) -> Result<(Vec<ParticleState>, RunDiagnostics)> {
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(invalid("dt", "must be positive and finite"));
    }
    let energy0 = match opts.energy_guard {
        Some(_) => Some(energy_parts(&initial, kernel)?),
        None => None,
    };
    let mut diag = RunDiagnostics {
        min_position_distance: f64::INFINITY,
        ..Default::default()
    };
    let mut samples = vec![initial.clone()];
    let mut stepper = Verlet::new(initial, kernel)?;
    for step in 1..=opts.n_steps {
        stepper.step(opts.dt);
        if !stepper.state.is_finite() || stepper.acc.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(step));
        }
        if opts.collision_check_every > 0 && step % opts.collision_check_every == 0 {
            let (dmin, flagged) = near_collision_scan(&stepper.state, opts.dt);
            diag.min_position_distance = diag.min_position_distance.min(dmin);
            diag.checked_steps += 1;
            diag.near_collision_steps += flagged as usize;
        }
        if step % opts.sample_every == 0 {
            if let (Some(limit), Some((ke0, pe0))) = (opts.energy_guard, energy0) {
                let (ke, pe) = energy_parts(&stepper.state, kernel)?;
                let scale = ke0 + pe0.abs();
                let drift = if scale > 0.0 {
                    ((ke + pe) - (ke0 + pe0)).abs() / scale
                } else {
                    0.0
                };
                if !drift.is_finite() {
                    return Err(Error::NonFinite(step));
                }
                if drift > limit {
                    return Err(Error::Unstable { step, drift });
                }
                diag.max_energy_drift = Some(diag.max_energy_drift.unwrap_or(0.0).max(drift));
            }
            samples.push(stepper.state.clone());
        }
    }
    Ok((samples, diag))
}

/// Smallest position distance, and whether any pair is closer than
/// `10 dt |V_i - V_j|` (the step may have jumped across a near-collision).
pub fn near_collision_scan(state: &ParticleState, dt: f64) -> (f64, bool) {
    let d = state.dim;
    let n = state.n();
    let mut min_r2 = f64::INFINITY;
    let mut flagged = false;
    let k2 = (10.0 * dt) * (10.0 * dt);
    for i in 0..n {
        let (xi, vi) = (state.x(i), state.v(i));
        for j in i + 1..n {
            let (xj, vj) = (state.x(j), state.v(j));
            let mut r2 = 0.0;
            let mut w2 = 0.0;
            for k in 0..d {
                let dx = xi[k] - xj[k];
                let dv = vi[k] - vj[k];
                r2 += dx * dx;
                w2 += dv * dv;
            }
            min_r2 = min_r2.min(r2);
            flagged |= r2 < k2 * w2;
        }
    }
    (min_r2.sqrt(), flagged)
}

/// `min_{i != j} |(X_i - X_j, V_i - V_j)|` in phase space.
pub fn min_pair_distance(state: &ParticleState) -> Result<f64> {
    let n = state.n();
    if n < 2 {
        return Err(invalid("n", "minimal distance needs at least two particles"));
    }
    let d = state.dim;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let mut r2 = 0.0;
            for k in 0..d {
                let dx = state.positions[i * d + k] - state.positions[j * d + k];
                let dv = state.velocities[i * d + k] - state.velocities[j * d + k];
                r2 += dx * dx + dv * dv;
            }
            best = best.min(r2);
        }
    }
    Ok(best.sqrt())
}

/// `max_i |(X_i, V_i)|` in phase space.
pub fn support_radius(state: &ParticleState) -> f64 {
    let d = state.dim;
    (0..state.n())
        .map(|i| {
            (0..d)
                .map(|k| state.positions[i * d + k].powi(2) + state.velocities[i * d + k].powi(2))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Running supremum of [`support_radius`] along the samples.
pub fn support_radius_running(states: &[ParticleState]) -> Vec<f64> {
    let mut best: f64 = 0.0;
    states
        .iter()
        .map(|s| {
            best = best.max(support_radius(s));
            best
        })
        .collect()
}

/// `max_i |E_N(X_i)|`.
pub fn field_sup(state: &ParticleState, kernel: &KernelSpec) -> f64 {
    row_norms(&accelerations(state, kernel), state.dim)
        .into_iter()
        .fold(0.0, f64::max)
}

fn row_norms(a: &[f64], d: usize) -> Vec<f64> {
    a.chunks_exact(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Time-averaged discrete field derivative over the window ending at the last sample.
///
/// Samples before `t = 0` contribute zero; at `t = 0` the value is 0.
pub fn avg_discrete_field_derivative(
    window: &TrajectoryWindow,
    kernel: &KernelSpec,
    eps: f64,
    r_prime: f64,
) -> Result<f64> {
    let series = field_derivative_series(window, kernel, eps, r_prime)?;
    Ok(*series.last().expect("non-empty"))
}

/// [`avg_discrete_field_derivative`] evaluated with the window ending at every sample.
///
/// The window must start at `t = 0` or contain at least one full window of
/// history before its last sample.
pub fn field_derivative_series(
    window: &TrajectoryWindow,
    kernel: &KernelSpec,
    eps: f64,
    r_prime: f64,
) -> Result<Vec<f64>> {
    let w = window.window_steps();
    let states = &window.states;
    let starts_at_zero = states[0].time.abs() < 1e-12;
    if !starts_at_zero && states.len() < w + 1 {
        return Err(Error::WindowTooShort {
            span: (states.len() - 1) as f64 * window.dt,
            tau: window.tau,
        });
    }
    let fields: Vec<Vec<f64>> = states.iter().map(|s| accelerations(s, kernel)).collect();
    let delta = eps.powf(1.0 + r_prime);
    let d = window.states[0].dim;
    let n = window.states[0].n();
    let m = states.len();
    let h = window.dt;
    let mut best = vec![0.0f64; m];
    let mut g = vec![0.0; m];
    let mut prefix = vec![0.0; m + 1];
    for i in 0..n {
        for j in i + 1..n {
            for (k, s) in states.iter().enumerate() {
                let (mut dx2, mut de2) = (0.0, 0.0);
                for c in 0..d {
                    let dx = s.positions[i * d + c] - s.positions[j * d + c];
                    let de = fields[k][i * d + c] - fields[k][j * d + c];
                    dx2 += dx * dx;
                    de2 += de * de;
                }
                g[k] = de2.sqrt() / (dx2.sqrt() + delta);
            }
            sliding_trapezoid_max(&g, w, h, window.tau, starts_at_zero, &mut prefix, &mut best);
        }
    }
    if !starts_at_zero {
        // values before a full window of history are not defined
        for b in best.iter_mut().take(w) {
            *b = f64::NAN;
        }
    }
    Ok(best)
}

/// For each end index `k`, `(1/tau) * trapezoid(g over [k - w, k])` with samples
/// before index 0 treated as absent (zero-fill), folded into `best` by max.
fn sliding_trapezoid_max(
    g: &[f64],
    w: usize,
    h: f64,
    tau: f64,
    zero_fill: bool,
    prefix: &mut [f64],
    best: &mut [f64],
) {
    let m = g.len();
    prefix[0] = 0.0;
    for k in 0..m {
        prefix[k + 1] = prefix[k] + g[k];
    }
    for k in 0..m {
        if k < w && !zero_fill {
            continue;
        }
        let lo = k.saturating_sub(w);
        if lo == k {
            continue;
        }
        let sum = prefix[k + 1] - prefix[lo];
        let integral = h * (sum - 0.5 * (g[lo] + g[k]));
        let v = integral / tau;
        if v > best[k] {
            best[k] = v;
        }
    }
}

/// Kinetic and potential parts of the mean-field energy.
pub fn energy_parts(state: &ParticleState, kernel: &KernelSpec) -> Result<(f64, f64)> {
    let n = state.n();
    let d = state.dim;
    let ke = state.velocities.iter().map(|v| v * v).sum::<f64>() * 0.5 / n as f64;
    // probe once so that kernels without a potential are rejected even for N = 1
    kernel.potential_radial(1.0)?;
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let mut r2 = 0.0;
            for k in 0..d {
                let dx = state.positions[i * d + k] - state.positions[j * d + k];
                r2 += dx * dx;
            }
            two_sum(&mut s, &mut c, kernel.potential_radial(r2.sqrt())?);
        }
    }
    // each unordered pair stands for two ordered pairs: (1/2N^2) * 2 * sum
    let pe = (s + c) / (n as f64 * n as f64);
    Ok((ke, pe))
}

/// `(1/N) sum |V_i|^2 / 2 + (1/2N^2) sum_{i != j} Phi(X_i - X_j)`.
pub fn total_energy(state: &ParticleState, kernel: &KernelSpec) -> Result<f64> {
    let (ke, pe) = energy_parts(state, kernel)?;
    Ok(ke + pe)
}

/// A smooth test function on phase space `R^{2d}`.
pub trait PhaseTestFunction {
    fn value(&self, x: &[f64], v: &[f64]) -> f64;
    /// Writes `grad_x phi` and `grad_v phi`.
    fn gradient(&self, x: &[f64], v: &[f64], gx: &mut [f64], gv: &mut [f64]);
}

/// `phi(x, v) = a . x + b . v + c0`.
pub struct AffineTest {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c0: f64,
}

impl PhaseTestFunction for AffineTest {
    fn value(&self, x: &[f64], v: &[f64]) -> f64 {
        self.c0
            + self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>()
            + self.b.iter().zip(v).map(|(b, v)| b * v).sum::<f64>()
    }

    fn gradient(&self, _x: &[f64], _v: &[f64], gx: &mut [f64], gv: &mut [f64]) {
        gx.copy_from_slice(&self.a);
        gv.copy_from_slice(&self.b);
    }
}

/// Compactly supported `exp(-1 / (1 - |z - center|^2 / radius^2))` on phase space.
pub struct BumpTest {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BumpTest {
    fn offset(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, f64) {
        let z: Vec<f64> = x
            .iter()
            .chain(v)
            .zip(&self.center)
            .map(|(z, c)| (z - c) / self.radius)
            .collect();
        let q = z.iter().map(|v| v * v).sum();
        (z, q)
    }
}

impl PhaseTestFunction for BumpTest {
    fn value(&self, x: &[f64], v: &[f64]) -> f64 {
        let (_, q) = self.offset(x, v);
        if q >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - q)).exp()
        }
    }

    fn gradient(&self, x: &[f64], v: &[f64], gx: &mut [f64], gv: &mut [f64]) {
        let (z, q) = self.offset(x, v);
        let d = x.len();
        let scale = if q >= 1.0 {
            0.0
        } else {
            let e = (-1.0 / (1.0 - q)).exp();
            // d/dz exp(-1/(1-q)) = -2 z e / (1-q)^2, then chain rule 1/radius
            -2.0 * e / ((1.0 - q) * (1.0 - q)) / self.radius
        };
        for k in 0..d {
            gx[k] = scale * z[k];
            gv[k] = scale * z[d + k];
        }
    }
}

/// Weak-form residual `|d/dt <mu, phi> - <mu, v.grad_x phi + E.grad_v phi>|`
/// at the middle sample of the window.
pub fn moment_residual(
    window: &TrajectoryWindow,
    kernel: &KernelSpec,
    test_fn: &dyn PhaseTestFunction,
) -> Result<f64> {
    let m = window.states.len();
    if m < 3 {
        return Err(invalid("window", "needs at least three samples"));
    }
    let mid = m / 2;
    let pairing = |s: &ParticleState| {
        (0..s.n()).map(|i| test_fn.value(s.x(i), s.v(i))).sum::<f64>() / s.n() as f64
    };
    let ddt = (pairing(&window.states[mid + 1]) - pairing(&window.states[mid - 1])) / (2.0 * window.dt);
    let s = &window.states[mid];
    let e = accelerations(s, kernel);
    let d = s.dim;
    let mut gx = vec![0.0; d];
    let mut gv = vec![0.0; d];
    let mut rhs = 0.0;
    for i in 0..s.n() {
        test_fn.gradient(s.x(i), s.v(i), &mut gx, &mut gv);
        for k in 0..d {
            rhs += s.velocities[i * d + k] * gx[k] + e[i * d + k] * gv[k];
        }
    }
    rhs /= s.n() as f64;
    Ok((ddt - rhs).abs())
}

/// Average of `K_eps(|X_i - X_j|)` over the window ending at the last sample,
/// for every ordered pair `(i, j)`, row-major `N x N` (diagonal zero).
pub fn kepsilon_pair_average(
    window: &TrajectoryWindow,
    alpha: f64,
    eps: f64,
    r_prime: f64,
) -> Result<Vec<f64>> {
    let states = window_tail(window)?;
    let n = states[0].n();
    let d = states[0].dim;
    let h = window.dt;
    let mut out = vec![0.0; n * n];
    let w = states.len() - 1;
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for (k, s) in states.iter().enumerate() {
                let mut r2 = 0.0;
                for c in 0..d {
                    let dx = s.positions[i * d + c] - s.positions[j * d + c];
                    r2 += dx * dx;
                }
                let weight = if k == 0 || k == w { 0.5 } else { 1.0 };
                acc += weight * kepsilon(r2.sqrt(), eps, r_prime, alpha);
            }
            let v = acc * h / window.tau;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Ok(out)
}

/// The last `tau / dt + 1` samples, or all samples when the window starts at `t = 0`.
pub(crate) fn window_tail(window: &TrajectoryWindow) -> Result<&[ParticleState]> {
    let w = window.window_steps();
    let m = window.states.len();
    if m > w {
        Ok(&window.states[m - w - 1..])
    } else if window.states[0].time.abs() < 1e-12 {
        Ok(&window.states[..])
    } else {
        Err(Error::WindowTooShort {
            span: (m - 1) as f64 * window.dt,
            tau: window.tau,
        })
    }
}
