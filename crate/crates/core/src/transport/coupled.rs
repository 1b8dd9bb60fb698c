//! Distances and force mismatches along two trajectories coupled by a fixed
//! initial matching (the plan transported by the two flows).

use crate::error::{invalid, Error, Result};
use crate::kernels::{kepsilon, KernelSpec};
use crate::particles::{window_tail, ParticleState, TrajectoryWindow};

fn check_grids(a: &[ParticleState], b: &[ParticleState], matching: &[usize]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid("trajectories", "need the same non-empty number of samples"));
    }
    for (sa, sb) in a.iter().zip(b) {
        if (sa.time - sb.time).abs() > 1e-9 * (1.0 + sa.time.abs()) {
            return Err(invalid("trajectories", "sample times differ"));
        }
        if sa.dim != sb.dim {
            return Err(Error::DimensionMismatch {
                expected: sa.dim,
                got: sb.dim,
            });
        }
    }
    if matching.len() != b[0].n() {
        return Err(Error::DimensionMismatch {
            expected: b[0].n(),
            got: matching.len(),
        });
    }
    if matching.iter().any(|&m| m >= a[0].n()) {
        return Err(invalid("matching", "index out of range"));
    }
    Ok(())
}

/// Running supremum over samples of `max_p |Z_b,p(s) - Z_a,matching[p](s)|`.
///
/// `matching[p]` is the partner in `a` of particle `p` of `b`; for equal sizes
/// it is a permutation, and for a blob system of `k` nodes per particle it
/// maps every node to its parent particle.
pub fn coupled_sup_distance(a: &[ParticleState], b: &[ParticleState], matching: &[usize]) -> Result<Vec<f64>> {
    check_grids(a, b, matching)?;
    let d = a[0].dim;
    let mut best: f64 = 0.0;
    let mut out = Vec::with_capacity(a.len());
    for (sa, sb) in a.iter().zip(b) {
        for (p, &q) in matching.iter().enumerate() {
            let mut r2 = 0.0;
            for k in 0..d {
                let dx = sb.positions[p * d + k] - sa.positions[q * d + k];
                let dv = sb.velocities[p * d + k] - sa.velocities[q * d + k];
                r2 += dx * dx + dv * dv;
            }
            best = best.max(r2);
        }
        out.push(best.sqrt());
    }
    Ok(out)
}

/// Time-averaged force mismatch over the window ending at the last sample:
/// for every listed particle `p` of `b`,
/// `(1/tau) int (1/N_b) sum_q |F(X_a,m(p) - X_a,m(q)) - F(X_b,p - X_b,q)| ds`.
pub fn i_alpha_diag(
    a: &TrajectoryWindow,
    b: &TrajectoryWindow,
    matching: &[usize],
    kernel: &KernelSpec,
    rows: Option<&[usize]>,
) -> Result<Vec<f64>> {
    check_grids(&a.states, &b.states, matching)?;
    let ta = window_tail(a)?;
    let tb = window_tail(b)?;
    let nb = b.states[0].n();
    let d = a.states[0].dim;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..nb).collect();
            &all
        }
    };
    let law = kernel.law();
    let last = ta.len() - 1;
    let mut out = Vec::with_capacity(rows.len());
    for &p in rows {
        let mut acc = 0.0;
        for (k, (sa, sb)) in ta.iter().zip(tb).enumerate() {
            let mut s = 0.0;
            let mp = matching[p];
            for (q, &mq) in matching.iter().enumerate() {
                let (mut ra, mut rb) = (0.0, 0.0);
                let mut dxa = [0.0; 8];
                let mut dxb = [0.0; 8];
                for c in 0..d {
                    dxa[c] = sa.positions[mp * d + c] - sa.positions[mq * d + c];
                    dxb[c] = sb.positions[p * d + c] - sb.positions[q * d + c];
                    ra += dxa[c] * dxa[c];
                    rb += dxb[c] * dxb[c];
                }
                let (fa, fb) = (law.factor(ra), law.factor(rb));
                let mut diff = 0.0;
                for c in 0..d {
                    let e = fa * dxa[c] - fb * dxb[c];
                    diff += e * e;
                }
                s += diff.sqrt();
            }
            let w = if ta.len() == 1 || k == 0 || k == last { 0.5 } else { 1.0 };
            acc += w * s / nb as f64;
        }
        let integral = if ta.len() == 1 { 0.0 } else { acc * a.dt };
        out.push(integral / a.tau);
    }
    Ok(out)
}

/// `(1/tau) int K_eps(|X_i - X_j|) ds` for all ordered pairs, row-major `N x N`.
pub fn j_alpha_diag(window: &TrajectoryWindow, alpha: f64, eps: f64, r_prime: f64) -> Result<Vec<f64>> {
    crate::particles::kepsilon_pair_average(window, alpha, eps, r_prime)
}

/// Row means `(1/N) sum_j J_ij` for the listed rows.
pub fn j_alpha_rows(window: &TrajectoryWindow, alpha: f64, eps: f64, r_prime: f64, rows: &[usize]) -> Result<Vec<f64>> {
    let states = window_tail(window)?;
    let n = states[0].n();
    let d = states[0].dim;
    let last = states.len() - 1;
    let mut out = Vec::with_capacity(rows.len());
    for &i in rows {
        let mut acc = 0.0;
        for (k, s) in states.iter().enumerate() {
            let mut row = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut r2 = 0.0;
                for c in 0..d {
                    let dx = s.positions[i * d + c] - s.positions[j * d + c];
                    r2 += dx * dx;
                }
                row += kepsilon(r2.sqrt(), eps, r_prime, alpha);
            }
            let w = if k == 0 || k == last { 0.5 } else { 1.0 };
            acc += w * row / n as f64;
        }
        let integral = if states.len() == 1 { 0.0 } else { acc * window.dt };
        out.push(integral / window.tau);
    }
    Ok(out)
}
