//! Singular interaction forces `F(x) = c x / |x|^(1+alpha)` and their cut-off
//! regularizations.
//!
//! The cut-off family coincides with the singular force outside the ball of
//! radius `eta = epsilon^m_bar` and is the linear continuation
//! `c x / eta^(1+alpha)` inside it, so `|F_N| <= |c| eta^-alpha` everywhere.
//! Both families obey `F(0) = 0`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};

/// Regularization of the force below the length `epsilon^m_bar`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub m_bar: f64,
    pub epsilon: f64,
}

impl Cutoff {
    pub fn eta(&self) -> f64 {
        self.epsilon.powf(self.m_bar)
    }
}

/// Whether the pair force pushes particles apart or pulls them together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    Repulsive,
    Attractive,
    Free,
}

/// An interaction-force family: exponent, strength and optional cut-off.
///
/// `strength > 0` is repulsive, `strength < 0` attractive and `0` gives free
/// transport.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub dim: usize,
    pub alpha: f64,
    pub strength: f64,
    pub cutoff: Option<Cutoff>,
}

impl KernelSpec {
    pub fn new(dim: usize, alpha: f64, strength: f64) -> Result<Self> {
        let spec = Self {
            dim,
            alpha,
            strength,
            cutoff: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_cutoff(mut self, m_bar: f64, epsilon: f64) -> Result<Self> {
        self.cutoff = Some(Cutoff { m_bar, epsilon });
        self.validate()?;
        Ok(self)
    }

    pub fn without_cutoff(mut self) -> Self {
        self.cutoff = None;
        self
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("kernel.dim", "must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("kernel.alpha", "must be finite and >= 0"));
        }
        if !self.strength.is_finite() {
            return Err(invalid("kernel.strength", "must be finite"));
        }
        match self.cutoff {
            None => {
                // local integrability of |x|^-alpha in R^d
                if self.alpha >= self.dim as f64 {
                    return Err(invalid(
                        "kernel.alpha",
                        format!("alpha = {} must stay below dim = {} without a cut-off", self.alpha, self.dim),
                    ));
                }
            }
            Some(c) => {
                if !(c.m_bar >= 0.0 && c.m_bar.is_finite()) {
                    return Err(invalid("kernel.cutoff.m_bar", "must be finite and >= 0"));
                }
                if !(c.epsilon > 0.0 && c.epsilon.is_finite()) {
                    return Err(invalid("kernel.cutoff.epsilon", "must be finite and > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn eta(&self) -> Option<f64> {
        self.cutoff.map(|c| c.eta())
    }

    pub fn interaction(&self) -> Interaction {
        if self.strength > 0.0 {
            Interaction::Repulsive
        } else if self.strength < 0.0 {
            Interaction::Attractive
        } else {
            Interaction::Free
        }
    }

    /// Precomputed radial law used by the pair loops.
    pub fn law(&self) -> ForceLaw {
        ForceLaw::new(self)
    }

    /// Force exerted at separation `x`, written into `out`.
    pub fn force_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let s = self.law().factor(r2);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = s * xi;
        }
    }

    pub fn force(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.force_into(x, &mut out);
        out
    }

    /// Radial magnitude `|F|` at distance `r`.
    pub fn magnitude(&self, r: f64) -> f64 {
        (self.law().factor(r * r) * r).abs()
    }

    /// Interaction potential with `-grad(potential) = force`.
    ///
    /// Outside the cut-off this is `-c |x|^(1-alpha) / (1-alpha)` (or
    /// `-c ln|x|` when `alpha = 1`); inside it is the matching quadratic.
    pub fn potential(&self, x: &[f64]) -> Result<f64> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.potential_radial(r)
    }

    pub fn potential_radial(&self, r: f64) -> Result<f64> {
        let a = self.alpha;
        let c = self.strength;
        let log_case = (a - 1.0).abs() < 1e-12;
        let outer = |r: f64| {
            if log_case {
                -c * r.ln()
            } else {
                -c * r.powf(1.0 - a) / (1.0 - a)
            }
        };
        match self.eta() {
            None => {
                if log_case {
                    return Err(invalid(
                        "kernel.alpha",
                        "alpha = 1 has a logarithmic potential; supply a cut-off",
                    ));
                }
                if r == 0.0 {
                    return Ok(0.0);
                }
                Ok(outer(r))
            }
            Some(eta) => {
                if r >= eta {
                    Ok(outer(r))
                } else {
                    let inner_at_eta = -c * eta * eta / (2.0 * eta.powf(1.0 + a));
                    Ok(-c * r * r / (2.0 * eta.powf(1.0 + a)) + (outer(eta) - inner_at_eta))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum PowRule {
    /// alpha = 0: r
    Sqrt,
    /// alpha = 0.5: r^1.5
    ThreeQuarter,
    /// alpha = 1: r^2
    Linear,
    /// alpha = 1.5: r^2.5
    FiveQuarter,
    /// alpha = 2: r^3
    ThreeHalves,
    General(f64),
}

/// Radial force law `F(x) = factor(|x|^2) * x`, with the exponent resolved
/// once so that the O(N^2) loops avoid `powf` for the common exponents.
#[derive(Clone, Copy, Debug)]
pub struct ForceLaw {
    strength: f64,
    rule: PowRule,
    eta2: f64,
}

impl ForceLaw {
    fn new(spec: &KernelSpec) -> Self {
        let a = spec.alpha;
        let rule = if a == 0.0 {
            PowRule::Sqrt
        } else if a == 0.5 {
            PowRule::ThreeQuarter
        } else if a == 1.0 {
            PowRule::Linear
        } else if a == 1.5 {
            PowRule::FiveQuarter
        } else if a == 2.0 {
            PowRule::ThreeHalves
        } else {
            PowRule::General(0.5 * (1.0 + a))
        };
        let eta2 = spec.eta().map_or(0.0, |e| e * e);
        Self {
            strength: spec.strength,
            rule,
            eta2,
        }
    }

    #[inline(always)]
    fn pow(&self, r2: f64) -> f64 {
        match self.rule {
            PowRule::Sqrt => r2.sqrt(),
            PowRule::ThreeQuarter => {
                let r = r2.sqrt();
                r * r.sqrt()
            }
            PowRule::Linear => r2,
            PowRule::FiveQuarter => r2 * r2.sqrt().sqrt(),
            PowRule::ThreeHalves => r2 * r2.sqrt(),
            PowRule::General(p) => r2.powf(p),
        }
    }

    /// Scalar `s` with `F(x) = s x` for `|x|^2 = r2`; zero at the origin.
    #[inline(always)]
    pub fn factor(&self, r2: f64) -> f64 {
        let r2c = if r2 > self.eta2 { r2 } else { self.eta2 };
        if r2c == 0.0 {
            0.0
        } else {
            self.strength / self.pow(r2c)
        }
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }
}

/// Empirical constants of the `|F| <= C/|x|^alpha`, `|grad F| <= C/|x|^(1+alpha)`
/// bounds measured on spherical shells.
#[derive(Clone, Debug, Serialize)]
pub struct SAlphaReport {
    pub c_force: f64,
    pub c_grad: f64,
    /// Per-radius suprema of `|F| |x|^alpha`.
    pub force_shells: Vec<f64>,
    /// Per-radius suprema of `|grad F| |x|^(1+alpha)`.
    pub grad_shells: Vec<f64>,
    pub pass: bool,
}

/// Measures the singularity constants of `spec` on the given radii.
pub fn verify_salpha(spec: &KernelSpec, radii: &[f64]) -> Result<SAlphaReport> {
    let law = spec.law();
    verify_salpha_with(spec.dim, spec.alpha, radii, |x: &[f64], out: &mut [f64]| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let s = law.factor(r2);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = s * xi;
        }
    })
}

/// Same as [`verify_salpha`] for an arbitrary force field.
pub fn verify_salpha_with<F>(dim: usize, alpha: f64, radii: &[f64], force: F) -> Result<SAlphaReport>
where
    F: Fn(&[f64], &mut [f64]),
{
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("radii", "must be a non-empty list of positive radii"));
    }
    let dirs = probe_directions(dim);
    let mut force_shells = Vec::with_capacity(radii.len());
    let mut grad_shells = Vec::with_capacity(radii.len());
    let mut x = vec![0.0; dim];
    let mut f = vec![0.0; dim];
    let mut jac = vec![0.0; dim * dim];
    for &r in radii {
        let mut sup_f: f64 = 0.0;
        let mut sup_g: f64 = 0.0;
        for u in &dirs {
            for k in 0..dim {
                x[k] = r * u[k];
            }
            force(&x, &mut f);
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            sup_f = sup_f.max(norm * r.powf(alpha));
            jacobian_central(&force, &x, 1e-5 * r, &mut jac);
            sup_g = sup_g.max(spectral_norm(&jac, dim) * r.powf(1.0 + alpha));
        }
        force_shells.push(sup_f);
        grad_shells.push(sup_g);
    }
    let stable = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        v.iter().all(|x| x.is_finite()) && (min == max || (min > 0.0 && max / min <= 1.1))
    };
    let pass = stable(&force_shells) && stable(&grad_shells);
    Ok(SAlphaReport {
        c_force: force_shells.iter().cloned().fold(0.0, f64::max),
        c_grad: grad_shells.iter().cloned().fold(0.0, f64::max),
        force_shells,
        grad_shells,
        pass,
    })
}

fn probe_directions(dim: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::new();
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        dirs.push(e.clone());
        e[k] = -1.0;
        dirs.push(e);
    }
    for m in 1..=8 {
        let v: Vec<f64> = (0..dim)
            .map(|i| (0.7 * m as f64 * (i + 1) as f64 + 0.3).sin())
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            dirs.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    dirs
}

fn jacobian_central<F: Fn(&[f64], &mut [f64])>(force: &F, x: &[f64], h: f64, jac: &mut [f64]) {
    let d = x.len();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for k in 0..d {
        xp[k] = x[k] + h;
        force(&xp, &mut fp);
        xp[k] = x[k] - h;
        force(&xp, &mut fm);
        xp[k] = x[k];
        for i in 0..d {
            jac[i * d + k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

/// Largest singular value of a small dense matrix by power iteration on J^T J.
fn spectral_norm(jac: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    // a fixed non-symmetric start avoids landing in an eigenvector's null space
    for (i, vi) in v.iter_mut().enumerate() {
        *vi += 0.1 * (i as f64 + 1.0);
    }
    let mut w = vec![0.0; d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        // w = J v
        for i in 0..d {
            w[i] = (0..d).map(|k| jac[i * d + k] * v[k]).sum();
        }
        // v = J^T w
        let mut next = vec![0.0; d];
        for k in 0..d {
            next[k] = (0..d).map(|i| jac[i * d + k] * w[i]).sum();
        }
        let l = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (l - lambda).abs() <= 1e-14 * l.max(1e-300) {
            lambda = l;
            break;
        }
        lambda = l;
        v = next;
    }
    lambda.sqrt()
}

/// `min(|x|^-(1+alpha), eps^-(1+r') |x|^-alpha)` with value 0 at the origin.
pub fn kepsilon(x_norm: f64, eps: f64, r_prime: f64, alpha: f64) -> f64 {
    if x_norm <= 0.0 {
        return 0.0;
    }
    let near = x_norm.powf(-(1.0 + alpha));
    let far = eps.powf(-(1.0 + r_prime)) * x_norm.powf(-alpha);
    near.min(far)
}

/// Surface measure of the unit sphere in R^d.
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / gamma(h)
}

/// Volume of the unit ball in R^d.
pub fn ball_volume(d: usize) -> f64 {
    sphere_area(d) / d as f64
}

/// `||F - F_N||_1` for a cut-off kernel, by radial quadrature.
pub fn l1_gap(spec_with_cutoff: &KernelSpec) -> Result<f64> {
    if spec_with_cutoff.cutoff.is_none() {
        return Err(invalid("kernel.cutoff", "l1_gap needs a cut-off kernel"));
    }
    l1_difference(&spec_with_cutoff.without_cutoff(), spec_with_cutoff)
}

/// `||F_1 - F_2||_1` for two kernels that share exponent and strength and
/// differ only through their cut-off lengths.
pub fn l1_difference(k1: &KernelSpec, k2: &KernelSpec) -> Result<f64> {
    if k1.dim != k2.dim {
        return Err(Error::DimensionMismatch {
            expected: k1.dim,
            got: k2.dim,
        });
    }
    if k1.alpha != k2.alpha || k1.strength != k2.strength {
        return Err(invalid(
            "kernel",
            "the L1 difference is only finite for kernels sharing alpha and strength",
        ));
    }
    let d = k1.dim as f64;
    let alpha = k1.alpha;
    if alpha >= d {
        return Err(invalid("kernel.alpha", "the force is not locally integrable for alpha >= dim"));
    }
    let reach = k1.eta().unwrap_or(0.0).max(k2.eta().unwrap_or(0.0));
    if reach == 0.0 || k1.strength == 0.0 {
        return Ok(0.0);
    }
    let (l1, l2) = (k1.law(), k2.law());
    // r = reach * u^q turns the r^(d-1-alpha) endpoint singularity into a constant
    let q = 1.0 / (d - alpha);
    let area = sphere_area(k1.dim);
    let integrand = |u: f64| -> f64 {
        if u <= 0.0 {
            // limit of the substituted integrand as u -> 0
            return area * k1.strength.abs() * reach.powf(d - alpha) * q * endpoint_weight(k1, k2);
        }
        let r = reach * u.powf(q);
        let diff = ((l1.factor(r * r) - l2.factor(r * r)) * r).abs();
        let jac = reach * q * u.powf(q - 1.0);
        area * diff * r.powf(d - 1.0) * jac
    };
    adaptive_simpson(&integrand, 0.0, 1.0, 1e-10)
}

// Both cut-off families behave like a pure power near the origin, so the
// substituted integrand tends to |c| * (number of singular kernels).
fn endpoint_weight(k1: &KernelSpec, k2: &KernelSpec) -> f64 {
    let singular = |k: &KernelSpec| k.cutoff.is_none();
    match (singular(k1), singular(k2)) {
        (true, false) | (false, true) => 1.0,
        _ => 0.0,
    }
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let scale = whole.abs().max(1e-300);
    let mut failed = false;
    let v = simpson_rec(f, a, b, fa, fm, fb, whole, rel_tol * scale, 60, &mut failed);
    if failed || !v.is_finite() {
        return Err(Error::QuadratureDivergence {
            estimate: v,
            error: rel_tol * scale,
        });
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    failed: &mut bool,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    if depth == 0 {
        *failed = true;
        return left + right;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1, failed)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1, failed)
}
