//! Initial data: i.i.d. draws from compactly supported phase-space densities,
//! mesh placement, the blob scale `eps(N) = N^(-gamma / 2d)`, blob
//! quadratures and sup-norm estimates for blob-smoothed empirical measures.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Error, Result};
use crate::kernels::ball_volume;
use crate::particles::ParticleState;
use crate::transport::WeightedCloud;

/// Shape of a probability density on phase space `R^n`, `n = 2d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityKind {
    /// Uniform on the Euclidean ball of the given radius.
    UniformBall { radius: f64 },
    /// Uniform on `[-half_width, half_width]^n`.
    UniformCube { half_width: f64 },
    /// `exp(-|z|^2 / 2 sigma^2)` restricted to the ball of the given radius.
    TruncatedGaussian { sigma: f64, radius: f64 },
    /// Product of tent densities `(1 - |z_k| / h) / h` on `[-h, h]`.
    ProductTent { half_width: f64 },
    /// Equal-weight atoms (no bounded density); flattened `n`-vectors.
    Atoms { points: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    /// Phase-space dimension `n = 2d`.
    pub phase_dim: usize,
    #[serde(flatten)]
    pub kind: DensityKind,
}

impl DensitySpec {
    pub fn new(phase_dim: usize, kind: DensityKind) -> Result<Self> {
        let spec = Self { phase_dim, kind };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase_dim == 0 || self.phase_dim % 2 != 0 {
            return Err(invalid("density.phase_dim", "must be a positive even number (2d)"));
        }
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, "must be positive and finite"))
            }
        };
        match &self.kind {
            DensityKind::UniformBall { radius } => positive("density.radius", *radius),
            DensityKind::UniformCube { half_width } => positive("density.half_width", *half_width),
            DensityKind::TruncatedGaussian { sigma, radius } => {
                positive("density.sigma", *sigma)?;
                positive("density.radius", *radius)
            }
            DensityKind::ProductTent { half_width } => positive("density.half_width", *half_width),
            DensityKind::Atoms { points } => {
                if points.is_empty() || points.len() % self.phase_dim != 0 {
                    return Err(invalid("density.points", "must hold a positive number of phase-space points"));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.phase_dim / 2
    }

    /// `||f||_inf`, or `None` for atomic measures.
    pub fn sup_norm(&self) -> Option<f64> {
        let n = self.phase_dim;
        match &self.kind {
            DensityKind::UniformBall { radius } => Some(1.0 / (ball_volume(n) * radius.powi(n as i32))),
            DensityKind::UniformCube { half_width } => Some((2.0 * half_width).powi(-(n as i32))),
            DensityKind::TruncatedGaussian { sigma, radius } => Some(1.0 / self.gaussian_mass(*sigma, *radius)),
            DensityKind::ProductTent { half_width } => Some(half_width.powi(-(n as i32))),
            DensityKind::Atoms { .. } => None,
        }
    }

    fn gaussian_mass(&self, sigma: f64, radius: f64) -> f64 {
        let n = self.phase_dim as f64;
        let chi = ChiSquared::new(n).expect("positive degrees of freedom");
        (2.0 * std::f64::consts::PI * sigma * sigma).powf(n / 2.0) * chi.cdf((radius / sigma).powi(2))
    }

    /// Euclidean radius `R0` of a ball containing the support.
    pub fn support_radius(&self) -> f64 {
        let n = self.phase_dim as f64;
        match &self.kind {
            DensityKind::UniformBall { radius } | DensityKind::TruncatedGaussian { radius, .. } => *radius,
            DensityKind::UniformCube { half_width } | DensityKind::ProductTent { half_width } => half_width * n.sqrt(),
            DensityKind::Atoms { points } => points
                .chunks_exact(self.phase_dim)
                .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
        }
    }

    /// Half-width of the smallest centered cube containing the support.
    pub fn support_half_width(&self) -> f64 {
        match &self.kind {
            DensityKind::UniformBall { radius } | DensityKind::TruncatedGaussian { radius, .. } => *radius,
            DensityKind::UniformCube { half_width } | DensityKind::ProductTent { half_width } => *half_width,
            DensityKind::Atoms { points } => points.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        }
    }

    /// Density value at a phase-space point (atoms have no density: 0 off-atom).
    pub fn density(&self, z: &[f64]) -> f64 {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        match &self.kind {
            DensityKind::UniformBall { radius } => {
                if r2 <= radius * radius {
                    self.sup_norm().unwrap()
                } else {
                    0.0
                }
            }
            DensityKind::UniformCube { half_width } => {
                if z.iter().all(|v| v.abs() <= *half_width) {
                    self.sup_norm().unwrap()
                } else {
                    0.0
                }
            }
            DensityKind::TruncatedGaussian { sigma, radius } => {
                if r2 <= radius * radius {
                    (-r2 / (2.0 * sigma * sigma)).exp() / self.gaussian_mass(*sigma, *radius)
                } else {
                    0.0
                }
            }
            DensityKind::ProductTent { half_width } => z
                .iter()
                .map(|v| ((1.0 - v.abs() / half_width) / half_width).max(0.0))
                .product(),
            DensityKind::Atoms { .. } => 0.0,
        }
    }

    fn draw_one(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<()> {
        let n = self.phase_dim;
        const MAX_PROPOSALS: u64 = 1_000_000;
        match &self.kind {
            DensityKind::UniformCube { half_width } => {
                for o in out.iter_mut() {
                    *o = half_width * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            DensityKind::ProductTent { half_width } => {
                for o in out.iter_mut() {
                    let u: f64 = rng.random();
                    *o = if u < 0.5 {
                        half_width * ((2.0 * u).sqrt() - 1.0)
                    } else {
                        half_width * (1.0 - (2.0 * (1.0 - u)).sqrt())
                    };
                }
            }
            DensityKind::UniformBall { radius } => {
                for _ in 0..MAX_PROPOSALS {
                    let mut r2 = 0.0;
                    for o in out.iter_mut() {
                        *o = radius * (2.0 * rng.random::<f64>() - 1.0);
                        r2 += *o * *o;
                    }
                    if r2 <= radius * radius {
                        return Ok(());
                    }
                }
                return Err(Error::SamplingExhausted(MAX_PROPOSALS));
            }
            DensityKind::TruncatedGaussian { sigma, radius } => {
                for _ in 0..MAX_PROPOSALS {
                    let mut r2 = 0.0;
                    for o in out.iter_mut() {
                        let g: f64 = rng.sample(StandardNormal);
                        *o = sigma * g;
                        r2 += *o * *o;
                    }
                    if r2 <= radius * radius {
                        return Ok(());
                    }
                }
                return Err(Error::SamplingExhausted(MAX_PROPOSALS));
            }
            DensityKind::Atoms { points } => {
                let m = points.len() / n;
                let k = rng.random_range(0..m);
                out.copy_from_slice(&points[k * n..(k + 1) * n]);
            }
        }
        Ok(())
    }
}

/// Generator for particle `index` of Monte Carlo replica `replica`.
///
/// Streams are keyed by `(seed, replica, index)` so draws do not depend on the
/// order in which replicas or particles are generated.
pub fn particle_rng(seed: u64, replica: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng.set_word_pos((index as u128) << 40);
    rng
}

/// `n` i.i.d. draws from `density` (replica 0).
pub fn sample_iid(density: &DensitySpec, n: usize, seed: u64) -> Result<ParticleState> {
    sample_iid_replica(density, n, seed, 0)
}

pub fn sample_iid_replica(density: &DensitySpec, n: usize, seed: u64, replica: u64) -> Result<ParticleState> {
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    density.validate()?;
    let p = density.phase_dim;
    let mut points = vec![0.0; n * p];
    for (i, z) in points.chunks_exact_mut(p).enumerate() {
        let mut rng = particle_rng(seed, replica, i as u64);
        density.draw_one(&mut rng, z)?;
    }
    ParticleState::from_phase_points(p / 2, &points)
}

/// Particles at the cell centers of a uniform grid over the phase-space box
/// `bounds = [(lo, hi); 2d]`, first axis varying slowest.
pub fn mesh_init(n_per_axis: usize, bounds: &[(f64, f64)]) -> Result<ParticleState> {
    let p = bounds.len();
    if p == 0 || p % 2 != 0 {
        return Err(invalid("mesh.bounds", "needs 2d axis ranges"));
    }
    if n_per_axis == 0 {
        return Err(invalid("mesh.n_per_axis", "must be at least 1"));
    }
    let total = (0..p)
        .try_fold(1usize, |acc, _| acc.checked_mul(n_per_axis))
        .filter(|t| *t <= (1 << 32))
        .ok_or_else(|| invalid("mesh.n_per_axis", "particle count overflows"))?;
    let mut points = Vec::with_capacity(total * p);
    let mut idx = vec![0usize; p];
    for _ in 0..total {
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            let h = (hi - lo) / n_per_axis as f64;
            points.push(lo + (idx[k] as f64 + 0.5) * h);
        }
        for k in (0..p).rev() {
            idx[k] += 1;
            if idx[k] < n_per_axis {
                break;
            }
            idx[k] = 0;
        }
    }
    ParticleState::from_phase_points(p / 2, &points)
}

/// `N^(-gamma / 2d)`.
pub fn epsilon_scale(n: usize, gamma: f64, dim_d: usize) -> f64 {
    (n as f64).powf(-gamma / (2.0 * dim_d as f64))
}

/// Mollifier used to smooth Dirac masses at scale `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mollifier {
    /// Normalized indicator of the unit ball.
    UniformBall,
    /// Indicator of `[-1/2, 1/2]^n`.
    UniformCube,
}

impl Mollifier {
    /// Smallest `c` with `supp phi` inside the ball of radius `c`.
    pub fn c_phi(&self, n: usize) -> f64 {
        match self {
            Mollifier::UniformBall => 1.0,
            Mollifier::UniformCube => 0.5 * (n as f64).sqrt(),
        }
    }

    pub fn sup(&self, n: usize) -> f64 {
        match self {
            Mollifier::UniformBall => 1.0 / ball_volume(n),
            Mollifier::UniformCube => 1.0,
        }
    }

    /// Side of the smallest centered cube containing the support.
    pub fn cube_side(&self) -> f64 {
        match self {
            Mollifier::UniformBall => 2.0,
            Mollifier::UniformCube => 1.0,
        }
    }

    fn contains(&self, y: &[f64]) -> bool {
        match self {
            Mollifier::UniformBall => y.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            Mollifier::UniformCube => y.iter().all(|v| v.abs() <= 0.5),
        }
    }
}

/// Empirical measure smoothed at scale `eps`.
#[derive(Clone, Debug)]
pub struct BlobMeasure {
    pub base: ParticleState,
    pub eps: f64,
    pub phi: Mollifier,
}

impl BlobMeasure {
    pub fn new(base: ParticleState, eps: f64, phi: Mollifier) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("eps", "must be positive and finite"));
        }
        Ok(Self { base, eps, phi })
    }

    pub fn c_phi(&self) -> f64 {
        self.phi.c_phi(2 * self.base.dim)
    }

    /// `f_N(z) = (1/N) sum_i eps^-n phi((z - Z_i) / eps)`.
    pub fn density_at(&self, z: &[f64]) -> f64 {
        let n = 2 * self.base.dim;
        let pts = self.base.phase_points();
        let mut y = vec![0.0; n];
        let count = pts
            .chunks_exact(n)
            .filter(|p| {
                for k in 0..n {
                    y[k] = (z[k] - p[k]) / self.eps;
                }
                self.phi.contains(&y)
            })
            .count();
        self.phi.sup(n) * count as f64 / (self.base.n() as f64 * self.eps.powi(n as i32))
    }
}

/// Upper estimate of `||f_N||_inf` from counts in doubled grid cubes.
///
/// Space is tiled by cubes of side `L eps` (`L` the mollifier's cube side);
/// every point is counted in the doubled cube of each tile it is adjacent to.
/// For the cube mollifier the estimate exceeds the true supremum by at most `2^n`.
pub fn blob_sup_norm(state: &ParticleState, eps: f64, phi: Mollifier) -> f64 {
    let n = 2 * state.dim;
    let side = phi.cube_side() * eps;
    let pts = state.phase_points();
    let mut counts: HashMap<Vec<i64>, u32> = HashMap::new();
    let mut lo = vec![0i64; n];
    let mut key = vec![0i64; n];
    for p in pts.chunks_exact(n) {
        // tiles with center c = side * k and |p - c|_inf <= side
        for k in 0..n {
            lo[k] = (p[k] / side).floor() as i64;
        }
        for mask in 0..(1u32 << n) {
            for k in 0..n {
                key[k] = lo[k] + ((mask >> k) & 1) as i64;
            }
            *counts.entry(key.clone()).or_insert(0) += 1;
        }
    }
    let max = counts.values().copied().max().unwrap_or(0);
    phi.sup(n) * max as f64 / (state.n() as f64 * eps.powi(n as i32))
}

/// Exact `||f_N||_inf` for the cube mollifier: the largest number of points
/// in a closed axis-aligned cube of side `eps`, found by anchoring every face
/// at a point coordinate.
pub fn blob_sup_norm_exact_cube(state: &ParticleState, eps: f64) -> f64 {
    let n = 2 * state.dim;
    let pts = state.phase_points();
    let idx: Vec<usize> = (0..state.n()).collect();
    let best = max_in_cube(&pts, n, &idx, 0, eps);
    best as f64 / (state.n() as f64 * eps.powi(n as i32))
}

fn max_in_cube(pts: &[f64], n: usize, idx: &[usize], axis: usize, side: f64) -> usize {
    if axis + 2 == n {
        return max_in_square(pts, n, idx, axis, side);
    }
    let mut sorted: Vec<usize> = idx.to_vec();
    sorted.sort_by(|&a, &b| pts[a * n + axis].total_cmp(&pts[b * n + axis]));
    let coord = |i: usize| pts[sorted[i] * n + axis];
    let mut best = 0;
    let mut hi = 0;
    for lo in 0..sorted.len() {
        if lo > 0 && coord(lo) == coord(lo - 1) {
            continue;
        }
        hi = hi.max(lo);
        while hi < sorted.len() && coord(hi) <= coord(lo) + side {
            hi += 1;
        }
        let slab = hi - lo;
        if slab <= best {
            continue;
        }
        let count = if axis + 1 == n {
            slab
        } else {
            max_in_cube(pts, n, &sorted[lo..hi], axis + 1, side)
        };
        best = best.max(count);
    }
    best
}

/// Last two axes: sweep the lower `x` face over the points while a segment
/// tree counts, for every candidate lower `y` face, the points in the window.
fn max_in_square(pts: &[f64], n: usize, idx: &[usize], axis: usize, side: f64) -> usize {
    let m = idx.len();
    if m == 0 {
        return 0;
    }
    let x = |i: usize| pts[i * n + axis];
    let y = |i: usize| pts[i * n + axis + 1];
    let mut by_x: Vec<usize> = idx.to_vec();
    by_x.sort_by(|&a, &b| x(a).total_cmp(&x(b)));
    let mut anchors: Vec<f64> = idx.iter().map(|&i| y(i)).collect();
    anchors.sort_by(f64::total_cmp);
    // point p lies above anchor a iff a <= y_p <= a + side: a contiguous run
    let span = |p: usize| {
        let yp = y(p);
        let start = anchors.partition_point(|&a| a + side < yp);
        let end = anchors.partition_point(|&a| a <= yp);
        (start, end)
    };
    let mut tree = MaxAddTree::new(m);
    let mut best = 0;
    let (mut hi, mut removed) = (0, 0);
    for lo in 0..m {
        if lo > 0 && x(by_x[lo]) == x(by_x[lo - 1]) {
            continue;
        }
        while removed < lo {
            let (a, b) = span(by_x[removed]);
            tree.add(a, b, -1);
            removed += 1;
        }
        hi = hi.max(lo);
        while hi < m && x(by_x[hi]) <= x(by_x[lo]) + side {
            let (a, b) = span(by_x[hi]);
            tree.add(a, b, 1);
            hi += 1;
        }
        best = best.max(tree.max() as usize);
    }
    best
}

/// Range add over `[a, b)` with a global maximum.
struct MaxAddTree {
    size: usize,
    max: Vec<i64>,
    lazy: Vec<i64>,
}

impl MaxAddTree {
    fn new(n: usize) -> Self {
        let size = n.next_power_of_two();
        Self {
            size,
            max: vec![0; 2 * size],
            lazy: vec![0; 2 * size],
        }
    }

    fn add(&mut self, a: usize, b: usize, v: i64) {
        if a < b {
            self.add_at(1, 0, self.size, a, b, v);
        }
    }

    fn add_at(&mut self, node: usize, lo: usize, hi: usize, a: usize, b: usize, v: i64) {
        if b <= lo || hi <= a {
            return;
        }
        if a <= lo && hi <= b {
            self.max[node] += v;
            self.lazy[node] += v;
            return;
        }
        let mid = (lo + hi) / 2;
        self.add_at(2 * node, lo, mid, a, b, v);
        self.add_at(2 * node + 1, mid, hi, a, b, v);
        self.max[node] = self.lazy[node] + self.max[2 * node].max(self.max[2 * node + 1]);
    }

    fn max(&self) -> i64 {
        self.max[1]
    }
}

/// Node placement inside one blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadraturePattern {
    /// Low-discrepancy nodes strictly inside the support.
    Interior,
    /// Alternates interior nodes with nodes projected onto the support boundary.
    BoundaryInclusive,
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

/// `k` nodes in the unit support of `phi` (dimension `n`), first node at the origin.
pub fn blob_pattern(phi: Mollifier, n: usize, k: usize, pattern: QuadraturePattern) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(invalid("k_per_blob", "must be at least 1"));
    }
    if n > PRIMES.len() {
        return Err(invalid("phase_dim", format!("quadrature patterns support up to {} dimensions", PRIMES.len())));
    }
    let half = 0.5 * phi.cube_side();
    let mut nodes = vec![0.0; n];
    let mut y = vec![0.0; n];
    // skip the first Halton points, which cluster on the axes
    let mut index = 20u64;
    let mut placed = 1;
    while placed < k {
        index += 1;
        for (c, yc) in y.iter_mut().enumerate() {
            *yc = half * (2.0 * radical_inverse(index, PRIMES[c]) - 1.0);
        }
        if !phi.contains(&y) || y.iter().all(|v| v.abs() < 1e-12) {
            continue;
        }
        if pattern == QuadraturePattern::BoundaryInclusive && placed % 2 == 1 {
            let scale = match phi {
                Mollifier::UniformBall => 1.0 / y.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Mollifier::UniformCube => 0.5 / y.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            };
            y.iter_mut().for_each(|v| *v *= scale);
        }
        nodes.extend_from_slice(&y);
        placed += 1;
    }
    Ok(nodes)
}

/// Replaces each Dirac by `k` equal-weight nodes of the scaled mollifier support.
pub fn blob_quadrature(
    state: &ParticleState,
    eps: f64,
    phi: Mollifier,
    k_per_blob: usize,
    pattern: QuadraturePattern,
) -> Result<WeightedCloud> {
    let n = 2 * state.dim;
    let nodes = blob_pattern(phi, n, k_per_blob, pattern)?;
    let pts = state.phase_points();
    let mut out = Vec::with_capacity(pts.len() * k_per_blob);
    for p in pts.chunks_exact(n) {
        for node in nodes.chunks_exact(n) {
            out.extend(p.iter().zip(node).map(|(c, y)| c + eps * y));
        }
    }
    Ok(WeightedCloud::uniform(n, out))
}
