//! Convergence of sampled particle systems toward a high-resolution reference.

use serde::Serialize;

use super::{map_indices, quantiles, rate_fit, InitKind, RateFit, ReferenceConfig, ResultRow, StudyConfig};
use crate::error::{invalid, Result};
use crate::kernels::{l1_gap, KernelSpec};
use crate::particles::{simulate, ParticleState, SimOptions};
use crate::sampling::{epsilon_scale, mesh_init, sample_iid_replica};
use crate::transport::{w1, WeightedCloud};
use crate::vlasov::{evolve_grid, particle_reference, PhaseGrid};

/// Replica index reserved for the reference run's random stream.
const REFERENCE_STREAM: u64 = 1 << 40;
/// Fraction of flagged runs above which a study is reported as contaminated.
const CONTAMINATION_FRACTION: f64 = 0.1;
/// Cloud weight below which grid cells are dropped from the reference measure.
const GRID_FLOOR: f64 = 1e-14;

/// Statistics of `sup_t W1(mu_N(t), reference(t))` over replicas for one `N`.
#[derive(Clone, Debug, Serialize)]
pub struct PerN {
    pub n: usize,
    pub eps: f64,
    pub eta: Option<f64>,
    pub sup_w1: Vec<f64>,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Runs in which the near-collision check fired at least once.
    pub flagged_runs: usize,
    pub contaminated: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub times: Vec<f64>,
    pub per_n: Vec<PerN>,
    /// Power law fitted to the medians.
    pub fit: RateFit,
    /// `W1` between the reference and an independent half-size reference at `t_end`.
    pub reference_floor: Option<f64>,
    /// The median at the largest `N` is within a factor 2 of the floor.
    pub floor_warning: bool,
}

/// Sampled reference measures at the study's sample times.
struct Reference {
    clouds: Vec<WeightedCloud>,
    floor: Option<f64>,
}

fn reference_kernel(config: &StudyConfig, m_bar: Option<f64>) -> Result<KernelSpec> {
    // the reference keeps a cut-off when the study has one, at its own (finer) eps
    let n_ref = match config.reference {
        ReferenceConfig::Particle { n_ref } => n_ref,
        ReferenceConfig::Grid { nx, nv } => nx * nv,
    };
    config.kernel_for(n_ref, m_bar)
}

fn build_reference(config: &StudyConfig, m_bar: Option<f64>, with_floor: bool) -> Result<Reference> {
    let density = config.density_spec()?;
    let kernel = reference_kernel(config, m_bar)?;
    let (steps, every) = config.schedule()?;
    let ref_seed = config.seed ^ REFERENCE_STREAM;
    match config.reference {
        ReferenceConfig::Particle { n_ref } => {
            if n_ref < 2 {
                return Err(invalid("reference.n_ref", "must be at least 2"));
            }
            let full = particle_reference(&density, n_ref, ref_seed, &kernel, config.dt, steps, every)?;
            let clouds: Vec<WeightedCloud> = full.samples.iter().map(to_cloud).collect();
            let floor = if with_floor {
                let half = particle_reference(&density, n_ref / 2, ref_seed ^ 1, &kernel, config.dt, steps, every)?;
                Some(w1(clouds.last().unwrap(), &to_cloud(half.samples.last().unwrap()))?.cost)
            } else {
                None
            };
            Ok(Reference { clouds, floor })
        }
        ReferenceConfig::Grid { nx, nv } => {
            if config.dim != 1 {
                return Err(invalid("reference.kind", "grid references need dim = 1"));
            }
            let half = reference_half_width(config);
            let grid = PhaseGrid::from_density(&density, nx, (-half, half), nv, (-half, half))?;
            let (history, _) = evolve_grid(grid, &kernel, config.dt, steps, every)?;
            let clouds = history.iter().map(|g| g.to_cloud(GRID_FLOOR)).collect::<Result<Vec<_>>>()?;
            let floor = if with_floor && nx >= 4 && nv >= 4 {
                let coarse = PhaseGrid::from_density(&density, nx / 2, (-half, half), nv / 2, (-half, half))?;
                let (h2, _) = evolve_grid(coarse, &kernel, config.dt, steps, every)?;
                Some(w1(clouds.last().unwrap(), &h2.last().unwrap().to_cloud(GRID_FLOOR)?)?.cost)
            } else {
                None
            };
            Ok(Reference { clouds, floor })
        }
    }
}

/// Grid half-width leaving room for the support to spread over `[0, t_end]`.
fn reference_half_width(config: &StudyConfig) -> f64 {
    let r0 = config.density_spec().map(|d| d.support_half_width()).unwrap_or(1.0);
    r0 * (3.0 + 2.0 * config.t_end)
}

fn to_cloud(s: &ParticleState) -> WeightedCloud {
    WeightedCloud::uniform(2 * s.dim, s.phase_points())
}

fn initial_state(config: &StudyConfig, n: usize, replica: usize) -> Result<ParticleState> {
    let density = config.density_spec()?;
    match config.init {
        InitKind::Iid => sample_iid_replica(&density, n, config.seed, replica as u64),
        InitKind::Mesh => {
            let k = (n as f64).powf(1.0 / (2 * config.dim) as f64).round() as usize;
            if k.pow(2 * config.dim as u32) != n {
                return Err(invalid("n_list", format!("{n} is not a perfect {}-th power", 2 * config.dim)));
            }
            let h = density.support_half_width();
            mesh_init(k, &vec![(-h, h); 2 * config.dim])
        }
    }
}

struct Replica {
    w1: Vec<f64>,
    flagged: bool,
}

fn run_replica(config: &StudyConfig, kernel: &KernelSpec, reference: &Reference, n: usize, replica: usize) -> Result<Replica> {
    let (steps, every) = config.schedule()?;
    let init = initial_state(config, n, replica)?;
    let samples = if steps == 0 {
        vec![init]
    } else {
        let mut opts = SimOptions::new(config.dt, steps, every);
        opts.collision_check_every = every;
        let (samples, diag) = simulate(init, kernel, &opts)?;
        return finish(samples, reference, diag.near_collision_steps > 0);
    };
    finish(samples, reference, false)
}

fn finish(samples: Vec<ParticleState>, reference: &Reference, flagged: bool) -> Result<Replica> {
    let w1s = samples
        .iter()
        .zip(&reference.clouds)
        .map(|(s, r)| w1(&to_cloud(s), r).map(|c| c.cost))
        .collect::<Result<Vec<_>>>()?;
    Ok(Replica { w1: w1s, flagged })
}

fn run_convergence(config: &StudyConfig, m_bar: Option<f64>, study: &str, with_floor: bool) -> Result<(ConvergenceReport, Vec<ResultRow>)> {
    config.validate()?;
    if config.n_list.len() < 3 {
        return Err(invalid("n_list", "a convergence study needs at least three particle counts"));
    }
    let reference = build_reference(config, m_bar, with_floor)?;
    let times: Vec<f64> = (0..reference.clouds.len())
        .map(|k| if reference.clouds.len() > 1 { config.t_end * k as f64 / (reference.clouds.len() - 1) as f64 } else { 0.0 })
        .collect();
    let mut rows = Vec::new();
    let mut per_n = Vec::new();
    for &n in &config.n_list {
        let kernel = config.kernel_for(n, m_bar)?;
        let runs = map_indices(config.replicas, |r| run_replica(config, &kernel, &reference, n, r))?;
        let mut sups = Vec::with_capacity(runs.len());
        for (r, run) in runs.iter().enumerate() {
            for (t, v) in times.iter().zip(&run.w1) {
                rows.push(ResultRow::new(study, n, Some(r), Some(*t), "w1", *v));
            }
            let sup = run.w1.iter().cloned().fold(0.0, f64::max);
            rows.push(ResultRow::new(study, n, Some(r), None, "sup_w1", sup));
            sups.push(sup);
        }
        let (q1, median, q3) = quantiles(&sups);
        for (name, v) in [("q1_sup_w1", q1), ("median_sup_w1", median), ("q3_sup_w1", q3)] {
            rows.push(ResultRow::new(study, n, None, None, name, v));
        }
        let flagged_runs = runs.iter().filter(|r| r.flagged).count();
        per_n.push(PerN {
            n,
            eps: epsilon_scale(n, config.gamma, config.dim),
            eta: kernel.eta(),
            sup_w1: sups,
            q1,
            median,
            q3,
            flagged_runs,
            contaminated: flagged_runs as f64 > CONTAMINATION_FRACTION * config.replicas as f64,
        });
    }
    let fit = rate_fit(&per_n.iter().map(|p| (p.n as f64, p.median)).collect::<Vec<_>>())?;
    let floor_warning = reference.floor.is_some_and(|f| per_n.last().unwrap().median < 2.0 * f);
    Ok((
        ConvergenceReport {
            times,
            per_n,
            fit,
            reference_floor: reference.floor,
            floor_warning,
        },
        rows,
    ))
}

/// Median of `sup_t W1` against the reference for every `N`, with a power-law fit.
pub fn convergence_study(config: &StudyConfig) -> Result<(ConvergenceReport, Vec<ResultRow>)> {
    run_convergence(config, None, "convergence", true)
}

#[derive(Clone, Debug, Serialize)]
pub struct L1Check {
    pub n: usize,
    pub eta: f64,
    pub l1_gap: f64,
    /// `eps^(m_bar (d - alpha))`.
    pub bound: f64,
    /// Only asserted for `m_bar >= 1`.
    pub checked: bool,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CutoffEntry {
    pub m_bar: f64,
    pub convergence: ConvergenceReport,
    pub l1: Vec<L1Check>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CutoffReport {
    /// `min((d-2)/(alpha-1), (2d-1)/alpha)` for `alpha > 1`.
    pub m_bar_threshold: Option<f64>,
    pub entries: Vec<CutoffEntry>,
}

/// One convergence study per cut-off order in `m_bar_list`.
pub fn cutoff_study(config: &StudyConfig) -> Result<(CutoffReport, Vec<ResultRow>)> {
    if config.m_bar_list.is_empty() {
        return Err(invalid("m_bar_list", "needs at least one cut-off order"));
    }
    let (d, a) = (config.dim as f64, config.kernel.alpha);
    let m_bar_threshold = (a > 1.0).then(|| ((d - 2.0) / (a - 1.0)).min((2.0 * d - 1.0) / a));
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for &m_bar in &config.m_bar_list {
        if !(m_bar >= 0.0) {
            return Err(invalid("m_bar_list", "cut-off orders must be non-negative"));
        }
        let (convergence, mut r) = run_convergence(config, Some(m_bar), "cutoff", false)?;
        let mut l1 = Vec::new();
        for &n in &config.n_list {
            let kernel = config.kernel_for(n, Some(m_bar))?;
            let eps = epsilon_scale(n, config.gamma, config.dim);
            let gap = l1_gap(&kernel)?;
            let bound = eps.powf(m_bar * (d - a));
            let checked = m_bar >= 1.0;
            l1.push(L1Check {
                n,
                eta: kernel.eta().unwrap_or(0.0),
                l1_gap: gap,
                bound,
                checked,
                holds: gap <= bound * (1.0 + 1e-6),
            });
            r.push(ResultRow::new("cutoff", n, None, None, &format!("l1_gap_m{m_bar}"), gap));
        }
        for row in r.iter_mut() {
            if row.metric.ends_with("sup_w1") || row.metric == "w1" {
                row.metric = format!("{}_m{m_bar}", row.metric);
            }
        }
        rows.extend(r);
        entries.push(CutoffEntry { m_bar, convergence, l1 });
    }
    Ok((CutoffReport { m_bar_threshold, entries }, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::KernelConfig;
    use crate::sampling::{DensityKind, Mollifier};

    fn config(strength: f64, t_end: f64) -> StudyConfig {
        StudyConfig {
            dim: 1,
            density: DensityKind::UniformCube { half_width: 1.0 },
            kernel: KernelConfig {
                alpha: 0.5,
                strength,
                cutoff: None,
            },
            gamma: 0.5,
            r: 1.1,
            r_prime: 1.2,
            n_list: vec![16, 32, 64],
            replicas: 3,
            seed: 5,
            t_end,
            dt: 0.05,
            n_times: if t_end > 0.0 { 3 } else { 1 },
            reference: ReferenceConfig::Particle { n_ref: 256 },
            init: InitKind::Iid,
            m_bar_list: vec![],
            l_grid: vec![],
            mollifier: Mollifier::UniformCube,
            quadrature_nodes: 4,
        }
    }

    #[test]
    fn static_study_matches_direct_w1() {
        let c = config(1.0, 0.0);
        let (rep, rows) = convergence_study(&c).unwrap();
        assert_eq!(rep.times, vec![0.0]);
        let density = c.density_spec().unwrap();
        let reference = sample_iid_replica(&density, 256, c.seed ^ REFERENCE_STREAM, 0).unwrap();
        let direct = w1(
            &to_cloud(&sample_iid_replica(&density, 32, c.seed, 1).unwrap()),
            &to_cloud(&reference),
        )
        .unwrap()
        .cost;
        assert!((rep.per_n[1].sup_w1[1] - direct).abs() < 1e-12);
        assert!(rows.iter().any(|r| r.metric == "median_sup_w1" && r.n == 64));
        assert!(rep.fit.slope < 0.0);
        assert!(rep.reference_floor.unwrap() > 0.0);
    }

    #[test]
    fn deterministic_regardless_of_threads() {
        let c = config(-1.0, 0.1);
        let (a, _) = convergence_study(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (b, _) = pool.install(|| convergence_study(&c)).unwrap();
        for (x, y) in a.per_n.iter().zip(&b.per_n) {
            assert_eq!(x.sup_w1, y.sup_w1);
        }
    }

    #[test]
    fn cutoff_study_reports_l1_checks() {
        let mut c = config(1.0, 0.0);
        c.dim = 3;
        c.kernel.alpha = 2.0;
        c.density = DensityKind::UniformBall { radius: 1.0 };
        c.m_bar_list = vec![0.5, 1.0];
        c.reference = ReferenceConfig::Particle { n_ref: 64 };
        c.replicas = 2;
        let (rep, rows) = cutoff_study(&c).unwrap();
        assert_eq!(rep.m_bar_threshold, Some(1.0));
        assert_eq!(rep.entries.len(), 2);
        assert!(!rep.entries[0].l1[0].checked);
        let e = &rep.entries[1].l1[0];
        // clipped family: gap = 3 pi eta for d = 3, alpha = 2, |c| = 1
        assert!((e.l1_gap - 3.0 * std::f64::consts::PI * e.eta).abs() < 1e-9 * e.l1_gap);
        assert!(rows.iter().any(|r| r.metric == "sup_w1_m0.5"));
    }

    #[test]
    fn grid_reference_in_one_dimension() {
        let mut c = config(1.0, 0.1);
        c.reference = ReferenceConfig::Grid { nx: 64, nv: 64 };
        c.density = DensityKind::TruncatedGaussian { sigma: 0.3, radius: 1.0 };
        c.replicas = 1;
        let (rep, _) = convergence_study(&c).unwrap();
        assert_eq!(rep.times.len(), 3);
        assert!(rep.per_n.iter().all(|p| p.median > 0.0 && p.median < 1.0));
    }
}
