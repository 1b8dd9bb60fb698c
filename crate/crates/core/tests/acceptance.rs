//! Acceptance suite: every criterion prints one PASS/FAIL line with the
//! measured quantities. Positional arguments select criteria by id (`c3`).

use std::time::Instant;

use mfl_core::experiments::{
    convergence_study, cutoff_study, deterministic_monitor, deviation_study_dmin, deviation_study_linf,
    deviation_study_w1, InitKind, KernelConfig, ReferenceConfig, StudyConfig,
};
use mfl_core::particles::{energy_parts, simulate, ParticleState, SimOptions};
use mfl_core::sampling::{blob_quadrature, epsilon_scale, sample_iid, DensityKind, DensitySpec, Mollifier, QuadraturePattern};
use mfl_core::transport::{w1, winf, WeightedCloud};
use mfl_core::vlasov::{evolve_grid, support_bounds_monitor, PhaseGrid};
use mfl_core::KernelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn base_config(dim: usize, density: DensityKind, alpha: f64, strength: f64) -> StudyConfig {
    StudyConfig {
        dim,
        density,
        kernel: KernelConfig {
            alpha,
            strength,
            cutoff: None,
        },
        gamma: 0.5,
        r: 1.1,
        r_prime: 1.2,
        n_list: vec![],
        replicas: 16,
        seed: 20240601,
        t_end: 0.0,
        dt: 0.0,
        n_times: 1,
        reference: ReferenceConfig::Particle { n_ref: 2 },
        init: InitKind::Iid,
        m_bar_list: vec![],
        l_grid: vec![],
        mollifier: Mollifier::UniformCube,
        quadrature_nodes: 4,
    }
}

fn cube(half_width: f64) -> DensityKind {
    DensityKind::UniformCube { half_width }
}

// ---------------------------------------------------------------- oracles

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Brute force `(W1, Winf)` for equal-size uniform clouds.
fn permutation_oracle(dim: usize, a: &[f64], b: &[f64]) -> (f64, f64) {
    let k = a.len() / dim;
    let mut best1 = f64::INFINITY;
    let mut best_inf = f64::INFINITY;
    for p in permutations(k) {
        let costs: Vec<f64> = (0..k)
            .map(|i| euclid(&a[i * dim..(i + 1) * dim], &b[p[i] * dim..(p[i] + 1) * dim]))
            .collect();
        best1 = best1.min(costs.iter().sum::<f64>() / k as f64);
        best_inf = best_inf.min(costs.iter().cloned().fold(0.0, f64::max));
    }
    (best1, best_inf)
}

// ---------------------------------------------------------------- criteria

fn c1_transport_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=3);
        let k = rng.random_range(1..=7);
        let a: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (o1, oinf) = permutation_oracle(dim, &a, &b);
        let ca = WeightedCloud::uniform(dim, a);
        let cb = WeightedCloud::uniform(dim, b);
        let r1 = w1(&ca, &cb).expect("w1").cost;
        let rinf = winf(&ca, &cb).expect("winf").cost;
        worst = worst.max((r1 - o1).abs()).max((rinf - oinf).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-12 && secs < 10.0, format!("max |solver - oracle| = {worst:.2e}, {secs:.2}s"))
}

fn c2_blob_winf() -> Outcome {
    let start = Instant::now();
    let n = 32;
    let density = DensitySpec::new(2, cube(1.0)).unwrap();
    let state = sample_iid(&density, n, 2).unwrap();
    let eps = epsilon_scale(n, 0.5, 1);
    let phi = Mollifier::UniformBall;
    let target = phi.c_phi(2) * eps;
    let mu = WeightedCloud::uniform(2, state.phase_points());
    let mut ratios = Vec::new();
    for k in [8, 32, 128] {
        let blob = blob_quadrature(&state, eps, phi, k, QuadraturePattern::BoundaryInclusive).unwrap();
        ratios.push(winf(&blob, &mu).expect("winf").cost / target);
    }
    let upward = ratios.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let last = *ratios.last().unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        upward && (0.95..=1.0 + 1e-12).contains(&last) && secs < 30.0,
        format!("winf / (c_phi eps) under refinement k=8,32,128: {ratios:.4?}, {secs:.1}s"),
    )
}

fn c3_initial_w1() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (dim, n_list) in [(1usize, vec![64, 256, 1024, 4096]), (3, vec![64, 729, 4096])] {
        let mut c = base_config(dim, cube(1.0), 0.5, 1.0);
        c.n_list = n_list;
        c.replicas = 16;
        let (rep, _) = deviation_study_w1(&c).expect("w1 study");
        let ok = (rep.fit.slope - rep.target_slope).abs() <= 0.05;
        pass &= ok;
        parts.push(format!(
            "2d={}: slope {:.4} (target {:.4}, R2 {:.3})",
            2 * dim,
            rep.fit.slope,
            rep.target_slope,
            rep.fit.r_squared
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c4_linf_deviation() -> Outcome {
    let mut c = base_config(1, cube(1.0), 0.5, 1.0);
    c.gamma = 0.5;
    c.n_list = vec![100, 1000, 10_000];
    c.replicas = 1000;
    let (rep, _) = deviation_study_linf(&c).expect("linf study");
    let parts: Vec<String> = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "N={}: {}/{} exceed, CP99 [{:.2e}, {:.2e}] vs bound {:.2e}{}",
                r.n,
                r.exceedances,
                c.replicas,
                r.cp_lower,
                r.cp_upper,
                r.bound,
                if r.upper_below_bound { "" } else { " (upper limit above bound)" }
            )
        })
        .collect();
    outcome(rep.rows.iter().all(|r| r.pass), parts.join("; "))
}

fn c5_dmin_law() -> Outcome {
    let mut c = base_config(1, cube(1.0), 0.5, 1.0);
    c.n_list = vec![1000];
    c.replicas = 1000;
    c.l_grid = (0..8).map(|k| 0.5 + 0.3 * k as f64).collect();
    let (rep, _) = deviation_study_dmin(&c).expect("dmin study");
    let r = &rep[0];
    let rel = (r.exponent - r.target_exponent).abs() / r.target_exponent;
    outcome(
        rel <= 0.15 && r.excluded == 0,
        format!(
            "exponent {:.3} vs {} ({:.1}% off, R2 {:.3}), P = {:.3?}, c_fit {:.3}",
            r.exponent,
            r.target_exponent,
            100.0 * rel,
            r.r_squared,
            r.probability,
            r.c_fit
        ),
    )
}

fn convergence_config(strength: f64) -> StudyConfig {
    let mut c = base_config(3, cube(1.0), 0.5, strength);
    c.gamma = 0.9;
    c.n_list = vec![250, 500, 1000, 2000, 4000];
    c.replicas = 16;
    c.reference = ReferenceConfig::Particle { n_ref: 32768 };
    c.t_end = 0.5;
    c.n_times = 8;
    c.dt = 0.5 / 70.0;
    c
}

fn c6_convergence() -> Outcome {
    let mut slopes = Vec::new();
    let mut parts = Vec::new();
    let mut pass = true;
    for strength in [1.0, -1.0] {
        let (rep, _) = convergence_study(&convergence_config(strength)).expect("convergence study");
        let s = rep.fit.slope;
        pass &= (-0.5..=-0.05).contains(&s);
        let medians: Vec<f64> = rep.per_n.iter().map(|p| p.median).collect();
        parts.push(format!(
            "c={strength:+}: slope {s:.4} (R2 {:.3}), medians {medians:.4?}, floor {:.4?}, contaminated {}",
            rep.fit.r_squared,
            rep.reference_floor,
            rep.per_n.iter().any(|p| p.contaminated)
        ));
        slopes.push(s);
    }
    let gap = (slopes[0] - slopes[1]).abs();
    pass &= gap <= 0.05;
    outcome(pass, format!("{}; sign gap {gap:.4}", parts.join("; ")))
}

fn c7_cutoff() -> Outcome {
    let mut c = base_config(3, cube(1.0), 2.0, 1.0);
    c.gamma = 0.9;
    c.n_list = vec![250, 500, 1000, 2000];
    c.replicas = 8;
    c.reference = ReferenceConfig::Particle { n_ref: 16384 };
    c.t_end = 0.5;
    c.n_times = 8;
    c.dt = 0.5 / 70.0;
    c.m_bar_list = vec![0.5, 1.0];
    let (rep, _) = match cutoff_study(&c) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for e in &rep.entries {
        let s = e.convergence.fit.slope;
        pass &= s < 0.0;
        let checked: Vec<String> = e
            .l1
            .iter()
            .filter(|l| l.checked)
            .map(|l| format!("N={} gap/bound {:.3}", l.n, l.l1_gap / l.bound))
            .collect();
        pass &= e.l1.iter().filter(|l| l.checked).all(|l| l.holds);
        parts.push(format!(
            "m_bar={}: slope {s:.4}{}",
            e.m_bar,
            if checked.is_empty() { String::new() } else { format!(", {}", checked.join(", ")) }
        ));
    }
    outcome(pass, format!("threshold {:?}; {}", rep.m_bar_threshold, parts.join("; ")))
}

fn c8_monitors() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for strength in [1.0, -1.0] {
        let mut c = base_config(3, cube(1.0), 0.5, strength);
        c.gamma = 1.0;
        c.init = InitKind::Mesh;
        c.n_list = vec![4096];
        c.t_end = 0.5;
        c.dt = 0.005;
        c.mollifier = Mollifier::UniformBall;
        c.n_times = 2;
        c.quadrature_nodes = 4;
        let (rep, _) = deterministic_monitor(&c).expect("monitor");
        let min_ratio = rep.d_min_ratio.iter().cloned().fold(f64::INFINITY, f64::min);
        let ok = rep.envelope_r_squared >= 0.9 && rep.d_min_pass;
        pass &= ok;
        parts.push(format!(
            "c={strength:+}: envelope rate {:.3} R2 {:.4}, min d_N bound ratio {min_ratio:.4} over {} samples",
            rep.envelope_rate,
            rep.envelope_r_squared,
            rep.times.len()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn c9_conservation() -> Outcome {
    let start = Instant::now();
    let density = DensitySpec::new(6, DensityKind::UniformBall { radius: 1.0 }).unwrap();
    let init = sample_iid(&density, 200, 9).unwrap();

    // momentum per step
    let kernel = KernelSpec::new(3, 0.5, 1.0).unwrap();
    let steps = 200;
    let (samples, _) = simulate(init.clone(), &kernel, &SimOptions::new(0.005, steps, steps)).unwrap();
    let p0 = init.total_momentum();
    let p1 = samples.last().unwrap().total_momentum();
    let momentum = euclid(&p0, &p1) / steps as f64;

    // energy over T = 1 with a bounded (cut-off) force
    let smooth = KernelSpec::new(3, 0.5, 1.0).unwrap().with_cutoff(1.0, 0.2).unwrap();
    let (samples, _) = simulate(init.clone(), &smooth, &SimOptions::new(0.001, 1000, 100)).unwrap();
    let (ke0, pe0) = energy_parts(&init, &smooth).unwrap();
    let scale = ke0 + pe0.abs();
    let energy = samples
        .iter()
        .map(|s| {
            let (ke, pe) = energy_parts(s, &smooth).unwrap();
            ((ke + pe) - (ke0 + pe0)).abs() / scale
        })
        .fold(0.0, f64::max);

    // grid mass on a resolved Gaussian
    let gauss = |x: f64, v: f64| (-(x * x + v * v) / (2.0 * 0.25)).exp();
    let grid = PhaseGrid::from_fn(192, (-6.0, 6.0), 192, (-6.0, 6.0), gauss).unwrap();
    let k1 = KernelSpec::new(1, 0.5, 1.0).unwrap();
    let (_, reports) = evolve_grid(grid, &k1, 0.02, 50, 50).unwrap();
    let mass = reports.iter().fold(0.0f64, |m, r| m.max(r.mass_drift));

    // free transport
    let free = KernelSpec::new(3, 0.5, 0.0).unwrap();
    let (samples, _) = simulate(init.clone(), &free, &SimOptions::new(0.01, 100, 100)).unwrap();
    let end: &ParticleState = samples.last().unwrap();
    let t = end.time;
    let exact = init
        .positions
        .iter()
        .zip(&init.velocities)
        .zip(&end.positions)
        .map(|((x, v), y)| (x + t * v - y).abs())
        .fold(0.0, f64::max)
        .max(euclid(&init.velocities, &end.velocities));

    let pass = momentum <= 1e-12 && energy <= 1e-6 && mass <= 1e-8 && exact <= 1e-12;
    outcome(
        pass && start.elapsed().as_secs_f64() < 60.0,
        format!(
            "momentum {momentum:.2e}/step, energy {energy:.2e}, grid mass {mass:.2e}/step, free transport {exact:.2e}, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn c10_support_bound() -> Outcome {
    let start = Instant::now();
    let bump = |x: f64, v: f64| {
        let r2 = x * x + v * v;
        if r2 < 1.0 {
            (-1.0 / (1.0 - r2)).exp()
        } else {
            0.0
        }
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for strength in [1.0, -1.0] {
        let grid = PhaseGrid::from_fn(512, (-4.0, 4.0), 512, (-4.0, 4.0), bump).unwrap();
        let kernel = KernelSpec::new(1, 0.5, strength).unwrap();
        let (history, _) = evolve_grid(grid, &kernel, 0.005, 200, 20).unwrap();
        let (_, check) = support_bounds_monitor(&history, &kernel).unwrap();
        pass &= check.pass;
        parts.push(format!(
            "c={strength:+}: worst K/bound {:.4}, C_hat {:.3}",
            check.worst_ratio, check.c_hat
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 60.0, format!("{}, {secs:.1}s", parts.join("; ")))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("c1", "transport oracle equivalence", c1_transport_oracle),
        ("c2", "blob W-infinity oracle", c2_blob_winf),
        ("c3", "initial-data W1 scaling", c3_initial_w1),
        ("c4", "sup-norm deviation bound", c4_linf_deviation),
        ("c5", "minimal-distance law", c5_dmin_law),
        ("c6", "convergence-rate study", c6_convergence),
        ("c7", "cut-off threshold study", c7_cutoff),
        ("c8", "deterministic monitors", c8_monitors),
        ("c9", "conservation suite", c9_conservation),
        ("c10", "support-bound monitor", c10_support_bound),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "{id:>3} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
