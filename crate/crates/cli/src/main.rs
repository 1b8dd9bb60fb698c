//! `mfl`: runs simulations and Monte Carlo studies, and compares snapshots.

mod artifacts;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfl_core::experiments::{
    admissible_params, convergence_study, cutoff_study, deterministic_monitor, deviation_study_dmin,
    deviation_study_linf, deviation_study_w1, InitKind, ResultRow, StudyConfig,
};
use mfl_core::particles::{energy_parts, simulate, SimOptions};
use mfl_core::sampling::{mesh_init, sample_iid, DensitySpec};
use mfl_core::snapshot::{read_snapshot, write_snapshot};
use mfl_core::transport::{w1, winf, WeightedCloud};
use mfl_core::vlasov::{evolve_grid, support_bounds, write_grid_snapshot, PhaseGrid};
use mfl_core::Error;
use serde_json::json;

use crate::artifacts::Run;
use crate::config::{GridConfig, ParamsConfig, SimulateConfig};

const DEFAULT_OUT: &str = "mfl-out";

#[derive(Parser)]
#[command(name = "mfl", version, about = "Mean-field particle laboratory")]
struct Cli {
    /// Flat key-value config file (`kernel.alpha = 0.5`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "MFL_OUT_DIR")]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One particle run (or a d = 1 grid run when `grid.*` keys are present).
    Simulate,
    /// A Monte Carlo study from the experiments module.
    Study { name: StudyName },
    /// Distance between the frames of two trajectory snapshots.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::W1)]
        kind: Kind,
        /// Frame index in both files (default: last frame).
        #[arg(long)]
        frame: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyName {
    Converge,
    Cutoff,
    DevLinf,
    DevDmin,
    DevW1,
    Monitor,
    Params,
}

impl StudyName {
    fn label(self) -> &'static str {
        match self {
            StudyName::Converge => "converge",
            StudyName::Cutoff => "cutoff",
            StudyName::DevLinf => "dev-linf",
            StudyName::DevDmin => "dev-dmin",
            StudyName::DevW1 => "dev-w1",
            StudyName::Monitor => "monitor",
            StudyName::Params => "params",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    W1,
    Winf,
}

/// Exit 2 for usage and configuration problems, 3 for failures during a run.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn from_core(e: Error) -> Self {
        match e {
            Error::InvalidParameter { .. } | Error::DimensionMismatch { .. } | Error::Format(_) | Error::MassMismatch(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from_core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

fn read_config(path: Option<&Path>) -> Result<(PathBuf, String), Failure> {
    let path = path.ok_or_else(|| Failure::Usage("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok((path.to_path_buf(), text))
}

fn parse_as<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, Failure> {
    config::parse(text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn cmd_simulate(cli: &Cli) -> Outcome {
    let (path, text) = read_config(cli.config.as_deref())?;
    let mut cfg: SimulateConfig = parse_as(&path, &text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let flat = config::to_flat(&cfg).map_err(Failure::Usage)?;
    let mut run = Run::start(&out_dir(cli), "simulate".into(), to_json(&cfg), cfg.seed)?;
    run.write("config.toml", flat.as_bytes())?;
    let density = DensitySpec::new(2 * cfg.dim, cfg.density.clone())?;
    let steps = cfg.steps();
    let summary = match &cfg.grid {
        Some(g) => simulate_grid(&cfg, g, &density, steps, &mut run)?,
        None => simulate_particles(&cfg, &density, steps, &mut run)?,
    };
    run.write_json("summary.json", &summary)?;
    run.finish()?;
    Ok(())
}

fn simulate_particles(cfg: &SimulateConfig, density: &DensitySpec, steps: usize, run: &mut Run) -> Result<serde_json::Value, Failure> {
    let kernel = cfg.kernel.build(cfg.dim, cfg.n, cfg.gamma, None)?;
    let init = match cfg.init {
        InitKind::Iid => sample_iid(density, cfg.n, cfg.seed)?,
        InitKind::Mesh => {
            let k = (cfg.n as f64).powf(1.0 / (2 * cfg.dim) as f64).round() as usize;
            if k.pow(2 * cfg.dim as u32) != cfg.n {
                return Err(Failure::Usage(format!("n = {} is not a perfect {}-th power", cfg.n, 2 * cfg.dim)));
            }
            let h = density.support_half_width();
            mesh_init(k, &vec![(-h, h); 2 * cfg.dim])?
        }
    };
    run.stage("initialize");
    let mut opts = SimOptions::new(cfg.dt, steps, cfg.sample_every);
    opts.collision_check_every = cfg.sample_every;
    // abort on energy blow-up when the kernel has a potential
    if cfg.energy_guard > 0.0 && energy_parts(&init, &kernel).is_ok() {
        opts.energy_guard = Some(cfg.energy_guard);
    }
    let momentum0 = init.total_momentum();
    let (samples, diag) = simulate(init, &kernel, &opts)?;
    run.stage("integrate");
    let mut bytes = Vec::new();
    write_snapshot(&mut bytes, cfg.dt * cfg.sample_every as f64, &samples)?;
    run.write("trajectory.mfl", &bytes)?;
    let last = samples.last().expect("initial state is always sampled");
    let drift: f64 = momentum0
        .iter()
        .zip(last.total_momentum())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(json!({
        "mode": "particles",
        "n": cfg.n,
        "steps": steps,
        "frames": samples.len(),
        "final_time": last.time,
        "eta": kernel.eta(),
        "momentum_drift": drift,
        "diagnostics": diag,
    }))
}

fn simulate_grid(cfg: &SimulateConfig, g: &GridConfig, density: &DensitySpec, steps: usize, run: &mut Run) -> Result<serde_json::Value, Failure> {
    let kernel = cfg.kernel.build(1, g.nx * g.nv, cfg.gamma, None)?;
    let grid = PhaseGrid::from_density(density, g.nx, (-g.x_max, g.x_max), g.nv, (-g.v_max, g.v_max))?;
    run.stage("initialize");
    let (history, reports) = evolve_grid(grid, &kernel, cfg.dt, steps, cfg.sample_every)?;
    run.stage("integrate");
    let mut bytes = Vec::new();
    write_grid_snapshot(&mut bytes, &history)?;
    run.write("grid.mflg", &bytes)?;
    let max_drift = reports.iter().fold(0.0f64, |m, r| m.max(r.mass_drift));
    let clipped: f64 = reports.iter().map(|r| r.clipped).sum();
    Ok(json!({
        "mode": "grid",
        "nx": g.nx,
        "nv": g.nv,
        "steps": steps,
        "frames": history.len(),
        "max_mass_drift_per_step": max_drift,
        "total_clipped_mass": clipped,
        "support": support_bounds(&history),
    }))
}

fn study_summary(name: StudyName, cfg: &StudyConfig) -> Result<(serde_json::Value, bool, Vec<ResultRow>), Failure> {
    Ok(match name {
        StudyName::Converge => {
            let (r, rows) = convergence_study(cfg)?;
            // the near-collision flag is advisory and does not gate the verdict
            (to_json(&r), (-0.5..=-0.05).contains(&r.fit.slope), rows)
        }
        StudyName::Cutoff => {
            let (r, rows) = cutoff_study(cfg)?;
            let pass = r
                .entries
                .iter()
                .all(|e| e.convergence.fit.slope < 0.0 && e.l1.iter().filter(|l| l.checked).all(|l| l.holds));
            (to_json(&r), pass, rows)
        }
        StudyName::DevLinf => {
            let (r, rows) = deviation_study_linf(cfg)?;
            (to_json(&r), r.rows.iter().all(|x| x.pass), rows)
        }
        StudyName::DevDmin => {
            let (r, rows) = deviation_study_dmin(cfg)?;
            let pass = r
                .iter()
                .all(|x| (x.exponent - x.target_exponent).abs() <= 0.15 * x.target_exponent);
            (to_json(&r), pass, rows)
        }
        StudyName::DevW1 => {
            let (r, rows) = deviation_study_w1(cfg)?;
            (to_json(&r), (r.fit.slope - r.target_slope).abs() <= 0.05, rows)
        }
        StudyName::Monitor => {
            let (r, rows) = deterministic_monitor(cfg)?;
            (to_json(&r), r.envelope_r_squared >= 0.9 && r.d_min_pass, rows)
        }
        StudyName::Params => unreachable!("handled without a study config"),
    })
}

fn cmd_params(cli: &Cli, path: &Path, text: &str) -> Outcome {
    let cfg: ParamsConfig = parse_as(path, text)?;
    let p = admissible_params(cfg.dim, cfg.kernel.alpha)?;
    println!("d = {}, alpha = {}", p.dim, p.alpha);
    println!("gamma* = {:.6}", p.gamma_star);
    println!("r*     = {:.6}", p.r_star);
    match p.m_bar_star {
        Some(m) => println!("m_bar* = {m:.6}"),
        None => println!("m_bar* = (cut-off window empty)"),
    }
    println!("probabilistic window empty: {}", p.prob_window_empty);
    let gammas: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    println!("{:>8} {:>12} {:>14}", "gamma", "s*_gamma", "above gamma*");
    let mut rows = Vec::new();
    for &g in &gammas {
        println!("{g:>8.2} {:>12.6} {:>14}", p.s_star(g), g > p.gamma_star);
        rows.push(ResultRow::new("params", 0, None, None, &format!("s_star_gamma{g:.2}"), p.s_star(g)));
    }
    let mut run = Run::start(&out_dir(cli), "study params".into(), json!({"dim": cfg.dim, "kernel": {"alpha": cfg.kernel.alpha}}), 0)?;
    run.write_results(&rows)?;
    run.write_json(
        "summary.json",
        &json!({"study": "params", "pass": true, "report": p, "s_star_table": gammas.iter().map(|&g| json!({"gamma": g, "s_star": p.s_star(g)})).collect::<Vec<_>>()}),
    )?;
    run.finish()?;
    Ok(())
}

fn cmd_study(cli: &Cli, name: StudyName) -> Outcome {
    let (path, text) = read_config(cli.config.as_deref())?;
    if let StudyName::Params = name {
        return cmd_params(cli, &path, &text);
    }
    let mut cfg: StudyConfig = parse_as(&path, &text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let flat = config::to_flat(&cfg).map_err(Failure::Usage)?;
    let mut run = Run::start(&out_dir(cli), format!("study {}", name.label()), to_json(&cfg), cfg.seed)?;
    run.write("config.toml", flat.as_bytes())?;
    let (report, pass, rows) = study_summary(name, &cfg)?;
    run.stage(name.label());
    run.write_results(&rows)?;
    run.write_json("summary.json", &json!({"study": name.label(), "pass": pass, "report": report}))?;
    run.finish()?;
    println!("{}: {}", name.label(), if pass { "pass" } else { "fail" });
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path, kind: Kind, frame: Option<usize>) -> Outcome {
    let load = |p: &Path| -> Result<WeightedCloud, Failure> {
        let bytes = fs::read(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
        let (_, states) = read_snapshot(&bytes[..]).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        let k = frame.unwrap_or(states.len() - 1);
        let s = states
            .get(k)
            .ok_or_else(|| Failure::Usage(format!("{} has {} frames, asked for frame {k}", p.display(), states.len())))?;
        Ok(WeightedCloud::uniform(2 * s.dim, s.phase_points()))
    };
    let (ca, cb) = (load(a)?, load(b)?);
    if ca.dim != cb.dim {
        return Err(Failure::Usage(format!("phase dimensions differ: {} vs {}", ca.dim, cb.dim)));
    }
    let result = match kind {
        Kind::W1 => w1(&ca, &cb)?,
        Kind::Winf => winf(&ca, &cb)?,
    };
    println!("{}", result.report(None));
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Study { name } => cmd_study(cli, *name),
        Command::Metrics { a, b, kind, frame } => cmd_metrics(a, b, *kind, *frame),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
