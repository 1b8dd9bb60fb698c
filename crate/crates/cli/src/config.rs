//! Flat key-value configs: TOML restricted to dotted keys (`kernel.alpha = 0.5`).

use std::fmt::Write as _;

use mfl_core::experiments::{check_gamma, InitKind, KernelConfig};
use mfl_core::sampling::{DensityKind, DensitySpec};
use mfl_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    toml::from_str(text).map_err(|e| e.message().to_string())
}

/// Serializes `value` as one `dotted.key = value` line per leaf, sorted by key.
pub fn to_flat<T: Serialize>(value: &T) -> Result<String, String> {
    let v = toml::Value::try_from(value).map_err(|e| e.to_string())?;
    let mut out = String::new();
    match v {
        toml::Value::Table(t) => flatten("", &t, &mut out),
        _ => return Err("config must serialize to a table".into()),
    }
    Ok(out)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                let _ = writeln!(out, "{key} = {other}");
            }
        }
    }
}

fn default_gamma() -> f64 {
    0.5
}
fn default_every() -> usize {
    1
}
fn default_guard() -> f64 {
    1.0
}
fn default_init() -> InitKind {
    InitKind::Iid
}

/// Phase-space grid for a `d = 1` grid run on `[-x_max, x_max] x [-v_max, v_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nv: usize,
    pub x_max: f64,
    pub v_max: f64,
}

/// One particle or grid run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dim: usize,
    pub density: DensityKind,
    pub kernel: KernelConfig,
    /// Sets `eps = N^(-gamma / 2d)` for the cut-off.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Particle count (particle runs only).
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: InitKind,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_every")]
    pub sample_every: usize,
    /// Abort once the relative energy drift exceeds this (0 disables).
    #[serde(default = "default_guard")]
    pub energy_guard: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |name: &'static str, reason: &str| Error::InvalidParameter {
            name,
            reason: reason.into(),
        };
        DensitySpec::new(2 * self.dim, self.density.clone())?;
        check_gamma(self.gamma, self.init)?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(bad("dt", "must be positive and finite"));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(bad("t_end", "must be finite and non-negative"));
        }
        if !(self.energy_guard >= 0.0) {
            return Err(bad("energy_guard", "must be non-negative"));
        }
        if self.sample_every == 0 {
            return Err(bad("sample_every", "must be at least 1"));
        }
        match &self.grid {
            Some(g) => {
                if self.dim != 1 {
                    return Err(bad("grid", "grid runs need dim = 1"));
                }
                if g.nx < 8 || g.nv < 8 {
                    return Err(bad("grid.nx", "grids need at least 8 cells per axis"));
                }
                if !(g.x_max > 0.0 && g.v_max > 0.0) {
                    return Err(bad("grid.x_max", "half-widths must be positive"));
                }
            }
            None => {
                if self.n < 1 {
                    return Err(bad("n", "particle runs need n >= 1"));
                }
            }
        }
        self.kernel.build(self.dim, self.n.max(1), self.gamma, None)?;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

/// The two keys the parameter-window table needs; other keys are ignored.
#[derive(Clone, Debug, Deserialize)]
pub struct ParamsConfig {
    pub dim: usize,
    pub kernel: ParamsKernel,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ParamsKernel {
    pub alpha: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfl_core::experiments::StudyConfig;

    const STUDY: &str = r#"
dim = 3
density.kind = "uniform_cube"
density.half_width = 1.0
kernel.alpha = 2.0
kernel.strength = -1.0
kernel.cutoff.m_bar = 0.5
gamma = 0.9
n_list = [250, 500, 1000]
reference.kind = "particle"
reference.n_ref = 4096
t_end = 0.5
dt = 0.01
"#;

    #[test]
    fn flat_roundtrip_is_identity() {
        let a: StudyConfig = parse(STUDY).unwrap();
        assert_eq!(a.kernel.m_bar(), Some(0.5));
        let text = to_flat(&a).unwrap();
        assert!(text.contains("kernel.cutoff.m_bar = 0.5"));
        assert!(text.lines().all(|l| !l.starts_with('[')));
        let b: StudyConfig = parse(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(to_flat(&b).unwrap(), text);
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        let e = parse::<StudyConfig>(&format!("{STUDY}\nkernel.beta = 1.0\n")).unwrap_err();
        assert!(e.contains("beta"), "{e}");
        let e = parse::<StudyConfig>("gamma = 0.5").unwrap_err();
        assert!(e.contains("dim"), "{e}");
    }

    #[test]
    fn simulate_validation() {
        let text = r#"
dim = 1
density.kind = "uniform_cube"
density.half_width = 1.0
kernel.alpha = 0.5
kernel.strength = 1.0
n = 10
dt = 0.01
t_end = 0.1
"#;
        let mut c: SimulateConfig = parse(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.steps(), 10);
        c.gamma = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("gamma"));
        let back: SimulateConfig = parse(&to_flat(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn shipped_presets_validate() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).unwrap();
        for name in ["simulate.toml", "grid.toml"] {
            let c: SimulateConfig = parse(&read(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        let p: ParamsConfig = parse(&read("params.toml")).unwrap();
        assert_eq!(p.dim, 3);
        for name in ["converge", "cutoff", "dev-linf", "dev-dmin", "dev-w1", "monitor"] {
            let c: StudyConfig = parse(&read(&format!("{name}.toml"))).unwrap_or_else(|e| panic!("{name}: {e}"));
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            c.schedule().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
