use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use mfl_core::snapshot::write_snapshot;
use mfl_core::ParticleState;
use serde_json::Value;

const SIMULATE: &str = r#"
dim = 1
density.kind = "uniform_cube"
density.half_width = 1.0
kernel.alpha = 0.5
kernel.strength = 1.0
n = 40
seed = 11
dt = 0.01
t_end = 0.1
sample_every = 5
"#;

fn mfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfl"))
        .args(args)
        .env_remove("MFL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_simulate(dir: &Path, config: &str, out: &str) -> Output {
    let cfg = write_config(dir, &format!("{out}.toml"), config);
    mfl(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join(out).to_str().unwrap(),
    ])
}

fn json_file(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn schema(name: &str) -> Value {
    json_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas").join(name))
}

/// Checks `required`, `const`, `enum` and basic types recursively; `oneOf`
/// passes when some branch does.
fn conforms(schema: &Value, v: &Value) -> Result<(), String> {
    if let Some(branches) = schema["oneOf"].as_array() {
        return if branches.iter().any(|b| conforms(b, v).is_ok()) {
            Ok(())
        } else {
            Err(format!("no oneOf branch matches {v}"))
        };
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            return Err(format!("{v} != {c}"));
        }
    }
    if let Some(e) = schema["enum"].as_array() {
        if !e.contains(v) {
            return Err(format!("{v} not in {e:?}"));
        }
    }
    let type_ok = |t: &str| match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        _ => true,
    };
    match &schema["type"] {
        Value::String(t) if !type_ok(t) => return Err(format!("{v} is not {t}")),
        Value::Array(ts) if !ts.iter().any(|t| type_ok(t.as_str().unwrap())) => return Err(format!("{v} is not any of {ts:?}")),
        _ => {}
    }
    for key in schema["required"].as_array().into_iter().flatten() {
        let key = key.as_str().unwrap();
        if v.get(key).is_none() {
            return Err(format!("missing `{key}`"));
        }
    }
    if let (Some(props), Some(obj)) = (schema["properties"].as_object(), v.as_object()) {
        for (k, sub) in props {
            if let Some(x) = obj.get(k) {
                conforms(sub, x).map_err(|e| format!("{k}: {e}"))?;
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for x in arr {
            conforms(items, x)?;
        }
    }
    Ok(())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_simulate_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_simulate(dir.path(), SIMULATE, "run");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = json_file(&dir.path().join("run/manifest.json"));
    for key in ["tool", "version", "command", "config", "seed", "threads", "stages", "files"] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
    let names: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["config.toml", "trajectory.mfl", "summary.json"]);
    for f in m["files"].as_array().unwrap() {
        let len = fs::metadata(dir.path().join("run").join(f["name"].as_str().unwrap())).unwrap().len();
        assert_eq!(f["bytes"].as_u64(), Some(len));
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
    conforms(&schema("manifest.schema.json"), &m).unwrap();
    let mut broken = m.clone();
    broken["files"][0]["sha256"] = Value::from(3);
    assert!(conforms(&schema("manifest.schema.json"), &broken).is_err());
    assert!(conforms(&schema("manifest.schema.json"), &serde_json::json!({})).is_err());
    let s = json_file(&dir.path().join("run/summary.json"));
    conforms(&schema("simulate-summary.schema.json"), &s).unwrap();
    assert_eq!(s["mode"], "particles");
    assert_eq!(s["frames"], 3);
    assert!(s["momentum_drift"].as_f64().unwrap() < 1e-12);
}

#[test]
fn out_of_range_gamma_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_simulate(dir.path(), &format!("{SIMULATE}gamma = 1.5\n"), "run");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
    assert!(!dir.path().join("run/manifest.json").exists());
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_simulate(dir.path(), &format!("{SIMULATE}kernel.beta = 2.0\n"), "run");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn huge_step_fails_at_run_time_with_step_index() {
    let dir = tempfile::tempdir().unwrap();
    let text = SIMULATE.replace("dt = 0.01", "dt = 10").replace("t_end = 0.1", "t_end = 100");
    let o = run_simulate(dir.path(), &text, "run");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
    assert!(!dir.path().join("run/manifest.json").exists());
}

#[test]
fn same_seed_gives_identical_digests() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |out: &str, threads: &str| {
        let cfg = write_config(dir.path(), "det.toml", SIMULATE);
        let o = mfl(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let m = json_file(&dir.path().join(out).join("manifest.json"));
        m["files"][1]["sha256"].as_str().unwrap().to_string()
    };
    let a = digest("a", "1");
    assert_eq!(a, digest("b", "1"));
    assert_eq!(a, digest("c", "2"));
    let o = mfl(&[
        "simulate",
        "--config",
        dir.path().join("det.toml").to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--seed",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let m = json_file(&dir.path().join("d/manifest.json"));
    assert_ne!(m["files"][1]["sha256"].as_str().unwrap(), a);
    assert_eq!(m["seed"], 12);
}

#[test]
fn grid_simulate_writes_grid_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = SIMULATE.replace("n = 40\n", "") + "grid.nx = 48\ngrid.nv = 48\ngrid.x_max = 6.0\ngrid.v_max = 6.0\n";
    let o = run_simulate(dir.path(), &text, "grid");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = fs::read(dir.path().join("grid/grid.mflg")).unwrap();
    let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header: Value = serde_json::from_slice(&bytes[..newline]).unwrap();
    assert_eq!(header["format"], "mfl-grid-1");
    conforms(&schema("simulate-summary.schema.json"), &json_file(&dir.path().join("grid/summary.json"))).unwrap();
    assert_eq!(bytes.len() - newline - 1, 3 * 48 * 48 * 8);
}

#[test]
fn params_prints_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.toml", "dim = 3\nkernel.alpha = 0.5\n");
    let o = mfl(&["study", "params", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("gamma* = 0.857143"), "{out}");
    assert!(out.contains("r*     = 1.333333"), "{out}");
    let s = json_file(&dir.path().join("p/summary.json"));
    conforms(&schema("study-summary.schema.json"), &s).unwrap();
    assert_eq!(s["study"], "params");
    assert_eq!(s["s_star_table"].as_array().unwrap().len(), 10);
}

#[test]
fn unknown_study_is_a_usage_error() {
    let o = mfl(&["study", "nonsense", "--config", "x.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn small_w1_deviation_study_finishes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "w1.toml",
        r#"
dim = 1
density.kind = "uniform_cube"
density.half_width = 1.0
kernel.alpha = 0.5
kernel.strength = 1.0
gamma = 0.5
n_list = [16, 64, 256]
replicas = 8
seed = 7
t_end = 0.0
dt = 0.01
n_times = 1
"#,
    );
    let start = Instant::now();
    let out = dir.path().join("w1");
    let o = mfl(&["study", "dev-w1", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.starts_with("study,N,replica,t,metric,value\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 6));
    let s = json_file(&out.join("summary.json"));
    conforms(&schema("study-summary.schema.json"), &s).unwrap();
    assert_eq!(s["study"], "dev-w1");
    assert!(s["pass"].is_boolean());
    assert!(s["report"]["fit"]["slope"].as_f64().unwrap() < 0.0);
    let m = json_file(&out.join("manifest.json"));
    assert_eq!(m["command"], "study dev-w1");
}

fn snapshot(dir: &Path, name: &str, points: &[[f64; 2]]) -> PathBuf {
    let pos: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let vel: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let state = ParticleState::new(1, pos, vel, 0.0).unwrap();
    let mut bytes = Vec::new();
    write_snapshot(&mut bytes, 0.1, &[state]).unwrap();
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn metric(a: &Path, b: &Path, kind: &str) -> (Option<i32>, Value) {
    let o = mfl(&["metrics", a.to_str().unwrap(), b.to_str().unwrap(), "--kind", kind]);
    let v = serde_json::from_slice(&o.stdout).unwrap_or(Value::Null);
    (o.status.code(), v)
}

#[test]
fn metrics_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = snapshot(d, "a.mfl", &[[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]]);
    let (code, v) = metric(&a, &a, "w1");
    assert_eq!(code, Some(0));
    conforms(&schema("metrics.schema.json"), &v).unwrap();
    assert_eq!(v["cost"], 0.0);

    let z = snapshot(d, "z.mfl", &[[0.0, 0.0]; 4]);
    let f = snapshot(d, "f.mfl", &[[3.0, 4.0]; 4]);
    for kind in ["w1", "winf"] {
        let (code, v) = metric(&z, &f, kind);
        assert_eq!(code, Some(0));
        conforms(&schema("metrics.schema.json"), &v).unwrap();
        assert!((v["cost"].as_f64().unwrap() - 5.0).abs() < 1e-12, "{kind}: {v}");
    }

    // brute force over all 3! matchings
    let pa = [[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]];
    let pb = [[0.3, -0.2], [2.0, 1.0], [-0.5, 1.5]];
    let b = snapshot(d, "b.mfl", &pb);
    let dist = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let best_sum = perms
        .iter()
        .map(|s| (0..3).map(|i| dist(pa[i], pb[s[i]])).sum::<f64>() / 3.0)
        .fold(f64::INFINITY, f64::min);
    let best_max = perms
        .iter()
        .map(|s| (0..3).map(|i| dist(pa[i], pb[s[i]])).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    let (_, v) = metric(&a, &b, "w1");
    assert!((v["cost"].as_f64().unwrap() - best_sum).abs() < 1e-12, "{v} vs {best_sum}");
    let (_, v) = metric(&a, &b, "winf");
    assert!((v["cost"].as_f64().unwrap() - best_max).abs() < 1e-12, "{v} vs {best_max}");
}

#[test]
fn metrics_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.mfl");
    fs::write(&junk, b"not a snapshot").unwrap();
    let a = snapshot(dir.path(), "a.mfl", &[[0.0, 0.0]]);
    assert_eq!(metric(&a, &junk, "w1").0, Some(2));
    assert_eq!(metric(&a, &dir.path().join("missing.mfl"), "w1").0, Some(2));
    let o = mfl(&["metrics", a.to_str().unwrap(), a.to_str().unwrap(), "--frame", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn study_rerun_gives_identical_results_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "w1.toml",
        r#"
dim = 1
density.kind = "uniform_cube"
density.half_width = 1.0
kernel.alpha = 0.5
kernel.strength = 1.0
gamma = 0.5
n_list = [16, 64, 256]
replicas = 4
seed = 5
"#,
    );
    let digest = |out: &str, threads: &str| {
        let o = mfl(&[
            "study",
            "dev-w1",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let m = json_file(&dir.path().join(out).join("manifest.json"));
        let f = m["files"].as_array().unwrap().iter().find(|f| f["name"] == "results.csv").unwrap().clone();
        f["sha256"].as_str().unwrap().to_string()
    };
    let a = digest("a", "1");
    assert_eq!(a, digest("b", "1"));
    assert_eq!(a, digest("c", "3"));
}
