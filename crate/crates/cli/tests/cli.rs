use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fwq::convergence::FitTrace;
use fwq::harness::toy_scenario;
use fwq::models::watts_to_dbm;
use serde_json::Value;
use sha2::{Digest, Sha256};

const DEFAULT: &str = include_str!("../configs/default.toml");

fn fwq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwq"))
        .args(args)
        .env_remove("FWQ_THREADS")
        .output()
        .expect("spawn fwq")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn default_config() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.toml")
}

#[test]
fn solve_default_config_is_feasible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("solve.json");
    let o = fwq(&["solve", "--config", default_config(), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec = json(&out);
    assert_eq!(rec["feasible"], true);
    assert_eq!(rec["strategy"], "fwq");
    let alloc = &rec["allocation"];
    assert_eq!(alloc["q"].as_array().unwrap().len(), 10);
    assert_eq!(alloc["feasibility"]["feasible"], true);
    assert!(alloc["relaxed"]["kkt"]["q_stationarity"].is_array());
    assert!(alloc["relaxed"]["multipliers"]["mu1"].is_number());

    let m = json(&dir.path().join("solve.json.manifest.json"));
    let digest = hex::encode(Sha256::digest(std::fs::read(default_config()).unwrap()));
    assert_eq!(m["config_sha256"], digest);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["outputs"][0], s(&out));
}

#[test]
fn zero_deadline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &DEFAULT.replace("t_max_s = 3600.0", "t_max_s = 0.0"));
    let out = dir.path().join("solve.json");
    let o = fwq(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let rec = json(&out);
    assert_eq!(rec["feasible"], false);
    assert!(rec["error"].as_str().unwrap().contains("deadline"), "{rec}");
    for k in ["unified_q", "rand_q"] {
        let o = fwq(&["solve", "--config", s(&cfg), "--out", s(&out), "--strategy", k]);
        assert_eq!(code(&o), 2, "{k}");
    }
}

#[test]
fn missing_field_exits_1_with_field_name_and_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &DEFAULT.replace("payload_bits = 187200000.0\n", ""));
    let out = dir.path().join("solve.json");
    let o = fwq(&["solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("payload_bits") && err.contains("scenario.network"), "{err}");
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn usage_and_environment_errors_exit_1() {
    assert_eq!(code(&fwq(&["solve"])), 1);
    assert_eq!(code(&fwq(&["solve", "--config", default_config(), "--out", "x.json", "--strategy", "best"])), 1);
    assert_eq!(code(&fwq(&["--help"])), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_fwq"))
        .args(["solve", "--config", default_config(), "--out", "never.json"])
        .env("FWQ_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("FWQ_THREADS"));
    assert!(!Path::new("never.json").exists());
}

#[test]
fn simulate_with_zero_rounds_writes_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &DEFAULT.replace("rounds = 50", "rounds = 0"));
    let out = dir.path().join("trace.csv");
    let o = fwq(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "round,loss,grad_norm_sq,accuracy,energy_j\n");
    let ft = json(&dir.path().join("trace.fit.json"));
    assert_eq!(ft["grad_norm_sq"].as_array().unwrap().len(), 0);
    assert_eq!(ft["bits"], serde_json::json!([8, 8, 16, null]));
}

#[test]
fn outputs_are_byte_identical_for_same_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &DEFAULT.replace("rounds = 50", "rounds = 8"));
    let run = |cmd: &str, name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = fwq(&["--seed", seed, cmd, "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("solve", "a.json", "4"), run("solve", "b.json", "4"));
    assert_ne!(run("solve", "a.json", "4"), run("solve", "b.json", "5"));
    assert_eq!(run("simulate", "a.csv", "4"), run("simulate", "b.csv", "4"));
    assert_ne!(run("simulate", "a.csv", "4"), run("simulate", "b.csv", "5"));
}

#[test]
fn single_point_sweep_matches_solve() {
    let dir = tempfile::tempdir().unwrap();
    let text = DEFAULT
        .replace("kind = \"bandwidth\"", "kind = \"heterogeneity\"")
        .replace("values = [80.0, 90.0, 98.0]", "values = [0.0]")
        .replace("repeats = 10", "repeats = 1");
    let cfg = write(dir.path(), "c.toml", &text);
    let sw = dir.path().join("sweep");
    let o = fwq(&["--seed", "6", "sweep", "--config", s(&cfg), "--out-dir", s(&sw), "--strategy", "fwq,full_precision"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(sw.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let fwq_row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fwq_row[col("strategy")], "fwq");
    // 32 bits does not fit the 1800 MB devices
    let fp_row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fp_row[col("feasible")], "false");

    let out = dir.path().join("solve.json");
    let o = fwq(&["--seed", "6", "solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let rec = json(&out);
    let want = rec["objective_j"].as_f64().unwrap();
    assert_eq!(fwq_row[col("objective_j")].parse::<f64>().unwrap(), want);
    assert_eq!(fwq_row[col("h")], rec["allocation"]["h"].to_string());

    let summary = std::fs::read_to_string(sw.join("summary.csv")).unwrap();
    assert!(summary.starts_with("sweep_value,strategy,feasible,total,mean_objective_j,std_objective_j\n"));
    let m = json(&sw.join("manifest.json"));
    assert_eq!(m["resolved"]["kind"], "heterogeneity");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

/// Writes a toy scenario as an explicit-device config in user units.
fn toy_config(n: usize, seed: u64) -> String {
    let sc = toy_scenario::<f64>(n, seed).unwrap();
    let c = &sc.coeffs;
    let mut t = format!(
        "[scenario]\nt_max_s = {}\nq_set = {:?}\n\n[scenario.network]\nb_max_mhz = {}\nnoise_dbm_per_hz = {}\npayload_bits = {}\n\n\
         [scenario.coeffs]\na1 = {}\na2 = {}\na3 = {}\neps = {}\nm_batch = {}\ns_scale = {}\n",
        sc.t_max,
        sc.q_set,
        sc.net.b_max / 1e6,
        watts_to_dbm(sc.net.n0),
        sc.net.d_g,
        c.a1,
        c.a2,
        c.a3,
        c.eps,
        c.m_batch,
        c.s_scale
    );
    for d in &sc.devices {
        let g = &d.gpu;
        t += &format!(
            "\n[[scenario.devices]]\nid = \"{}\"\npi_weight = {}\ntx_power_dbm = {}\nchannel_gain = {}\nf_core_mhz = {}\nf_mem_mhz = {}\n\
             mem_capacity_mb = {}\nmodel_size_mb = {}\n[scenario.devices.gpu]\np_g0_w = {}\nzeta_mem = {}\nzeta_core = {}\nv_core = {}\n\
             t0_s = {}\ntheta_mem = {}\ntheta_core = {}\nc1_slope = {}\nc1_intercept = {}\nc2_slope = {}\nc2_intercept = {}\n",
            d.id,
            d.pi_weight,
            watts_to_dbm(d.radio.p_cm),
            d.radio.h,
            g.f_core / 1e6,
            g.f_mem / 1e6,
            d.mem_capacity,
            d.model_size,
            g.p_g0,
            g.zeta_mem,
            g.zeta_core,
            g.v_core,
            g.t0,
            g.theta_mem,
            g.theta_core,
            g.c1_slope,
            g.c1_intercept,
            g.c2_slope,
            g.c2_intercept
        );
    }
    t
}

#[test]
fn verify_on_two_device_toy_reports_small_gap() {
    let dir = tempfile::tempdir().unwrap();
    for seed in [1u64, 2, 3] {
        let cfg = write(dir.path(), &format!("toy{seed}.toml"), &toy_config(2, seed));
        let out = dir.path().join(format!("verify{seed}.json"));
        let o = fwq(&["verify", "--config", s(&cfg), "--grid-h", "32", "--grid-b", "40", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("gap:"));
        let rec = json(&out);
        let gap = rec["gap"].as_f64().unwrap();
        assert!(gap <= 0.05, "seed {seed}: gap {gap}");
        assert_eq!(rec["grid"]["h_max"], 32);
    }
}

#[test]
fn fit_recovers_coefficients_of_synthetic_traces() {
    let (a1, a2, a3, m) = (13.765, 1.023, 0.0435, 32u32);
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    std::fs::create_dir(&traces).unwrap();
    let pis = vec![0.25; 4];
    for h in [1u32, 4, 16] {
        for q in [4u32, 6, 8] {
            let floor: f64 = pis.iter().map(|p: &f64| a3 * p * p / (2f64.powi(q as i32) - 1.0)).sum();
            let g = (1..=20_000)
                .map(|k| {
                    let (k, h, m) = (k as f64, h as f64, m as f64);
                    a1 * (h / (m * k)).sqrt() + a2 / (m * h * k).sqrt() + floor
                })
                .collect();
            let t = FitTrace {
                h,
                m_batch: m,
                pis: pis.clone(),
                bits: vec![Some(q); 4],
                grad_norm_sq: g,
            };
            std::fs::write(traces.join(format!("h{h}_q{q}.fit.json")), serde_json::to_vec(&t).unwrap()).unwrap();
        }
    }
    std::fs::write(traces.join("notes.json"), "{}").unwrap();
    let out = dir.path().join("fit.json");
    let targets: Vec<String> = (0..12).map(|i| (0.03 * 1.25f64.powi(i)).to_string()).collect();
    let o = fwq(&["fit", s(&traces), "--out", s(&out), "--s-scale", "1", "--targets", &targets.join(",")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec = json(&out);
    let c = &rec["fit"]["coeffs"];
    for (name, want) in [("a1", a1), ("a2", a2), ("a3", a3)] {
        let got = c[name].as_f64().unwrap();
        assert!((got - want).abs() <= 0.01 * want, "{name}: {got} vs {want}");
    }
    assert_eq!(rec["traces"].as_array().unwrap().len(), 9);

    // automatic levels
    let o = fwq(&["fit", s(&traces), "--out", s(&out), "--s-scale", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&out)["targets"].as_array().unwrap().len(), 10);
}

#[test]
fn simulate_then_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    for (h, q) in [(1, 4), (2, 8), (5, 16)] {
        let text = DEFAULT
            .replace("rounds = 50", "rounds = 30")
            .replace("h_steps = 5", &format!("h_steps = {h}"))
            .replace("q_per_device = [8, 8, 16, \"full\"]", &format!("q_per_device = [{q}, {q}, {q}, {q}]"));
        let cfg = write(dir.path(), &format!("h{h}.toml"), &text);
        let out = traces.join(format!("h{h}.csv"));
        let o = fwq(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let out = dir.path().join("fit.json");
    let o = fwq(&["fit", s(&traces), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = &json(&out)["fit"]["coeffs"];
    for k in ["a1", "a2", "a3"] {
        assert!(c[k].as_f64().unwrap() >= 0.0);
    }
}
