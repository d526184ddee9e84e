use std::path::Path;
use std::process::Command;

use reflmap::envsim::EnvironmentSpec;
use reflmap_cli::commands::{self, MANIFEST_FILE};
use reflmap_cli::{CdfTable, ExperimentConfig, Manifest};

/// Small room and short experiments so the whole chain runs in seconds.
fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default(seed);
    cfg.environment = EnvironmentSpec::Rectangle { width: 20.0, height: 20.0, per_wall: 2, bs: None };
    cfg.online.positions = 6;
    cfg.cdf.trials = 20;
    cfg.cdf.noise_levels = vec![[0.69, 6.0], [0.345, 3.0]];
    cfg.cdf.n_r_values = vec![2, 4];
    cfg.cdf.two_path_rol_side = Some(6.0);
    cfg.bounds.ensemble_ratios = vec![8.0];
    cfg.bounds.monte_carlo.trials = 4;
    cfg
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn run_all(cfg: &ExperimentConfig, dir: &Path) -> Vec<Manifest> {
    let mut out = Vec::new();
    commands::cmd_simulate(cfg, dir).unwrap();
    out.push(manifest(dir));
    commands::cmd_build_map(cfg, dir).unwrap();
    out.push(manifest(dir));
    commands::cmd_localize(cfg, dir).unwrap();
    out.push(manifest(dir));
    let cdf = dir.join("cdf");
    commands::cmd_experiment_cdf(cfg, &cdf).unwrap();
    out.push(manifest(&cdf));
    let bounds = dir.join("bounds");
    commands::cmd_bounds(cfg, &bounds).unwrap();
    out.push(manifest(&bounds));
    out
}

#[test]
fn same_seed_same_bytes() {
    let cfg = small_config(42);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_all(&cfg, a.path());
    let mb = run_all(&cfg, b.path());
    assert_eq!(ma, mb);
    assert!(ma.iter().all(|m| !m.files.is_empty() && m.seed == 42));

    let c = tempfile::tempdir().unwrap();
    commands::cmd_simulate(&small_config(43), c.path()).unwrap();
    assert_ne!(manifest(c.path()).files, ma[0].files);
}

#[test]
fn pipeline_outputs_are_consistent() {
    let cfg = small_config(7);
    let dir = tempfile::tempdir().unwrap();
    let sim = commands::cmd_simulate(&cfg, dir.path()).unwrap();
    assert_eq!(sim.reflectors, 8);
    let map = commands::cmd_build_map(&cfg, dir.path()).unwrap();
    assert!(map.samples > 0);
    assert!(map.reflector_coverage >= 0.95, "{}", map.reflector_coverage);
    let (summary, rows) = commands::cmd_localize(&cfg, dir.path()).unwrap();
    assert_eq!(summary.epochs, 6);
    assert_eq!(rows.len(), 6);
}

#[test]
fn cdf_tables_are_distributions() {
    let cfg = small_config(3);
    let dir = tempfile::tempdir().unwrap();
    let results = commands::cmd_experiment_cdf(&cfg, dir.path()).unwrap();
    // two noise levels at n_r = 4 and n_r = 2 at base noise; (0.345, 3, 4) is shared
    assert_eq!(results.len(), 3);
    for (t, s) in &results {
        assert!(t.is_valid());
        assert_eq!(t.cdf(f64::INFINITY), 1.0);
        assert_eq!(t.cdf(-1.0), 0.0);
        assert_eq!(s.trials + s.blind, 20);
        assert!(s.p25_m <= s.median_m && s.median_m <= s.p75_m);
        assert!(dir.path().join(format!("cdf_{}.csv", s.cell().label())).exists());
    }
    let t = CdfTable::from_errors(vec![3.0, 1.0, 2.0]).unwrap();
    assert_eq!(t.median(), 2.0);
    assert!(CdfTable::from_errors(vec![1.0, -0.5]).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_config(11);
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    assert_ne!(small_config(12).hash().unwrap(), cfg.hash().unwrap());
}

fn reflmap(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_reflmap"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove(reflmap_cli::OUT_ENV)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--override",
        "environment.width=20.0",
        "--override",
        "environment.height=20.0",
        "--override",
        "environment.per_wall=1",
        "--override",
        "online.positions=3",
    ];

    // missing offline log
    let out = reflmap(&[&["build-map"][..], &small].concat(), dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = reflmap(&[&["simulate"][..], &small].concat(), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = reflmap(&[&["build-map"][..], &small].concat(), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = reflmap(&[&["localize"][..], &small].concat(), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // an offline log with a header and no rows
    std::fs::write(
        dir.path().join(commands::OFFLINE_LOG_FILE),
        "epoch,path_index,theta_rad,tau_s,var_theta,var_tau,truth_index\n",
    )
    .unwrap();
    let out = reflmap(&[&["build-map"][..], &small].concat(), dir.path());
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nno_such_key = 3\n").unwrap();
    let out = reflmap(&["simulate", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = reflmap(&["simulate", "--override", "offline.pitch=-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
