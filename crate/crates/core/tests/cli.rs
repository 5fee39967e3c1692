use std::process::Command;

use epd_sim::sim::{StageDefaults, SystemConfig};

fn epd(args: &[&str], out: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_epd"))
        .args(args)
        .env("EPD_OUT_DIR", out)
        .output()
        .unwrap()
}

#[test]
fn simulate_preset_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = epd(&["simulate", "--preset", "fig5-minicpm-2img", "--system", "EPD"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.csv", "events.csv", "switches.csv", "trace.json", "simulate.meta.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("simulate.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["goodput_threshold"], 0.9);
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn single_rate_sweep_has_one_row_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = epd(&["sweep", "--preset", "encode-heavy", "--rate-grid", "1.5"], d.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read_to_string(d.path().join(f)).unwrap();
    let body = read(&a, "sweep_EPD.csv");
    assert_eq!(body.lines().count(), 2);
    for f in ["sweep_EPD.csv", "sweep_DistServe.csv", "sweep_vLLM.csv", "attainment.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn infeasible_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SystemConfig::from_preset("minicpm-v-2.6", "5E2P1D", &StageDefaults::default()).unwrap();
    cfg.instances.extend(cfg.instances.clone());
    let path = dir.path().join("big.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let o = epd(&["simulate", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "ConfigInfeasible");
}

#[test]
fn parse_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "instances = 3\n[[[").unwrap();
    let o = epd(&["simulate", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let o = epd(&["sweep", "--rate-grid", "1,x"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unknown_preset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = epd(&["sweep", "--preset", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn optimize_writes_a_loadable_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = epd(&["optimize", "--trials", "8", "--strategy", "random", "--rate-grid", "0.5,1,1.5"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let best = SystemConfig::load(dir.path().join("best_config.toml")).unwrap();
    assert_eq!(best.total_gpus(), 8);
    assert!(dir.path().join("search_log.csv").exists());
}
