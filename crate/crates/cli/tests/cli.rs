use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_assocmem"));
    cmd.current_dir(dir).env("RUST_LOG", "warn");
    if let Some(text) = config {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(&path);
    }
    cmd.args(args).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const ONE_CELL: &str = "[sweep]\nalphas = [0.2]\ndims = [20]\nseeds = [0]\n";

#[test]
fn sweep_one_cell_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sweep", "--out", "a"], Some(ONE_CELL));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = dir.path().join("a");
    let csv = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("mode,method,d,m,kappa,alpha,p,seed,accuracy,final_loss,steps_used,stop_reason\n"));
    assert!(a.join("manifest.json").exists());

    let out = run(dir.path(), &["sweep", "--out", "b"], Some(ONE_CELL));
    assert!(out.status.success());
    let manifest = a.join("manifest.json");
    let out = run(dir.path(), &["sweep", "--out", "c", "--manifest", manifest.to_str().unwrap()], None);
    assert!(out.status.success());
    let bytes = |d: &str| std::fs::read(dir.path().join(d).join("sweep.csv")).unwrap();
    assert_eq!(bytes("a"), bytes("b"));
    assert_eq!(bytes("a"), bytes("c"));
    // The written config reproduces the run too.
    let cfg = a.join("config.toml");
    let out = run(dir.path(), &["sweep", "--out", "d", "--config", cfg.to_str().unwrap()], None);
    assert!(out.status.success());
    assert_eq!(bytes("a"), bytes("d"));
}

#[test]
fn malformed_config_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sweep", "--out", "x"], Some("[sweep]\nalpha_grid = [0.5]\n"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha_grid"));
    let out = run(dir.path(), &["sweep", "--out", "x"], Some("[sweep]\nseeds = []\n"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), "").unwrap();
    let out = run(dir.path(), &["theory", "--out", "blocker/sub"], Some("[theory]\nalphas = []\nextrapolation = false\n"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn numeric_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[spectrum]\nd = 8\nalphas = [3.0]\n[spectrum.train]\nmax_steps = 5\n";
    let out = run(dir.path(), &["spectrum", "--out", "s"], Some(cfg));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn theory_capacity_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[theory]\nalphas = []\nextrapolation = false\n";
    let out = run(dir.path(), &["theory", "--out", "t"], Some(cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("t/theory.csv"));
    let two_dp: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2}", r[0].parse::<f64>().unwrap()))
        .collect();
    // Exact values 0.311456, 0.446865, 0.5 of the capacity integral.
    assert_eq!(two_dp, ["0.31", "0.45", "0.50"]);
    assert!(rows.iter().all(|r| r[6] == "alpha_c"));
    assert!(dir.path().join("t/g_bounds.csv").exists());
}

#[test]
fn theory_q_star_at_zero_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[theory]\nkappas = []\nalphas = [0.0]\np = 100\nn_mc = 2\nextrapolation = false\n";
    let out = run(dir.path(), &["theory", "--out", "t"], Some(cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("t/theory.csv"));
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn spectrum_of_identity_is_all_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[spectrum]\nsource = \"identity\"\nd = 12\ncurve_points = 64\n";
    let out = run(dir.path(), &["spectrum", "--out", "s"], Some(cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("s/spectrum.csv"));
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() == 2.0));
    assert!(dir.path().join("s/rho_c.json").exists());
}

#[test]
fn hebbian_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[hebbian]\nalphas = [0.05]\nn_mc = 256\n";
    let out = run(dir.path(), &["hebbian", "--out", "h"], Some(cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let row = &csv_rows(&dir.path().join("h/hebbian_stats.csv"))[0];
    let var: f64 = row[5].parse().unwrap();
    // Exact variance (p - 2)/d^2 + 2/d + 4/d^2 for normalized Hebbian scores.
    let exact = 1998.0 / 40000.0 + 2.0 / 200.0 + 4.0 / 40000.0;
    assert!((var / exact - 1.0).abs() < 0.03, "{var}");
    assert_eq!(row[6].parse::<f64>().unwrap(), 0.05);
}

#[test]
fn fss_on_synthetic_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::from("d,p,alpha_c_hat\n");
    for (d, p) in [(50usize, 400usize), (100, 1500), (150, 3000), (200, 5000)] {
        table += &format!("{d},{p},{:.17e}\n", 0.5 + 0.8 / (p as f64).ln());
    }
    std::fs::write(dir.path().join("th.csv"), table).unwrap();
    let cfg = format!("[fss]\nthresholds_csv = \"{}\"\n", dir.path().join("th.csv").display());
    let out = run(dir.path(), &["fss", "--out", "f"], Some(&cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("f/fss.json")).unwrap()).unwrap();
    assert!((fit["slope"].as_f64().unwrap() + 1.0).abs() < 1e-6);
}

#[test]
fn train_writes_model_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[train]\nd = 20\nalpha = 0.2\n";
    let out = run(dir.path(), &["train", "--out", "r", "--seed", "3", "--threads", "1"], Some(cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = dir.path().join("r");
    assert!(r.join("model.bin").exists() && r.join("report.json").exists());
    let traj = csv_rows(&r.join("trajectory.csv"));
    assert_eq!(traj.last().unwrap()[2].parse::<f64>().unwrap(), 1.0);
    let cfg = format!("[spectrum]\nsource = \"model_file\"\nmodel_path = \"{}\"\ncurve_points = 64\n", r.join("model.bin").display());
    let out = run(dir.path(), &["spectrum", "--out", "s"], Some(&cfg));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&dir.path().join("s/spectrum.csv")).len(), 20);
}

#[test]
fn help_lists_config_keys() {
    let out = Command::new(env!("CARGO_BIN_EXE_assocmem")).args(["sweep", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["alphas", "dims", "kappas", "modes", "methods", "seeds", "dp_max_d", "max_steps"] {
        assert!(text.contains(key), "missing {key}");
    }
}
