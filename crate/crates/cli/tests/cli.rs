use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbafl_cli::output::TRACE_HEADER;
use nbafl_cli::RunConfig;

const SYNTH: &str = "\
n_clients = 4
rounds = 5
epsilon = 30
delta = 0.01
clip_c = 4
mu = 1
shard_size = 25
dataset = synthetic
synth_n = 100
synth_d = 6
synth_classes = 3
synth_margin = 2
model = logistic
l2_reg = 0.01
learning_rate = 0.1
inner_steps = 10
seed = 3
";

fn nbafl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbafl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_trace_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SYNTH);
    let o = nbafl(dir.path(), &["--config", "run.cfg", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run_3.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), TRACE_HEADER.split(',').count());
        assert_eq!(fields[0], (i + 1).to_string());
        assert_eq!(fields[7], "4");
        assert_eq!(fields[8], "3");
        let acc: f64 = fields[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SYNTH);
    let a = nbafl(dir.path(), &["--config", "run.cfg", "--seed", "9", "--out", "a", "run"]);
    let b = nbafl(dir.path(), &["--config", "run.cfg", "--seed", "10", "--out", "b", "run"]);
    assert!(a.status.success() && b.status.success());
    let a = std::fs::read(dir.path().join("a/run_9.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/run_10.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn calibrate_prints_noise_scales() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SYNTH);
    let o = nbafl(dir.path(), &["--config", "run.cfg", "calibrate"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let value = |key: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap()
            .parse()
            .unwrap()
    };
    // T = 5 > sqrt(4): the aggregate equals c T ds_D / eps.
    let expected = value("c ") * 5.0 * value("ds_D") / 30.0;
    assert!((value("sigma_A") - expected).abs() <= 1e-12 * expected);
}

#[test]
fn calibrate_reports_undefined_b() {
    let dir = tempfile::tempdir().unwrap();
    let body = SYNTH
        .replace("n_clients = 4", "n_clients = 50")
        .replace("synth_n = 100", "synth_n = 1250")
        .replace("epsilon = 30", "epsilon = 60")
        + "schedule = krandom\nk_clients = 20\n";
    write_config(dir.path(), &body);
    let o = nbafl(dir.path(), &["--config", "run.cfg", "calibrate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("b        undefined"), "{text}");
    assert!(text.contains("sigma_D  0"), "{text}");
}

#[test]
fn bound_with_given_constants_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &SYNTH.replace("mu = 1", "mu = 4"));
    let o = nbafl(
        dir.path(),
        &[
            "--config", "run.cfg", "bound", "--grid-max", "40", "--rho", "1", "--beta", "1", "--pl", "0.5",
            "--dissimilarity", "1", "--theta", "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("T* = "));
    let csv = std::fs::read_to_string(dir.path().join("bound_T.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("T,bound_value,regime_flags"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 40);
    // T <= sqrt(N) = 2 has no server noise.
    assert_eq!(rows[0][2], "zero-downlink");
    assert_eq!(rows[39][2], "ok");
}

#[test]
fn bound_out_of_regime_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SYNTH);
    // mu = 1 <= rho = 2 leaves the bound undefined everywhere.
    let o = nbafl(
        dir.path(),
        &[
            "--config", "run.cfg", "bound", "--rho", "2", "--beta", "1", "--pl", "0.5", "--dissimilarity", "1",
            "--theta", "1",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bound_over_k_marks_undefined_points() {
    let dir = tempfile::tempdir().unwrap();
    let body = SYNTH
        .replace("n_clients = 4", "n_clients = 50")
        .replace("synth_n = 100", "synth_n = 1250")
        .replace("epsilon = 30", "epsilon = 60")
        .replace("rounds = 5", "rounds = 150")
        .replace("mu = 1", "mu = 40");
    write_config(dir.path(), &body);
    let o = nbafl(
        dir.path(),
        &[
            "--config", "run.cfg", "bound", "--over", "k", "--rho", "1", "--beta", "1", "--pl", "0.5",
            "--dissimilarity", "1", "--theta", "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bound_K.csv")).unwrap();
    assert!(csv.starts_with("K,bound_value,regime_flags\n"));
    // At T = 150 and eps = 60, large K leave the bound undefined.
    assert!(csv.lines().any(|l| l.ends_with(",undefined")), "{csv}");
    assert!(csv.lines().any(|l| l.ends_with(",ok")), "{csv}");
}

#[test]
fn sweep_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SYNTH);
    let o = nbafl(
        dir.path(),
        &["--config", "run.cfg", "sweep", "--variable", "epsilon", "--values", "5,50", "--seeds", "2"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cells = std::fs::read_to_string(dir.path().join("sweep_epsilon.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 4);
    let summary = std::fs::read_to_string(dir.path().join("sweep_epsilon_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
}

#[test]
fn audit_pass_and_undersized_fail() {
    let dir = tempfile::tempdir().unwrap();
    let ok = nbafl(dir.path(), &["audit", "--samples", "200000"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("PASS"));
    let bad = nbafl(dir.path(), &["audit", "--samples", "200000", "--sigma-scale", "0.1"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Missing required key.
    write_config(dir.path(), &SYNTH.replace("epsilon = 30\n", ""));
    assert_eq!(nbafl(dir.path(), &["--config", "run.cfg", "run"]).status.code(), Some(2));
    // Unreadable config file.
    assert_eq!(nbafl(dir.path(), &["--config", "missing.cfg", "run"]).status.code(), Some(1));
    // Missing MNIST files.
    let body = SYNTH.replace("dataset = synthetic", "dataset = mnist\nmnist_images = nowhere");
    write_config(dir.path(), &body);
    assert_eq!(nbafl(dir.path(), &["--config", "run.cfg", "run"]).status.code(), Some(1));
    // A step size far too large for the proximal problem.
    write_config(dir.path(), &SYNTH.replace("learning_rate = 0.1", "learning_rate = 50"));
    let o = nbafl(dir.path(), &["--config", "run.cfg", "run"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_round_trips() {
    let cfg = RunConfig::parse(SYNTH).unwrap();
    let again = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn calibrate_paper_operating_point() {
    let dir = tempfile::tempdir().unwrap();
    let body = "n_clients = 50\nrounds = 25\nepsilon = 60\ndelta = 0.01\nclip_c = 1\nmu = 0.01\n\
                shard_size = 1200\ndataset = mnist\nmodel = mlp256\n";
    write_config(dir.path(), body);
    let o = nbafl(dir.path(), &["--config", "run.cfg", "calibrate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let sigma_d: f64 = text
        .lines()
        .find(|l| l.starts_with("sigma_D"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((sigma_d - 4.140e-5).abs() < 0.001e-5, "{sigma_d}");
}

#[test]
fn calibrate_at_sqrt_n_has_no_server_noise() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &SYNTH.replace("rounds = 5", "rounds = 2"));
    let o = nbafl(dir.path(), &["--config", "run.cfg", "calibrate"]);
    assert!(stdout(&o).contains("sigma_D  0"), "{}", stdout(&o));
}

#[test]
fn noiseless_run_has_zero_sigma_columns() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &(SYNTH.to_owned() + "noiseless = true\n"));
    assert!(nbafl(dir.path(), &["--config", "run.cfg", "run"]).status.success());
    let csv = std::fs::read_to_string(dir.path().join("run_3.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let f: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(&f[4..7], &[0.0, 0.0, 0.0]);
    }
}

#[test]
fn bound_single_point_grid() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &SYNTH.replace("mu = 1", "mu = 4"));
    let o = nbafl(
        dir.path(),
        &[
            "--config", "run.cfg", "bound", "--grid-max", "1", "--rho", "1", "--beta", "1", "--pl", "0.5",
            "--dissimilarity", "1", "--theta", "1",
        ],
    );
    assert!(stdout(&o).contains("T* = 1 "), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("bound_T.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

fn bound_column(dir: &Path, args: &[&str]) -> Vec<f64> {
    let mut full = vec!["--config", "run.cfg", "bound", "--grid-max", "60"];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--rho", "1", "--beta", "1", "--pl", "0.5", "--dissimilarity", "1", "--theta", "1"]);
    let o = nbafl(dir, &full);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::read_to_string(dir.join("bound_T.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn bound_profiles_order_in_epsilon_and_n() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &SYNTH.replace("mu = 1", "mu = 4"));
    let e50 = bound_column(dir.path(), &["--epsilon", "50"]);
    let e60 = bound_column(dir.path(), &["--epsilon", "60"]);
    let e100 = bound_column(dir.path(), &["--epsilon", "100"]);
    for i in 0..60 {
        assert!(e100[i] <= e60[i] && e60[i] <= e50[i], "T = {}", i + 1);
    }
    let mut previous: Option<Vec<f64>> = None;
    for n in [50, 60, 80, 100] {
        let body = SYNTH
            .replace("mu = 1", "mu = 4")
            .replace("n_clients = 4", &format!("n_clients = {n}"))
            .replace("synth_n = 100", &format!("synth_n = {}", 25 * n));
        write_config(dir.path(), &body);
        let column = bound_column(dir.path(), &["--epsilon", "60"]);
        if let Some(prev) = &previous {
            // Below T = sqrt(N) the noise moments do not depend on N, so ties are expected.
            assert!(column.iter().zip(prev).all(|(a, b)| *a <= b * (1.0 + 1e-12)), "N = {n}");
        }
        previous = Some(column);
    }
}

#[test]
fn single_cell_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SYNTH);
    let run = nbafl(dir.path(), &["--config", "run.cfg", "run"]);
    assert!(run.status.success());
    let csv = std::fs::read_to_string(dir.path().join("run_3.csv")).unwrap();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    let o = nbafl(
        dir.path(),
        &["--config", "run.cfg", "sweep", "--variable", "epsilon", "--values", "30", "--seeds", "1"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cells = std::fs::read_to_string(dir.path().join("sweep_epsilon.csv")).unwrap();
    let row: Vec<&str> = cells.lines().nth(1).unwrap().split(',').collect();
    // variable,value,seed,final_train_loss,final_test_acc
    assert_eq!(row[2], "3");
    assert_eq!(row[3], last[1]);
    assert_eq!(row[4], last[3]);
}

#[test]
fn audit_lax_budget_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nbafl(dir.path(), &["audit", "--epsilon", "0.01", "--delta", "0.5", "--samples", "100000"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS"));
}
