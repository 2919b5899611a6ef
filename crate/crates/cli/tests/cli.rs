use std::fs;
use std::path::Path;
use std::process::Command;

use fedsim::engine::{Algorithm, RunConfig};
use fedsim::server::AttentionOption;
use fedsim_cli::{
    build_config, parse_config, parse_entries, run_experiment, run_sweep, Axis, CliError,
    RunOptions, RunStatus, Summary, HEATMAP_FILE, METRICS_FILE, SUMMARY_FILE, SWEEP_FILE,
};

const SMALL: &str = "
# tiny corpus, quick rounds
clients = 4
rounds = 12
batch_size = 10
hidden = 6
synth_classes = 4
synth_per_class = 30
synth_test_per_class = 10
synth_dim = 5
lr = 0.05
timing = false
";

fn entries(extra: &[(&str, &str)]) -> Vec<(String, String)> {
    let mut e = parse_entries(SMALL).unwrap();
    e.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    e
}

fn small(extra: &[(&str, &str)]) -> RunConfig {
    build_config(&entries(extra)).unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "algo = fedavg\nseed = 3 # trailing comment\n\nlr = 0.1\n").unwrap();
    let flags = vec![("lr".to_string(), "0.003".to_string())];
    let cfg = parse_config(Some(&path), &flags).unwrap();
    assert_eq!(cfg.algo, Algorithm::Fedavg);
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.lr, 0.003);
}

#[test]
fn fedavgm_defaults_to_point_nine_momentum() {
    let cfg = build_config(&[("algo".into(), "fedavgm".into())]).unwrap();
    assert_eq!(cfg.algo, Algorithm::Fedavgm);
    assert_eq!(cfg.beta, 0.9);
}

#[test]
fn learning_rate_grid_is_accepted() {
    for lr in ["1e-3", "3e-3", "1e-2", "3e-2", "1e-1", "3e-1", "0.001"] {
        assert!(build_config(&[("lr".into(), lr.into())]).is_ok(), "{lr}");
    }
}

#[test]
fn errors_name_the_offending_key() {
    let key_of = |k: &str, v: &str| match build_config(&[(k.into(), v.into())]) {
        Err(CliError::UnknownKey(k)) => format!("unknown:{k}"),
        Err(CliError::Value { key, .. }) => key,
        Err(CliError::Invalid(fedsim::Error::InvalidArgument { name, .. })) => name.to_string(),
        other => panic!("{k}={v}: unexpected {other:?}"),
    };
    assert_eq!(key_of("sample_rate", "1.5"), "sample_rate");
    assert_eq!(key_of("rho", "0"), "rho");
    assert_eq!(key_of("rho", "-2"), "rho");
    assert_eq!(key_of("clients", "ten"), "clients");
    assert_eq!(key_of("clients", "-1"), "clients");
    assert_eq!(key_of("algo", "fedprox"), "algo");
    assert_eq!(key_of("attention", "cross"), "attention");
    assert_eq!(key_of("timing", "maybe"), "timing");
    assert_eq!(key_of("learning_rate", "0.1"), "unknown:learning_rate");
    assert!(matches!(parse_entries("lr 0.1"), Err(CliError::Syntax { line: 1, .. })));
}

#[test]
fn csv_has_fixed_header_and_one_row_per_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("eval_every", "5")]);
    run_experiment(&cfg, dir.path(), RunOptions::default()).unwrap();
    let text = read(&dir.path().join(METRICS_FILE));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,train_loss,test_accuracy,drift,elapsed_ms"));
    let rounds: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(rounds, vec![5, 10, 12]);
    assert!(!text.contains('\r'));
}

#[test]
fn equal_seeds_give_byte_identical_csv() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small(&[("algo", "igfl"), ("sample_rate", "0.5")]);
    run_experiment(&cfg, a.path(), RunOptions::default()).unwrap();
    run_experiment(&cfg, b.path(), RunOptions::default()).unwrap();
    assert_eq!(read(&a.path().join(METRICS_FILE)), read(&b.path().join(METRICS_FILE)));
}

#[test]
fn summary_matches_csv_tail_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("algo", "fedadam"), ("rounds", "25")]);
    let summary = run_experiment(&cfg, dir.path(), RunOptions::default()).unwrap();
    let text = read(&dir.path().join(METRICS_FILE));
    let accs: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let tail = &accs[accs.len() - 3..];
    let want = tail.iter().sum::<f64>() / 3.0;
    assert!((summary.summary_accuracy.unwrap() - want).abs() < 1e-12);

    let parsed: Summary = serde_json::from_str(&read(&dir.path().join(SUMMARY_FILE))).unwrap();
    assert_eq!(parsed, summary);
    assert_eq!(parsed.config, cfg);
    assert_eq!(parsed.status, RunStatus::Ok);
}

#[test]
fn heatmap_is_square_and_row_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("algo", "igfl_s"), ("attention", "self")]);
    let opts = RunOptions {
        heatmap: true,
        ..Default::default()
    };
    let summary = run_experiment(&cfg, dir.path(), opts).unwrap();
    assert!(summary.matching_rate.is_some());
    let text = read(&dir.path().join(HEATMAP_FILE));
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r.len(), 4);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let bad = RunConfig {
        attention: AttentionOption::Time,
        ..cfg
    };
    assert!(run_experiment(&bad, dir.path(), opts).is_err());
}

#[test]
fn divergence_keeps_partial_csv_and_marks_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[("lr", "1e300")]);
    let err = run_experiment(&cfg, dir.path(), RunOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Run(_)), "{err}");
    assert!(read(&dir.path().join(METRICS_FILE)).starts_with("round,train_loss"));
    let s: Summary = serde_json::from_str(&read(&dir.path().join(SUMMARY_FILE))).unwrap();
    assert_eq!(s.status, RunStatus::Failed);
    assert!(s.error.unwrap().contains("diverged"));
}

#[test]
fn axis_parsing() {
    let a = Axis::parse("lr=0.001,0.003,0.01").unwrap();
    assert_eq!(a.keys, vec!["lr"]);
    assert_eq!(a.values.len(), 3);
    let be = Axis::parse("batch_size+epochs=100+1,20+1,100+5,20+5").unwrap();
    assert_eq!(be.keys, vec!["batch_size", "epochs"]);
    assert_eq!(be.values[3], vec!["20", "5"]);
    assert!(matches!(Axis::parse("nope=1,2"), Err(CliError::UnknownKey(_))));
    assert!(Axis::parse("lr").is_err());
    assert!(Axis::parse("batch_size+epochs=100").is_err());
}

#[test]
fn sweep_writes_cells_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let axis = Axis::parse("lr=0.01,1e300,0.05").unwrap();
    let cells = run_sweep(None, &entries(&[]), &axis, dir.path(), RunOptions::default()).unwrap();
    assert_eq!(cells.len(), 3);
    assert!(cells[0].error.is_none() && cells[2].error.is_none());
    assert!(cells[1].error.is_some());
    let table = read(&dir.path().join(SWEEP_FILE));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "lr,status,summary_accuracy,final_drift");
    assert!(lines[1].starts_with("0.01,ok,"));
    assert!(lines[2].starts_with("1e300,failed,"));
    assert!(dir.path().join("lr=0.05").join(METRICS_FILE).exists());
}

#[test]
fn single_value_sweep_equals_plain_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let axis = Axis::parse("seed=4").unwrap();
    run_sweep(None, &entries(&[]), &axis, a.path(), RunOptions::default()).unwrap();
    run_experiment(&small(&[("seed", "4")]), b.path(), RunOptions::default()).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE] {
        assert_eq!(read(&a.path().join("seed=4").join(f)), read(&b.path().join(f)));
    }
}

#[test]
fn binary_runs_and_rejects_unknown_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--algo", "scaffold", "--rounds", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(read(&out.join(METRICS_FILE)).lines().count(), 4);

    let bad = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(["run", "--learning-rate", "0.1"])
        .output()
        .unwrap();
    assert!(!bad.status.success());

    let invalid = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(["run", "--sample_rate", "1.5", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!invalid.status.success());
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("sample_rate"));
}
