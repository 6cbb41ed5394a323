use std::path::{Path, PathBuf};

use evofed::experiment::{
    compare, read_rounds, read_summary, resolve_output, run_experiment, verify_accounting, ExperimentConfig,
    OUTPUT_ROOT_ENV, ROUNDS_FILE,
};
use evofed::fitness_codec::CodecScheme;
use evofed::Error;

const SMALL: &str = "
[run]
method = evofed
seed = 3
rounds = 20
eval_interval = 5
[data]
samples = 400
[model]
hidden = 8
[federation]
clients = 4
participation = 0.5
[evofed]
population = 16
partitions = 2
[optimizer]
batch_size = 32
local_steps = 5
";

fn small(method: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&SMALL.replace("method = evofed", &format!("method = {method}"))).unwrap()
}

fn csv_without_wall(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(ROUNDS_FILE))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&small("evofed"), Some(dir.path()), Some(2)).unwrap();
    let rows = read_rounds(&dir.path().join(ROUNDS_FILE)).unwrap();
    assert_eq!(
        rows,
        out.rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.wall_ms = (r.wall_ms * 1e3).round() / 1e3;
                r
            })
            .collect::<Vec<_>>()
    );
    assert_eq!(rows.len(), 20);
    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary, out.summary);
    assert_eq!(summary.total_uplink_bytes, rows.last().unwrap().uplink_bytes_total);
    assert_eq!(summary.total_downlink_bytes, rows.last().unwrap().downlink_bytes_total);
    assert_eq!(summary.config["evofed.partitions"], "2");
    assert_eq!(rows.iter().filter(|r| r.accuracy.is_some()).count(), 4);
    let header = std::fs::read_to_string(dir.path().join(ROUNDS_FILE)).unwrap();
    assert!(header.starts_with("t,accuracy,loss,uplink_bytes_total,downlink_bytes_total,wall_ms\n"));
}

#[test]
fn reruns_match_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&small("evofed"), Some(a.path()), Some(1)).unwrap();
    run_experiment(&small("evofed"), Some(b.path()), Some(3)).unwrap();
    assert_eq!(csv_without_wall(a.path()), csv_without_wall(b.path()));
}

#[test]
fn fedavg_uplink_is_four_bytes_per_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&small("fedavg"), Some(dir.path()), None).unwrap();
    // 2 of 4 clients per round; 2 -> 8 -> 4 MLP has 60 parameters.
    assert_eq!(out.summary.param_count, 60);
    assert_eq!(out.rows[0].uplink_bytes_total, 2 * 4 * 60);
}

#[test]
fn compare_aligns_runs() {
    let root = tempfile::tempdir().unwrap();
    let evo = root.path().join("evofed");
    let avg = root.path().join("fedavg");
    run_experiment(&small("evofed"), Some(&evo), None).unwrap();
    run_experiment(&small("fedavg"), Some(&avg), None).unwrap();
    let table = root.path().join("cmp.csv");
    compare(&[evo.clone(), avg.clone()], &table).unwrap();
    let mut r = csv::Reader::from_path(&table).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(header.len(), 7);
    for rec in r.records() {
        let rec = rec.unwrap();
        let evo_up: u64 = rec[2].parse().unwrap();
        let avg_up: u64 = rec[5].parse().unwrap();
        // 2 * 16 * 4 bytes of fitness is below 4 * 60.
        assert!(evo_up < avg_up);
    }

    let twice = root.path().join("twice.csv");
    compare(&[evo.clone(), evo.clone()], &twice).unwrap();
    let mut r = csv::Reader::from_path(&twice).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let cells: Vec<&str> = rec.iter().collect();
        assert_eq!(cells[1..4], cells[4..7]);
    }

    assert!(matches!(
        compare(std::slice::from_ref(&evo), &twice),
        Err(Error::InvalidArgument { .. })
    ));
    let missing = root.path().join("nothing-here");
    let err = compare(&[evo, missing], &twice).unwrap_err();
    assert!(err.to_string().contains("nothing-here"), "{err}");
}

#[test]
fn config_errors_carry_lines_and_fields() {
    let err = ExperimentConfig::parse(&SMALL.replace("population = 16", "population = 16\nsigma = -1")).unwrap_err();
    assert_eq!(err.field, "evofed.sigma");
    assert_eq!(err.line, Some(16));
    let e: Error = err.into();
    assert!(e.is_validation());

    let dir = tempfile::tempdir().unwrap();
    let io = ExperimentConfig::from_file(dir.path().join("absent.ini")).unwrap_err();
    assert!(!io.is_validation());

    let mut over = small("evofed");
    over.partitions = 61;
    assert!(run_experiment(&over, Some(dir.path()), None)
        .unwrap_err()
        .is_validation());
}

#[test]
fn accounting_flags_over_partitioning() {
    let r = verify_accounting(11_000, 128, 1, CodecScheme::Raw32).unwrap();
    assert_eq!(r.message_bytes, 512);
    assert!((r.compression - (1.0 - 512.0 / 44_000.0)).abs() < 1e-15);
    let degenerate = verify_accounting(500, 2, 500, CodecScheme::Raw32).unwrap();
    assert!(degenerate.degenerate && degenerate.compression <= 0.0);
}

#[test]
fn relative_outputs_follow_the_root_variable() {
    std::env::set_var(OUTPUT_ROOT_ENV, "/tmp/evofed-root");
    assert_eq!(
        resolve_output(Path::new("runs/a")),
        PathBuf::from("/tmp/evofed-root/runs/a")
    );
    assert_eq!(resolve_output(Path::new("/abs/b")), PathBuf::from("/abs/b"));
    std::env::remove_var(OUTPUT_ROOT_ENV);
    assert_eq!(resolve_output(Path::new("runs/a")), PathBuf::from("runs/a"));
}
