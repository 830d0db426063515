use scope_core::experiment::{
    compare_runs, run_experiment, strip_wall_ms, Algorithm, DataSource, ExperimentConfig, RunResult,
};

fn base(data: DataSource) -> ExperimentConfig {
    ExperimentConfig {
        data: Some(data),
        p: Some(2),
        eta: Some(0.5),
        lambda: Some(1e-2),
        seed: Some(4),
        ..Default::default()
    }
}

fn first_row_below(csv: &str, cols: (usize, usize), tol: f64) -> Option<u64> {
    csv.lines().skip(1).find_map(|line| {
        let f: Vec<&str> = line.split(',').collect();
        let d: f64 = f.get(cols.0)?.parse().ok()?;
        (d <= tol).then(|| f[cols.1].parse().unwrap())
    })
}

#[test]
fn message_ratio_follows_counter_formulas() {
    let data = DataSource::SyntheticLr { n: 40, d: 3, seed: 1 };
    let scope = ExperimentConfig {
        bigm: Some(1000),
        bigt: Some(2),
        ..base(data.clone())
    };
    let dis = ExperimentConfig {
        algorithm: Some(Algorithm::Dissvrg),
        batch: Some(2),
        ..scope.clone()
    };
    let report = compare_runs(&scope, &dis).unwrap();
    assert_eq!(report.a.messages(), 4 * 2 * 2);
    assert_eq!(report.b.messages(), 2 * 2 * 2 * 1001);
    assert_eq!(report.message_ratio(), 500.5);
}

#[test]
fn identical_configs_give_identical_metrics() {
    let cfg = ExperimentConfig {
        bigm: Some(50),
        bigt: Some(4),
        ..base(DataSource::SyntheticLr { n: 100, d: 4, seed: 2 })
    };
    let run = || match run_experiment(&cfg).unwrap() {
        RunResult::Master(rep) => strip_wall_ms(&rep.csv),
        RunResult::Worker { .. } => unreachable!(),
    };
    assert_eq!(run(), run());
    let report = compare_runs(&cfg, &cfg).unwrap();
    for line in report.csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1..4], f[5..8]);
    }
}

#[test]
fn scope_needs_fewer_messages_than_dissvrg() {
    let data = DataSource::SyntheticLr { n: 2000, d: 20, seed: 3 };
    let scope = ExperimentConfig {
        p: Some(4),
        c: Some(1e-3),
        bigm: Some(500),
        bigt: Some(20),
        ..base(data.clone())
    };
    let dis = ExperimentConfig {
        algorithm: Some(Algorithm::Dissvrg),
        p: Some(4),
        c: Some(0.0),
        batch: Some(10),
        bigm: Some(100),
        bigt: Some(20),
        ..base(data)
    };
    let report = compare_runs(&scope, &dis).unwrap();
    let scope_msgs = first_row_below(&report.csv, (2, 3), 1e-8).expect("scope reaches 1e-8");
    let dis_msgs = first_row_below(&report.csv, (6, 7), 1e-8).expect("dissvrg reaches 1e-8");
    assert!(scope_msgs < dis_msgs, "scope {scope_msgs} vs dissvrg {dis_msgs}");
}
