use std::fs;
use std::path::Path;

use rowlm::app::{cmd_account, cmd_evaluate, cmd_generate, cmd_prepare, cmd_train, load_prepared, AccountQuery, RunDir};
use rowlm::checkpoint::Checkpoint;
use rowlm::config::RunConfig;
use rowlm::dp::StepRecord;
use rowlm::Error;

fn write_table(path: &Path, rows: usize) {
    let mut text = String::from("colour,size,weight\n");
    for i in 0..rows {
        let colour = ["red", "green", "blue"][i % 3];
        let size = ["s", "m"][(i / 3) % 2];
        text.push_str(&format!("{colour},{size},{:.2}\n", (i * 37 % 101) as f64 / 7.0));
    }
    fs::write(path, text).unwrap();
}

fn config(dir: &Path) -> RunConfig {
    let data = dir.join("t.csv");
    write_table(&data, 300);
    let mut cfg = RunConfig::default();
    cfg.data = Some(data);
    cfg.out = dir.join("run");
    cfg.seed = 4;
    cfg.split_seed = 9;
    cfg.workers = 2;
    cfg.model.layers = 1;
    cfg.model.width = 16;
    cfg.model.heads = 2;
    cfg.privacy.steps = 6;
    cfg.privacy.batch = Some(16);
    cfg.privacy.epsilon = 8.0;
    cfg.generation.rows = 40;
    cfg
}

#[test]
fn prepare_is_reproducible_and_sizes_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let s = cmd_prepare(&cfg).unwrap();
    assert_eq!((s.rows, s.heldout_rows, s.train_rows), (300, 30, 270));
    let first = load_prepared(&cfg.out).unwrap().split;
    cmd_prepare(&cfg).unwrap();
    assert_eq!(load_prepared(&cfg.out).unwrap().split, first);

    let car = dir.path().join("car.csv");
    write_table(&car, 1728);
    let car_cfg = RunConfig {
        data: Some(car),
        out: dir.path().join("car"),
        ..cfg
    };
    assert_eq!(cmd_prepare(&car_cfg).unwrap().heldout_rows, 172);
}

#[test]
fn resumed_run_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let whole = config(dir.path());
    cmd_prepare(&whole).unwrap();
    let summary = cmd_train(&whole).unwrap();
    let reference = Checkpoint::load(&RunDir(whole.out.clone()).checkpoint()).unwrap();
    assert_eq!(summary.steps, 6);
    let eps = reference.manifest.ledger.to_epsilon(whole.privacy.delta).unwrap().epsilon;
    assert_eq!(summary.epsilon, Some(eps));
    assert!(eps <= 8.0);

    let mut split = whole.clone();
    split.out = dir.path().join("split");
    cmd_prepare(&split).unwrap();
    split.stop_at = Some(2);
    assert_eq!(cmd_train(&split).unwrap().steps, 2);
    split.stop_at = None;
    split.resume = true;
    cmd_train(&split).unwrap();
    let resumed = Checkpoint::load(&RunDir(split.out.clone()).checkpoint()).unwrap();
    assert_eq!(resumed.params, reference.params);
    assert_eq!(resumed.optimizer, reference.optimizer);
    assert_eq!(resumed.manifest.ledger, reference.manifest.ledger);
    assert_eq!(resumed.manifest.step, 6);

    let lines = fs::read_to_string(RunDir(split.out.clone()).telemetry()).unwrap();
    let steps: Vec<u64> = lines
        .lines()
        .map(|l| serde_json::from_str::<StepRecord>(l).unwrap().step)
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn generate_and_evaluate_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    cmd_prepare(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let record = cmd_generate(&cfg, None, Some(25)).unwrap();
    let text = fs::read_to_string(&record.output).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("colour,size,weight"));
    assert_eq!(lines.count(), 25);
    assert!(record.output.with_extension("json").exists());
    assert_eq!(cmd_generate(&cfg, None, Some(25)).unwrap().output, record.output);
    assert_eq!(fs::read_to_string(&record.output).unwrap(), text);

    let report = cmd_evaluate(&cfg, None).unwrap();
    assert_eq!(report.nll.as_ref().unwrap().rows, 30);
    assert_eq!(report.marginals.len(), 6);
    let eval = RunDir(cfg.out.clone()).eval();
    assert!(eval.join("report.json").exists());
    assert!(eval.join("marginal_0_1.svg").exists());

    let mut from_file = cfg.clone();
    from_file.eval.synthetic = Some(record.output);
    from_file.eval.plots = false;
    assert_eq!(cmd_evaluate(&from_file, None).unwrap().meta.synthetic_rows, Some(25));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), 2);

    cmd_prepare(&cfg).unwrap();
    let other = dir.path().join("other.csv");
    fs::write(&other, "x,y\n1,2\n").unwrap();
    let mut wrong = cfg.clone();
    wrong.data = Some(other);
    assert_eq!(cmd_train(&wrong).unwrap_err().exit_code(), 3);

    let mut tight = cfg.clone();
    tight.privacy.epsilon = 1e-3;
    assert!(matches!(cmd_train(&tight).unwrap_err(), Error::Privacy(_)));
    assert_eq!(cmd_train(&tight).unwrap_err().exit_code(), 4);

    assert_eq!(cmd_account(&AccountQuery::default()).unwrap_err().exit_code(), 2);
}

#[test]
fn account_round_trips() {
    let given = cmd_account(&AccountQuery {
        sample_rate: Some(0.01),
        sigma: Some(1.2),
        steps: 500,
        delta: 1e-6,
        ..Default::default()
    })
    .unwrap();
    let back = cmd_account(&AccountQuery {
        sample_rate: Some(0.01),
        epsilon: Some(given.epsilon),
        steps: 500,
        delta: 1e-6,
        ..Default::default()
    })
    .unwrap();
    assert!((back.sigma - 1.2).abs() / 1.2 < 1e-3, "{}", back.sigma);
}
