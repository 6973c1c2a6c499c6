use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedseg::data::{build_partition, to_batch, SampleSource};
use fedseg::fedcore::{Federation, NoObserver};
use fedseg::metrics::{metrics_from_counts, ConfusionCounts};
use fedseg::model::{save_checkpoint, AttentionUNet, ModelConfig};
use fedseg_cli::config::RunConfig;
use fedseg_cli::manifest::Manifest;
use image::GenericImageView;

const TINY: &str = r#"
fed.rounds = 3
fed.local_epochs = 1
fed.batch_size = 4
fed.adam_lr = 0.01
model.depth = 1
model.base_channels = 2
data.image_size = 8
data.clients = [{ benign = 6, normal = 2 }, { malignant = 6, normal = 2 }]
data.server_test = { benign = 2, malignant = 1, normal = 2 }
"#;

fn fedseg(args: &[&str], extra: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedseg"))
        .env("RUST_LOG", "warn")
        .args(args)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn tiny_run() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    let o = fedseg(&["simulate", "--config"], &[&config, Path::new("--out"), &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    Run { _dir: dir, config, out }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_writes_every_artifact() {
    let run = tiny_run();
    let rows = csv_rows(&run.out.join("rounds.csv"));
    assert_eq!(rows[0].join(","), "round,dice_loss,iou,sensitivity,specificity,f1,accuracy");
    assert_eq!(rows.len(), 4);
    for (k, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[0], (k + 1).to_string());
        assert!(row[1..].iter().all(|v| v.split('.').nth(1).is_some_and(|d| d.len() == 6)));
    }
    assert_eq!(csv_rows(&run.out.join("clients.csv")).len(), 1 + 3 * 2);
    for k in 1..=3 {
        assert!(run.out.join(format!("round_{k}.fpwt")).is_file());
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(run.out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config.fed.rounds, 3);
    assert_eq!(manifest.artifacts.checkpoints.len(), 3);
    assert_eq!(manifest.seeds.run, manifest.config.run.seed);
}

#[test]
fn rounds_csv_matches_in_memory_history() {
    let run = tiny_run();
    let mut cfg = RunConfig::from_path(&run.config).unwrap();
    cfg.run.out_dir = run.out.clone();
    let model = AttentionUNet::build(cfg.model_config().unwrap()).unwrap();
    let partition = build_partition(
        &cfg.plan().unwrap(),
        &SampleSource::Synthetic {
            size: cfg.data.image_size,
        },
    )
    .unwrap();
    let mut fed = Federation::new(model, partition, cfg.fed_config().unwrap(), cfg.augmentation().unwrap()).unwrap();
    fed.run(&mut NoObserver).unwrap();
    let rows = csv_rows(&run.out.join("rounds.csv"));
    for (row, m) in rows[1..].iter().zip(&fed.state().history) {
        for (text, v) in row[1..].iter().zip(m.values()) {
            assert!((text.parse::<f64>().unwrap() - v).abs() <= 1e-6);
        }
    }
}

#[test]
fn manifest_replay_is_byte_identical() {
    let run = tiny_run();
    let again = run.out.with_file_name("again");
    let o = fedseg(
        &["simulate", "--config"],
        &[&run.out.join("manifest.json"), Path::new("--out"), &again],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["rounds.csv", "clients.csv", "round_1.fpwt", "round_3.fpwt"] {
        assert_eq!(fs::read(run.out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "fed.rounds = 0\n").unwrap();
    let o = fedseg(&["simulate", "--config"], &[&bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rounds"), "{}", stderr(&o));

    fs::write(&bad, "fed.round = 3\n").unwrap();
    let o = fedseg(&["simulate", "--config"], &[&bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("round"));

    let o = fedseg(&["simulate", "--config"], &[&dir.path().join("missing.toml")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_deterministic_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fedseg(
            &["gen-data", "--benign", "5", "--normal", "2", "--size", "16", "--seed", "3", "--out"],
            &[out],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("benign: 5"));
    }
    let files = |d: &Path| {
        let mut v: Vec<PathBuf> = fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    let benign = files(&a.join("benign"));
    assert_eq!(benign.len(), 10);
    for f in files(&a.join("normal")).iter().filter(|p| p.to_string_lossy().ends_with("_mask.png")) {
        let img = image::open(f).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0));
    }
    for f in benign {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(b.join(rel)).unwrap());
    }
}

#[test]
fn eval_reproduces_the_last_round() {
    let run = tiny_run();
    let o = fedseg(
        &["eval", "--overlays", "--config"],
        &[&run.out.join("manifest.json"), &run.out.join("round_3.fpwt")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(printed[0], "dice_loss,iou,sensitivity,specificity,f1,accuracy");
    let last = csv_rows(&run.out.join("rounds.csv")).pop().unwrap();
    assert_eq!(printed[1], last[1..].join(","));

    let overlays: Vec<PathBuf> = fs::read_dir(run.out.join("overlays")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(overlays.len(), 5);
    let levels: Vec<u8> = overlays
        .iter()
        .flat_map(|p| image::open(p).unwrap().to_luma8().pixels().map(|px| px.0[0]).collect::<Vec<_>>())
        .collect();
    assert!(levels.contains(&128) || levels.contains(&255));
    assert_eq!(image::open(&overlays[0]).unwrap().dimensions(), (8, 8));
}

#[test]
fn zero_checkpoint_predicts_everything_positive() {
    let run = tiny_run();
    let cfg = RunConfig::from_path(&run.config).unwrap();
    let mut model = AttentionUNet::build(cfg.model_config().unwrap()).unwrap();
    model.set_weights(&vec![0.0; model.parameter_count()]).unwrap();
    let zero = run.out.join("zero.fpwt");
    save_checkpoint(model.parameters(), &zero).unwrap();
    let o = fedseg(&["eval", "--config"], &[&run.config, &zero]);
    assert!(o.status.success(), "{}", stderr(&o));

    let test = fedseg_cli::commands::server_test_set(&cfg).unwrap();
    let (_, masks) = to_batch(&test.samples).unwrap();
    let positives = masks.data().iter().filter(|&&m| m == 1.0).count() as u64;
    let counts = ConfusionCounts {
        tp: positives,
        fp: masks.len() as u64 - positives,
        tn: 0,
        fn_: 0,
    };
    let expect = metrics_from_counts(&counts).unwrap().to_csv_fields();
    assert_eq!(stdout(&o).lines().nth(1).unwrap(), expect);
}

#[test]
fn eval_rejects_bad_checkpoints() {
    let run = tiny_run();
    let corrupt = run.out.join("corrupt.fpwt");
    let mut bytes = fs::read(run.out.join("round_1.fpwt")).unwrap();
    bytes[0] = b'X';
    fs::write(&corrupt, bytes).unwrap();
    let o = fedseg(&["eval", "--config"], &[&run.config, &corrupt]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));

    let other = run.out.join("other.fpwt");
    let m = AttentionUNet::build(ModelConfig {
        depth: 2,
        base_channels: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    save_checkpoint(m.parameters(), &other).unwrap();
    let o = fedseg(&["eval", "--config"], &[&run.config, &other]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("enc1.conv1.weight"), "{}", stderr(&o));
}

#[test]
fn eval_on_a_directory() {
    let run = tiny_run();
    let data = run.out.with_file_name("data");
    let o = fedseg(
        &["gen-data", "--benign", "3", "--malignant", "2", "--size", "8", "--out"],
        &[&data],
    );
    assert!(o.status.success());
    let o = fedseg(
        &["eval", "--config"],
        &[&run.config, &run.out.join("round_3.fpwt"), Path::new("--data"), &data],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    fs::remove_file(data.join("benign/sample_00000_mask.png")).unwrap();
    let o = fedseg(
        &["eval", "--config"],
        &[&run.config, &run.out.join("round_3.fpwt"), Path::new("--data"), &data],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sample_00000.png"));
}

#[test]
fn gradcheck_reports_every_op_once() {
    let o = fedseg(&["gradcheck"], &[]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    for op in fedseg::numerics::OpKind::ALL {
        assert_eq!(names.iter().filter(|&&n| n == op.name()).count(), 1, "{op}");
    }
    for line in text.lines().skip(1) {
        let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(err <= 1e-4, "{line}");
    }
}

#[test]
fn gradcheck_catches_an_injected_fault() {
    let o = fedseg(&["gradcheck", "--inject-fault", "conv2d"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let o = fedseg(&["gradcheck", "--inject-fault", "nope"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn parallel_mode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("par");
    let o = fedseg(
        &["simulate", "--sequential=false", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"sequential\": false"));
}
