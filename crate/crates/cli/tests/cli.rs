use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use attnet::data_io::{encode_pgm, synthetic_dataset, to_fer2013_csv};
use attnet::models::load_checkpoint;
use attnet_cli::{meets_expectation, parse_expect, summary_line, ParamsRow, PARAMS_HEADER};

fn attnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_table_parses_back() {
    let o = attnet(&["params", "--family", "resnet", "--depth", "50", "--expect", "23.49", "--tol", "1"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(PARAMS_HEADER));
    let row = ParamsRow::parse(lines.next().unwrap()).unwrap();
    assert_eq!((row.family.as_str(), row.depth, row.attention.as_str()), ("resnet", 50, "none"));
    assert!(meets_expectation(row.params, parse_expect("23.49M").unwrap(), 1.0));
    assert!(!meets_expectation(row.params, 23.49, 0.1));
    assert_eq!(ParamsRow::parse(&row.to_line()).unwrap(), row);
}

#[test]
fn params_exit_codes() {
    assert_eq!(code(&attnet(&["params", "--family", "vgg", "--depth", "17"])), 2);
    assert_eq!(code(&attnet(&["params", "--family", "resnet", "--depth", "50", "--attention", "se", "--r", "48"])), 2);
    assert_eq!(code(&attnet(&["params", "--family", "resnet", "--depth", "50", "--expect", "30"])), 3);
    assert_eq!(code(&attnet(&["params", "--family", "resnet", "--depth", "50", "--expect", "abc"])), 2);
    assert_eq!(code(&attnet(&["params", "--depth", "50"])), 2);
    assert_eq!(code(&attnet(&["--help"])), 0);
}

#[test]
fn cbam_head_count_is_baseline_plus_block() {
    let count = |extra: &[&str]| {
        let mut args = vec!["params", "--family", "vgg", "--depth", "16"];
        args.extend_from_slice(extra);
        let o = attnet(&args);
        ParamsRow::parse(stdout(&o).lines().nth(1).unwrap()).unwrap().params
    };
    let base = count(&[]);
    let cbam = count(&["--attention", "cbam", "--r", "16", "--integration", "m2"]);
    // channel MLP 512 -> 32 -> 512 plus a 7x7 conv over two pooled maps
    assert_eq!(cbam - base, 512 * 32 + 32 + 32 * 512 + 512 + 2 * 49 + 1);
}

#[test]
fn eca_table_variants() {
    let o = attnet(&["eca-table", "--fixed-k", "3", "64", "2048"]);
    assert_eq!(stdout(&o), "channels\tk\n64\t3\n2048\t3\n");
    let o = attnet(&["eca-table", "--gamma", "1", "--b", "0", "64"]);
    assert_eq!(stdout(&o), "channels\tk\n64\t7\n");
    assert_eq!(code(&attnet(&["eca-table", "0"])), 2);
    assert_eq!(code(&attnet(&["eca-table", "--fixed-k", "4", "64"])), 2);
}

#[test]
fn gradcheck_is_deterministic_and_catches_faults() {
    let a = attnet(&["gradcheck", "layers", "--seed", "7"]);
    let b = attnet(&["gradcheck", "layers", "--seed", "7"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).lines().any(|l| l.starts_with("worst\t")));
    let f = attnet(&["gradcheck", "attention", "--inject-fault", "1.01"]);
    assert_eq!(code(&f), 1);
    assert!(stdout(&f).contains("FAIL"));
    assert_eq!(code(&attnet(&["gradcheck", "everything"])), 2);
}

#[test]
fn repeats_report_every_run_and_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = attnet(&["train", "--epochs", "2", "--repeats", "3", "--seed", "5", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let runs: Vec<Vec<&str>> = text
        .lines()
        .skip_while(|l| !l.starts_with("run\t"))
        .skip(1)
        .take(3)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(runs.iter().map(|r| r[1]).collect::<Vec<_>>(), ["5", "6", "7"]);
    let best = runs.iter().map(|r| r[4].parse::<f64>().unwrap()).fold(0.0, f64::max);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert_eq!(summary.trim(), summary_line(best, 3));
    assert_eq!(text.lines().last(), Some(summary.trim()));
    for i in 1..=3 {
        let log = fs::read_to_string(out.join(format!("run{i}/train.log"))).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(out.join(format!("run{i}/model.ckpt")).exists());
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = attnet(&["train", "--epochs", "3", "--attention", "eca", "--set", "lr=0.02", "--out", path_str(&first)]);
    assert_eq!(code(&o), 0);
    let second = dir.path().join("second");
    let config = first.join("config.txt");
    let o = attnet(&["train", "--config", path_str(&config), "--out", path_str(&second)]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(first.join("run1/model.ckpt")).unwrap(),
        fs::read(second.join("run1/model.ckpt")).unwrap()
    );
    assert_eq!(fs::read(&config).unwrap(), fs::read(second.join("config.txt")).unwrap());
    assert!(stdout(&o).contains("attention = eca\n"));
}

#[test]
fn train_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let missing = ["train", "--dataset", "fer2013", "--data-path", "/no/such.csv", "--out", out];
    assert_eq!(code(&attnet(&missing)), 2);
    assert_eq!(code(&attnet(&["train", "--set", "colour=blue", "--out", out])), 2);
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "epochs = 2\nlearning_rate = 1\n").unwrap();
    let o = attnet(&["train", "--config", path_str(&conf), "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = attnet(&["train", "--epochs", "3", "--lr", "1e300", "--set", "momentum=0", "--out", out]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epoch") && err.contains("batch"), "{err}");
}

#[test]
fn train_and_eval_on_fer_csv_at_native_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(7, 4, (48, 48), 2).unwrap();
    let usages: Vec<&str> = (0..28).map(|i| if i < 21 { "Training" } else { "PublicTest" }).collect();
    let csv = dir.path().join("fer.csv");
    fs::write(&csv, to_fer2013_csv(&data, &usages).unwrap()).unwrap();
    let out = dir.path().join("run");
    let o = attnet(&[
        "train", "--dataset", "fer2013", "--data-path", path_str(&csv), "--no-resize", "--epochs", "2",
        "--set", "val_usage=publictest", "--out", path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("input = 1x48x48\n"));
    let log = fs::read_to_string(out.join("run1/train.log")).unwrap();
    assert!(!log.lines().nth(1).unwrap().contains("NaN"));

    let ckpt = out.join("run1/model.ckpt");
    assert_eq!(load_checkpoint(&ckpt).unwrap().spec().input.h, 48);
    let args = ["eval", "--checkpoint", path_str(&ckpt), "--dataset", "fer2013", "--data-path", path_str(&csv)];
    let mut with_split = args.to_vec();
    with_split.extend_from_slice(&["--set", "usage=publictest", "--no-resize"]);
    let o = attnet(&with_split);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("samples\t7\n"), "{text}");
    assert_eq!(text.lines().filter(|l| l.ends_with("\t1\t1.000000") || l.ends_with("\t1\t0.000000")).count(), 7);
    assert_eq!(stdout(&attnet(&with_split)), text);
    // without the flag images are resized to the checkpoint's input, here a no-op
    let mut resized = args.to_vec();
    resized.extend_from_slice(&["--set", "usage=publictest"]);
    assert_eq!(stdout(&attnet(&resized)), text);
}

#[test]
fn train_on_pgm_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("faces");
    for (k, class) in ["angry", "happy"].iter().enumerate() {
        fs::create_dir_all(root.join(class)).unwrap();
        for i in 0..3u8 {
            let px: Vec<u8> = (0..64).map(|p| if (p % 8 < 4) == (k == 0) { 200 + i } else { 10 }).collect();
            fs::write(root.join(class).join(format!("{i}.pgm")), encode_pgm(8, 8, &px)).unwrap();
        }
    }
    let out = dir.path().join("run");
    let o = attnet(&[
        "train", "--dataset", "pgm", "--data-path", path_str(&root), "--set", "classes=2", "--set",
        "input=1x16x16", "--epochs", "30", "--set", "batch_size=6", "--out", path_str(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("{\"acc\": 1.000000, \"runs\": 1}"), "{}", stdout(&o));
    let wrong_classes = ["train", "--dataset", "pgm", "--data-path", path_str(&root), "--out", path_str(&out)];
    assert_eq!(code(&attnet(&wrong_classes)), 2);
}
