use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.prediction_steps = 6
model.hidden = 4
model.layers = 1
model.residual_layers = 2
model.residual_channels = 4
model.diffusion_steps = 5
train.max_epochs = 3
train.batches_per_epoch = 2
train.batch_size = 4
train.validation_repeats = 2
forecast.samples = 5
data.test_windows = 2
generate.length = 200
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_timegrad"));
    // keep the caller's overrides out of the tests
    for (k, _) in std::env::vars() {
        if k.starts_with("TIMEGRAD_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Working directory holding the tiny config and a generated VAR dataset.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    let o = run(dir.path(), &["generate", "-c", "run.cfg", "--output-dir", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = dir.path().join("data/synthetic.csv");
    assert!(data.exists());
    (dir, data)
}

fn train(dir: &Path, out: &str, seed: &str) -> Output {
    run(
        dir,
        &[
            "train",
            "-c",
            "run.cfg",
            "--data",
            "data/synthetic.csv",
            "--output-dir",
            out,
            "--seed",
            seed,
        ],
    )
}

fn assert_single_line_error(o: &Output, code: i32, class: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("{class}: ")), "{err}");
}

#[test]
fn version_reports_format_versions() {
    let o = bin().arg("--version").output().unwrap();
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("checkpoint format 1") && s.contains("csv schema 1"), "{s}");
}

#[test]
fn help_documents_env_prefix_and_exit_codes() {
    let o = bin().arg("--help").output().unwrap();
    let s = stdout(&o);
    assert!(s.contains("TIMEGRAD_") && s.contains("DATA_ERROR"), "{s}");
}

#[test]
fn schedule_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["schedule", "--steps", "100", "--beta-1", "1e-4", "--beta-n", "0.1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    let rows: Vec<Vec<f64>> = s
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 100);
    assert_eq!(rows[99][1], 0.1);
    assert_eq!(rows[0][3], 0.0);
    assert!(rows.windows(2).all(|w| w[1][2] < w[0][2]));
    // nothing written
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn schedule_invalid_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["schedule", "--beta-1", "0.2", "--beta-n", "1.5"]);
    assert_single_line_error(&o, 2, "CONFIG_ERROR");
}

#[test]
fn unknown_keys_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["schedule", "--set", "model.depth=3"]);
    assert_single_line_error(&o, 2, "CONFIG_ERROR");
    assert!(stderr(&o).contains("model.depth"));
    let o = bin()
        .current_dir(dir.path())
        .env("TIMEGRAD_MODEL_DEPTH", "3")
        .arg("schedule")
        .output()
        .unwrap();
    assert_single_line_error(&o, 2, "CONFIG_ERROR");
    assert!(stderr(&o).contains("TIMEGRAD_MODEL_DEPTH"));
    let o = run(dir.path(), &["train", "--no-such-flag"]);
    assert_single_line_error(&o, 2, "CONFIG_ERROR");
}

#[test]
fn env_overrides_file_and_flag_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "model.diffusion_steps = 7\n").unwrap();
    let rows = |o: &Output| stdout(o).lines().count() - 1;
    let o = run(dir.path(), &["schedule", "-c", "c.cfg"]);
    assert_eq!(rows(&o), 7);
    let with_env = |extra: &[&str]| {
        bin()
            .current_dir(dir.path())
            .env("TIMEGRAD_MODEL_DIFFUSION_STEPS", "9")
            .args(["schedule", "-c", "c.cfg"])
            .args(extra)
            .output()
            .unwrap()
    };
    assert_eq!(rows(&with_env(&[])), 9);
    assert_eq!(rows(&with_env(&["--steps", "11"])), 11);
}

#[test]
fn missing_dataset_is_config_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    let o = run(
        dir.path(),
        &["train", "-c", "run.cfg", "--data", "nope.csv", "--output-dir", "out"],
    );
    assert_single_line_error(&o, 2, "CONFIG_ERROR");
    assert!(!dir.path().join("out").exists());
    let o = run(dir.path(), &["train", "-c", "run.cfg", "--output-dir", "out"]);
    assert_single_line_error(&o, 2, "CONFIG_ERROR");
}

#[test]
fn malformed_dataset_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), TINY).unwrap();
    std::fs::write(dir.path().join("bad.csv"), "timestamp,a\n2020-01-01,1\n2020-01-02,x\n").unwrap();
    let o = run(
        dir.path(),
        &["train", "-c", "run.cfg", "--data", "bad.csv", "--output-dir", "out"],
    );
    assert_single_line_error(&o, 3, "DATA_ERROR");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn train_forecast_evaluate_round_trip() {
    let (dir, _) = workspace();
    let d = dir.path();
    let o = train(d, "out", "7");
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("out/train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,best"));
    let best: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(!best.is_empty());
    assert!(best.windows(2).all(|w| w[1] <= w[0]));

    let o = run(
        d,
        &[
            "forecast",
            "-c",
            "run.cfg",
            "--data",
            "data/synthetic.csv",
            "--output-dir",
            "out",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let samples = std::fs::read_to_string(d.join("out/samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("window,trajectory,t,entity,value"));
    // 2 windows x 5 trajectories x 6 steps x 2 entities
    assert_eq!(samples.lines().count(), 1 + 2 * 5 * 6 * 2);

    let quant = std::fs::read_to_string(d.join("out/quantiles.csv")).unwrap();
    assert_eq!(quant.lines().next(), Some("window,t,entity,level,value"));
    let rows: Vec<Vec<String>> = quant
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    let levels: Vec<&str> = rows.iter().take(5).map(|r| r[3].as_str()).collect();
    assert_eq!(levels, ["0.05", "0.25", "0.5", "0.75", "0.95"]);

    let plot: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/plot.json")).unwrap()).unwrap();
    let median = plot["windows"][1]["entities"][0]["median"].as_array().unwrap();
    for (t, m) in median.iter().enumerate() {
        let q = rows
            .iter()
            .find(|r| r[0] == "1" && r[1] == t.to_string() && r[2] == "0" && r[3] == "0.5")
            .unwrap();
        assert_eq!(m.as_f64().unwrap(), q[4].parse::<f64>().unwrap());
    }
    assert_eq!(plot["windows"][0]["entities"][0]["bands"].as_array().unwrap().len(), 2);

    let o = run(
        d,
        &[
            "evaluate",
            "-c",
            "run.cfg",
            "--data",
            "data/synthetic.csv",
            "--output-dir",
            "out",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/metrics.json")).unwrap()).unwrap();
    let obj = metrics.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["S", "crps_per_entity", "crps_sum", "windows"]);
    assert_eq!(metrics["S"], 5);
    assert_eq!(metrics["windows"], 2);
    assert!(metrics["crps_sum"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["crps_per_entity"].as_array().unwrap().len(), 2);
    let per = std::fs::read_to_string(d.join("out/metrics_per_entity.csv")).unwrap();
    assert_eq!(per.lines().count(), 3);

    // everything stayed inside the two output directories
    let mut top: Vec<String> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["data", "out", "run.cfg"]);
    let mut out: Vec<String> = std::fs::read_dir(d.join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    out.sort();
    assert_eq!(
        out,
        [
            "metrics.json",
            "metrics_per_entity.csv",
            "model.ckpt",
            "plot.json",
            "quantiles.csv",
            "samples.csv",
            "train_log.csv"
        ]
    );
}

#[test]
fn same_seed_gives_identical_outputs() {
    let (dir, _) = workspace();
    let d = dir.path();
    for out in ["a", "b"] {
        assert!(train(d, out, "7").status.success());
        let o = run(
            d,
            &[
                "forecast",
                "-c",
                "run.cfg",
                "--data",
                "data/synthetic.csv",
                "--output-dir",
                out,
                "--seed",
                "3",
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in [
        "model.ckpt",
        "train_log.csv",
        "samples.csv",
        "quantiles.csv",
        "plot.json",
    ] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn forecast_with_wrong_dimension_is_data_error() {
    let (dir, _) = workspace();
    let d = dir.path();
    assert!(train(d, "out", "1").status.success());
    let o = run(d, &["generate", "-c", "run.cfg", "--kind", "ar1", "--output-dir", "ar"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        d,
        &[
            "forecast",
            "-c",
            "run.cfg",
            "--data",
            "ar/synthetic.csv",
            "--checkpoint",
            "out/model.ckpt",
            "--output-dir",
            "fc",
        ],
    );
    assert_single_line_error(&o, 3, "DATA_ERROR");
    assert!(!d.join("fc").exists());
}

#[test]
fn evaluate_perfect_and_misaligned() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("truth.csv"),
        "timestamp,a,b\n2020-01-01,1.0,2.0\n2020-01-02,3.0,4.0\n2020-01-03,5.0,6.0\n",
    )
    .unwrap();
    let perfect = "window,trajectory,t,entity,value\n0,0,0,0,3.0\n0,0,0,1,4.0\n0,0,1,0,5.0\n0,0,1,1,6.0\n\
                   0,1,0,0,3.0\n0,1,0,1,4.0\n0,1,1,0,5.0\n0,1,1,1,6.0\n";
    std::fs::write(d.join("perfect.csv"), perfect).unwrap();
    let o = run(
        d,
        &[
            "evaluate",
            "--data",
            "truth.csv",
            "--forecast",
            "perfect.csv",
            "--output-dir",
            "m",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("m/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["crps_sum"], 0.0);
    assert_eq!(metrics["S"], 2);

    // two windows of two steps need four truth rows
    let long: String = perfect
        .lines()
        .chain(
            perfect
                .lines()
                .skip(1)
                .map(|l| l.replacen('0', "1", 1))
                .collect::<Vec<_>>()
                .iter()
                .map(String::as_str),
        )
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(d.join("long.csv"), long).unwrap();
    let o = run(
        d,
        &[
            "evaluate",
            "--data",
            "truth.csv",
            "--forecast",
            "long.csv",
            "--output-dir",
            "m2",
        ],
    );
    assert_single_line_error(&o, 3, "DATA_ERROR");
    let err = stderr(&o);
    assert!(err.contains('4') && err.contains('3'), "{err}");
    assert!(!d.join("m2").exists());
}

#[test]
fn ablation_rows_follow_input_order_and_record_failures() {
    let (dir, _) = workspace();
    let d = dir.path();
    let o = run(
        d,
        &[
            "ablate-n",
            "-c",
            "run.cfg",
            "--data",
            "data/synthetic.csv",
            "--output-dir",
            "abl",
            "--n-list",
            "3,600,2",
            "--repeats",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let rows: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows[0][..3], ["N", "crps_sum", "stderr"]);
    let ns: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ns, ["3", "600", "2"]);
    assert!(rows[1][1].parse::<f64>().unwrap() > 0.0 && rows[1][2].parse::<f64>().unwrap() >= 0.0);
    assert_eq!(rows[2][1], "NaN");
    assert!(rows[2][3].starts_with("CONFIG_ERROR"), "{:?}", rows[2]);
    assert!(rows[3][1].parse::<f64>().unwrap().is_finite());
}

#[test]
fn parallel_ablation_matches_sequential() {
    let (dir, _) = workspace();
    let d = dir.path();
    let base = [
        "ablate-n",
        "-c",
        "run.cfg",
        "--data",
        "data/synthetic.csv",
        "--n-list",
        "2,4",
        "--repeats",
        "1",
    ];
    let o = run(d, &[&base[..], &["--output-dir", "seq"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(d, &[&base[..], &["--output-dir", "par", "--parallel"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(d.join("seq/ablation.csv")).unwrap(),
        std::fs::read(d.join("par/ablation.csv")).unwrap()
    );
}

#[test]
fn generate_jsonlines() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "generate",
            "--kind",
            "ar1",
            "--length",
            "50",
            "--format",
            "jsonlines",
            "--output-dir",
            "g",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("g/synthetic.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(rec["values"].as_array().unwrap().len(), 50);
}
