use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use primed_core::cvae::{infer_substitute_confounders, CvaeModel};
use primed_core::experiment::{ResultRow, RunSummary};
use primed_core::metrics::MetricsReport;

fn primed(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primed"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) {
    let text = format!("{body}[cvae]\nepochs = 5\n[predictor]\nepochs = 8\n");
    fs::write(dir.join("exp.toml"), text).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn results(dir: &Path) -> Vec<ResultRow> {
    serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap()
}

#[test]
fn dnn_alone_on_unconfounded_data() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "methods = [\"dnn\"]\n[data.synth]\nrecords = 1000\ngamma = 0.0\n",
    );
    let o = primed(&["compare", "-c", "exp.toml", "-o", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = results(&tmp.path().join("run"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].auroc.unwrap() > 0.5);
    let csv = fs::read_to_string(tmp.path().join("run/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("dnn"));
}

#[test]
fn compare_outputs_are_complete_and_parse() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "methods = [\"dnn\", \"primed\"]\n[data.synth]\nrecords = 800\ngamma = 2.0\n",
    );
    let o = primed(&["compare", "-c", "exp.toml", "-o", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");

    let rows = results(&run);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].split_hash, rows[1].split_hash);
    for r in &rows {
        assert_eq!(r.status, "ok");
        assert!(r.auroc.is_some() && r.error.is_none());
        for a in &r.attributes {
            assert!(a.disparity.is_some() && a.tpr_gap.is_some() && a.fpr_gap.is_some());
        }
    }

    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    for f in &summary.files {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    for m in ["dnn", "primed"] {
        let report: MetricsReport =
            serde_json::from_str(&fs::read_to_string(run.join(format!("metrics/{m}.json"))).unwrap())
                .unwrap();
        let row = rows.iter().find(|r| r.method == m).unwrap();
        assert_eq!(Some(report.auroc), row.auroc);
        let scores = fs::read_to_string(run.join(format!("scores/{m}.csv"))).unwrap();
        assert_eq!(scores.lines().next().unwrap(), "record_id,score,label,s1");
        assert_eq!(scores.lines().count(), report.n + 1);
    }
    let log = fs::read_to_string(run.join("run.log")).unwrap();
    assert!(log.contains("compare finished"));
    assert!(!fs::read_to_string(run.join("results.csv")).unwrap().contains('['));
}

#[test]
fn saved_models_reproduce_their_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = primed(&["synth", "--records", "600", "--gamma", "2", "--seed", "4", "-o", "data.csv"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("data.truth.json").is_file());
    write_config(
        dir,
        "methods = [\"primed\"]\n[data.csv]\npath = \"data.csv\"\nsensitive = [\"s1\"]\nlabel = \"y\"\n",
    );
    let o = primed(&["train", "-c", "exp.toml", "-m", "primed", "-o", "run"], dir);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = primed(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoints/primed.json",
            "--cvae",
            "run/checkpoints/cvae.json",
            "--data",
            "data.csv",
            "-o",
            "eval",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let all: Vec<String> = fs::read_to_string(dir.join("eval/scores.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect();
    let test = fs::read_to_string(dir.join("run/scores/primed.csv")).unwrap();
    for line in test.lines().skip(1) {
        let id: usize = line.split(',').next().unwrap().parse().unwrap();
        let again = &all[id];
        assert_eq!(again.split_once(',').unwrap().1, line.split_once(',').unwrap().1);
    }

    let o = primed(
        &["evaluate", "--checkpoint", "run/checkpoints/primed.json", "--data", "data.csv", "-o", "e2"],
        dir,
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn exported_latents_match_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    primed(&["synth", "--records", "100", "--seed", "2", "-o", "data.csv"], dir);
    write_config(
        dir,
        "methods = [\"primed\"]\n[data.csv]\npath = \"data.csv\"\nsensitive = [\"s1\"]\nlabel = \"y\"\n",
    );
    let o = primed(&["compare", "-c", "exp.toml", "-o", "run"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let args = ["export-latent", "--checkpoint", "run/checkpoints/cvae.json", "--data", "data.csv", "-o"];
    for out in ["a.csv", "b.csv"] {
        let mut a = args.to_vec();
        a.push(out);
        let o = primed(&a, dir);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(dir.join("a.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(dir.join("b.csv")).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 101);
    assert!(lines.iter().all(|l| l.split(',').count() == 1 + 8 + 1));

    let (model, meta) = CvaeModel::load(&dir.join("run/checkpoints/cvae.json")).unwrap();
    let data = meta.context.unwrap().load_csv(&dir.join("data.csv"), Default::default()).unwrap();
    let z = infer_substitute_confounders(&model, &data.encode()).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let values: Vec<f64> = line.split(',').skip(1).take(8).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.as_slice(), z.row(i));
    }
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("bad.toml"),
        "methods = [\"dnn\", \"svm\"]\n[data.synth]\n[split]\ntrain = 0.8\nvalidation = 0.3\ntest = 0.1\n",
    )
    .unwrap();
    let o = primed(&["validate", "-c", "bad.toml"], dir);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("split: train + validation + test must sum to 1, got 1.2"), "{err}");
    assert!(err.contains("valid methods: primed, dnn, reweighting, stage1, stage2"), "{err}");

    fs::write(dir.join("noseeds.toml"), "[data.synth]\n[pilot]\nseeds = []\n").unwrap();
    let o = primed(&["pilot", "-c", "noseeds.toml", "-o", "p"], dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.join("p").exists());

    let o = primed(&["validate", "-c", "missing.toml"], dir);
    assert_eq!(o.status.code(), Some(1));
    let o = primed(&["frobnicate"], dir);
    assert_eq!(o.status.code(), Some(1));

    fs::write(dir.join("ok.toml"), "[data.synth]\n").unwrap();
    let o = primed(&["validate", "-c", "ok.toml"], dir);
    assert!(o.status.success());
    let shown = String::from_utf8_lossy(&o.stdout);
    assert!(shown.contains("learning_rate = 0.0001"), "{shown}");
    assert!(shown.contains("train = 0.7"));
}

#[test]
fn runtime_failures_exit_with_two_and_keep_partial_results() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(
        dir,
        "[data.csv]\npath = \"absent.csv\"\nsensitive = [\"g\"]\nlabel = \"y\"\n",
    );
    let o = primed(&["compare", "-c", "exp.toml", "-o", "run"], dir);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let mut csv = String::from("x1,g,y\n");
    for i in 0..60 {
        csv.push_str(&format!("{},{},{}\n", i as f64 / 10.0, if i % 2 == 0 { "a" } else { "b" }, i % 2));
    }
    fs::write(dir.join("split.csv"), csv).unwrap();
    write_config(
        dir,
        "methods = [\"dnn\", \"reweighting\"]\n[data.csv]\npath = \"split.csv\"\nsensitive = [\"g\"]\nlabel = \"y\"\n",
    );
    let o = primed(&["compare", "-c", "exp.toml", "-o", "run2"], dir);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("method `reweighting`"), "{}", stderr(&o));
    let rows = results(&dir.join("run2"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].status, "ok");
    assert_eq!(rows[1].status, "failed");
    assert!(fs::read_to_string(dir.join("run2/table.txt")).unwrap().contains("FAILED"));
}
