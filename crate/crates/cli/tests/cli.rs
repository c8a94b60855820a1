use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config(out: &Path) -> Value {
    json!({
        "output_dir": out,
        "seeds": [0],
        "data": {"synth": {"spec": {
            "source_size": 60, "target_size": 40, "validation_size": 20, "test_size": 20
        }}},
        "train": {
            "n_per_class": 5,
            "teacher": {"layers": 1, "hidden": 16, "heads": 2, "ffn": 32},
            "student": {"layers": 1, "hidden": 8, "heads": 2, "ffn": 16},
            "generator": {"layers": 1, "hidden": 16, "heads": 2, "ffn": 32},
            "teacher_train": {"epochs": 1, "batch_size": 16},
            "student_train": {"epochs": 1, "batch_size": 8},
            "generator_train": {"epochs": 1, "batch_size": 16},
            "distill": {"epochs": 1, "batch_size": 16},
            "sampler": {"n_target": 2}
        },
        "dump_augmented": true
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn l2a(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2a"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = l2a(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single `<command>/<hash>/<seed>` directory a command printed.
fn artifact(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().next().expect("a printed path"))
}

#[test]
fn staged_pipeline_writes_the_documented_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(&out));
    let cfg = cfg.to_str().unwrap();

    let synth = artifact(&ok(&["synth-data", "-c", cfg]));
    for f in ["source", "target", "validation", "test"] {
        assert!(synth.join(format!("{f}.jsonl")).is_file());
    }
    let gen = artifact(&ok(&["pretrain-generator", "-c", cfg]));
    assert!(gen.join("generator.ckpt").is_file());
    assert!(gen.starts_with(out.join("pretrain-generator")));
    assert!(gen.ends_with("0"));
    ok(&["train-teacher", "-c", cfg]);
    ok(&["train-student", "-c", cfg]);
    let kd = artifact(&ok(&["distill", "-c", cfg, "--no-aug"]));
    let kd_csv = fs::read_to_string(kd.join("metrics.csv")).unwrap();
    assert!(kd_csv.starts_with("step,epoch,l_att,l_hidden,l_dark,l_kd,"));
    let aug = artifact(&ok(&["distill", "-c", cfg]));
    assert_ne!(aug, kd);
    let l2a_dir = artifact(&ok(&["distill-l2a", "-c", cfg]));
    for f in ["student.ckpt", "generator.ckpt", "policy.ckpt", "metrics.csv", "meta.json"] {
        assert!(l2a_dir.join(f).is_file(), "{f}");
    }
    let dump = fs::read_to_string(l2a_dir.join("augmented.jsonl")).unwrap();
    let line: Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    for k in ["text", "label", "domain", "d", "log_ps", "origin_index"] {
        assert!(line.get(k).is_some(), "{k}");
    }
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(l2a_dir.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 0);
    assert_eq!(
        meta["config_hash"].as_str().unwrap(),
        l2a_dir.parent().unwrap().file_name().unwrap().to_str().unwrap()
    );

    let eval = ok(&["evaluate", "-c", cfg]);
    let report_dir = artifact(&eval);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap())
            .unwrap();
    for k in ["task", "seeds", "student_ft", "kd_noaug", "l2a", "teacher_ft", "param_counts"] {
        assert!(report.get(k).is_some(), "{k}");
    }
    assert!(report["param_counts"]["ratio"].as_f64().unwrap() > 1.0);

    let agg = tmp.path().join("agg");
    let table = ok(&["aggregate", "-o", agg.to_str().unwrap(), report_dir.to_str().unwrap()]);
    assert_eq!(table.lines().count(), 8, "{table}");
    assert!(agg.join("aggregate.csv").is_file());
    assert!(agg.join("aggregate.dat").is_file());
}

#[test]
fn run_reuses_stages_and_jsonl_data_works() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(&out));
    let synth = artifact(&ok(&["synth-data", "-c", cfg.to_str().unwrap()]));

    // Same splits read back from disk, with paths relative to the config.
    let mut v = tiny_config(&tmp.path().join("out2"));
    let rel = synth.strip_prefix(tmp.path()).unwrap();
    v["data"] = json!({"jsonl": {
        "source": rel.join("source.jsonl"), "target": rel.join("target.jsonl"),
        "validation": rel.join("validation.jsonl"), "test": rel.join("test.jsonl")
    }});
    let cfg2 = write_config(tmp.path(), "c2.json", &v);
    let first = ok(&["run", "-c", cfg2.to_str().unwrap()]);
    let run_dir = artifact(&first);
    assert!(run_dir.join("report.json").is_file());
    let second = ok(&["run", "-c", cfg2.to_str().unwrap()]);
    assert_eq!(first, second);
}

#[test]
fn repeated_commands_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let cfg = write_config(
            tmp.path(),
            &format!("{run}.json"),
            &tiny_config(&tmp.path().join(run)),
        );
        let cfg = cfg.to_str().unwrap();
        ok(&["pretrain-generator", "-c", cfg]);
        ok(&["train-teacher", "-c", cfg]);
        let d = artifact(&ok(&["distill-l2a", "-c", cfg, "--wo-src"]));
        csvs.push((
            d.strip_prefix(tmp.path().join(run)).unwrap().to_path_buf(),
            fs::read(d.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn schema_violation_exits_1_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_config(&tmp.path().join("out"));
    v["train"]["kd"] = json!({"temperature": "warm"});
    let cfg = write_config(tmp.path(), "bad.json", &v);
    let o = l2a(&["train-teacher", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.kd.temperature"), "{}", stderr(&o));

    v["train"]["kd"] = json!({"temprature": 2.0});
    let cfg = write_config(tmp.path(), "bad2.json", &v);
    let o = l2a(&["train-teacher", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("temprature"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(l2a(&["distill-l2a", "--wo-everything"]).status.code(), Some(1));
    assert_eq!(l2a(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(l2a(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dependency_exits_2_naming_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(&tmp.path().join("out")));
    let o = l2a(&["distill", "-c", cfg.to_str().unwrap(), "--no-aug"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `train-teacher` first"), "{}", stderr(&o));

    let o = l2a(&["evaluate", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train-student"), "{}", stderr(&o));
}

#[test]
fn aggregate_lists_missing_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let gone = tmp.path().join("never-ran");
    let o = l2a(&[
        "aggregate",
        "-o",
        tmp.path().to_str().unwrap(),
        gone.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("never-ran"), "{}", stderr(&o));
}

#[test]
fn ablation_flag_and_config_edit_share_a_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &tiny_config(&out));
    ok(&["pretrain-generator", "-c", cfg.to_str().unwrap()]);
    ok(&["train-teacher", "-c", cfg.to_str().unwrap()]);
    let flagged = artifact(&ok(&["distill-l2a", "-c", cfg.to_str().unwrap(), "--wo-dark"]));
    let mut v = tiny_config(&out);
    v["train"]["kd"] = json!({"dark": false});
    let edited_cfg = write_config(tmp.path(), "e.json", &v);
    let edited = artifact(&ok(&["distill-l2a", "-c", edited_cfg.to_str().unwrap()]));
    assert_eq!(flagged, edited);
    let full = artifact(&ok(&["distill-l2a", "-c", cfg.to_str().unwrap()]));
    assert_ne!(full, flagged);
}
