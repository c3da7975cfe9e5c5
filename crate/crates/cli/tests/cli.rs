use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/tiny.toml");

fn repcount(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repcount"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_workflow_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", TINY];
        all.extend_from_slice(args);
        repcount(&all, d)
    };

    let o = run(&["synth", "--dataset", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("train 6"));
    assert!(d.join("data/manifest.jsonl").is_file());

    let o = run(&["train", "--dataset", "data", "--weights-dir", "run", "--stage", "reliability"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));

    let o = run(&["train", "--dataset", "data", "--weights-dir", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sight.json", "sound.json", "stride.json", "gate.json", "run.json", "config.toml"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }

    let o = run(&["evaluate", "--dataset", "data", "--weights-dir", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("mae[low_resolution]"));
    assert!(d.join("run/report.json").is_file());

    let o = run(&["infer", "--dataset", "data", "--weights-dir", "run", "--fixed-stride", "2", "--no-audio"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().all(|l| l.contains("stride 2") && l.contains("gamma 0.000")));

    let o = run(&["infer", "--dataset", "data", "--weights-dir", "run", "--gamma-override", "1", "--split", "val"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().all(|l| l.contains("gamma 1.000")));

    let o = repcount(&["report", "--weights-dir", "run"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("TrainReliability"));

    // the config written into the run directory loads back
    let o = repcount(&["--config", "run/config.toml", "report", "--weights-dir", "run"], d);
    assert_eq!(code(&o), 0);

    assert_eq!(code(&run(&["infer", "--dataset", "data", "--weights-dir", "run", "--gamma-override", "1.5"])), 2);
    assert_eq!(code(&run(&["train", "--dataset", "data", "--weights-dir", "run", "--stage", "bogus"])), 2);
    assert_eq!(code(&repcount(&["--config", "absent.toml", "synth", "--dataset", "x"], d)), 2);
    assert_eq!(code(&run(&["evaluate", "--dataset", "nowhere", "--weights-dir", "run"])), 4);
    assert_eq!(code(&repcount(&["report", "--weights-dir", "nothing-here"], d)), 3);

    std::fs::write(d.join("data/manifest.jsonl"), "{\"video_id\": 3}\n").unwrap();
    assert_eq!(code(&run(&["evaluate", "--dataset", "data", "--weights-dir", "run"])), 4);
}
