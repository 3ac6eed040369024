use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualsep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualsep")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "train_count = 8\ntest_count = 3\nsize = 16\nsteps = 10\nbatch_size = 2\n\
max_iterations = 3\nval_interval = 2\nval_count = 1\nseed = 4\n";

#[test]
fn make_dataset_writes_corpus_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), "train = 10\ntest = 4\nkind = \"rain-toy\"\n").unwrap();
    for out in ["a", "b"] {
        let o = dualsep(&["make-dataset", "--spec", "spec.toml", "--out", out], d);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("kind = \"rain-toy\""));
    }
    let names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.iter().filter(|n| n.to_string_lossy().ends_with(".ppm")).count(), 42);
    assert_eq!(fs::read_to_string(d.join("a/manifest.tsv")).unwrap().lines().count(), 14);
    for n in names {
        assert_eq!(fs::read(d.join("a").join(&n)).unwrap(), fs::read(d.join("b").join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dualsep(&["make-dataset", "--out", "x", "--set", "size=31"], d).status.code(), Some(2));
    assert_eq!(dualsep(&["no-such-command"], d).status.code(), Some(1));
    assert_eq!(dualsep(&["train"], d).status.code(), Some(1));
    assert_eq!(dualsep(&["train", "--out", "c", "--set", "gamma=0"], d).status.code(), Some(2));
    assert_eq!(dualsep(&["train", "--out", "c", "--set", "nonsense=1"], d).status.code(), Some(2));
    assert_eq!(dualsep(&["gradcheck", "--target", "nothing"], d).status.code(), Some(2));
    // a step far too large for central differences fails the check
    assert_eq!(dualsep(&["gradcheck", "--target", "wfca", "--h", "0.5"], d).status.code(), Some(3));
    let help = dualsep(&["--help"], d);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&dualsep(&["gradcheck", "--help"], dir.path()));
    assert!(text.contains("--tolerance") && text.contains("[default: 0.0001]"), "{text}");
    assert!(text.contains("[default: all]"));
    let text = stdout(&dualsep(&["evaluate", "--help"], dir.path()));
    assert!(text.contains("[default: full]"));
}

#[test]
fn gradcheck_wfen_reports_error_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualsep(&["gradcheck", "--target", "wfen"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("max rel err") && text.contains("PASS"), "{text}");
}

#[test]
fn train_separate_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), TINY).unwrap();
    let o = dualsep(&["train", "--config", "cfg.toml", "--out", "run.ckpt"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("# seed 4") && text.contains("max_iterations = 3"));
    assert!(text.contains("val 2 psnr"));

    // identical reruns produce identical checkpoints
    assert_eq!(dualsep(&["train", "--config", "cfg.toml", "--out", "again.ckpt"], d).status.code(), Some(0));
    assert_eq!(fs::read(d.join("run.ckpt")).unwrap(), fs::read(d.join("again.ckpt")).unwrap());

    let spec = "train = 8\ntest = 3\nsize = 16\n";
    fs::write(d.join("spec.toml"), spec).unwrap();
    assert_eq!(dualsep(&["make-dataset", "--spec", "spec.toml", "--out", "ds"], d).status.code(), Some(0));

    let sep =
        ["separate", "--ckpt", "run.ckpt", "--input", "ds/test-00000-mix.ppm", "--out1", "o1.ppm", "--out2", "o2.ppm"];
    assert_eq!(dualsep(&sep, d).status.code(), Some(0));
    let first = fs::read(d.join("o1.ppm")).unwrap();
    assert_eq!(dualsep(&sep, d).status.code(), Some(0));
    assert_eq!(fs::read(d.join("o1.ppm")).unwrap(), first);

    let o = dualsep(&["evaluate", "--ckpt", "run.ckpt", "--corpus", "ds", "--csv", "m.csv", "--config", "cfg.toml"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mixture baseline PSNR"));
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);

    // a different config is refused unless forced
    fs::write(d.join("other.toml"), format!("{TINY}gamma = 5.0\n")).unwrap();
    let args = ["evaluate", "--ckpt", "run.ckpt", "--corpus", "ds", "--config", "other.toml", "--limit", "1"];
    let o = dualsep(&args, d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(dualsep(&forced, d).status.code(), Some(0));

    // a corrupt checkpoint is a validation error
    fs::write(d.join("bad.ckpt"), b"garbage").unwrap();
    let bad =
        ["separate", "--ckpt", "bad.ckpt", "--input", "ds/test-00000-mix.ppm", "--out1", "a.ppm", "--out2", "b.ppm"];
    assert_eq!(dualsep(&bad, d).status.code(), Some(2));
}

#[test]
fn ablate_emits_table_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), format!("{TINY}eval_count = 1\n")).unwrap();
    let o = dualsep(
        &["ablate", "--config", "cfg.toml", "--seeds", "1,2", "--out", "res", "--gammas", "1,3", "--alphas", "0,5"],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("seeds: 1, 2") && text.contains("IV"));
    for f in ["ablation.csv", "gamma_sweep.csv", "alpha_sweep.csv"] {
        assert!(d.join("res").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("res/gamma_sweep.csv")).unwrap().lines().count(), 1 + 2 * 2);
}
