use std::path::Path;
use std::process::{Command, Output};

fn lorat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn lorat")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lorat(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(lorat(dir.path(), &["bench", "--workers", "many"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = lorat(dir.path(), &["track"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--annotations"));
    std::fs::write(dir.path().join("bad.cfg"), "colour = red\n").unwrap();
    assert_eq!(lorat(dir.path(), &["--config", "bad.cfg", "selftest"]).status.code(), Some(1));
}

#[test]
fn synth_bench_track_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = lorat(d, &["--seed", "2", "--out", "data", "synth", "--count", "3", "--frames", "5", "--size", "96", "--static"]);
    assert!(o.status.success(), "{o:?}");
    let ann = "data/annotations.jsonl";

    let o = lorat(d, &["--annotations", ann, "--out", "b1", "--workers", "1", "bench"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("dummy-static  1.000"), "{}", stdout(&o));
    let o = lorat(d, &["--annotations", ann, "--out", "b4", "--workers", "4", "bench"]);
    assert!(o.status.success());
    let json = |p: &str| std::fs::read_to_string(d.join(p).join("bench.json")).unwrap();
    assert_eq!(json("b1"), json("b4"));
    let cfg = std::fs::read_to_string(d.join("b1/run_config.txt")).unwrap();
    assert!(cfg.starts_with("# fingerprint "));

    let o = lorat(d, &["--annotations", ann, "--out", "t", "track"]);
    assert!(o.status.success(), "{o:?}");
    let o = lorat(d, &["--annotations", ann, "eval", "--predictions", "t/predictions.jsonl"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().last().unwrap().starts_with("average IoU "));
}

#[test]
fn finetune_writes_loadable_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(lorat(d, &["--out", "data", "synth", "--count", "2", "--frames", "4", "--size", "96"]).status.success());
    let o = lorat(
        d,
        &["--annotations", "data/annotations.jsonl", "--lora-rank", "2", "--out", "ft", "finetune", "--steps", "2", "--batch", "2", "--eval-every", "0"],
    );
    assert!(o.status.success(), "{o:?}");
    let o = lorat(
        d,
        &["--annotations", "data/annotations.jsonl", "--lora-rank", "2", "--weights", "ft/adapters.lorat", "--out", "t", "track"],
    );
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn convert_reads_got10k_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("GOT-10k_Train_000001");
    std::fs::create_dir(&seq).unwrap();
    std::fs::write(seq.join("groundtruth.txt"), "1,2,3,4\n2,3,4,5\n").unwrap();
    let o = lorat(dir.path(), &["--out", "ann.jsonl", "convert", "GOT-10k_Train_000001"]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(dir.path().join("ann.jsonl")).unwrap();
    assert!(text.contains("GOT-10k_Train_000001"));
}
