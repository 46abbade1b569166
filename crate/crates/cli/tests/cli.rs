use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--task",
    "classification",
    "--set",
    "data.sizes=8,10,12",
    "--rounds",
    "3",
    "--extra-rounds",
    "2",
    "--repeats",
    "1",
];

fn fedsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn output_dir(o: &Output) -> PathBuf {
    let s = stdout(o);
    let line = s.lines().find_map(|l| l.strip_prefix("output: ")).expect("output line");
    PathBuf::from(line)
}

fn with_small<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

fn run_ok(args: &[&str]) -> Output {
    let o = fedsm(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        }
        out.push(p);
    }
    out
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let bad_lambda = fedsm(&with_small(&["train", "--out", out], &["--lambda", "1.5"]));
    assert_eq!(bad_lambda.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_lambda.stderr).contains("lambda"));
    assert_eq!(fedsm(&["train", "--set", "no.such.key=1"]).status.code(), Some(2));
    assert_eq!(fedsm(&["train", "--set", "rounds"]).status.code(), Some(2));

    let missing = tmp.path().join("missing.feds");
    let o = fedsm(&with_small(&["train", "--out", out, "--dataset", missing.to_str().unwrap()], &[]));
    assert_eq!(o.status.code(), Some(2));

    let corrupt = tmp.path().join("corrupt.feds");
    std::fs::write(&corrupt, b"FEDS\x01garbage").unwrap();
    let o = fedsm(&with_small(&["train", "--out", out, "--dataset", corrupt.to_str().unwrap()], &[]));
    assert_eq!(o.status.code(), Some(2));

    // Divergence is only detected while training.
    let diverge = [
        "train", "--out", out, "--algo", "fedavg", "--task", "quadratic", "--rounds", "4", "--repeats", "1", "--lr", "1e300",
    ];
    let o = fedsm(&diverge);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let failed: Vec<_> = walk(tmp.path()).into_iter().filter(|p| p.ends_with("FAILED")).collect();
    assert_eq!(failed.len(), 1);
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let a = output_dir(&run_ok(&with_small(&["train", "--out", out, "--algo", "fedsm"], &["--threads", "1"])));
    let b = output_dir(&run_ok(&with_small(&["train", "--out", out, "--algo", "fedsm"], &["--threads", "3"])));
    assert_ne!(a, b);
    let run = "run_1_seed_0";
    for f in ["rounds.csv", "bundle/global.bin", "bundle/selector.bin", "bundle/personalized_2.bin"] {
        assert_eq!(read(&a.join(run).join(f)), read(&b.join(run).join(f)), "{f}");
    }
    let rounds = String::from_utf8(read(&a.join(run).join("rounds.csv"))).unwrap();
    assert!(rounds.starts_with("round,"));
    assert!(a.join("config.txt").exists() && a.join("metrics.json").exists());
}

#[test]
fn generated_dataset_feeds_training_and_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let feds = tmp.path().join("fed.feds");
    let feds = feds.to_str().unwrap();
    run_ok(&with_small(&["gen-data", "-o", feds], &[]));
    assert_eq!(&read(Path::new(feds))[..4], b"FEDS");

    let dir = output_dir(&run_ok(&with_small(&["train", "--out", out, "--dataset", feds], &[])));
    let bundle = dir.join("run_1_seed_0/bundle");
    let bundle = bundle.to_str().unwrap();
    let global_only = stdout(&run_ok(&with_small(
        &["infer", "--dataset", feds, "--bundle", bundle, "--gamma", "1"],
        &[],
    )));
    assert!(global_only.contains("client_avg"));
    let freq = global_only
        .lines()
        .find_map(|l| l.strip_prefix("selection frequencies (global, personalized 1..K): "))
        .unwrap();
    assert!(freq.starts_with("1.0000"), "{freq}");

    let bad = tmp.path().join("nope");
    let o = fedsm(&with_small(
        &["infer", "--dataset", feds, "--bundle", bad.to_str().unwrap()],
        &[],
    ));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn baselines_and_sweeps_write_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for method in ["local", "ft", "apfl"] {
        let dir = output_dir(&run_ok(&with_small(&["baseline", "--method", method, "--out", out], &[])));
        assert!(dir.join("run_1_seed_0/cross_eval.csv").exists(), "{method}");
    }
    let dir = output_dir(&run_ok(&with_small(&["sweep-gamma", "--out", out, "--values", "0,1"], &[])));
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("gamma,client_avg,global"));
    assert_eq!(summary.lines().count(), 3);
    let dir = output_dir(&run_ok(&with_small(&["sweep-lambda", "--out", out, "--values", "0.5,0.9"], &[])));
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("lambda,client_avg,global"));
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn analysis_commands_run_on_quadratic_clients() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("analysis");
    let dir = dir.to_str().unwrap();
    let quad = ["--task", "quadratic", "--set", "data.sizes=8,10,12", "--rounds", "20", "--lr", "0.2"];
    let args = |extra: &[&'static str]| -> Vec<String> {
        let mut v: Vec<String> = vec!["analyze".into(), "--dir".into(), dir.into()];
        v.extend(quad.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let call = |extra: &[&'static str]| {
        let a = args(extra);
        run_ok(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let theorem = stdout(&call(&["theorem", "--lambdas", "1.0,0.7"]));
    assert!(theorem.contains("tail average"));
    let oracle = stdout(&call(&["oracle"]));
    assert!(oracle.contains("discrepancy"));
    let surface = stdout(&call(&["surface", "--dirs", "2", "--steps", "5"]));
    assert!(surface.contains("profile"));
    assert!(std::fs::read_dir(dir).unwrap().count() >= 3);

    let unseen_dir = tmp.path().join("unseen");
    let o = run_ok(&with_small(
        &["unseen", "--held-out", "2", "--gammas", "0,1", "--dir", unseen_dir.to_str().unwrap()],
        &[],
    ));
    assert!(stdout(&o).contains("gamma 1: global frequency 1.0000"));
}
