use std::ffi::OsString;
use std::path::Path;
use std::process::Command;

use unisiam::cli::{main_with, train_outputs};
use unisiam::{fsds, usia};

const SMALL: &[&str] = &[
    "world.classes=20",
    "world.per_class=30",
    "world.dim=12",
    "world.latent=4",
    "train.epochs=2",
    "train.batch=16",
    "train.hidden=24",
    "train.embed=16",
    "train.eval_every=1",
    "train.rank_samples=32",
    "eval.episodes=40",
    "eval.queries=5",
];

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Outcome {
    let mut argv: Vec<OsString> = vec!["unisiam".into()];
    argv.extend(args.iter().map(OsString::from));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(argv, &mut out, &mut err);
    Outcome { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn small(cmd: &str, dir: &Path, extra: &[&str]) -> Outcome {
    let mut args = vec![cmd.to_string()];
    for s in SMALL {
        args.push("--set".into());
        args.push(s.to_string());
    }
    for (k, v) in [("eval.out", "episodes.csv"), ("mi.out", "mi.csv")] {
        args.push("--set".into());
        args.push(format!("{}={}", k, dir.join(v).display()));
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn config_block(out: &str) -> String {
    out.lines().filter(|l| l.contains(" = ")).map(|l| format!("{}\n", l)).collect()
}

fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

fn summary(out: &str) -> (f64, f64, usize) {
    let line = out.lines().last().unwrap();
    let f: Vec<&str> = line.split(',').collect();
    (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).code, 0);
    assert_eq!(run(&["--version"]).code, 0);
    assert!(run(&["eval", "--help"]).out.contains("--shuffled"));
}

#[test]
fn unknown_flag_is_a_config_error() {
    let o = run(&["eval", "--bogus", "3"]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("--bogus"), "{}", o.err);
}

#[test]
fn unknown_config_key_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.conf");
    std::fs::write(&p, "# comment\ntrain.epochs = 3\ntrain.epoks = 4\n").unwrap();
    let o = run(&["--config", p.to_str().unwrap(), "eval"]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("train.epoks") && o.err.contains('3'), "{}", o.err);
}

#[test]
fn out_of_range_values_are_rejected() {
    for a in ["eval.power=0", "train.batch=1", "train.regime=sgd", "world.split=10,5", "mi.ema_decay=1"] {
        let o = run(&["--set", a, "eval"]);
        assert_eq!(o.code, 1, "{}", a);
    }
    assert_eq!(run(&["--set", "novalue", "eval"]).code, 1);
}

#[test]
fn missing_input_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.usia");
    let o = small("eval", dir.path(), &["--ckpt", missing.to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("nope.usia"), "{}", o.err);
}

#[test]
fn corrupt_checkpoint_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.usia");
    std::fs::write(&p, b"USIA\x01\x00\x00\x00\x05").unwrap();
    let o = small("eval", dir.path(), &["--ckpt", p.to_str().unwrap()]);
    assert_eq!(o.code, 2);
    assert!(o.err.contains("byte 8") && o.err.contains("truncated"), "{}", o.err);
}

#[test]
fn distill_requires_a_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("distill", dir.path(), &["--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("teacher"), "{}", o.err);
}

#[test]
fn printed_configuration_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let first = small("pretrain", dir.path(), &["--seed", "7", "--out", a.to_str().unwrap()]);
    assert_eq!(first.code, 0, "{}", first.err);
    assert!(first.out.starts_with("# resolved configuration\n"));
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, config_block(&first.out)).unwrap();

    let b = dir.path().join("b");
    let second = run(&["--config", conf.to_str().unwrap(), "--set", &format!("train.out={}", b.display()), "pretrain"]);
    assert_eq!(second.code, 0, "{}", second.err);
    assert_eq!(
        config_block(&first.out).replace(a.to_str().unwrap(), "X"),
        config_block(&second.out).replace(b.to_str().unwrap(), "X")
    );

    let (ca, la) = train_outputs(&a);
    let (cb, lb) = train_outputs(&b);
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    let (la, lb) = (std::fs::read_to_string(la).unwrap(), std::fs::read_to_string(lb).unwrap());
    assert_eq!(la.lines().next().unwrap(), "epoch,total,alignment,uniformity,lr,effective_rank,wall_time");
    assert_eq!(la.lines().count(), 3);
    assert_eq!(without_wall_time(&la), without_wall_time(&lb));

    let c = dir.path().join("c");
    let third = small("pretrain", dir.path(), &["--seed", "8", "--out", c.to_str().unwrap()]);
    assert_eq!(third.code, 0);
    assert_ne!(std::fs::read(&ca).unwrap(), std::fs::read(train_outputs(&c).0).unwrap());
}

#[test]
fn trained_checkpoint_feeds_eval_diag_and_distill() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    assert_eq!(small("pretrain", dir.path(), &["--out", t.to_str().unwrap()]).code, 0);
    let ckpt = train_outputs(&t).0;
    let ck = ckpt.to_str().unwrap();

    let e = small("eval", dir.path(), &["--ckpt", ck]);
    assert_eq!(e.code, 0, "{}", e.err);
    let (mean, ci, n) = summary(&e.out);
    assert_eq!(n, 40);
    assert!((0.0..=1.0).contains(&mean) && ci > 0.0);
    let per = std::fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
    assert_eq!(per.lines().count(), 41);

    let spec = dir.path().join("spec.csv");
    let svg = dir.path().join("spec.svg");
    let d = small("diag", dir.path(), &["--ckpt", ck, "--out", spec.to_str().unwrap(), "--svg", svg.to_str().unwrap()]);
    assert_eq!(d.code, 0, "{}", d.err);
    let er: f64 = d.out.lines().last().unwrap().strip_prefix("effective_rank,").unwrap().parse().unwrap();
    assert!((1.0..=128.0).contains(&er), "{}", er);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    assert_eq!(std::fs::read_to_string(&spec).unwrap().lines().next().unwrap(), "k,sigma,log10_sigma,sigma_rel");

    let s = dir.path().join("s");
    let o = small("distill", dir.path(), &["--teacher", ck, "--alpha", "0.5", "--out", s.to_str().unwrap()]);
    assert_eq!(o.code, 0, "{}", o.err);
    let student = usia::load(&train_outputs(&s).0).unwrap();
    assert!(student.dist().is_some());
    assert_eq!(usia::load(&ckpt).unwrap(), usia::load(&ckpt).unwrap());
}

#[test]
fn generated_data_matches_synthetic_split() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("test.fsds");
    let g = small("gen-data", dir.path(), &["--split", "test", "--out", f.to_str().unwrap()]);
    assert_eq!(g.code, 0, "{}", g.err);
    // 5 classes x 30 samples x 12 dims, labeled.
    assert_eq!(std::fs::metadata(&f).unwrap().len() as usize, 17 + 150 * 12 * 4 + 150 * 4);
    let ds = fsds::read(&f).unwrap();
    assert_eq!(ds.labels.as_ref().unwrap().len(), 150);

    let synthetic = small("eval", dir.path(), &[]);
    let from_file = small("eval", dir.path(), &["--data", f.to_str().unwrap()]);
    assert_eq!(from_file.code, 0, "{}", from_file.err);
    assert_eq!(summary(&synthetic.out), summary(&from_file.out));

    let u = dir.path().join("all.fsds");
    assert_eq!(small("gen-data", dir.path(), &["--no-labels", "--out", u.to_str().unwrap()]).code, 0);
    assert_eq!(std::fs::metadata(&u).unwrap().len() as usize, 17 + 600 * 12 * 4);
    let o = small("eval", dir.path(), &["--data", u.to_str().unwrap()]);
    assert_eq!(o.code, 1, "{}", o.err);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let one = small("eval", dir.path(), &["--workers", "1"]);
    let four = small("eval", dir.path(), &["--workers", "4"]);
    assert_eq!(summary(&one.out), summary(&four.out));
    let m1 = small("mi-bench", dir.path(), &["--workers", "1", "--rho", "0.2:0.6:0.4", "--steps", "30", "--seeds", "2"]);
    let m4 = small("mi-bench", dir.path(), &["--workers", "3", "--rho", "0.2:0.6:0.4", "--steps", "30", "--seeds", "2"]);
    assert_eq!(m1.code, 0, "{}", m1.err);
    let csv = |o: &Outcome| o.out.lines().filter(|l| !l.contains(" = ") && !l.starts_with('#')).map(String::from).collect::<Vec<_>>();
    assert_eq!(csv(&m1), csv(&m4));
    assert_eq!(csv(&m1)[0], "rho,true_mi,est_nce,est_mine,batch,steps,seed");
    assert_eq!(csv(&m1).len(), 5);
}

#[test]
fn shuffled_labels_sit_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("eval", dir.path(), &["--shuffled", "--episodes", "200"]);
    let (mean, _, _) = summary(&o.out);
    assert!((mean - 0.2).abs() < 0.06, "{}", mean);
}

#[test]
fn divergence_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let o = small("pretrain", dir.path(), &["--regime", "supervised", "--lr", "1e30", "--out", d.to_str().unwrap()]);
    assert_eq!(o.code, 2, "{}", o.err);
    assert!(o.err.contains("diverge"), "{}", o.err);
    let (ckpt, log) = train_outputs(&d);
    assert!(!ckpt.exists());
    assert!(log.exists());
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_unisiam");
    assert_eq!(Command::new(bin).arg("--help").status().unwrap().code(), Some(0));
    assert_eq!(Command::new(bin).args(["eval", "--bogus"]).status().unwrap().code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("x.usia");
    std::fs::write(&bad, b"NOPE").unwrap();
    let out = Command::new(bin)
        .args(["eval", "--episodes", "5", "--ckpt", bad.to_str().unwrap()])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}
