use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "epochs=2",
    "--set", "init_channels=4",
    "--set", "depth=2",
    "--set", "pyramid_scales=1,2",
];

fn wsseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsseg")).arg("-q").args(args).output().expect("spawn wsseg")
}

fn ok(args: &[&str]) -> Output {
    let out = wsseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root` keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--out", s(dir), "--n", "10", "--size", "32", "--k", "3", "--subsets", "2"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_is_reproducible_and_seeded() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    gen(&a, &[]);
    gen(&b, &[]);
    gen(&c, &["--seed", "1"]);
    let ta = tree(&a);
    assert!(ta.contains_key(Path::new("subset1.manifest")));
    assert!(ta.keys().any(|k| k.starts_with("ovals")));
    assert_eq!(ta, tree(&b));
    assert_ne!(ta[Path::new("images/000.pfm")], tree(&c)[Path::new("images/000.pfm")]);
}

#[test]
fn no_corruption_writes_no_ovals() {
    let t = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", s(t.path()), "--n", "6", "--size", "32", "--k", "0", "--subsets", "1"]);
    assert!(fs::read_dir(t.path().join("ovals")).unwrap().next().is_none());
    let m = fs::read_to_string(t.path().join("subset0.manifest")).unwrap();
    assert!(!m.contains("oval"), "{m}");
}

fn read_pfm(p: &Path) -> Vec<f32> {
    wsseg::imaging::read_pfm(p).unwrap().data().to_vec()
}

#[test]
fn weight_maps_square_under_power_two_and_rerun_identically() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), &[]);
    let manifest = t.path().join("subset0.manifest");
    let m1 = t.path().join("p1.manifest");
    let m2 = t.path().join("p2.manifest");
    for model in ["moi1", "moi2"] {
        ok(&["weights", "--manifest", s(&manifest), "--model", model, "--out-manifest", s(&m1)]);
        let first = tree(&t.path().join("weights"));
        ok(&["weights", "--manifest", s(&manifest), "--model", model, "--out-manifest", s(&m1)]);
        assert_eq!(first, tree(&t.path().join("weights")));
        ok(&["weights", "--manifest", s(&manifest), "--model", model, "--power", "2", "--out-manifest", s(&m2)]);

        let dir = t.path().join("weights");
        let one = dir.join(format!("subset0-{model}-n1"));
        let two = dir.join(format!("subset0-{model}-n2"));
        let mut below_one = 0;
        for e in fs::read_dir(&one).unwrap() {
            let name = e.unwrap().file_name();
            let a = read_pfm(&one.join(&name));
            let b = read_pfm(&two.join(&name));
            for (x, y) in a.iter().zip(&b) {
                assert!(*x > 0.0 && *x <= 1.0);
                assert_eq!(*y, x * x);
                below_one += usize::from(*x < 1.0);
            }
        }
        assert!(below_one > 0, "no oval pixel was down-weighted");
    }
    // the source manifest is untouched; the written one points at the maps
    assert!(!fs::read_to_string(&manifest).unwrap().contains("weights/"));
    assert!(fs::read_to_string(&m2).unwrap().contains("weights/subset0-moi2-n2"));
}

#[test]
fn train_and_eval_are_reproducible() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), &[]);
    let manifest = t.path().join("subset0.manifest");
    let out = t.path().join("run");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut args = vec!["train", "--manifest", s(&manifest), "--fold", "1", "--set", "moi=moi2", "--out", s(&out)];
        args.extend_from_slice(TINY);
        ok(&args);
        let eval_dir = out.join("eval");
        let ckpt = out.join("model.ckpt");
        let printed = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--fold", "1", "--out", s(&eval_dir)]);
        assert_eq!(printed.stdout, fs::read(eval_dir.join("eval.csv")).unwrap());
        runs.push(tree(&out));
    }
    assert_eq!(runs[0], runs[1]);
    let names: Vec<_> = runs[0].keys().map(|k| k.to_str().unwrap().to_string()).collect();
    for f in ["run.cfg", "model.ckpt", "train.log", "eval/eval.csv"] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    let report = String::from_utf8(runs[0][Path::new("eval/eval.csv")].clone()).unwrap();
    for line in report.lines().filter(|l| !l.starts_with('#') && l.contains(',')).skip(1) {
        let d: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&d), "{line}");
    }
}

fn sweep_args(out: &Path, extra: &[&'static str]) -> Vec<String> {
    let mut v: Vec<String> = ["sweep", "--out", s(out)].iter().map(|x| x.to_string()).collect();
    for kv in [
        "samples=8", "size=32", "subsets=1", "folds=2", "epochs=1", "init_channels=4", "depth=2", "pyramid_scales=1,2",
    ]
    .iter()
    .chain(extra)
    {
        v.push("--set".into());
        v.push(kv.to_string());
    }
    v
}

fn sweep(out: &Path, extra: &[&'static str]) -> String {
    let args = sweep_args(out, extra);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    fs::read_to_string(out.join("report.csv")).unwrap()
}

#[test]
fn uncorrupted_sweep_cells_all_equal_the_baseline() {
    let t = tempfile::tempdir().unwrap();
    let csv = sweep(t.path(), &["k=0"]);
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7, "{csv}");
    for r in &rows {
        assert_eq!(&r[2..4], &rows[0][2..4], "{csv}");
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn sweep_resumes_and_reproduces() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let first = sweep(&a, &["k=2"]);
    let runs = |d: &Path| -> BTreeMap<PathBuf, Vec<u8>> {
        tree(&d.join("runs")).into_iter().filter(|(k, _)| k.extension().is_some_and(|e| e == "run")).collect()
    };
    let before = runs(&a);
    assert_eq!(before.len(), 7 * 2);
    assert_eq!(first, sweep(&a, &["k=2"]));
    assert_eq!(before, runs(&a));
    assert_eq!(first, sweep(&b, &["k=2"]));
    assert_eq!(before, runs(&b));
    // a changed config never reuses stale runs
    let other = sweep(&a, &["k=2", "seed=3"]);
    assert_ne!(first, other);
}

#[test]
fn sweep_from_a_gen_directory_matches_the_in_memory_data() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["gen", "--out", s(&data), "--n", "8", "--size", "32", "--k", "2", "--subsets", "1"]);
    let mem = sweep(&t.path().join("mem"), &["k=2"]);
    let mut args = sweep_args(&t.path().join("disk"), &["k=2"]);
    args.extend(["--set".to_string(), format!("data={}", data.display())]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(mem, fs::read_to_string(t.path().join("disk/report.csv")).unwrap());
}

fn fails_with(args: &[&str], code: i32, prefix: &str) {
    let out = wsseg(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.starts_with(prefix), "{args:?}: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn errors_map_to_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    fails_with(&["bogus"], 2, "usage:");
    fails_with(&["gen"], 2, "usage:");
    fails_with(&["train"], 2, "usage:");
    fails_with(&["train", "--manifest", "x", "--set", "epochz=3"], 2, "usage:");
    fails_with(&["train", "--manifest", "x", "--set", "alpha=1.5"], 2, "usage:");
    fails_with(&["gen", "--out", s(t.path()), "--n", "10", "--k", "5", "--subsets", "3"], 2, "usage:");
    fails_with(&["train", "--manifest", s(&t.path().join("missing.manifest"))], 3, "data:");
    let bad = t.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    fails_with(&["eval", "--checkpoint", s(&bad), "--manifest", s(&bad)], 3, "data:");
}

#[test]
fn help_lists_the_defaults() {
    for cmd in ["train", "sweep"] {
        let out = Command::new(env!("CARGO_BIN_EXE_wsseg")).args([cmd, "--help"]).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for kv in ["batch_size = 4", "epochs = 280", "max_lr = 0.001", "weight_decay = 0.0005", "ema_beta = 0.995", "alpha = 0.5", "dropout_p = 0.4", "moi_epsilon = 1"] {
            assert!(text.contains(kv), "{cmd} help lacks {kv}");
        }
    }
}
