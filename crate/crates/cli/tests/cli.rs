use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spnas::io::arch::ArchitectureFile;
use spnas::io::lut::load_lut;
use spnas::superkernel::Decision;
use spnas::supernet::{DerivedArchitecture, MacroConfig};

const DATA: &str = "synth:classes=4,n=64,res=8";

fn spnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spnas")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spnas(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        std::fs::write(
            ws.path("tiny.cfg"),
            "macro.preset = tiny\nsearch.epochs = 1\nsearch.batch_size = 32\ntrain.epochs = 1\ntrain.batch_size = 32\n",
        )
        .unwrap();
        ok(&["lut", "synth", "--config", &ws.s("tiny.cfg"), "--out", &ws.s("lut.csv")]);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn entries(&self) -> usize {
        std::fs::read_dir(self.dir.path()).unwrap().count()
    }
}

#[test]
fn all_skip_runtime_is_the_overhead() {
    let ws = Workspace::new();
    let cfg = MacroConfig::tiny();
    let arch = DerivedArchitecture::new(cfg.clone(), vec![Decision::Skip; cfg.num_layers()]).unwrap();
    ArchitectureFile::new(&arch, None).save(&ws.path("skip.json")).unwrap();
    let out = ok(&["predict-runtime", "--arch", &ws.s("skip.json"), "--lut", &ws.s("lut.csv")]);
    let printed: f64 = out.lines().next().unwrap().trim().parse().unwrap();
    let lut = load_lut(&ws.path("lut.csv")).unwrap();
    assert_eq!(printed, lut.overhead_ms);
}

#[test]
fn search_then_derive_reproduces_architecture() {
    let ws = Workspace::new();
    ok(&["search", "--config", &ws.s("tiny.cfg"), "--data", DATA, "--lut", &ws.s("lut.csv"), "--out", &ws.s("run")]);
    for f in ["architecture.json", "trace.csv", "snapshots.jsonl", "supernet.ckpt"] {
        assert!(ws.path("run").join(f).is_file(), "{f} missing");
    }
    ok(&["derive", "--checkpoint", &ws.s("run/supernet.ckpt"), "--out", &ws.s("derived.json")]);
    let a = ArchitectureFile::load(&ws.path("run/architecture.json")).unwrap().architecture().unwrap();
    let b = ArchitectureFile::load(&ws.path("derived.json")).unwrap().architecture().unwrap();
    assert_eq!(a, b);

    ok(&["train", "--config", &ws.s("tiny.cfg"), "--data", DATA, "--arch", &ws.s("derived.json"), "--out", &ws.s("net")]);
    let eval = ok(&["eval", "--data", DATA, "--arch", &ws.s("derived.json"), "--weights", &ws.s("net/network.ckpt")]);
    assert!(eval.contains("eval top-1"));
}

#[test]
fn validating_a_table_on_its_own_samples_is_exact() {
    let ws = Workspace::new();
    ok(&["lut", "sample", "--config", &ws.s("tiny.cfg"), "--lut", &ws.s("lut.csv"), "-n", "20", "--out", &ws.s("s.csv")]);
    let out = ok(&["lut", "validate", "--config", &ws.s("tiny.cfg"), "--lut", &ws.s("lut.csv"), "--samples", &ws.s("s.csv")]);
    assert!(out.contains("20 samples: RMSE 0.00 ms"), "{out}");
}

#[test]
fn failures_exit_nonzero_and_write_nothing() {
    let ws = Workspace::new();
    let before = ws.entries();
    let missing = ws.s("nope.csv");
    let cases: Vec<Vec<&str>> = vec![
        vec!["search", "--config", "/nonexistent.cfg", "--lut", "x", "--out", "out1"],
        vec!["predict-runtime", "--arch", &missing, "--lut", &missing],
        vec!["random-baseline", "--lut", &missing, "--window", "5:1", "--out", "out2"],
        vec!["train", "--data", "synth:classes=1", "--arch", &missing, "--out", "out3"],
    ];
    for args in cases {
        let out = Command::new(env!("CARGO_BIN_EXE_spnas")).current_dir(ws.dir.path()).args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    assert_eq!(ws.entries(), before);
    assert_eq!(spnas(&["search", "--bogus"]).status.code(), Some(2));
}

#[test]
fn random_baseline_writes_requested_count() {
    let ws = Workspace::new();
    let lut = load_lut(&ws.path("lut.csv")).unwrap();
    let hi: f64 = lut.overhead_ms + lut.layers.iter().map(|l| l.r55_6).sum::<f64>();
    let window = format!("0:{hi}");
    let out = ok(&[
        "random-baseline", "--config", &ws.s("tiny.cfg"), "--lut", &ws.s("lut.csv"), "--window", &window, "-n", "7", "--out", &ws.s("rb.json"),
    ]);
    assert!(out.starts_with("7 architectures"), "{out}");
    assert!(Path::new(&ws.s("rb.json")).is_file());
}
