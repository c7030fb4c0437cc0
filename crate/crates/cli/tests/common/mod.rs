#![allow(dead_code)]

use std::ffi::{OsStr, OsString};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn spacon<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spacon")).args(args).output().expect("spawn spacon")
}

/// Runs `spacon`, panicking with its stderr unless it exits 0.
pub fn ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    let o = spacon(args);
    assert!(o.status.success(), "spacon {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub struct Layout {
    pub raw: PathBuf,
    pub prep: PathBuf,
    pub neg: PathBuf,
    pub ckpt: PathBuf,
    pub eval: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            raw: root.join("raw"),
            prep: root.join("prep"),
            neg: root.join("neg"),
            ckpt: root.join("ckpt"),
            eval: root.join("eval"),
        }
    }
}

pub fn synth(l: &Layout, scenes: usize, raw_points: usize, seed: u64) {
    ok(&[
        "synth",
        "--out",
        s(&l.raw),
        "--scenes",
        &scenes.to_string(),
        "--points-per-object",
        &raw_points.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
}

pub fn prepare(l: &Layout, points: usize, seed: u64) {
    ok(&[
        "prepare-data",
        "--scenes",
        s(&l.raw.join("scenes")),
        "--annotations",
        s(&l.raw.join("annotations.jsonl")),
        "--out",
        s(&l.prep),
        "--points-per-object",
        &points.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
}

pub fn negatives(l: &Layout, extra: &[&str], seed: u64) {
    let mut args: Vec<OsString> = vec![
        "gen-negatives".into(),
        "--pairs".into(),
        l.prep.join("stage3_pairs.jsonl").into(),
        "--scenes".into(),
        l.prep.join("scenes").into(),
        "--out".into(),
        l.neg.clone().into(),
        "--seed".into(),
        seed.to_string().into(),
    ];
    args.extend(extra.iter().map(OsString::from));
    ok(&args);
}

/// Tiny stage-3 run on the generated triplets.
pub fn train(l: &Layout, out: &Path, steps: usize, seed: u64, extra: &[&str]) {
    let trip = l.neg.join("triplets.jsonl");
    let scenes = l.prep.join("scenes");
    let vocab = l.prep.join("vocab.txt");
    let (steps, seed) = (steps.to_string(), seed.to_string());
    let mut args = vec![
        "train",
        "--stage",
        "3",
        "--allow-skip",
        "--model-size",
        "tiny",
        "--data",
        s(&trip),
        "--scenes",
        s(&scenes),
        "--vocab",
        s(&vocab),
        "--out",
        s(out),
        "--steps",
        &steps,
        "--seed",
        &seed,
    ];
    args.extend(extra);
    ok(&args);
}

pub fn evaluate(l: &Layout, extra: &[&str]) {
    let mut args: Vec<OsString> = vec![
        "evaluate".into(),
        "--model".into(),
        l.ckpt.clone().into(),
        "--data".into(),
        l.neg.join("triplets.jsonl").into(),
        "--scenes".into(),
        l.prep.join("scenes").into(),
        "--out".into(),
        l.eval.clone().into(),
        "--max-new".into(),
        "6".into(),
    ];
    args.extend(extra.iter().map(OsString::from));
    ok(&args);
}

/// synth → prepare-data → gen-negatives --mock → train → evaluate.
pub fn pipeline(root: &Path, seed: u64, points: usize, steps: usize) -> Layout {
    let l = Layout::new(root);
    synth(&l, 8, 96, seed);
    prepare(&l, points, seed);
    negatives(&l, &["--mock"], seed);
    train(&l, &l.ckpt, steps, seed, &[]);
    evaluate(&l, &[]);
    l
}

/// Every file under `dir` except run manifests, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
