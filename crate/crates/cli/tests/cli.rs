use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jndloc_core::config::CONFIG_KEYS;
use jndloc_core::imaging::{self, RasterImage};
use jndloc_core::study::StudyDefinition;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

fn jndloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jndloc")).args(args).output().unwrap()
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_kind(out: &Output) -> (i32, String) {
    let v: Value = serde_json::from_slice(&out.stderr).unwrap_or(Value::Null);
    (out.status.code().unwrap(), v["error"].as_str().unwrap_or("").to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Files under `dir` with their bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &[&str] = &[
    "simulate", "--pool", "100", "--images", "50", "--size", "128", "--observers", "30", "--spammers", "3",
    "--lapsing", "1", "--codecs", "jpeg", "--target-responses", "10",
];

#[test]
fn help_documents_every_config_key() {
    let out = jndloc(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for (key, default, _) in CONFIG_KEYS {
        assert!(text.contains(key), "{key} missing from help");
        assert!(text.contains(default), "default of {key} missing");
    }
    for sub in ["ladder", "gold", "study", "serve", "simulate", "qc", "analyze", "export", "compare"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn simulate_and_downstream_steps_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> PathBuf {
        let out = dir.path().join(name);
        let mut args = SMALL.to_vec();
        args.extend(["--out", s(&out)]);
        let summary = ok(&jndloc(&args));
        assert_eq!(summary["observers"], 30);
        let ev = out.join("events.jsonl");
        let st = out.join("study.json");
        let report = ok(&jndloc(&["qc", "run", "--events", s(&ev), "--study", s(&st), "--out", s(&out)]));
        let stages = report["stages"].as_array().unwrap();
        assert_eq!(stages.len(), 3);
        assert_eq!(
            stages.iter().map(|x| x["stage"].as_str().unwrap()).collect::<Vec<_>>(),
            ["rejected_workers", "hit_level", "extreme"]
        );
        ok(&jndloc(&[
            "analyze",
            "--responses",
            s(&out.join("qc/responses.json")),
            "--study",
            s(&st),
            "--out",
            s(&out),
        ]));
        let manifest = ok(&jndloc(&[
            "export",
            "--aggregation",
            s(&out.join("analysis/aggregation.json")),
            "--study",
            s(&st),
            "--qc-report",
            s(&out.join("qc/report.json")),
            "--out",
            s(&out),
        ]));
        assert_eq!(manifest["qc"], report);
        out
    };
    let a = run("a");
    let b = run("b");
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs", pa.display());
    }

    // Self comparison and comparison against the planted truth.
    let cmp = ok(&jndloc(&[
        "compare",
        "--dataset",
        s(&a.join("dataset")),
        "--reference",
        s(&a.join("dataset")),
        "--out",
        s(&a),
    ]));
    assert_eq!(cmp["srocc"].as_f64().unwrap(), 1.0);
    assert!(a.join("reports/comparison_jpeg.json").is_file());
    let truth = ok(&jndloc(&[
        "compare",
        "--dataset",
        s(&a.join("dataset")),
        "--reference",
        s(&a.join("truth.json")),
        "--out",
        s(&a),
    ]));
    assert!(truth["srocc"].as_f64().unwrap() > 0.9, "{truth}");

    // A seed override changes the study.
    let c = dir.path().join("c");
    let mut args = SMALL.to_vec();
    args.extend(["--seed", "99", "--out", s(&c)]);
    ok(&jndloc(&args));
    assert_ne!(std::fs::read(a.join("events.jsonl")).unwrap(), std::fs::read(c.join("events.jsonl")).unwrap());
}

/// Pool of candidate images with pilot levels and three click clusters.
fn write_pilot(dir: &Path, n: usize) -> PathBuf {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let centers = [[25u32, 25u32], [100, 30], [60, 100]];
    let images: Vec<Value> = (0..n)
        .map(|i| {
            let base: f64 = rng.random_range(15.0..85.0);
            let spread: f64 = rng.random_range(1.0..6.0);
            let samples: Vec<f64> = (0..8).map(|_| (base + rng.random_range(-spread..spread)).round()).collect();
            let clicks: Vec<[u32; 2]> = (0..10)
                .flat_map(|_| centers)
                .map(|[x, y]| [x + rng.random_range(0..4), y + rng.random_range(0..4)])
                .collect();
            json!({"id": format!("c{i:03}"), "codec": "jpeg", "width": 128, "height": 128,
                   "pjnd_samples": samples, "clicks": clicks})
        })
        .collect();
    let path = dir.join("pilot.json");
    std::fs::write(&path, serde_json::to_vec(&images).unwrap()).unwrap();
    path
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("study.toml");
    std::fs::write(
        &path,
        "codecs = [\"jpeg\"]\ntarget_responses = 5\nsigma_blur = 8.0\nsigma_region = 8.0\n\
         mean_shift_bandwidth = 8.0\nstudy_images_per_codec = 20\nseed = 7\n",
    )
    .unwrap();
    path
}

#[test]
fn gold_synthesis_and_study_init() {
    let dir = tempfile::tempdir().unwrap();
    let pilot = write_pilot(dir.path(), 50);
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");

    let sel = ok(&jndloc(&[
        "--config",
        s(&cfg),
        "study",
        "init",
        "--candidates",
        s(&pilot),
        "--candidates-only",
        "--out",
        s(&out),
    ]));
    assert_eq!(sel["jpeg"]["gold"].as_array().unwrap().len(), 25);
    assert_eq!(sel["jpeg"]["study"].as_array().unwrap().len(), 20);
    let selection = out.join("candidates.json");

    let synth = |o: &Path| {
        ok(&jndloc(&[
            "--config",
            s(&cfg),
            "gold",
            "synth",
            "--pilot",
            s(&pilot),
            "--codec",
            "jpeg",
            "--selection",
            s(&selection),
            "--out",
            s(o),
        ]))
    };
    let summary = synth(&out);
    assert_eq!(summary.as_object().unwrap().len(), 25);
    let again = dir.path().join("again");
    synth(&again);
    assert_eq!(tree(&out.join("gold")), tree(&again.join("gold")));
    let first = sel["jpeg"]["gold"][0].as_str().unwrap();
    let spec: Value = serde_json::from_slice(&std::fs::read(out.join(format!("gold/{first}.json"))).unwrap()).unwrap();
    let centers = spec["centers"].as_array().unwrap();
    assert_eq!(centers.len(), 3);

    let init = ok(&jndloc(&[
        "--config",
        s(&cfg),
        "study",
        "init",
        "--candidates",
        s(&pilot),
        "--gold",
        s(&out.join("gold")),
        "--out",
        s(&out),
    ]));
    assert_eq!(init["gold"], 25);
    assert_eq!(init["hits"], 2);
    let def = StudyDefinition::load(&out.join("study.json")).unwrap();
    assert_eq!(def.config.target_responses, 5);
    assert_eq!(def.catalog.training.len() + def.catalog.quiz.len(), 15);
}

#[test]
fn ladder_build_and_gold_ladders_land_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let src = imaging::synthetic_image(64, 48, 3);
    src.save_png(&images.join("pic.png")).unwrap();
    std::fs::write(images.join("notes.txt"), "ignored").unwrap();
    let out = dir.path().join("out");
    let built = ok(&jndloc(&["ladder", "build", "--images", s(&images), "--out", s(&out)]));
    assert_eq!(built[0]["id"], "pic");
    let d0 = RasterImage::load(&out.join("ladders/pic-jpeg/d000.png")).unwrap();
    assert_eq!(d0, src);
    assert!(out.join("ladders/pic-jpeg/d100.png").is_file());
    assert!(out.join("ladders/pic-jpeg/ladder.json").is_file());

    let bpg = jndloc(&["ladder", "build", "--images", s(&images), "--codec", "bpg", "--out", s(&out)]);
    assert_eq!(err_kind(&bpg), (2, "config".into()));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "hit_removal_fraction = 2.0\n").unwrap();
    let out = s(dir.path());

    let r = jndloc(&["--config", s(&bad_cfg), "qc", "run", "--events", "x.jsonl", "--out", out]);
    assert_eq!(err_kind(&r), (2, "config".into()));
    let r = jndloc(&["--config", "/no/such/file.toml", "qc", "run", "--events", "x.jsonl", "--out", out]);
    assert_eq!(err_kind(&r), (2, "config".into()));
    let r = jndloc(&["qc", "run", "--events", "/no/such/events.jsonl", "--out", out]);
    assert_eq!(err_kind(&r), (3, "input".into()));
    let r = jndloc(&["compare", "--dataset", "/no/such", "--reference", "/no/such.json", "--out", out]);
    assert_eq!(err_kind(&r), (3, "input".into()));

    // Valid inputs with no overlapping images: the comparison itself fails.
    let sim = dir.path().join("sim");
    let mut args = SMALL.to_vec();
    args.extend(["--out", s(&sim)]);
    ok(&jndloc(&args));
    let st = sim.join("study.json");
    ok(&jndloc(&["qc", "run", "--events", s(&sim.join("events.jsonl")), "--study", s(&st), "--out", s(&sim)]));
    ok(&jndloc(&["analyze", "--responses", s(&sim.join("qc/responses.json")), "--study", s(&st), "--out", s(&sim)]));
    ok(&jndloc(&["export", "--aggregation", s(&sim.join("analysis/aggregation.json")), "--study", s(&st), "--out", s(&sim)]));
    let refs = dir.path().join("ref.json");
    std::fs::write(&refs, r#"{"other": 40.0}"#).unwrap();
    let r = jndloc(&["compare", "--dataset", s(&sim.join("dataset")), "--reference", s(&refs), "--out", s(&sim)]);
    assert_eq!(err_kind(&r), (4, "pipeline".into()));

    let r = jndloc(&["simulate", "--no-such-flag"]);
    assert_eq!(r.status.code(), Some(2));
}
