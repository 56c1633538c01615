use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hgfsod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgfsod"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = hgfsod(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    hgfsod(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small meta-train and meta-test sets under `dir`.
fn small_data(dir: &Path) {
    for (split, name) in [("meta-train", "train"), ("meta-test", "test")] {
        ok(&[
            "generate",
            "--classes",
            "4",
            "--novel",
            "2",
            "--proposals",
            "8",
            "--episodes",
            "3",
            "--shape",
            "2x2x4",
            "--objects",
            "2..3",
            "--split",
            split,
            "--seed",
            "5",
            "--out-dir",
            p(&dir.join(name)),
        ]);
    }
}

fn train_small(dir: &Path, out: &str, seed: &str, extra: &[&str]) {
    let data = dir.join("train");
    let ck = dir.join(out);
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--iterations",
        "5",
        "--seed",
        seed,
        "--out",
        p(&ck),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn generate_writes_a_manifest_and_episodes() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let test = dir.path().join("test");
    assert!(test.join("manifest.json").exists());
    let episodes: Vec<_> = fs::read_dir(&test)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("episode")
        })
        .collect();
    assert_eq!(episodes.len(), 3);
    let eps = hgfsod::io::read_dataset(&test).unwrap();
    assert!(eps.iter().all(|e| e.shape.to_string() == "2x2x4"));
}

#[test]
fn train_then_eval_produces_checkpoint_trace_and_report() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "ck.json", "1", &[]);
    let trace = fs::read_to_string(dir.path().join("ck.loss.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,total,bce,smooth_l1"));
    assert_eq!(trace.lines().count(), 6);

    let report = dir.path().join("report.csv");
    ok(&[
        "eval",
        "--data",
        p(&dir.path().join("test")),
        "--checkpoint",
        p(&dir.path().join("ck.json")),
        "--out",
        p(&report),
    ]);
    let rows = hgfsod::io::read_report(&report).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].toggles, "cc+cp+pp");
    assert!((0.0..=1.0).contains(&rows[0].ap50));
}

#[test]
fn eval_over_seeds_adds_mean_and_std_rows() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    for seed in ["0", "1"] {
        train_small(dir.path(), &format!("ck{seed}.json"), seed, &[]);
    }
    let report = dir.path().join("report.csv");
    let pattern = dir.path().join("ck{seed}.json");
    ok(&[
        "eval",
        "--data",
        p(&dir.path().join("test")),
        "--checkpoint",
        p(&pattern),
        "--seeds",
        "0,1",
        "--out",
        p(&report),
    ]);
    let rows = hgfsod::io::read_report(&report).unwrap();
    let seeds: Vec<&str> = rows.iter().map(|r| r.seed.as_str()).collect();
    assert_eq!(seeds, ["0", "1", "mean", "std"]);
    assert!((rows[2].ap50 - (rows[0].ap50 + rows[1].ap50) / 2.0).abs() < 1e-12);
}

#[test]
fn ablation_flags_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "mlp.json", "0", &["--mlp"]);
    train_small(dir.path(), "nocc.json", "0", &["--ablate", "class-class"]);
    let mlp = hgfsod::io::read_checkpoint(&dir.path().join("mlp.json")).unwrap();
    let nocc = hgfsod::io::read_checkpoint(&dir.path().join("nocc.json")).unwrap();
    assert_eq!(mlp.toggles.label(), "mlp");
    assert_eq!(nocc.toggles.label(), "cp+pp");
}

#[test]
fn auxiliary_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let ep = dir.path().join("test/episode_0000.json");
    let cm = dir.path().join("cos.csv");
    ok(&["cosine-matrix", "--data", p(&ep), "--out", p(&cm)]);
    let text = fs::read_to_string(&cm).unwrap();
    assert!(text.starts_with("class,"));
    assert_eq!(text.lines().count(), 1 + 6);

    let episode = hgfsod::io::read_episode(&ep).unwrap();
    let novel = episode.proposals.keys().next().unwrap().id.to_string();
    let modulated = dir.path().join("mod.csv");
    ok(&[
        "modulate",
        "--data",
        p(&ep),
        "--class",
        &novel,
        "--out",
        p(&modulated),
    ]);
    let text = fs::read_to_string(&modulated).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "h,w,c,value");
    assert_eq!(lines.len(), 1 + 16);
    // Cell (1, 0), channel 2: the global feature times the class's mean channel 2.
    let proto = episode
        .class_table
        .iter()
        .find(|c| c.class.id.to_string() == novel)
        .unwrap();
    let mean: f64 = (0..2)
        .flat_map(|h| (0..2).map(move |w| (h, w)))
        .map(|(h, w)| proto.feature.get(h, w, 2))
        .sum::<f64>()
        / 4.0;
    let want = episode.global_feature.get(1, 0, 2) * mean;
    let row = lines.iter().find(|l| l.starts_with("1,0,2,")).unwrap();
    let got: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((got - want).abs() < 1e-12);

    let out = ok(&["gradcheck", "--seed", "3"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_relative_error"));
}

#[test]
fn exit_codes_separate_usage_data_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(
        code(&[
            "train",
            "--data",
            p(&dir.path().join("train")),
            "--out",
            "x.json",
            "--lr=-1"
        ]),
        1
    );
    assert_eq!(
        code(&[
            "eval",
            "--data",
            p(&missing),
            "--checkpoint",
            p(&missing),
            "--out",
            "r.csv"
        ]),
        2
    );

    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(
        code(&[
            "cosine-matrix",
            "--data",
            p(&garbage),
            "--out",
            p(&dir.path().join("c.csv"))
        ]),
        2
    );

    // A checkpoint trained on other features is refused.
    ok(&[
        "generate",
        "--episodes",
        "1",
        "--shape",
        "1x1x8",
        "--classes",
        "4",
        "--novel",
        "2",
        "--objects",
        "2..3",
        "--out-dir",
        p(&dir.path().join("other")),
    ]);
    train_small(dir.path(), "ck.json", "0", &[]);
    assert_eq!(
        code(&[
            "eval",
            "--data",
            p(&dir.path().join("other")),
            "--checkpoint",
            p(&dir.path().join("ck.json")),
            "--out",
            p(&dir.path().join("r.csv"))
        ]),
        2
    );
    assert_eq!(code(&["gradcheck", "--inject-bug"]), 3);
}
