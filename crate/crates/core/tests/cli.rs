use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pix2pix::cli::main_with;
use pix2pix::imgio::{load_combined, load_rgb, PairOrder};
use pix2pix::pipeline::list_images;
use pix2pix::trainer::{EvalReport, LOSS_LOG_HEADER};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let mut full = vec!["pix2pix".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    let code = main_with(full, &mut o, &mut e);
    (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, count: &str) {
    let (code, _, err) = run(&[
        "synth",
        "--task",
        "invert",
        "--count",
        count,
        "--size",
        "32",
        "--seed",
        "7",
        "--out",
        s(out),
    ]);
    assert_eq!(code, 0, "{err}");
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn synth_splits_nine_to_one_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "10");
    synth(&b, "10");
    assert_eq!(list_images(&a.join("train")).unwrap().len(), 9);
    assert_eq!(list_images(&a.join("val")).unwrap().len(), 1);
    for split in ["train", "val"] {
        for f in list_images(&a.join(split)).unwrap() {
            let twin = b.join(split).join(f.file_name().unwrap());
            assert_eq!(fs::read(&f).unwrap(), fs::read(twin).unwrap());
        }
    }
    let file = &list_images(&a.join("train")).unwrap()[0];
    let pair = load_combined(file, PairOrder::MapLeft).unwrap();
    assert_eq!(pair.shape().dims(), [1, 32, 32, 3]);
    assert!(pair
        .input_map
        .data()
        .iter()
        .zip(pair.target_truth.data())
        .all(|(l, r)| l + r == 255.0));
}

#[test]
fn zero_steps_writes_manifest_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "desk",
        "--source",
        "synth",
        "--count",
        "4",
        "--steps",
        "0",
        "--run-root",
        s(&runs),
    ]);
    assert_eq!(code, 0, "{err}");
    let run_dir = only_run_dir(&runs);
    let manifest = fs::read_to_string(run_dir.join("manifest.cfg")).unwrap();
    assert!(manifest.contains("# dataset_fingerprint = ") && manifest.contains("steps = 0"));
    assert!(manifest.contains("\nlr = 0.0002\n"));
    assert!(run_dir.join("checkpoints/step_000000.ckpt").is_file());
    assert_eq!(
        fs::read_to_string(run_dir.join("loss.csv")).unwrap().trim(),
        LOSS_LOG_HEADER
    );

    // A second run in the same second gets its own directory.
    let (code, _, _) = run(&[
        "train",
        "--preset",
        "desk",
        "--source",
        "synth",
        "--count",
        "4",
        "--steps",
        "0",
        "--run-root",
        s(&runs),
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_dir(&runs).unwrap().count(), 2);
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "desk",
        "--source",
        "synth",
        "--count",
        "4",
        "--steps",
        "0",
        "--run-dir",
        s(&run_dir),
    ]);
    assert_ne!(code, 0);
    assert!(err.contains("exists"), "{err}");
}

#[test]
fn config_errors_are_specific() {
    let (code, _, err) = run(&["train", "--learning_rte", "0.1"]);
    assert_ne!(code, 0);
    assert!(
        err.contains("unknown config key `learning_rte`") && err.contains("did you mean `lr`"),
        "{err}"
    );
    assert!(err.contains("valid keys:") && err.contains("lambda_l1"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lamda_l1 = 10\n").unwrap();
    let (code, _, err) = run(&["train", "--config", s(&cfg)]);
    assert_ne!(code, 0);
    assert!(err.contains("did you mean `lambda_l1`"), "{err}");

    let missing = dir.path().join("nowhere");
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "desk",
        "--data-dir",
        s(&missing),
        "--run-root",
        s(dir.path()),
    ]);
    assert_ne!(code, 0);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn fifty_step_desk_run_then_generate_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "20");
    let runs = dir.path().join("runs");
    let start = Instant::now();
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "desk",
        "--data-dir",
        s(&data),
        "--steps",
        "50",
        "--seed",
        "7",
        "--sample-every",
        "25",
        "--checkpoint-every",
        "25",
        "--log-every",
        "0",
        "--run-root",
        s(&runs),
    ]);
    let elapsed = start.elapsed();
    assert_eq!(code, 0, "{err}");
    // Pinned from a first timing run of about 4 s.
    assert!(elapsed.as_secs() < 60, "{elapsed:?}");
    let run_dir = only_run_dir(&runs);
    assert_eq!(list_images(&run_dir.join("samples")).unwrap().len(), 2);
    let ckpt = run_dir.join("checkpoints/step_000050.ckpt");

    // Replaying the manifest reproduces the loss log.
    let replay = dir.path().join("replay");
    let (code, _, err) = run(&[
        "train",
        "--config",
        s(&run_dir.join("manifest.cfg")),
        "--run-dir",
        s(&replay),
    ]);
    assert_eq!(code, 0, "{err}");
    let strip = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(run_dir.join("loss.csv")), strip(replay.join("loss.csv")));
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(replay.join("checkpoints/step_000050.ckpt")).unwrap()
    );

    // Resuming from step 25 into a fresh directory ends at the same checkpoint.
    let resumed = dir.path().join("resumed");
    let (code, _, err) = run(&[
        "train",
        "--config",
        s(&run_dir.join("manifest.cfg")),
        "--resume",
        s(&run_dir.join("checkpoints/step_000025.ckpt")),
        "--run-dir",
        s(&resumed),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(resumed.join("checkpoints/step_000050.ckpt")).unwrap()
    );
    assert!(fs::read_to_string(resumed.join("manifest.cfg"))
        .unwrap()
        .contains("# resumed_from = "));

    let val = data.join("val");
    let before = fs::read(&list_images(&val).unwrap()[0]).unwrap();
    let (g1, g2) = (dir.path().join("g1"), dir.path().join("g2"));
    for out in [&g1, &g2] {
        let (code, _, err) = run(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&val),
            "--out",
            s(out),
            "--triptych",
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let made = list_images(&g1).unwrap();
    assert_eq!(made.len(), 2);
    for f in &made {
        assert_eq!(fs::read(f).unwrap(), fs::read(g2.join(f.file_name().unwrap())).unwrap());
        assert_eq!(load_rgb(f).unwrap().shape().dims(), [1, 32, 96, 3]);
    }
    assert_eq!(fs::read(&list_images(&val).unwrap()[0]).unwrap(), before);

    // A combined file read as a bare map is 64 wide: rejected unless fitted.
    let file = &list_images(&val).unwrap()[0];
    let (code, _, err) = run(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(file),
        "--out",
        s(&g1),
        "--single",
    ]);
    assert_ne!(code, 0);
    assert!(err.contains("64×32") && err.contains("--resize-policy fit"), "{err}");
    let fitted = dir.path().join("fit");
    let (code, _, err) = run(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(file),
        "--out",
        s(&fitted),
        "--single",
        "--resize-policy",
        "fit",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(load_rgb(only_run_dir(&fitted)).unwrap().shape().dims(), [1, 32, 32, 3]);

    let json = dir.path().join("eval.json");
    let (code, out, err) = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "val",
        "--out",
        s(&json),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("mean_l1"));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.pairs, 2);
    assert!(report.mean_l1.is_finite() && report.psnr_db > 0.0);
    let again: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again, report);
}

#[test]
fn identity_baseline_scores_zero_on_truth_equal_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("same");
    fs::create_dir(&data).unwrap();
    // Copy the map half over the truth half of three synthetic tiles.
    let src = dir.path().join("src");
    synth(&src, "3");
    for (i, f) in list_images(&src.join("train")).unwrap().iter().enumerate() {
        let pair = load_combined(f, PairOrder::MapLeft).unwrap();
        let same = pix2pix::imgio::ImagePair::new(pair.input_map.clone(), pair.input_map, "same").unwrap();
        let combined = pix2pix::imgio::join_combined(&same, PairOrder::MapLeft).unwrap();
        pix2pix::imgio::encode_png_pixels(&combined, data.join(format!("{i}.png"))).unwrap();
    }
    let json = dir.path().join("id.json");
    let (code, _, err) = run(&["eval", "--baseline", "identity", "--data", s(&data), "--out", s(&json)]);
    assert_eq!(code, 0, "{err}");
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.mean_l1, 0.0);
    assert_eq!(report.pairs, 3);

    let (code, _, err) = run(&[
        "eval",
        "--baseline",
        "identity",
        "--data",
        s(&dir.path().join("src/none")),
        "--out",
        s(&json),
    ]);
    assert_ne!(code, 0);
    assert!(!err.is_empty());
}

#[test]
fn binary_selfcheck_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_pix2pix"))
        .arg("selfcheck")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("[FAIL]"));
    assert!(
        text.contains("256→128→64→32→16→8→4→2→1→2→4→8→16→32→64→128→256"),
        "{text}"
    );
    assert!(text.lines().any(|l| l.trim_end().ends_with("30×30×1")), "{text}");
}
