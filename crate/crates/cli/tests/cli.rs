use std::path::Path;
use std::process::{Command, Output};

use tensor_defense::decomp::TtCores;
use tensor_defense::harness::SweepReport;
use tensor_defense::tensor::{read_tdf1, write_tdf1, DenseTensor};

const SMALL: [&str; 5] =
    ["model.depth=1", "model.calibration_captions=40", "corpus.pairs=8", "attack.steps=2", "harness.batch_size=4"];

fn tdefense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdefense"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_for_every_subcommand() {
    let top = tdefense(&["--help"]);
    assert_eq!(code(&top), 0);
    for sub in ["gen-corpus", "attack", "defend", "sweep", "bench", "decompose"] {
        assert!(stdout(&top).contains(sub), "{sub} missing from top-level help");
        let o = tdefense(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        let text = stdout(&o);
        for flag in ["--config", "--seed", "--threads"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
    }
    assert!(stdout(&tdefense(&["sweep", "--help"])).contains("--axis"));
    assert!(stdout(&tdefense(&["sweep", "--help"])).contains("--values"));
}

#[test]
fn usage_errors_exit_one() {
    let o = tdefense(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&tdefense(&[])), 1);
    assert_eq!(code(&tdefense(&["decompose", "--method", "tt"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let o = tdefense(&["sweep", "--axis", "depth", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown axis"));
    let o = tdefense(&["gen-corpus", "--out", p(dir.path()), "defense.nope=3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("defense.nope"));
}

#[test]
fn io_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tdf");
    let o = tdefense(&["decompose", "--input", p(&missing), "--method", "tt", "--rank", "2"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("missing.tdf"));

    let junk = dir.path().join("junk.tdf");
    std::fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(code(&tdefense(&["decompose", "--input", p(&junk), "--method", "cp", "--rank", "1"])), 3);

    let cfg = dir.path().join("nope.json");
    assert_eq!(code(&tdefense(&["--config", p(&cfg), "gen-corpus", "--out", p(dir.path())])), 3);
}

#[test]
fn decompose_recovers_tt_representable_tensor() {
    // Cores with bond ranks (4, 4) filled by a hash-like formula.
    let shapes = [[1, 5, 4], [4, 6, 4], [4, 5, 1]];
    let cores = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| {
            DenseTensor::from_fn(s.to_vec(), |i| {
                let h = (k * 97 + i[0] * 31 + i[1] * 7 + i[2]) as f64;
                ((h * 12.9898).sin() * 43758.5453).fract()
            })
            .unwrap()
        })
        .collect();
    let t = TtCores::new(cores).unwrap().reconstruct().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("t.tdf");
    let factors = dir.path().join("t.tdfc");
    write_tdf1(&input, &t).unwrap();

    let o = tdefense(&["decompose", "--input", p(&input), "--method", "tt", "--rank", "4", "--out", p(&factors)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary["relative_error"].as_f64().unwrap() <= 1e-6, "{summary}");
    assert_eq!(summary["ranks"], serde_json::json!([4, 4]));
    assert!(factors.exists());
}

#[test]
fn alpha_one_sweep_leaves_attacked_metrics_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("alpha.csv");
    let json = dir.path().join("alpha.json");
    let mut args = vec!["sweep", "--axis", "alpha", "--values", "1.0", "--out", p(&csv)];
    args.extend(SMALL);
    let o = tdefense(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    for k in ["r1", "r5", "r10"] {
        assert_eq!(col(&format!("def_{k}")), col(&format!("adv_{k}")));
    }
    assert_eq!(col("mean_sim_def"), col("mean_sim_adv"));

    args[6] = p(&json);
    assert_eq!(code(&tdefense(&args)), 0);
    let first = SweepReport::from_json(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let again = dir.path().join("again.csv");
    let o = tdefense(&["sweep", "--rerun", p(&json), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let untimed =
        |t: &str| -> Vec<String> { t.lines().map(|l| l.split(',').take(18).collect::<Vec<_>>().join(",")).collect() };
    assert_eq!(untimed(&std::fs::read_to_string(&again).unwrap()), untimed(&text));
    assert_eq!(first.metadata.timestamp, 1_700_000_000);
}

#[test]
fn corpus_attack_defend_pipeline_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (c1, c2, adv) = (dir.path().join("c1"), dir.path().join("c2"), dir.path().join("adv"));
    for out in [&c1, &c2] {
        let mut args = vec!["--seed", "4", "gen-corpus", "--out", p(out)];
        args.extend(SMALL);
        assert_eq!(code(&tdefense(&args)), 0);
    }
    for f in ["manifest.json", "images/0000.tdf", "images/0007.tdf"] {
        assert_eq!(std::fs::read(c1.join(f)).unwrap(), std::fs::read(c2.join(f)).unwrap(), "{f}");
    }

    let manifest = c1.join("manifest.json");
    let mut args = vec!["--seed", "4", "--threads", "1", "attack", "--manifest", p(&manifest), "--out", p(&adv)];
    args.extend(SMALL);
    let o = tdefense(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("attacked 8 images"));
    let clean = read_tdf1(c1.join("images/0003.tdf")).unwrap();
    let attacked = read_tdf1(adv.join("images/0003.tdf")).unwrap();
    let linf = clean.data().iter().zip(attacked.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(linf > 0.0 && linf <= 8.0 / 255.0);

    let metrics = dir.path().join("defended.json");
    let adv_manifest = adv.join("manifest.json");
    let mut args = vec!["--seed", "4", "defend", "--manifest", p(&adv_manifest), "--out", p(&metrics)];
    args.extend(SMALL);
    let o = tdefense(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(v["images"], 8);
    let r1 = v["recall_at_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(r1 <= v["recall_at_5"].as_f64().unwrap());
}

#[test]
fn defend_filters_stored_activations() {
    let dir = tempfile::tempdir().unwrap();
    let t = DenseTensor::from_fn(vec![3, 5, 4], |i| (i[0] * 7 + i[1] * 3 + i[2]) as f64 * 0.1 - 1.0).unwrap();
    let input = dir.path().join("act.tdf");
    write_tdf1(&input, &t).unwrap();

    let same = dir.path().join("same.tdf");
    let o = tdefense(&["defend", "--input", p(&input), "--out", p(&same), "defense.alpha=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&same).unwrap(), std::fs::read(&input).unwrap());

    let low = dir.path().join("low.tdf");
    let o = tdefense(&["defend", "--input", p(&input), "--out", p(&low), "defense.alpha=0", "defense.rank=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let filtered = read_tdf1(&low).unwrap();
    assert_eq!(filtered.shape(), t.shape());
    assert_ne!(filtered, t);

    let vector = dir.path().join("v.tdf");
    write_tdf1(&vector, &DenseTensor::zeros(vec![4]).unwrap()).unwrap();
    let o = tdefense(&["defend", "--input", p(&vector), "--out", p(&low), "defense.alpha=0.5"]);
    assert_eq!(code(&o), 1);
}
