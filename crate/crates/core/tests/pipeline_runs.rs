//! End-to-end runs of the training, generation and evaluation pipelines on
//! tiny corpora with a micro backbone.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use diffmix::config::RunConfig;
use diffmix::metrics::{macro_f1, LabelMatrix};
use diffmix::pipeline::{self, read_metrics, read_mix_stats};
use diffmix::rng;
use rand::seq::SliceRandom;
use tempfile::TempDir;

fn quoted(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

/// Resolves a config the way the CLI does: defaults plus `key=value`
/// overrides, with a micro backbone unless overridden.
fn config(mode: &str, data: &Path, out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let mut ov: Vec<(String, String)> = vec![
        ("mode".into(), format!("\"{mode}\"")),
        ("data".into(), quoted(data)),
        ("out".into(), quoted(out)),
        ("seed".into(), "3".into()),
        ("backbone.depth".into(), "\"micro\"".into()),
        ("backbone.width".into(), "0.125".into()),
        ("batch_size".into(), "16".into()),
        ("diffusion.steps".into(), "10".into()),
        ("diffusion.hidden".into(), "4".into()),
        ("diffusion.batch_size".into(), "16".into()),
        ("diffusion.lr".into(), "1e-3".into()),
    ];
    ov.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::resolve(None, &ov).unwrap()
}

fn corpus(per_class: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let pc = per_class.to_string();
    let cfg = config("synth-data", Path::new("unused"), dir.path(), &[("synth.per_class", &pc)]);
    assert_eq!(pipeline::synth_data(&cfg).unwrap(), 28 * per_class);
    dir
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn frozen_weights_stop_at_epoch_seven() {
    let data = corpus(2);
    let out = tempfile::tempdir().unwrap();
    let cfg = config(
        "baseline",
        data.path(),
        out.path(),
        &[("schedule.kind", "\"fixed\""), ("schedule.init_lr", "0.0"), ("epochs", "30")],
    );
    let s = pipeline::train_classifier(&cfg, false).unwrap();
    assert!(s.stopped_early);
    assert_eq!(s.epochs_run, 7);
    let rows = read_metrics(&out.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.val_loss == rows[0].val_loss && r.lr == 0.0));
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = corpus(2);
    let before = snapshot(data.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for out in [a.path(), b.path()] {
        pipeline::train_classifier(&config("baseline", data.path(), out, &[("epochs", "3")]), false).unwrap();
    }
    for file in ["metrics.csv", "predictions.csv", "per_class.csv", "checkpoints/last.ckpt"] {
        assert_eq!(read(a.path().join(file)), read(b.path().join(file)), "{file}");
    }
    assert_eq!(snapshot(data.path()), before, "training modified its data directory");

    // The materialised config on its own reproduces the run.
    let c = tempfile::tempdir().unwrap();
    let resolved = a.path().join("resolved_config");
    let cfg = RunConfig::resolve(Some(&resolved), &[("out".into(), quoted(c.path()))]).unwrap();
    pipeline::train_classifier(&cfg, false).unwrap();
    assert_eq!(read(a.path().join("metrics.csv")), read(c.path().join("metrics.csv")));
    assert_eq!(read(a.path().join("predictions.csv")), read(c.path().join("predictions.csv")));
}

#[test]
fn classifier_resume_matches_an_uninterrupted_run() {
    let data = corpus(2);
    let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = [("schedule.kind", "\"plateau\"")];
    let run = |out: &Path, epochs: &str, resume: bool| {
        let mut e = extra.to_vec();
        e.push(("epochs", epochs));
        pipeline::train_classifier(&config("baseline", data.path(), out, &e), resume).unwrap()
    };
    run(whole.path(), "4", false);
    run(split.path(), "2", false);
    let s = run(split.path(), "4", true);
    assert_eq!(s.epochs_run, 4);
    for file in ["metrics.csv", "predictions.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt"] {
        assert_eq!(read(whole.path().join(file)), read(split.path().join(file)), "{file}");
    }
}

#[test]
fn evaluation_agrees_with_the_last_logged_epoch() {
    let data = corpus(2);
    let out = tempfile::tempdir().unwrap();
    let cfg = config("baseline", data.path(), out.path(), &[("epochs", "3")]);
    let s = pipeline::train_classifier(&cfg, false).unwrap();
    let last = read_metrics(&out.path().join("metrics.csv")).unwrap().pop().unwrap();

    let ev = tempfile::tempdir().unwrap();
    let ck = out.path().join("checkpoints/last.ckpt");
    let cfg = config("eval", data.path(), ev.path(), &[("checkpoint", &quoted(&ck))]);
    let a = pipeline::evaluate(&cfg).unwrap();
    assert_eq!(Some(a.macro_f1), last.val_macro_f1);
    assert_eq!(a.macro_f1, s.final_macro_f1);
    assert_eq!(Some(a.loss), last.val_loss);
    assert!(ev.path().join("predictions.csv").is_file());
    assert!(ev.path().join("resolved_config").is_file());

    // Evaluating the best checkpoint reproduces the training run's report.
    let cfg = config("eval", data.path(), ev.path(), &[("checkpoint", &quoted(&out.path().join("checkpoints/best.ckpt")))]);
    pipeline::evaluate(&cfg).unwrap();
    assert_eq!(read(ev.path().join("predictions.csv")), read(out.path().join("predictions.csv")));
}

#[test]
fn untrained_model_scores_at_permutation_chance() {
    let data = corpus(6);
    let out = tempfile::tempdir().unwrap();
    let frozen = [("schedule.kind", "\"fixed\""), ("schedule.init_lr", "0.0"), ("epochs", "1")];
    pipeline::train_classifier(&config("baseline", data.path(), out.path(), &frozen), false).unwrap();
    let ev = tempfile::tempdir().unwrap();
    let ck = quoted(&out.path().join("checkpoints/last.ckpt"));
    let cfg = config("eval", data.path(), ev.path(), &[("checkpoint", &ck), ("eval_split", "\"all\"")]);
    let a = pipeline::evaluate(&cfg).unwrap();

    let truth = pipeline::load_real(&cfg).unwrap().label_matrix();
    let rows: Vec<Vec<bool>> = (0..truth.rows()).map(|r| truth.row(r).to_vec()).collect();
    let mut r = rng::stream(0, "permutation", 0);
    let scores: Vec<f64> = (0..200)
        .map(|_| {
            let mut p = rows.clone();
            p.shuffle(&mut r);
            macro_f1(&a.predictions, &LabelMatrix::from_rows(&p).unwrap()).unwrap()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();
    assert!(
        (a.macro_f1 - mean).abs() <= 3.0 * sd + 1e-3,
        "macro-F1 {} vs permutation chance {mean} (sd {sd})",
        a.macro_f1
    );
}

#[test]
fn mix_modes_run_and_log_lambda() {
    let data = corpus(40);
    let diff = tempfile::tempdir().unwrap();
    let cfg = config("train-diffusion", data.path(), diff.path(), &[("diffusion.epochs", "1")]);
    pipeline::train_diffusion(&cfg, false).unwrap();
    let gen = tempfile::tempdir().unwrap();
    let ck = quoted(&diff.path().join("checkpoints/best.ckpt"));
    let cfg = config("generate", data.path(), gen.path(), &[("diffusion.checkpoint", &ck), ("diffusion.per_class", "1")]);
    assert_eq!(pipeline::generate(&cfg).unwrap(), 28);

    let synthetic = quoted(gen.path());
    for mode in ["mix-rep", "mix-loss", "mix-input"] {
        let out = tempfile::tempdir().unwrap();
        let cfg = config(mode, data.path(), out.path(), &[("synthetic", &synthetic), ("epochs", "2")]);
        let s = pipeline::train_classifier(&cfg, false).unwrap();
        assert_eq!(s.epochs_run, 2, "{mode}");
        let rows = read_metrics(&out.path().join("metrics.csv")).unwrap();
        assert!(rows.iter().all(|r| r.train_loss.is_finite() && r.val_loss.unwrap().is_finite()));
        let stats = read_mix_stats(&out.path().join("mix_stats.csv")).unwrap();
        assert_eq!(stats.len(), 2);
        for (_, lam) in stats {
            assert!((lam - 0.5).abs() < 0.05, "{mode}: mean lambda {lam}");
        }
    }

    let out = tempfile::tempdir().unwrap();
    let err = pipeline::train_classifier(&config("mix-rep", data.path(), out.path(), &[]), false).unwrap_err();
    assert!(err.to_string().contains("generate"), "{err}");
}

#[test]
fn diffusion_epochs_resume_and_log() {
    let data = corpus(2);
    let (whole, stepped) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |out: &Path, epochs: usize, resume: bool| {
        let e = epochs.to_string();
        pipeline::train_diffusion(&config("train-diffusion", data.path(), out, &[("diffusion.epochs", &e)]), resume).unwrap()
    };
    let losses = run(whole.path(), 5, false);
    assert_eq!(losses.len(), 5);
    assert_eq!(read_metrics(&whole.path().join("metrics.csv")).unwrap().len(), 5);

    let mut stamps = Vec::new();
    for epochs in 1..=5 {
        run(stepped.path(), epochs, epochs > 1);
        let meta = fs::metadata(stepped.path().join("checkpoints/last.ckpt")).unwrap();
        stamps.push(meta.modified().unwrap());
    }
    assert!(stamps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(read(whole.path().join("metrics.csv")), read(stepped.path().join("metrics.csv")));
    assert_eq!(
        read(whole.path().join("checkpoints/last.ckpt")),
        read(stepped.path().join("checkpoints/last.ckpt"))
    );
}

#[test]
fn mismatched_checkpoint_is_a_clear_error() {
    let data = corpus(2);
    let out = tempfile::tempdir().unwrap();
    pipeline::train_classifier(&config("baseline", data.path(), out.path(), &[("epochs", "1")]), false).unwrap();
    let ck = quoted(&out.path().join("checkpoints/last.ckpt"));
    let ev = tempfile::tempdir().unwrap();
    let cfg = config("eval", data.path(), ev.path(), &[("checkpoint", &ck), ("backbone.depth", "\"r18\"")]);
    let err = pipeline::evaluate(&cfg).unwrap_err().to_string();
    assert!(err.contains("micro") || err.contains("Micro"), "{err}");
}

#[test]
fn cli_reports_a_missing_data_directory() {
    let out = tempfile::tempdir().unwrap();
    let missing = out.path().join("no-such-corpus");
    for sub in ["train", "train-diffusion"] {
        let res = Command::new(env!("CARGO_BIN_EXE_diffmix"))
            .args([sub, "--data"])
            .arg(&missing)
            .arg("--out")
            .arg(out.path())
            .output()
            .unwrap();
        assert!(!res.status.success());
        let stderr = String::from_utf8_lossy(&res.stderr);
        assert!(stderr.contains(&*missing.to_string_lossy()), "{sub}: {stderr}");
    }
}

#[test]
fn cli_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "seed = 1\n[synth]\nper_class = 3\nsize = 16\n").unwrap();
    let out = dir.path().join("corpus");
    let res = Command::new(env!("CARGO_BIN_EXE_diffmix"))
        .arg("synth-data")
        .arg("--config")
        .arg(&file)
        .args(["--per-class", "1", "--seed", "9", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let cfg = RunConfig::resolve(Some(&out.join("resolved_config")), &[]).unwrap();
    assert_eq!((cfg.seed, cfg.synth.per_class, cfg.synth.size), (9, 1, 16));
    assert_eq!(fs::read_to_string(out.join("train.csv")).unwrap().lines().count(), 29);

    let res = Command::new(env!("CARGO_BIN_EXE_diffmix"))
        .args(["synth-data", "--set", "no_such_key=1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!res.status.success());
}
