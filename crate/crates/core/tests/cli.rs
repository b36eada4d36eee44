use dpldm::checkpoint::{Checkpoint, SectionKind};
use dpldm::config::{RunConfig, SyntheticData};
use dpldm::pipeline::{AUTOENCODER, FINETUNED, PRETRAINED, PRIVATE, PUBLIC};
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dpldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpldm")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json_line(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("output line")).expect("json output")
}

/// A run small enough to push through every stage in seconds.
fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::synthetic(dir, 0);
    cfg.data.synthetic = Some(SyntheticData { public_n: 48, private_n: 32, test_n: 16, size: 8, seed: 0 });
    cfg.autoencoder.epochs = 1;
    cfg.autoencoder.base_width = 4;
    cfg.diffusion.steps = 8;
    cfg.diffusion.epochs = 1;
    cfg.diffusion.channels = [4, 8];
    cfg.diffusion.time_dim = 8;
    cfg.diffusion.cond_dim = 4;
    cfg.finetune.batch_size = 8;
    cfg.finetune.epochs = 2;
    cfg.finetune.microbatch = 3;
    cfg.sample.count = 8;
    cfg.eval.feature_dim = 4;
    cfg.eval.classifier_epochs = 1;
    cfg
}

fn write_config(cfg: &RunConfig) -> PathBuf {
    std::fs::create_dir_all(&cfg.out_dir).unwrap();
    let path = cfg.out_dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Value {
    let o = dpldm(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    json_line(&o)
}

fn through_pretrain(cfg_path: &str) {
    for stage in ["ingest", "train-ae", "pretrain-dm"] {
        run_ok(&[stage, "-c", cfg_path]);
    }
}

fn write_png(path: &Path, w: u32, h: u32, shade: u8) {
    let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([shade.wrapping_add((x * 7 + y * 3) as u8)]));
    img.save(path).unwrap();
}

#[test]
fn ingest_directory_of_pngs() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    for (i, name) in ["d.png", "a.png", "c.png", "b.png"].iter().enumerate() {
        write_png(&imgs.join(name), 8, 8, 40 * i as u8);
    }
    let out = tmp.path().join("x.dsa");
    let summary = run_ok(&["ingest", "--input", imgs.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(summary["n"], 4);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(bytes.len() - 22, 4 * 64 + 8);
    // lexicographic order: the first image is a.png, written second
    let first = image::open(imgs.join("a.png")).unwrap().to_luma8().into_raw();
    assert_eq!(&bytes[22..22 + 64], &first[..]);

    let again = tmp.path().join("y.dsa");
    run_ok(&["ingest", "--input", imgs.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    write_png(&imgs.join("e.png"), 6, 8, 0);
    let o = dpldm(&["ingest", "--input", imgs.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ingest_synthetic_is_class_balanced() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s.dsa");
    let s = run_ok(&["ingest", "--synthetic", "private", "--n", "10", "--size", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(s["classes"], serde_json::json!([5, 5]));
}

#[test]
fn config_errors_exit_2() {
    let o = dpldm(&["train-ae", "-c", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 2);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "version = 1\nseed = 0\nout_dir = \"x\"\nmystery = true\n").unwrap();
    assert_eq!(code(&dpldm(&["ingest", "-c", bad.to_str().unwrap()])), 2);
    // a stage whose inputs are missing
    let cfg = tiny_config(&tmp.path().join("run"));
    let p = write_config(&cfg);
    assert_eq!(code(&dpldm(&["pretrain-dm", "-c", p.to_str().unwrap()])), 2);
}

#[test]
fn account_and_calibrate() {
    let a = run_ok(&["account", "--q", "0.0333333333333", "--sigma", "1.47", "--steps", "6000"]);
    let eps = a["epsilon"].as_f64().unwrap();
    assert!((8.5..=11.5).contains(&eps), "{eps}");
    let c = run_ok(&["calibrate", "--epsilon", "2", "--n", "2048", "--batch", "512", "--epochs", "10"]);
    assert_eq!(c["steps"], 40);
    assert!((c["epsilon"].as_f64().unwrap() - 2.0).abs() < 2e-3);
    assert_eq!(code(&dpldm(&["calibrate", "--epsilon", "0.0001", "--q", "0.1", "--steps", "10"])), 2);
}

#[test]
fn full_run_is_reproducible_and_verifiable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("run"));
    let p = write_config(&cfg);
    let p = p.to_str().unwrap();
    through_pretrain(p);
    let ft = run_ok(&["finetune-dp", "-c", p]);
    assert_eq!(ft["summary"]["stamped"], true);
    let eps = ft["summary"]["epsilon"].as_f64().unwrap();
    assert!((eps - 10.0).abs() <= 0.1, "{eps}");

    let snapshot = |name: &str| std::fs::read(cfg.out_dir.join(name)).unwrap();
    let first: Vec<Vec<u8>> = [PUBLIC, PRIVATE, AUTOENCODER, PRETRAINED, FINETUNED].iter().map(|n| snapshot(n)).collect();
    through_pretrain(p);
    run_ok(&["finetune-dp", "-c", p]);
    for (name, bytes) in [PUBLIC, PRIVATE, AUTOENCODER, PRETRAINED, FINETUNED].iter().zip(&first) {
        assert!(snapshot(name) == *bytes, "{name} differs after re-run");
    }

    let ck = cfg.out_dir.join(FINETUNED);
    let v = run_ok(&["account", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(v["verified"], true);
    assert_eq!(v["epsilon"].as_f64().unwrap(), eps);

    run_ok(&["sample", "-c", p]);
    let s1 = snapshot("samples-finetuned.dsa");
    run_ok(&["sample", "-c", p]);
    assert!(snapshot("samples-finetuned.dsa") == s1);
    let f = run_ok(&["eval", "fid", "-c", p]);
    assert!(f["summary"]["fid"].as_f64().unwrap() >= 0.0);
    let d = run_ok(&["eval", "dpfid", "-c", p]);
    assert!(d["summary"]["dp_fid"].as_f64().is_some(), "{d}");
    run_ok(&["sample", "-c", p, "--source", "pretrained", "--count", "4"]);
    run_ok(&["eval", "classifier", "-c", p, "--source", "pretrained"]);
}

#[test]
fn resume_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("run"));
    let p = write_config(&cfg);
    let p = p.to_str().unwrap();
    through_pretrain(p);
    run_ok(&["finetune-dp", "-c", p]);
    let whole = std::fs::read(cfg.out_dir.join(FINETUNED)).unwrap();
    std::fs::remove_file(cfg.out_dir.join(FINETUNED)).unwrap();

    let part = run_ok(&["finetune-dp", "-c", p, "--stop-after", "3"]);
    assert_eq!(part["summary"]["interrupted_at"], 3);
    assert!(!cfg.out_dir.join(FINETUNED).exists());
    run_ok(&["finetune-dp", "-c", p, "--resume"]);
    assert!(std::fs::read(cfg.out_dir.join(FINETUNED)).unwrap() == whole);
}

#[test]
fn budget_mismatch_refuses_to_stamp() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("run"));
    cfg.finetune.sigma = Some(0.8);
    let p = write_config(&cfg);
    let p = p.to_str().unwrap();
    through_pretrain(p);
    let o = dpldm(&["finetune-dp", "-c", p]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = Checkpoint::load(&cfg.out_dir.join(FINETUNED)).unwrap();
    let sec = ck.section(SectionKind::Diffusion).unwrap();
    assert!(sec.meta("dp_epsilon").is_err());
    assert!(sec.meta("dp_refused").is_ok());
    assert_eq!(code(&dpldm(&["account", "--checkpoint", cfg.out_dir.join(FINETUNED).to_str().unwrap()])), 2);
}

#[test]
fn empty_trainable_spec_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("run"));
    cfg.finetune.trainable = "none".into();
    let p = write_config(&cfg);
    let p = p.to_str().unwrap();
    through_pretrain(p);
    let ft = run_ok(&["finetune-dp", "-c", p]);
    assert_eq!(ft["summary"]["trainable_fraction"], 0.0);
    assert_eq!(ft["summary"]["steps"], 8);
    assert!(ft["summary"]["epsilon"].as_f64().unwrap() > 0.0);
    let store = |name: &str| {
        let ck = Checkpoint::load(&cfg.out_dir.join(name)).unwrap();
        ck.section(SectionKind::Diffusion).unwrap().store().unwrap()
    };
    assert!(store(FINETUNED).changed_between(&store(PRETRAINED)).is_empty());
}

#[test]
fn labels_on_unconditional_model_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&tmp.path().join("run"));
    cfg.diffusion.conditional = false;
    cfg.finetune.trainable = "all-attn".into();
    cfg.sample.count = 16;
    cfg.sample.source = "pretrained".into();
    let p = write_config(&cfg);
    let p = p.to_str().unwrap();
    through_pretrain(p);
    let o = dpldm(&["sample", "-c", p]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    run_ok(&["sample", "-c", p, "--unlabeled"]);
}

#[test]
fn concurrent_stage_is_locked_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("run"));
    let p = write_config(&cfg);
    std::fs::write(cfg.out_dir.join(".lock"), b"").unwrap();
    assert_eq!(code(&dpldm(&["ingest", "-c", p.to_str().unwrap()])), 2);
    std::fs::remove_file(cfg.out_dir.join(".lock")).unwrap();
    run_ok(&["ingest", "-c", p.to_str().unwrap()]);
    assert!(!cfg.out_dir.join(".lock").exists());
}

#[test]
fn shipped_config_matches_library_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.to_toml(), RunConfig::synthetic("runs/desk", 0).to_toml());
}
