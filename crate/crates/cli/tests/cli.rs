use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use paw_core::netspec::{presets, save};
use paw_core::frl::FrlNetwork;
use paw_core::synthgen::{generate, SplitCounts, SyntheticSpec};
use serde_json::Value;

fn paw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paw"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn paw")
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 1, "stdout: {stdout}");
    serde_json::from_str(stdout.trim()).expect("summary is JSON")
}

/// Overrides for a run small enough to finish in seconds.
const TINY: &[&str] = &[
    "--set", "train_count=48",
    "--set", "val_count=16",
    "--set", "test_count=16",
    "--set", "frl_epochs=1",
    "--set", "hint_epochs=1",
    "--set", "attr_epochs=1",
    "--set", "part_epochs=1",
    "--set", "fusion_epochs=2",
    "--set", "finetune_epochs=1",
    "--set", "batch_size=16",
];

fn tiny_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    TINY.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = paw(dir.path(), &["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
    assert_eq!(paw(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = paw(dir.path(), &["gen-data", "--set", "learning_rate=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_is_named_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = paw(dir.path(), &tiny_args(&["compress"]));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("frl.pawc"), "{stderr}");
}

#[test]
fn grad_check_passes_on_the_default_localization_net() {
    let dir = tempfile::tempdir().unwrap();
    let out = paw(dir.path(), &["grad-check", "--net", "frl-desk", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert!(s["result"]["max_rel_err"].as_f64().unwrap() < 1e-5);
    let names: Vec<&str> = s["result"]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    for want in ["conv2d", "maxpool2d", "gap", "group_linear", "hint_loss", "attr_loss", "rsl", "arl"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
}

#[test]
fn heatmap_writes_a_p5_image() {
    let dir = tempfile::tempdir().unwrap();
    let spec = presets::desk_frl(6, 8);
    let frl = FrlNetwork::<f32>::new(&spec, None, 3).unwrap();
    save(&frl.net, &dir.path().join("frl.pawc")).unwrap();
    let data = generate(
        &SyntheticSpec {
            counts: SplitCounts { train: 1, val: 1, test: 1 },
            ..Default::default()
        },
        2,
    )
    .unwrap();
    data.test.samples[0].to_image8().save(&dir.path().join("img.ppm")).unwrap();
    let args = ["heatmap", "--ckpt", "frl.pawc", "--image", "img.ppm", "--attr", "3", "--out", "h.pgm"];
    let out = paw(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(dir.path().join("h.pgm")).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 64 * 64);
    assert_eq!(summary(&out)["result"]["width"], 64);

    let out = paw(dir.path(), &["heatmap", "--ckpt", "frl.pawc", "--image", "img.ppm", "--attr", "6", "--out", "x.pgm"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |d: &str| {
        let out = paw(dir.path(), &tiny_args(&["--set", &format!("data_dir={d}"), "gen-data"]));
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        summary(&out)["result"].clone()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a["counts"], b["counts"]);
    assert_eq!(a["train_positive_rates"], b["train_positive_rates"]);
    for f in ["train.csv", "val.csv", "test.csv", "train/00000.ppm", "test/00015.ppm"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

/// Two full runs from the same config agree byte for byte, and the resolved
/// config written by the first reproduces it when fed back.
#[test]
fn all_stages_reproduce_from_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = paw(dir.path(), &tiny_args(&["--set", "run_dir=r1", "--set", "seed=4", "all"]));
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let resolved = fs::read_to_string(dir.path().join("r1/resolved.conf")).unwrap();
    fs::write(dir.path().join("again.conf"), resolved.replace("run_dir = r1", "run_dir = r2")).unwrap();
    let second = paw(dir.path(), &["--config", "again.conf", "all"]);
    assert_eq!(second.status.code(), Some(0), "{}", String::from_utf8_lossy(&second.stderr));
    assert_eq!(summary(&first), summary(&second));
    for f in ["frl.pawc", "whole.pawc", "parts.pawc", "fusion.pawc", "paw.pawc", "rsl.csv", "accuracy.csv"] {
        assert_eq!(
            fs::read(dir.path().join("r1").join(f)).unwrap(),
            fs::read(dir.path().join("r2").join(f)).unwrap(),
            "{f} differs"
        );
    }

    let out = paw(dir.path(), &["dump-weights", "--ckpt", "r1/paw.pawc", "--out", "dump"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(&out)["result"]["written"].as_array().unwrap().len(), 2);
    let rsl = fs::read_to_string(dir.path().join("dump/rsl.csv")).unwrap();
    assert_eq!(rsl.lines().count(), 1 + 7);
}
