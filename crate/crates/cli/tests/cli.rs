use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eddyseg_core::checkpoint::{self, InputPipeline};
use eddyseg_core::data::{write_sample, NormStats, Sample};
use eddyseg_core::net::{Network, NetworkSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn eddyseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eddyseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = eddyseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str) {
    ok(&[
        "gen", "--out", p(dir), "--n-train", "4", "--n-test", "2", "--size", "32", "--seed", seed,
    ]);
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen", "--out", p(d.path()), "--n-train", "0"],
        vec!["gen", "--out", p(d.path()), "--n-train", "3", "--size", "50"],
        vec!["train", "--data", "m.json", "--out", "w.bin", "--loss", "focal"],
        vec!["train", "--data", "m.json", "--out", "w.bin", "--dilation", "maybe"],
        vec!["segment", "--input", "x.eddy"],
        vec!["frobnicate"],
    ] {
        assert_eq!(eddyseg(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.json");
    let out = eddyseg(&["eval", "--data", p(&missing), "--weights", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let bad = eddyseg(&["train", "--data", p(&missing), "--out", "w.bin", "--channels", "salinity"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gen_is_deterministic_and_sized() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_small(a.path(), "7");
    gen_small(b.path(), "7");
    gen_small(c.path(), "8");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 4 + 2 + 1);
    assert_eq!(ta, tb);
    assert_ne!(ta, tree(c.path()));
    let m: Value = serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["splits"]["train"], 4);
    assert_eq!(m["splits"]["test"], 2);
    assert_eq!(fs::metadata(a.path().join("train/00000.eddy")).unwrap().len(), 16 + 32 * 32 * 17);
}

#[test]
fn train_eval_segment_round() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "3");
    let manifest = d.path().join("manifest.json");
    let ckpt = d.path().join("w.edyw");
    ok(&[
        "train", "--data", p(&manifest), "--epochs", "2", "--batch", "2", "--seed", "1", "--out", p(&ckpt), "--quiet",
    ]);
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"EDYW");
    let history = fs::read_to_string(d.path().join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("epoch,loss,ce,dice_loss,train_acc,val_acc,lr"));
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f.len(), 7);
        assert!((f[1] - (f[2] - (1.0 - f[3]).ln())).abs() < 1e-6, "{line}");
    }

    let report: Value = serde_json::from_str(&ok(&["eval", "--data", p(&manifest), "--weights", p(&ckpt)])).unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["samples"], 2);
    let (ce, dl, comb) = (
        report["ce"].as_f64().unwrap(),
        report["dice_loss"].as_f64().unwrap(),
        report["combined"].as_f64().unwrap(),
    );
    assert!((comb - (ce - (1.0 - dl).ln())).abs() < 1e-9);
    let confusion: u64 = report["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(confusion, 2 * 32 * 32);

    let mask = d.path().join("mask.pgm");
    ok(&["segment", "--input", p(&d.path().join("test/00001.eddy")), "--weights", p(&ckpt), "--out", p(&mask)]);
    let bytes = fs::read(&mask).unwrap();
    assert_eq!(&bytes[..13], b"P5\n32 32\n255\n");
    let pixels = &bytes[13..];
    assert_eq!(pixels.len(), 32 * 32);
    assert!(pixels.iter().all(|v| [0, 128, 255].contains(v)));
    let info: Value = serde_json::from_slice(&fs::read(d.path().join("mask.json")).unwrap()).unwrap();
    let count = |g: u8| pixels.iter().filter(|&&v| v == g).count() as u64;
    assert_eq!(info["counts"]["cyclonic"], count(0));
    assert_eq!(info["counts"]["background"], count(128));
    assert_eq!(info["counts"]["anticyclonic"], count(255));
    assert_eq!((info["width"].as_u64(), info["height"].as_u64()), (Some(32), Some(32)));
}

fn biased_checkpoint(path: &Path, in_channels: usize, favour: usize) {
    let spec = NetworkSpec { in_channels, ..NetworkSpec::default() };
    let mut net = Network::<f32>::build(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for p in net.params_mut() {
        if p.name == "head.w" {
            p.tensor.data_mut().fill(0.0);
        }
        if p.name == "head.b" {
            p.tensor.data_mut()[favour] = 50.0;
        }
    }
    let pipeline = InputPipeline { channels: (0..in_channels).collect(), stats: NormStats::default() };
    checkpoint::save(path, &net, &pipeline).unwrap();
}

fn flat_sample(path: &Path, size: usize) {
    let s = Sample::new(size, size, vec![0.5; 4 * size * size], vec![0; size * size]).unwrap();
    write_sample(&s, path).unwrap();
}

#[test]
fn all_background_mask_is_uniform_128() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, input, mask) = (d.path().join("w"), d.path().join("s.eddy"), d.path().join("m.pgm"));
    biased_checkpoint(&ckpt, 4, 0);
    flat_sample(&input, 48);
    ok(&["segment", "--input", p(&input), "--weights", p(&ckpt), "--out", p(&mask)]);
    let bytes = fs::read(&mask).unwrap();
    assert_eq!(&bytes[..13], b"P5\n48 48\n255\n");
    assert!(bytes[13..].iter().all(|&v| v == 128));
    assert_eq!(bytes.len(), 13 + 48 * 48);
}

#[test]
fn segment_rejects_sizes_off_the_pooling_grid() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, input) = (d.path().join("w"), d.path().join("s.eddy"));
    biased_checkpoint(&ckpt, 4, 0);
    flat_sample(&input, 24);
    let out = eddyseg(&["segment", "--input", p(&input), "--weights", p(&ckpt), "--out", p(&d.path().join("m.pgm"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiples of 16"));
}

#[test]
fn ssh_only_training_builds_one_input_channel() {
    let d = tempfile::tempdir().unwrap();
    gen_small(d.path(), "5");
    let ckpt = d.path().join("ssh.edyw");
    ok(&[
        "train", "--data", p(&d.path().join("manifest.json")), "--channels", "ssh", "--dilation", "off", "--epochs", "1",
        "--batch", "4", "--out", p(&ckpt), "--quiet",
    ]);
    let (net, pipeline) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(pipeline.channels, vec![0]);
    assert_eq!(net.spec().in_channels, 1);
    assert_eq!(net.spec().dilation, 1);
    assert_eq!(net.params()[0].tensor.dims(), [8, 1, 3, 3]);
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let out = ok(&["gradcheck"]);
    for op in ["conv2d", "conv_transpose2d", "batchnorm2d", "network"] {
        assert!(out.lines().any(|l| l.starts_with(op) && l.ends_with("pass")), "{out}");
    }
    assert!(out.contains("all ops pass"));
    let bad = eddyseg(&["gradcheck", "--instances", "1", "--inject-fault", "softmax"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8(bad.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("softmax") && l.ends_with("FAIL")), "{text}");
}
