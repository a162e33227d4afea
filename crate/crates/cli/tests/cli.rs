use std::path::Path;
use std::process::{Command, Output};

fn mspe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspe")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = mspe(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    out
}

#[test]
fn every_subcommand_documents_its_flags() {
    let common = ["--config", "--help"];
    let data = ["--images", "--labels", "--per-class", "--classes", "--data-seed"];
    let optim = [
        "--learning-rate",
        "--momentum",
        "--weight-decay",
        "--batch-size",
        "--epochs",
        "--base-resolution",
        "--precision",
        "--history",
    ];
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("gen-data", vec!["--out", "--resolution", "--per-class", "--classes", "--seed"]),
        (
            "pretrain",
            [
                &["--seed", "--out", "--accuracy-margin", "--dim", "--depth", "--heads", "--mlp-ratio", "--grid"][..],
                &data,
                &optim,
            ]
            .concat(),
        ),
        (
            "mspe-train",
            [
                &["--seed", "--checkpoint", "--out", "--lambda", "--kernels", "--resolutions", "--method"][..],
                &data,
                &optim,
            ]
            .concat(),
        ),
        (
            "eval",
            [
                &[
                    "--seed",
                    "--checkpoint",
                    "--out",
                    "--modes",
                    "--square",
                    "--fixed-height",
                    "--widths",
                    "--resolutions",
                    "--method",
                ][..],
                &data,
            ]
            .concat(),
        ),
        (
            "diag-sim",
            [
                &["--seed", "--checkpoint", "--out-dir", "--low", "--high", "--samples", "--modes", "--method"][..],
                &data,
            ]
            .concat(),
        ),
        ("inspect-resize", vec!["--src", "--dst", "--method", "--matrix", "--out"]),
    ];
    for (sub, flags) in cases {
        let help = stdout(&ok(&[sub, "--help"]));
        for flag in flags.iter().chain(&common) {
            assert!(help.contains(flag), "`{sub} --help` does not mention {flag}:\n{help}");
        }
        assert!(help.contains("--verbose"));
    }
}

#[test]
fn inspect_resize_prints_bilinear_axis_matrix() {
    let out = ok(&["inspect-resize", "--src", "2", "--dst", "4", "--method", "bilinear"]);
    assert_eq!(stdout(&out), "1,0\n0.75,0.25\n0.25,0.75\n0,1\n");
}

fn label_count(prefix: &Path) -> usize {
    let bytes = std::fs::read(format!("{}-labels.idx", prefix.display())).unwrap();
    u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize
}

fn image_side(prefix: &Path) -> usize {
    let bytes = std::fs::read(format!("{}-images.idx", prefix.display())).unwrap();
    u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    std::fs::write(&cfg, "# data settings\nper_class = 3\nresolution = 12\n").unwrap();
    let prefix = |name: &str| dir.path().join(name);

    let p = prefix("defaults");
    ok(&["gen-data", "--out", p.to_str().unwrap()]);
    assert_eq!((label_count(&p), image_side(&p)), (400, 32));

    let p = prefix("file");
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", p.to_str().unwrap()]);
    assert_eq!((label_count(&p), image_side(&p)), (12, 12));

    let p = prefix("flag");
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--per-class", "2", "--out", p.to_str().unwrap()]);
    assert_eq!((label_count(&p), image_side(&p)), (8, 12));
}

fn assert_usage_error(out: &Output) {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(out));
    assert!(!stderr(out).trim().is_empty());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out_path = dir.path().join("out.ckpt");
    let (missing, out_path) = (missing.to_str().unwrap(), out_path.to_str().unwrap());

    assert_usage_error(&mspe(&["mspe-train", "--checkpoint", missing, "--out", out_path]));
    assert!(stderr(&mspe(&["mspe-train", "--checkpoint", missing, "--out", out_path])).contains("--seed"));
    assert_usage_error(&mspe(&["eval", "--seed", "1", "--checkpoint", missing]));
    assert_usage_error(&mspe(&["inspect-resize", "--src", "2", "--dst", "4", "--bogus"]));
    assert_usage_error(&mspe(&["no-such-command"]));
    let out = mspe(&["mspe-train", "--seed", "1", "--checkpoint", missing, "--out", out_path]);
    assert_usage_error(&out);
    assert_eq!(stderr(&out).lines().count(), 1);
    assert!(stderr(&out).starts_with("error[usage]:"));
}

#[test]
fn runtime_errors_are_one_machine_parsable_line() {
    let out = mspe(&["inspect-resize", "--src", "0", "--dst", "4"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[invalid-argument]:"), "{err}");
}

#[test]
fn tiny_pipeline_square_sweep_has_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let tiny = ["--per-class", "4", "--epochs", "1", "--batch-size", "8"];
    ok(&[&["pretrain", "--seed", "3", "--out", &path("pre.ckpt"), "--dim", "8", "--heads", "2"][..], &tiny].concat());
    ok(&[&["mspe-train", "--seed", "3", "--checkpoint", &path("pre.ckpt"), "--out", &path("mspe.ckpt")][..], &tiny].concat());
    ok(&[
        "eval",
        "--seed",
        "3",
        "--checkpoint",
        &path("mspe.ckpt"),
        "--modes",
        "mspe",
        "--square",
        "16:64:16",
        "--per-class",
        "2",
        "--out",
        &path("sweep.csv"),
    ]);
    let csv = std::fs::read_to_string(path("sweep.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "mode,height,width,top1,loss,n");
    assert_eq!(lines.len(), 5);
    for (line, side) in lines[1..].iter().zip([16, 32, 48, 64]) {
        assert!(line.starts_with(&format!("mspe,{side},{side},")), "{line}");
        assert!(line.ends_with(",8"), "{line}");
    }
    let meta = std::fs::read_to_string(path("sweep.csv.meta")).unwrap();
    assert!(meta.contains("seed"));

    // the pretrained checkpoint has no bank: recorded as failed cells
    ok(&[
        "eval",
        "--seed",
        "3",
        "--checkpoint",
        &path("pre.ckpt"),
        "--modes",
        "vanilla,mspe",
        "--fixed-height",
        "16",
        "--widths",
        "16:32:16",
        "--per-class",
        "2",
        "--out",
        &path("aspect.csv"),
    ]);
    let csv = std::fs::read_to_string(path("aspect.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().filter(|l| l.ends_with("error,error,0")).count(), 2);
}
