use std::path::Path;
use std::process::{Command, Output};

use panlut::formats::{load_model, load_msr, save_msr, SampleType};
use panlut::pipeline::{sharpen, PanLutModel};
use panlut::resample::degrade;
use panlut::stages::SdMode;
use panlut::MultiBandImage;

fn panlut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panlut"))
        .args(args)
        .env_remove("PANLUT_THREADS")
        .output()
        .expect("spawn panlut")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn synth(dir: &Path, size: &str) {
    let out = panlut(&[
        "synth",
        "--size",
        size,
        "--out-hrms",
        &p(dir, "hrms.msr"),
        "--out-pan",
        &p(dir, "pan.msr"),
        "--out-ms",
        &p(dir, "ms.msr"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn print_config_is_json_with_defaults() {
    let out = panlut(&["--print-config"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["points"], 9);
    assert_eq!(v["ratio"], 4);
    assert_eq!(v["epochs"], 1000);
    assert_eq!(v["lambda_m"], 10.0);
    assert_eq!(v["sd_mode"], "chained");
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&panlut(&["--help"])), 0);
    assert_eq!(code(&panlut(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&panlut(&["no-such-command"])), 1);
    assert_eq!(code(&panlut(&["sharpen", "--model", "m"])), 1);
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "32");
    // a training pair needs --gt or --wald
    let out = panlut(&["train", "--pan", &p(dir.path(), "pan.msr"), "--out", &p(dir.path(), "m.panlut")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn io_and_format_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = panlut(&["lut", "inspect", &p(d, "missing.panlut")]);
    assert_eq!(code(&missing), 2);
    std::fs::write(d.join("junk.panlut"), b"not a model").unwrap();
    assert_eq!(code(&panlut(&["lut", "inspect", &p(d, "junk.panlut")])), 2);
}

#[test]
fn shape_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "32");
    assert_eq!(code(&panlut(&["lut", "init", "--points", "5", "--out", &p(d, "id.panlut")])), 0);
    // HRMS is 4x the MS size, so using it as MS breaks the PAN/MS ratio
    let out = panlut(&[
        "sharpen",
        "--model",
        &p(d, "id.panlut"),
        "--pan",
        &p(d, "pan.msr"),
        "--ms",
        &p(d, "hrms.msr"),
        "--out",
        &p(d, "f.msr"),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_epochs_gives_identity_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "32");
    let out = panlut(&[
        "train",
        "--wald",
        "--gt",
        &p(d, "hrms.msr"),
        "--pan",
        &p(d, "pan.msr"),
        "--epochs",
        "0",
        "--points",
        "5",
        "--out",
        &p(d, "m.panlut"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = load_model(&d.join("m.panlut")).unwrap();
    assert_eq!(model, PanLutModel::identity(5, SdMode::Chained).unwrap());
}

#[test]
fn trained_model_reloads_and_sharpens_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "32");
    let out = panlut(&[
        "train",
        "--wald",
        "--gt",
        &p(d, "hrms.msr"),
        "--pan",
        &p(d, "pan.msr"),
        "--epochs",
        "2",
        "--points",
        "5",
        "--sd-mode",
        "ensemble",
        "--out",
        &p(d, "m.panlut"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(d.join("m.panlut.log.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tlr\tloss\tfidelity\tsmooth\tmono\tpsnr");
    assert_eq!(lines.len(), 3);

    let out = panlut(&[
        "sharpen",
        "--model",
        &p(d, "m.panlut"),
        "--pan",
        &p(d, "pan.msr"),
        "--ms",
        &p(d, "ms.msr"),
        "--out",
        &p(d, "fused.msr"),
        "--dtype",
        "f32",
        "--vmax",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = load_model(&d.join("m.panlut")).unwrap();
    assert_eq!(model.sd_mode(), SdMode::Ensemble);
    let (pan, _) = load_msr(&d.join("pan.msr")).unwrap();
    let (ms, _) = load_msr(&d.join("ms.msr")).unwrap();
    let want = sharpen(&model, &pan, &ms).unwrap();
    let (got, hdr) = load_msr(&d.join("fused.msr")).unwrap();
    assert_eq!(hdr.dtype, SampleType::F32);
    for (a, b) in got.samples().iter().zip(want.samples()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn synth_out_ms_matches_degrade() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = panlut(&[
        "synth",
        "--size",
        "32",
        "--dtype",
        "f32",
        "--vmax",
        "1",
        "--out-hrms",
        &p(d, "hrms.msr"),
        "--out-pan",
        &p(d, "pan.msr"),
        "--out-ms",
        &p(d, "ms.msr"),
    ]);
    assert_eq!(code(&out), 0);
    let (hrms, _) = load_msr(&d.join("hrms.msr")).unwrap();
    let (ms, _) = load_msr(&d.join("ms.msr")).unwrap();
    let want = degrade(&hrms, 4).unwrap();
    assert_eq!((ms.width(), ms.height(), ms.bands()), (8, 8, 4));
    for (a, b) in ms.samples().iter().zip(want.samples()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn eval_reports_json_and_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img = MultiBandImage::from_samples(16, 16, 4, (0..1024).map(|i| (i % 97) as f64 / 97.0 + 0.01).collect())
        .unwrap();
    save_msr(&d.join("a.msr"), &img, SampleType::F32, 1).unwrap();
    let out = panlut(&["eval", "--pred", &p(d, "a.msr"), "--gt", &p(d, "a.msr")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["psnr"], 100.0);
    assert_eq!(v["sam"], 0.0);
    assert!(v["qnr"].is_null());
    let out = panlut(&["eval", "--tsv", "--pred", &p(d, "a.msr"), "--gt", &p(d, "a.msr")]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().ends_with("NA\tNA\tNA"));
}

#[test]
fn threads_env_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_panlut"))
        .args(["lut", "init", "--points", "3", "--out", &p(d, "id.panlut")])
        .env("PANLUT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}
