use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pmri_cli::manifest::Manifest;
use pmri_core::complex::C64;
use pmri_core::cplx::Tensor;

const TINY: &str = r#"
[dataset]
height = 32
width = 32
groups = 2
series = 2
slices_per_series = 1
phantom = "shepp_logan"
accel = 4
acs = 8
noise_std = 0.0
seed = 3

[dataset.coil]
coils = 4
falloff = 14.0
ring_radius = 22.0
seed = 1

[split]
test_groups = [1]

[shift]
acs = 4
seeds = [7]

[model]
csm_channels = [4, 8]
denoiser_channels = [4, 8]

[train]
epochs = 2
batch = 2
seed = 5
"#;

fn pmri(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmri"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PMRI_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("tiny{seed}.toml"));
    fs::write(&path, TINY.replace("seed = 3", &format!("seed = {seed}"))).unwrap();
    path
}

fn simulated(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("ds{seed}"));
    let cfg = tiny_config(dir, seed);
    let r = pmri(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    out
}

fn decode_png(path: &Path) -> (u32, u32, Vec<u8>) {
    let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Grayscale);
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[test]
fn dry_run_prints_stages_without_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = tiny_config(tmp.path(), 3);
    let r = pmri(&["pipeline", "--config", s(&cfg), "--out", s(&root), "--dry-run"]);
    assert_eq!(code(&r), 0);
    let text = String::from_utf8(r.stdout).unwrap();
    for stage in ["simulate", "calibrate", "train", "evaluate"] {
        assert!(text.contains(stage), "{text}");
    }
    assert!(!root.exists());
}

#[test]
fn simulate_creates_missing_dirs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 3);
    let out = tmp.path().join("a/b/c");
    assert_eq!(code(&pmri(&["simulate", "--config", s(&cfg), "--out", s(&out)])), 0);
    let first = fs::read(out.join("manifest.json")).unwrap();
    let m: Manifest = serde_json::from_slice(&first).unwrap();
    assert_eq!(m.slices.len(), 4);
    assert_eq!(m.slices.iter().filter(|e| e.holdout).count(), 2);
    assert!(m.files.contains_key("mask.cplx"));
    assert_eq!(m.seeds["dataset"], 3);

    let again = pmri(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&pmri(&["simulate", "--config", s(&cfg), "--out", s(&out), "--force"])), 0);
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), first);
}

#[test]
fn force_never_clears_foreign_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 3);
    let foreign = tmp.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("notes.txt"), "mine").unwrap();
    let r = pmri(&["simulate", "--config", s(&cfg), "--out", s(&foreign), "--force"]);
    assert_eq!(code(&r), 2);
    assert_eq!(fs::read_to_string(foreign.join("notes.txt")).unwrap(), "mine");
}

#[test]
fn stages_refuse_to_mix_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulated(tmp.path(), 3);
    let b = simulated(tmp.path(), 4);
    let model = tmp.path().join("model");
    let r = pmri(&["train", "--dataset", s(&a), "--epochs", "1", "--out", s(&model)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["params.bin", "model.json", "loss_log.csv", "checkpoints/epoch_001.bin"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(model.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("epoch,L_img,L_ksp,total,lambda\n1,"));

    let ok = pmri(&["evaluate", "--dataset", s(&a), "--model", s(&model), "--out", s(&tmp.path().join("ev_a"))]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let ev_b = tmp.path().join("ev_b");
    let r = pmri(&["evaluate", "--dataset", s(&b), "--model", s(&model), "--out", s(&ev_b)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("refusing to mix"));
    assert!(!ev_b.exists());

    // a tensor edited after the fact is caught by the manifest
    let t = Tensor::new(vec![2, 2], vec![C64::new(1.0, 0.0); 4]).unwrap();
    t.save(a.join("slices/g01_e0_s000_truth.cplx")).unwrap();
    let r = pmri(&["evaluate", "--dataset", s(&a), "--model", s(&model), "--out", s(&tmp.path().join("ev_c"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn evaluate_outputs_and_missing_model() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = simulated(tmp.path(), 3);
    let out = tmp.path().join("ev");
    let r = pmri(&["evaluate", "--dataset", s(&ds), "--methods", "zf,sense", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with("slice_id,method,input_kind,psnr_db,ssim,runtime_ms\n"));
    // 2 methods x 2 mask kinds x 2 held-out slices
    assert_eq!(report.lines().count(), 1 + 8);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,input_kind,psnr_mean,psnr_std,ssim_mean,ssim_std\n"));
    assert!(fs::read_to_string(out.join("summary.md")).unwrap().contains(" ± "));
    assert!(!out.join("acs_shift.csv").exists());

    let r = pmri(&["evaluate", "--dataset", s(&ds), "--out", s(&tmp.path().join("ev2"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn calibrate_and_reconstruct_write_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = simulated(tmp.path(), 3);
    let cal = tmp.path().join("cal");
    let r = pmri(&["calibrate", "--dataset", s(&ds), "--slice", "g00_e0_s000", "--out", s(&cal)]);
    assert_eq!(code(&r), 0);
    let maps = Tensor::load(cal.join("maps_est.cplx")).unwrap();
    assert_eq!(maps.dims, vec![4, 32, 32]);

    let mut dims = Vec::new();
    for method in ["zf", "sense", "dc"] {
        let out = tmp.path().join(method);
        let mut args = vec!["reconstruct", "--dataset", s(&ds), "--slice", "g00_e0_s000", "--method", method];
        let maps_path = cal.join("maps_est.cplx");
        if method == "dc" {
            args.extend(["--maps", s(&maps_path), "--lambda", "0.5"]);
        }
        args.extend(["--out", s(&out)]);
        let r = pmri(&args);
        assert_eq!(code(&r), 0, "{method}: {}", String::from_utf8_lossy(&r.stderr));
        assert_eq!(Tensor::load(out.join("recon.cplx")).unwrap().dims, vec![32, 32]);
        let (w, h, _) = decode_png(&out.join("recon.png"));
        dims.push((w, h));
    }
    let truth_png = tmp.path().join("truth.png");
    let truth = ds.join("slices/g00_e0_s000_truth.cplx");
    assert_eq!(code(&pmri(&["export", "--input", s(&truth), "--out", s(&truth_png)])), 0);
    let (w, h, _) = decode_png(&truth_png);
    assert!(dims.iter().all(|&d| d == (w, h)));

    let r = pmri(&["reconstruct", "--dataset", s(&ds), "--slice", "g00_e0_s000", "--method", "learned", "--out", s(&tmp.path().join("l"))]);
    assert_eq!(code(&r), 2);
    let r = pmri(&["reconstruct", "--dataset", s(&ds), "--slice", "nope", "--method", "zf", "--out", s(&tmp.path().join("n"))]);
    assert_eq!(code(&r), 2);
}

#[test]
fn export_ramp_is_monotone_and_constant_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (h, w) = (4, 16);
    let ramp: Vec<C64> = (0..h * w).map(|p| C64::new((p % w) as f64, 0.0)).collect();
    let input = tmp.path().join("ramp.cplx");
    Tensor::new(vec![h, w], ramp).unwrap().save(&input).unwrap();
    let out = tmp.path().join("ramp.png");
    assert_eq!(code(&pmri(&["export", "--input", s(&input), "--out", s(&out)])), 0);
    let (pw, ph, px) = decode_png(&out);
    assert_eq!((pw, ph), (w as u32, h as u32));
    for row in px.chunks(w) {
        assert!(row.windows(2).all(|p| p[0] < p[1]), "{row:?}");
        assert_eq!((row[0], row[w - 1]), (0, 255));
    }
    assert_eq!(code(&pmri(&["export", "--input", s(&input), "--out", s(&out)])), 2);

    let flat = tmp.path().join("flat.cplx");
    Tensor::new(vec![h, w], vec![C64::new(0.7, 0.0); h * w]).unwrap().save(&flat).unwrap();
    let r = pmri(&["export", "--input", s(&flat), "--out", s(&tmp.path().join("flat.png"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("constant image"));
    assert!(!tmp.path().join("flat.png").exists());

    let r = pmri(&["export", "--input", s(&tmp.path().join("missing.cplx")), "--out", s(&tmp.path().join("m.png"))]);
    assert_eq!(code(&r), 4);
}

#[test]
fn invalid_config_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[split]\ntest_groups = [0, 1, 2, 3]\n").unwrap();
    let r = pmri(&["pipeline", "--config", s(&cfg), "--dry-run"]);
    assert_eq!(code(&r), 2);
    let r = pmri(&["simulate", "--config", s(&tmp.path().join("none.toml")), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&r), 4);
}

#[test]
fn pipeline_exit_code_follows_its_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 3);
    let root = tmp.path().join("run");
    let r = pmri(&["pipeline", "--config", s(&cfg), "--out", s(&root)]);
    let criteria = fs::read_to_string(root.join("criteria.txt")).unwrap();
    assert_eq!(criteria.lines().count(), 5);
    let failing = criteria.lines().any(|l| l.starts_with("FAIL"));
    assert_eq!(code(&r), if failing { 3 } else { 0 });
    for stage in ["dataset", "calib", "model", "eval"] {
        assert!(root.join(stage).join("manifest.json").exists());
    }
    let m = Manifest::load(&root).unwrap();
    assert_eq!(m.stage, "pipeline");
    assert!(m.files.contains_key("eval/summary.csv"));
    assert_eq!(code(&pmri(&["pipeline", "--config", s(&cfg), "--out", s(&root)])), 2);
}
