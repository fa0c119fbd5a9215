//! Data preparation, checkpoints, training sanity and the command line.

use std::path::Path;
use std::process::Command;

use promptcir::checkpoint::{Checkpoint, CheckpointError, StageInfo};
use promptcir::codec::{ChromaUpsampling, Subsampling};
use promptcir::harness::data::{draw_blind_qfs, make_blind_set, Augment, QfPolicy, TrainData};
use promptcir::harness::train::{init_stage, train, RunConfig, Scale, TrainConfig};
use promptcir::harness::DatasetManifest;
use promptcir::image::ImageBuffer;
use promptcir::network::{NetworkConfig, PromptCir};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PCIR: &str = env!("CARGO_BIN_EXE_pcir");

fn textured(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..6.0);
    ImageBuffer::from_fn(h, w, |y, x| {
        let v = 128.0 + 90.0 * ((x as f64 * 0.3 + phase).sin() * (y as f64 * 0.2).cos());
        let n: i32 = rng.random_range(-12..=12);
        let base = (v as i32 + n).clamp(0, 255) as u8;
        [base, base.wrapping_add((x * 3) as u8), 255 - base]
    })
}

fn write_images(dir: &Path, sizes: &[(usize, usize)]) {
    for (i, &(h, w)) in sizes.iter().enumerate() {
        textured(h, w, i as u64).save(dir.join(format!("im{i}.png"))).unwrap();
    }
}

#[test]
fn blind_set_records_every_image_and_is_seeded() {
    let src = tempfile::tempdir().unwrap();
    write_images(src.path(), &[(32, 40), (24, 24), (17, 33)]);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = make_blind_set(src.path(), a.path(), 7, Subsampling::S420, ChromaUpsampling::Fancy).unwrap();
    let m2 = make_blind_set(src.path(), b.path(), 7, Subsampling::S420, ChromaUpsampling::Fancy).unwrap();
    assert_eq!(m1.records.len(), 3);
    assert_eq!(m1.records, m2.records);
    for r in &m1.records {
        let qf = r.qf.unwrap();
        assert!((10..=70).contains(&qf));
        assert!(m1.resolve(r.degraded.as_ref().unwrap()).exists());
    }
    let reloaded = DatasetManifest::load(&a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reloaded.records, m1.records);
    reloaded.validate().unwrap();
    let m3 = make_blind_set(src.path(), c.path(), 8, Subsampling::S420, ChromaUpsampling::Fancy).unwrap();
    assert_eq!(draw_blind_qfs(3, 8), m3.records.iter().map(|r| r.qf.unwrap()).collect::<Vec<_>>());
}

#[test]
fn blind_quality_factors_are_uniform() {
    // Pearson χ² over the 61 levels; 88.379 is the 0.99 quantile of χ²(60)
    let draws = draw_blind_qfs(1000, 2024);
    let mut counts = [0usize; 61];
    for q in &draws {
        counts[(q - 10) as usize] += 1;
    }
    let expected = 1000.0 / 61.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 88.379, "χ² = {chi2}");
    assert_eq!(draws, draw_blind_qfs(1000, 2024));
}

#[test]
fn manifest_validation_catches_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path(), &[(16, 16)]);
    let mut m = DatasetManifest::from_clean_dir(dir.path(), "x").unwrap();
    m.validate().unwrap();
    m.records[0].clean = "missing.png".into();
    assert!(m.validate().is_err());
}

#[test]
fn checkpoint_roundtrip_preserves_forward_bits() {
    let (net, p) = PromptCir::build::<f32>(&NetworkConfig::toy(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pcir");
    Checkpoint::from_params(&NetworkConfig::toy(), StageInfo { stage: 1, iteration: 5 }, &p).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.training, StageInfo { stage: 1, iteration: 5 });
    let (_, template) = PromptCir::build::<f32>(&loaded.config, 0).unwrap();
    let q = loaded.load_into(&template).unwrap();
    let x = textured(24, 32, 1).to_tensor::<f32>();
    assert_eq!(net.forward(&p, &x).unwrap().data(), net.forward(&q, &x).unwrap().data());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Corrupt(_))));
    let (_, micro) = PromptCir::build::<f32>(&NetworkConfig::micro(), 0).unwrap();
    let err = loaded.load_into(&micro).unwrap_err().to_string();
    assert!(err.contains("shape mismatch: patch_embed.weight"), "{err}");
}

#[test]
fn loss_falls_within_fifty_steps_on_a_fixed_batch() {
    let cfg = TrainConfig {
        crop: 32,
        batch_size: 1,
        iterations: 50,
        qf_policy: QfPolicy::Fixed(vec![10]),
        augment: Augment::none(),
        log_every: 1,
        checkpoint_every: 0,
        ..TrainConfig::preset(Scale::Desk, 1)
    };
    // one 32×32 image and a 32 crop: every step sees the same pair
    let mut data = TrainData::new(vec![textured(32, 32, 3)], Subsampling::S420, ChromaUpsampling::Fancy).unwrap();
    let (net, mut state) = init_stage(&NetworkConfig::toy(), &cfg, None).unwrap();
    let report = train(&net, &mut state, &cfg, &mut data, |_| Ok(())).unwrap();
    let first = report.loss_curve.first().unwrap();
    let last = report.loss_curve.last().unwrap();
    assert_eq!((first.step, last.step), (1, 50));
    assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
}

fn pcir(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(PCIR).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    assert_eq!(pcir(&[]).0, 2);
    assert_eq!(pcir(&["degrade", "--in", "a.png"]).0, 2);
    assert_eq!(pcir(&["degrade", "--in", "a.png", "--out", "b.png", "--qf", "0"]).0, 2);
    assert_eq!(pcir(&["eval", "--dataset", "x", "--mode", "sideways", "--identity"]).0, 2);
    assert_eq!(pcir(&["--help"]).0, 0);
    let (code, _, err) = pcir(&["degrade", "--in", "/nonexistent.png", "--out", "/tmp/x.png", "--qf", "10"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn cli_degrade_eval_and_params() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    std::fs::create_dir(&clean).unwrap();
    write_images(&clean, &[(40, 48), (32, 32)]);
    let one = dir.path().join("one.png");
    let (code, out, err) = pcir(&["degrade", "--in", clean.join("im0.png").to_str().unwrap(), "--out", one.to_str().unwrap(), "--qf", "10"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("qf=10") && out.contains("psnr="), "{out}");
    assert_eq!(ImageBuffer::load(&one).unwrap().height(), 40);

    let blind = dir.path().join("blind");
    let (code, _, err) = pcir(&["--seed", "3", "degrade", "--in", clean.to_str().unwrap(), "--out", blind.to_str().unwrap(), "--blind"]);
    assert_eq!(code, 0, "{err}");
    let manifest = blind.join("manifest.jsonl");
    let (code, out, err) = pcir(&["eval", "--identity", "--dataset", manifest.to_str().unwrap(), "--mode", "blind"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("blind"), "{out}");

    let json = dir.path().join("report.json");
    let args = ["eval", "--identity", "--dataset", clean.to_str().unwrap(), "--mode", "nonblind", "--qfs", "10,20", "--json", json.to_str().unwrap()];
    let (code, out, err) = pcir(&args);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3, "{out}");
    let first = std::fs::read(&json).unwrap();
    pcir(&args);
    assert_eq!(first, std::fs::read(&json).unwrap());

    let (code, out, _) = pcir(&["params", "--config", "micro"]);
    assert_eq!(code, 0);
    let (_, p) = PromptCir::build::<f32>(&NetworkConfig::micro(), 0).unwrap();
    assert!(out.lines().last().unwrap().ends_with(&p.count().to_string()), "{out}");
}

#[test]
fn cli_training_stages_and_restore() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    write_images(&imgs, &[(24, 24)]);
    let stage = |s: u8, its: u64| {
        serde_json::json!({
            "stage": s, "crop": 16, "batch_size": 1, "lr": {"init": 1e-3}, "iterations": its,
            "qf_policy": if s == 1 { serde_json::json!({"fixed": [10, 20]}) } else { serde_json::json!({"uniform": {"lo": 10, "hi": 70}}) },
            "augment": {"hflip": true, "vflip": true, "rot90": true}, "seed": 0, "checkpoint_every": 1
        })
    };
    let out = dir.path().join("out");
    let cfg = serde_json::json!({"network": "micro", "data": "imgs", "output_dir": out, "stage1": stage(1, 2), "stage2": stage(2, 1)});
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let c = cfg_path.to_str().unwrap();

    let (code, _, err) = pcir(&["train", "--config", c, "--stage", "2"]);
    assert_eq!(code, 1);
    assert!(err.contains("stage-1"), "{err}");
    let (code, _, err) = pcir(&["train", "--config", c, "--stage", "1", "--precompute"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("stage1-final.pcir").exists() && out.join("stage1-0000001.pcir").exists());
    assert!(out.join("precomputed/q10/00000.png").exists());
    let (code, _, err) = pcir(&["train", "--config", c, "--stage", "2"]);
    assert_eq!(code, 0, "{err}");
    let ck = Checkpoint::load(out.join("stage2-final.pcir")).unwrap();
    assert_eq!(ck.training, StageInfo { stage: 2, iteration: 1 });

    let input = dir.path().join("odd.png");
    textured(41, 67, 9).save(&input).unwrap();
    let restored = dir.path().join("restored.png");
    let ckpt = out.join("stage2-final.pcir");
    let (code, _, err) = pcir(&["restore", "--ckpt", ckpt.to_str().unwrap(), "--in", input.to_str().unwrap(), "--out", restored.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let r = ImageBuffer::load(&restored).unwrap();
    assert_eq!((r.height(), r.width()), (41, 67));

    let (code, out, _) = pcir(&["gradcheck", "--module", "dpm", "--seeds", "2"]);
    assert_eq!(code, 0);
    assert!(out.contains("dpm") && out.contains("PASS"), "{out}");
}

#[test]
fn shipped_run_configs_match_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, scale, net) in [("desk.json", Scale::Desk, "toy"), ("full.json", Scale::Full, "reference")] {
        let text = std::fs::read_to_string(dir.join(file)).unwrap();
        let run: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(run.network.resolve().unwrap(), NetworkConfig::preset(net).unwrap(), "{file}");
        for stage in [1, 2] {
            assert_eq!(run.stage(stage).unwrap(), &TrainConfig::preset(scale, stage), "{file} stage {stage}");
        }
    }
}
