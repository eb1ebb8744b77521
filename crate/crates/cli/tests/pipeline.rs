use std::path::{Path, PathBuf};
use std::process::Command;

use panosplat::io::{write_pfm, write_png, BitDepth};
use panosplat::panorama::{CameraIntrinsics, EquirectImage};
use panosplat::Image;
use panosplat_cli::config::{apply_override, HookSpec};
use panosplat_cli::stages::{read_manifest, CamerasFile};
use panosplat_cli::{run_pipeline, PipelineConfig, PipelineError, Stage, StageStatus};

const VIEW: usize = 16;
const SPHERE: f64 = 3.0;

fn write_panorama(dir: &Path) -> PathBuf {
    let pano = EquirectImage::from_fn(32, |lon, lat| {
        [
            0.5 + 0.4 * lon.sin() * lat.cos(),
            0.5 + 0.4 * lat.sin(),
            0.5 + 0.3 * (2.0 * lon).cos(),
        ]
    })
    .unwrap();
    let path = dir.join("pano.png");
    write_png(&path, pano.image(), BitDepth::Sixteen).unwrap();
    path
}

/// z-depth of a sphere of radius `SPHERE` around every view's center.
fn write_sphere_depth(dir: &Path) -> PathBuf {
    let d = dir.join("depth");
    std::fs::create_dir_all(&d).unwrap();
    let intr = CameraIntrinsics::new(90.0, VIEW, VIEW).unwrap();
    let depth = Image::from_fn(VIEW, VIEW, 1, |x, y, px| {
        px[0] = SPHERE / intr.ray(x as f64 + 0.5, y as f64 + 0.5).norm();
    });
    for i in 0..30 {
        write_pfm(d.join(format!("depth_{i:02}.pfm")), &depth).unwrap();
    }
    d
}

fn config(tmp: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.panorama = Some(write_panorama(tmp));
    cfg.paths.depth_dir = Some(write_sphere_depth(tmp));
    cfg.paths.output_dir = tmp.join("out");
    cfg.schedule.view_size = VIEW;
    cfg.init.voxel = Some(0.4);
    cfg.train.iterations = 6;
    cfg.seed = 7;
    cfg
}

fn chain() -> Vec<Stage> {
    vec![Stage::Slide, Stage::Init, Stage::Train, Stage::Render, Stage::Metrics]
}

#[test]
fn empty_stage_list_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    assert!(run_pipeline(&cfg, &[], false).unwrap().is_empty());
    assert!(!cfg.paths.output_dir.exists());
}

#[test]
fn slide_writes_thirty_views_and_cameras() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_pipeline(&cfg, &[Stage::Slide], false).unwrap();
    let dir = cfg.paths.output_dir.join("slide");
    let cams: CamerasFile = serde_json::from_str(&std::fs::read_to_string(dir.join("cameras.json")).unwrap()).unwrap();
    assert_eq!(cams.views.len(), 30);
    for (i, v) in cams.views.iter().enumerate() {
        assert_eq!(v.index, i);
        assert!(dir.join(format!("view_{i:02}.png")).is_file());
    }
    let m = read_manifest(&cfg.paths.output_dir, Stage::Slide).unwrap();
    assert_eq!(m.outputs.len(), 31);
    assert_eq!(m.seed, 7);
}

#[test]
fn train_without_init_names_the_init_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_pipeline(&cfg, &[Stage::Slide], false).unwrap();
    let err = run_pipeline(&cfg, &[Stage::Train], false).unwrap_err();
    match &err {
        PipelineError::Dependency { producer, .. } => assert_eq!(*producer, "init"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("\"init\""));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn init_without_depth_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.paths.depth_dir = None;
    run_pipeline(&cfg, &[Stage::Slide], false).unwrap();
    let err = run_pipeline(&cfg, &[Stage::Init], false).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("depth"));
}

#[test]
fn completed_stages_are_skipped_until_forced_or_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    let first = run_pipeline(&cfg, &[Stage::Slide, Stage::Init], false).unwrap();
    assert!(first.iter().all(|(_, s)| *s == StageStatus::Ran));
    let manifest = std::fs::read(cfg.paths.output_dir.join("init/manifest.json")).unwrap();

    let again = run_pipeline(&cfg, &[Stage::Slide, Stage::Init], false).unwrap();
    assert!(again.iter().all(|(_, s)| *s == StageStatus::UpToDate));

    let forced = run_pipeline(&cfg, &[Stage::Init], true).unwrap();
    assert_eq!(forced[0].1, StageStatus::Ran);
    assert_eq!(std::fs::read(cfg.paths.output_dir.join("init/manifest.json")).unwrap(), manifest);

    cfg.init.scale_factor = 0.8;
    let stale = run_pipeline(&cfg, &[Stage::Slide, Stage::Init], false).unwrap();
    assert_eq!(stale, vec![(Stage::Slide, StageStatus::UpToDate), (Stage::Init, StageStatus::Ran)]);

    std::fs::write(cfg.paths.output_dir.join("init/points.ply"), b"tampered").unwrap();
    let repaired = run_pipeline(&cfg, &[Stage::Init], false).unwrap();
    assert_eq!(repaired[0].1, StageStatus::Ran);
}

#[test]
fn manifests_chain_from_panorama_to_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_pipeline(&cfg, &chain(), false).unwrap();
    let root = &cfg.paths.output_dir;
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("metrics/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["views"].as_array().unwrap().len(), 30);
    assert!(metrics["mean_psnr"].as_f64().unwrap().is_finite());

    // every out-relative input of a stage is an output of an earlier one,
    // with the same hash
    let manifests: Vec<_> = chain().into_iter().map(|s| read_manifest(root, s).unwrap()).collect();
    for (k, m) in manifests.iter().enumerate() {
        for (input, hash) in &m.inputs {
            if Path::new(input).is_absolute() {
                continue;
            }
            let producer = manifests[..k].iter().find(|p| p.outputs.contains_key(input));
            assert_eq!(producer.map(|p| &p.outputs[input]), Some(hash), "{} input {input}", m.stage);
        }
    }
    let slide_inputs: Vec<_> = manifests[0].inputs.keys().collect();
    assert_eq!(slide_inputs, vec![&cfg.paths.panorama.as_ref().unwrap().to_string_lossy().to_string()]);
}

#[test]
fn identical_runs_give_identical_manifests_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = config(tmp.path());
    a.paths.output_dir = tmp.path().join("a");
    let mut b = a.clone();
    b.paths.output_dir = tmp.path().join("b");
    run_pipeline(&a, &chain(), false).unwrap();
    run_pipeline(&b, &chain(), false).unwrap();
    for stage in chain() {
        let read = |root: &Path| std::fs::read(root.join(stage.name()).join("manifest.json")).unwrap();
        assert_eq!(read(&a.paths.output_dir), read(&b.paths.output_dir), "{}", stage.name());
    }
    let trace = |root: &Path| std::fs::read(root.join("train/trace.jsonl")).unwrap();
    assert_eq!(trace(&a.paths.output_dir), trace(&b.paths.output_dir));
    assert_eq!(String::from_utf8(trace(&a.paths.output_dir)).unwrap().lines().count(), 6);
}

#[test]
fn builtin_generator_feeds_slide() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.paths.panorama = None;
    cfg.refine.panorama_height = 8;
    cfg.hooks.generator = Some(HookSpec::Builtin { name: "identity".into() });
    assert_eq!(Stage::default_chain(&cfg)[..2], [Stage::Refine, Stage::Slide]);
    run_pipeline(&cfg, &[Stage::Refine, Stage::Slide], false).unwrap();
    let root = &cfg.paths.output_dir;
    assert!(root.join("refine/panorama.png").is_file());
    assert!(root.join("refine/session.json").is_file());
    assert!(root.join("slide/view_29.png").is_file());
}

#[test]
fn unreachable_generator_is_a_hook_failure_naming_the_endpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    let url = "http://127.0.0.1:9/generate".to_string();
    cfg.hooks.generator = Some(HookSpec::Http { url: url.clone() });
    let err = run_pipeline(&cfg, &[Stage::Refine], false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(&url), "{err}");
}

#[test]
fn slide_without_any_panorama_names_refine() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.paths.panorama = None;
    let err = run_pipeline(&cfg, &[Stage::Slide], false).unwrap_err();
    assert!(matches!(err, PipelineError::Dependency { producer: "refine", .. }), "{err:?}");
}

#[test]
fn overrides_reach_nested_fields() {
    let mut doc = serde_json::to_value(PipelineConfig::default()).unwrap();
    apply_override(&mut doc, "schedule.fov_deg=75").unwrap();
    apply_override(&mut doc, "hooks.critic={\"kind\":\"http\",\"url\":\"http://x\"}").unwrap();
    let cfg: PipelineConfig = serde_json::from_value(doc).unwrap();
    assert_eq!(cfg.schedule.fov_deg, 75.0);
    assert!(cfg.hooks.critic.is_some());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panosplat"))
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let none = bin().args(["all", "--stages", "", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(none.status.code(), Some(0));
    assert!(!cfg.paths.output_dir.exists());

    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("init"));

    let slide = bin()
        .args(["slide", "--seed", "3", "--set", "schedule.view_size=8", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(slide.status.code(), Some(0));
    assert_eq!(read_manifest(&cfg.paths.output_dir, Stage::Slide).unwrap().seed, 3);

    let hook = bin()
        .args(["refine", "--set", "hooks.generator={\"kind\":\"subprocess\",\"program\":\"false\"}", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(hook.status.code(), Some(2));

    let bad = bin().args(["slide", "--set", "nonsense=1", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nonsense"));
}
