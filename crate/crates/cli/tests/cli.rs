use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roadsurf::bev::{self, BevMeta, StoredBev};
use roadsurf::io::{self, CamerasFile};
use roadsurf::optim::{self, CheckpointMeta};
use roadsurf::raster::{self, RenderOptions};
use roadsurf::scene::{Scene, Split};
use roadsurf::synth::{self, SynthSpec};
use roadsurf_cli::config::PipelineConfig;
use roadsurf_cli::pipeline::{self, EvalReport};

const SMALL_SPEC: &str = "seed = 1
[camera]
width = 32
height = 24
fx = 15.0
fy = 15.0
supersample = 2
[trajectory]
frames = 8
test_frames = [3]
[lighting]
gain = [0.8, 1.2]
[[occluders]]
center = [4.0, 0.3]
size = [0.8, 0.5, 0.3]
";

const SMALL_CONFIG: &str = "seed = 5
[optim]
iterations = 6
grid_spacing = 0.1
grid_end_margin = 1.0
";

fn roadsurf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadsurf"))
        .args(args)
        .output()
        .expect("run roadsurf")
}

fn ok(args: &[&str]) -> String {
    let out = roadsurf(args);
    assert!(
        out.status.success(),
        "roadsurf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = roadsurf(args);
    assert_eq!(out.status.code(), Some(code), "roadsurf {args:?}");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ds: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.toml");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let config = root.join("config.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let ds = root.join("ds");
    ok(&["synth", s(&spec), "--out", s(&ds)]);
    Fixture { _dir: dir, root, ds, config }
}

fn optimize(f: &Fixture, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["optimize", "--config", s(&f.config), "--dataset", s(&f.ds), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("scene.srf")
}

fn small_config() -> PipelineConfig {
    PipelineConfig::from_toml_str(SMALL_CONFIG).unwrap()
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["synth", s(&f.root.join("spec.toml")), "--out", s(&again)]);
    for rel in ["cameras.json", "classes.json", "frames/004.png", "labels/004.png", "gt/bev_rgb.png", "gt/meta.json"] {
        assert_eq!(
            std::fs::read(f.ds.join(rel)).unwrap(),
            std::fs::read(again.join(rel)).unwrap(),
            "{rel}"
        );
    }
    ok(&["validate", "--dataset", s(&f.ds)]);
}

#[test]
fn synth_rejects_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    std::fs::write(&spec, "[extent]\nx = [0.0, -3.0]\n").unwrap();
    let err = fails(&["synth", s(&spec), "--out", s(&dir.path().join("o"))], 1);
    assert!(err.contains("extent"), "{err}");
    std::fs::write(&spec, "seed = 1\n[trajectory]\nframes = \"many\"\n").unwrap();
    let err = fails(&["synth", s(&spec), "--out", s(&dir.path().join("o"))], 1);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn validate_reports_broken_datasets() {
    let f = fixture();
    let label = f.ds.join("labels").join("002.png");
    let small = roadsurf::image::Raster::filled(4, 4, 0u16);
    io::write_label_png(&label, &small, None).unwrap();
    let err = fails(&["validate", "--dataset", s(&f.ds)], 1);
    assert!(err.contains("002"), "{err}");

    std::fs::remove_file(f.ds.join("cameras.json")).unwrap();
    let err = fails(&["validate", "--dataset", s(&f.ds)], 1);
    assert!(err.contains("cameras.json"), "{err}");
}

#[test]
fn enhance_writes_outputs_and_needs_labels() {
    let f = fixture();
    ok(&["enhance", "--dataset", s(&f.ds)]);
    let enhanced = f.ds.join("enhanced");
    assert!(enhanced.join("reference_stats.json").is_file());
    assert!(enhanced.join("manifest.json").is_file());
    let cams: CamerasFile = io::read_json(&f.ds.join("cameras.json")).unwrap();
    for rec in &cams.frames {
        assert!(io::enhanced_path(&f.ds, &rec.id).is_file());
    }
    std::fs::remove_dir_all(f.ds.join("labels")).unwrap();
    fails(&["enhance", "--dataset", s(&f.ds)], 1);
}

#[test]
fn enhance_leaves_uniform_lighting_alone() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, SMALL_SPEC.replace("gain = [0.8, 1.2]", "gain = [1.0, 1.0]")).unwrap();
    let ds = dir.path().join("ds");
    ok(&["synth", s(&spec), "--out", s(&ds)]);
    ok(&["enhance", "--dataset", s(&ds), "--no-inpaint"]);
    let loaded = io::load_dataset(&ds).unwrap();
    // Views differ in content, so the per-view statistics only roughly match
    // the pooled ones; a uniform gain would move every class mean.
    let mut worst = 0.0f64;
    for fr in &loaded.frames {
        let e = io::read_rgb_png(&io::enhanced_path(&ds, &fr.id)).unwrap();
        let diff: f64 = e
            .data
            .iter()
            .zip(&fr.image.data)
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>() / 3.0)
            .sum::<f64>()
            / e.data.len() as f64;
        worst = worst.max(diff);
    }
    assert!(worst < 0.02, "mean absolute change {worst}");
}

#[test]
fn zero_iterations_write_the_initialization() {
    let f = fixture();
    let ckpt = optimize(&f, &f.root.join("run"), &["--iterations", "0"]);
    let (scene, meta) = optim::read_checkpoint(&ckpt).unwrap();
    let ds = io::load_dataset(&f.ds).unwrap();
    let cfg = small_config();
    let enhanced = pipeline::enhanced_for_training(&ds, &cfg).unwrap();
    let views = pipeline::training_views(&ds.frames, &cfg, &ds.classes, &enhanced).unwrap();
    let init = pipeline::initial_scene(&views, &cfg, &ds.classes).unwrap();
    assert_eq!(scene, init);
    assert_eq!(meta.iterations, 0);
    assert_eq!(meta.config_hash, cfg.hash());
}

#[test]
fn resumed_run_matches_straight_run() {
    let f = fixture();
    let straight = optimize(&f, &f.root.join("straight"), &[]);
    let half = optimize(&f, &f.root.join("half"), &["--iterations", "3"]);
    let resumed = optimize(&f, &f.root.join("resumed"), &["--resume", s(&half)]);
    assert_eq!(std::fs::read(&straight).unwrap(), std::fs::read(&resumed).unwrap());
    let log = std::fs::read_to_string(f.root.join("resumed").join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // A different configuration cannot resume.
    let err = fails(
        &[
            "optimize", "--config", s(&f.config), "--dataset", s(&f.ds), "--out", s(&f.root.join("x")),
            "--resume", s(&half), "--seed", "99",
        ],
        1,
    );
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn ablation_flags_change_training() {
    let f = fixture();
    let base = optimize(&f, &f.root.join("base"), &[]);
    let bytes = std::fs::read(&base).unwrap();
    for flag in ["--no-enhance", "--no-inpaint", "--no-semantic-loss"] {
        let other = optimize(&f, &f.root.join(flag.trim_start_matches('-')), &[flag]);
        assert_ne!(std::fs::read(&other).unwrap(), bytes, "{flag}");
    }
}

#[test]
fn render_matches_in_process_render() {
    let f = fixture();
    let ckpt = optimize(&f, &f.root.join("run"), &[]);
    let out = f.root.join("render");
    ok(&["render", "--checkpoint", s(&ckpt), "--camera", "003", "--dataset", s(&f.ds), "--out", s(&out)]);
    let (scene, _) = optim::read_checkpoint(&ckpt).unwrap();
    let ds = io::load_dataset(&f.ds).unwrap();
    let frame = ds.frames.iter().find(|fr| fr.id == "003").unwrap();
    let expect = raster::render(&scene, &frame.camera, &RenderOptions::default()).unwrap();
    let got = io::read_rgb_png(&out.join("003_color.png")).unwrap();
    assert_eq!(got, pipeline::quantized(&expect.color_image()));
    for kind in ["depth", "normal", "semantic"] {
        assert!(out.join(format!("003_{kind}.png")).is_file());
    }

    // A pose file works the same way.
    let rec = io::CameraRecord::from_camera("pose", &frame.camera, Split::Test);
    let pose = f.root.join("pose.json");
    io::write_json(&pose, &rec).unwrap();
    ok(&["render", "--checkpoint", s(&ckpt), "--pose", s(&pose), "--out", s(&out)]);
    assert_eq!(
        std::fs::read(out.join("pose_color.png")).unwrap(),
        std::fs::read(out.join("003_color.png")).unwrap()
    );

    fails(&["render", "--checkpoint", s(&f.root.join("none.srf")), "--pose", s(&pose), "--out", s(&out)], 1);
}

#[test]
fn depth_png_is_millimeters() {
    let f = fixture();
    let ckpt = optimize(&f, &f.root.join("run"), &["--iterations", "0"]);
    let out = f.root.join("render");
    ok(&["render", "--checkpoint", s(&ckpt), "--camera", "000", "--dataset", s(&f.ds), "--out", s(&out)]);
    let depth = image_u16(&out.join("000_depth.png"));
    // The camera sits 1.5 m above a flat road and looks straight down.
    let center = depth[12 * 32 + 16];
    assert!((center as f64 - 1500.0).abs() <= 20.0, "{center}");
}

/// Samples of a 16-bit grayscale PNG.
fn image_u16(path: &Path) -> Vec<u16> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.bit_depth, png::BitDepth::Sixteen);
    buf[..info.buffer_size()]
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect()
}

#[test]
fn export_bev_grid_options() {
    let f = fixture();
    let ckpt = optimize(&f, &f.root.join("run"), &["--iterations", "0"]);
    let (scene, _) = optim::read_checkpoint(&ckpt).unwrap();
    let out = f.root.join("bev");
    ok(&["export-bev", "--checkpoint", s(&ckpt), "--bev-resolution", "0.2", "--out", s(&out)]);
    let meta: BevMeta = io::read_json(&out.join(bev::META_FILE)).unwrap();
    assert_eq!(meta.grid.resolution, 0.2);
    let g = meta.grid;
    for sf in &scene.surfels {
        let col = (sf.center.x - g.origin[0]) / g.resolution;
        let row = (g.origin[1] - sf.center.y) / g.resolution;
        assert!(col > -0.5 && col < g.width as f64 - 0.5 && row > -0.5 && row < g.height as f64 - 0.5);
    }

    let gt_meta = f.ds.join("gt").join("bev_meta.json");
    let out2 = f.root.join("bev2");
    ok(&["export-bev", "--checkpoint", s(&ckpt), "--grid", s(&gt_meta), "--out", s(&out2)]);
    let meta2: BevMeta = io::read_json(&out2.join(bev::META_FILE)).unwrap();
    let gt: BevMeta = io::read_json(&gt_meta).unwrap();
    assert_eq!(meta2.grid, gt.grid);

    let empty = f.root.join("empty.srf");
    let names = scene.class_names.clone();
    let meta = CheckpointMeta { class_names: names.clone(), config_hash: String::new(), iterations: 0 };
    optim::write_checkpoint(&empty, &Scene::new(names), &meta, None).unwrap();
    let out3 = f.root.join("bev3");
    ok(&["export-bev", "--checkpoint", s(&empty), "--out", s(&out3)]);
    let stored = StoredBev::read(&out3).unwrap();
    assert!(stored.semantic.data.iter().all(|&l| l == bev::EMPTY_LABEL));
    assert!(stored.elevation.data.iter().all(|z| z.is_nan()));
}

#[test]
fn eval_identical_and_mismatched() {
    let f = fixture();
    let gt = f.ds.join("gt");
    let out = ok(&["eval", "--pred", s(&gt), "--gt", s(&gt)]);
    let v: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(v["psnr_db"], "inf");
    assert_eq!(v["elevation_rmse_m"], 0.0);

    let ckpt = optimize(&f, &f.root.join("run"), &["--iterations", "0"]);
    let bev_dir = f.root.join("bev");
    ok(&["export-bev", "--checkpoint", s(&ckpt), "--bev-resolution", "0.5", "--out", s(&bev_dir)]);
    let err = fails(&["eval", "--pred", s(&bev_dir), "--gt", s(&gt)], 1);
    assert!(err.contains("grid"), "{err}");
}

#[test]
fn check_grads_exit_codes() {
    ok(&["check-grads", "--cases", "2"]);
    let err = fails(&["check-grads", "--cases", "1", "--inject-fault", "rotation"], 1);
    assert!(err.contains("rotation"), "{err}");
}

#[test]
fn usage_errors_and_help() {
    fails(&["optimize", "--no-such-flag"], 2);
    fails(&["frobnicate"], 2);
    fails(&["render", "--checkpoint", "x", "--out", "y"], 2);
    let help = |verb: &str| ok(&[verb, "--help"]);
    let opt = help("optimize");
    for flag in ["--config", "--seed", "--iterations", "--no-enhance", "--no-inpaint", "--no-semantic-loss", "--out", "--resume", "--threads"] {
        assert!(opt.contains(flag), "optimize --help lacks {flag}");
    }
    assert!(help("export-bev").contains("--bev-resolution"));
    assert!(help("synth").contains("--seed"));
    assert!(help("eval").contains("--out"));
    assert!(help("check-grads").contains("--config"));
    assert!(!help("check-grads").contains("inject"));
}

/// The command chain gives the same bytes as the library calls it wraps.
#[test]
fn pipeline_matches_in_process_composition() {
    let f = fixture();
    let ckpt = optimize(&f, &f.root.join("run"), &[]);
    let gt_dir = f.ds.join("gt");
    let bev_dir = f.root.join("bev");
    ok(&["export-bev", "--checkpoint", s(&ckpt), "--grid", s(&gt_dir.join("bev_meta.json")), "--dataset", s(&f.ds), "--out", s(&bev_dir)]);
    let report_path = f.root.join("report.json");
    ok(&["eval", "--pred", s(&bev_dir), "--gt", s(&gt_dir), "--checkpoint", s(&ckpt), "--dataset", s(&f.ds), "--out", s(&report_path)]);
    let cli_report: EvalReport = io::read_json(&report_path).unwrap();

    let spec = SynthSpec::from_toml_str(SMALL_SPEC).unwrap();
    let ds = synth::synthesize(&spec).unwrap();
    let frames = pipeline::quantized_frames(&ds.frames());
    let cfg = small_config();
    let scene = pipeline::reconstruct(&frames, &ds.classes, &cfg).unwrap();
    let (cli_scene, _) = optim::read_checkpoint(&ckpt).unwrap();
    assert_eq!(scene, cli_scene);

    let map = pipeline::export(&scene, &ds.bev.grid).unwrap();
    let mem_dir = f.root.join("mem");
    map.write(&mem_dir, &ds.classes.names, &ds.classes.palette).unwrap();
    let gt = StoredBev::read(&gt_dir).unwrap();
    let mut report = pipeline::evaluate_bev(&StoredBev::read(&mem_dir).unwrap(), &gt).unwrap();
    report.heldout = Some(pipeline::heldout_psnr(&scene, &frames, &ds.classes).unwrap());
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&cli_report).unwrap());
    for file in [bev::RGB_FILE, bev::SEMANTIC_FILE, bev::ELEVATION_FILE] {
        assert_eq!(std::fs::read(mem_dir.join(file)).unwrap(), std::fs::read(bev_dir.join(file)).unwrap());
    }
}
