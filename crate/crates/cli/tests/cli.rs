use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use omnisplat::appearance::{AppearanceConfig, AppearanceNet};
use omnisplat::diff::Model;
use omnisplat::image::Image;
use omnisplat::io::{self, checkpoint, read_linear16, Checkpoint};
use omnisplat::medium::{Medium, MediumConfig};
use omnisplat::scene::Scene;
use omnisplat::synthbench::decomposition_files;
use tempfile::{tempdir, TempDir};

const TINY: &str = r#"
[synth]
width = 32
height = 16
points = 300

[train]
iterations = 20
eval_interval = 10

[train.densify]
start_iter = 5
interval = 5
"#;

fn omnisplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnisplat")).args(args).output().expect("spawning omnisplat")
}

fn ok(args: &[&str]) -> String {
    let out = omnisplat(args);
    assert!(out.status.success(), "omnisplat {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Tiny {
    dir: TempDir,
}

impl Tiny {
    fn new() -> Self {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> String {
        let cfg = self.path("tiny.toml");
        let mut all = vec!["--config", s(&cfg), "--threads", "1"];
        all.extend_from_slice(args);
        ok(&all)
    }

    fn synth(&self) -> PathBuf {
        let out = self.path("room");
        self.run(&["synth", "--out", s(&out)]);
        out
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let data = self.path("room");
        if !data.exists() {
            self.synth();
        }
        let out = self.path(name);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        self.run(&args);
        out
    }
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic() {
    let t = Tiny::new();
    let (a, b) = (t.path("a"), t.path("b"));
    let cfg = t.path("tiny.toml");
    ok(&["--config", s(&cfg), "--seed", "7", "synth", "--out", s(&a)]);
    ok(&["--config", s(&cfg), "--seed", "7", "synth", "--out", s(&b)]);
    assert_eq!(dir_files(&a), dir_files(&b));
}

#[test]
fn synth_writes_frames_manifest_and_ground_truth() {
    let t = Tiny::new();
    let room = t.synth();
    let names: Vec<String> = dir_files(&room).into_iter().map(|f| f.0).collect();
    let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix) && n.ends_with(".png")).count();
    assert_eq!(count("frame_"), 12);
    assert_eq!(count("gt_radiance_"), 12);
    assert_eq!(count("gt_depth_"), 12);
    assert!(names.contains(&"transforms.json".to_string()));
    let ds = io::load_dataset(&room).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (6, 6));
    assert_eq!((ds.frames[0].image.width, ds.frames[0].image.height), (32, 16));
}

#[test]
fn clear_water_frames_equal_the_radiance() {
    let t = Tiny::new();
    let room = t.path("clear");
    t.run(&["synth", "--out", s(&room), "--beta-d", "0,0,0", "--beta-b", "0,0,0"]);
    for k in 0..12 {
        let frame = fs::read(room.join(format!("frame_{k:03}.png"))).unwrap();
        let gt = fs::read(room.join(format!("gt_radiance_{k:03}.png"))).unwrap();
        assert_eq!(frame, gt, "frame {k}");
    }
}

#[test]
fn training_logs_every_evaluation() {
    let t = Tiny::new();
    let out = t.train("run", &[]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "iter,loss,psnr_train,psnr_test,ssim_test,n_gaussians");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("20,"));
    assert!(out.join("config.toml").exists());
    let ck = io::load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.iteration, 20);
    assert!(ck.use_medium && ck.use_appearance);
    let densify = fs::read_to_string(out.join("densify_log.csv")).unwrap();
    for line in densify.lines().skip(1) {
        let v: Vec<i64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[5], v[1] + v[2] + v[3] - v[4]);
    }
}

#[test]
fn resume_continues_the_iteration_counter() {
    let t = Tiny::new();
    let first = t.train("first", &[]);
    let ck = first.join("checkpoint.bin");
    let second = t.train("second", &["--resume", s(&ck), "--iterations", "40"]);
    let metrics = fs::read_to_string(second.join("metrics.csv")).unwrap();
    let iters: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, vec!["30", "40"]);
    assert_eq!(io::load_checkpoint(&second.join("checkpoint.bin")).unwrap().iteration, 40);
}

#[test]
fn medium_switch_is_stored_and_enforced_on_resume() {
    let t = Tiny::new();
    let out = t.train("dry", &["--no-medium"]);
    let ck_path = out.join("checkpoint.bin");
    assert!(!io::load_checkpoint(&ck_path).unwrap().use_medium);
    let cfg = t.path("tiny.toml");
    let data = t.path("room");
    let again = t.path("again");
    let res = omnisplat(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&again), "--resume", s(&ck_path)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("medium"));
}

#[test]
fn decomposition_recomposes_to_the_render() {
    let t = Tiny::new();
    let out = t.train("run", &[]);
    let ck = out.join("checkpoint.bin");
    let (layers, renders, room) = (t.path("layers"), t.path("renders"), t.path("room"));
    t.run(&["decompose", "--checkpoint", s(&ck), "--poses", s(&room), "--out", s(&layers)]);
    t.run(&["render", "--checkpoint", s(&ck), "--poses", s(&room), "--out", s(&renders)]);
    for k in 0..12 {
        let name = format!("frame_{k:03}");
        let files = decomposition_files(&name);
        let read = |i: usize| read_linear16(&layers.join(&files[i])).unwrap();
        let (j, a, b, d) = (read(0), read(1), read(2), read(3));
        assert_eq!(d.channels, 1);
        let png = io::read_image(&renders.join(format!("{name}.png"))).unwrap();
        for i in 0..j.data.len() {
            let re = (j.data[i] * a.data[i] + b.data[i]).clamp(0.0, 1.0);
            assert!((re - png.data[i]).abs() <= 1.0 / 255.0, "{name}: {re} vs {}", png.data[i]);
        }
    }
}

#[test]
fn eval_prints_and_stores_metrics() {
    let t = Tiny::new();
    let out = t.train("run", &[]);
    let ck = out.join("checkpoint.bin");
    let room = t.path("room");
    let stdout = t.run(&["eval", "--checkpoint", s(&ck), "--data", s(&room), "--target", "restored"]);
    let line = stdout.lines().find(|l| l.starts_with("PSNR=")).expect("metrics line");
    assert!(line.contains(" SSIM="));
    assert_eq!(fs::read_to_string(out.join("eval_restored.txt")).unwrap().trim(), line);
}

#[test]
fn eval_of_an_exact_model_hits_the_cap() {
    let dir = tempdir().unwrap();
    let mut ds = {
        let cfg = omnisplat::synthbench::SphereRoomConfig { width: 16, height: 8, cameras: 4, points: 10, ..Default::default() };
        omnisplat::synthbench::generate_dataset(&omnisplat::synthbench::build_room(&cfg), &cfg)
    };
    for f in &mut ds.frames {
        f.image = Image::new(16, 8, 3);
    }
    let data = dir.path().join("black");
    io::write_dataset(&data, &ds).unwrap();
    let app = AppearanceConfig::default();
    let model = Model {
        scene: Scene::empty(0),
        appearance: AppearanceNet::new(&app, 1.0, 0),
        medium: Medium::new(&MediumConfig::default(), app.embed_dim, 0),
    };
    let ck = Checkpoint {
        model,
        adam: None,
        filter: Some(vec![]),
        iteration: 0,
        active_sh_degree: 0,
        extent: 1.0,
        use_appearance: false,
        use_medium: false,
    };
    let path = dir.path().join("empty.bin");
    checkpoint::save_checkpoint(&path, &ck).unwrap();
    let stdout = ok(&["eval", "--checkpoint", s(&path), "--data", s(&data)]);
    assert!(stdout.contains("PSNR=100.0000"), "{stdout}");
}

#[test]
fn gradcheck_reports_and_sets_the_exit_code() {
    let dir = tempdir().unwrap();
    let report = dir.path().join("grad.json");
    ok(&["gradcheck", "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["groups"].as_array().unwrap().len(), 9);

    let strict = dir.path().join("strict.toml");
    fs::write(&strict, "[gradcheck]\nrel_tol = 0.0\nabs_tol = 0.0\n").unwrap();
    let out = omnisplat(&["--config", s(&strict), "gradcheck"]);
    assert!(!out.status.success());
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = tempdir().unwrap();
    let out = omnisplat(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
