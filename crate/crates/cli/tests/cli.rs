use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = r#"{
  "periods": 2, "width": 24, "height": 20, "seed": 3,
  "background": [0.0, 0.0, 0.0],
  "tints": [[1.0, 1.0, 1.0], [0.9, 0.95, 1.0]],
  "rig": {"radius": 3.0, "elevation_deg": [10.0, 30.0], "cameras_per_period": 4, "fov_deg": 50.0, "target": [0.0, 0.0, 0.0]},
  "points_per_primitive": 12,
  "primitives": [
    {"mean": [-0.4, 0.0, 0.0], "scale": [0.25, 0.25, 0.25], "opacity": 0.9, "color": [0.9, 0.3, 0.1]},
    {"mean": [0.4, 0.1, 0.0], "scale": [0.25, 0.2, 0.25], "opacity": 0.9, "color": [0.1, 0.4, 0.9], "lifespan": [1]}
  ]
}"#;

const CONFIG: &str = "\
# small model for quick runs
d_b = 4
d_v = 4
d_g = 4
k = 4
d_f = 16
total_iters = 30
warmup_end = 5
stats_start = 5
stats_end = 10
densify_start = 10
densify_end = 20
densify_interval = 10
voxel_size = 0.2
log_every = 5
seed = 9
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_epoch-splat"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        std::fs::write(f.path("scene.json"), SPEC).unwrap();
        std::fs::write(f.path("train.cfg"), CONFIG).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn generate(&self) -> PathBuf {
        let data = self.path("data");
        ok(&["generate", "--spec", s(&self.path("scene.json")), "--out", s(&data)]);
        data
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let data = self.path("data");
        if !data.exists() {
            self.generate();
        }
        let ckpt = self.path(name);
        let cfg = self.path("train.cfg");
        let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg)];
        args.extend_from_slice(extra);
        ok(&args);
        ckpt
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_missing_spec_is_a_usage_error() {
    let f = Fixture::new();
    let missing = f.path("nope.json");
    let o = run(&["generate", "--spec", s(&missing), "--out", s(&f.path("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn generate_is_deterministic() {
    let f = Fixture::new();
    let spec = f.path("scene.json");
    ok(&["generate", "--spec", s(&spec), "--out", s(&f.path("a")), "--seed", "4"]);
    ok(&["generate", "--spec", s(&spec), "--out", s(&f.path("b")), "--seed", "4"]);
    let a = tree(&f.path("a"));
    assert!(a.iter().any(|(n, _)| n == "points3D.txt"));
    assert!(a.iter().filter(|(n, _)| n.ends_with(".ppm")).count() == 8);
    assert_eq!(a, tree(&f.path("b")));
}

#[test]
fn unknown_config_key_is_reported() {
    let f = Fixture::new();
    let data = f.generate();
    let cfg = f.path("bad.cfg");
    std::fs::write(&cfg, "densify_intervall = 3\n").unwrap();
    let o = run(&["train", "--data", s(&data), "--out", s(&f.path("c")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("densify_intervall"));
    let o = run(&["train", "--data", s(&data), "--out", s(&f.path("c")), "--set", "tau=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = Fixture::new();
    let ckpt = f.train("m.cgs", &[]);
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(f.path("m.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6);
    for r in &recs {
        for k in ["iteration", "loss", "l1", "ssim", "anchors"] {
            assert!(r.get(k).is_some(), "missing {k} in {r}");
        }
    }
    let first = recs[0]["loss"].as_f64().unwrap();
    let last = recs[recs.len() - 1]["loss"].as_f64().unwrap();
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn deterministic_runs_are_bitwise_identical() {
    let f = Fixture::new();
    let a = f.train("a.cgs", &["--deterministic"]);
    let b = f.train("b.cgs", &["--deterministic", "--threads", "1"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn render_time_handling() {
    let f = Fixture::new();
    let ckpt = f.train("m.cgs", &[]);
    let data = f.path("data");
    let r = |t: &str, out: &str| run(&["render", "--ckpt", s(&ckpt), "--camera", "2", "--data", s(&data), "--time", t, "--out", s(&f.path(out))]);
    assert!(r("1", "a.ppm").status.success());
    assert!(r("1.0", "b.ppm").status.success());
    assert_eq!(std::fs::read(f.path("a.ppm")).unwrap(), std::fs::read(f.path("b.ppm")).unwrap());
    assert_eq!(r("1.5", "c.ppm").status.code(), Some(2));
    assert_eq!(r("-0.1", "c.ppm").status.code(), Some(2));
    let o = run(&["render", "--ckpt", s(&ckpt), "--camera", "99", "--data", s(&data), "--time", "0", "--out", s(&f.path("d.ppm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn render_from_pose_file() {
    let f = Fixture::new();
    let ckpt = f.train("m.cgs", &[]);
    let pose = f.path("pose.txt");
    std::fs::write(&pose, "# w h fx fy cx cy qw qx qy qz tx ty tz\n24 20 25.0 25.0 12.0 10.0 1 0 0 0 0 0 3\n").unwrap();
    ok(&["render", "--ckpt", s(&ckpt), "--camera", s(&pose), "--time", "0.25", "--out", s(&f.path("p.ppm"))]);
    assert!(std::fs::read(f.path("p.ppm")).unwrap().starts_with(b"P6\n24 20\n255\n"));
}

#[test]
fn interp_frames_match_renders() {
    let f = Fixture::new();
    let ckpt = f.train("m.cgs", &[]);
    let data = f.path("data");
    let frames = f.path("frames");
    ok(&["interp", "--ckpt", s(&ckpt), "--camera", "1", "--data", s(&data), "--steps", "3", "--out", s(&frames)]);
    for (i, t) in ["0", "0.5", "1"].iter().enumerate() {
        let out = f.path(&format!("r{i}.ppm"));
        ok(&["render", "--ckpt", s(&ckpt), "--camera", "1", "--data", s(&data), "--time", t, "--out", s(&out)]);
        assert_eq!(
            std::fs::read(frames.join(format!("frame_{i:04}.ppm"))).unwrap(),
            std::fs::read(out).unwrap(),
            "frame {i}"
        );
    }
    let single = f.path("single");
    ok(&["interp", "--ckpt", s(&ckpt), "--camera", "1", "--data", s(&data), "--steps", "1", "--out", s(&single)]);
    assert_eq!(std::fs::read_dir(&single).unwrap().count(), 1);
    assert_eq!(std::fs::read(single.join("frame_0000.ppm")).unwrap(), std::fs::read(f.path("r0.ppm")).unwrap());
}

#[test]
fn eval_report_schema_and_determinism() {
    let f = Fixture::new();
    let ckpt = f.train("m.cgs", &[]);
    let data = f.path("data");
    let a = f.path("a.jsonl");
    let b = f.path("b.jsonl");
    let o = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&a)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PSNR"));
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let periods: Vec<&serde_json::Value> = recs.iter().filter(|r| r["kind"] == "period").collect();
    assert_eq!(periods.len(), 2);
    let avg = recs.iter().find(|r| r["kind"] == "average").unwrap();
    for key in ["psnr", "ssim"] {
        let mean = periods.iter().map(|r| r[key].as_f64().unwrap()).sum::<f64>() / 2.0;
        assert!((avg[key].as_f64().unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn inspect_reports_state() {
    let f = Fixture::new();
    let fresh = f.train("fresh.cgs", &["--set", "total_iters=20", "--set", "densify_end=20"]);
    let o = ok(&["inspect", "--ckpt", s(&fresh)]);
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(out.contains("iteration: 20"));
    assert!(out.contains("periods: 2"));
    assert!(out.contains("total_iters = 20"));

    let zero = f.path("zero.cfg");
    std::fs::write(&zero, format!("{CONFIG}total_iters = 0\nwarmup_end = 0\nstats_start = 0\nstats_end = 0\ndensify_start = 0\ndensify_end = 0\n")).unwrap();
    let z = f.path("z.cgs");
    ok(&["train", "--data", s(&f.path("data")), "--out", s(&z), "--config", s(&zero)]);
    let out = String::from_utf8_lossy(&ok(&["inspect", "--ckpt", s(&z)]).stdout).into_owned();
    assert!(out.contains("iteration: 0"));

    let mut bytes = std::fs::read(&fresh).unwrap();
    let n = bytes.len();
    bytes[n / 3] ^= 0xff;
    let bad = f.path("bad.cgs");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(run(&["inspect", "--ckpt", s(&bad)]).status.code(), Some(3));
    assert_eq!(run(&["inspect", "--ckpt", s(&f.path("missing.cgs"))]).status.code(), Some(3));
}

#[test]
fn var_and_global_ablation_is_time_independent() {
    let f = Fixture::new();
    let ckpt = f.train("m.cgs", &["--ablate", "var", "--ablate", "global"]);
    let data = f.path("data");
    for t in ["0", "1"] {
        let out = f.path(&format!("t{t}.ppm"));
        ok(&["render", "--ckpt", s(&ckpt), "--camera", "3", "--data", s(&data), "--time", t, "--out", s(&out)]);
    }
    assert_eq!(std::fs::read(f.path("t0.ppm")).unwrap(), std::fs::read(f.path("t1.ppm")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert!(run(&["--help"]).status.success());
}
