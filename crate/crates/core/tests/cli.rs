use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use attnpipe::detector::Detection;
use attnpipe::frameio::{load_ground_truth, read_results, write_results};
use attnpipe::pipeline::FrameResult;

const BIN: &str = env!("CARGO_BIN_EXE_attnpipe");

fn attnpipe(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SPARSE_SPEC: &str = r#"
width = 1920
height = 1080
frames = 3
seed = 11
background = [20, 20, 20]

[[objects]]
class = "person"
x = 300
y = 400
w = 60
h = 150
vx = 4.0

[[objects]]
class = "car"
x = 1500
y = 200
w = 120
h = 70
"#;

fn sparse_scene(dir: &Path) {
    fs::write(dir.join("scene.toml"), SPARSE_SPEC).unwrap();
    ok(&attnpipe(dir, &["gen-synthetic", "--spec", "scene.toml", "--out", "scene"]));
    fs::write(
        dir.join("run.toml"),
        r#"
[pipeline]
preset = "1 att, 4 fin, 20 over"
[paths]
frames = "scene"
gt = "scene/gt.jsonl"
results = "out/results.jsonl"
timing = "out/timing.csv"
"#,
    )
    .unwrap();
}

fn counts(csv_path: &Path) -> Vec<(usize, usize)> {
    let mut rdr = csv::Reader::from_path(csv_path).unwrap();
    let h = rdr.headers().unwrap().clone();
    let a = h.iter().position(|c| c == "active_count").unwrap();
    let t = h.iter().position(|c| c == "total_count").unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[a].parse().unwrap(), r[t].parse().unwrap())
        })
        .collect()
}

#[test]
fn gen_synthetic_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scene.toml"), SPARSE_SPEC).unwrap();
    ok(&attnpipe(dir.path(), &["gen-synthetic", "--spec", "scene.toml", "--out", "a"]));
    ok(&attnpipe(dir.path(), &["gen-synthetic", "--spec", "scene.toml", "--out", "b"]));
    for name in ["frame_000000.ppm", "frame_000002.ppm", "gt.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
    assert_eq!(load_ground_truth(&dir.path().join("a/gt.jsonl")).unwrap().len(), 6);
}

#[test]
fn empty_scene_gives_empty_gt() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), "width = 64\nheight = 48\nframes = 2\n").unwrap();
    ok(&attnpipe(dir.path(), &["gen-synthetic", "--spec", "s.toml", "--out", "o"]));
    assert_eq!(fs::read(dir.path().join("o/gt.jsonl")).unwrap(), b"");
    assert!(dir.path().join("o/frame_000001.ppm").is_file());
}

#[test]
fn invalid_scene_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), "width = 0\nheight = 48\nframes = 2\n").unwrap();
    let out = attnpipe(dir.path(), &["gen-synthetic", "--spec", "s.toml", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn allcrops_evaluates_every_cell_and_pipeline_fewer() {
    let dir = tempfile::tempdir().unwrap();
    sparse_scene(dir.path());
    let stdout = ok(&attnpipe(dir.path(), &["run", "--config", "run.toml", "--mode", "allcrops"]));
    assert!(stdout.contains("FPS"), "{stdout}");
    let all = counts(&dir.path().join("out/timing.csv"));
    assert_eq!(all.len(), 3);
    assert!(all.iter().all(|&(a, t)| a == 32 && t == 32));

    ok(&attnpipe(dir.path(), &["run", "--config", "run.toml"]));
    let pipe = counts(&dir.path().join("out/timing.csv"));
    assert!(pipe.iter().all(|&(a, t)| a < t && t == 32), "{pipe:?}");
    let results = read_results(&dir.path().join("out/results.jsonl")).unwrap();
    assert_eq!(results.len(), 3);
    assert!(results.iter().all(|r| r.detections.len() == 2));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    sparse_scene(dir.path());
    ok(&attnpipe(
        dir.path(),
        &["run", "--config", "run.toml", "--mode", "allcrops", "--final-rows", "2", "--timing", "t2.csv"],
    ));
    assert!(counts(&dir.path().join("t2.csv")).iter().all(|&(_, t)| t == 8));
}

#[test]
fn bad_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    sparse_scene(dir.path());
    let out = attnpipe(dir.path(), &["run", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "[pipeline]\npreset = \"3 att, 1 fin, 20 over\"\n[paths]\nframes = \"scene\"\ngt = \"scene/gt.jsonl\"\nresults = \"out/r.jsonl\"\ntiming = \"out/t.csv\"\n").unwrap();
    let out = attnpipe(dir.path(), &["run", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let out = attnpipe(dir.path(), &["run", "--config", "run.toml", "--frames", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn perfect_results(dir: &Path) -> Vec<FrameResult> {
    let gt = load_ground_truth(&dir.join("scene/gt.jsonl")).unwrap();
    gt.frame_ids()
        .map(|f| FrameResult {
            frame_id: f,
            detections: gt
                .frame(f)
                .iter()
                .map(|o| Detection {
                    rect: o.rect,
                    class_label: o.class_label.clone(),
                    confidence: 1.0,
                })
                .collect(),
            active_count: 0,
            total_count: 0,
            timing: Default::default(),
        })
        .collect()
}

#[test]
fn eval_reports() {
    let dir = tempfile::tempdir().unwrap();
    sparse_scene(dir.path());
    let mut results = perfect_results(dir.path());
    write_results(&results, &dir.path().join("perfect.jsonl"), false).unwrap();
    let out = ok(&attnpipe(
        dir.path(),
        &["eval", "--detections", "perfect.jsonl", "--gt", "scene/gt.jsonl", "--counts", "counts.csv"],
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    for k in ["ap25", "ap50", "ap75"] {
        assert_eq!(v["thresholds"][k]["ap"], 1.0, "{k}");
    }
    let counts = fs::read_to_string(dir.path().join("counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 4);

    // threshold order does not change the keys
    let out = ok(&attnpipe(
        dir.path(),
        &["eval", "--detections", "perfect.jsonl", "--gt", "scene/gt.jsonl", "--thresholds", "0.75,0.25,0.5"],
    ));
    let w: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v, w);

    for r in &mut results {
        r.detections.clear();
    }
    write_results(&results, &dir.path().join("empty.jsonl"), false).unwrap();
    let out = ok(&attnpipe(dir.path(), &["eval", "--detections", "empty.jsonl", "--gt", "scene/gt.jsonl"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["thresholds"]["ap50"]["ap"], 0.0);
    assert_eq!(v["thresholds"]["ap50"]["false_negatives"], 6);

    write_results(&results[..1], &dir.path().join("short.jsonl"), false).unwrap();
    let out = attnpipe(dir.path(), &["eval", "--detections", "short.jsonl", "--gt", "scene/gt.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatched frame ids"));
}

#[test]
fn simulate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sim.toml"),
        "per_crop_cost_ms = 10.0\ntransfer_cost_per_crop_ms = 0.5\n[[frames]]\nattention_crops = 2\nfinal_crops = 6\n[[frames]]\nattention_crops = 2\nfinal_crops = 4\n",
    )
    .unwrap();
    ok(&attnpipe(dir.path(), &["simulate", "--scenario", "sim.toml", "--na", "0,1", "--nf", "1,2,3", "--out", "sim.csv"]));
    let text = fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert!(text.starts_with("n_a,n_f,frames,"));
    assert_eq!(text.lines().count(), 7);

    fs::write(dir.path().join("bad.toml"), "per_crop_cost_ms = 0.0\ntransfer_cost_per_crop_ms = 0.5\nframes = []\n").unwrap();
    let out = attnpipe(dir.path(), &["simulate", "--scenario", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_duplicate_bind_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gt.jsonl"), "").unwrap();
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap().to_string();
    let out = attnpipe(dir.path(), &["serve", "--listen", &addr, "--detector", "oracle:gt.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));

    let out = attnpipe(dir.path(), &["serve", "--listen", "127.0.0.1:0", "--detector", "yolo"]);
    assert_eq!(out.status.code(), Some(2));
}
