use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rodiff_core::dataset::{split_of, Split};
use tempfile::TempDir;

const TINY: &str = r#"
[train]
batch = 2
diffusion_steps = 64
iterations = 10

[train.denoiser]
d_model = 8
blocks = 1
heads = 2
goal_tokens = 2

[adapt]
ddim_steps = 4
inner_steps = 1
"#;

fn rodiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rodiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rodiff(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A tiny dataset and checkpoint shared by the tests below.
struct Fixture {
    _tmp: TempDir,
    dir: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        fs::write(dir.join("tiny.toml"), TINY).unwrap();
        ok(&dir, &["--seed", "3", "gen-dataset", "--n", "12", "--out", "ds"]);
        ok(&dir, &["--config", "tiny.toml", "--seed", "1", "train", "--dataset", "ds", "--out", "m.ckpt"]);
        Fixture { _tmp: tmp, dir }
    })
}

#[test]
fn gen_dataset_twice_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let a = ok(d, &["gen-dataset", "--n", "10", "--seed", "7", "--out", "a"]);
    let b = ok(d, &["gen-dataset", "--n", "10", "--seed", "7", "--out", "b"]);
    assert_eq!(a, b);
    let ma = fs::read(d.join("a/manifest.json")).unwrap();
    let mb = fs::read(d.join("b/manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn out_of_range_waypoint_exits_2_naming_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rodiff(tmp.path(), &["simulate", "--theta1", "0,0.5,1,4", "--theta2", "0,0,0,0"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("theta[0][3]"), "{msg}");
    assert!(msg.contains("3.14159"), "{msg}");
}

#[test]
fn simulate_writes_record_and_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let text = ok(d, &["simulate", "--theta1", "0,1,2,3", "--theta2", "0,-0.5,0.5,0", "--out", "r.gvsd", "--svg", "tip.svg"]);
    assert!(text.contains("valid: true"), "{text}");
    let traj = rodiff_core::dataset::read_record(&d.join("r.gvsd")).unwrap();
    assert_eq!(traj.control.theta[0], [0.0, 1.0, 2.0, 3.0]);
    assert!(fs::read_to_string(d.join("tip.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rodiff(tmp.path(), &["gen-dataset", "--n", "ten", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--n"));
    let out = rodiff(tmp.path(), &["simulate", "--theta1", "0,1", "--theta2", "0,0,0,0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--theta1"));
    let out = rodiff(tmp.path(), &["--threads", "0", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    let out = rodiff(tmp.path(), &["--config", "bad.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("lr"));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rodiff(tmp.path(), &["plot", "--input", "nope.csv", "--out", "x.svg"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_on_empty_split_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-dataset", "--n", "1", "--seed", "5", "--out", "one"]);
    let empty = match split_of(0) {
        Split::Train => "test",
        Split::Test => "train",
    };
    let f = fixture();
    let ckpt = f.dir.join("m.ckpt");
    let out = rodiff(d, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", "one", "--split", empty]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("empty"));
}

fn drop_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            if f.len() == 9 {
                f.remove(7);
            }
            f.join(",")
        })
        .collect()
}

#[test]
fn pipeline_is_deterministic() {
    let f = fixture();
    let d = &f.dir;
    ok(d, &["--config", "tiny.toml", "--seed", "1", "train", "--dataset", "ds", "--out", "m2.ckpt"]);
    assert_eq!(fs::read(d.join("m.ckpt")).unwrap(), fs::read(d.join("m2.ckpt")).unwrap());
    for (mode, name) in [("none", "e1"), ("none", "e2"), ("proj_finetune", "g1"), ("proj_finetune", "g2")] {
        let out = format!("{name}.csv");
        ok(d, &["--config", "tiny.toml", "--seed", "4", "eval", "--checkpoint", "m.ckpt", "--dataset", "ds", "--split", "train", "--limit", "3", "--mode", mode, "--out", &out]);
    }
    let read = |n: &str| drop_seconds(&fs::read_to_string(d.join(n)).unwrap());
    assert_eq!(read("e1.csv"), read("e2.csv"));
    assert_eq!(read("g1.csv"), read("g2.csv"));
    assert_eq!(read("e1.csv").len(), 2 + 3);
}

#[test]
fn sample_and_plot_every_artifact() {
    let f = fixture();
    let d = &f.dir;
    let text = ok(d, &["--config", "tiny.toml", "sample", "--checkpoint", "m.ckpt", "--goal", "0.2,-0.1,-0.3", "--mode", "sample-grad", "--out", "tok.csv", "--diagnostics", "diag.csv", "--rollout"]);
    assert!(text.contains("distance_m:"), "{text}");
    let tokens = fs::read_to_string(d.join("tok.csv")).unwrap();
    assert_eq!(tokens.lines().count(), 1 + 51);
    ok(d, &["--config", "tiny.toml", "eval", "--checkpoint", "m.ckpt", "--dataset", "ds", "--split", "train", "--limit", "2", "--mode", "none", "--out", "rep.csv"]);
    let report = rodiff_core::eval::EvalReport::from_csv(&fs::read_to_string(d.join("rep.csv")).unwrap()).unwrap();
    for (input, out) in [("rep.csv", "h.svg"), ("m.loss.csv", "l.svg"), ("diag.csv", "g.svg")] {
        ok(d, &["plot", "--input", input, "--out", out]);
        assert!(fs::read_to_string(d.join(out)).unwrap().contains("</svg>"));
    }
    let hist = fs::read_to_string(d.join("h.svg")).unwrap();
    assert!(hist.contains(&format!("{} cases, mean {:.4} m", report.n_cases, report.mean_distance)));
    let out = rodiff(d, &["plot", "--input", "tiny.toml", "--out", "x.svg"]);
    assert_eq!(out.status.code(), Some(2));
}
