use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gradleak::experiment::parse_ppm;

const SMALL: &str = r#"
name = "smoke"
[model]
p = 0.25
[data]
source = "synthetic"
synthetic_size = 60
synthetic_side = 12
synthetic_classes = 4
victims = 2
batch_size = 2
[attack]
variant = ["ig_eval", "dia"]
max_iterations = 25
[fed]
num_clients = 3
rounds = 4
batch_size = 8
eval_size = 30
"#;

fn gradleak(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradleak"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), SMALL).unwrap();
    dir
}

fn collect(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_attack_is_byte_identical_per_seed() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = gradleak(dir.path(), &["run-attack", "--config", "exp.toml", "--seed", "7", "--output-dir", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = collect(&dir.path().join("a"));
    let b = collect(&dir.path().join("b"));
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "smoke/seed7/victims.csv",
        "smoke/seed7/summary.csv",
        "smoke/seed7/dia_p0.25_b2/metrics.csv",
        "smoke/seed7/dia_p0.25_b2/loss_trace_v1.csv",
        "smoke/seed7/dia_p0.25_b2/attacker_masks_v0_layer2.csv",
        "smoke/seed7/dia_p0.25_b2/client_masks_v0_layer1.csv",
        "smoke/seed7/dia_p0.25_b2/grid.ppm",
        "smoke/seed7/ig_eval_p0.25_b2/grid_v0.ppm",
    ] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    assert!(!names.iter().any(|n| n.ends_with(".tmp")));

    let metrics = String::from_utf8(a.iter().find(|(n, _)| n.ends_with("dia_p0.25_b2/metrics.csv")).unwrap().1.clone()).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "sample_id,ssim,psnr,mse,mmd,trd");
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 6 && !l.ends_with(',')));

    let o = gradleak(dir.path(), &["run-attack", "--config", "exp.toml", "--seed", "8", "--output-dir", "c"]);
    assert!(o.status.success());
    let c = collect(&dir.path().join("c"));
    let metrics_c = c.iter().find(|(n, _)| n.ends_with("dia_p0.25_b2/metrics.csv")).unwrap();
    assert_ne!(metrics_c.1, metrics.as_bytes());
}

#[test]
fn flags_override_the_file() {
    let dir = setup();
    let o = gradleak(
        dir.path(),
        &["run-attack", "--config", "exp.toml", "--variant", "wiig", "--p", "0.5", "--victims", "1"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seed_dir = dir.path().join("runs/smoke/seed0");
    let mut dirs: Vec<String> = fs::read_dir(&seed_dir)
        .unwrap()
        .filter_map(|e| {
            let e = e.unwrap();
            e.path().is_dir().then(|| e.file_name().to_string_lossy().into_owned())
        })
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["wiig_p0.5_b2"]);
    let victims = fs::read_to_string(seed_dir.join("victims.csv")).unwrap();
    assert_eq!(victims.lines().next(), Some("index,label"));
    assert_eq!(victims.lines().count(), 1 + 2);
}

#[test]
fn config_and_io_errors_exit_2() {
    let dir = setup();
    let o = gradleak(dir.path(), &["run-attack", "--data-path", "no/such/dir"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let o = gradleak(dir.path(), &["fed-train", "--config", "exp.toml", "--p", "1.2"]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "[attack]\nstep_size = 3\n").unwrap();
    let o = gradleak(dir.path(), &["run-attack", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));

    let o = gradleak(dir.path(), &["run-attack", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fed_train_writes_one_trace_per_rate() {
    let dir = setup();
    let run = |out: &str| {
        let o = gradleak(dir.path(), &["fed-train", "--config", "exp.toml", "--p", "0,0.5", "--output-dir", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        collect(&dir.path().join(out))
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "smoke/seed0/fed_p0/rounds.csv",
        "smoke/seed0/fed_p0/model.ckpt",
        "smoke/seed0/fed_p0.5/rounds.csv",
        "smoke/seed0/fed_p0.5/model.ckpt",
        "smoke/seed0/fed_summary.csv",
    ] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    let rounds = String::from_utf8(a.iter().find(|(n, _)| n.ends_with("fed_p0.5/rounds.csv")).unwrap().1.clone()).unwrap();
    assert_eq!(rounds.lines().next(), Some("round,accuracy,mean_client_loss"));
    assert_eq!(rounds.lines().count(), 5);

    // the trained model feeds straight into an attack at another rate
    let o = gradleak(
        dir.path(),
        &[
            "run-attack",
            "--config",
            "exp.toml",
            "--checkpoint",
            "a/smoke/seed0/fed_p0.5/model.ckpt",
            "--p",
            "0.25",
            "--victims",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn render_reproduces_the_run_grid() {
    let dir = setup();
    let o = gradleak(dir.path(), &["run-attack", "--config", "exp.toml", "--variant", "ig_eval"]);
    assert!(o.status.success());
    let cell = dir.path().join("runs/smoke/seed0/ig_eval_p0.25_b2");
    let o = gradleak(
        dir.path(),
        &[
            "render",
            "--originals",
            cell.join("originals.csv").to_str().unwrap(),
            "--reconstructions",
            cell.join("reconstructions.csv").to_str().unwrap(),
            "--out",
            "grid.ppm",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rendered = fs::read(dir.path().join("grid.ppm")).unwrap();
    assert_eq!(rendered, fs::read(cell.join("grid.ppm")).unwrap());
    let img = parse_ppm(&rendered).unwrap();
    // 4 samples of 12x12: 4*12 + 3 separators wide, 2*12 + 1 tall
    assert_eq!((img.width, img.height), (51, 25));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = gradleak(dir.path(), &["selfcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
}
