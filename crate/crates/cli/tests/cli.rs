use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
seed = 11

[scene]
speed_scale = 3.0

[training]
train_scenes = 2
val_scenes = 1
frames_per_scene = 16
batch_size = 8
local_epochs = 1
image_epochs = 1
remote_warmup_epochs = 1
remote_stage1_epochs = 1
remote_stage2_epochs = 1
fused_epochs = 1

[eval]
episodes = 2
frames = 24
warmup_frames = 8
monte_carlo_samples = 2000
"#;

fn delayfuse(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayfuse"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// A directory with all five checkpoints trained on the tiny config.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY);
        for target in ["local", "remote", "fused"] {
            let out = delayfuse(&["train", target, "--config", &cfg], dir.path());
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        dir
    })
    .path()
}

#[test]
fn seed_is_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    let out = delayfuse(&["gen-scene"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[training]\nlearning_rate = 0.1\n");
    let out = delayfuse(&["gen-scene", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fused_requires_remote_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = delayfuse(&["train", "fused", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires remote checkpoint"));
}

#[test]
fn sweep_without_checkpoints_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = delayfuse(&["sweep", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_scene_writes_dump_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = delayfuse(&["gen-scene", "--seed", "5", "--frames", "10"], dir.path());
    assert!(out.status.success());
    let dump = delayfuse::scene::SceneDump::read(&dir.path().join("scene.ddsc")).unwrap();
    assert_eq!(dump.len(), 10);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest_gen-scene.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["outputs"]["scene.ddsc"].is_string());
}

#[test]
fn training_is_reproducible() {
    let base = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = delayfuse(&["train", "local", "--config", &cfg], dir.path());
    assert!(out.status.success());
    assert_eq!(
        fs::read(base.join("local.ddnn")).unwrap(),
        fs::read(dir.path().join("local.ddnn")).unwrap()
    );
}

fn base_cfg() -> String {
    trained().join("config.toml").to_string_lossy().into_owned()
}

fn copy_checkpoints(from: &Path, to: &Path) {
    for name in ["local.ddnn", "remote_image.ddnn", "remote_video.ddnn", "remote.ddnn", "fused.ddnn"] {
        fs::copy(from.join(name), to.join(name)).unwrap();
    }
}

#[test]
fn sweep_outputs_are_byte_identical_across_runs() {
    let base = trained();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        copy_checkpoints(base, dir.path());
        let cfg = write_config(dir.path(), TINY);
        let out = delayfuse(&["sweep", "--config", &cfg], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv5 = fs::read(dir.path().join("fig5.csv")).unwrap();
        let csv6 = fs::read(dir.path().join("fig6.csv")).unwrap();
        let svg = fs::read_to_string(dir.path().join("fig5.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5);
        outputs.push((csv5, csv6, dir));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);
    let header = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(header.starts_with("scenario,delay_frames,delay_ms,miou_mean,miou_std\n"));
}

#[test]
fn jitter_emits_all_figures() {
    let base = trained();
    let dir = tempfile::tempdir().unwrap();
    copy_checkpoints(base, dir.path());
    let cfg = write_config(dir.path(), TINY);
    let out = delayfuse(&["jitter", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["fig7.csv", "fig7.svg", "fig8.csv", "fig8.svg", "fig9.csv", "fig9.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let matrix = fs::read_to_string(dir.path().join("fig8.csv")).unwrap();
    let lines: Vec<_> = matrix.lines().collect();
    assert_eq!(lines.len(), 1 + 9);
    assert_eq!(lines[0].split(',').count(), 1 + 6);
    let fig9 = fs::read_to_string(dir.path().join("fig9.csv")).unwrap();
    for line in fig9.lines().skip(1).filter(|l| l.starts_with("fused,") && !l.starts_with("fused,0.000")) {
        let cols: Vec<_> = line.split(',').collect();
        let (e, mc): (f64, f64) = (cols[4].parse().unwrap(), cols[5].parse().unwrap());
        assert!((e - mc).abs() < 0.02, "{line}");
    }
}

#[test]
fn replay_is_deterministic() {
    let base = trained();
    let a = delayfuse(&["replay", "--config", &base_cfg(), "--scenario", "fused"], base);
    assert!(a.status.success());
    let first = fs::read(base.join("replay_fused.csv")).unwrap();
    let b = delayfuse(&["replay", "--config", &base_cfg(), "--scenario", "fused"], base);
    assert!(b.status.success());
    assert_eq!(first, fs::read(base.join("replay_fused.csv")).unwrap());
}

#[test]
fn serve_port_conflict_exits_4() {
    let base = trained();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let cfg = base_cfg();
    let out = delayfuse(&["serve", "--config", &cfg, "--port", &port], base);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn client_without_server_flushes_log_and_exits_4() {
    let base = trained();
    let dir = tempfile::tempdir().unwrap();
    copy_checkpoints(base, dir.path());
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port().to_string()
    };
    let cfg = write_config(dir.path(), &TINY.replace("frames = 24", "frames = 12"));
    let out = delayfuse(&["client", "--config", &cfg, "--port", &port], dir.path());
    assert_eq!(out.status.code(), Some(4));
    let log = fs::read_to_string(dir.path().join("client_fused.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);
}

#[test]
fn live_client_and_server_over_loopback() {
    let base = trained();
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port().to_string()
    };
    let cfg = base_cfg();
    let mut server = Command::new(env!("CARGO_BIN_EXE_delayfuse"))
        .args(["serve", "--config", &cfg, "--port", &port, "--sessions", "1", "--out"])
        .arg(base)
        .spawn()
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    copy_checkpoints(base, dir.path());
    let ccfg = write_config(dir.path(), TINY);
    let mut out = None;
    for _ in 0..50 {
        let o = delayfuse(&["client", "--config", &ccfg, "--port", &port], dir.path());
        if o.status.success() {
            out = Some(o);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
    let out = out.expect("client connected");
    assert!(out.status.success());
    assert!(server.wait().unwrap().success());
    let log = fs::read_to_string(dir.path().join("client_fused.csv")).unwrap();
    assert!(log.lines().skip(9).all(|l| l.split(',').nth(3) == Some("1")), "{log}");
}
