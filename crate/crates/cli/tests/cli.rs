use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_acwm"));
    c.env("RUST_LOG", "warn");
    c
}

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_trajectory.json")
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn segment_sample_file() {
    let o = bin().args(["segment", "--in"]).arg(sample()).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), r#"{"t_b":3,"t_e":6}"#);
    let o = bin().args(["segment", "--phases", "--in"]).arg(sample()).output().unwrap();
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["segments"]["fetch"], serde_json::json!([0, 3]));
    assert_eq!(v["segments"]["grasp"], serde_json::json!([3, 6]));
    assert_eq!(v["segments"]["home"], serde_json::json!([6, 7]));
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let o = bin().arg("--no-such-flag").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = bin().args(["segment", "--in", "/definitely/missing.json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"episode": {"eps_term": 0}}"#).unwrap();
    let o = bin().arg("--config").arg(&cfg).args(["segment", "--in"]).arg(sample()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["rollout", "--backend", "learned"]);
    assert_eq!(o.status.code(), Some(2));
    // no contact phase in a constant-open profile
    let flat = dir.path().join("flat.json");
    let mut t: Value = serde_json::from_str(&std::fs::read_to_string(sample()).unwrap()).unwrap();
    for f in t["frames"].as_array_mut().unwrap() {
        f[0]["openness"] = 1.0.into();
    }
    std::fs::write(&flat, t.to_string()).unwrap();
    let o = bin().args(["segment", "--in"]).arg(&flat).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augment_counts() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["augment", "--samples", "3", "--seeds", "5"]));
    assert_eq!(v["augmented"], 15);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["augmented"].as_array().unwrap().len(), 15);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn oracle_rollout_30_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["rollout", "--backend", "oracle", "--chunks", "30"]));
    assert_eq!(v["chunks"], 30);
    let rec: Value = serde_json::from_str(&std::fs::read_to_string(v["record"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(rec["chunks"].as_array().unwrap().len(), 30);
    assert_eq!(rec["termination"]["reason"], "max_chunks");
    // same seed, same content
    let dir2 = tempfile::tempdir().unwrap();
    let w = stdout_json(&run(dir2.path(), &["rollout", "--backend", "oracle", "--chunks", "30"]));
    assert_eq!(v["content_hash"], w["content_hash"]);
}

#[test]
fn scripted_rollout_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["rollout", "--policy", "scripted"]));
    assert_eq!(v["termination"]["reason"], "threshold");
    assert_eq!(v["auto_label"], "success");
}

#[test]
fn simulate_and_render_maps_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["simulate", "--episodes", "2"]));
    assert_eq!(v["episodes"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("episodes/episode_0000/head/0000.png").exists());
    assert!(dir.path().join("episodes/episode_0001/trajectory.json").exists());
    let traj = dir.path().join("episodes/episode_0000/trajectory.json");
    let v = stdout_json(&run(dir.path(), &["render-maps", "--in", traj.to_str().unwrap()]));
    let n = v["frames"].as_u64().unwrap() as usize;
    assert!(dir.path().join(format!("maps/wrist/action_{:04}.png", n - 1)).exists());
    assert!(dir.path().join("maps/head/rays_direction.png").exists());
}

#[test]
fn train_then_learned_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["train", "--steps", "3", "--episodes", "2"]));
    assert_eq!(v["steps"], 3);
    let ckpt = dir.path().join("checkpoint");
    assert!(ckpt.join("manifest.json").exists());
    let v = stdout_json(&run(dir.path(), &["rollout", "--backend", "learned", "--checkpoint", ckpt.to_str().unwrap(), "--chunks", "1", "--views", "head"]));
    assert_eq!(v["chunks"], 1);
    assert!(v["auto_label"].is_null());
}

#[test]
fn evaluate_and_compare_on_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["evaluate", "--episodes", "4", "--sigmas", "0,0.05"]));
    let p = v["policies"].as_array().unwrap();
    assert_eq!(p[0]["auto"]["sr"], 1.0);
    assert!(p[1]["auto"]["sr"].as_f64().unwrap() < 1.0);
    assert!(dir.path().join("report.json").exists());
    let v = stdout_json(&run(dir.path(), &["compare", "--episodes", "4", "--sigmas", "0,0.05"]));
    assert_eq!(v["spearman_policies"], 1.0);
}

#[test]
fn serve_honours_port_env() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin().arg("--out").arg(dir.path()).arg("serve").env("PORT", port.to_string()).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let start = Instant::now();
    let resp = loop {
        if let Ok(mut s) = TcpStream::connect(("127.0.0.1", port)) {
            s.write_all(b"GET /reports/summary HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            let mut buf = String::new();
            s.read_to_string(&mut buf).unwrap();
            break buf;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(r#"{"rows":[]}"#));
}
