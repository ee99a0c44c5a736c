use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybridmesh"));
    c.env_remove("HYBRIDMESH_OUT_DIR");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

fn run_into(name: &str, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg("--scenario")
        .arg(scenario(name))
        .arg("--out-dir")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn verify(log: &Path) -> Output {
    bin().arg("replay-verify").arg(log).output().unwrap()
}

#[test]
fn every_example_scenario_succeeds_and_replays_clean() {
    for name in ["manual", "federated-failover", "gateway", "overlay", "overflow"] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_into(name, dir.path(), &[]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        for f in ["metrics.json", "events.ndjson", "manifest.json", "timeline.csv", "effective.toml"] {
            assert!(dir.path().join(f).is_file(), "{name} missing {f}");
        }
        let v = verify(&dir.path().join("events.ndjson"));
        assert_eq!(v.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&v.stdout));
    }
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_into("federated-failover", a.path(), &["--seed", "9"]).status.success());
    assert!(run_into("federated-failover", b.path(), &["--seed", "9"]).status.success());
    for f in ["metrics.json", "events.ndjson", "manifest.json", "timeline.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn mode_override_keeps_the_manifest() {
    let manual = tempfile::tempdir().unwrap();
    let fed = tempfile::tempdir().unwrap();
    assert!(run_into("manual", manual.path(), &[]).status.success());
    assert!(run_into("manual", fed.path(), &["--mode", "federated"]).status.success());
    assert_eq!(
        fs::read(manual.path().join("manifest.json")).unwrap(),
        fs::read(fed.path().join("manifest.json")).unwrap()
    );
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(fed.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["report"]["mode"], "federated");
    assert_eq!(metrics["digest_algorithm"], "sha256");
}

#[test]
fn env_var_overrides_out_dir() {
    let flag = tempfile::tempdir().unwrap();
    let env = tempfile::tempdir().unwrap();
    let out = bin()
        .env("HYBRIDMESH_OUT_DIR", env.path())
        .arg("run")
        .arg("--scenario")
        .arg(scenario("manual"))
        .arg("--out-dir")
        .arg(flag.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env.path().join("metrics.json").is_file());
    assert!(!flag.path().join("metrics.json").exists());
}

#[test]
fn bad_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[[sites]]\nid = \"a\"\nslots = 0\n").unwrap();
    let out = bin().arg("run").arg("--scenario").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let missing = bin().arg("run").arg("--scenario").arg(dir.path().join("nope.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn event_budget_abort_exits_2_with_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("manual")).unwrap();
    let tiny = dir.path().join("tiny.toml");
    fs::write(&tiny, text.replacen("seed = 42", "seed = 42\nmax_events = 10", 1)).unwrap();
    let out = bin()
        .arg("run")
        .arg("--scenario")
        .arg(&tiny)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let log = dir.path().join("events.ndjson");
    assert!(fs::read_to_string(&log).unwrap().lines().count() > 0);
    assert_eq!(verify(&log).status.code(), Some(4));
}

#[test]
fn doctored_double_claim_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_into("federated-failover", dir.path(), &[]).status.success());
    let log = dir.path().join("events.ndjson");
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();

    let claim = lines
        .iter()
        .position(|l| l["kind"] == "claim")
        .expect("run has claims");
    let mut rival = lines[claim].clone();
    let holder = rival["site"].as_str().unwrap().to_string();
    let other = if holder == "private" { "public" } else { "private" };
    rival["site"] = other.into();

    let mut doctored = lines.clone();
    doctored.insert(claim + 1, rival);
    for (seq, l) in doctored.iter_mut().enumerate() {
        l["seq"] = (seq as u64).into();
    }
    let text: String = doctored.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&log, text).unwrap();

    let out = verify(&log);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("lease-exclusivity"));
}

#[test]
fn explain_lists_gateway_routes() {
    let out = bin()
        .arg("explain")
        .arg("--scenario")
        .arg(scenario("gateway"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gateway-0"));
    assert!(text.lines().count() > 12);
}

#[test]
fn serve_node_answers_service_info() {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpStream;
    use std::process::Stdio;

    let mut child = bin()
        .args(["serve", "--component", "node", "--site", "a", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().trim_start_matches("listening on http://").to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /v1/service-info HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"a\""));
}
