use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use ed25519_dalek::SigningKey;
use en_core::batch::FeedKind;
use en_core::domain::{DiagnosisKey, RegionId, ReplicationType, Timestamp, VendorId};
use en_core::keystore::DiagnosisKeyUpload;
use en_core::registry::{BackendRecord, CertChain, Certificate, RegistryEntry};
use en_core::service::encode_upload;
use en_core::transport::{Request, Status, Transport};
use en_net::TlsTransport;

fn en(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_en")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn key(seed: u8) -> SigningKey {
    SigningKey::from_bytes(&[seed; 32])
}

fn r(s: &str) -> RegionId {
    s.parse().unwrap()
}

fn chain(root: &SigningKey, region: &str, region_key: &SigningKey) -> CertChain {
    CertChain {
        root: Certificate::self_signed("ROOT", root),
        cluster: None,
        region: Certificate::issue(region, region_key.verifying_key(), "ROOT", root),
    }
}

fn entry(root: &SigningKey, region: &str, region_key: &SigningKey) -> RegistryEntry {
    let record = BackendRecord::signed(
        r(region),
        None,
        VendorId::new("acme").unwrap(),
        format!("https://{}.example:8443", region.to_lowercase()),
        key(90).verifying_key(),
        BTreeSet::from([ReplicationType::Partial]),
        region_key,
    );
    RegistryEntry {
        record,
        chain: chain(root, region, region_key),
    }
}

#[test]
fn help_lists_every_subcommand() {
    let top = stdout(&en(&["--help"]));
    for name in ["serve", "registry", "sim", "--log-level", "--clock"] {
        assert!(top.contains(name), "{name} missing from:\n{top}");
    }
    let sim = stdout(&en(&["sim", "--help"]));
    for name in ["run", "check-alt2", "estimate-bandwidth"] {
        assert!(sim.contains(name), "{name} missing from:\n{sim}");
    }
    let registry = stdout(&en(&["registry", "--help"]));
    for name in ["init", "add", "verify", "list"] {
        assert!(registry.contains(name), "{name} missing from:\n{registry}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(en(&["serve", "--region", "XX!", "--config", "node.toml"]).status.code(), Some(2));
    assert_eq!(en(&["serve", "--region", "XX!"]).status.code(), Some(2));
    assert_eq!(en(&["sim", "run"]).status.code(), Some(2));
    assert_eq!(en(&["sim", "run", "x.scn", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(en(&["--clock", "sundial", "sim", "check-alt2", "x.scn"]).status.code(), Some(2));
    assert_eq!(en(&["teleport"]).status.code(), Some(2));
}

#[test]
fn corpus_scenario_runs_and_writes_its_report() {
    let out = en(&["sim", "run", &scenario("f1_alice_bob.scn")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("PASS"));

    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let out = en(&["--log-level", "debug", "sim", "run", &scenario("f1_alice_bob.scn"), "--seed", "7", "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(fs::read_to_string(&report).unwrap().contains("PASS"));
    let json = fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(json.contains("\"seed\": 7"), "{json}");
    assert!(json.contains("\"passed\": true"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.scn");
    fs::write(&broken, "name = \"x\"\nhorizon_days = 0\n").unwrap();
    assert_eq!(en(&["sim", "run", broken.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(en(&["sim", "run", "/nonexistent.scn"]).status.code(), Some(1));
    let out = en(&["sim", "estimate-bandwidth", "--infections", "0", "--population", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn alt2_check_reports_its_verdict() {
    let out = en(&["sim", "check-alt2", &scenario("alt2_cluster.scn")]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("equivalent"));
    // Partial replication between regions is outside the check's scope.
    let out = en(&["sim", "check-alt2", &scenario("f1_alice_bob.scn")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with("inapplicable"));
}

#[test]
fn bandwidth_estimate_prints_exact_and_rounded_values() {
    let out = en(&[
        "sim",
        "estimate-bandwidth",
        "--keys",
        "14",
        "--key-bytes",
        "16",
        "--infections",
        "200000",
        "--population",
        "330000000",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    // 14 * 16 * 200000 bytes per user; times the population.
    assert!(text.contains("44800000 bytes/day (~45 MB)"), "{text}");
    assert!(text.contains("14784000000000000 bytes/day (~15 PB)"), "{text}");
}

#[test]
fn registry_round_trip_through_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("registry.dat");
    let f = file.to_str().unwrap();
    let root = key(1);
    let root_hex = hex::encode(root.verifying_key().to_bytes());
    assert_eq!(en(&["registry", "init", f, "--root-key", &root_hex]).status.code(), Some(0));
    assert_eq!(en(&["registry", "init", f, "--root-key", &root_hex]).status.code(), Some(1));

    let good = dir.path().join("it.entry");
    fs::write(&good, hex::encode(entry(&root, "IT", &key(2)).encode())).unwrap();
    assert_eq!(en(&["registry", "add", f, good.to_str().unwrap()]).status.code(), Some(0));

    let forged = dir.path().join("ch.entry");
    fs::write(&forged, hex::encode(entry(&key(66), "CH", &key(3)).encode())).unwrap();
    let out = en(&["registry", "add", f, forged.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rejected CH"));

    let out = en(&["registry", "verify", f]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("1 valid, 0 invalid"));
    let listing = stdout(&en(&["registry", "list", f]));
    assert!(listing.starts_with("IT\t-\tacme\thttps://it.example:8443\tpartial"), "{listing}");

    // Append the forged entry by hand: verify must flag it.
    let mut text = fs::read_to_string(&file).unwrap();
    text.push_str(fs::read_to_string(&forged).unwrap().trim());
    text.push('\n');
    fs::write(&file, text).unwrap();
    let out = en(&["registry", "verify", f]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("1 valid, 1 invalid"));
}

struct Running(Child);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn write_node_config(dir: &Path, root: &SigningKey, region_key: &SigningKey) -> PathBuf {
    let path = dir.join("it.toml");
    let text = format!(
        "region = \"IT\"\nlisten = \"127.0.0.1:0\"\nsigning_key = \"{}\"\nauth_codes = [\"ok\"]\n\n[tls]\nchain = \"{}\"\nkey = \"{}\"\ntrusted_root = \"{}\"\n",
        hex::encode([5u8; 32]),
        hex::encode(chain(root, "IT", region_key).encode()),
        hex::encode(region_key.to_bytes()),
        hex::encode(root.verifying_key().to_bytes())
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn serve_answers_over_tls() {
    let dir = tempfile::tempdir().unwrap();
    let root = key(1);
    let config = write_node_config(dir.path(), &root, &key(2));
    let mut child = Command::new(env!("CARGO_BIN_EXE_en"))
        .args(["--clock", "simulated", "serve", "--region", "IT", "--config", config.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _guard = Running(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("IT listening on ").expect(&line).to_owned();

    let transport = TlsTransport::new(root.verifying_key()).unwrap();
    let upload = DiagnosisKeyUpload {
        keys: (0..14).map(|d| DiagnosisKey::new([d as u8; 16], d)).collect(),
        declared_regions: [r("IT")].into(),
        testing_region: r("IT"),
        upload_time: Timestamp(0),
        authorization_code: "ok".into(),
    };
    let response = transport
        .send(&url, None, Request::post("/v1/keys", encode_upload(&upload)))
        .unwrap();
    assert_eq!(response.status, Status::Ok);
    let response = transport.send(&url, None, Request::get(FeedKind::A2A.chunk_path(1))).unwrap();
    assert_eq!(response.status, Status::Unauthorized);

    // A client under another root cannot even complete the handshake.
    let stranger = TlsTransport::new(key(66).verifying_key()).unwrap();
    assert!(stranger.send(&url, None, Request::get(FeedKind::Public.chunk_path(1))).is_err());
}

#[test]
fn serve_refuses_mismatched_or_incomplete_configs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_node_config(dir.path(), &key(1), &key(2));
    let c = config.to_str().unwrap();
    let out = en(&["serve", "--region", "CH", "--config", c]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not CH"));

    let text = fs::read_to_string(&config).unwrap();
    let no_tls = text.split("[tls]").next().unwrap();
    fs::write(&config, no_tls).unwrap();
    let out = en(&["serve", "--config", c]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[tls]"));
    assert_eq!(en(&["serve", "--config", "/nonexistent.toml"]).status.code(), Some(1));
}
