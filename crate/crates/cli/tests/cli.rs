use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_invtransfer"));
    c.env_remove("INVTRANSFER_OUTPUT_ROOT").env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(
    dir: &Path,
    name: &str,
    variant: &str,
    source: Option<&str>,
    output_dir: Option<&str>,
) -> std::path::PathBuf {
    let mut cfg = serde_json::json!({
        "format": "invtransfer.experiment",
        "version": 1,
        "target": { "mdtlz": { "family": "DTLZ2", "inverted": false, "delta1": 1.0, "delta2": 0.0, "d": 6, "m": 3 } },
        "optimizer": { "variant": variant, "n_init": 20, "budget": 24, "n_offspring": 1000, "seed": 1 },
        "n_seeds": 1,
        "reference_size": 500
    });
    if let Some(s) = source {
        cfg["source_dataset"] = s.into();
        cfg["overlap"] = serde_json::json!([[0, 0], [1, 1], [2, 2], [3, 3]]);
    }
    if let Some(o) = output_dir {
        cfg["output_dir"] = o.into();
    }
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn gen_source(out: &Path, seed: u64) -> Output {
    bin()
        .args([
            "gen-source",
            "--level",
            "HS",
            "--d",
            "4",
            "--m",
            "3",
            "--pop-size",
            "40",
        ])
        .args([
            "--generations",
            "30",
            "--keep",
            "20",
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn gen_source_is_deterministic_and_keeps_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.json"), tmp.path().join("sub/b.json"));
    ok(gen_source(&a, 7));
    ok(gen_source(&b, 7));
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 20);
}

#[test]
fn gen_source_reads_a_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.json");
    std::fs::write(
        &cfg,
        r#"{"spec": {"family": "DTLZ2", "inverted": false, "delta1": 0.7, "delta2": 0.25, "d": 5, "m": 2},
            "pop_size": 20, "generations": 10, "keep": 10, "seed": 3}"#,
    )
    .unwrap();
    let out = tmp.path().join("ms.json");
    ok(bin()
        .args(["gen-source", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["d"], 5);
    assert_eq!(v["rows"].as_array().unwrap().len(), 10);
}

#[test]
fn run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(gen_source(&dir.join("source.json"), 1));
    let transfer = write_config(dir, "transfer.json", "InvTrEMO", Some("source.json"), Some("out"));
    let stdout = ok(bin()
        .arg("run")
        .arg("--config")
        .arg(&transfer)
        .args(["--seeds", "2"])
        .output()
        .unwrap());
    assert!(stdout.contains("igd"));
    for s in [1, 2] {
        let run = dir.join(format!("out/InvTrEMO/seed-{s}"));
        for f in ["archive.csv", "trace.jsonl", "models.json", "meta.json"] {
            assert!(run.join(f).is_file(), "{f}");
        }
        assert_eq!(
            std::fs::read_to_string(run.join("archive.csv"))
                .unwrap()
                .lines()
                .count(),
            25
        );
    }
    let report = std::fs::read_to_string(dir.join("out/report.csv")).unwrap();
    assert!(report.lines().any(|l| l.contains(",igd,24,median,")));

    // Variant and budget overrides, output next to the transfer runs.
    ok(bin()
        .arg("run")
        .arg("--config")
        .arg(&transfer)
        .args(["--variant", "ZeroT", "--budget", "22", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap());
    let zt = std::fs::read_to_string(dir.join("out/ZeroT/seed-1/archive.csv")).unwrap();
    assert_eq!(zt.lines().count(), 23);

    // Runs on another problem cannot share a report.
    let other = dir.join("other.json");
    let text = std::fs::read_to_string(&transfer)
        .unwrap()
        .replace("\"d\": 6", "\"d\": 7");
    std::fs::write(&other, text).unwrap();
    ok(bin()
        .arg("run")
        .arg("--config")
        .arg(&other)
        .args(["--variant", "ZeroT", "--out"])
        .arg(dir.join("other"))
        .output()
        .unwrap());
    let rep = dir.join("rep");
    let err = bin()
        .arg("report")
        .arg(dir.join("out"))
        .arg(dir.join("other"))
        .arg("--out")
        .arg(&rep)
        .output()
        .unwrap();
    assert!(!err.status.success());
    assert!(String::from_utf8_lossy(&err.stderr).contains("incompatible"));
    assert!(!rep.exists());

    ok(bin()
        .arg("report")
        .arg(dir.join("out"))
        .arg("--out")
        .arg(&rep)
        .output()
        .unwrap());
    let summary = std::fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert!(summary.starts_with("problem,metric,evaluations,statistic,InvTrEMO,ZeroT"));
    let trace = std::fs::read_to_string(rep.join("trace.csv")).unwrap();
    assert!(trace.lines().next().unwrap().contains("ucb,max_ucb_probe"));
    assert_eq!(trace.lines().count(), 1 + 2 * 4 + 2);
    assert!(rep.join("summary.json").is_file());
}

#[test]
fn transfer_without_source_fails_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "InvTrEMO", Some("missing.json"), Some("out"));
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "ZeroT", None, None);
    let root = tmp.path().join("envroot");
    ok(bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .env("INVTRANSFER_OUTPUT_ROOT", &root)
        .output()
        .unwrap());
    assert!(root.join("ZeroT/seed-1/meta.json").is_file());
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg(tmp.path()).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_config_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "ZeroT", None, Some("out"));
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["version"] = 9.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 9"));
}

#[test]
fn serve_answers_over_http() {
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::time::{Duration, Instant};

    let tmp = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--port", &port.to_string(), "--root"])
        .arg(tmp.path())
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut stream = loop {
        match TcpStream::connect(("127.0.0.1", port)) {
            Ok(s) => break s,
            Err(_) if start.elapsed() < Duration::from_secs(20) => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                child.kill().unwrap();
                panic!("server did not start: {e}");
            }
        }
    };
    stream
        .write_all(b"GET /runs HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with("[]"), "{resp}");
}
