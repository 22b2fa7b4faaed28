use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn dualconf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualconf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn synth_fit_evaluate_report_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dualconf(
        &[
            "synth",
            "--out",
            "r.jsonl",
            "--preset",
            "overconfident",
            "--n",
            "1500",
            "--seed",
            "4",
        ],
        d,
    ));
    ok(&dualconf(
        &["fit", "--records", "r.jsonl", "--out", "cal.json", "--tau", "0.1,0.5"],
        d,
    ));
    let fit = dualconf(
        &["fit", "--records", "r.jsonl", "--out", "cal2.json", "--tau", "0.1,0.5"],
        d,
    );
    ok(&fit);
    assert!(String::from_utf8_lossy(&fit.stdout).contains("delta="));
    assert_eq!(
        std::fs::read(d.join("cal.json")).unwrap(),
        std::fs::read(d.join("cal2.json")).unwrap()
    );

    ok(&dualconf(
        &[
            "evaluate",
            "--records",
            "r.jsonl",
            "--artifact",
            "cal.json",
            "--channel",
            "calibrated",
            "--split",
            "test",
            "--group-by",
            "difficulty",
            "--out",
            "eval.json",
        ],
        d,
    ));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(doc["channel"], "calibrated");
    assert_eq!(doc["split"], "test");
    let n = doc["overall"]["n"].as_u64().unwrap();
    assert!(n > 0 && n < 1500);

    ok(&dualconf(&["report", "--input", "eval.json", "--out-dir", "out"], d));
    let bins = std::fs::read_to_string(d.join("out/reliability_bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 11);
    let rc = std::fs::read_to_string(d.join("out/risk_coverage.csv")).unwrap();
    assert_eq!(rc.lines().count() as u64, n + 1);
    assert!(d.join("out/metrics.json").exists());
    let first = std::fs::read(d.join("out/metrics.json")).unwrap();
    ok(&dualconf(&["report", "--input", "eval.json", "--out-dir", "out"], d));
    assert_eq!(first, std::fs::read(d.join("out/metrics.json")).unwrap());
}

#[test]
fn evaluate_raw_channel_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&dualconf(&["synth", "--out", "r.jsonl", "--n", "200"], d));
    let out = dualconf(
        &["evaluate", "--records", "r.jsonl", "--channel", "token", "--bins", "5"],
        d,
    );
    ok(&out);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["overall"]["n"], 200);
    assert_eq!(doc["overall"]["n_bins"], 5);
}

#[test]
fn config_file_values_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("c.toml"),
        "[synth]\nn = 800\nseed = 9\ntoken_shift = 1.5\n\n[features]\ngamma = 1.0\ntau = [0.2]\n\n[alignment]\nbracket = 10.0\n",
    )
    .unwrap();
    ok(&dualconf(&["--config", "c.toml", "synth", "--out", "r.jsonl"], d));
    let lines = std::fs::read_to_string(d.join("r.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 800);
    ok(&dualconf(
        &[
            "--config",
            "c.toml",
            "fit",
            "--records",
            "r.jsonl",
            "--out",
            "a.json",
            "--gamma",
            "3",
        ],
        d,
    ));
    let art: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(art["features"]["gamma"], 3.0);
    assert_eq!(art["features"]["tau"], 0.2);
    assert_eq!(art["provenance"]["alignment"]["bracket"], 10.0);
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&dualconf(&["fit", "--records", "r.jsonl"], d)), 1);
    assert_eq!(code(&dualconf(&["--help"], d)), 0);

    std::fs::write(d.join("bad.toml"), "[features]\nepsilonn = 0.1\n").unwrap();
    assert_eq!(
        code(&dualconf(&["--config", "bad.toml", "synth", "--out", "x.jsonl"], d)),
        1
    );
    assert_eq!(code(&dualconf(&["synth", "--out", "x.jsonl", "--k", "1"], d)), 1);

    std::fs::write(d.join("broken.jsonl"), "{\"id\": \"a\", \"k\": 2}\n").unwrap();
    let out = dualconf(&["evaluate", "--records", "broken.jsonl", "--channel", "token"], d);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    assert_eq!(
        code(&dualconf(
            &["evaluate", "--records", "missing.jsonl", "--channel", "token"],
            d
        )),
        2
    );

    ok(&dualconf(&["synth", "--out", "r.jsonl", "--n", "100"], d));
    assert_eq!(
        code(&dualconf(
            &["evaluate", "--records", "r.jsonl", "--channel", "calibrated"],
            d
        )),
        1
    );
    assert_eq!(
        code(&dualconf(
            &[
                "fit",
                "--records",
                "r.jsonl",
                "--out",
                "a.json",
                "--alignment",
                "cross-fit"
            ],
            d
        )),
        1
    );
}

#[test]
fn collect_against_local_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("q.jsonl"),
        "{\"id\":\"q1\",\"question\":\"2+2?\",\"options\":[\"3\",\"4\"],\"gold_index\":1}\n",
    )
    .unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line.trim_end().is_empty() {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let reply = r#"{"choices":[{"message":{"content":"2\n{\"1\": 10, \"2\": 90}"},"logprobs":{"content":[
            {"token":"2","logprob":-0.05,"top_logprobs":[{"token":"2","logprob":-0.05},{"token":"1","logprob":-3.0}]},
            {"token":"\n{\"1\": 10, \"2\": 90}","logprob":-0.01,"top_logprobs":[]}]}}]}"#;
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
    });
    let endpoint = format!("http://{addr}/v1/chat/completions");
    ok(&dualconf(
        &[
            "collect",
            "--questions",
            "q.jsonl",
            "--out",
            "r.jsonl",
            "--endpoint",
            &endpoint,
            "--model",
            "m",
        ],
        d,
    ));
    server.join().unwrap();
    let record: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(d.join("r.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(record["id"], "q1");
    assert_eq!(record["verbal"], serde_json::json!([0.1, 0.9]));
    assert!(!d.join("r.jsonl.failures.jsonl").exists());
}

#[test]
fn collect_with_unreachable_endpoint_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("q.jsonl"),
        "{\"id\":\"q1\",\"question\":\"?\",\"options\":[\"a\",\"b\"],\"gold_index\":0}\n",
    )
    .unwrap();
    // bind then drop so the port is closed
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}/v1/chat/completions");
    std::fs::write(d.join("c.toml"), "[collect]\nretries = 0\nretry_backoff_ms = 0\n").unwrap();
    let out = dualconf(
        &[
            "--config",
            "c.toml",
            "collect",
            "--questions",
            "q.jsonl",
            "--out",
            "r.jsonl",
            "--endpoint",
            &endpoint,
            "--model",
            "m",
        ],
        d,
    );
    assert_eq!(code(&out), 4);
    let failures = std::fs::read_to_string(d.join("r.jsonl.failures.jsonl")).unwrap();
    assert!(failures.contains("\"id\":\"q1\""));
}
