use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn xpi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpi")).args(args).output().expect("spawn xpi")
}

fn ok(args: &[&str]) -> Output {
    let out = xpi(args);
    assert!(out.status.success(), "xpi {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dealer_serve_infer_over_tcp_matches_plain() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("toy.xmw");
    let corr = dir.path().join("corr");
    ok(&["gen-weights", "--model", "toy", "--seed", "3", "--out", s(&weights)]);
    ok(&["dealer", "--weights", s(&weights), "--mode", "insecure-exact", "--batch", "2", "--seed", "4", "--out", s(&corr)]);

    let addr = format!("127.0.0.1:{}", free_port());
    let server_json = dir.path().join("server.json");
    let server = Command::new(env!("CARGO_BIN_EXE_xpi"))
        .args(["serve", "--weights", s(&weights), "--mode", "insecure-exact", "--corr"])
        .arg(corr.join("server.xpc"))
        .args(["--addr", &addr, "--out", s(&server_json)])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let client_json = dir.path().join("client.json");
    let csv = dir.path().join("steps.csv");
    let client = xpi(&[
        "infer", "--weights", s(&weights), "--mode", "insecure-exact",
        "--corr", s(&corr.join("client.xpc")), "--addr", &addr, "--seed", "5",
        "--out", s(&client_json), "--transcript-csv", s(&csv),
    ]);
    let server = server.wait_with_output().unwrap();
    assert!(client.status.success(), "{}", String::from_utf8_lossy(&client.stderr));
    assert!(server.status.success(), "{}", String::from_utf8_lossy(&server.stderr));

    let plain_json = dir.path().join("plain.json");
    ok(&["plain", "--weights", s(&weights), "--batch", "2", "--seed", "5", "--out", s(&plain_json)]);
    let report = read_json(&client_json);
    let plain = read_json(&plain_json);
    assert_eq!(report["logits"], plain["fixed"]);
    assert_eq!(report["argmax"].as_array().unwrap().len(), 2);

    let ct = &report["transcript"];
    let st = read_json(&server_json);
    assert_eq!(ct["transport"], "tcp");
    assert_eq!(ct["trunc_mode"], "exact");
    assert_eq!(ct["totals"]["rounds"], st["totals"]["rounds"]);
    assert_eq!(ct["totals"]["bytes_sent"], st["totals"]["bytes_received"]);
    assert_eq!(ct["sent_digest"], st["received_digest"]);
    let steps = std::fs::read_to_string(&csv).unwrap();
    assert!(steps.starts_with("index,layer,kind,phase,"));
}

#[test]
fn missing_correlations_exit_with_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let out = xpi(&["serve", "--corr", s(&dir.path().join("absent.xpc"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    let out = xpi(&["infer", "--corr", s(&dir.path().join("absent.xpc"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_arguments_exit_nonzero() {
    assert_eq!(xpi(&["infer", "--selftest", "--mode", "bogus"]).status.code(), Some(2));
    assert_eq!(xpi(&["infer", "--selftest", "--model", "nope"]).status.code(), Some(2));
    assert_eq!(xpi(&["infer", "--selftest", "--frac-bits", "40"]).status.code(), Some(8));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.xmw");
    std::fs::write(&junk, b"not a weight file").unwrap();
    assert_eq!(xpi(&["plain", "--weights", s(&junk)]).status.code(), Some(4));
}

#[test]
fn selftest_modes() {
    for (mode, tolerance, rounds) in [("insecure-exact", 0.0, 21), ("local", 5e-2, 4), ("dealer-pair", 5e-2, 21)] {
        let out = ok(&["infer", "--selftest", "--mode", mode, "--seed", "1", "--inject-rtt-ms", "0"]);
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        let dev = v["max_abs_deviation"].as_f64().unwrap();
        assert!(dev <= tolerance, "{mode}: {dev}");
        assert_eq!(v["transcript"]["totals"]["rounds"], rounds, "{mode}");
    }
}

#[test]
fn bench_square_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sq.csv");
    ok(&["bench-square", "--sizes", "1,64,4096", "--repeats", "3", "--out", s(&path)]);
    let mut r = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["n", "repeats", "mean_us_per_element", "stddev_us_per_element", "bytes_per_party", "rounds"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let n: u64 = row[0].parse().unwrap();
        assert_eq!(row[4].parse::<u64>().unwrap(), 8 * n);
        assert_eq!(&row[5], "1");
        assert!(row[2].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn breakdown_reports() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("report");
    let run = |stem: &Path| {
        ok(&["breakdown", "--model", "toy", "--batches", "1,32,512", "--seed", "2", "--inject-rtt-ms", "0", "--out", s(stem)]);
    };
    run(&stem);
    let mut r = csv::Reader::from_path(stem.with_extension("csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["model", "transport", "batch", "mode", "linear_seconds", "nonlinear_seconds", "total_seconds", "bytes", "rounds", "argmax_agreement"]
    );
    assert_eq!(r.records().count(), 3);

    let rows = read_json(&stem.with_extension("json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["batch"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 32, 512]);
    for row in rows {
        let (l, n, t) = (row["linear_seconds"].as_f64().unwrap(), row["nonlinear_seconds"].as_f64().unwrap(), row["total_seconds"].as_f64().unwrap());
        assert!((l + n - t).abs() <= 0.02 * t, "{row}");
        assert_eq!(row["rounds"], 4);
        assert!(row["argmax_agreement"].as_f64().unwrap() >= 0.95);
    }

    let again = dir.path().join("again");
    run(&again);
    let strip = |v: Value| -> Vec<Value> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for k in ["linear_seconds", "nonlinear_seconds", "total_seconds"] {
                    r.as_object_mut().unwrap().remove(k);
                }
                r
            })
            .collect()
    };
    assert_eq!(strip(read_json(&again.with_extension("json"))), strip(Value::Array(rows.clone())));
}
