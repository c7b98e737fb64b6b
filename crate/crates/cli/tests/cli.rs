use std::io::Write;
use std::process::{Command, Output};

const TAPS: &str = env!("CARGO_BIN_EXE_taps");

fn taps(args: &[&str]) -> Output {
    Command::new(TAPS)
        .args(args)
        .env_remove("TAPS_POLICY_FILE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn sim_echo_client_prints_the_two_replies() {
    let o = taps(&["echo-client", "--sim"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "Got message with length 5: FIVE!\nGot message with length 5: Hello\n"
    );
}

#[test]
fn sim_echo_server_prints_the_framed_messages() {
    let o = taps(&["echo-server", "--sim"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "Got message with length 11: HEADERFIVE!\nGot message with length 16: HEADERHelloWorld\n"
    );
}

#[test]
fn hol_demo_output() {
    let o = taps(&["hol-demo", "--ordered", "false"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed=1 ordered=false");
    assert_eq!(lines[1], "retransmission_arrival t=0.216154");
    let order: Vec<&str> = lines[2..]
        .iter()
        .map(|l| &l["deliver ".len().."deliver chunk=1".len()])
        .collect();
    assert_eq!(order, ["chunk=1", "chunk=3", "chunk=4", "chunk=2"]);
    assert_eq!(lines[5], "deliver chunk=2 t=0.216154");
}

#[test]
fn fct_bench_single_mode_format() {
    let o = taps(&["fct-bench", "--mode", "clone"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "seed=1");
    assert!(lines[1].starts_with("flow=long mode=clone bytes=1500000 start=0.000000 fct="));
    assert!(lines[2].starts_with("flow=short mode=clone bytes=100000 start=1.000000 fct="));
}

#[test]
fn fct_bench_both_reports_reduction() {
    let o = taps(&["fct-bench"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 7);
    let pct: f64 = text
        .lines()
        .last()
        .unwrap()
        .strip_prefix("reduction_pct=")
        .unwrap()
        .parse()
        .unwrap();
    assert!((25.0..=75.0).contains(&pct));
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(taps(&["fct-bench", "--short-bytes", "0"]).status.code(), Some(2));
    assert_eq!(taps(&["fct-bench", "--join-after", "-1"]).status.code(), Some(2));
    assert_eq!(taps(&["fct-bench", "--queue", "0"]).status.code(), Some(2));
}

#[test]
fn bad_policy_file_exits_2() {
    let path = std::env::temp_dir().join(format!("taps-policy-bad-{}", std::process::id()));
    std::fs::File::create(&path)
        .unwrap()
        .write_all(b"frobnicate=yes\n")
        .unwrap();
    let o = Command::new(TAPS)
        .args(["echo-client", "--sim"])
        .env("TAPS_POLICY_FILE", &path)
        .output()
        .unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn policy_prohibiting_every_candidate_exits_1() {
    let path = std::env::temp_dir().join(format!("taps-policy-tcp-{}", std::process::id()));
    std::fs::write(&path, "prohibit_protocol=SIM_STREAM\n").unwrap();
    let o = Command::new(TAPS)
        .args(["echo-client", "--sim"])
        .env("TAPS_POLICY_FILE", &path)
        .output()
        .unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no candidate"));
}

#[test]
fn unreachable_server_exits_1() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let o = taps(&["echo-client", "--port", &port.to_string()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
}

#[test]
fn verbose_prints_the_trace() {
    let o = taps(&["-v", "echo-client", "--sim"]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.lines().any(|l| l.starts_with("t=") && l.ends_with("event=Ready")),
        "{err}"
    );
}
