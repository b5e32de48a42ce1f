//! The three command-line tools, run as separate processes.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use offload_host::files::write_tensor;
use offload_host::toy;

/// A worker process that is killed when dropped.
struct WorkerProcess {
    child: Child,
    addr: String,
}

impl WorkerProcess {
    fn spawn(args: &[&str]) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_worker"))
            .args(["--listen", "127.0.0.1:0"])
            .args(args)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .expect("address line")
            .to_string();
        WorkerProcess { child, addr }
    }
}

impl Drop for WorkerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn run(bin: &str, state: &Path, args: &[&str]) -> Output {
    Command::new(bin).arg("--state").arg(state).args(args).output().unwrap()
}

fn client(state: &Path, args: &[&str]) -> Output {
    run(env!("CARGO_BIN_EXE_client"), state, args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout: {}\nstderr: {}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn model_path() -> String {
    toy::assets_dir().join("toy_mlp.vsml").display().to_string()
}

#[test]
fn setup_infer_verify_and_list_records() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("client");
    let worker = WorkerProcess::spawn(&["--store", dir.path().join("store").to_str().unwrap()]);
    let input = toy::corpus_dir().join("sample-005.vst");
    let input = input.to_str().unwrap();

    assert_ok(&client(
        &state,
        &["setup", "--model", &model_path(), "--workers", &worker.addr],
    ));
    let out = client(
        &state,
        &[
            "infer",
            "--mode",
            "holistic",
            "--input",
            input,
            "--verify-ratio",
            "0.25",
        ],
    );
    assert_ok(&out);
    assert!(stdout(&out).starts_with("inference 1\n"), "{}", stdout(&out));
    let out = client(
        &state,
        &["infer", "--mode", "layered", "--input", input, "--verify-ratio", "0.5"],
    );
    assert_ok(&out);
    assert!(stdout(&out).starts_with("inference 2\n"));

    let out = client(
        &state,
        &["verify", "--inference", "1", "--fraction", "0.5", "--seed", "3"],
    );
    assert_ok(&out);
    assert!(stdout(&out).contains("passed"));
    assert_ok(&client(&state, &["verify", "--inference", "2", "--fraction", "1"]));

    let out = client(&state, &["records"]);
    assert_ok(&out);
    let listing = stdout(&out);
    assert!(
        listing.contains("holistic") && listing.contains("passed@0.5"),
        "{listing}"
    );
    assert!(listing.contains("layered") && listing.contains("passed@1"), "{listing}");
}

#[test]
fn a_cheating_worker_fails_verification_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("client");
    let worker = WorkerProcess::spawn(&["--behavior", "cheat", "--cheat-beta", "1.0", "--cheat-layer", "2"]);
    let input = toy::corpus_dir().join("sample-000.vst");
    assert_ok(&client(
        &state,
        &["setup", "--model", &model_path(), "--workers", &worker.addr],
    ));
    assert_ok(&client(
        &state,
        &[
            "infer",
            "--mode",
            "holistic",
            "--input",
            input.to_str().unwrap(),
            "--verify-ratio",
            "0.1",
        ],
    ));
    let out = client(&state, &["verify", "--inference", "1", "--fraction", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
    assert!(
        stdout(&out).contains("FAILED, recomputation mismatch"),
        "{}",
        stdout(&out)
    );
    assert!(stdout(&client(&state, &["records"])).contains("failed:"));
}

#[test]
fn masked_two_worker_setup_runs_layered_only() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("client");
    let (a, b) = (WorkerProcess::spawn(&[]), WorkerProcess::spawn(&[]));
    let workers = format!("{},{}", a.addr, b.addr);
    let corpus = toy::corpus_dir();
    assert_ok(&client(
        &state,
        &[
            "setup",
            "--model",
            &model_path(),
            "--workers",
            &workers,
            "--privacy-k",
            "100",
            "--confidentiality-k",
            "100",
            "--masks",
            "2",
            "--calibration",
            corpus.to_str().unwrap(),
        ],
    ));
    let x = toy::corpus(toy::CORPUS_SEED).remove(7);
    let plain = toy::toy_mlp().forward(&x).unwrap().0;
    let input = dir.path().join("x.vst");
    write_tensor(&input, &x).unwrap();
    let input = input.to_str().unwrap();
    let layered = ["infer", "--mode", "layered", "--input", input, "--verify-ratio", "1"];
    let out = client(&state, &layered);
    assert_ok(&out);
    assert!(stdout(&out).contains(&format!("argmax {}", plain.argmax())));
    assert_ok(&client(&state, &layered));
    let out = client(&state, &layered);
    assert!(!out.status.success(), "third inference must run out of the two masks");

    let out = client(&state, &["infer", "--mode", "holistic", "--input", input]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("layered"));
}

#[test]
fn client_reports_missing_setup_and_bad_workers() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("client");
    let input = toy::corpus_dir().join("sample-000.vst");
    let out = client(
        &state,
        &["infer", "--mode", "holistic", "--input", input.to_str().unwrap()],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("client setup"));
    let out = client(&state, &["setup", "--model", &model_path(), "--workers", "127.0.0.1:1"]);
    assert!(!out.status.success());
}

fn analyze(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_analyze")).args(args).output().unwrap();
    assert_ok(&out);
    stdout(&out)
}

#[test]
fn analyze_subcommands_print_tables_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let game = analyze(&["masking-game", "--k", "1,100", "--trials", "2000"]);
    assert!(game.lines().next().unwrap().starts_with("k"), "{game}");
    assert_eq!(game.lines().count(), 4);

    let attack = analyze(&["attack", "--k", "0.01", "--trials", "2000", "--range", "-1,1"]);
    assert!(attack.contains("0.01"), "{attack}");

    let csv = dir.path().join("det.csv");
    let det = analyze(&[
        "--csv",
        csv.to_str().unwrap(),
        "detection",
        "--n",
        "100",
        "--alpha",
        "0.01",
        "--beta",
        "0.01",
        "--rounds",
        "1,459",
        "--simulate",
        "--trials",
        "1000",
    ]);
    assert!(det.contains("0.990000"), "{det}");
    let csv = std::fs::read_to_string(csv).unwrap();
    assert!(
        csv.starts_with("n,alpha,beta,rounds,a,b,closed_form,simulated,flagged\n"),
        "{csv}"
    );
    assert_eq!(csv.lines().count(), 3);

    let sweep = analyze(&[
        "sweep-k",
        "--model",
        &model_path(),
        "--corpus",
        toy::corpus_dir().to_str().unwrap(),
        "--options",
        "p",
        "--k",
        "1,1000",
    ]);
    assert_eq!(sweep.matches("1.0000").count(), 2, "{sweep}");
}

#[test]
fn worker_rejects_bad_flags() {
    for args in [&["--behavior", "cheat", "--cheat-beta", "2"][..], &["--capacity", "0"]] {
        let out = Command::new(env!("CARGO_BIN_EXE_worker"))
            .args(["--listen", "127.0.0.1:0"])
            .args(args)
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?}");
    }
}
