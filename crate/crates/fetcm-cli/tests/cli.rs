//! End-to-end tests of the `fetcm` binary: real process spawns, real files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fetcm_core::clicklog::{write_canonical, DocumentImpression, QueryRecord, Session};

fn fetcm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fetcm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary spawns")
}

fn run_ok(args: &[&str], dir: &Path) -> String {
    let out = fetcm(args, dir);
    assert!(
        out.status.success(),
        "{:?} failed with {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn tiny_corpus() -> Vec<Session> {
    let doc = |url_id, pos, click| DocumentImpression { url_id, pos, click };
    vec![
        Session {
            session_id: 1,
            queries: vec![QueryRecord {
                query_id: 7,
                docs: vec![doc(30, 1, 1), doc(31, 2, 0), doc(32, 3, 0)],
            }],
        },
        Session {
            session_id: 2,
            queries: vec![
                QueryRecord {
                    query_id: 8,
                    docs: vec![doc(31, 1, 0), doc(33, 2, 1)],
                },
                QueryRecord {
                    query_id: 7,
                    docs: vec![doc(30, 1, 1), doc(34, 2, 0)],
                },
            ],
        },
    ]
}

#[test]
fn ingest_canonical_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let mut buf = Vec::new();
    write_canonical(&tiny_corpus(), &mut buf).unwrap();
    fs::write(&input, &buf).unwrap();

    let stdout = run_ok(&["ingest", "--input", "in.jsonl", "--out", "out.jsonl"], dir.path());
    assert_eq!(stdout.trim(), "sessions=2 queries=3 docs=7 warnings=0");
    assert_eq!(fs::read(dir.path().join("out.jsonl")).unwrap(), buf);
}

#[test]
fn ingest_tab_separated_challenge_log() {
    let dir = tempfile::tempdir().unwrap();
    let urls: Vec<String> = (0..10).map(|i| format!("{},{}", 100 + i, 7)).collect();
    let log = format!(
        "42\tM\t3\t900\n42\t0\tQ\t0\t5\t11,12\t{}\n42\t10\tC\t0\t102\n",
        urls.join("\t")
    );
    fs::write(dir.path().join("day.tsv"), log).unwrap();

    let stdout = run_ok(
        &["ingest", "--input", "day.tsv", "--format", "yandex", "--out", "out.jsonl"],
        dir.path(),
    );
    assert_eq!(stdout.trim(), "sessions=1 queries=1 docs=10 warnings=0");
    let body = fs::read_to_string(dir.path().join("out.jsonl")).unwrap();
    assert!(body.contains("\"url_id\":102,\"pos\":3,\"click\":1"), "{}", body);
}

#[test]
fn missing_input_file_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = fetcm(&["ingest", "--input", "absent.jsonl", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn unknown_config_key_aborts_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "embeding_size = 8\n").unwrap();
    // train would also fail for missing data; the config typo must win
    let out = fetcm(&["train", "--config", "run.cfg", "--out", "m.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embeding_size"), "{}", err);
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn set_flag_overrides_file_and_seed_flag_overrides_both() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "n_sessions = 3\nseed = 1\n").unwrap();
    let args = |out: &'static str, seed: Option<&'static str>| {
        let mut v = vec![
            "synth", "--config", "run.cfg", "--set", "n_sessions=5", "--set", "docs_per_query=3",
            "--set", "gamma=1.0,0.6,0.3", "--set", "n_query_ids=4", "--set", "n_url_ids=12",
            "--set", "pool_size=6", "--out", out,
        ];
        if let Some(s) = seed {
            v.extend(["--seed", s]);
        }
        v
    };
    let stdout = run_ok(&args("a.jsonl", None), dir.path());
    assert!(stdout.starts_with("sessions=5 "), "{}", stdout);
    run_ok(&args("b.jsonl", None), dir.path());
    run_ok(&args("c.jsonl", Some("2")), dir.path());

    let (a, b, c) = (
        fs::read(dir.path().join("a.jsonl")).unwrap(),
        fs::read(dir.path().join("b.jsonl")).unwrap(),
        fs::read(dir.path().join("c.jsonl")).unwrap(),
    );
    assert_eq!(a, b, "same seed must give identical output");
    assert_ne!(a, c, "the --seed flag must override the file seed");
}

#[test]
fn synth_zero_sessions_writes_an_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(
        &["synth", "--sessions", "0", "--out", "empty.jsonl"],
        dir.path(),
    );
    assert_eq!(stdout.trim(), "sessions=0 queries=0 docs=0");
    assert_eq!(fs::read(dir.path().join("empty.jsonl")).unwrap(), b"");
    // the sidecar still records the sampled ground truth
    let truth = fs::read_to_string(dir.path().join("empty.jsonl.truth.csv")).unwrap();
    assert!(truth.starts_with("q,u,alpha\n"));
    assert!(truth.contains("rank,gamma"));
}

/// One synthetic corpus through the whole workflow: train twice (identical
/// logs), then evaluate with the reference predictor and the generator truth.
#[test]
fn train_and_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let synth_args = [
        "synth", "--sessions", "90", "--seed", "11", "--out", "data.jsonl",
        "--set", "docs_per_query=4", "--set", "gamma=1.0,0.7,0.45,0.25",
        "--set", "n_query_ids=12", "--set", "n_url_ids=40", "--set", "pool_size=6",
    ];
    run_ok(&synth_args, dir.path());

    let small_model: &[&str] = &[
        "--set", "embedding_size=8", "--set", "hidden_size=8", "--set", "heads=2",
        "--set", "p_max=4", "--set", "max_session_docs=4", "--set", "max_epochs=3",
        "--set", "batch_size=16",
    ];
    let train_args = |ckpt: &'static str, log: &'static str| {
        let mut v = vec![
            "train", "--data", "data.jsonl", "--seed", "11", "--out", ckpt, "--log-out", log,
        ];
        v.extend_from_slice(small_model);
        v
    };
    let stdout = run_ok(&train_args("m1.ckpt", "log1.csv"), dir.path());
    assert!(stdout.starts_with("valid_ll="), "{}", stdout);
    assert!(stdout.contains(" valid_ppl="), "{}", stdout);
    run_ok(&train_args("m2.ckpt", "log2.csv"), dir.path());

    let log1 = fs::read(dir.path().join("log1.csv")).unwrap();
    let log2 = fs::read(dir.path().join("log2.csv")).unwrap();
    assert_eq!(log1, log2, "same seed must give an identical epoch log");
    assert!(
        String::from_utf8_lossy(&log1).starts_with("epoch,train_loss,valid_ll,valid_ppl,clip_events\n")
    );

    let stdout = run_ok(
        &[
            "eval", "--checkpoint", "m1.ckpt", "--data", "data.jsonl", "--seed", "11",
            "--baseline", "--truth", "data.jsonl.truth.csv", "--out", "report.csv",
        ],
        dir.path(),
    );
    let line = stdout.trim();
    for piece in ["ppl=", " ll=", " baseline_ppl=", " oracle_ppl="] {
        assert!(line.contains(piece), "missing {} in `{}`", piece, line);
    }
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("rank,ppl\n"), "{}", report);
    assert!(report.contains("overall_ppl,"), "{}", report);
    assert!(report.contains("oracle_ppl,"), "{}", report);
}

#[test]
fn gradcheck_passes_and_prints_one_row_per_check() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.cfg"), "# nothing overridden\n").unwrap();
    let stdout = run_ok(&["gradcheck", "--config", "empty.cfg"], dir.path());
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "name,max_rel_err,pass");
    assert!(lines.len() > 40, "only {} rows", lines.len());
    for line in &lines[1..] {
        assert!(line.ends_with(",true"), "failing row: {}", line);
    }
    assert!(lines.iter().any(|l| l.starts_with("full_model,")));
    assert!(lines.iter().any(|l| l.starts_with("filter_block,")));
}

#[test]
fn eval_without_a_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fetcm(&["eval", "--test", "x.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint_path"));
}
