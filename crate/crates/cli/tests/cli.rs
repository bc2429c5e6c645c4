use std::path::Path;
use std::process::{Command, Output};

use krt_cli::compare::{compare, render};
use krt_cli::experiment::{read_results, RunResult};

const SMALL: &[&str] = &[
    "--set",
    "data.generate={\"n_classes\":6,\"h\":4,\"w\":4,\"c\":4,\"avg_labels\":2.0,\"n_train\":80,\"n_test\":40}",
    "--set",
    "protocol.model={\"conv_channels\":4,\"conv_depth\":1,\"ica\":{\"d\":8,\"l\":8,\"heads\":2}}",
    "--set",
    "protocol.batch_size=16",
    "--base",
    "2",
    "--inc",
    "2",
    "--epochs",
    "1",
];

fn krt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krt")).args(args).output().unwrap()
}

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    krt(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn error_line(o: &Output) -> String {
    let err = String::from_utf8_lossy(&o.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    err
}

fn without_clock(text: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_secs");
    v.to_string()
}

#[test]
fn run_writes_round_tripping_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("krt");
    ok(&run_small(&out, &["--seed", "3"]));
    let text = std::fs::read_to_string(out.join("results.json")).unwrap();
    let r: RunResult = read_results(&out.join("results.json")).unwrap();
    let again: RunResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, r);
    assert_eq!(serde_json::to_string_pretty(&r).unwrap(), text);
    assert_eq!(r.sessions.len(), 3);
    assert!(r.sessions[1..].iter().all(|s| s.dpl.is_some()));

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), r.sessions.len() + 1);
    assert_eq!(summary.lines().next(), Some("session,map,cf1,of1"));
    let curves = std::fs::read_to_string(out.join("curves.tsv")).unwrap();
    assert_eq!(curves.lines().count(), r.sessions.len() + 1);
    assert!(curves.lines().last().unwrap().starts_with("3\t6\t"));
    assert!(out.join("model.krt").exists());
}

#[test]
fn same_config_same_results_except_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (p, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        ok(&run_small(
            p,
            &[
                "--seed",
                seed,
                "--arm",
                "krt_r",
                "--buffer-total",
                "6",
                "--precision",
                "f64",
            ],
        ));
    }
    let read = |p: &Path| std::fs::read_to_string(p.join("results.json")).unwrap();
    let strip_out = |s: String| s.replace(a.to_str().unwrap(), "").replace(b.to_str().unwrap(), "");
    assert_eq!(strip_out(without_clock(&read(&a))), strip_out(without_clock(&read(&b))));
    assert_ne!(without_clock(&read(&a)), without_clock(&read(&c)));
    assert_eq!(
        std::fs::read(a.join("model.krt")).unwrap(),
        std::fs::read(b.join("model.krt")).unwrap()
    );
}

#[test]
fn upper_bound_has_one_session() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ub");
    ok(&run_small(&out, &["--arm", "upper_bound"]));
    let r = read_results(&out.join("results.json")).unwrap();
    assert_eq!(r.sessions.len(), 1);
    assert_eq!(
        std::fs::read_to_string(out.join("summary.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn generated_data_dir_matches_inline_generation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = krt(&[
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "4",
        "--set",
        "data.generate={\"n_classes\":6,\"h\":4,\"w\":4,\"c\":4,\"avg_labels\":2.0,\"n_train\":80,\"n_test\":40}",
    ]);
    ok(&gen);
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    ok(&run_small(&x, &["--seed", "4", "--arm", "ft"]));
    ok(&run_small(
        &y,
        &["--seed", "4", "--arm", "ft", "--data-dir", data.to_str().unwrap()],
    ));
    let rx = read_results(&x.join("results.json")).unwrap();
    let ry = read_results(&y.join("results.json")).unwrap();
    assert_eq!(rx.dataset, ry.dataset);
    assert_eq!(rx.sessions, ry.sessions);
}

#[test]
fn compare_against_itself_and_another_arm() {
    let dir = tempfile::tempdir().unwrap();
    let (ft, kd) = (dir.path().join("ft"), dir.path().join("kd"));
    ok(&run_small(&ft, &["--arm", "ft"]));
    ok(&run_small(&kd, &["--arm", "kd_baseline"]));
    let a = read_results(&ft.join("results.json")).unwrap();
    let b = read_results(&kd.join("results.json")).unwrap();

    let rows = compare(&[a.clone(), a.clone()]).unwrap();
    assert!(rows.iter().all(|r| r.delta_last == 0.0 && r.delta_avg == 0.0));
    let rows = compare(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(rows[1].delta_last, b.aggregate.last_map - a.aggregate.last_map);
    assert_eq!(rows[1].session_maps.len(), 3);
    assert!(render(&rows).contains("kd_baseline"));

    let o = krt(&[
        "compare",
        ft.to_str().unwrap(),
        kd.join("results.json").to_str().unwrap(),
    ]);
    ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    // A different dataset is refused.
    let other = dir.path().join("other");
    ok(&run_small(&other, &["--arm", "ft", "--set", "data.seed=99"]));
    let o = krt(&["compare", ft.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).starts_with("E_DATA: "));
}

#[test]
fn compare_reproduces_a_table_row_layout() {
    // Per-session mAPs of the buffered KRT row in the B40 table.
    use krt_core::metrics::{aggregate, MetricsRecord};
    let maps = [82.37, 79.54, 78.27, 75.95, 75.18];
    let recs: Vec<MetricsRecord> = maps
        .iter()
        .enumerate()
        .map(|(i, &m)| MetricsRecord {
            session: i + 1,
            map: m,
            cf1: 0.0,
            of1: 0.0,
            per_class_ap: Vec::new(),
        })
        .collect();
    let agg = aggregate(&recs).unwrap();
    assert!((agg.avg_map - 78.26).abs() <= 0.01);
    assert_eq!(agg.last_map, 75.18);
}

#[test]
fn errors_exit_with_code_and_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let o = krt(&["run", "--out", out, "--arm", "ft", "--buffer-per-class", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("E_CONFIG: "));

    let o = krt(&["run", "--out", out, "--set", "protocol.loss.lamda=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("protocol.loss"));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, "{\"protocol\": {\"epochs\": -1}}").unwrap();
    let o = krt(&["run", "--out", out, "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("protocol.epochs"));

    let o = krt(&["run", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("E_CONFIG: "));

    let o = krt(&[
        "run",
        "--out",
        out,
        "--data-dir",
        dir.path().join("missing").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).starts_with("E_DATA: "));

    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    std::fs::write(bad.join("train.mlds"), b"not a dataset").unwrap();
    std::fs::write(bad.join("test.mlds"), b"not a dataset").unwrap();
    let o = krt(&["run", "--out", out, "--data-dir", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    // The output path is a file, so the directory cannot be created.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"").unwrap();
    let o = run_small(&blocker.join("sub"), &["--arm", "upper_bound"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(error_line(&o).starts_with("E_RUNTIME: "));
}

mod dpl {
    use super::*;

    fn files(dir: &Path, scores: &str, labels: &str) -> (String, String, String) {
        let s = dir.join("scores.csv");
        let l = dir.join("labels.jsonl");
        std::fs::write(&s, scores).unwrap();
        std::fs::write(&l, labels).unwrap();
        let o = dir.join("merged.jsonl");
        (
            s.to_str().unwrap().into(),
            l.to_str().unwrap().into(),
            o.to_str().unwrap().into(),
        )
    }

    fn report(o: &Output) -> serde_json::Value {
        ok(o);
        let text = String::from_utf8_lossy(&o.stdout);
        assert_eq!(text.trim().lines().count(), 1);
        serde_json::from_str(text.trim()).unwrap()
    }

    #[test]
    fn empty_score_file_is_an_error_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let (s, l, o) = files(dir.path(), "", "{\"image_id\": 1, \"labels\": [3]}\n");
        let out = krt(&["dpl", "--scores", &s, "--labels", &l, "--out", &o]);
        assert_eq!(out.status.code(), Some(3));
        assert!(error_line(&out).starts_with("E_DATA: "));
        assert!(!Path::new(&o).exists());
    }

    #[test]
    fn bad_rows_name_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let (s, l, o) = files(dir.path(), "0,1\n0.1,0.2\n0.3,x\n", "");
        let out = krt(&["dpl", "--scores", &s, "--labels", &l, "--out", &o]);
        assert_eq!(out.status.code(), Some(3));
        assert!(error_line(&out).contains("line 3"));
        assert!(!Path::new(&o).exists());
    }

    #[test]
    fn all_zero_scores_saturate_at_the_lower_bound() {
        let dir = tempfile::tempdir().unwrap();
        let scores = "0,1\n0,0\n0,0\n0,0\n";
        let labels = (0..3)
            .map(|i| format!("{{\"image_id\": {i}, \"labels\": [2]}}\n"))
            .collect::<String>();
        let (s, l, o) = files(dir.path(), scores, &labels);
        let r = report(&krt(&[
            "dpl", "--scores", &s, "--labels", &l, "--out", &o, "--mu", "2.9",
        ]));
        assert_eq!(r["converged"], false);
        assert!((r["final_eta"].as_f64().unwrap() - 0.01).abs() < 1e-9);
        assert_eq!(r["beta"], 0.0);
        let merged = std::fs::read_to_string(&o).unwrap();
        assert_eq!(merged.lines().count(), 3);
        for line in merged.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["labels"], serde_json::json!([2]));
            assert_eq!(v["pseudo"], serde_json::json!([]));
        }
    }

    #[test]
    fn forty_old_of_eighty_targets_one_point_four_five() {
        let dir = tempfile::tempdir().unwrap();
        let header = (0..40).map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let row = (0..40)
            .map(|c| if c < 2 { "0.9" } else { "0.05" })
            .collect::<Vec<_>>()
            .join(",");
        let scores = format!("image_id,{header}\na,{row}\nb,{row}\n");
        let labels = "{\"image_id\": \"b\", \"labels\": [40, 41]}\n{\"image_id\": \"a\", \"labels\": [79]}\n";
        let (s, l, o) = files(dir.path(), &scores, labels);
        let args = [
            "dpl",
            "--scores",
            &s,
            "--labels",
            &l,
            "--out",
            &o,
            "--mu",
            "2.9",
            "--total-classes",
            "80",
        ];
        let r = report(&krt(&args));
        assert_eq!(r["mu_t"], 1.45);
        let merged: Vec<serde_json::Value> = std::fs::read_to_string(&o)
            .unwrap()
            .lines()
            .map(|x| serde_json::from_str(x).unwrap())
            .collect();
        assert_eq!(merged[0]["image_id"], "a");
        assert_eq!(merged[0]["labels"], serde_json::json!([79]));
        assert_eq!(merged[1]["labels"], serde_json::json!([40, 41]));
        // Two confident old classes per image: β = 2 is the closest reachable.
        assert_eq!(merged[0]["pseudo"], serde_json::json!([0, 1]));
    }
}

#[test]
fn printed_config_is_a_valid_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = krt(&["run", "--print-config", "--arm", "krt_r", "--lambda", "3"]);
    ok(&o);
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = krt(&["run", "--print-config", "--config", path.to_str().unwrap()]);
    ok(&again);
    assert_eq!(o.stdout, again.stdout);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["protocol"]["arm"], "krt_r");
    assert_eq!(v["protocol"]["loss"]["lambda"], 3.0);
}
