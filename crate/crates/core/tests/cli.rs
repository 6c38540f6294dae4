use std::process::Command;

fn exseq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_exseq"))
        .args(args)
        .output()
        .expect("spawn exseq")
}

fn body_rows(stdout: &[u8]) -> Vec<Vec<String>> {
    let text = String::from_utf8(stdout.to_vec()).unwrap();
    let csv_part: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    csv::Reader::from_reader(csv_part.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn gap_cell_matches_closed_form() {
    let out = exseq(&[
        "gap",
        "--set",
        "grid.sigma=[1.0, 0.0]",
        "--set",
        "grid.t=[0]",
        "--set",
        "grid.future=[2]",
        "--set",
        "n_samples=20000",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert!(text.starts_with("# exseq "));
    assert!(text.contains("# schema: gap/v1"));
    let rows = body_rows(&out.stdout);
    assert_eq!(rows.len(), 2);
    let cf: f64 = rows[0][4].parse().unwrap();
    assert!((cf - 0.1438410).abs() < 1e-7, "{cf}");
    let mc: f64 = rows[0][5].parse().unwrap();
    let se: f64 = rows[0][6].parse().unwrap();
    assert!((mc - cf).abs() < 4.0 * se);
    assert_eq!(rows[1][4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn malformed_config_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "n_samples = \"many\"\n").unwrap();
    let out = exseq(&["gap", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_samples"));

    let out = exseq(&["uq", "--set", "target_len=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_len"));
}

#[test]
fn budget_refusal_exits_3() {
    let out = exseq(&["arch", "--budget", "1000"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
}

#[test]
fn uq_is_byte_identical_across_runs() {
    let args = [
        "uq",
        "--seed",
        "7",
        "--set",
        "n_reps=20",
        "--set",
        "context_lens=[0, 4]",
        "--set",
        "target_len=8",
    ];
    let a = exseq(&args);
    let b = exseq(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(body_rows(&a.stdout).len(), 4);
}

#[test]
fn propcheck_counterexample_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = exseq(&["propcheck", "--out", path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["schema"], "propcheck/v1");
    assert_eq!(doc["report"]["perm_invariance"]["passed"], true);
    assert_eq!(doc["report"]["cid"]["passed"], false);
}

#[test]
fn bandit_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows.csv");
    let summary = dir.path().join("summary.csv");
    let out = exseq(&[
        "bandit",
        "--out",
        rows.to_str().unwrap(),
        "--set",
        &format!("summary_out={:?}", summary.to_str().unwrap()),
        "--set",
        "horizon=5",
        "--set",
        "n_reps=3",
        "--set",
        "j=4",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = std::fs::read_to_string(&rows).unwrap();
    assert!(r.contains("# schema: result_rows/v1"));
    let s = std::fs::read_to_string(&summary).unwrap();
    assert!(s.contains("experiment_id,step,mean,se"));
}

#[test]
fn train_writes_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = exseq(&[
        "train",
        "--set",
        &format!("checkpoint={:?}", ckpt.to_str().unwrap()),
        "--set",
        "model.d_model=8",
        "--set",
        "model.d_ff=16",
        "--set",
        "model.n_heads=2",
        "--set",
        "model.n_layers=1",
        "--set",
        "model.embed_hidden=[8]",
        "--set",
        "train.epochs=1",
        "--set",
        "train.n_train=16",
        "--set",
        "train.n_val=8",
        "--set",
        "train.data.horizon=6",
        "--set",
        "eval_context_lens=[0, 3]",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(body_rows(&out.stdout).len(), 3);
    let w = exseq::tinyformer::checkpoint::load(&ckpt).unwrap();
    assert_eq!(w.config().d_model, 8);

    let uq = exseq(&[
        "uq",
        "--set",
        &format!("checkpoint={:?}", ckpt.to_str().unwrap()),
        "--set",
        "n_reps=4",
        "--set",
        "context_lens=[2]",
        "--set",
        "target_len=3",
    ]);
    assert!(
        uq.status.success(),
        "{}",
        String::from_utf8_lossy(&uq.stderr)
    );
}

#[test]
fn printed_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        "gap",
        "uq",
        "bandit",
        "active",
        "propcheck",
        "arch",
        "train",
    ] {
        let printed = exseq(&[cmd, "--print-config", "--seed", "11"]);
        assert!(printed.status.success(), "{cmd}");
        let path = dir.path().join(format!("{cmd}.toml"));
        std::fs::write(&path, &printed.stdout).unwrap();
        let again = exseq(&[cmd, "--print-config", "--config", path.to_str().unwrap()]);
        assert_eq!(printed.stdout, again.stdout, "{cmd}");
    }
}

#[test]
fn arch_smoke_run() {
    let out = exseq(&[
        "arch",
        "--set",
        "model.d_model=8",
        "--set",
        "model.d_ff=16",
        "--set",
        "model.n_heads=2",
        "--set",
        "model.n_layers=1",
        "--set",
        "model.embed_hidden=[8]",
        "--set",
        "train.epochs=1",
        "--set",
        "train.n_train=16",
        "--set",
        "train.n_val=8",
        "--set",
        "train.data.horizon=6",
        "--set",
        "context_lens=[0, 3, 8]",
        "--set",
        "n_eval=4",
        "--set",
        "target_len=2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = body_rows(&out.stdout);
    // 2 masks × 3 context lengths × 2 metrics
    assert_eq!(rows.len(), 12);
    assert!(rows
        .iter()
        .all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}
