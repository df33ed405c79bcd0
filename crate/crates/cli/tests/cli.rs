use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dglight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dglight"))
        .args(args)
        .env_remove("DGLIGHT_LLM_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dglight(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn baseline_writes_a_finite_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["baseline", "--controller", "maxpressure", "--grid", "3x4", "--seed", "1", "--episode", "900", "--out", p(dir.path())]);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("controller,dataset,seed,att,aql,awt"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], ["maxpressure", "grid3x4", "1"]);
    for v in &row[3..] {
        assert!(v.parse::<f64>().unwrap().is_finite());
    }
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn eval_is_deterministic_and_reproducible_from_its_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let args = ["eval", "--controller", "mock-policy", "--grid", "2x2", "--seed", "4", "--episode", "600"];
    let run = |out: &Path| {
        let mut v = args.to_vec();
        v.extend(["--out", p(out)]);
        ok(&v);
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    let cfg = a.path().join("config.json");
    ok(&["eval", "--config", p(&cfg), "--out", p(c.path())]);
    assert_eq!(first, fs::read_to_string(c.path().join("metrics.csv")).unwrap());
}

#[test]
fn full_pipeline_on_one_intersection() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net");
    ok(&["gen-net", "--grid", "1x1", "--seed", "3", "--out", p(&net)]);
    let common = ["--network", &format!("{}/network.json", p(&net)), "--flow", &format!("{}/flow.json", p(&net))];

    let critic_dir = dir.path().join("critic");
    let mut args = vec!["train-critic", "--rounds", "2", "--out", p(&critic_dir)];
    args.extend(common.iter().copied());
    ok(&args);
    let loss = fs::read_to_string(critic_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    let critic = critic_dir.join("critic.json");

    let rollout_dir = dir.path().join("rollout");
    let mut args = vec!["rollout", "--episode", "3600", "--interval", "30", "--k", "4", "--critic", p(&critic), "--out", p(&rollout_dir)];
    args.extend(common.iter().copied());
    ok(&args);
    let records = rollout_dir.join("records.jsonl");
    let lines = fs::read_to_string(&records).unwrap();
    assert_eq!(lines.lines().skip(1).count(), 120);

    let grpo_dir = dir.path().join("grpo");
    ok(&["grpo-train", "--records", p(&records), "--epochs", "1", "--out", p(&grpo_dir)]);
    assert!(grpo_dir.join("policy.json").exists());
    assert_eq!(fs::read_to_string(grpo_dir.join("dataset.jsonl")).unwrap().lines().count(), 121);
    assert!(fs::read_to_string(grpo_dir.join("diagnostics.csv")).unwrap().starts_with("epoch,step,mean_reward"));

    let eval_dir = dir.path().join("eval");
    let policy = grpo_dir.join("policy.json");
    let mut args = vec!["eval", "--controller", "mock-policy", "--policy", p(&policy), "--out", p(&eval_dir)];
    args.extend(common.iter().copied());
    let out = ok(&args);
    assert!(out.starts_with("mock-policy,network,"));

    let mut args = vec!["eval", "--controller", "critic-greedy", "--critic", p(&critic), "--out", p(&eval_dir)];
    args.extend(common.iter().copied());
    ok(&args);
}

#[test]
fn joint_scoring_rollout_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["jsgrpo-rollout", "--grid", "1x2", "--episode", "300", "--horizon", "3", "--cheap", "--out", p(dir.path())]);
    let text = fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    assert_eq!(text.lines().skip(1).count(), 20);
    assert!(text.lines().nth(1).unwrap().contains("\"joint_scoring\""));
}

#[test]
fn cityflow_import_produces_native_files() {
    let dir = tempfile::tempdir().unwrap();
    let roadnet = dir.path().join("roadnet.json");
    let flow = dir.path().join("flow.json");
    let mut intersections = vec![serde_json_like("c", 0, 0, false)];
    let mut roads = Vec::new();
    for (side, x, y) in [("n", 0, 300), ("e", 300, 0), ("s", 0, -300), ("w", -300, 0)] {
        intersections.push(serde_json_like(side, x, y, true));
        roads.push(format!(r#"{{"id":"{side}_in","startIntersection":"{side}","endIntersection":"c"}}"#));
        roads.push(format!(r#"{{"id":"{side}_out","startIntersection":"c","endIntersection":"{side}"}}"#));
    }
    fs::write(&roadnet, format!(r#"{{"intersections":[{}],"roads":[{}]}}"#, intersections.join(","), roads.join(","))).unwrap();
    fs::write(&flow, r#"[{"route":["w_in","e_out"],"interval":10,"startTime":0,"endTime":300}]"#).unwrap();
    let out = dir.path().join("native");
    ok(&["import-cityflow", "--network", p(&roadnet), "--flow", p(&flow), "--out", p(&out)]);
    ok(&[
        "baseline", "--controller", "fixedtime", "--network", p(&out.join("network.json")), "--flow",
        p(&out.join("flow.json")), "--episode", "600", "--out", p(&out),
    ]);
}

fn serde_json_like(id: &str, x: i32, y: i32, virt: bool) -> String {
    format!(r#"{{"id":"{id}","point":{{"x":{x},"y":{y}}},"virtual":{virt}}}"#)
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &["baseline", "--bogus-flag"],
        &["baseline", "--grid", "3by4"],
        &["baseline", "--network", "/no/such/file.json", "--flow", "/no/such/flow.json"],
        &["rollout", "--grid", "1x1"],
        &["eval", "--controller", "llm", "--grid", "1x1"],
    ];
    for args in cases {
        let mut v = args.to_vec();
        v.extend(["--out", p(dir.path())]);
        let out = dglight(&v);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let bad = dir.path().join("records.jsonl");
    fs::write(&bad, "{\"schema\":\"other\",\"version\":1}\n").unwrap();
    let out = dglight(&["grpo-train", "--records", p(&bad), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
