mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use common::{answer, gold_for, select, write_synthetic};
use vtagent_core::cli::{run_with_env, EXIT_CONFIG, EXIT_OK, EXIT_UNREACHABLE};

fn run(args: &[&str]) -> i32 {
    run_with_env(std::iter::once("vtagent").chain(args.iter().copied()), &HashMap::new())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_script(path: &Path, lines: &[String]) {
    let body: String = lines
        .iter()
        .map(|l| serde_json::to_string(l).unwrap() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["eval", "--out-dir", p(&out)]), EXIT_CONFIG);
    assert_eq!(run(&["eval", "--manifest", "/no/such/manifest.jsonl"]), EXIT_CONFIG);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(run(&["eval", "--manifest", p(&bad), "--skip-frame-check"]), EXIT_CONFIG);
    let (manifest, _) = write_synthetic(dir.path(), 2, 4);
    assert_eq!(run(&["eval", "--manifest", p(&manifest), "--backend", "grpc"]), EXIT_CONFIG);
    assert_eq!(run(&["eval", "--manifest", p(&manifest), "--backend", "replay"]), EXIT_CONFIG);
    assert_eq!(run(&["eval", "--manifest", p(&manifest), "--backend", "scripted"]), EXIT_CONFIG);
    assert_eq!(run(&["eval", "--manifest", p(&manifest), "--parallelism", "0", "--backend", "scripted"]), EXIT_CONFIG);
    assert_eq!(run(&["eval", "--bogus-flag"]), EXIT_CONFIG);
    assert_eq!(run(&["grpo", "--group", "1"]), EXIT_CONFIG);
    assert!(!out.exists());
}

#[test]
fn unreachable_endpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_synthetic(dir.path(), 2, 4);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let base = format!("http://127.0.0.1:{port}/v1");
    let out = dir.path().join("out");
    let code = run(&["eval", "--manifest", p(&manifest), "--api-base", &base, "--out-dir", p(&out)]);
    assert_eq!(code, EXIT_UNREACHABLE);
    assert!(!out.join("trajectories.jsonl").exists());
}

#[test]
fn config_show_respects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.conf");
    fs::write(&file, "model = file-model\napi_base = http://file/v1\ncap = 3\n").unwrap();
    let env: HashMap<String, String> = [
        ("VTAGENT_MODEL".to_string(), "env-model".to_string()),
        ("VTAGENT_API_KEY".to_string(), "sk-secret".to_string()),
    ]
    .into();
    let args = ["vtagent", "config", "show", "--config", p(&file), "--cap", "5"];
    assert_eq!(run_with_env(args, &env), EXIT_OK);

    use vtagent_core::config::Layers;
    let mut l = Layers::defaults();
    l.apply_file(&file).unwrap();
    l.apply_env(&env);
    assert_eq!(l.get("model"), "env-model");
    assert_eq!(l.get("api_base"), "http://file/v1");
    assert!(l.dump().contains("api_key = ***"));

    fs::write(&file, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["config", "show", "--config", p(&file)]), EXIT_CONFIG);
}

#[test]
fn eval_with_script_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, samples) = write_synthetic(dir.path(), 4, 6);
    let script = dir.path().join("script.jsonl");
    let lines: Vec<String> = (0..samples.len())
        .flat_map(|i| [select(&[2, 4]), answer(&gold_for(i))])
        .collect();
    write_script(&script, &lines);
    let out = dir.path().join("eval");
    let args = [
        "eval", "--manifest", p(&manifest), "--backend", "scripted", "--script", p(&script), "--parallelism", "1",
        "--out-dir", p(&out),
    ];
    assert_eq!(run(&args), EXIT_OK);
    for f in ["trajectories.jsonl", "scores.jsonl", "summary.txt", "summary.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("100.00"), "{summary}");
    let scores_before = fs::read(out.join("scores.jsonl")).unwrap();

    // resume with an empty script: nothing left to run, same scores
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let mut resume_args = args.to_vec();
    resume_args[6] = p(&empty);
    resume_args.push("--resume");
    assert_eq!(run(&resume_args), EXIT_OK);
    assert_eq!(fs::read(out.join("scores.jsonl")).unwrap(), scores_before);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("skipped 4"));
}

#[test]
fn oracle_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_synthetic(dir.path(), 2, 3);
    // sample 0: frame 2 alone is right, video-level wrong; sample 1: nothing right
    let mut lines = Vec::new();
    for f in 0..3 {
        lines.push(answer(if f == 2 { "store 0" } else { "no" }));
    }
    lines.push(answer("no"));
    for _ in 0..4 {
        lines.push(answer("no"));
    }
    let script = dir.path().join("oracle_script.jsonl");
    write_script(&script, &lines);
    let odir = dir.path().join("oracle");
    let code = run(&[
        "oracle", "--manifest", p(&manifest), "--backend", "scripted", "--script", p(&script), "--parallelism", "1",
        "--out-dir", p(&odir),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_to_string(odir.join("set_s.ids")).unwrap().trim(), "s000");
    assert_eq!(fs::read_to_string(odir.join("set_u.ids")).unwrap().trim(), "s001");
    let pseudo = fs::read_to_string(odir.join("pseudo_keyframes.jsonl")).unwrap();
    assert!(pseudo.contains("\"keyframes\":[2]"));
    let summary = fs::read_to_string(odir.join("oracle_summary.txt")).unwrap();
    assert!(summary.contains("oracle - video") && summary.contains("+50.00"), "{summary}");

    // two systems: a baseline that misses everything and an agent that gets s000
    let mk = |name: &str, lines: Vec<String>| {
        let script = dir.path().join(format!("{name}.jsonl"));
        write_script(&script, &lines);
        let out = dir.path().join(name);
        let code = run(&[
            "eval", "--manifest", p(&manifest), "--backend", "scripted", "--script", p(&script), "--parallelism",
            "1", "--out-dir", p(&out),
        ]);
        assert_eq!(code, EXIT_OK);
        out
    };
    let base = mk("base", vec![select(&[0]), answer("no"), select(&[1]), answer("no")]);
    let agent = mk("agent", vec![select(&[2]), answer("store 0"), select(&[0]), answer("no")]);
    let rdir = dir.path().join("report");
    let base_scores = format!("base={}", p(&base.join("scores.jsonl")));
    let agent_scores = format!("agent={}", p(&agent.join("scores.jsonl")));
    let agent_traj = format!("agent={}", p(&agent.join("trajectories.jsonl")));
    let code = run(&[
        "report", "--scores", &base_scores, "--scores", &agent_scores, "--trajectories", &agent_traj,
        "--partition-dir", p(&odir), "--out-dir", p(&rdir), "--svg",
    ]);
    assert_eq!(code, EXIT_OK);
    let report = fs::read_to_string(rdir.join("report.txt")).unwrap();
    let delta = report.lines().find(|l| l.starts_with('Δ')).expect("delta row");
    assert!(delta.contains("+50.00"), "{report}");
    let agent_set_s = report
        .lines()
        .find(|l| l.starts_with("agent") && l.contains("Set_s"))
        .expect("agent Set_s row");
    assert!(agent_set_s.trim_end().ends_with("100.00"), "{agent_set_s}");
    assert!(rdir.join("report.svg").is_file() && rdir.join("subsets.svg").is_file());
    assert!(fs::read_to_string(rdir.join("report.csv")).unwrap().contains("system,subset,n,accuracy,hit_rate"));

    // a malformed score log is a config error
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, "{\"type\":\"sample\",\"sample_id\":\"a\",\"accuracy\":1,\"anls\":1.0}\n{oops\n").unwrap();
    let spec = format!("x={}", p(&broken));
    assert_eq!(run(&["report", "--scores", &spec, "--out-dir", p(&rdir)]), EXIT_CONFIG);
    assert_eq!(run(&["report", "--scores", "no-equals-sign"]), EXIT_CONFIG);
}

#[test]
fn curation_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = write_synthetic(dir.path(), 2, 4);
    let mut lines = vec![select(&[2]), answer(&gold_for(0))];
    lines.push(select(&[2]));
    lines.push(answer(&gold_for(1)));
    let script = dir.path().join("sft.jsonl");
    write_script(&script, &lines);
    let out = dir.path().join("sft");
    let code = run(&[
        "curate-sft", "--manifest", p(&manifest), "--backend", "scripted", "--script", p(&script), "--parallelism",
        "1", "--out-dir", p(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("sft_corpus.jsonl")).unwrap().lines().count(), 2);

    // RL: sample 0 right 2 of 3 times, sample 1 always right
    let mut lines = Vec::new();
    for ok in [true, false, true] {
        lines.push(select(&[2]));
        lines.push(answer(if ok { "store 0" } else { "x" }));
    }
    for _ in 0..3 {
        lines.push(select(&[2]));
        lines.push(answer("store 1"));
    }
    let script = dir.path().join("rl.jsonl");
    write_script(&script, &lines);
    let out = dir.path().join("rl");
    let code = run(&[
        "curate-rl", "--manifest", p(&manifest), "--backend", "scripted", "--script", p(&script), "--parallelism",
        "1", "--attempts", "3", "--out-dir", p(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let kept = fs::read_to_string(out.join("rl_corpus.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 1);
    assert!(kept.contains("s000"));
}

#[test]
fn grpo_command_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    assert_eq!(run(&["grpo", "--steps", "20", "--seed", "7", "--out-dir", p(&out), "--svg"]), EXIT_OK);
    let csv = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,mean_reward,tool_rate,clip_frac"));
    assert_eq!(csv.lines().count(), 21);
    assert!(fs::read_to_string(out.join("curve.svg")).unwrap().contains("<path"));
    let out2 = dir.path().join("g2");
    assert_eq!(run(&["grpo", "--steps", "20", "--seed", "7", "--out-dir", p(&out2)]), EXIT_OK);
    assert_eq!(fs::read(out2.join("curve.csv")).unwrap(), csv.as_bytes());
}
