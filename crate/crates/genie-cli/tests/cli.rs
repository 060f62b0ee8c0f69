//! End-to-end tests of the `genie` binary: the full artifact pipeline, exit
//! codes, error envelopes, and per-command manifests.

use std::path::Path;
use std::process::Command;

use genie::explore::BeamConfig;
use genie::reward_data::read_dataset;
use genie::rounds::RoundConfig;
use genie::trajectory::{load_trajectories, TaskInstruction};
use genie::world::SyntheticWorld;

fn genie_cmd(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_genie"));
    cmd.current_dir(dir);
    cmd.env_remove("GENIE_BACKEND_URL");
    cmd
}

fn run_ok(cmd: &mut Command) {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "expected success, got {:?}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
}

/// Run a command expected to fail; check the exit code and the error
/// envelope's kind, and return the message.
fn run_err(cmd: &mut Command, code: i32, kind: &str) -> String {
    let output = cmd.output().expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stderr = String::from_utf8(output.stderr).expect("stderr is utf-8");
    let line = stderr.lines().last().expect("an error envelope");
    let envelope: serde_json::Value = serde_json::from_str(line).expect("envelope is JSON");
    assert_eq!(envelope["error"]["kind"], kind, "envelope: {envelope}");
    envelope["error"]["message"].as_str().expect("a message").to_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).expect("file exists");
    serde_json::from_str(&text).expect("file is JSON")
}

/// Seed a world and a single-task file; returns the task id.
fn seed_world_and_tasks(root: &Path, depth: u32, seed: u64) -> String {
    run_ok(genie_cmd(root).args([
        "gen-world",
        "--depth",
        &depth.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        "w.json",
    ]));
    let world = SyntheticWorld::load(&root.join("w.json")).expect("world loads");
    let task = TaskInstruction::for_world(&world, "t00");
    let line = serde_json::to_string(&task).expect("tasks serialize");
    std::fs::write(root.join("tasks.jsonl"), format!("{line}\n")).expect("tasks write");
    task.task_id
}

#[test]
fn pipeline_runs_end_to_end_with_the_oracle_backend() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    seed_world_and_tasks(root, 3, 7);

    // Explore: the exact oracle solves the world.
    run_ok(genie_cmd(root).args([
        "explore",
        "--tasks",
        "tasks.jsonl",
        "--world",
        "w.json",
        "--backend",
        "oracle",
        "--k",
        "10",
        "--beam",
        "5",
        "--out-dir",
        "explore",
    ]));
    let report = read_json(&root.join("explore/exploration_report.json"));
    assert_eq!(report["success_rate"], 1.0);
    assert_eq!(report["tasks"]["t00"]["success"], true);
    let successes = load_trajectories(&root.join("explore/successes.jsonl")).expect("successes");
    assert!(!successes.is_empty());
    assert!(root.join("explore/run_manifest.json").exists());

    // Label the successes exhaustively: no backend needed.
    run_ok(genie_cmd(root).args([
        "label",
        "--trajectories",
        "explore/successes.jsonl",
        "--world",
        "w.json",
        "--exhaustive",
        "--out-dir",
        "labels",
    ]));
    let label_report = read_json(&root.join("labels/label_report.json"));
    assert_eq!(label_report["trajectories"], successes.len() as u64);
    let labeled = read_dataset(&root.join("labels/rm_dataset")).expect("dataset reads");
    assert!(labeled.iter().all(|s| s.label == genie::reward_data::SampleLabel::YPlus));

    // Reward data from the reference successes.
    run_ok(genie_cmd(root).args([
        "gen-reward-data",
        "--trajectories",
        "explore/successes.jsonl",
        "--worlds",
        "w.json",
        "--backend",
        "oracle",
        "--out-dir",
        "rd",
    ]));
    let rd_report = read_json(&root.join("rd/reward_data_report.json"));
    assert!(rd_report["rule_samples"].as_u64().expect("count") > 0);
    assert!(rd_report["corruption_samples"].as_u64().expect("count") > 0);
    let dataset = read_dataset(&root.join("rd")).expect("dataset reads");
    assert!(!dataset.is_empty());
    assert!(root.join("rd/ground_truth.v1.jsonl").exists());

    // Build a benchmark and score it: the exact oracle is perfect.
    run_ok(genie_cmd(root).args([
        "eval-rm",
        "--trajectories",
        "explore/successes.jsonl",
        "--worlds",
        "w.json",
        "--backend",
        "oracle",
        "--step-pairs",
        "2",
        "--outcome-pairs",
        "1",
        "--modes",
        "truncation",
        "--out-dir",
        "eval",
    ]));
    let f1 = read_json(&root.join("eval/f1_report.json"));
    assert_eq!(f1["step"]["overall"]["f1"], 1.0);
    assert_eq!(f1["outcome"]["overall"]["f1"], 1.0);

    // Best-of-N over the saved benchmark.
    run_ok(genie_cmd(root).args([
        "bestofn",
        "--benchmark",
        "eval/rm_benchmark.v1.jsonl",
        "--worlds",
        "w.json",
        "--backend",
        "oracle",
        "--n",
        "1,5",
        "--out-dir",
        "scaling",
    ]));
    let scaling = read_json(&root.join("scaling/scaling_report.json"));
    let points = scaling["points"].as_array().expect("points");
    assert_eq!(points.len(), 2);
    assert_eq!(points[1]["overall"]["step_sr"], 1.0);

    // Export: merging the two datasets keeps every distinct sample.
    run_ok(genie_cmd(root).args([
        "export",
        "--datasets",
        "rd,labels/rm_dataset",
        "--out-dir",
        "merged",
    ]));
    let merged = read_dataset(&root.join("merged")).expect("merged reads");
    let mut expected: std::collections::BTreeSet<String> =
        dataset.iter().map(|s| s.sample_id.clone()).collect();
    expected.extend(labeled.iter().map(|s| s.sample_id.clone()));
    assert_eq!(merged.len(), expected.len());
}

#[test]
fn noisy_exploration_failures_support_sampled_labeling() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    seed_world_and_tasks(root, 3, 11);

    // A fully demoted greedy policy never reaches the goal.
    run_ok(genie_cmd(root).args([
        "explore",
        "--tasks",
        "tasks.jsonl",
        "--world",
        "w.json",
        "--backend",
        "oracle",
        "--eps-pol",
        "1.0",
        "--k",
        "1",
        "--beam",
        "1",
        "--out-dir",
        "explore",
    ]));
    let report = read_json(&root.join("explore/exploration_report.json"));
    assert_eq!(report["success_rate"], 0.0);
    let failures = load_trajectories(&root.join("explore/failures.jsonl")).expect("failures");
    assert!(!failures.is_empty());

    run_ok(genie_cmd(root).args([
        "label",
        "--trajectories",
        "explore/failures.jsonl",
        "--world",
        "w.json",
        "--backend",
        "oracle",
        "--rollouts",
        "3",
        "--jobs",
        "2",
        "--out-dir",
        "labels",
    ]));
    let label_report = read_json(&root.join("labels/label_report.json"));
    assert_eq!(label_report["trajectories"], failures.len() as u64);
    assert!(label_report["steps_labeled"].as_u64().expect("count") > 0);
}

#[test]
fn selfimprove_runs_a_round_and_hands_off_to_an_exec_trainer() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    seed_world_and_tasks(root, 3, 13);
    let world = SyntheticWorld::load(&root.join("w.json")).expect("world loads");

    // Two seed tasks bound to the same world file.
    let mut bindings = String::new();
    for task_id in ["t00", "t01"] {
        let binding = serde_json::json!({
            "task": TaskInstruction::for_world(&world, task_id),
            "world": "w.json",
        });
        bindings.push_str(&binding.to_string());
        bindings.push('\n');
    }
    std::fs::write(root.join("bindings.jsonl"), bindings).expect("bindings write");

    let trainer_script = root.join("trainer.sh");
    std::fs::write(
        &trainer_script,
        "#!/bin/sh\ncat >/dev/null\nprintf '{\"policy_endpoint\":\"tuned:1\",\"scorer_endpoint\":null}'\n",
    )
    .expect("script writes");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&trainer_script, std::fs::Permissions::from_mode(0o755))
            .expect("chmod");
    }

    let round = RoundConfig::new(0, BeamConfig::for_world(&world, 17).greedy(), "round0");
    let config = serde_json::json!({
        "schema_version": "selfimprove.v1",
        "round": round,
        "bindings": "bindings.jsonl",
        "backend": {"kind": "oracle"},
        "trainer": {"kind": "exec", "program": "./trainer.sh"},
    });
    std::fs::write(root.join("round.json"), config.to_string()).expect("config writes");

    run_ok(genie_cmd(root).args(["selfimprove", "--config", "round.json"]));
    let report = read_json(&root.join("round0/round_report.v1.json"));
    assert_eq!(report["round_index"], 0);
    assert_eq!(report["tasks_attempted"], 2);
    assert_eq!(report["success_rate"], 1.0);
    let outcome = read_json(&root.join("round0/trainer_outcome.json"));
    assert_eq!(outcome["policy_endpoint"], "tuned:1");
    assert!(root.join("round0/run_manifest.json").exists());
}

#[test]
fn config_errors_exit_one_and_leave_no_artifacts() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();

    run_err(genie_cmd(root).args(["gen-world", "--depth", "0", "-o", "w.json"]), 1, "config");
    assert!(!root.join("w.json").exists());

    // Unknown flags are config errors, not clap's default exit 2.
    run_err(genie_cmd(root).args(["gen-world", "--deep", "3", "-o", "w.json"]), 1, "config");

    // Unknown config keys are rejected before anything is written.
    std::fs::write(root.join("round.json"), r#"{"schema_version":"selfimprove.v1","surprise":1}"#)
        .expect("config writes");
    let message =
        run_err(genie_cmd(root).args(["selfimprove", "--config", "round.json"]), 1, "config");
    assert!(message.contains("surprise"), "message: {message}");

    // http backend without a URL.
    run_err(
        genie_cmd(root).args([
            "bestofn",
            "--benchmark",
            "missing.jsonl",
            "--backend",
            "http",
            "--out-dir",
            "out",
        ]),
        1,
        "config",
    );
    assert!(!root.join("out").exists());
}

#[test]
fn data_and_backend_errors_use_their_exit_codes() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    seed_world_and_tasks(root, 2, 3);

    // Missing input file: data error.
    run_err(
        genie_cmd(root).args([
            "explore",
            "--tasks",
            "missing.jsonl",
            "--world",
            "w.json",
            "--backend",
            "oracle",
            "--out-dir",
            "out",
        ]),
        3,
        "data",
    );

    // Corrupt world file: data error.
    std::fs::write(root.join("broken.json"), "{").expect("file writes");
    run_err(
        genie_cmd(root).args([
            "explore",
            "--tasks",
            "tasks.jsonl",
            "--world",
            "broken.json",
            "--backend",
            "oracle",
            "--out-dir",
            "out",
        ]),
        3,
        "data",
    );

    // Unreachable http backend: backend error.
    run_err(
        genie_cmd(root).args([
            "explore",
            "--tasks",
            "tasks.jsonl",
            "--world",
            "w.json",
            "--backend",
            "http",
            "--backend-url",
            "http://127.0.0.1:9/",
            "--out-dir",
            "out",
        ]),
        2,
        "backend",
    );
}

#[test]
fn backend_url_env_overrides_the_flag() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    seed_world_and_tasks(root, 2, 5);

    // Point the flag at a server that does not exist and the env at another;
    // the failure must mention the env's port, proving the override.
    let mut cmd = genie_cmd(root);
    cmd.args([
        "explore",
        "--tasks",
        "tasks.jsonl",
        "--world",
        "w.json",
        "--backend",
        "http",
        "--backend-url",
        "http://127.0.0.1:9/",
        "--out-dir",
        "out",
    ]);
    cmd.env("GENIE_BACKEND_URL", "http://127.0.0.1:19/");
    let message = run_err(&mut cmd, 2, "backend");
    assert!(message.contains(":19"), "message: {message}");
}
