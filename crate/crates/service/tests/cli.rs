mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::{fixture_root, MockEndpoint};
use rtgrasp_core::templates::TemplateBank;

fn rtgrasp(args: &[&str]) -> Output {
    rtgrasp_env(args, &[])
}

fn rtgrasp_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rtgrasp"));
    cmd.args(args)
        .env_remove("RTG_ENDPOINT_URL")
        .env_remove("RTG_API_KEY")
        .env_remove("RTG_MODEL_NAME")
        .env_remove("RTG_IMAGE_ROOT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn root() -> String {
    fixture_root().to_str().unwrap().to_string()
}

fn build(out: &Path, seed: &str) -> Output {
    rtgrasp(&[
        "build-dataset",
        "--root",
        &root(),
        "--out",
        out.to_str().unwrap(),
        "--per-image",
        "2",
        "--seed",
        seed,
    ])
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = rtgrasp(&["split", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(rtgrasp(&[]).status.code(), Some(1));
    assert_eq!(rtgrasp(&["--help"]).status.code(), Some(0));
}

#[test]
fn split_prints_assignment() {
    let args = ["split", "--root", &root(), "--mode", "object-wise", "--k", "5", "--seed", "7"];
    let out = rtgrasp(&args);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["k"], 5);
    assert_eq!(v["mode"], "object-wise");
    assert_eq!(v["assignment"].as_object().unwrap().len(), 6);
    // pcd0100 and pcd0101 show the same object
    assert_eq!(v["assignment"]["pcd0100"], v["assignment"]["pcd0101"]);
    assert_eq!(rtgrasp(&args).stdout, out.stdout);
}

#[test]
fn split_needs_a_root() {
    let out = rtgrasp(&["split"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RTG_IMAGE_ROOT"));
    let env_root = rtgrasp_env(&["split", "--k", "2"], &[("RTG_IMAGE_ROOT", &root())]);
    assert_eq!(env_root.status.code(), Some(0));
}

#[test]
fn build_is_reproducible_and_mock_eval_obeys_the_oracle_law() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = build(&a, "5");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["records"], 12);
    assert_eq!(build(&b, "5").status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("dataset.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    build(&b, "6");
    assert_ne!(read(&a), read(&b));

    let dataset = a.join("dataset.jsonl");
    let report_dir = dir.path().join("reports");
    let out = rtgrasp(&[
        "mock-eval",
        "--mode",
        "oracle",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["image-wise"]["mean"], 1.0);
    assert_eq!(summary["image-wise"]["std"], 0.0);
    assert!(report_dir.join("image-wise-fold4.json").exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("100.00±0.00"));

    let out = rtgrasp(&["mock-eval", "--mode", "gibberish", "--dataset", dataset.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["image-wise"]["mean"], 0.0);
}

#[test]
fn build_refuses_unreviewed_templates() {
    let dir = tempfile::tempdir().unwrap();
    let mut bank = TemplateBank::seed();
    bank.reasoning.get_mut("mug").unwrap()[0].reviewed = false;
    let bank_path = dir.path().join("bank.json");
    std::fs::write(&bank_path, bank.to_json()).unwrap();
    let args = |extra: Option<&str>| {
        let mut v = vec![
            "build-dataset".to_string(),
            "--root".into(),
            root(),
            "--out".into(),
            dir.path().join("out").to_str().unwrap().into(),
            "--per-image".into(),
            "1".into(),
            "--templates".into(),
            bank_path.to_str().unwrap().into(),
        ];
        v.extend(extra.map(String::from));
        v
    };
    let strict: Vec<String> = args(None);
    let out = rtgrasp(&strict.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mug"));
    let lenient = args(Some("--allow-unreviewed"));
    assert_eq!(rtgrasp(&lenient.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(0));

    let lint = rtgrasp(&["templates", "lint", "--bank", bank_path.to_str().unwrap()]);
    assert_eq!(lint.status.code(), Some(1));
    let clean = dir.path().join("clean.json");
    std::fs::write(&clean, TemplateBank::seed().to_json()).unwrap();
    assert_eq!(rtgrasp(&["templates", "lint", "--bank", clean.to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn eval_without_endpoint_names_the_variable() {
    let out = rtgrasp(&["eval", "--dataset", "whatever.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RTG_ENDPOINT_URL"));
}

#[test]
fn eval_against_an_http_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(build(dir.path(), "1").status.code(), Some(0));
    let dataset = dir.path().join("dataset.jsonl");
    let ep = MockEndpoint::fixed("I cannot see a graspable object.");
    let env = [
        ("RTG_ENDPOINT_URL", ep.base_url.as_str()),
        ("RTG_MODEL_NAME", "remote-model"),
        ("RTG_API_KEY", "sk-never-print-me"),
    ];
    let out = rtgrasp_env(&["eval", "--dataset", dataset.to_str().unwrap(), "--parallelism", "2"], &env);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["image-wise"]["mean"], 0.0);
    assert_eq!(v["image-wise"]["fingerprint"]["model_id"], "remote-model");
    assert_eq!(ep.hits(), 12);
    let all_output = [out.stdout, out.stderr].concat();
    assert!(!String::from_utf8_lossy(&all_output).contains("sk-never-print-me"));

    let dead = [("RTG_ENDPOINT_URL", common::dead_url()), ("RTG_MODEL_NAME", "m".to_string())];
    let dead: Vec<(&str, &str)> = dead.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let mut cmd_args = vec!["eval", "--dataset", dataset.to_str().unwrap()];
    cmd_args.extend(["--k", "2"]);
    let out = rtgrasp_env(&cmd_args, &dead);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn templates_generate_marks_drafts_unreviewed() {
    let ep = MockEndpoint::spawn(|n, _| {
        let text = if n % 2 == 0 {
            "- A cup is a hollow cylinder. A cup is a hollow cylinder.\n- Grip the rim."
        } else {
            "- A cup is a hollow cylinder; pinch the wall.\n- Grip the rim from above."
        };
        (200, common::reply(text))
    });
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("drafts.json");
    let checklist = dir.path().join("checklist.json");
    let env = [("RTG_ENDPOINT_URL", ep.base_url.as_str()), ("RTG_MODEL_NAME", "writer")];
    let out = rtgrasp_env(
        &[
            "templates",
            "generate",
            "--category",
            "cup",
            "--out",
            out_path.to_str().unwrap(),
            "--checklist",
            checklist.to_str().unwrap(),
        ],
        &env,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bank = TemplateBank::from_json(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let cup = &bank.reasoning["cup"];
    assert_eq!(cup.len(), 2);
    assert!(cup.iter().all(|t| !t.reviewed));
    assert_eq!(cup[0].text, "A cup is a hollow cylinder; pinch the wall.");
    assert_eq!(ep.hits(), 2);
    let items: Value = serde_json::from_str(&std::fs::read_to_string(checklist).unwrap()).unwrap();
    assert_eq!(items.as_array().unwrap().len(), 2);
}

#[test]
fn export_train_config() {
    let out = rtgrasp(&["export-train-config", "--strategy", "lora"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!((v["batch_size"].as_u64(), v["learning_rate"].as_f64()), (Some(32), Some(5e-4)));
    assert_eq!((v["lora_rank"].as_u64(), v["lora_alpha"].as_u64()), (Some(64), Some(32)));
    assert_eq!(v["base_model"], "LLaVA-7B-v0");
    let out = rtgrasp(&["export-train-config", "--strategy", "pretraining"]);
    let v = stdout_json(&out);
    assert_eq!(v["learning_rate"].as_f64(), Some(2e-3));
    assert!(v.get("lora_rank").is_none());
    assert_eq!(rtgrasp(&["export-train-config", "--strategy", "full"]).status.code(), Some(1));
}
