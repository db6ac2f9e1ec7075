use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn skillopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillopt")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_skill(dir: &Path, body: &str) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("SKILL.md"), format!("---\nname: probe\ndescription: Probe skill.\n---\n## Body\n{body}\n")).unwrap();
}

#[test]
fn validate_exit_codes() {
    let seed = fixtures().join("orqa-seed");
    let ok = skillopt(&["validate", "--skill", p(&seed)]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    assert!(text(&ok).starts_with("valid"));

    let tmp = tempfile::tempdir().unwrap();
    let missing = skillopt(&["validate", "--skill", p(tmp.path())]);
    assert_eq!(code(&missing), 2);
    assert!(text(&missing).contains("MissingSkillMd"));

    // 3745 body words plus 9 header words: ceil(4 * 3754 / 3) = 5006 > 5000.
    let big = tmp.path().join("big");
    write_skill(&big, &vec!["word"; 3745].join(" "));
    let over = skillopt(&["validate", "--skill", p(&big)]);
    assert_eq!(code(&over), 1, "{}", text(&over));
    assert!(text(&over).contains("BudgetExceeded"));

    // 2600 + 9 words: 3479 tokens, under the warning threshold.
    let small = tmp.path().join("small");
    write_skill(&small, &vec!["word"; 2600].join(" "));
    let quiet = skillopt(&["validate", "--skill", p(&small)]);
    assert_eq!(code(&quiet), 0);
    assert!(!text(&quiet).contains("BudgetWarning"));
}

#[test]
fn optimize_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = fixtures().join("config-b.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = skillopt(&["optimize", "--config", p(&config), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    for f in ["skill/SKILL.md", "tree.json", "tree.dot", "rounds.jsonl", "advisor.jsonl", "report.toml"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let report = fs::read_to_string(a.join("report.toml")).unwrap();
    assert!(report.contains("seed_reward = ") && report.contains("best_reward = "));

    let reused = skillopt(&["optimize", "--config", p(&config), "--out", p(&a)]);
    assert_eq!(code(&reused), 2);
    assert!(text(&reused).contains("single-use"));
    let forced = skillopt(&["optimize", "--config", p(&config), "--out", p(&a), "--overwrite", "--seed", "5"]);
    assert_eq!(code(&forced), 0, "{}", text(&forced));
}

#[test]
fn rejecting_advisor_returns_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let playbook = tmp.path().join("reject.json");
    fs::write(
        &playbook,
        r#"{"profile": {"task_summary": "t"}, "rounds": [{"mode": "verbatim", "proposals": ["RemoveSection(heading=Nowhere)"]}]}"#,
    )
    .unwrap();
    let manifest = tmp.path().join("k1.toml");
    fs::write(
        &manifest,
        format!(
            "skill = {:?}\nadvisor = \"scripted:reject.json\"\nevaluator = \"synthetic:{}\"\n\n[search]\nmax_rounds = 1\nselection_policy = \"ucb1\"\nmin_rounds_before_convergence = 1\nstale_rounds_to_stop = 1\nimprovement_threshold = 0.001\n",
            p(&fixtures().join("orqa-seed")),
            p(&fixtures().join("landscape.json")),
        ),
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = skillopt(&["optimize", "--config", p(&manifest), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let report = fs::read_to_string(out.join("report.toml")).unwrap();
    assert!(report.contains("accepted_rounds = 0"), "{report}");
    assert!(report.contains("rejected_rounds = 1"));
    let digest = |key: &str| {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap()
            .to_string()
    };
    assert_eq!(digest("seed_digest"), digest("best_digest"));
    let seed_md = fs::read_to_string(out.join("skill/SKILL.md")).unwrap();
    assert!(seed_md.contains("references/question-types.md"));
    assert!(out.join("skill/references/question-types.md").is_file());
    let rounds = fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert!(rounds.contains("\"outcome\":\"rejected\""));
}

#[test]
fn invalid_seed_fails_run() {
    let tmp = tempfile::tempdir().unwrap();
    let seed = tmp.path().join("seed");
    write_skill(&seed, &vec!["word"; 3800].join(" "));
    let o = skillopt(&[
        "optimize",
        "--config",
        p(&fixtures().join("config-a.toml")),
        "--skill",
        p(&seed),
        "--out",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("seed skill is invalid"));
}

#[test]
fn sweep_selects_on_confirm() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = skillopt(&[
        "sweep",
        "--config",
        p(&fixtures().join("config-a.toml")),
        "--config",
        p(&fixtures().join("config-b.toml")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let report = fs::read_to_string(out.join("sweep_report.toml")).unwrap();
    assert!(report.contains("winner = \"B\""), "{report}");
    assert!(report.contains("confirm_score"));
    assert!(report.contains("[test]"));
    assert!(out.join("winner/SKILL.md").is_file());
    assert!(out.join("runs/01-A/tree.dot").is_file());
}

#[test]
fn export_tree_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = skillopt(&["optimize", "--config", p(&fixtures().join("config-a.toml")), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let dot = skillopt(&["export-tree", p(&run), "--format", "dot"]);
    assert_eq!(code(&dot), 0);
    let dot = String::from_utf8(dot.stdout).unwrap();
    assert!(dot.starts_with("digraph search_tree {"));
    assert_eq!(dot.matches("fillcolor=lightblue").count(), 1);

    let file = tmp.path().join("tree.json");
    let structured = skillopt(&["export-tree", p(&run), "--format", "structured", "--out", p(&file)]);
    assert_eq!(code(&structured), 0);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(doc["schema"], "skillopt.search-tree");
    assert_eq!(doc["version"], 1);
    assert_eq!(doc["best_path"][0], 0);

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let missing = skillopt(&["export-tree", p(&empty)]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn evaluate_with_exact_match_runner() {
    let tmp = tempfile::tempdir().unwrap();
    let runner = tmp.path().join("agent.sh");
    fs::write(&runner, "#!/bin/sh\ncat > /dev/null\necho 'Final answer: B'\n").unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&runner, fs::Permissions::from_mode(0o755)).unwrap();
    }
    let mut lines = String::new();
    for i in 0..8 {
        let answer = if i < 6 { "B" } else { "A" };
        lines.push_str(&format!(
            "{{\"id\":\"q{i}\",\"context\":\"c\",\"question\":\"Which constraint applies?\",\"options\":[{{\"label\":\"A\",\"text\":\"x\"}},{{\"label\":\"B\",\"text\":\"y\"}}],\"answer\":\"{answer}\"}}\n"
        ));
    }
    let data = tmp.path().join("data.jsonl");
    fs::write(&data, lines).unwrap();
    let out = tmp.path().join("eval.json");
    let o = skillopt(&[
        "evaluate",
        "--skill",
        p(&fixtures().join("orqa-seed")),
        "--evaluator",
        &format!("exact-match:{}", p(&runner)),
        "--dataset",
        p(&data),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(summary["reward"], 0.75);
    assert_eq!(summary["instances"], 8);
    assert!(summary["diagnostics"].as_str().unwrap().contains("answered B where A was correct: 2"));
}

#[test]
fn evaluate_synthetic_split() {
    let o = skillopt(&[
        "evaluate",
        "--skill",
        p(&fixtures().join("orqa-seed")),
        "--config",
        p(&fixtures().join("config-a.toml")),
        "--split",
        "confirm",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["split"], "confirm");
    assert!(summary["reward"].as_f64().unwrap() > 0.7);
}
