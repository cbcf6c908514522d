use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_dialog::structure::{CollapseMap, TransitionTable};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-dialog"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("weather.jsonl");
    ok(&["gen-corpus", "--dialogs", &n.to_string(), "--seed", "3", "--out", s(&path), "--truth", s(&dir.join("truth.csv"))]);
    path
}

const TINY: [&str; 8] = ["--set", "rnn_hidden=8", "--set", "embed_dim=6", "--set", "phi_dim=5", "--epochs", "1"];

fn four_by_four() -> TransitionTable {
    let rows = [[0.4, 0.3, 0.2, 0.1], [0.1, 0.4, 0.3, 0.2], [0.2, 0.1, 0.4, 0.3], [0.25, 0.25, 0.25, 0.25]];
    let body: String = rows.iter().map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",") + ",10\n").collect();
    TransitionTable::from_csv(&format!("a,b,c,d,occupancy\n{body}")).unwrap()
}

#[test]
fn gen_corpus_writes_dialogs_truth_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = corpus(dir.path(), 12);
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 12);
    let truth = TransitionTable::read_csv(&dir.path().join("truth.csv")).unwrap();
    assert_eq!(truth.n_states(), 9);
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("weather.jsonl.resolved.json")).unwrap()).unwrap();
    assert_eq!(snap["dialogs"], 12);
    assert_eq!(snap["domain"], "weather");

    let sim = dir.path().join("sim.jsonl");
    ok(&["gen-corpus", "--domain", "restaurant", "--dialogs", "5", "--out", s(&sim)]);
    assert_eq!(fs::read_to_string(&sim).unwrap().lines().count(), 5);
    assert!(!run(&["gen-corpus", "--domain", "airline", "--out", s(&sim)]).status.success());
}

#[test]
fn train_writes_a_checkpoint_with_the_requested_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 20);
    let ckpt = dir.path().join("dvrnn");
    let mut args = vec!["train", "--variant", "dvrnn", "--states", "4", "--corpus", s(&data), "--out", s(&ckpt)];
    args.extend(TINY);
    ok(&args);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"], "dvrnn");
    assert_eq!(manifest["n_states"], 4);
    assert_eq!(manifest["config"]["rnn_hidden"], 8);
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(ckpt.join("training_log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 1);
    assert!(ckpt.join("resolved_config.json").exists());
}

#[test]
fn identical_runs_give_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 20);
    let conf = dir.path().join("hmm.conf");
    fs::write(&conf, "model = hmm\nstates = 3\nmax_iters = 5\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "--config", s(&conf), "--corpus", s(&data), "--out", s(&a)]);
    ok(&["train", "--config", s(&conf), "--corpus", s(&data), "--out", s(&b)]);
    let read = |p: &Path| fs::read(p.join("manifest.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(a.join("hmm.json")).unwrap(), fs::read(b.join("hmm.json")).unwrap());
}

#[test]
fn flags_win_over_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 20);
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "model = hmm\nstates = 3\nmax_iters = 5\n").unwrap();
    let out = dir.path().join("hmm");
    ok(&["train", "--config", s(&conf), "--states", "2", "--set", "max_iters=2", "--corpus", s(&data), "--out", s(&out)]);
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snap["run"]["states"], 2);
    assert_eq!(snap["model"]["max_iters"], 2);
    assert_eq!(snap["model"]["n_states"], 2);
}

#[test]
fn train_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let out = run(&["train", "--model", "hmm", "--states", "2", "--corpus", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere.jsonl"), "{}", stderr(&out));

    let data = corpus(dir.path(), 10);
    let out = run(&["train", "--model", "dvrnn", "--set", "epoch=3", "--corpus", s(&data), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("epoch") && stderr(&out).contains("epochs"), "{}", stderr(&out));

    let out = run(&["train", "--model", "dvrnn", "--set", "gumbel_temperature=0", "--corpus", s(&data), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("gumbel_temperature"), "{}", stderr(&out));

    let out = run(&["train", "--model", "tm_hmm", "--corpus", s(&data), "--out", s(&dir.path().join("x"))]);
    assert!(stderr(&out).contains("unknown model"), "{}", stderr(&out));
}

#[test]
fn structure_routes_by_model_and_filters_edges() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 20);
    for variant in ["dvrnn", "ddvrnn"] {
        let ckpt = dir.path().join(variant);
        let mut args = vec!["train", "--model", variant, "--states", "3", "--corpus", s(&data), "--out", s(&ckpt)];
        args.extend(TINY);
        ok(&args);
        let dot = dir.path().join(format!("{variant}.dot"));
        let csv = dir.path().join(format!("{variant}.csv"));
        ok(&["structure", "--checkpoint", s(&ckpt), "--corpus", s(&data), "--dot", s(&dot), "--csv", s(&csv), "--threshold", "0"]);
        let text = fs::read_to_string(&dot).unwrap();
        assert_eq!(text.matches("->").count(), 9, "{text}");
        let table = TransitionTable::read_csv(&csv).unwrap();
        assert_eq!(table.n_states(), 3);
        assert!(dir.path().join(format!("{variant}.csv.resolved.json")).exists());

        let model = latent_dialog::registry::ModelRegistry::default().load(&ckpt).unwrap();
        let dialogs = latent_dialog::corpus::load_corpus(&data, latent_dialog::corpus::CorpusFormat::Jsonl).unwrap();
        let expected = model.transition_table(&model.vocab().encode(&dialogs)).unwrap();
        let frequency = latent_dialog::structure::estimate_transition_table_frequency(&model.assign_states(&model.vocab().encode(&dialogs)).unwrap(), 3).unwrap();
        for (a, b) in table.matrix.iter().zip(expected.matrix.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        if variant == "dvrnn" {
            assert_eq!(table.matrix, frequency.matrix);
        } else {
            assert!(table.matrix.iter().all(|&p| p > 0.0), "prior readout is dense");
        }
    }

    let ckpt = dir.path().join("dvrnn");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"state_to_category": {"0": 0, "1": 1}}"#).unwrap();
    let out = run(&["structure", "--checkpoint", s(&ckpt), "--corpus", s(&data), "--csv", s(&dir.path().join("c.csv")), "--collapse", s(&bad)]);
    assert!(!out.status.success());

    let good = dir.path().join("good.json");
    fs::write(&good, r#"{"state_to_category": {"0": 0, "1": 1, "2": 1}, "category_names": ["first", "rest"]}"#).unwrap();
    let csv = dir.path().join("collapsed.csv");
    ok(&["structure", "--checkpoint", s(&ckpt), "--corpus", s(&data), "--csv", s(&csv), "--collapse", s(&good)]);
    let table = TransitionTable::read_csv(&csv).unwrap();
    assert_eq!(table.n_states(), 2);
    assert_eq!(table.label(1), "rest");
}

#[test]
fn eval_reports_the_summary_columns_and_hmm_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 30);
    let ckpt = dir.path().join("dvrnn");
    let mut args = vec!["train", "--model", "dvrnn", "--states", "3", "--corpus", s(&data), "--out", s(&ckpt)];
    args.extend(TINY);
    ok(&args);

    let out_dir = dir.path().join("eval");
    ok(&["eval", s(&ckpt), "--corpus", s(&data), "--samples", "2", "--out-dir", s(&out_dir)]);
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "variant,n_states,total_nll");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("dvrnn,3,"));

    ok(&["eval", s(&ckpt), "--corpus", s(&data), "--states", "3,5", "--hmm", "--samples", "2", "--out-dir", s(&out_dir)]);
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.contains("hmm,3,") && summary.contains("hmm,5,") && summary.contains("dvrnn,3,"), "{summary}");
    let snap: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(snap["split_seed"], 0);
}

#[test]
fn rl_schedule_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let curves = dir.path().join("curves.csv");
    ok(&[
        "rl", "--scheme", "baseline", "--dialogs", "100", "--eval-every", "10", "--eval-dialogs", "5", "--repeats", "3", "--set", "warm_start_dialogs=20",
        "--set", "warm_start_epochs=1", "--out", s(&curves),
    ]);
    let text = fs::read_to_string(&curves).unwrap();
    assert_eq!(text.lines().next().unwrap(), "scheme,repeat,checkpoint,success_rate");
    assert_eq!(text.lines().count(), 1 + 10 * 3);

    let out = run(&["rl", "--scheme", "kl", "--out", s(&curves)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--trans"), "{}", stderr(&out));

    let trans = dir.path().join("table.csv");
    fs::write(&trans, four_by_four().to_csv().unwrap()).unwrap();
    let collapse = dir.path().join("identity.json");
    fs::write(&collapse, serde_json::to_string(&CollapseMap::identity(4)).unwrap()).unwrap();
    let out = run(&["rl", "--scheme", "kl", "--trans", s(&trans), "--out", s(&curves)]);
    assert!(!out.status.success(), "a table without its collapse map is refused");

    let all = dir.path().join("all.csv");
    ok(&[
        "rl", "--scheme", "baseline,rep,kl,kl_rep", "--dialogs", "20", "--eval-every", "10", "--eval-dialogs", "5", "--repeats", "1", "--set",
        "warm_start_dialogs=10", "--set", "warm_start_epochs=1", "--trans", s(&trans), "--collapse", s(&collapse), "--jobs", "2", "--out", s(&all),
    ]);
    let text = fs::read_to_string(&all).unwrap();
    for scheme in ["baseline", "rep", "kl", "kl_rep"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(&format!("{scheme},"))).count(), 2, "{text}");
    }
    assert!(dir.path().join("all.csv.resolved.json").exists());
}

#[test]
fn learned_structure_feeds_the_rl_command() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim.jsonl");
    let ckpt = dir.path().join("ckpt");
    let (table, map) = (dir.path().join("table.csv"), dir.path().join("map.json"));
    ok(&["gen-corpus", "--domain", "restaurant", "--dialogs", "40", "--out", s(&sim)]);
    let mut args = vec!["train", "--model", "dvrnn", "--states", "6", "--corpus", s(&sim), "--out", s(&ckpt)];
    args.extend(TINY);
    ok(&args);
    ok(&["structure", "--checkpoint", s(&ckpt), "--corpus", s(&sim), "--csv", s(&table), "--majority-map", s(&map)]);

    let collapse = CollapseMap::read(&map).unwrap();
    assert_eq!(collapse.state_to_category.len(), 6);
    assert_eq!(collapse.num_categories(), 4);

    let curves = dir.path().join("curves.csv");
    ok(&[
        "rl", "--scheme", "kl_rep", "--dialogs", "10", "--eval-every", "10", "--eval-dialogs", "5", "--repeats", "1", "--set", "warm_start_dialogs=10",
        "--set", "warm_start_epochs=1", "--trans", s(&table), "--collapse", s(&map), "--out", s(&curves),
    ]);
    assert_eq!(fs::read_to_string(&curves).unwrap().lines().count(), 2);
}
