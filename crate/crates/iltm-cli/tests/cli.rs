//! End-to-end tests of the iltm binary: exit codes, manifests, rerun
//! determinism, and the meta-train / fit-predict / evaluate / dedupe flow.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iltm_cli::tasks::save_task;
use iltm_core::hp::HpSample;
use iltm_core::synth;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_iltm"));
    c.env_remove("ILTM_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn iltm")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_tasks(dir: &Path, tasks: &[iltm_core::tabular::TabularTask]) {
    for t in tasks {
        save_task(t, &dir.join(format!("{}.csv", t.name))).unwrap();
    }
}

#[test]
fn hpo_sample_defaults_match_library() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["hpo-sample", "--defaults", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for (k, v) in HpSample::default().to_key_values() {
        assert!(
            text.contains(&format!("{} = {}", k, v)),
            "missing '{} = {}' in:\n{}",
            k,
            v,
            text
        );
    }
}

#[test]
fn hpo_sample_reruns_identically() {
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "hpo-sample".to_string(),
            "--set".into(),
            "seed=9".into(),
            "--set".into(),
            "count=10".into(),
            "--out-dir".into(),
            d.to_str().unwrap().to_string(),
        ]
    };
    let a = bin().args(args(t1.path())).output().unwrap();
    let b = bin().args(args(t2.path())).output().unwrap();
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let f1 = std::fs::read(t1.path().join("samples.txt")).unwrap();
    let f2 = std::fs::read(t2.path().join("samples.txt")).unwrap();
    assert_eq!(f1, f2);
    let c = run(&["hpo-sample", "--set", "seed=10", "--set", "count=10"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("gradcheck PASS"));
    assert!(tmp.path().join("gradcheck.txt").exists());
}

#[test]
fn gradcheck_mutation_fails_with_numeric_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--mutate", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("gradient check failed"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let out = run(&["gradcheck", "--set", "nonsense=1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nonsense"));
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit-predict",
        "--checkpoint",
        "/nonexistent/model.iltm",
        "--task",
        "/nonexistent/task.csv",
        "--out-dir",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn manifest_from_another_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["hpo-sample", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let manifest = tmp.path().join("manifest.txt");
    let out = run(&["gradcheck", "--config", manifest.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("hpo-sample"));
}

#[test]
fn thread_cap_resolution_prefers_flag_over_env() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["hpo-sample", "--out-dir", tmp.path().to_str().unwrap()])
        .env("ILTM_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let manifest = std::fs::read_to_string(tmp.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("threads = 1"), "{}", manifest);

    let tmp2 = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["hpo-sample", "--threads", "2", "--out-dir", tmp2.path().to_str().unwrap()])
        .env("ILTM_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let manifest = std::fs::read_to_string(tmp2.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("threads = 2"), "{}", manifest);
}

#[test]
fn meta_train_manifest_echoes_accumulation_and_batch_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks_dir = tmp.path().join("tasks");
    std::fs::create_dir(&tasks_dir).unwrap();
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "meta-train",
        "--tasks-dir",
        tasks_dir.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_ne!(code(&out), 0);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("accumulation = 40"), "{}", manifest);
    assert!(manifest.contains("batch_gen = 2048"), "{}", manifest);
    assert!(manifest.contains("batch_grad = 2048"), "{}", manifest);
    let defaulted = manifest.lines().find(|l| l.starts_with("# defaulted keys:")).unwrap();
    for key in ["accumulation", "batch_gen", "batch_grad"] {
        assert!(defaulted.contains(key), "{}", defaulted);
    }
}

/// Strip the wall-clock column so validation logs can be compared bit-exactly.
fn without_wall(log: &str) -> String {
    log.lines()
        .map(|l| {
            let mut parts = l.splitn(3, ',');
            let a = parts.next().unwrap_or("");
            let b = parts.next().unwrap_or("");
            format!("{},{}", a, b)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

struct TrainedRun {
    _tmp: tempfile::TempDir,
    tasks_dir: PathBuf,
    out_dir: PathBuf,
}

fn train_small() -> TrainedRun {
    let tmp = tempfile::tempdir().unwrap();
    let tasks_dir = tmp.path().join("tasks");
    std::fs::create_dir(&tasks_dir).unwrap();
    let suite = vec![
        synth::blobs("t-blobs", 4, 2, 70, 11).unwrap(),
        synth::xor("t-xor", 4, 70, 12).unwrap(),
        synth::moons("t-moons", 4, 70, 13).unwrap(),
        synth::blobs("t-val", 4, 3, 70, 14).unwrap(),
    ];
    write_tasks(&tasks_dir, &suite);
    let out_dir = tmp.path().join("run");
    let settings = [
        "d_main=4",
        "h=8",
        "k_max=4",
        "r=32",
        "accumulation=2",
        "learning_rate=0.001",
        "max_steps=2",
        "batch_gen=32",
        "batch_grad=32",
        "val_period=1",
        "gbdt_rounds=8",
        "val_task_count=1",
        "seed=3",
    ];
    let mut args: Vec<String> = vec![
        "meta-train".into(),
        "--tasks-dir".into(),
        tasks_dir.to_str().unwrap().into(),
        "--out-dir".into(),
        out_dir.to_str().unwrap().into(),
        "--build-cache".into(),
    ];
    for s in settings {
        args.push("--set".into());
        args.push(s.into());
    }
    let out = bin().args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    TrainedRun { _tmp: tmp, tasks_dir, out_dir }
}

#[test]
fn meta_train_flow_with_caches_and_bit_exact_rerun() {
    let run_info = train_small();
    let out_dir = &run_info.out_dir;
    let text = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(text.contains("command = meta-train"));
    assert!(out_dir.join("checkpoint-best.iltm").exists());
    assert!(out_dir.join("checkpoint-final.iltm").exists());
    assert!(out_dir.join("val-log.csv").exists());

    let caches: Vec<_> = std::fs::read_dir(&run_info.tasks_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "cache"))
        .collect();
    assert_eq!(caches.len(), 4, "one cache per task");

    let best1 = std::fs::read(out_dir.join("checkpoint-best.iltm")).unwrap();
    let final1 = std::fs::read(out_dir.join("checkpoint-final.iltm")).unwrap();
    let log1 = std::fs::read_to_string(out_dir.join("val-log.csv")).unwrap();

    // Rerunning from the manifest must reproduce every artifact bit-exactly
    // (the log only up to its wall-clock column).
    let manifest = out_dir.join("manifest.txt");
    let out = run(&["meta-train", "--config", manifest.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let best2 = std::fs::read(out_dir.join("checkpoint-best.iltm")).unwrap();
    let final2 = std::fs::read(out_dir.join("checkpoint-final.iltm")).unwrap();
    let log2 = std::fs::read_to_string(out_dir.join("val-log.csv")).unwrap();
    assert_eq!(best1, best2);
    assert_eq!(final1, final2);
    assert_eq!(without_wall(&log1), without_wall(&log2));
}

#[test]
fn meta_train_without_caches_asks_for_build_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks_dir = tmp.path().join("tasks");
    std::fs::create_dir(&tasks_dir).unwrap();
    write_tasks(
        &tasks_dir,
        &[synth::blobs("a", 4, 2, 60, 1).unwrap(), synth::blobs("b", 4, 2, 60, 2).unwrap()],
    );
    let out = run(&[
        "meta-train",
        "--tasks-dir",
        tasks_dir.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("run").to_str().unwrap(),
        "--set",
        "val_task_count=1",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("build-cache"));
}

#[test]
fn checkpoint_reserializes_to_identical_bytes() {
    let run_info = train_small();
    let path = run_info.out_dir.join("checkpoint-best.iltm");
    let bytes = std::fs::read(&path).unwrap();
    let container = iltm_core::container::Container::read(&path).unwrap();
    let cp = iltm_core::container::checkpoint_from_container(&container).unwrap();
    let back = iltm_core::container::checkpoint_to_container(&cp).to_bytes();
    assert_eq!(bytes, back);
}

#[test]
fn fit_predict_and_evaluate_agree() {
    let run_info = train_small();
    let checkpoint = run_info.out_dir.join("checkpoint-best.iltm");
    let task = synth::blobs("fresh", 4, 2, 80, 21).unwrap();
    let task_path = run_info.tasks_dir.join("fresh-task.csv");
    save_task(&task, &task_path).unwrap();

    let fit_dir = run_info.out_dir.join("fit");
    let out = run(&[
        "fit-predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        task_path.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--set",
        "r=32",
        "--set",
        "n_ens=2",
        "--set",
        "ft_max_steps=6",
        "--set",
        "gbdt_rounds=8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("alpha = 0.5"), "{}", text);
    assert!(text.contains("tau = 2.0"), "{}", text);
    assert!(text.contains("auc = "), "{}", text);
    assert!(fit_dir.join("predictions.csv").exists());
    assert!(fit_dir.join("model.iltm").exists());
    let metric = std::fs::read_to_string(fit_dir.join("metrics.txt")).unwrap();

    let eval_dir = run_info.out_dir.join("eval");
    let out = run(&[
        "evaluate",
        "--task",
        task_path.to_str().unwrap(),
        "--predictions",
        fit_dir.join("predictions.csv").to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval_metric = std::fs::read_to_string(eval_dir.join("metrics.txt")).unwrap();
    assert_eq!(metric, eval_metric);

    // Rerunning fit-predict from its manifest reproduces the predictions.
    let pred1 = std::fs::read(fit_dir.join("predictions.csv")).unwrap();
    let manifest = fit_dir.join("manifest.txt");
    let out = run(&["fit-predict", "--config", manifest.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pred2 = std::fs::read(fit_dir.join("predictions.csv")).unwrap();
    assert_eq!(pred1, pred2);
}

#[test]
fn fit_predict_base_path_dumps_single_member_weights() {
    let run_info = train_small();
    let checkpoint = run_info.out_dir.join("checkpoint-best.iltm");
    let task = synth::blobs("fresh2", 4, 2, 80, 22).unwrap();
    let task_path = run_info.tasks_dir.join("fresh2-task.csv");
    save_task(&task, &task_path).unwrap();

    let fit_dir = run_info.out_dir.join("fit-base");
    let out = run(&[
        "fit-predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        task_path.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--no-retrieval",
        "--no-finetune",
        "--n-ens",
        "1",
        "--dump-weights",
        "--set",
        "r=32",
        "--set",
        "gbdt_rounds=8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("retrieval = false"));
    let manifest = std::fs::read_to_string(fit_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("do_retrieval = false"));
    assert!(manifest.contains("do_finetune = false"));
    assert!(manifest.contains("n_ens = 1"));
    let weights = std::fs::read_to_string(fit_dir.join("weights.csv")).unwrap();
    let members: std::collections::BTreeSet<&str> =
        weights.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(members.len(), 1);
}

#[test]
fn fit_predict_rejects_too_many_classes() {
    let run_info = train_small();
    let checkpoint = run_info.out_dir.join("checkpoint-best.iltm");
    let task5 = five_class_task();
    let task_path = run_info.tasks_dir.join("wide-task.csv");
    save_task(&task5, &task_path).unwrap();
    let out = run(&[
        "fit-predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        task_path.to_str().unwrap(),
        "--out-dir",
        run_info.out_dir.join("fit-wide").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("classes"));
}

fn five_class_task() -> iltm_core::tabular::TabularTask {
    let mut t = synth::blobs("wide", 4, 4, 150, 23).unwrap();
    if let iltm_core::tabular::TargetData::Classes(y) = &mut t.target {
        for (i, v) in y.iter_mut().enumerate() {
            if i % 5 == 0 {
                *v = 5;
            }
        }
    }
    t.k = 5;
    if let iltm_core::tabular::TargetKind::Classification(names) = &mut t.schema.target {
        names.push("c5".into());
    }
    t
}

#[test]
fn dedupe_flow_reports_rules_and_io_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let evals = tmp.path().join("evals");
    let cands = tmp.path().join("cands");
    std::fs::create_dir(&evals).unwrap();
    std::fs::create_dir(&cands).unwrap();

    let adult = synth::blobs("adult", 4, 2, 60, 31).unwrap();
    save_task(&adult, &evals.join("adult.csv")).unwrap();
    save_task(&adult, &cands.join("adult.csv")).unwrap();
    let clean = synth::blobs("meadow-sensors", 6, 2, 80, 32).unwrap();
    save_task(&clean, &cands.join("meadow-sensors.csv")).unwrap();
    std::fs::write(cands.join("broken.csv"), "a,b,target\n1,2\n").unwrap();

    let out_dir = tmp.path().join("run");
    let out = run(&[
        "dedupe",
        "--candidates",
        cands.to_str().unwrap(),
        "--evals",
        evals.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("kept 1 of 3"), "{}", text);
    let verdicts = std::fs::read_to_string(out_dir.join("verdicts.csv")).unwrap();
    assert!(verdicts.contains("exact-name"), "{}", verdicts);
    assert!(verdicts.contains("io-error"), "{}", verdicts);
    assert!(verdicts.contains("meadow-sensors,keep"), "{}", verdicts);
}

#[test]
fn dedupe_fails_fast_on_unreadable_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let evals = tmp.path().join("evals");
    let cands = tmp.path().join("cands");
    std::fs::create_dir(&evals).unwrap();
    std::fs::create_dir(&cands).unwrap();
    std::fs::write(evals.join("broken.csv"), "a,b,target\n1,2\n").unwrap();
    save_task(&synth::blobs("x", 4, 2, 60, 1).unwrap(), &cands.join("x.csv")).unwrap();
    let out = run(&[
        "dedupe",
        "--candidates",
        cands.to_str().unwrap(),
        "--evals",
        evals.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("evaluation dataset"));
}

#[test]
fn meta_train_rejects_regression_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks_dir = tmp.path().join("tasks");
    std::fs::create_dir(&tasks_dir).unwrap();
    write_tasks(
        &tasks_dir,
        &[synth::blobs("a", 4, 2, 60, 1).unwrap(), synth::friedman("b", 5, 60, 0.5, 1.0, 0.0, 2).unwrap()],
    );
    let out = run(&[
        "meta-train",
        "--tasks-dir",
        tasks_dir.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("run").to_str().unwrap(),
        "--set",
        "val_task_count=1",
        "--build-cache",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn regression_fit_predict_reports_rmse() {
    let run_info = train_small();
    let checkpoint = run_info.out_dir.join("checkpoint-best.iltm");
    let task = synth::friedman("reg", 5, 90, 0.3, 1.0, 0.0, 41).unwrap();
    let task_path = run_info.tasks_dir.join("reg-task.csv");
    save_task(&task, &task_path).unwrap();
    let fit_dir = run_info.out_dir.join("fit-reg");
    let out = run(&[
        "fit-predict",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        task_path.to_str().unwrap(),
        "--out-dir",
        fit_dir.to_str().unwrap(),
        "--set",
        "r=32",
        "--set",
        "n_ens=2",
        "--set",
        "ft_max_steps=6",
        "--set",
        "gbdt_rounds=8",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("rmse = "), "{}", stdout(&out));
    let preds = std::fs::read_to_string(fit_dir.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("row,prediction\n"));
}
