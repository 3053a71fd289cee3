//! The seven subcommands and their shared plumbing. Each command follows the
//! same shape: merge config file and flag overrides, resolve every key (typed,
//! with defaults), reject unknown keys, write a manifest that reruns the
//! command bit-exactly, then do the work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use iltm_core::container::{
    checkpoint_from_container, checkpoint_to_container, task_cache_to_container, Container,
    TaskCache,
};
use iltm_core::dedupe::{
    entry_from_task, run_pipeline, write_discard_csv, DedupeConfig, DedupeEntry, DiscardRecord,
    RuleId, Verdict,
};
use iltm_core::error::{Error, Result};
use iltm_core::hp::{sample_hyperparams, FtData, GbdtSplit, HpSample};
use iltm_core::hypernet::HyperDims;
use iltm_core::inference::{
    fit_task, predict_proba, predict_reals, save_ensemble, write_class_predictions_csv,
    write_real_predictions_csv, FitTaskConfig,
};
use iltm_core::meta::{
    check_meta_task, meta_task_from_cache, pipeline_gradcheck, prepare_meta_task,
    run_meta_training, Checkpoint, MetaCollection, MetaTask, MetaTaskCheck, MetaTrainConfig,
    OptimizerKind, OptimizerState,
};
use iltm_core::preprocess::PsiVariant;
use iltm_core::rng::{derive_seed, fnv1a};
use iltm_core::tabular::{auc, rmse, TabularTask, TargetData};

use crate::config::{RawConfig, Resolver};
use crate::manifest;
use crate::tasks::{self, TaskKind, TaskLoadOptions};

#[derive(Parser)]
#[command(name = "iltm", version, about = "Tabular meta-learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train the hypernetwork over a directory of task CSVs.
    MetaTrain(MetaTrainArgs),
    /// Fit one dataset with a trained checkpoint and write predictions.
    FitPredict(FitPredictArgs),
    /// Score a predictions file against a task's labels.
    Evaluate(EvaluateArgs),
    /// Screen candidate datasets against an evaluation corpus.
    Dedupe(DedupeArgs),
    /// Finite-difference audit of the training gradient.
    Gradcheck(GradcheckArgs),
    /// Draw hyperparameter configurations from the search space.
    HpoSample(HpoSampleArgs),
    /// Precompute per-task embedding caches for meta-training.
    BuildCache(BuildCacheArgs),
}

#[derive(Args)]
struct Common {
    /// KEY=VALUE config file; a manifest from a previous run works here.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable; wins over the config file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker thread cap; 0 keeps the library default. Overrides ILTM_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for the manifest and output files.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn raw(&self, command: &str) -> Result<RawConfig> {
        let mut raw = RawConfig::load(self.config.as_deref())?;
        manifest::check_reuse(&raw, command)?;
        for pair in &self.set {
            raw.set_flag_pair(pair)?;
        }
        if let Some(t) = self.threads {
            raw.set_flag("threads", t.to_string());
        } else if let Ok(env) = std::env::var("ILTM_THREADS") {
            raw.set_flag("threads", env);
        }
        if let Some(d) = &self.out_dir {
            raw.set_flag("out_dir", d.display().to_string());
        }
        Ok(raw)
    }
}

/// Entry point used by main: parse, dispatch, map errors to exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::MetaTrain(a) => meta_train(a),
        Cmd::FitPredict(a) => fit_predict(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Dedupe(a) => dedupe(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::HpoSample(a) => hpo_sample(a),
        Cmd::BuildCache(a) => build_cache(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            crate::exit_code(&e)
        }
    }
}

// ---- shared resolution helpers ----

fn setup_threads(res: &mut Resolver) -> Result<()> {
    let threads = res.get_usize("threads", 0)?;
    if threads > 0 {
        // Ignore the error a second global-pool initialization returns; the
        // first configuration of the process stays in effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

fn out_dir(res: &mut Resolver, default: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(res.get_str("out_dir", default));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io_msg(format!("cannot create {}: {}", dir.display(), e)))?;
    Ok(dir)
}

fn load_opts(res: &mut Resolver) -> Result<TaskLoadOptions> {
    let target = res.get_str("target_column", "");
    let kind = TaskKind::parse(&res.get_str("task_kind", "auto"))?;
    Ok(TaskLoadOptions {
        target_column: if target.is_empty() { None } else { Some(target) },
        kind,
    })
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "plain" => Ok(OptimizerKind::Plain),
        other => Err(Error::config(format!(
            "optimizer must be 'adam' or 'plain', got '{}'",
            other
        ))),
    }
}

/// "default" keeps the embedding variant's own rate; anything else must parse.
fn parse_gbdt_lr(s: &str) -> Result<Option<f64>> {
    if s == "default" {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| {
        Error::config(format!(
            "gbdt_learning_rate must be a number or 'default', got '{}'",
            s
        ))
    })
}

fn resolve_hp(res: &mut Resolver) -> Result<HpSample> {
    let d = HpSample::default();
    Ok(HpSample {
        preprocessing: PsiVariant::parse(&res.get_str("preprocessing", d.preprocessing.name()))?,
        batch_size: res.get_usize("batch_size", d.batch_size)?,
        n_ens: res.get_usize("n_ens", d.n_ens)?,
        feature_bagging: res.get_bool("feature_bagging", d.feature_bagging)?,
        do_finetune: res.get_bool("do_finetune", d.do_finetune)?,
        ft_dropout: res.get_f64("ft_dropout", d.ft_dropout)?,
        ft_max_steps: res.get_usize("ft_max_steps", d.ft_max_steps)?,
        ft_learning_rate: res.get_f64("ft_learning_rate", d.ft_learning_rate)?,
        ft_data: FtData::parse(&res.get_str("ft_data", d.ft_data.name()))?,
        gbdt_split: GbdtSplit::parse(&res.get_str("gbdt_split", d.gbdt_split.name()))?,
        gbdt_refit_per_member: res.get_bool("gbdt_refit_per_member", d.gbdt_refit_per_member)?,
        gbdt_rounds: res.get_usize("gbdt_rounds", d.gbdt_rounds)?,
        gbdt_learning_rate: parse_gbdt_lr(&res.get_str("gbdt_learning_rate", "default"))?,
        do_retrieval: res.get_bool("do_retrieval", d.do_retrieval)?,
        tau: res.get_f64("tau", d.tau)?,
        alpha: res.get_f64("alpha", d.alpha)?,
    })
}

fn select_rows(task: &TabularTask, which: &str) -> Result<Vec<usize>> {
    let rows = match which {
        "train" => task.splits.train.clone(),
        "val" => task.splits.val.clone(),
        "test" => task.splits.test.clone(),
        "all" => (0..task.n_rows()).collect(),
        other => {
            return Err(Error::config(format!(
                "predict_rows must be train, val, test, or all, got '{}'",
                other
            )))
        }
    };
    if rows.is_empty() {
        return Err(Error::data(format!("the '{}' split of '{}' is empty", which, task.name)));
    }
    Ok(rows)
}

// ---- embedding caches ----

fn gbdt_tag(rounds: usize, lr: Option<f64>) -> String {
    match lr {
        Some(v) => format!("r{}-lr{}", rounds, v),
        None => format!("r{}-lrdefault", rounds),
    }
}

/// Cache sidecar beside the CSV, named by everything the ψ fit depends on.
fn cache_path(csv: &Path, variant: PsiVariant, seed: u64, tag: &str) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("task");
    csv.with_file_name(format!(
        "{}.{}.s{}.{}.cache",
        stem,
        variant.name().to_lowercase(),
        seed,
        tag
    ))
}

/// GBDT learning rate actually used when the config says "default".
fn effective_gbdt_lr(variant: PsiVariant, lr: Option<f64>) -> f64 {
    lr.or_else(|| variant.base_gbdt_config().map(|c| c.learning_rate)).unwrap_or(0.1)
}

enum CacheMode {
    /// Missing cache is an error telling the user to build it.
    Require,
    /// Missing cache is built and written; an existing one must validate.
    BuildMissing,
    /// Build missing caches and rebuild unreadable or mismatched ones.
    Refresh,
}

struct CachePlan {
    variant: PsiVariant,
    gbdt_rounds: usize,
    gbdt_lr: Option<f64>,
    seed: u64,
    k_max: usize,
}

fn load_cached_task(
    file: &Path,
    task: TabularTask,
    plan: &CachePlan,
    task_seed: u64,
    tag: &str,
) -> Result<Option<MetaTask>> {
    let path = cache_path(file, plan.variant, plan.seed, tag);
    let container = Container::read(&path)?;
    let tc = iltm_core::container::task_cache_from_container(&container)?;
    if tc.task_name != task.name || tc.seed != task_seed || tc.gbdt_config_tag != tag {
        return Ok(None);
    }
    if tc.psi.variant != plan.variant {
        return Ok(None);
    }
    Ok(Some(meta_task_from_cache(task, tc.psi, &tc.split)?))
}

fn build_cached_task(
    file: &Path,
    task: TabularTask,
    plan: &CachePlan,
    task_seed: u64,
    tag: &str,
) -> Result<MetaTask> {
    let lr = effective_gbdt_lr(plan.variant, plan.gbdt_lr);
    let (mt, split) = prepare_meta_task(task, plan.variant, plan.gbdt_rounds, lr, task_seed)?;
    let cache = TaskCache {
        task_name: mt.task.name.clone(),
        seed: task_seed,
        gbdt_config_tag: tag.to_string(),
        psi: mt.psi.clone(),
        split,
    };
    let path = cache_path(file, plan.variant, plan.seed, tag);
    task_cache_to_container(&cache).write(&path)?;
    println!("cached {}", path.display());
    Ok(mt)
}

/// Load every usable task in `files`, resolving each one's embedding cache
/// according to `mode`. Skipped tasks are reported on stderr.
fn prepare_collection(
    files: &[PathBuf],
    opts: &TaskLoadOptions,
    plan: &CachePlan,
    mode: &CacheMode,
) -> Result<MetaCollection> {
    let mut out = Vec::new();
    for file in files {
        let task = tasks::load_task(file, opts)?;
        match check_meta_task(&task, plan.k_max)? {
            MetaTaskCheck::Skip(msg) => {
                eprintln!("skipping '{}': {}", task.name, msg);
                continue;
            }
            MetaTaskCheck::Ok => {}
        }
        let task_seed = derive_seed(plan.seed, &[fnv1a(task.name.as_bytes())]);
        let tag = gbdt_tag(plan.gbdt_rounds, plan.gbdt_lr);
        let path = cache_path(file, plan.variant, plan.seed, &tag);
        let mt = if path.exists() {
            match (load_cached_task(file, task.clone(), plan, task_seed, &tag), mode) {
                (Ok(Some(mt)), _) => mt,
                (Ok(None) | Err(_), CacheMode::Refresh) => {
                    build_cached_task(file, task, plan, task_seed, &tag)?
                }
                (Ok(None), _) => {
                    return Err(Error::config(format!(
                        "cache {} does not match task '{}' under the current config; \
                         rebuild it with build-cache",
                        path.display(),
                        task.name
                    )))
                }
                (Err(e), _) => return Err(e),
            }
        } else {
            match mode {
                CacheMode::Require => {
                    return Err(Error::data(format!(
                        "no embedding cache for '{}' (expected {}); \
                         pass --build-cache or run build-cache first",
                        task.name,
                        path.display()
                    )))
                }
                CacheMode::BuildMissing | CacheMode::Refresh => {
                    build_cached_task(file, task, plan, task_seed, &tag)?
                }
            }
        };
        out.push(mt);
    }
    Ok(MetaCollection { tasks: out })
}

// ---- meta-train ----

#[derive(Args)]
struct MetaTrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of training task CSVs.
    #[arg(long, value_name = "DIR")]
    tasks_dir: Option<PathBuf>,
    /// Build missing embedding caches instead of failing.
    #[arg(long)]
    build_cache: bool,
}

fn meta_train(a: &MetaTrainArgs) -> Result<()> {
    let mut raw = a.common.raw("meta-train")?;
    if let Some(d) = &a.tasks_dir {
        raw.set_flag("tasks_dir", d.display().to_string());
    }
    if a.build_cache {
        raw.set_flag("build_cache", "true");
    }
    let mut res = Resolver::new(raw);

    let tasks_dir = res.require_path("tasks_dir")?;
    let dir = out_dir(&mut res, "runs/meta-train")?;
    let seed = res.get_u64("seed", 0)?;
    let dims = HyperDims {
        d_main: res.get_usize("d_main", 512)?,
        h: res.get_usize("h", 1024)?,
        k_max: res.get_usize("k_max", 16)?,
    };
    let cfg = MetaTrainConfig {
        dims,
        r: res.get_usize("r", iltm_core::projection::DEFAULT_R)?,
        accumulation: res.get_usize("accumulation", 40)?,
        learning_rate: res.get_f64("learning_rate", 1e-4)?,
        max_steps: res.get_usize("max_steps", 1000)?,
        batch_gen: res.get_usize("batch_gen", 2048)?,
        batch_grad: res.get_usize("batch_grad", 2048)?,
        optimizer: parse_optimizer(&res.get_str("optimizer", "adam"))?,
        seed,
        val_period: res.get_usize("val_period", 100)?,
        retrieval: res.get_bool("do_retrieval", true)?,
        alpha: res.get_f64("alpha", 0.5)?,
        tau: res.get_f64("tau", 2.0)?,
    };
    let plan = CachePlan {
        variant: PsiVariant::parse(&res.get_str("preprocessing", "RX"))?,
        gbdt_rounds: res.get_usize("gbdt_rounds", 100)?,
        gbdt_lr: parse_gbdt_lr(&res.get_str("gbdt_learning_rate", "default"))?,
        seed,
        k_max: dims.k_max,
    };
    let val_task_count = res.get_usize("val_task_count", 2)?;
    let build = res.get_bool("build_cache", false)?;
    let opts = load_opts(&mut res)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "meta-train", &entries)?;

    let files = tasks::list_task_files(&tasks_dir)?;
    if val_task_count == 0 || val_task_count >= files.len() {
        return Err(Error::config(format!(
            "val_task_count must leave at least one training task \
             (got {} validation of {} files)",
            val_task_count,
            files.len()
        )));
    }
    let (train_files, val_files) = files.split_at(files.len() - val_task_count);
    let mode = if build { CacheMode::BuildMissing } else { CacheMode::Require };
    let train_col = prepare_collection(train_files, &opts, &plan, &mode)?;
    let val_col = prepare_collection(val_files, &opts, &plan, &mode)?;
    if train_col.tasks.is_empty() || val_col.tasks.is_empty() {
        return Err(Error::data(
            "no usable tasks left after skipping; meta-training needs at least \
             one training and one validation task"
                .to_string(),
        ));
    }
    println!(
        "meta-training on {} tasks, validating on {}",
        train_col.tasks.len(),
        val_col.tasks.len()
    );

    let mut log = String::from("step,score,wall_ms\n");
    let result = run_meta_training(&train_col, &val_col, &cfg, |p| {
        println!("val step={} score={:.6}", p.step, p.score);
        log.push_str(&format!("{},{},{}\n", p.step, p.score, p.wall_ms));
    })?;
    std::fs::write(dir.join("val-log.csv"), log)
        .map_err(|e| Error::io_msg(format!("cannot write val-log.csv: {}", e)))?;

    let val_history: Vec<(u64, f64)> =
        result.history.iter().map(|p| (p.step as u64, p.score)).collect();
    let best = Checkpoint {
        phi: result.best_phi,
        optimizer: OptimizerState::new(0),
        step: result.best_step as u64,
        val_history: val_history.clone(),
        config: cfg.clone(),
    };
    let best_path = dir.join("checkpoint-best.iltm");
    checkpoint_to_container(&best).write(&best_path)?;
    let fin = Checkpoint {
        phi: result.final_phi,
        optimizer: result.final_opt,
        step: cfg.max_steps as u64,
        val_history,
        config: cfg,
    };
    checkpoint_to_container(&fin).write(&dir.join("checkpoint-final.iltm"))?;

    println!("best step {} score {:.6}", result.best_step, result.best_score);
    println!("best checkpoint: {}", best_path.display());
    Ok(())
}

// ---- fit-predict ----

#[derive(Args)]
struct FitPredictArgs {
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint file.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Task CSV to fit and predict.
    #[arg(long, value_name = "FILE")]
    task: Option<PathBuf>,
    /// Export each member's flat network weights.
    #[arg(long)]
    dump_weights: bool,
    /// Disable the retrieval head (logits come from the network alone).
    #[arg(long)]
    no_retrieval: bool,
    /// Skip fine-tuning; use the generated weights as produced.
    #[arg(long)]
    no_finetune: bool,
    /// Ensemble size override.
    #[arg(long, value_name = "N")]
    n_ens: Option<usize>,
}

fn fit_predict(a: &FitPredictArgs) -> Result<()> {
    let mut raw = a.common.raw("fit-predict")?;
    if let Some(p) = &a.checkpoint {
        raw.set_flag("checkpoint", p.display().to_string());
    }
    if let Some(p) = &a.task {
        raw.set_flag("task", p.display().to_string());
    }
    if a.dump_weights {
        raw.set_flag("dump_weights", "true");
    }
    if a.no_retrieval {
        raw.set_flag("do_retrieval", "false");
    }
    if a.no_finetune {
        raw.set_flag("do_finetune", "false");
    }
    if let Some(n) = a.n_ens {
        raw.set_flag("n_ens", n.to_string());
    }
    let mut res = Resolver::new(raw);

    let checkpoint_path = res.require_path("checkpoint")?;
    let task_path = res.require_path("task")?;
    let dir = out_dir(&mut res, "runs/fit-predict")?;
    let hp = resolve_hp(&mut res)?;
    let mut fcfg = FitTaskConfig {
        r: res.get_usize("r", iltm_core::projection::DEFAULT_R)?,
        context_cap: res.get_usize("context_cap", iltm_core::inference::DEFAULT_CONTEXT_CAP)?,
        regression_retrieval: res.get_bool("regression_retrieval", false)?,
        seed: res.get_u64("seed", 0)?,
        ..FitTaskConfig::default()
    };
    hp.apply_to(&mut fcfg);
    let predict_rows = res.get_str("predict_rows", "test");
    let dump = res.get_bool("dump_weights", false)?;
    let opts = load_opts(&mut res)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "fit-predict", &entries)?;

    let container = Container::read(&checkpoint_path)?;
    let cp = checkpoint_from_container(&container)?;
    let task = tasks::load_task(&task_path, &opts)?;
    if task.k > 0 && task.k > cp.config.dims.k_max {
        return Err(Error::schema(format!(
            "task '{}' has {} classes but the checkpoint was trained for at most {}",
            task.name, task.k, cp.config.dims.k_max
        )));
    }

    let fit_start = Instant::now();
    let model = fit_task(&cp.phi, &task, &fcfg)?;
    let fit_ms = fit_start.elapsed().as_millis();
    println!("fitted {} members in {} ms", model.members.len(), fit_ms);
    println!("retrieval = {}", model.retrieval);
    println!("alpha = {:?}", model.alpha);
    println!("tau = {:?}", model.tau);
    save_ensemble(&model, &dir.join("model.iltm"))?;

    if dump {
        let mut out = String::from("member,index,value\n");
        for (i, member) in model.members.iter().enumerate() {
            for (j, v) in member.theta.to_flat().iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", i, j, v));
            }
        }
        std::fs::write(dir.join("weights.csv"), out)
            .map_err(|e| Error::io_msg(format!("cannot write weights.csv: {}", e)))?;
    }

    let rows = select_rows(&task, &predict_rows)?;
    let metric = if task.k > 0 {
        let probs = predict_proba(&model, &task, &rows)?;
        write_class_predictions_csv(&dir.join("predictions.csv"), &probs, &model.class_names)?;
        let y: Vec<u32> = match &task.target {
            TargetData::Classes(y) => rows.iter().map(|&r| y[r]).collect(),
            TargetData::Reals(_) => unreachable!(),
        };
        format!("auc = {}", auc(&probs.view(), &y)?)
    } else {
        let preds = predict_reals(&model, &task, &rows)?;
        write_real_predictions_csv(&dir.join("predictions.csv"), &preds)?;
        let y: Vec<f64> = match &task.target {
            TargetData::Reals(y) => rows.iter().map(|&r| y[r]).collect(),
            TargetData::Classes(_) => unreachable!(),
        };
        format!("rmse = {}", rmse(&preds, &y)?)
    };
    println!("{}", metric);
    std::fs::write(dir.join("metrics.txt"), format!("{}\n", metric))
        .map_err(|e| Error::io_msg(format!("cannot write metrics.txt: {}", e)))?;
    Ok(())
}

// ---- evaluate ----

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Task CSV carrying the reference labels.
    #[arg(long, value_name = "FILE")]
    task: Option<PathBuf>,
    /// Predictions file produced by fit-predict.
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut raw = a.common.raw("evaluate")?;
    if let Some(p) = &a.task {
        raw.set_flag("task", p.display().to_string());
    }
    if let Some(p) = &a.predictions {
        raw.set_flag("predictions", p.display().to_string());
    }
    let mut res = Resolver::new(raw);

    let task_path = res.require_path("task")?;
    let pred_path = res.require_path("predictions")?;
    let dir = out_dir(&mut res, "runs/evaluate")?;
    let predict_rows = res.get_str("predict_rows", "test");
    let opts = load_opts(&mut res)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "evaluate", &entries)?;

    let task = tasks::load_task(&task_path, &opts)?;
    let rows = select_rows(&task, &predict_rows)?;
    let metric = if task.k > 0 {
        let class_names = match &task.schema.target {
            iltm_core::tabular::TargetKind::Classification(names) => names.clone(),
            iltm_core::tabular::TargetKind::Regression => unreachable!(),
        };
        let probs = read_class_predictions(&pred_path, &class_names)?;
        if probs.nrows() != rows.len() {
            return Err(Error::data(format!(
                "{} prediction rows for {} '{}' rows",
                probs.nrows(),
                rows.len(),
                predict_rows
            )));
        }
        let y: Vec<u32> = match &task.target {
            TargetData::Classes(y) => rows.iter().map(|&r| y[r]).collect(),
            TargetData::Reals(_) => unreachable!(),
        };
        format!("auc = {}", auc(&probs.view(), &y)?)
    } else {
        let preds = read_real_predictions(&pred_path)?;
        if preds.len() != rows.len() {
            return Err(Error::data(format!(
                "{} prediction rows for {} '{}' rows",
                preds.len(),
                rows.len(),
                predict_rows
            )));
        }
        let y: Vec<f64> = match &task.target {
            TargetData::Reals(y) => rows.iter().map(|&r| y[r]).collect(),
            TargetData::Classes(_) => unreachable!(),
        };
        format!("rmse = {}", rmse(&preds, &y)?)
    };
    println!("{}", metric);
    std::fs::write(dir.join("metrics.txt"), format!("{}\n", metric))
        .map_err(|e| Error::io_msg(format!("cannot write metrics.txt: {}", e)))?;
    Ok(())
}

fn read_class_predictions(
    path: &Path,
    class_names: &[String],
) -> Result<ndarray::Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io_msg(format!("cannot read {}: {}", path.display(), e)))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("bad predictions header: {}", e)))?
        .clone();
    let found: Vec<&str> = headers.iter().skip(1).collect();
    let expected: Vec<&str> = class_names.iter().map(|s| s.as_str()).collect();
    if found != expected {
        return Err(Error::schema(format!(
            "prediction columns {:?} do not match task classes {:?}",
            found, expected
        )));
    }
    let mut values = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("bad predictions row: {}", e)))?;
        if record.len() != class_names.len() + 1 {
            return Err(Error::data(format!(
                "prediction row {} has {} fields, expected {}",
                n,
                record.len(),
                class_names.len() + 1
            )));
        }
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                Error::data(format!("unparseable probability '{}' in row {}", field, n))
            })?;
            values.push(v);
        }
        n += 1;
    }
    ndarray::Array2::from_shape_vec((n, class_names.len()), values)
        .map_err(|e| Error::data(format!("prediction shape: {}", e)))
}

fn read_real_predictions(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io_msg(format!("cannot read {}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("bad predictions row: {}", e)))?;
        let field = record
            .get(1)
            .ok_or_else(|| Error::data(format!("prediction row {} is missing a value", i)))?;
        let v: f64 = field
            .parse()
            .map_err(|_| Error::data(format!("unparseable prediction '{}' in row {}", field, i)))?;
        out.push(v);
    }
    Ok(out)
}

// ---- dedupe ----

#[derive(Args)]
struct DedupeArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of candidate dataset CSVs.
    #[arg(long, value_name = "DIR")]
    candidates: Option<PathBuf>,
    /// Directory of evaluation dataset CSVs.
    #[arg(long, value_name = "DIR")]
    evals: Option<PathBuf>,
}

fn dedupe(a: &DedupeArgs) -> Result<()> {
    let mut raw = a.common.raw("dedupe")?;
    if let Some(p) = &a.candidates {
        raw.set_flag("candidates", p.display().to_string());
    }
    if let Some(p) = &a.evals {
        raw.set_flag("evals", p.display().to_string());
    }
    let mut res = Resolver::new(raw);

    let cand_dir = res.require_path("candidates")?;
    let eval_dir = res.require_path("evals")?;
    let dir = out_dir(&mut res, "runs/dedupe")?;
    let mut cfg = DedupeConfig::default();
    cfg.lambda = res.get_f64("lambda", cfg.lambda)?;
    cfg.leak_samples = res.get_usize("leak_samples", cfg.leak_samples)?;
    cfg.seed = res.get_u64("seed", cfg.seed)?;
    let opts = load_opts(&mut res)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "dedupe", &entries)?;

    let mut evals = Vec::new();
    for file in tasks::list_task_files(&eval_dir)? {
        let task = tasks::load_task(&file, &opts).map_err(|e| {
            Error::data(format!(
                "evaluation dataset {} is unreadable: {}",
                file.display(),
                e
            ))
        })?;
        evals.push(entry_from_task(&task, Some(file.display().to_string())));
    }

    enum Slot {
        Entry(DedupeEntry),
        Unreadable(DiscardRecord),
    }
    let mut slots = Vec::new();
    for file in tasks::list_task_files(&cand_dir)? {
        match tasks::load_task(&file, &opts) {
            Ok(task) => slots.push(Slot::Entry(entry_from_task(
                &task,
                Some(file.display().to_string()),
            ))),
            Err(e) => {
                let name = file.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
                slots.push(Slot::Unreadable(DiscardRecord {
                    name,
                    verdict: Verdict::Discard,
                    rule: Some(RuleId::IoError),
                    evidence: format!("file unreadable: {}", e),
                }));
            }
        }
    }
    let candidates: Vec<DedupeEntry> = slots
        .iter()
        .filter_map(|s| match s {
            Slot::Entry(e) => Some(e.clone()),
            Slot::Unreadable(_) => None,
        })
        .collect();
    let judged = run_pipeline(&candidates, &evals, &cfg)?;
    let mut judged_iter = judged.into_iter();
    let records: Vec<DiscardRecord> = slots
        .into_iter()
        .map(|s| match s {
            Slot::Entry(_) => judged_iter.next().expect("one record per judged candidate"),
            Slot::Unreadable(r) => r,
        })
        .collect();

    let mut kept = 0usize;
    let mut by_rule: BTreeMap<&'static str, usize> = BTreeMap::new();
    for r in &records {
        match r.verdict {
            Verdict::Keep => kept += 1,
            Verdict::Discard => {
                let rule = r.rule.map(|id| id.as_str()).unwrap_or("unspecified");
                *by_rule.entry(rule).or_insert(0) += 1;
            }
        }
    }
    println!("kept {} of {} candidates", kept, records.len());
    for (rule, n) in &by_rule {
        println!("discarded by {}: {}", rule, n);
    }
    write_discard_csv(&dir.join("verdicts.csv"), &records)?;
    println!("verdicts: {}", dir.join("verdicts.csv").display());
    Ok(())
}

// ---- gradcheck ----

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Corrupt the objective to prove the check can fail.
    #[arg(long)]
    mutate: bool,
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut raw = a.common.raw("gradcheck")?;
    if a.mutate {
        raw.set_flag("mutate", "true");
    }
    let mut res = Resolver::new(raw);

    let dir = out_dir(&mut res, "runs/gradcheck")?;
    let dims = HyperDims {
        d_main: res.get_usize("d_main", 8)?,
        h: res.get_usize("h", 16)?,
        k_max: res.get_usize("k_max", 4)?,
    };
    let n_gen = res.get_usize("n_gen", 12)?;
    let n_grad = res.get_usize("n_grad", 10)?;
    let k = res.get_usize("k", 3)?;
    let alpha = res.get_f64("alpha", 0.5)?;
    let tau = res.get_f64("tau", 2.0)?;
    let seed = res.get_u64("seed", 7)?;
    let tol = res.get_f64("tol", 1e-5)?;
    let mutate = res.get_bool("mutate", false)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "gradcheck", &entries)?;

    let start = Instant::now();
    let report = pipeline_gradcheck(dims, n_gen, n_grad, k, alpha, tau, seed, mutate)?;
    let elapsed = start.elapsed();
    println!("parameters checked: {}", report.n_params);
    println!("loss at the checked point: {:.6}", report.loss);
    println!("max relative error = {:e}", report.max_rel_error);
    println!("elapsed: {} ms", elapsed.as_millis());
    std::fs::write(
        dir.join("gradcheck.txt"),
        format!(
            "parameters checked: {}\nmax relative error = {:e}\n",
            report.n_params, report.max_rel_error
        ),
    )
    .map_err(|e| Error::io_msg(format!("cannot write gradcheck.txt: {}", e)))?;
    if report.max_rel_error > tol {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {:e} exceeds {:e}",
            report.max_rel_error, tol
        )));
    }
    println!("gradcheck PASS");
    Ok(())
}

// ---- hpo-sample ----

#[derive(Args)]
struct HpoSampleArgs {
    #[command(flatten)]
    common: Common,
    /// Print the default configuration instead of sampling.
    #[arg(long)]
    defaults: bool,
}

fn hpo_sample(a: &HpoSampleArgs) -> Result<()> {
    let mut raw = a.common.raw("hpo-sample")?;
    if a.defaults {
        raw.set_flag("defaults", "true");
    }
    let mut res = Resolver::new(raw);

    let dir = out_dir(&mut res, "runs/hpo-sample")?;
    let seed = res.get_u64("seed", 0)?;
    let count = res.get_usize("count", 1)?;
    let defaults = res.get_bool("defaults", false)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "hpo-sample", &entries)?;

    let mut out = String::new();
    if defaults {
        out.push_str("# defaults\n");
        for (k, v) in HpSample::default().to_key_values() {
            out.push_str(&format!("{} = {}\n", k, v));
        }
    } else {
        for i in 0..count {
            let draw_seed = derive_seed(seed, &[i as u64]);
            out.push_str(&format!("# sample {} (seed {})\n", i, draw_seed));
            for (k, v) in sample_hyperparams(draw_seed).to_key_values() {
                out.push_str(&format!("{} = {}\n", k, v));
            }
            if i + 1 < count {
                out.push('\n');
            }
        }
    }
    print!("{}", out);
    std::fs::write(dir.join("samples.txt"), out)
        .map_err(|e| Error::io_msg(format!("cannot write samples.txt: {}", e)))?;
    Ok(())
}

// ---- build-cache ----

#[derive(Args)]
struct BuildCacheArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of task CSVs to cache.
    #[arg(long, value_name = "DIR")]
    tasks_dir: Option<PathBuf>,
}

fn build_cache(a: &BuildCacheArgs) -> Result<()> {
    let mut raw = a.common.raw("build-cache")?;
    if let Some(d) = &a.tasks_dir {
        raw.set_flag("tasks_dir", d.display().to_string());
    }
    let mut res = Resolver::new(raw);

    let tasks_dir = res.require_path("tasks_dir")?;
    let dir = out_dir(&mut res, "runs/build-cache")?;
    let plan = CachePlan {
        variant: PsiVariant::parse(&res.get_str("preprocessing", "RX"))?,
        gbdt_rounds: res.get_usize("gbdt_rounds", 100)?,
        gbdt_lr: parse_gbdt_lr(&res.get_str("gbdt_learning_rate", "default"))?,
        seed: res.get_u64("seed", 0)?,
        k_max: res.get_usize("k_max", 16)?,
    };
    let opts = load_opts(&mut res)?;
    setup_threads(&mut res)?;
    let entries = res.finish(&[])?;
    manifest::write(&dir.join("manifest.txt"), "build-cache", &entries)?;

    let files = tasks::list_task_files(&tasks_dir)?;
    let col = prepare_collection(&files, &opts, &plan, &CacheMode::Refresh)?;
    println!("cached {} of {} tasks", col.tasks.len(), files.len());
    Ok(())
}
