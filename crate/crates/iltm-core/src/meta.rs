//! Meta-training of the hypernetwork over a task collection: per step, A
//! independent task draws each contribute a gradient (generation subset →
//! weights → cross-entropy on a disjoint gradient subset, optionally through
//! retrieval), the sum of which drives one optimizer update. Includes
//! meta-validation and best-checkpoint selection.

use crate::error::{Error, Result};
use crate::gbdt::dynamic_fit_split;
use crate::hypernet::{
    combined_logits_on_tape, forward_main_on_tape, generate_on_tape, one_hot_padded,
    put_hypernet_on_tape, FinalPool, GenerationInput, HyperDims, HyperNetParams,
};
use crate::preprocess::{PsiState, PsiVariant};
use crate::projection::{apply_projection, fit_projection};
use crate::rng::{derive_seed, rng_for};
use crate::tabular::{auc, TabularTask, TargetData};
use crate::tape::Tape;
use rand::Rng;
use rayon::prelude::*;
use std::time::Instant;

const TASK_PICK_TAG: u64 = 0x5049434b;
const SUBSET_TAG: u64 = 0x53554253;
const OMEGA_DRAW_TAG: u64 = 0x4f4d4452;
const VAL_TAG: u64 = 0x56414c49;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Plain,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub dims: HyperDims,
    /// Random-feature width of the projection tail refit at every draw.
    pub r: usize,
    pub accumulation: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub batch_gen: usize,
    pub batch_grad: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub val_period: usize,
    pub retrieval: bool,
    pub alpha: f64,
    pub tau: f64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            dims: HyperDims { d_main: 512, h: 1024, k_max: 16 },
            r: crate::projection::DEFAULT_R,
            accumulation: 40,
            learning_rate: 1e-4,
            max_steps: 1000,
            batch_gen: 2048,
            batch_grad: 2048,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            val_period: 100,
            retrieval: true,
            alpha: 0.5,
            tau: 2.0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 {
            return Err(Error::config("accumulation size must be at least 1"));
        }
        if self.batch_gen == 0 || self.batch_grad == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.max_steps == 0 || self.val_period == 0 {
            return Err(Error::config("step counts must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) || self.tau <= 0.0 {
            return Err(Error::config("retrieval parameters out of range"));
        }
        if self.dims.d_main == 0 || self.dims.h == 0 || self.dims.k_max == 0 || self.r == 0 {
            return Err(Error::config("widths must be positive"));
        }
        Ok(())
    }
}

/// A task with its offline-fitted ψ cache and the row pool the hypernetwork
/// draws generation/gradient subsets from.
#[derive(Debug, Clone)]
pub struct MetaTask {
    pub task: TabularTask,
    pub psi: PsiState,
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MetaCollection {
    pub tasks: Vec<MetaTask>,
}

/// Whether a task can join meta-training: `Skip` carries the warning text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetaTaskCheck {
    Ok,
    Skip(String),
}

/// Classification with 2..=k_max classes and at least 4 train rows is
/// trainable; single-class or tiny tasks are skippable; regression and
/// over-wide tasks are hard errors.
pub fn check_meta_task(task: &TabularTask, k_max: usize) -> Result<MetaTaskCheck> {
    if matches!(task.target, TargetData::Reals(_)) {
        return Err(Error::config(format!(
            "meta-training requires classification tasks; '{}' is regression",
            task.name
        )));
    }
    if task.k < 2 {
        return Ok(MetaTaskCheck::Skip(format!(
            "task '{}' has a single class; skipped for meta-training",
            task.name
        )));
    }
    if task.k > k_max {
        return Err(Error::config(format!(
            "task '{}' has {} classes, above the label padding k_max={}",
            task.name, task.k, k_max
        )));
    }
    if task.splits.train.len() < 4 {
        return Ok(MetaTaskCheck::Skip(format!(
            "task '{}' has fewer than 4 train rows; skipped",
            task.name
        )));
    }
    Ok(MetaTaskCheck::Ok)
}

/// Prepare one task: dynamic split of its train rows, ψ constituents fitted
/// on the GBDT half, pool = the complementary half. Returns the split (in
/// train-list positions) alongside so it can be cached.
pub fn prepare_meta_task(
    task: TabularTask,
    variant: PsiVariant,
    gbdt_rounds: usize,
    gbdt_lr: f64,
    task_seed: u64,
) -> Result<(MetaTask, crate::gbdt::FitSplit)> {
    let train = &task.splits.train;
    let split = dynamic_fit_split(train.len(), task_seed);
    let fit_rows: Vec<usize> = split.gbdt_fit.iter().map(|&i| train[i]).collect();
    let pool: Vec<usize> = split.hypernet_pool.iter().map(|&i| train[i]).collect();
    let psi =
        PsiState::fit(variant, &task, &fit_rows, &fit_rows, gbdt_rounds, gbdt_lr, task_seed)?;
    Ok((MetaTask { task, psi, pool }, split))
}

/// Reassemble a prepared task from a cached ψ and split without refitting.
pub fn meta_task_from_cache(
    task: TabularTask,
    psi: PsiState,
    split: &crate::gbdt::FitSplit,
) -> Result<MetaTask> {
    let train = &task.splits.train;
    let mut pool = Vec::with_capacity(split.hypernet_pool.len());
    for &i in &split.hypernet_pool {
        let row = *train.get(i).ok_or_else(|| {
            Error::data(format!(
                "cached split position {} outside the {} train rows of '{}'",
                i,
                train.len(),
                task.name
            ))
        })?;
        pool.push(row);
    }
    Ok(MetaTask { task, psi, pool })
}

impl MetaCollection {
    /// Prepare each task: dynamic split of its train rows, ψ constituents
    /// fitted on the GBDT half, pool = the complementary half. Single-class
    /// tasks are dropped with a warning string instead of failing the build.
    pub fn build(
        tasks: Vec<TabularTask>,
        variant: PsiVariant,
        gbdt_rounds: usize,
        gbdt_lr: f64,
        seed: u64,
        k_max: usize,
    ) -> Result<(MetaCollection, Vec<String>)> {
        let mut out = Vec::new();
        let mut warnings = Vec::new();
        for (idx, task) in tasks.into_iter().enumerate() {
            match check_meta_task(&task, k_max)? {
                MetaTaskCheck::Skip(msg) => {
                    warnings.push(msg);
                    continue;
                }
                MetaTaskCheck::Ok => {}
            }
            let task_seed = derive_seed(seed, &[idx as u64]);
            let (mt, _) = prepare_meta_task(task, variant, gbdt_rounds, gbdt_lr, task_seed)?;
            out.push(mt);
        }
        Ok((MetaCollection { tasks: out }, warnings))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub accumulation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> OptimizerState {
        OptimizerState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub(crate) fn apply_update(
    flat: &mut [f64],
    grad: &[f64],
    opt: &mut OptimizerState,
    kind: OptimizerKind,
    lr: f64,
) {
    match kind {
        OptimizerKind::Plain => {
            for (p, g) in flat.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam => {
            opt.t += 1;
            let bc1 = 1.0 - ADAM_B1.powi(opt.t as i32);
            let bc2 = 1.0 - ADAM_B2.powi(opt.t as i32);
            for i in 0..flat.len() {
                let g = grad[i];
                opt.m[i] = ADAM_B1 * opt.m[i] + (1.0 - ADAM_B1) * g;
                opt.v[i] = ADAM_B2 * opt.v[i] + (1.0 - ADAM_B2) * g * g;
                let mh = opt.m[i] / bc1;
                let vh = opt.v[i] / bc2;
                flat[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Disjoint generation/gradient index draws from a pool of the given size.
/// When the pool cannot fill both batches, generation gets ceil(pool/2) and
/// the gradient subset the rest.
pub(crate) fn draw_subsets(
    pool_len: usize,
    batch_gen: usize,
    batch_grad: usize,
    rng: &mut impl rand::Rng,
) -> (Vec<usize>, Vec<usize>) {
    let (n_gen, n_grad) = if pool_len >= batch_gen + batch_grad {
        (batch_gen, batch_grad)
    } else {
        let g = pool_len.div_ceil(2).min(batch_gen);
        (g, (pool_len - g).min(batch_grad))
    };
    let picked = rand::seq::index::sample(rng, pool_len, n_gen + n_grad).into_vec();
    let gen = picked[..n_gen].to_vec();
    let grad = picked[n_gen..].to_vec();
    (gen, grad)
}

/// One task draw's contribution: (dL/dφ flattened, loss value).
pub(crate) fn task_gradient(
    phi: &HyperNetParams,
    collection: &MetaCollection,
    cfg: &MetaTrainConfig,
    step: usize,
    a: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut rng = rng_for(cfg.seed, &[TASK_PICK_TAG, step as u64, a as u64]);
    let t_idx = rng.gen_range(0..collection.tasks.len());
    let mt = &collection.tasks[t_idx];

    let mut srng = rng_for(cfg.seed, &[SUBSET_TAG, step as u64, a as u64]);
    let (gen_pos, grad_pos) =
        draw_subsets(mt.pool.len(), cfg.batch_gen, cfg.batch_grad, &mut srng);
    if gen_pos.is_empty() || grad_pos.is_empty() {
        return Err(Error::data(format!(
            "task '{}' pool too small to draw disjoint subsets",
            mt.task.name
        )));
    }
    let gen_rows: Vec<usize> = gen_pos.iter().map(|&i| mt.pool[i]).collect();
    let grad_rows: Vec<usize> = grad_pos.iter().map(|&i| mt.pool[i]).collect();

    let psi_gen = mt.psi.transform(&mt.task, &gen_rows)?;
    let psi_grad = mt.psi.transform(&mt.task, &grad_rows)?;
    let omega_seed = derive_seed(cfg.seed, &[OMEGA_DRAW_TAG, step as u64, a as u64]);
    let proj = fit_projection(&psi_gen.view(), cfg.r, cfg.dims.d_main, omega_seed)?;
    let x_gen = apply_projection(&proj, &psi_gen.view())?;
    let x_grad = apply_projection(&proj, &psi_grad.view())?;

    let y_gen = mt.task.labels_of(&gen_rows)?;
    let y_grad = mt.task.labels_of(&grad_rows)?;
    let k = mt.task.k;

    let mut tape = Tape::new();
    let phi_nodes = put_hypernet_on_tape(&mut tape, phi, true);
    let xg = tape.constant(x_gen);
    let block = tape.constant(one_hot_padded(&y_gen, cfg.dims.k_max)?);
    let input = GenerationInput {
        x_gen: xg,
        label_block: block,
        pool_labels: &y_gen,
        final_pool: FinalPool::Classes { labels: &y_gen, k },
    };
    let theta = generate_on_tape(&mut tape, &phi_nodes, &cfg.dims, &input)?;

    let xq = tape.constant(x_grad);
    let (h_q, net_logits) = forward_main_on_tape(&mut tape, &theta, xq);
    let logits = if cfg.retrieval && cfg.alpha > 0.0 {
        let (h_c, _) = forward_main_on_tape(&mut tape, &theta, xg);
        let y_c = one_hot_padded(&y_gen, k)?;
        let ret = crate::hypernet::retrieval_logits_on_tape(&mut tape, h_q, h_c, y_c, cfg.tau);
        combined_logits_on_tape(&mut tape, net_logits, ret, cfg.alpha)
    } else {
        net_logits
    };
    let targets = one_hot_padded(&y_grad, k)?;
    let loss = tape.softmax_cross_entropy(logits, targets);
    let loss_val = tape.value(loss)[[0, 0]];
    tape.backward(loss)?;

    let mut grad = Vec::with_capacity(phi.n_params());
    for (layer_ids, layer) in phi_nodes.layers.iter().zip(&phi.layers) {
        for (id, tensor) in layer_ids.iter().zip(layer.tensors()) {
            match tape.grad(*id) {
                Ok(g) => grad.extend(g.iter()),
                Err(_) => grad.extend(std::iter::repeat(0.0).take(tensor.len())),
            }
        }
    }
    Ok((grad, loss_val))
}

/// One accumulation step: sum the A task gradients (deterministic order) and
/// apply a single optimizer update to φ.
pub fn meta_step(
    phi: &mut HyperNetParams,
    opt: &mut OptimizerState,
    collection: &MetaCollection,
    cfg: &MetaTrainConfig,
    step: usize,
) -> Result<StepReport> {
    cfg.validate()?;
    if collection.tasks.is_empty() {
        return Err(Error::data("meta-training collection is empty"));
    }
    let parts: Vec<Result<(Vec<f64>, f64)>> = (1..=cfg.accumulation)
        .into_par_iter()
        .map(|a| task_gradient(phi, collection, cfg, step, a))
        .collect();
    let mut total = vec![0.0; phi.n_params()];
    let mut loss_sum = 0.0;
    for part in parts {
        let (g, l) = part?;
        for (acc, v) in total.iter_mut().zip(&g) {
            *acc += v;
        }
        loss_sum += l;
    }
    let mut flat = phi.to_flat();
    apply_update(&mut flat, &total, opt, cfg.optimizer, cfg.learning_rate);
    *phi = HyperNetParams::from_flat(cfg.dims, &flat)?;
    Ok(StepReport { loss: loss_sum / cfg.accumulation as f64, accumulation: cfg.accumulation })
}

/// Few-shot score of φ on held-out tasks: one generation batch per task, no
/// fine-tuning, mean AUC over tasks. Deterministic given (φ, cfg).
pub fn meta_validate(
    phi: &HyperNetParams,
    val_tasks: &MetaCollection,
    cfg: &MetaTrainConfig,
) -> Result<f64> {
    if val_tasks.tasks.is_empty() {
        return Err(Error::data("no validation tasks"));
    }
    let scores: Vec<Result<f64>> = val_tasks
        .tasks
        .par_iter()
        .enumerate()
        .map(|(idx, mt)| {
            let mut rng = rng_for(cfg.seed, &[VAL_TAG, idx as u64]);
            let n_gen = cfg.batch_gen.min(mt.pool.len());
            let gen_pos = rand::seq::index::sample(&mut rng, mt.pool.len(), n_gen).into_vec();
            let gen_rows: Vec<usize> = gen_pos.iter().map(|&i| mt.pool[i]).collect();
            let test_rows = &mt.task.splits.test;
            if test_rows.is_empty() {
                return Err(Error::data(format!(
                    "validation task '{}' has no test split",
                    mt.task.name
                )));
            }

            let psi_gen = mt.psi.transform(&mt.task, &gen_rows)?;
            let psi_test = mt.psi.transform(&mt.task, test_rows)?;
            let omega_seed = derive_seed(cfg.seed, &[VAL_TAG, OMEGA_DRAW_TAG, idx as u64]);
            let proj = fit_projection(&psi_gen.view(), cfg.r, cfg.dims.d_main, omega_seed)?;
            let x_gen = apply_projection(&proj, &psi_gen.view())?;
            let x_test = apply_projection(&proj, &psi_test.view())?;

            let y_gen = mt.task.labels_of(&gen_rows)?;
            let y_test = mt.task.labels_of(test_rows)?;
            let k = mt.task.k;

            let theta = crate::hypernet::generate_weights(phi, &x_gen, &y_gen, k)?;
            let (h_q, net_logits) = crate::hypernet::forward_main(&theta, &x_test);
            let logits = if cfg.retrieval && cfg.alpha > 0.0 {
                let (h_c, _) = crate::hypernet::forward_main(&theta, &x_gen);
                let y_c = one_hot_padded(&y_gen, k)?;
                let ret = crate::hypernet::retrieval_logits(&h_q, &h_c, &y_c, cfg.tau)?;
                crate::hypernet::combined_logits(&net_logits, &ret, cfg.alpha)?
            } else {
                net_logits
            };
            auc(&logits.view(), &y_test)
        })
        .collect();
    let mut sum = 0.0;
    for s in &scores {
        match s {
            Ok(v) => sum += v,
            Err(e) => return Err(Error::data(format!("validation failed: {}", e))),
        }
    }
    Ok(sum / scores.len() as f64)
}

/// Index of the best score; ties break toward the earliest entry.
pub fn select_checkpoint(history: &[f64]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::data("no recorded meta-validation scores"));
    }
    let mut best = 0;
    for (i, &s) in history.iter().enumerate() {
        if s > history[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValPoint {
    pub step: usize,
    pub score: f64,
    /// Wall-clock only; excluded from any bit-exactness comparison.
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct MetaRunResult {
    pub best_phi: HyperNetParams,
    pub best_step: usize,
    pub best_score: f64,
    pub final_phi: HyperNetParams,
    pub final_opt: OptimizerState,
    pub history: Vec<ValPoint>,
    pub losses: Vec<f64>,
}

/// Full training loop: initial validation, `max_steps` accumulation steps,
/// periodic validation, best-checkpoint tracking (earliest tie wins).
pub fn run_meta_training(
    collection: &MetaCollection,
    val_tasks: &MetaCollection,
    cfg: &MetaTrainConfig,
    mut on_val: impl FnMut(&ValPoint),
) -> Result<MetaRunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut phi = HyperNetParams::init(cfg.dims, cfg.seed);
    let mut opt = OptimizerState::new(phi.n_params());

    let score0 = meta_validate(&phi, val_tasks, cfg)?;
    let mut history = vec![ValPoint { step: 0, score: score0, wall_ms: start.elapsed().as_millis() as u64 }];
    on_val(&history[0]);
    let mut best_phi = phi.clone();
    let mut best_step = 0;
    let mut best_score = score0;

    let mut losses = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let report = meta_step(&mut phi, &mut opt, collection, cfg, step)?;
        losses.push(report.loss);
        if step % cfg.val_period == 0 || step == cfg.max_steps {
            let score = meta_validate(&phi, val_tasks, cfg)?;
            let point =
                ValPoint { step, score, wall_ms: start.elapsed().as_millis() as u64 };
            on_val(&point);
            history.push(point);
            if score > best_score {
                best_score = score;
                best_step = step;
                best_phi = phi.clone();
            }
        }
    }
    Ok(MetaRunResult {
        best_phi,
        best_step,
        best_score,
        final_phi: phi,
        final_opt: opt,
        history,
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub n_params: usize,
    pub loss: f64,
}

/// Loss values are O(1), so components with gradients below this magnitude
/// are compared in absolute units: central differences of an O(1) function
/// carry ~1e-11 round-off, which would swamp a purely relative comparison on
/// near-zero components while the floor still exposes any real mismatch.
const GRADCHECK_DENOM_FLOOR: f64 = 1e-5;

/// Check the analytic gradient of the full differentiable pipeline
/// (hypernetwork → generated network → retrieval mix → cross-entropy)
/// against central finite differences over every hypernetwork parameter.
/// The start point is the seeded initialization plus a small jitter, which
/// moves every ReLU off the exact kinks the zero-bias initialization puts it
/// on. `mutate` adds a term to the finite-difference objective that the
/// analytic gradient does not see, so a passing checker must then report
/// failure.
pub fn pipeline_gradcheck(
    dims: HyperDims,
    n_gen: usize,
    n_grad: usize,
    k: usize,
    alpha: f64,
    tau: f64,
    seed: u64,
    mutate: bool,
) -> Result<GradcheckReport> {
    if k < 2 || k > dims.k_max {
        return Err(Error::config(format!(
            "gradcheck class count {} outside 2..={}",
            k, dims.k_max
        )));
    }
    let mut rng = rng_for(seed, &[0x47434b]);
    let mut fill = |rows: usize| {
        let mut m = ndarray::Array2::<f64>::zeros((rows, dims.d_main));
        for v in m.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    };
    let x_gen = fill(n_gen);
    let x_grad = fill(n_grad);
    let y_gen: Vec<u32> = (0..n_gen).map(|i| (i % k + 1) as u32).collect();
    let y_grad: Vec<u32> = (0..n_grad).map(|i| ((i + 1) % k + 1) as u32).collect();

    let build = |flat: &[f64]| -> Result<(Tape, crate::hypernet::HyperNodes, crate::tape::NodeId)> {
        let phi = HyperNetParams::from_flat(dims, flat)?;
        let mut tape = Tape::new();
        let nodes = put_hypernet_on_tape(&mut tape, &phi, true);
        let xg = tape.constant(x_gen.clone());
        let block = tape.constant(one_hot_padded(&y_gen, dims.k_max)?);
        let input = GenerationInput {
            x_gen: xg,
            label_block: block,
            pool_labels: &y_gen,
            final_pool: FinalPool::Classes { labels: &y_gen, k },
        };
        let theta = generate_on_tape(&mut tape, &nodes, &dims, &input)?;
        let xq = tape.constant(x_grad.clone());
        let (h_q, net_logits) = forward_main_on_tape(&mut tape, &theta, xq);
        let (h_c, _) = forward_main_on_tape(&mut tape, &theta, xg);
        let y_c = one_hot_padded(&y_gen, k)?;
        let ret = crate::hypernet::retrieval_logits_on_tape(&mut tape, h_q, h_c, y_c, tau);
        let logits = combined_logits_on_tape(&mut tape, net_logits, ret, alpha);
        let targets = one_hot_padded(&y_grad, k)?;
        let loss = tape.softmax_cross_entropy(logits, targets);
        Ok((tape, nodes, loss))
    };

    let phi0 = HyperNetParams::init(dims, derive_seed(seed, &[0x50484930]));
    let mut p0 = phi0.to_flat();
    let mut jitter = rng_for(seed, &[0x4a495454]);
    for v in p0.iter_mut() {
        *v += 0.03 * (jitter.gen::<f64>() * 2.0 - 1.0);
    }
    let (mut tape, nodes, loss) = build(&p0)?;
    let loss_val = tape.value(loss)[[0, 0]];
    tape.backward(loss)?;
    let mut analytic = Vec::with_capacity(p0.len());
    for (layer_ids, layer) in nodes.layers.iter().zip(&phi0.layers) {
        for (id, tensor) in layer_ids.iter().zip(layer.tensors()) {
            match tape.grad(*id) {
                Ok(g) => analytic.extend(g.iter()),
                Err(_) => analytic.extend(std::iter::repeat(0.0).take(tensor.len())),
            }
        }
    }
    if analytic.len() != p0.len() {
        return Err(Error::numeric(format!(
            "gradient length {} does not match parameter count {}",
            analytic.len(),
            p0.len()
        )));
    }
    let wart_index = p0.len() / 3;
    let eval = |p: &[f64]| -> Result<f64> {
        let (t, _, l) = build(p)?;
        let mut v = t.value(l)[[0, 0]];
        if mutate {
            v += 1e-3 * p[wart_index];
        }
        Ok(v)
    };

    // A parameter whose ±step window spans a ReLU crossing measures a secant
    // across the kink, not the local derivative. Shrinking the step moves the
    // window off the crossing, so such artifacts vanish under refinement
    // while genuine gradient mismatches persist at every step.
    let mut work = p0.clone();
    let mut worst = 0.0f64;
    for i in 0..p0.len() {
        let mut err_i = f64::INFINITY;
        let mut step = 1e-5;
        for _ in 0..4 {
            let orig = work[i];
            work[i] = orig + step;
            let fp = eval(&work)?;
            work[i] = orig - step;
            let fm = eval(&work)?;
            work[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let denom = fd.abs().max(analytic[i].abs()).max(GRADCHECK_DENOM_FLOOR);
            err_i = err_i.min((fd - analytic[i]).abs() / denom);
            if err_i < 1e-6 {
                break;
            }
            step /= 4.0;
        }
        worst = worst.max(err_i);
    }
    Ok(GradcheckReport { max_rel_error: worst, n_params: p0.len(), loss: loss_val })
}

/// A restorable training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phi: HyperNetParams,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub val_history: Vec<(u64, f64)>,
    pub config: MetaTrainConfig,
}
