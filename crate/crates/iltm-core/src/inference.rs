//! Fitting on a new task with a meta-trained hypernetwork: per-member
//! feature bagging, embedding-stage fitting, weight generation, optional
//! fine-tuning, retrieval context construction, probability-space
//! ensembling, and the single-output regression adaptation.

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::gbdt::{self, dynamic_fit_split, FitSplit, FitTarget, GbdtModel};
use crate::hypernet::{
    combined_logits, forward_main, generate_on_tape, generate_weights, one_hot_padded,
    put_hypernet_on_tape, retrieval_logits, FinalPool, GenerationInput, HyperNetParams,
    MainNetParams,
};
use crate::meta::{apply_update, OptimizerKind, OptimizerState};
use crate::preprocess::{fit_robust, PsiState, PsiVariant};
use crate::projection::{apply_projection, fit_projection, ProjectionParams};
use crate::rng::{derive_seed, rng_for};
use crate::tabular::{ColumnData, TabularTask, TargetKind, CAT_MISSING};
use crate::tape::Tape;
use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use std::path::Path;

pub const DEFAULT_CONTEXT_CAP: usize = 10_000;
pub const BAG_FRACTION: f64 = 0.8;

const SPLIT_TAG: u64 = 0x53504c54;
const GBDT_TAG: u64 = 0x47424454;
const MEMBER_TAG: u64 = 0x4d454d42;
const BAG_TAG: u64 = 0x4241474d;
const GEN_TAG: u64 = 0x47454e53;
const OMEGA_INF_TAG: u64 = 0x4f4d4749;
const CTX_TAG: u64 = 0x43545854;
const FT_TAG: u64 = 0x46545345;
const INIT_TAG: u64 = 0x494e4954;
const HOLD_TAG: u64 = 0x484f4c44;
const BOOT_TAG: u64 = 0x424f4f54;
const STEP_TAG: u64 = 0x46545350;
const DROP_TAG: u64 = 0x46544452;

/// Fine-tuning schedule for a generated main network.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub dropout: f64,
    /// Evaluations on the held-out slice without strict improvement before
    /// stopping.
    pub patience: usize,
    /// Resample the fitting rows with replacement instead of using them all.
    pub bootstrap: bool,
}

impl Default for FineTuneConfig {
    fn default() -> FineTuneConfig {
        FineTuneConfig {
            learning_rate: 1e-4,
            max_steps: 1024,
            dropout: 0.0,
            patience: 16,
            bootstrap: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("fine-tune learning rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        Ok(())
    }
}

/// Everything needed to fit an ensemble on one task.
/// Where each member's starting weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// Weights produced by the hypernetwork from the generation batch.
    Generated,
    /// Random weights, the scratch-training baseline.
    Random,
}

impl WeightInit {
    pub fn parse(s: &str) -> Result<WeightInit> {
        match s {
            "generated" => Ok(WeightInit::Generated),
            "random" => Ok(WeightInit::Random),
            other => Err(Error::config(format!(
                "weight_init must be 'generated' or 'random', got '{}'",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightInit::Generated => "generated",
            WeightInit::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTaskConfig {
    pub variant: PsiVariant,
    /// Random-feature width of the embedding tail.
    pub r: usize,
    /// Generation subset size and fine-tune mini-batch cap.
    pub batch_size: usize,
    pub n_ens: usize,
    pub feature_bagging: bool,
    pub fine_tune: Option<FineTuneConfig>,
    /// Fit the GBDT on the entire train split instead of the dynamic half.
    pub gbdt_split_entire: bool,
    /// Refit the GBDT inside every ensemble member instead of sharing one.
    pub gbdt_refit_per_member: bool,
    pub gbdt_rounds: usize,
    /// `None` keeps the variant's own learning rate.
    pub gbdt_learning_rate: Option<f64>,
    pub retrieval: bool,
    pub alpha: f64,
    pub tau: f64,
    pub context_cap: usize,
    /// Aggregate standardized neighbor targets for regression tasks.
    pub regression_retrieval: bool,
    pub weight_init: WeightInit,
    pub seed: u64,
}

impl Default for FitTaskConfig {
    fn default() -> FitTaskConfig {
        FitTaskConfig {
            variant: PsiVariant::RX,
            r: crate::projection::DEFAULT_R,
            batch_size: 2048,
            n_ens: 8,
            feature_bagging: true,
            fine_tune: Some(FineTuneConfig::default()),
            gbdt_split_entire: false,
            gbdt_refit_per_member: false,
            gbdt_rounds: 100,
            gbdt_learning_rate: None,
            retrieval: true,
            alpha: 0.5,
            tau: 2.0,
            context_cap: DEFAULT_CONTEXT_CAP,
            regression_retrieval: false,
            weight_init: WeightInit::Generated,
            seed: 0,
        }
    }
}

impl FitTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ens == 0 {
            return Err(Error::config("ensemble size must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.r == 0 {
            return Err(Error::config("random-feature width must be >= 1"));
        }
        if self.gbdt_rounds == 0 {
            return Err(Error::config("GBDT rounds must be >= 1"));
        }
        if let Some(lr) = self.gbdt_learning_rate {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::config("GBDT learning rate must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("retrieval weight must lie in [0, 1]"));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config("retrieval temperature must be positive"));
        }
        if self.context_cap == 0 {
            return Err(Error::config("context cap must be >= 1"));
        }
        if let Some(ft) = &self.fine_tune {
            ft.validate()?;
        }
        Ok(())
    }

    fn gbdt_lr(&self) -> f64 {
        self.gbdt_learning_rate.unwrap_or_else(|| {
            self.variant
                .base_gbdt_config()
                .map_or(0.1, |c| c.learning_rate)
        })
    }
}

/// Frozen retrieval context: hidden states and labels of training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalContext {
    pub h: Array2<f64>,
    /// One-hot labels (n×k) for classification; standardized targets (n×1)
    /// for regression.
    pub y: Array2<f64>,
}

/// One fitted ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPredictor {
    pub psi: PsiState,
    pub projection: ProjectionParams,
    pub theta: MainNetParams,
    pub context: Option<RetrievalContext>,
    /// Raw feature columns this member sees; blanked columns read as missing.
    pub bag_mask: Vec<bool>,
    /// Target mean and scale used to de-standardize regression outputs.
    pub target_scale: Option<(f64, f64)>,
    pub seed: u64,
}

/// A fitted task model: members plus the shared prediction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<FittedPredictor>,
    /// Class count; 0 for regression.
    pub k: usize,
    pub class_names: Vec<String>,
    pub alpha: f64,
    pub tau: f64,
    pub retrieval: bool,
    pub regression_retrieval: bool,
}

/// Outcome of one fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
}

/// Fine-tuning targets, already in model space (regression standardized).
#[derive(Debug, Clone)]
pub enum FtTargets<'a> {
    Classes { y: &'a [u32], k: usize },
    Reals(&'a [f64]),
}

/// The raw columns member `member` of a run seeded with `seed` sees: a fixed
/// fraction drawn uniformly without replacement, at least one column.
pub fn bag_mask(n_features: usize, seed: u64, member: usize) -> Vec<bool> {
    let keep = ((BAG_FRACTION * n_features as f64).ceil() as usize)
        .max(1)
        .min(n_features);
    let mut mask = vec![false; n_features];
    if keep == n_features {
        mask.iter_mut().for_each(|m| *m = true);
        return mask;
    }
    let mut rng = rng_for(seed, &[BAG_TAG, member as u64]);
    for idx in rand::seq::index::sample(&mut rng, n_features, keep) {
        mask[idx] = true;
    }
    mask
}

/// Copy of the task with bagged-out columns blanked to missing, keeping the
/// feature width stable so one GBDT can serve differently bagged members.
fn masked_task(task: &TabularTask, mask: &[bool]) -> TabularTask {
    let n = task.n_rows();
    let columns = task
        .columns
        .iter()
        .zip(mask)
        .map(|(col, &keep)| {
            if keep {
                col.clone()
            } else {
                match col {
                    ColumnData::Numeric(_) => ColumnData::Numeric(vec![f64::NAN; n]),
                    ColumnData::Categorical(_) => ColumnData::Categorical(vec![CAT_MISSING; n]),
                }
            }
        })
        .collect();
    TabularTask::new(
        task.name.clone(),
        task.schema.clone(),
        columns,
        task.target.clone(),
        task.splits.clone(),
    )
    .expect("masking preserves task validity")
}

fn sorted_sample(rng: &mut impl Rng, from: usize, take: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, from, take).into_iter().collect();
    idx.sort_unstable();
    idx
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn ce_loss(logits: &Array2<f64>, y: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(y) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label as usize - 1];
    }
    total / y.len() as f64
}

fn mse_loss(pred: &Array2<f64>, y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.column(0).iter().zip(y) {
        let d = p - t;
        total += d * d;
    }
    total / y.len() as f64
}

fn heldout_loss(theta: &MainNetParams, x: &Array2<f64>, targets: &FtTargets) -> f64 {
    let (_, out) = forward_main(theta, x);
    match targets {
        FtTargets::Classes { y, .. } => ce_loss(&out, y),
        FtTargets::Reals(y) => mse_loss(&out, y),
    }
}

fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Gradient steps on the generated weights only, with a 10% held-out slice
/// for early stopping; the returned weights are the best seen on that slice,
/// the starting point included.
pub fn fine_tune(
    theta: &MainNetParams,
    x: &Array2<f64>,
    targets: &FtTargets,
    cfg: &FineTuneConfig,
    batch_cap: usize,
    seed: u64,
) -> Result<(MainNetParams, FtReport)> {
    cfg.validate()?;
    let n = x.nrows();
    let len = match targets {
        FtTargets::Classes { y, .. } => y.len(),
        FtTargets::Reals(y) => y.len(),
    };
    if len != n {
        return Err(Error::data("fine-tune target length mismatch"));
    }
    if n < 2 || cfg.max_steps == 0 {
        return Ok((
            theta.clone(),
            FtReport { steps: 0, initial_loss: f64::NAN, best_loss: f64::NAN },
        ));
    }

    let held_n = ((n + 9) / 10).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng_for(seed, &[HOLD_TAG]));
    let held: Vec<usize> = order[..held_n].to_vec();
    let mut fit_rows: Vec<usize> = order[held_n..].to_vec();
    fit_rows.sort_unstable();
    if cfg.bootstrap {
        let mut rng = rng_for(seed, &[BOOT_TAG]);
        fit_rows = (0..fit_rows.len())
            .map(|_| fit_rows[rng.gen_range(0..fit_rows.len())])
            .collect();
    }

    let x_held = select_rows(x, &held);
    let targets_of = |rows: &[usize]| match targets {
        FtTargets::Classes { y, .. } => {
            FtTargetsOwned::Classes(rows.iter().map(|&i| y[i]).collect())
        }
        FtTargets::Reals(y) => FtTargetsOwned::Reals(rows.iter().map(|&i| y[i]).collect()),
    };
    let held_targets = targets_of(&held);

    let mut current = theta.clone();
    let initial_loss = heldout_loss(&current, &x_held, &held_targets.borrow(targets));
    let mut best = current.clone();
    let mut best_loss = initial_loss;
    let mut patience_left = cfg.patience;
    let mut opt = OptimizerState::new(current.to_flat().len());
    let batch = batch_cap.min(fit_rows.len()).max(1);
    let d = current.d();
    let k_out = current.k();
    let mut steps = 0;

    for step in 0..cfg.max_steps {
        let rows: Vec<usize> = if batch == fit_rows.len() {
            fit_rows.clone()
        } else {
            let mut rng = rng_for(seed, &[STEP_TAG, step as u64]);
            sorted_sample(&mut rng, fit_rows.len(), batch)
                .into_iter()
                .map(|i| fit_rows[i])
                .collect()
        };
        let xb = select_rows(x, &rows);
        let batch_targets = targets_of(&rows);

        let mut tape = Tape::new();
        let nodes = crate::hypernet::put_main_net_on_tape(&mut tape, &current, true);
        let xn = tape.constant(xb);
        let a1 = tape.affine(xn, nodes.w1, nodes.b1);
        let a1 = tape.relu(a1);
        let a1 = tape.dropout(a1, cfg.dropout, derive_seed(seed, &[DROP_TAG, step as u64, 1]));
        let pre2 = tape.affine(a1, nodes.w2, nodes.b2);
        let act2 = tape.relu(pre2);
        let act2 = tape.dropout(act2, cfg.dropout, derive_seed(seed, &[DROP_TAG, step as u64, 2]));
        let h = tape.add(act2, xn);
        let out = tape.affine(h, nodes.w3, nodes.b3);
        let loss = match (&batch_targets, targets) {
            (FtTargetsOwned::Classes(y), FtTargets::Classes { k, .. }) => {
                tape.softmax_cross_entropy(out, one_hot_padded(y, *k)?)
            }
            (FtTargetsOwned::Reals(y), _) => {
                let t = Array2::from_shape_vec((y.len(), 1), y.clone()).unwrap();
                tape.mse_loss(out, t)
            }
            _ => unreachable!(),
        };
        tape.backward(loss)?;

        let mut grad = Vec::with_capacity(opt.m.len());
        for id in [nodes.w1, nodes.b1, nodes.w2, nodes.b2, nodes.w3, nodes.b3] {
            grad.extend(tape.grad(id)?.iter());
        }
        let mut flat = current.to_flat();
        apply_update(&mut flat, &grad, &mut opt, OptimizerKind::Adam, cfg.learning_rate);
        current = MainNetParams::from_flat(d, k_out, &flat)?;
        steps = step + 1;

        let loss_h = heldout_loss(&current, &x_held, &held_targets.borrow(targets));
        if loss_h < best_loss {
            best_loss = loss_h;
            best = current.clone();
            patience_left = cfg.patience;
        } else {
            patience_left -= 1;
            if patience_left == 0 {
                break;
            }
        }
    }

    Ok((best, FtReport { steps, initial_loss, best_loss }))
}

enum FtTargetsOwned {
    Classes(Vec<u32>),
    Reals(Vec<f64>),
}

impl FtTargetsOwned {
    fn borrow<'a>(&'a self, template: &FtTargets) -> FtTargets<'a> {
        match (self, template) {
            (FtTargetsOwned::Classes(y), FtTargets::Classes { k, .. }) => {
                FtTargets::Classes { y, k: *k }
            }
            (FtTargetsOwned::Reals(y), _) => FtTargets::Reals(y),
            _ => unreachable!(),
        }
    }
}

/// Main-network weights for a single standardized output, conditioned on the
/// generation batch with its target in place of the label block; per-sample
/// final-layer heads are averaged over the whole batch.
pub fn adapt_for_regression(
    phi: &HyperNetParams,
    x_gen: &Array2<f64>,
    y_std: &[f64],
) -> Result<MainNetParams> {
    if y_std.len() != x_gen.nrows() {
        return Err(Error::data("regression adaptation target length mismatch"));
    }
    let dims = phi.dims;
    let mut block = Array2::zeros((y_std.len(), dims.k_max));
    for (i, &v) in y_std.iter().enumerate() {
        block[[i, 0]] = v;
    }
    let pool_labels = vec![1u32; y_std.len()];
    let mut tape = Tape::new();
    let phi_nodes = put_hypernet_on_tape(&mut tape, phi, false);
    let x = tape.constant(x_gen.clone());
    let block = tape.constant(block);
    let input = GenerationInput {
        x_gen: x,
        label_block: block,
        pool_labels: &pool_labels,
        final_pool: FinalPool::BatchMean,
    };
    let nodes = generate_on_tape(&mut tape, &phi_nodes, &dims, &input)?;
    Ok(crate::hypernet::main_net_from_tape(&tape, &nodes))
}

/// Randomly initialized main-network weights, the scratch-training baseline.
pub fn random_main_net(d: usize, k: usize, seed: u64) -> MainNetParams {
    let mut theta = MainNetParams::zeros(d, k);
    let hidden_sd = (2.0 / d as f64).sqrt();
    let out_sd = (1.0 / d as f64).sqrt();
    let fill = |t: &mut Array2<f64>, sd: f64, tag: u64| {
        let mut rng = rng_for(seed, &[tag]);
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, sd).unwrap();
        t.mapv_inplace(|_| normal.sample(&mut rng));
    };
    fill(&mut theta.w1, hidden_sd, 1);
    fill(&mut theta.w2, hidden_sd, 2);
    fill(&mut theta.w3, out_sd, 3);
    theta
}

fn mean_and_scale(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = var.sqrt();
    (mean, if scale > 0.0 { scale } else { 1.0 })
}

struct MemberPlan<'a> {
    phi: &'a HyperNetParams,
    task: &'a TabularTask,
    cfg: &'a FitTaskConfig,
    shared_gbdt: Option<&'a GbdtModel>,
    gbdt_rows: &'a [usize],
    pool: &'a [usize],
    train: &'a [usize],
}

fn fit_member(plan: &MemberPlan, member: usize) -> Result<FittedPredictor> {
    let cfg = plan.cfg;
    let task = plan.task;
    let member_seed = derive_seed(cfg.seed, &[MEMBER_TAG, member as u64]);

    let mask = if cfg.feature_bagging {
        bag_mask(task.n_features(), cfg.seed, member)
    } else {
        vec![true; task.n_features()]
    };
    let view_store;
    let view: &TabularTask = if mask.iter().all(|&m| m) {
        task
    } else {
        view_store = masked_task(task, &mask);
        &view_store
    };

    let psi = if let Some(shared) = plan.shared_gbdt {
        let robust = if cfg.variant.uses_robust() {
            Some(fit_robust(view, plan.gbdt_rows)?)
        } else {
            None
        };
        PsiState { variant: cfg.variant, robust, gbdt: Some(shared.clone()) }
    } else {
        PsiState::fit(
            cfg.variant,
            view,
            plan.gbdt_rows,
            plan.gbdt_rows,
            cfg.gbdt_rounds,
            cfg.gbdt_lr(),
            derive_seed(member_seed, &[GBDT_TAG]),
        )?
    };

    let take = cfg.batch_size.min(plan.pool.len());
    let gen_rows: Vec<usize> = if take == plan.pool.len() {
        plan.pool.to_vec()
    } else {
        let mut rng = rng_for(member_seed, &[GEN_TAG]);
        sorted_sample(&mut rng, plan.pool.len(), take)
            .into_iter()
            .map(|i| plan.pool[i])
            .collect()
    };

    let psi_gen = psi.transform(view, &gen_rows)?;
    let projection = fit_projection(
        &psi_gen.view(),
        cfg.r,
        plan.phi.dims.d_main,
        derive_seed(member_seed, &[OMEGA_INF_TAG]),
    )?;
    let x_gen = apply_projection(&projection, &psi_gen.view())?;

    let regression = task.is_regression();
    let d_main = plan.phi.dims.d_main;
    let (mut theta, target_scale) = if regression {
        let y_gen = task.reals_of(&gen_rows)?;
        let (mu, sigma) = mean_and_scale(&y_gen);
        let theta = match cfg.weight_init {
            WeightInit::Generated => {
                let y_std: Vec<f64> = y_gen.iter().map(|v| (v - mu) / sigma).collect();
                adapt_for_regression(plan.phi, &x_gen, &y_std)?
            }
            WeightInit::Random => {
                random_main_net(d_main, 1, derive_seed(member_seed, &[INIT_TAG]))
            }
        };
        (theta, Some((mu, sigma)))
    } else {
        let theta = match cfg.weight_init {
            WeightInit::Generated => {
                let y_gen = task.labels_of(&gen_rows)?;
                generate_weights(plan.phi, &x_gen, &y_gen, task.k)?
            }
            WeightInit::Random => {
                random_main_net(d_main, task.k, derive_seed(member_seed, &[INIT_TAG]))
            }
        };
        (theta, None)
    };

    let context_wanted = if regression { cfg.regression_retrieval } else { cfg.retrieval };
    let need_train = cfg.fine_tune.is_some() || context_wanted;
    let x_train = if need_train {
        let psi_train = psi.transform(view, plan.train)?;
        Some(apply_projection(&projection, &psi_train.view())?)
    } else {
        None
    };

    if let Some(ft) = &cfg.fine_tune {
        let x_all = x_train.as_ref().unwrap();
        let ft_seed = derive_seed(member_seed, &[FT_TAG]);
        theta = if regression {
            let (mu, sigma) = target_scale.unwrap();
            let y_all = task.reals_of(plan.train)?;
            let y_std: Vec<f64> = y_all.iter().map(|v| (v - mu) / sigma).collect();
            fine_tune(&theta, x_all, &FtTargets::Reals(&y_std), ft, cfg.batch_size, ft_seed)?.0
        } else {
            let y_all = task.labels_of(plan.train)?;
            fine_tune(
                &theta,
                x_all,
                &FtTargets::Classes { y: &y_all, k: task.k },
                ft,
                cfg.batch_size,
                ft_seed,
            )?
            .0
        };
    }

    let context = if context_wanted {
        let x_all = x_train.as_ref().unwrap();
        let positions: Vec<usize> = if plan.train.len() <= cfg.context_cap {
            (0..plan.train.len()).collect()
        } else {
            let mut rng = rng_for(member_seed, &[CTX_TAG]);
            sorted_sample(&mut rng, plan.train.len(), cfg.context_cap)
        };
        let ctx_rows: Vec<usize> = positions.iter().map(|&p| plan.train[p]).collect();
        let (h, _) = forward_main(&theta, &select_rows(x_all, &positions));
        let y = if regression {
            let (mu, sigma) = target_scale.unwrap();
            let y_ctx = task.reals_of(&ctx_rows)?;
            Array2::from_shape_vec(
                (y_ctx.len(), 1),
                y_ctx.iter().map(|v| (v - mu) / sigma).collect(),
            )
            .unwrap()
        } else {
            one_hot_padded(&task.labels_of(&ctx_rows)?, task.k)?
        };
        Some(RetrievalContext { h, y })
    } else {
        None
    };

    Ok(FittedPredictor {
        psi,
        projection,
        theta,
        context,
        bag_mask: mask,
        target_scale,
        seed: member_seed,
    })
}

/// Fit an ensemble on the task's train split with meta-trained weights.
pub fn fit_task(
    phi: &HyperNetParams,
    task: &TabularTask,
    cfg: &FitTaskConfig,
) -> Result<EnsembleModel> {
    cfg.validate()?;
    let train = task.splits.train.clone();
    if train.is_empty() {
        return Err(Error::data(format!("task '{}' has an empty train split", task.name)));
    }
    let regression = task.is_regression();
    if !regression {
        if task.k < 2 {
            return Err(Error::config("classification fitting needs at least two classes"));
        }
        if task.k > phi.dims.k_max {
            return Err(Error::config(format!(
                "task has {} classes but the hypernetwork supports at most {}",
                task.k, phi.dims.k_max
            )));
        }
    }

    let split = if cfg.gbdt_split_entire {
        FitSplit { gbdt_fit: train.clone(), hypernet_pool: train.clone() }
    } else {
        let rel = dynamic_fit_split(train.len(), derive_seed(cfg.seed, &[SPLIT_TAG]));
        FitSplit {
            gbdt_fit: rel.gbdt_fit.iter().map(|&i| train[i]).collect(),
            hypernet_pool: rel.hypernet_pool.iter().map(|&i| train[i]).collect(),
        }
    };

    let shared_gbdt = if cfg.variant.uses_gbdt() && !cfg.gbdt_refit_per_member {
        let base = cfg.variant.base_gbdt_config().unwrap();
        let gcfg = crate::gbdt::GbdtConfig {
            max_rounds: cfg.gbdt_rounds,
            learning_rate: cfg.gbdt_lr(),
            ..base
        };
        let x = task.numeric_view(&split.gbdt_fit);
        let model = match &task.target {
            crate::tabular::TargetData::Classes(y) => {
                let sub: Vec<u32> = split.gbdt_fit.iter().map(|&r| y[r]).collect();
                gbdt::fit_gbdt(
                    &x.view(),
                    &FitTarget::Classes { y: &sub, k: task.k },
                    &gcfg,
                    derive_seed(cfg.seed, &[GBDT_TAG]),
                )?
            }
            crate::tabular::TargetData::Reals(y) => {
                let sub: Vec<f64> = split.gbdt_fit.iter().map(|&r| y[r]).collect();
                gbdt::fit_gbdt(
                    &x.view(),
                    &FitTarget::Reals(&sub),
                    &gcfg,
                    derive_seed(cfg.seed, &[GBDT_TAG]),
                )?
            }
        };
        Some(model)
    } else {
        None
    };

    let plan = MemberPlan {
        phi,
        task,
        cfg,
        shared_gbdt: shared_gbdt.as_ref(),
        gbdt_rows: &split.gbdt_fit,
        pool: &split.hypernet_pool,
        train: &train,
    };
    let members: Vec<FittedPredictor> = (0..cfg.n_ens)
        .into_par_iter()
        .map(|m| fit_member(&plan, m))
        .collect::<Result<Vec<_>>>()?;

    let class_names = match &task.schema.target {
        TargetKind::Classification(names) => names.clone(),
        TargetKind::Regression => Vec::new(),
    };
    Ok(EnsembleModel {
        members,
        k: if regression { 0 } else { task.k },
        class_names,
        alpha: cfg.alpha,
        tau: cfg.tau,
        retrieval: cfg.retrieval,
        regression_retrieval: cfg.regression_retrieval,
    })
}

fn member_matrix(member: &FittedPredictor, task: &TabularTask, rows: &[usize]) -> Result<Array2<f64>> {
    let view_store;
    let view: &TabularTask = if member.bag_mask.iter().all(|&m| m) {
        task
    } else {
        view_store = masked_task(task, &member.bag_mask);
        &view_store
    };
    let psi_x = member.psi.transform(view, rows)?;
    apply_projection(&member.projection, &psi_x.view())
}

fn member_class_probs(
    model: &EnsembleModel,
    member: &FittedPredictor,
    task: &TabularTask,
    rows: &[usize],
) -> Result<Array2<f64>> {
    let x = member_matrix(member, task, rows)?;
    let (h, net) = forward_main(&member.theta, &x);
    let logits = match (&member.context, model.retrieval) {
        (Some(ctx), true) => {
            let ret = retrieval_logits(&h, &ctx.h, &ctx.y, model.tau)?;
            combined_logits(&net, &ret, model.alpha)?
        }
        _ => net,
    };
    Ok(softmax_rows(&logits))
}

fn member_reals(
    model: &EnsembleModel,
    member: &FittedPredictor,
    task: &TabularTask,
    rows: &[usize],
) -> Result<Vec<f64>> {
    let x = member_matrix(member, task, rows)?;
    let (h, net) = forward_main(&member.theta, &x);
    let (mu, sigma) = member.target_scale.unwrap_or((0.0, 1.0));
    let standardized: Vec<f64> = match (&member.context, model.regression_retrieval) {
        (Some(ctx), true) => {
            let nq = row_normalized_rows(&h);
            let nc = row_normalized_rows(&ctx.h);
            let s = nq.dot(&nc.t());
            net.column(0)
                .iter()
                .zip(s.rows())
                .map(|(&o_net, sim)| {
                    let den: f64 = sim.iter().sum();
                    if den.abs() < 1e-12 {
                        return o_net;
                    }
                    let num: f64 =
                        sim.iter().zip(ctx.y.column(0)).map(|(&w, &t)| w * t).sum::<f64>()
                            / model.tau;
                    (1.0 - model.alpha) * o_net + model.alpha * (num / den)
                })
                .collect()
        }
        _ => net.column(0).to_vec(),
    };
    Ok(standardized.iter().map(|v| v * sigma + mu).collect())
}

fn row_normalized_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Class probabilities averaged over members; identical members collapse to
/// a single member's output exactly.
pub fn predict_proba(
    model: &EnsembleModel,
    task: &TabularTask,
    rows: &[usize],
) -> Result<Array2<f64>> {
    if model.k == 0 {
        return Err(Error::config("probability prediction asked of a regression model"));
    }
    let per_member: Vec<Array2<f64>> = model
        .members
        .par_iter()
        .map(|m| member_class_probs(model, m, task, rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_matrices(per_member))
}

/// De-standardized outputs averaged over members.
pub fn predict_reals(
    model: &EnsembleModel,
    task: &TabularTask,
    rows: &[usize],
) -> Result<Vec<f64>> {
    if model.k != 0 {
        return Err(Error::config("real-valued prediction asked of a classification model"));
    }
    let per_member: Vec<Vec<f64>> = model
        .members
        .par_iter()
        .map(|m| member_reals(model, m, task, rows))
        .collect::<Result<Vec<_>>>()?;
    if per_member.iter().skip(1).all(|v| v == &per_member[0]) {
        return Ok(per_member.into_iter().next().unwrap());
    }
    let n = per_member[0].len();
    let count = per_member.len() as f64;
    let mut out = vec![0.0; n];
    for v in &per_member {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= count);
    Ok(out)
}

fn average_matrices(mats: Vec<Array2<f64>>) -> Array2<f64> {
    let identical = mats
        .iter()
        .skip(1)
        .all(|m| m.iter().zip(mats[0].iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    if identical {
        return mats.into_iter().next().unwrap();
    }
    let count = mats.len() as f64;
    let mut sum = mats[0].clone();
    for m in &mats[1..] {
        sum += m;
    }
    sum.mapv_inplace(|v| v / count);
    sum
}

// ---- serialization ----

pub fn ensemble_to_container(model: &EnsembleModel) -> Container {
    let mut c = Container::new();
    c.put_meta("kind", "ensemble");
    c.put_meta("k", model.k);
    c.put_meta("n_members", model.members.len());
    c.put_meta("alpha", model.alpha);
    c.put_meta("tau", model.tau);
    c.put_meta("retrieval", model.retrieval);
    c.put_meta("regression_retrieval", model.regression_retrieval);
    for (i, name) in model.class_names.iter().enumerate() {
        c.put_meta(&format!("class_name.{}", i), name);
    }
    for (i, m) in model.members.iter().enumerate() {
        let p = format!("member{}.", i);
        c.put_meta(&format!("{}seed", p), m.seed);
        container::put_psi(&mut c, &format!("{}psi.", p), &m.psi);
        container::put_projection(&mut c, &format!("{}proj.", p), &m.projection);
        container::put_main_net(&mut c, &format!("{}theta.", p), &m.theta);
        let mask: Vec<f64> = m.bag_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        c.put_row(&format!("{}bag_mask", p), &mask);
        if let Some((mu, sigma)) = m.target_scale {
            c.put_row(&format!("{}target_scale", p), &[mu, sigma]);
        }
        if let Some(ctx) = &m.context {
            c.put_tensor(&format!("{}context.h", p), ctx.h.clone());
            c.put_tensor(&format!("{}context.y", p), ctx.y.clone());
        }
    }
    c
}

pub fn ensemble_from_container(c: &Container) -> Result<EnsembleModel> {
    if c.meta("kind") != Some("ensemble") {
        return Err(Error::format("container is not a fitted ensemble"));
    }
    let k = c.meta_usize("k")?;
    let n_members = c.meta_usize("n_members")?;
    let mut class_names = Vec::new();
    while let Some(name) = c.meta(&format!("class_name.{}", class_names.len())) {
        class_names.push(name.to_string());
    }
    let mut members = Vec::with_capacity(n_members);
    for i in 0..n_members {
        let p = format!("member{}.", i);
        let bag_mask: Vec<bool> = c
            .require_row(&format!("{}bag_mask", p))?
            .iter()
            .map(|&v| v != 0.0)
            .collect();
        let target_scale = match c.tensor(&format!("{}target_scale", p)) {
            Some(t) => Some((t[[0, 0]], t[[0, 1]])),
            None => None,
        };
        let context = match (
            c.tensor(&format!("{}context.h", p)),
            c.tensor(&format!("{}context.y", p)),
        ) {
            (Some(h), Some(y)) => Some(RetrievalContext { h: h.clone(), y: y.clone() }),
            _ => None,
        };
        members.push(FittedPredictor {
            psi: container::get_psi(c, &format!("{}psi.", p))?,
            projection: container::get_projection(c, &format!("{}proj.", p))?,
            theta: container::get_main_net(c, &format!("{}theta.", p))?,
            context,
            bag_mask,
            target_scale,
            seed: c.meta_u64(&format!("{}seed", p))?,
        });
    }
    Ok(EnsembleModel {
        members,
        k,
        class_names,
        alpha: c.meta_f64("alpha")?,
        tau: c.meta_f64("tau")?,
        retrieval: c.meta_bool("retrieval")?,
        regression_retrieval: c.meta_bool("regression_retrieval")?,
    })
}

pub fn save_ensemble(model: &EnsembleModel, path: &Path) -> Result<()> {
    ensemble_to_container(model).write(path)
}

pub fn load_ensemble(path: &Path) -> Result<EnsembleModel> {
    ensemble_from_container(&Container::read(path)?)
}

// ---- prediction output ----

/// CSV with a row id column and one probability column per class.
pub fn write_class_predictions_csv(
    path: &Path,
    probs: &Array2<f64>,
    class_names: &[String],
) -> Result<()> {
    if probs.ncols() != class_names.len() {
        return Err(Error::data("probability width does not match class names"));
    }
    let mut out = String::from("row");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, row) in probs.rows().into_iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// CSV with a row id column and one real-valued prediction column.
pub fn write_real_predictions_csv(path: &Path, preds: &[f64]) -> Result<()> {
    let mut out = String::from("row,prediction\n");
    for (i, v) in preds.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i, v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::HyperDims;
    use crate::tabular::{ColumnKind, ColumnSpec, Schema, Splits, TargetData};

    fn small_dims() -> HyperDims {
        HyperDims { d_main: 6, h: 8, k_max: 4 }
    }

    fn small_cfg() -> FitTaskConfig {
        FitTaskConfig {
            variant: PsiVariant::RX,
            r: 32,
            batch_size: 64,
            n_ens: 2,
            feature_bagging: true,
            fine_tune: None,
            gbdt_rounds: 4,
            retrieval: true,
            context_cap: 80,
            seed: 11,
            ..FitTaskConfig::default()
        }
    }

    fn class_task(n: usize, seed: u64) -> TabularTask {
        let mut rng = rng_for(seed, &[77]);
        let mut cols = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        let mut cat = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let class = rng.gen_range(0..3u32);
            let center = class as f64 * 2.0 - 2.0;
            for c in cols.iter_mut() {
                c.push(center + rng.gen_range(-0.8..0.8));
            }
            cat.push(class.min(1));
            y.push(class + 1);
        }
        let schema = Schema {
            features: vec![
                ColumnSpec { name: "f0".into(), kind: ColumnKind::Numeric },
                ColumnSpec { name: "f1".into(), kind: ColumnKind::Numeric },
                ColumnSpec { name: "f2".into(), kind: ColumnKind::Numeric },
                ColumnSpec { name: "f3".into(), kind: ColumnKind::Numeric },
                ColumnSpec {
                    name: "f4".into(),
                    kind: ColumnKind::Categorical(vec!["a".into(), "b".into()]),
                },
            ],
            target_name: "y".into(),
            target: TargetKind::Classification(vec!["c1".into(), "c2".into(), "c3".into()]),
        };
        let n_test = n / 5;
        let splits = Splits {
            train: (0..n - n_test).collect(),
            val: Vec::new(),
            test: (n - n_test..n).collect(),
        };
        TabularTask::new(
            "clf".into(),
            schema,
            vec![
                ColumnData::Numeric(cols[0].clone()),
                ColumnData::Numeric(cols[1].clone()),
                ColumnData::Numeric(cols[2].clone()),
                ColumnData::Numeric(cols[3].clone()),
                ColumnData::Categorical(cat),
            ],
            TargetData::Classes(y),
            splits,
        )
        .unwrap()
    }

    fn reg_task(n: usize, seed: u64) -> TabularTask {
        let mut rng = rng_for(seed, &[99]);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x0: f64 = rng.gen_range(-2.0..2.0);
            let x1: f64 = rng.gen_range(-2.0..2.0);
            a.push(x0);
            b.push(x1);
            y.push(3.0 * x0 - x1 + rng.gen_range(-0.1..0.1));
        }
        let schema = Schema {
            features: vec![
                ColumnSpec { name: "a".into(), kind: ColumnKind::Numeric },
                ColumnSpec { name: "b".into(), kind: ColumnKind::Numeric },
            ],
            target_name: "y".into(),
            target: TargetKind::Regression,
        };
        let n_test = n / 5;
        let splits = Splits {
            train: (0..n - n_test).collect(),
            val: Vec::new(),
            test: (n - n_test..n).collect(),
        };
        TabularTask::new(
            "reg".into(),
            schema,
            vec![ColumnData::Numeric(a), ColumnData::Numeric(b)],
            TargetData::Reals(y),
            splits,
        )
        .unwrap()
    }

    #[test]
    fn default_config_matches_search_space_defaults() {
        let cfg = FitTaskConfig::default();
        assert_eq!(cfg.variant, PsiVariant::RX);
        assert_eq!(cfg.batch_size, 2048);
        assert_eq!(cfg.n_ens, 8);
        assert!(cfg.feature_bagging);
        assert!(!cfg.gbdt_split_entire);
        assert!(!cfg.gbdt_refit_per_member);
        assert_eq!(cfg.gbdt_rounds, 100);
        assert_eq!(cfg.gbdt_learning_rate, None);
        assert!(cfg.retrieval);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.tau, 2.0);
        let ft = cfg.fine_tune.unwrap();
        assert_eq!(ft.learning_rate, 1e-4);
        assert_eq!(ft.max_steps, 1024);
        assert_eq!(ft.dropout, 0.0);
        assert!(!ft.bootstrap);
    }

    #[test]
    fn bag_mask_is_reconstructible_and_covers_enough() {
        let a = bag_mask(10, 5, 3);
        let b = bag_mask(10, 5, 3);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&m| m).count(), 8);
        assert_ne!(bag_mask(10, 5, 4), a);
        assert_eq!(bag_mask(1, 5, 0), vec![true]);
    }

    #[test]
    fn fit_predict_rows_sum_to_one() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(150, 8);
        let model = fit_task(&phi, &task, &small_cfg()).unwrap();
        let probs = predict_proba(&model, &task, &task.splits.test).unwrap();
        assert_eq!(probs.dim(), (task.splits.test.len(), 3));
        for row in probs.rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {}", sum);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn refit_with_same_seed_is_bit_identical() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(120, 9);
        let cfg = small_cfg();
        let m1 = fit_task(&phi, &task, &cfg).unwrap();
        let m2 = fit_task(&phi, &task, &cfg).unwrap();
        assert_eq!(
            ensemble_to_container(&m1).to_bytes(),
            ensemble_to_container(&m2).to_bytes()
        );
        let p1 = predict_proba(&m1, &task, &task.splits.test).unwrap();
        let p2 = predict_proba(&m2, &task, &task.splits.test).unwrap();
        assert!(p1.iter().zip(p2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ensemble_of_identical_members_equals_single() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(100, 10);
        let cfg = FitTaskConfig { n_ens: 1, feature_bagging: false, ..small_cfg() };
        let single = fit_task(&phi, &task, &cfg).unwrap();
        let mut tripled = single.clone();
        let m = tripled.members[0].clone();
        tripled.members = vec![m.clone(), m.clone(), m];
        let p1 = predict_proba(&single, &task, &task.splits.test).unwrap();
        let p3 = predict_proba(&tripled, &task, &task.splits.test).unwrap();
        assert!(p1.iter().zip(p3.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn alpha_zero_makes_context_inert() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(100, 12);
        let cfg = FitTaskConfig { alpha: 0.0, ..small_cfg() };
        let with_ctx = fit_task(&phi, &task, &cfg).unwrap();
        assert!(with_ctx.members.iter().all(|m| m.context.is_some()));
        let mut stripped = with_ctx.clone();
        for m in &mut stripped.members {
            m.context = None;
        }
        let a = predict_proba(&with_ctx, &task, &task.splits.test).unwrap();
        let b = predict_proba(&stripped, &task, &task.splits.test).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn permuting_test_rows_permutes_outputs() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(120, 13);
        let model = fit_task(&phi, &task, &small_cfg()).unwrap();
        let rows = task.splits.test.clone();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        let straight = predict_proba(&model, &task, &rows).unwrap();
        let reversed = predict_proba(&model, &task, &shuffled).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let j = shuffled.iter().position(|r| r == row).unwrap();
            assert!(straight
                .row(i)
                .iter()
                .zip(reversed.row(j).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn feature_width_mismatch_is_reported() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(100, 14);
        let model = fit_task(&phi, &task, &small_cfg()).unwrap();
        let narrower = task.select_features(&[0, 1, 2]).unwrap();
        assert!(predict_proba(&model, &narrower, &narrower.splits.test).is_err());
    }

    #[test]
    fn fine_tune_with_zero_learning_rate_keeps_theta() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(90, 15);
        let rows = task.splits.train.clone();
        let psi = PsiState::fit(PsiVariant::R, &task, &rows, &rows, 2, 0.1, 1).unwrap();
        let feats = psi.transform(&task, &rows).unwrap();
        let proj = fit_projection(&feats.view(), 24, 6, 4).unwrap();
        let x = apply_projection(&proj, &feats.view()).unwrap();
        let y = task.labels_of(&rows).unwrap();
        let theta = generate_weights(&phi, &x, &y, 3).unwrap();
        let cfg = FineTuneConfig { learning_rate: 0.0, max_steps: 12, ..FineTuneConfig::default() };
        let (tuned, report) =
            fine_tune(&theta, &x, &FtTargets::Classes { y: &y, k: 3 }, &cfg, 64, 7).unwrap();
        assert_eq!(theta, tuned);
        assert_eq!(report.initial_loss, report.best_loss);
    }

    #[test]
    fn fine_tune_heldout_loss_never_worse_than_initial() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(140, 16);
        let rows = task.splits.train.clone();
        let psi = PsiState::fit(PsiVariant::R, &task, &rows, &rows, 2, 0.1, 1).unwrap();
        let feats = psi.transform(&task, &rows).unwrap();
        let proj = fit_projection(&feats.view(), 24, 6, 4).unwrap();
        let x = apply_projection(&proj, &feats.view()).unwrap();
        let y = task.labels_of(&rows).unwrap();
        let theta = generate_weights(&phi, &x, &y, 3).unwrap();
        for bootstrap in [false, true] {
            let cfg = FineTuneConfig {
                learning_rate: 3e-3,
                max_steps: 60,
                bootstrap,
                ..FineTuneConfig::default()
            };
            let (_, report) =
                fine_tune(&theta, &x, &FtTargets::Classes { y: &y, k: 3 }, &cfg, 64, 7).unwrap();
            assert!(report.best_loss <= report.initial_loss);
            assert!(report.steps > 0);
        }
    }

    #[test]
    fn dropout_fine_tune_runs_and_respects_patience() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(90, 17);
        let rows = task.splits.train.clone();
        let psi = PsiState::fit(PsiVariant::R, &task, &rows, &rows, 2, 0.1, 1).unwrap();
        let feats = psi.transform(&task, &rows).unwrap();
        let proj = fit_projection(&feats.view(), 24, 6, 4).unwrap();
        let x = apply_projection(&proj, &feats.view()).unwrap();
        let y = task.labels_of(&rows).unwrap();
        let theta = generate_weights(&phi, &x, &y, 3).unwrap();
        let cfg = FineTuneConfig {
            learning_rate: 1e-3,
            max_steps: 400,
            dropout: 0.15,
            patience: 3,
            ..FineTuneConfig::default()
        };
        let (_, report) =
            fine_tune(&theta, &x, &FtTargets::Classes { y: &y, k: 3 }, &cfg, 64, 7).unwrap();
        assert!(report.steps <= 400);
        assert!(report.best_loss.is_finite());
    }

    #[test]
    fn regression_fit_predicts_in_target_units() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = reg_task(150, 18);
        let cfg = FitTaskConfig {
            fine_tune: Some(FineTuneConfig {
                learning_rate: 1e-2,
                max_steps: 80,
                ..FineTuneConfig::default()
            }),
            ..small_cfg()
        };
        let model = fit_task(&phi, &task, &cfg).unwrap();
        assert_eq!(model.k, 0);
        let preds = predict_reals(&model, &task, &task.splits.test).unwrap();
        assert_eq!(preds.len(), task.splits.test.len());
        assert!(preds.iter().all(|v| v.is_finite()));
        let y_test = task.reals_of(&task.splits.test).unwrap();
        let spread = y_test.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - y_test.iter().cloned().fold(f64::INFINITY, f64::min);
        let rmse = crate::tabular::rmse(&preds, &y_test).unwrap();
        assert!(rmse < 4.0 * spread, "rmse {} vs spread {}", rmse, spread);
    }

    #[test]
    fn regression_adaptation_shapes_and_destandardization() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let x = Array2::from_shape_fn((10, 6), |(i, j)| ((i * 7 + j) % 5) as f64 * 0.3 - 0.6);
        let y_std: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) / 2.87).collect();
        let theta = adapt_for_regression(&phi, &x, &y_std).unwrap();
        assert_eq!(theta.w3.dim(), (1, 6));
        assert_eq!(theta.b3.dim(), (1, 1));

        let mut zero_out = theta.clone();
        zero_out.w3.fill(0.0);
        zero_out.b3.fill(0.0);
        let member = FittedPredictor {
            psi: PsiState { variant: PsiVariant::R, robust: None, gbdt: None },
            projection: fit_projection(&x.view(), 8, 6, 1).unwrap(),
            theta: zero_out,
            context: None,
            bag_mask: vec![true; 2],
            target_scale: Some((7.25, 3.5)),
            seed: 0,
        };
        let (_, out) = forward_main(&member.theta, &x);
        let (mu, sigma) = member.target_scale.unwrap();
        for &v in out.column(0).iter() {
            assert_eq!(v * sigma + mu, 7.25);
        }
    }

    #[test]
    fn constant_regression_target_gets_unit_scale() {
        let (mu, sigma) = mean_and_scale(&[4.0, 4.0, 4.0, 4.0]);
        assert_eq!(mu, 4.0);
        assert_eq!(sigma, 1.0);
    }

    #[test]
    fn regression_retrieval_mixes_neighbor_targets() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = reg_task(120, 19);
        let cfg = FitTaskConfig {
            regression_retrieval: true,
            fine_tune: None,
            ..small_cfg()
        };
        let model = fit_task(&phi, &task, &cfg).unwrap();
        assert!(model.members.iter().all(|m| m.context.is_some()));
        let preds = predict_reals(&model, &task, &task.splits.test).unwrap();
        assert!(preds.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ensemble_round_trips_through_container() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(100, 20);
        let model = fit_task(&phi, &task, &small_cfg()).unwrap();
        let bytes = ensemble_to_container(&model).to_bytes();
        let back = ensemble_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(model, back);
        assert_eq!(bytes, ensemble_to_container(&back).to_bytes());
        let p1 = predict_proba(&model, &task, &task.splits.test).unwrap();
        let p2 = predict_proba(&back, &task, &task.splits.test).unwrap();
        assert!(p1.iter().zip(p2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn prediction_csvs_have_expected_layout() {
        let dir = tempfile::tempdir().unwrap();
        let probs =
            Array2::from_shape_vec((2, 2), vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let path = dir.path().join("probs.csv");
        write_class_predictions_csv(&path, &probs, &["no".into(), "yes".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "row,no,yes\n0,0.25,0.75\n1,0.5,0.5\n");
        let rpath = dir.path().join("reals.csv");
        write_real_predictions_csv(&rpath, &[1.5, -2.0]).unwrap();
        assert_eq!(std::fs::read_to_string(&rpath).unwrap(), "row,prediction\n0,1.5\n1,-2\n");
    }

    #[test]
    fn too_many_classes_is_a_config_error() {
        let dims = HyperDims { d_main: 6, h: 8, k_max: 2 };
        let phi = HyperNetParams::init(dims, 3);
        let task = class_task(80, 21);
        let err = fit_task(&phi, &task, &small_cfg()).unwrap_err();
        assert!(err.to_string().contains("classes"));
    }

    #[test]
    fn masked_members_still_fit_with_per_member_gbdt() {
        let phi = HyperNetParams::init(small_dims(), 3);
        let task = class_task(100, 22);
        let cfg = FitTaskConfig {
            gbdt_refit_per_member: true,
            n_ens: 3,
            ..small_cfg()
        };
        let model = fit_task(&phi, &task, &cfg).unwrap();
        assert_eq!(model.members.len(), 3);
        let masks: Vec<_> = model.members.iter().map(|m| m.bag_mask.clone()).collect();
        assert!(masks.iter().all(|m| m.iter().filter(|&&b| b).count() == 4));
        let probs = predict_proba(&model, &task, &task.splits.test).unwrap();
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn random_weight_init_matches_its_seeded_oracle() {
        let task = class_task(120, 5);
        let phi = HyperNetParams::init(small_dims(), 3);
        let cfg = FitTaskConfig {
            weight_init: WeightInit::Random,
            n_ens: 1,
            fine_tune: None,
            feature_bagging: false,
            ..small_cfg()
        };
        let model = fit_task(&phi, &task, &cfg).unwrap();
        let member_seed = derive_seed(cfg.seed, &[MEMBER_TAG, 0]);
        let expect = random_main_net(small_dims().d_main, 3, derive_seed(member_seed, &[INIT_TAG]));
        assert_eq!(model.members[0].theta.to_flat(), expect.to_flat());

        let generated = fit_task(&phi, &task, &FitTaskConfig { weight_init: WeightInit::Generated, ..cfg })
            .unwrap();
        assert_ne!(model.members[0].theta.to_flat(), generated.members[0].theta.to_flat());
    }
}
