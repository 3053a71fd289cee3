//! The "ILTM" binary container: magic bytes, a format version, an ordered
//! metadata block of string pairs, and named f64 tensors (shape header +
//! little-endian payload). Writing is canonical, so save → load → save
//! yields identical bytes; f64 values round-trip bit-exactly via their raw
//! bits, and integers that may exceed 2^53 (seeds) travel as decimal
//! metadata strings.
//!
//! Codecs for the domain types (checkpoint, GBDT, scaler, ψ, projection,
//! main network, task cache) live here as prefix-based tensor groups so one
//! file can hold several sections.

use crate::error::{Error, Result};
use crate::gbdt::{FitSplit, GbdtModel, LossKind, Tree};
use crate::hypernet::{HyperDims, HyperNetParams, LayerParams, MainNetParams};
use crate::meta::{Checkpoint, MetaTrainConfig, OptimizerKind, OptimizerState};
use crate::preprocess::{ColumnScale, PsiState, PsiVariant, RobustScalerState};
use crate::projection::ProjectionParams;
use ndarray::{Array1, Array2};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"ILTM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::format(format!("missing metadata key '{}'", key)))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.require_meta(key)?
            .parse()
            .map_err(|_| Error::format(format!("metadata '{}' is not an integer", key)))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        Ok(self.meta_u64(key)? as usize)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.require_meta(key)?
            .parse()
            .map_err(|_| Error::format(format!("metadata '{}' is not a number", key)))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        match self.require_meta(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::format(format!("metadata '{}' is not a bool: {}", key, other))),
        }
    }

    pub fn put_tensor(&mut self, name: &str, t: Array2<f64>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn put_row(&mut self, name: &str, v: &[f64]) {
        self.put_tensor(name, Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap());
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensor(name)
            .ok_or_else(|| Error::format(format!("missing tensor '{}'", name)))
    }

    pub fn require_row(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.require_tensor(name)?;
        if t.nrows() != 1 {
            return Err(Error::format(format!("tensor '{}' is not a single row", name)));
        }
        Ok(t.row(0).to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::format("not an ILTM container (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported container version {} (expected {})",
                version, FORMAT_VERSION
            )));
        }
        let n_meta = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut metadata = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let k = r.take_str()?;
            let v = r.take_str()?;
            metadata.push((k, v));
        }
        let n_tensors = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.take_str()?;
            let rows = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format("tensor shape overflow"))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|_| Error::format("tensor shape mismatch"))?;
            tensors.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(Error::format("trailing bytes after container payload"));
        }
        Ok(Container { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path)?;
        Container::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format("container truncated"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn take_str(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format("invalid utf-8 string"))
    }
}

fn row_to_indices(v: &[f64]) -> Vec<usize> {
    v.iter().map(|&x| x as usize).collect()
}

// ---- main network ----

pub fn put_main_net(c: &mut Container, prefix: &str, theta: &MainNetParams) {
    c.put_tensor(&format!("{}w1", prefix), theta.w1.clone());
    c.put_tensor(&format!("{}b1", prefix), theta.b1.clone());
    c.put_tensor(&format!("{}w2", prefix), theta.w2.clone());
    c.put_tensor(&format!("{}b2", prefix), theta.b2.clone());
    c.put_tensor(&format!("{}w3", prefix), theta.w3.clone());
    c.put_tensor(&format!("{}b3", prefix), theta.b3.clone());
}

pub fn get_main_net(c: &Container, prefix: &str) -> Result<MainNetParams> {
    Ok(MainNetParams {
        w1: c.require_tensor(&format!("{}w1", prefix))?.clone(),
        b1: c.require_tensor(&format!("{}b1", prefix))?.clone(),
        w2: c.require_tensor(&format!("{}w2", prefix))?.clone(),
        b2: c.require_tensor(&format!("{}b2", prefix))?.clone(),
        w3: c.require_tensor(&format!("{}w3", prefix))?.clone(),
        b3: c.require_tensor(&format!("{}b3", prefix))?.clone(),
    })
}

// ---- hypernetwork ----

const PHI_TENSOR_NAMES: [&str; 6] =
    ["block_w1", "block_b1", "block_w2", "block_b2", "head_w", "head_b"];

pub fn put_hypernet(c: &mut Container, prefix: &str, phi: &HyperNetParams) {
    c.put_meta(&format!("{}d_main", prefix), phi.dims.d_main);
    c.put_meta(&format!("{}h", prefix), phi.dims.h);
    c.put_meta(&format!("{}k_max", prefix), phi.dims.k_max);
    for (i, layer) in phi.layers.iter().enumerate() {
        for (name, tensor) in PHI_TENSOR_NAMES.iter().zip(layer.tensors()) {
            c.put_tensor(&format!("{}layer{}.{}", prefix, i + 1, name), tensor.clone());
        }
    }
}

pub fn get_hypernet(c: &Container, prefix: &str) -> Result<HyperNetParams> {
    let dims = HyperDims {
        d_main: c.meta_usize(&format!("{}d_main", prefix))?,
        h: c.meta_usize(&format!("{}h", prefix))?,
        k_max: c.meta_usize(&format!("{}k_max", prefix))?,
    };
    let mut layers = Vec::with_capacity(crate::hypernet::MAIN_LAYERS);
    for i in 1..=crate::hypernet::MAIN_LAYERS {
        let grab = |name: &str| -> Result<Array2<f64>> {
            Ok(c.require_tensor(&format!("{}layer{}.{}", prefix, i, name))?.clone())
        };
        layers.push(LayerParams {
            block_w1: grab("block_w1")?,
            block_b1: grab("block_b1")?,
            block_w2: grab("block_w2")?,
            block_b2: grab("block_b2")?,
            head_w: grab("head_w")?,
            head_b: grab("head_b")?,
        });
    }
    Ok(HyperNetParams { dims, layers })
}

// ---- GBDT ----

fn loss_code(l: LossKind) -> f64 {
    match l {
        LossKind::Logistic => 0.0,
        LossKind::Softmax => 1.0,
        LossKind::Squared => 2.0,
    }
}

fn loss_from_code(v: f64) -> Result<LossKind> {
    match v as i64 {
        0 => Ok(LossKind::Logistic),
        1 => Ok(LossKind::Softmax),
        2 => Ok(LossKind::Squared),
        other => Err(Error::format(format!("unknown loss code {}", other))),
    }
}

pub fn put_gbdt(c: &mut Container, prefix: &str, m: &GbdtModel) {
    c.put_row(
        &format!("{}scalars", prefix),
        &[
            loss_code(m.loss),
            m.learning_rate,
            m.rounds as f64,
            m.max_rounds as f64,
            m.patience as f64,
            m.classes_per_round as f64,
            m.n_features as f64,
            m.total_leaves as f64,
        ],
    );
    c.put_row(&format!("{}base_score", prefix), &m.base_score);
    c.put_row(&format!("{}val_history", prefix), &m.val_history);

    let total_nodes: usize = m.trees.iter().map(|t| t.feature.len()).sum();
    let mut nodes = Array2::zeros((total_nodes, 7));
    let mut offsets = Array2::zeros((m.trees.len(), 2));
    let mut at = 0;
    for (ti, tree) in m.trees.iter().enumerate() {
        offsets[[ti, 0]] = at as f64;
        offsets[[ti, 1]] = tree.n_leaves as f64;
        for i in 0..tree.feature.len() {
            nodes[[at, 0]] = tree.feature[i] as f64;
            nodes[[at, 1]] = tree.threshold[i];
            nodes[[at, 2]] = if tree.missing_left[i] { 1.0 } else { 0.0 };
            nodes[[at, 3]] = tree.left[i] as f64;
            nodes[[at, 4]] = tree.right[i] as f64;
            nodes[[at, 5]] = tree.value[i];
            nodes[[at, 6]] = tree.leaf_ordinal[i] as f64;
            at += 1;
        }
    }
    c.put_tensor(&format!("{}tree_nodes", prefix), nodes);
    c.put_tensor(&format!("{}tree_offsets", prefix), offsets);

    let flat: Vec<f64> = m.bin_edges.iter().flatten().cloned().collect();
    let mut edge_offsets = Vec::with_capacity(m.bin_edges.len() + 1);
    let mut cum = 0usize;
    edge_offsets.push(0.0);
    for e in &m.bin_edges {
        cum += e.len();
        edge_offsets.push(cum as f64);
    }
    c.put_row(&format!("{}bin_edges", prefix), &flat);
    c.put_row(&format!("{}bin_edge_offsets", prefix), &edge_offsets);
}

pub fn get_gbdt(c: &Container, prefix: &str) -> Result<GbdtModel> {
    let s = c.require_row(&format!("{}scalars", prefix))?;
    if s.len() != 8 {
        return Err(Error::format("gbdt scalar row has wrong length"));
    }
    let base_score = c.require_row(&format!("{}base_score", prefix))?;
    let val_history = c.require_row(&format!("{}val_history", prefix))?;
    let nodes = c.require_tensor(&format!("{}tree_nodes", prefix))?;
    let offsets = c.require_tensor(&format!("{}tree_offsets", prefix))?;
    let n_trees = offsets.nrows();
    let mut trees = Vec::with_capacity(n_trees);
    for ti in 0..n_trees {
        let start = offsets[[ti, 0]] as usize;
        let end = if ti + 1 < n_trees {
            offsets[[ti + 1, 0]] as usize
        } else {
            nodes.nrows()
        };
        let mut tree = Tree {
            feature: Vec::with_capacity(end - start),
            threshold: Vec::with_capacity(end - start),
            missing_left: Vec::with_capacity(end - start),
            left: Vec::with_capacity(end - start),
            right: Vec::with_capacity(end - start),
            value: Vec::with_capacity(end - start),
            leaf_ordinal: Vec::with_capacity(end - start),
            n_leaves: offsets[[ti, 1]] as usize,
        };
        for i in start..end {
            tree.feature.push(nodes[[i, 0]] as i32);
            tree.threshold.push(nodes[[i, 1]]);
            tree.missing_left.push(nodes[[i, 2]] != 0.0);
            tree.left.push(nodes[[i, 3]] as u32);
            tree.right.push(nodes[[i, 4]] as u32);
            tree.value.push(nodes[[i, 5]]);
            tree.leaf_ordinal.push(nodes[[i, 6]] as u32);
        }
        trees.push(tree);
    }

    let flat = c.require_row(&format!("{}bin_edges", prefix))?;
    let eo = c.require_row(&format!("{}bin_edge_offsets", prefix))?;
    let mut bin_edges = Vec::with_capacity(eo.len().saturating_sub(1));
    for w in eo.windows(2) {
        let (a, b) = (w[0] as usize, w[1] as usize);
        if b < a || b > flat.len() {
            return Err(Error::format("bin edge offsets out of range"));
        }
        bin_edges.push(flat[a..b].to_vec());
    }

    Ok(GbdtModel {
        loss: loss_from_code(s[0])?,
        learning_rate: s[1],
        rounds: s[2] as usize,
        max_rounds: s[3] as usize,
        patience: s[4] as usize,
        classes_per_round: s[5] as usize,
        trees,
        bin_edges,
        base_score,
        n_features: s[6] as usize,
        total_leaves: s[7] as usize,
        val_history,
    })
}

// ---- robust scaler ----

pub fn put_robust(c: &mut Container, prefix: &str, r: &RobustScalerState) {
    let mut cols = Array2::zeros((r.columns.len(), 3));
    for (i, col) in r.columns.iter().enumerate() {
        match col {
            ColumnScale::Numeric { median, scale } => {
                cols[[i, 0]] = 0.0;
                cols[[i, 1]] = *median;
                cols[[i, 2]] = *scale;
            }
            ColumnScale::Categorical { width } => {
                cols[[i, 0]] = 1.0;
                cols[[i, 1]] = *width as f64;
            }
        }
    }
    c.put_tensor(&format!("{}columns", prefix), cols);
    c.put_row(&format!("{}clip", prefix), &[r.clip_b]);
}

pub fn get_robust(c: &Container, prefix: &str) -> Result<RobustScalerState> {
    let cols = c.require_tensor(&format!("{}columns", prefix))?;
    let clip = c.require_row(&format!("{}clip", prefix))?;
    let mut columns = Vec::with_capacity(cols.nrows());
    let mut m_r = 0usize;
    for i in 0..cols.nrows() {
        if cols[[i, 0]] == 0.0 {
            columns.push(ColumnScale::Numeric { median: cols[[i, 1]], scale: cols[[i, 2]] });
            m_r += 1;
        } else {
            let width = cols[[i, 1]] as usize;
            columns.push(ColumnScale::Categorical { width });
            m_r += width;
        }
    }
    Ok(RobustScalerState { clip_b: clip[0], columns, m_r })
}

// ---- ψ ----

pub fn put_psi(c: &mut Container, prefix: &str, psi: &PsiState) {
    c.put_meta(&format!("{}variant", prefix), psi.variant.name());
    if let Some(r) = &psi.robust {
        put_robust(c, &format!("{}robust.", prefix), r);
    }
    if let Some(g) = &psi.gbdt {
        put_gbdt(c, &format!("{}gbdt.", prefix), g);
    }
}

pub fn get_psi(c: &Container, prefix: &str) -> Result<PsiState> {
    let variant = PsiVariant::parse(c.require_meta(&format!("{}variant", prefix))?)?;
    let robust = if variant.uses_robust() {
        Some(get_robust(c, &format!("{}robust.", prefix))?)
    } else {
        None
    };
    let gbdt = if variant.uses_gbdt() {
        Some(get_gbdt(c, &format!("{}gbdt.", prefix))?)
    } else {
        None
    };
    Ok(PsiState { variant, robust, gbdt })
}

// ---- projection ----

pub fn put_projection(c: &mut Container, prefix: &str, p: &ProjectionParams) {
    c.put_meta(&format!("{}seed", prefix), p.seed);
    c.put_row(
        &format!("{}scalars", prefix),
        &[p.m as f64, p.r as f64, p.d_main as f64, p.rank as f64, p.eps],
    );
    c.put_row(&format!("{}mu_rf", prefix), p.mu_rf.as_slice().unwrap());
    c.put_tensor(&format!("{}u", prefix), p.u.clone());
    c.put_row(&format!("{}col_mean", prefix), p.col_mean.as_slice().unwrap());
    c.put_row(&format!("{}col_std", prefix), p.col_std.as_slice().unwrap());
}

pub fn get_projection(c: &Container, prefix: &str) -> Result<ProjectionParams> {
    let s = c.require_row(&format!("{}scalars", prefix))?;
    if s.len() != 5 {
        return Err(Error::format("projection scalar row has wrong length"));
    }
    Ok(ProjectionParams {
        seed: c.meta_u64(&format!("{}seed", prefix))?,
        m: s[0] as usize,
        r: s[1] as usize,
        d_main: s[2] as usize,
        rank: s[3] as usize,
        eps: s[4],
        mu_rf: Array1::from_vec(c.require_row(&format!("{}mu_rf", prefix))?),
        u: c.require_tensor(&format!("{}u", prefix))?.clone(),
        col_mean: Array1::from_vec(c.require_row(&format!("{}col_mean", prefix))?),
        col_std: Array1::from_vec(c.require_row(&format!("{}col_std", prefix))?),
    })
}

// ---- optimizer / checkpoint ----

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Plain => "plain",
        OptimizerKind::Adam => "adam",
    }
}

fn optimizer_from_name(s: &str) -> Result<OptimizerKind> {
    match s {
        "plain" => Ok(OptimizerKind::Plain),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(Error::format(format!("unknown optimizer '{}'", other))),
    }
}

pub fn checkpoint_to_container(cp: &Checkpoint) -> Container {
    let mut c = Container::new();
    c.put_meta("kind", "checkpoint");
    c.put_meta("step", cp.step);
    let cfg = &cp.config;
    c.put_meta("cfg.r", cfg.r);
    c.put_meta("cfg.accumulation", cfg.accumulation);
    c.put_meta("cfg.learning_rate", cfg.learning_rate);
    c.put_meta("cfg.max_steps", cfg.max_steps);
    c.put_meta("cfg.batch_gen", cfg.batch_gen);
    c.put_meta("cfg.batch_grad", cfg.batch_grad);
    c.put_meta("cfg.optimizer", optimizer_name(cfg.optimizer));
    c.put_meta("cfg.seed", cfg.seed);
    c.put_meta("cfg.val_period", cfg.val_period);
    c.put_meta("cfg.retrieval", cfg.retrieval);
    c.put_meta("cfg.alpha", cfg.alpha);
    c.put_meta("cfg.tau", cfg.tau);
    put_hypernet(&mut c, "phi.", &cp.phi);
    c.put_row("opt.m", &cp.optimizer.m);
    c.put_row("opt.v", &cp.optimizer.v);
    c.put_meta("opt.t", cp.optimizer.t);
    let mut hist = Array2::zeros((cp.val_history.len(), 2));
    for (i, (step, score)) in cp.val_history.iter().enumerate() {
        hist[[i, 0]] = *step as f64;
        hist[[i, 1]] = *score;
    }
    c.put_tensor("val_history", hist);
    c
}

pub fn checkpoint_from_container(c: &Container) -> Result<Checkpoint> {
    if c.meta("kind") != Some("checkpoint") {
        return Err(Error::format("container is not a checkpoint"));
    }
    let phi = get_hypernet(c, "phi.")?;
    let config = MetaTrainConfig {
        dims: phi.dims,
        r: c.meta_usize("cfg.r")?,
        accumulation: c.meta_usize("cfg.accumulation")?,
        learning_rate: c.meta_f64("cfg.learning_rate")?,
        max_steps: c.meta_usize("cfg.max_steps")?,
        batch_gen: c.meta_usize("cfg.batch_gen")?,
        batch_grad: c.meta_usize("cfg.batch_grad")?,
        optimizer: optimizer_from_name(c.require_meta("cfg.optimizer")?)?,
        seed: c.meta_u64("cfg.seed")?,
        val_period: c.meta_usize("cfg.val_period")?,
        retrieval: c.meta_bool("cfg.retrieval")?,
        alpha: c.meta_f64("cfg.alpha")?,
        tau: c.meta_f64("cfg.tau")?,
    };
    let optimizer = OptimizerState {
        m: c.require_row("opt.m")?,
        v: c.require_row("opt.v")?,
        t: c.meta_u64("opt.t")?,
    };
    let hist_t = c.require_tensor("val_history")?;
    let mut val_history = Vec::with_capacity(hist_t.nrows());
    for i in 0..hist_t.nrows() {
        val_history.push((hist_t[[i, 0]] as u64, hist_t[[i, 1]]));
    }
    Ok(Checkpoint { phi, optimizer, step: c.meta_u64("step")?, val_history, config })
}

// ---- task embedding cache ----

/// Cached offline work for one task: fitted ψ plus the pool/fit row split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCache {
    pub task_name: String,
    pub seed: u64,
    pub gbdt_config_tag: String,
    pub psi: PsiState,
    pub split: FitSplit,
}

pub fn task_cache_to_container(tc: &TaskCache) -> Container {
    let mut c = Container::new();
    c.put_meta("kind", "task-cache");
    c.put_meta("task_name", &tc.task_name);
    c.put_meta("seed", tc.seed);
    c.put_meta("gbdt_config_tag", &tc.gbdt_config_tag);
    put_psi(&mut c, "psi.", &tc.psi);
    c.put_row(
        "split.gbdt_fit",
        &tc.split.gbdt_fit.iter().map(|&i| i as f64).collect::<Vec<_>>(),
    );
    c.put_row(
        "split.hypernet_pool",
        &tc.split.hypernet_pool.iter().map(|&i| i as f64).collect::<Vec<_>>(),
    );
    c
}

pub fn task_cache_from_container(c: &Container) -> Result<TaskCache> {
    if c.meta("kind") != Some("task-cache") {
        return Err(Error::format("container is not a task cache"));
    }
    Ok(TaskCache {
        task_name: c.require_meta("task_name")?.to_string(),
        seed: c.meta_u64("seed")?,
        gbdt_config_tag: c.require_meta("gbdt_config_tag")?.to_string(),
        psi: get_psi(c, "psi.")?,
        split: FitSplit {
            gbdt_fit: row_to_indices(&c.require_row("split.gbdt_fit")?),
            hypernet_pool: row_to_indices(&c.require_row("split.hypernet_pool")?),
        },
    })
}
