//! Robust preprocessing (the non-GBDT path) and composition of the initial
//! transformation ψ(x) across the five variants R / X / C / RX / RC.
//!
//! Numeric columns are zero-imputed in raw space, centered on the median,
//! scaled by the inter-quartile range (falling back to standard deviation,
//! then 1), and smooth-clipped through s(z) = z / sqrt(1 + (z/B)^2), which is
//! bounded by B and strictly increasing. Categorical columns one-hot encode
//! into vocabulary order plus one extra slot for missing values; unknown
//! values encode as an all-zero segment.

use crate::error::{Error, Result};
use crate::gbdt::{self, FitTarget, GbdtConfig, GbdtModel};
use crate::linalg::quantile_sorted;
use crate::tabular::{ColumnData, ColumnKind, TabularTask, TargetData, CAT_MISSING};
use ndarray::{s, Array2};

pub const CLIP_B: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnScale {
    Numeric { median: f64, scale: f64 },
    /// One-hot width: vocabulary size + 1 trailing missing slot.
    Categorical { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustScalerState {
    pub clip_b: f64,
    /// Parallel to the schema's feature columns.
    pub columns: Vec<ColumnScale>,
    pub m_r: usize,
}

/// Smooth clip: odd, strictly increasing, |s(z)| < B with s(z) -> +-B.
pub fn smooth_clip(z: f64, b: f64) -> f64 {
    z / (1.0 + (z / b) * (z / b)).sqrt()
}

/// Fit medians and robust scales on the given rows. All-missing and constant
/// columns fall back deterministically (median 0 / scale 1) so the transform
/// is total.
pub fn fit_robust(task: &TabularTask, rows: &[usize]) -> Result<RobustScalerState> {
    if rows.is_empty() {
        return Err(Error::data("fit_robust with zero rows"));
    }
    let mut columns = Vec::with_capacity(task.columns.len());
    let mut m_r = 0usize;
    for (col, spec) in task.columns.iter().zip(&task.schema.features) {
        match (col, &spec.kind) {
            (ColumnData::Numeric(v), ColumnKind::Numeric) => {
                let mut vals: Vec<f64> =
                    rows.iter().map(|&r| v[r]).filter(|x| x.is_finite()).collect();
                let (median, scale) = if vals.is_empty() {
                    (0.0, 1.0)
                } else {
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let median = quantile_sorted(&vals, 0.5);
                    let iqr = quantile_sorted(&vals, 0.75) - quantile_sorted(&vals, 0.25);
                    let scale = if iqr > 0.0 {
                        iqr
                    } else {
                        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                        let var =
                            vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                                / vals.len() as f64;
                        let std = var.sqrt();
                        if std > 0.0 {
                            std
                        } else {
                            1.0
                        }
                    };
                    (median, scale)
                };
                columns.push(ColumnScale::Numeric { median, scale });
                m_r += 1;
            }
            (ColumnData::Categorical(_), ColumnKind::Categorical(vocab)) => {
                let width = vocab.len() + 1;
                columns.push(ColumnScale::Categorical { width });
                m_r += width;
            }
            _ => return Err(Error::schema("column kind mismatch between data and schema")),
        }
    }
    Ok(RobustScalerState { clip_b: CLIP_B, columns, m_r })
}

/// Apply the fitted scaler to the selected rows.
pub fn apply_robust(
    state: &RobustScalerState,
    task: &TabularTask,
    rows: &[usize],
) -> Result<Array2<f64>> {
    if state.columns.len() != task.columns.len() {
        return Err(Error::data(format!(
            "apply_robust: {} columns, scaler fitted on {}",
            task.columns.len(),
            state.columns.len()
        )));
    }
    let mut out = Array2::zeros((rows.len(), state.m_r));
    let mut base = 0usize;
    for (col, scale) in task.columns.iter().zip(&state.columns) {
        match (col, scale) {
            (ColumnData::Numeric(v), ColumnScale::Numeric { median, scale }) => {
                for (i, &r) in rows.iter().enumerate() {
                    let raw = if v[r].is_finite() { v[r] } else { 0.0 };
                    let z = (raw - median) / scale;
                    out[[i, base]] = smooth_clip(z, state.clip_b);
                }
                base += 1;
            }
            (ColumnData::Categorical(v), ColumnScale::Categorical { width }) => {
                let vocab_len = width - 1;
                for (i, &r) in rows.iter().enumerate() {
                    let idx = v[r];
                    if idx == CAT_MISSING {
                        out[[i, base + vocab_len]] = 1.0;
                    } else if (idx as usize) < vocab_len {
                        out[[i, base + idx as usize]] = 1.0;
                    }
                    // unknown (idx == vocab_len) stays an all-zero segment
                }
                base += width;
            }
            _ => return Err(Error::data("column kind mismatch in apply_robust")),
        }
    }
    Ok(out)
}

/// The five ψ flavors. X and C stand for the two internal GBDT
/// configurations (greedy depth-6 and oblivious depth-4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiVariant {
    R,
    X,
    C,
    RX,
    RC,
}

impl PsiVariant {
    pub fn parse(s: &str) -> Result<PsiVariant> {
        match s {
            "R" => Ok(PsiVariant::R),
            "X" => Ok(PsiVariant::X),
            "C" => Ok(PsiVariant::C),
            "RX" => Ok(PsiVariant::RX),
            "RC" => Ok(PsiVariant::RC),
            other => Err(Error::config(format!(
                "unknown preprocessing variant '{}' (expected R, X, C, RX, or RC)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PsiVariant::R => "R",
            PsiVariant::X => "X",
            PsiVariant::C => "C",
            PsiVariant::RX => "RX",
            PsiVariant::RC => "RC",
        }
    }

    pub fn uses_robust(self) -> bool {
        matches!(self, PsiVariant::R | PsiVariant::RX | PsiVariant::RC)
    }

    pub fn uses_gbdt(self) -> bool {
        !matches!(self, PsiVariant::R)
    }

    /// Base GBDT configuration for the variant's tree flavor.
    pub fn base_gbdt_config(self) -> Option<GbdtConfig> {
        match self {
            PsiVariant::R => None,
            PsiVariant::X | PsiVariant::RX => Some(GbdtConfig::variant_x()),
            PsiVariant::C | PsiVariant::RC => Some(GbdtConfig::variant_c()),
        }
    }
}

/// Fitted ψ state: whichever of the robust scaler and GBDT embedding the
/// variant requires.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiState {
    pub variant: PsiVariant,
    pub robust: Option<RobustScalerState>,
    pub gbdt: Option<GbdtModel>,
}

impl PsiState {
    /// Fit the variant's constituents. The robust scaler fits on
    /// `robust_rows`; the GBDT fits on `gbdt_rows` (the dynamic-split subset
    /// at inference time). `rounds` and `learning_rate` override the
    /// variant's base GBDT config; depth and growth shape stay fixed per
    /// variant.
    pub fn fit(
        variant: PsiVariant,
        task: &TabularTask,
        robust_rows: &[usize],
        gbdt_rows: &[usize],
        rounds: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<PsiState> {
        let robust = if variant.uses_robust() {
            Some(fit_robust(task, robust_rows)?)
        } else {
            None
        };
        let gbdt = if let Some(base) = variant.base_gbdt_config() {
            let cfg = GbdtConfig { max_rounds: rounds, learning_rate, ..base };
            let x = task.numeric_view(gbdt_rows);
            let model = match &task.target {
                TargetData::Classes(y) => {
                    let sub: Vec<u32> = gbdt_rows.iter().map(|&r| y[r]).collect();
                    gbdt::fit_gbdt(&x.view(), &FitTarget::Classes { y: &sub, k: task.k }, &cfg, seed)?
                }
                TargetData::Reals(y) => {
                    let sub: Vec<f64> = gbdt_rows.iter().map(|&r| y[r]).collect();
                    gbdt::fit_gbdt(&x.view(), &FitTarget::Reals(&sub), &cfg, seed)?
                }
            };
            Some(model)
        } else {
            None
        };
        Ok(PsiState { variant, robust, gbdt })
    }

    /// Combined output width m.
    pub fn width(&self) -> usize {
        let r = self.robust.as_ref().map_or(0, |s| s.m_r);
        let g = self.gbdt.as_ref().map_or(0, |m| m.total_leaves);
        r + g
    }

    /// ψ of the selected rows: `[robust ‖ gbdt one-hot]` per the variant.
    pub fn transform(&self, task: &TabularTask, rows: &[usize]) -> Result<Array2<f64>> {
        let robust_part = match (&self.robust, self.variant.uses_robust()) {
            (Some(state), true) => Some(apply_robust(state, task, rows)?),
            (None, false) => None,
            _ => return Err(Error::data("psi state missing its robust constituent")),
        };
        let gbdt_part = match (&self.gbdt, self.variant.uses_gbdt()) {
            (Some(model), true) => {
                let x = task.numeric_view(rows);
                Some(gbdt::embed(model, &x.view())?)
            }
            (None, false) => None,
            _ => return Err(Error::data("psi state missing its gbdt constituent")),
        };
        match (robust_part, gbdt_part) {
            (Some(r), Some(g)) => {
                let mut out = Array2::zeros((rows.len(), r.ncols() + g.ncols()));
                out.slice_mut(s![.., ..r.ncols()]).assign(&r);
                out.slice_mut(s![.., r.ncols()..]).assign(&g);
                Ok(out)
            }
            (Some(r), None) => Ok(r),
            (None, Some(g)) => Ok(g),
            (None, None) => Err(Error::data("psi state has no constituents")),
        }
    }
}
