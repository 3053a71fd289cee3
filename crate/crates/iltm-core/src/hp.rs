//! Hyperparameter search space: one draw covers every tunable knob of the
//! fit-and-predict pipeline, with a fixed default configuration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::inference::{FineTuneConfig, FitTaskConfig};
use crate::preprocess::PsiVariant;
use crate::rng::rng_for;

/// Rows used when fine-tuning an ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtData {
    /// Resample the fitting rows with replacement.
    Bootstrap,
    /// Use every fitting row once.
    Entire,
}

impl FtData {
    pub fn parse(s: &str) -> Result<FtData> {
        match s {
            "bootstrap" => Ok(FtData::Bootstrap),
            "entire" => Ok(FtData::Entire),
            other => Err(Error::config(format!(
                "unknown fine-tune data mode '{}' (expected bootstrap or entire)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FtData::Bootstrap => "bootstrap",
            FtData::Entire => "entire",
        }
    }
}

/// Rows used when fitting the tree embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GbdtSplit {
    /// Size-dependent split between fitting rows and embedding rows.
    Dynamic,
    /// Fit on every training row.
    Entire,
}

impl GbdtSplit {
    pub fn parse(s: &str) -> Result<GbdtSplit> {
        match s {
            "dynamic" => Ok(GbdtSplit::Dynamic),
            "entire" => Ok(GbdtSplit::Entire),
            other => Err(Error::config(format!(
                "unknown GBDT data split '{}' (expected dynamic or entire)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GbdtSplit::Dynamic => "dynamic",
            GbdtSplit::Entire => "entire",
        }
    }
}

/// One point in the hyperparameter search space.
#[derive(Debug, Clone, PartialEq)]
pub struct HpSample {
    pub preprocessing: PsiVariant,
    pub batch_size: usize,
    pub n_ens: usize,
    pub feature_bagging: bool,
    pub do_finetune: bool,
    pub ft_dropout: f64,
    pub ft_max_steps: usize,
    pub ft_learning_rate: f64,
    pub ft_data: FtData,
    pub gbdt_split: GbdtSplit,
    pub gbdt_refit_per_member: bool,
    pub gbdt_rounds: usize,
    /// `None` keeps the embedding variant's own learning rate.
    pub gbdt_learning_rate: Option<f64>,
    pub do_retrieval: bool,
    pub tau: f64,
    pub alpha: f64,
}

impl Default for HpSample {
    fn default() -> HpSample {
        HpSample {
            preprocessing: PsiVariant::RX,
            batch_size: 2048,
            n_ens: 8,
            feature_bagging: true,
            do_finetune: true,
            ft_dropout: 0.0,
            ft_max_steps: 1024,
            ft_learning_rate: 1e-4,
            ft_data: FtData::Entire,
            gbdt_split: GbdtSplit::Dynamic,
            gbdt_refit_per_member: false,
            gbdt_rounds: 100,
            gbdt_learning_rate: None,
            do_retrieval: true,
            tau: 2.0,
            alpha: 0.5,
        }
    }
}

const PREPROCESSING_LEVELS: [PsiVariant; 5] = [
    PsiVariant::R,
    PsiVariant::X,
    PsiVariant::C,
    PsiVariant::RX,
    PsiVariant::RC,
];
const BATCH_LEVELS: [usize; 2] = [1024, 2048];
const N_ENS_LEVELS: [usize; 7] = [1, 2, 4, 8, 12, 16, 20];
const DROPOUT_LEVELS: [f64; 2] = [0.0, 0.15];
const FT_STEP_LEVELS: [usize; 3] = [4, 512, 1024];
const GBDT_ROUND_LEVELS: [usize; 2] = [100, 300];
pub const FT_LR_RANGE: (f64, f64) = (1e-6, 1e-2);
pub const GBDT_LR_RANGE: (f64, f64) = (0.01, 0.5);
pub const TAU_RANGE: (f64, f64) = (0.5, 3.0);
pub const ALPHA_RANGE: (f64, f64) = (0.0, 1.0);

const HP_TAG: u64 = 0x4850_534d;

fn log_uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn uniform(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    lo + rng.gen::<f64>() * (hi - lo)
}

fn pick<T: Copy>(rng: &mut impl Rng, levels: &[T]) -> T {
    levels[rng.gen_range(0..levels.len())]
}

/// Draw one search-space point. Every field is sampled independently:
/// categoricals uniformly over their levels, continuous fields uniformly or
/// log-uniformly over their ranges.
pub fn sample_hyperparams(seed: u64) -> HpSample {
    let mut rng = rng_for(seed, &[HP_TAG]);
    HpSample {
        preprocessing: pick(&mut rng, &PREPROCESSING_LEVELS),
        batch_size: pick(&mut rng, &BATCH_LEVELS),
        n_ens: pick(&mut rng, &N_ENS_LEVELS),
        feature_bagging: rng.gen_range(0..2) == 1,
        do_finetune: rng.gen_range(0..2) == 1,
        ft_dropout: pick(&mut rng, &DROPOUT_LEVELS),
        ft_max_steps: pick(&mut rng, &FT_STEP_LEVELS),
        ft_learning_rate: log_uniform(&mut rng, FT_LR_RANGE),
        ft_data: pick(&mut rng, &[FtData::Bootstrap, FtData::Entire]),
        gbdt_split: pick(&mut rng, &[GbdtSplit::Dynamic, GbdtSplit::Entire]),
        gbdt_refit_per_member: rng.gen_range(0..2) == 1,
        gbdt_rounds: pick(&mut rng, &GBDT_ROUND_LEVELS),
        gbdt_learning_rate: Some(log_uniform(&mut rng, GBDT_LR_RANGE)),
        do_retrieval: rng.gen_range(0..2) == 1,
        tau: uniform(&mut rng, TAU_RANGE),
        alpha: uniform(&mut rng, ALPHA_RANGE),
    }
}

impl HpSample {
    /// Overlay the sampled knobs onto a fit configuration, leaving the fields
    /// outside the search space (widths, caps, seed) untouched.
    pub fn apply_to(&self, cfg: &mut FitTaskConfig) {
        cfg.variant = self.preprocessing;
        cfg.batch_size = self.batch_size;
        cfg.n_ens = self.n_ens;
        cfg.feature_bagging = self.feature_bagging;
        cfg.fine_tune = if self.do_finetune {
            Some(FineTuneConfig {
                learning_rate: self.ft_learning_rate,
                max_steps: self.ft_max_steps,
                dropout: self.ft_dropout,
                bootstrap: self.ft_data == FtData::Bootstrap,
                ..FineTuneConfig::default()
            })
        } else {
            None
        };
        cfg.gbdt_split_entire = self.gbdt_split == GbdtSplit::Entire;
        cfg.gbdt_refit_per_member = self.gbdt_refit_per_member;
        cfg.gbdt_rounds = self.gbdt_rounds;
        cfg.gbdt_learning_rate = self.gbdt_learning_rate;
        cfg.retrieval = self.do_retrieval;
        cfg.tau = self.tau;
        cfg.alpha = self.alpha;
    }

    /// Flat key=value view, in a stable order, for manifests and reports.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let gbdt_lr = match self.gbdt_learning_rate {
            Some(lr) => format!("{lr}"),
            None => "default".to_string(),
        };
        vec![
            ("preprocessing".into(), self.preprocessing.name().into()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("n_ens".into(), self.n_ens.to_string()),
            ("feature_bagging".into(), self.feature_bagging.to_string()),
            ("do_finetune".into(), self.do_finetune.to_string()),
            ("ft_dropout".into(), format!("{}", self.ft_dropout)),
            ("ft_max_steps".into(), self.ft_max_steps.to_string()),
            ("ft_learning_rate".into(), format!("{}", self.ft_learning_rate)),
            ("ft_data".into(), self.ft_data.name().into()),
            ("gbdt_split".into(), self.gbdt_split.name().into()),
            (
                "gbdt_refit_per_member".into(),
                self.gbdt_refit_per_member.to_string(),
            ),
            ("gbdt_rounds".into(), self.gbdt_rounds.to_string()),
            ("gbdt_learning_rate".into(), gbdt_lr),
            ("do_retrieval".into(), self.do_retrieval.to_string()),
            ("tau".into(), format!("{}", self.tau)),
            ("alpha".into(), format!("{}", self.alpha)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_matches_reference_column() {
        let d = HpSample::default();
        assert_eq!(d.preprocessing, PsiVariant::RX);
        assert_eq!(d.batch_size, 2048);
        assert_eq!(d.n_ens, 8);
        assert!(d.feature_bagging);
        assert!(d.do_finetune);
        assert_eq!(d.ft_dropout, 0.0);
        assert_eq!(d.ft_max_steps, 1024);
        assert_eq!(d.ft_learning_rate, 1e-4);
        assert_eq!(d.ft_data, FtData::Entire);
        assert_eq!(d.gbdt_split, GbdtSplit::Dynamic);
        assert!(!d.gbdt_refit_per_member);
        assert_eq!(d.gbdt_rounds, 100);
        assert_eq!(d.gbdt_learning_rate, None);
        assert!(d.do_retrieval);
        assert_eq!(d.tau, 2.0);
        assert_eq!(d.alpha, 0.5);
    }

    #[test]
    fn draws_are_reproducible() {
        let a = sample_hyperparams(42);
        let b = sample_hyperparams(42);
        assert_eq!(a, b);
        let c = sample_hyperparams(43);
        assert_ne!(a, c);
    }

    #[test]
    fn ten_thousand_draws_cover_every_level_and_respect_ranges() {
        let mut pre = HashSet::new();
        let mut batch = HashSet::new();
        let mut ens = HashSet::new();
        let mut bag = HashSet::new();
        let mut ft = HashSet::new();
        let mut drop = HashSet::new();
        let mut steps = HashSet::new();
        let mut ft_data = HashSet::new();
        let mut split = HashSet::new();
        let mut refit = HashSet::new();
        let mut rounds = HashSet::new();
        let mut retr = HashSet::new();
        for seed in 0..10_000u64 {
            let s = sample_hyperparams(seed);
            pre.insert(s.preprocessing.name());
            batch.insert(s.batch_size);
            ens.insert(s.n_ens);
            bag.insert(s.feature_bagging);
            ft.insert(s.do_finetune);
            drop.insert(format!("{}", s.ft_dropout));
            steps.insert(s.ft_max_steps);
            ft_data.insert(s.ft_data.name());
            split.insert(s.gbdt_split.name());
            refit.insert(s.gbdt_refit_per_member);
            rounds.insert(s.gbdt_rounds);
            retr.insert(s.do_retrieval);
            assert!(s.ft_learning_rate >= 1e-6 && s.ft_learning_rate <= 1e-2);
            let glr = s.gbdt_learning_rate.expect("sampled draws pick a rate");
            assert!(glr >= 0.01 && glr <= 0.5);
            assert!(s.tau >= 0.5 && s.tau <= 3.0);
            assert!(s.alpha >= 0.0 && s.alpha <= 1.0);
        }
        assert_eq!(pre.len(), 5);
        assert_eq!(batch.len(), 2);
        assert_eq!(ens.len(), 7);
        assert_eq!(bag.len(), 2);
        assert_eq!(ft.len(), 2);
        assert_eq!(drop.len(), 2);
        assert_eq!(steps.len(), 3);
        assert_eq!(ft_data.len(), 2);
        assert_eq!(split.len(), 2);
        assert_eq!(refit.len(), 2);
        assert_eq!(rounds.len(), 2);
        assert_eq!(retr.len(), 2);
    }

    #[test]
    fn log_uniform_fields_spread_across_decades() {
        let mut low = 0usize;
        let mut high = 0usize;
        for seed in 0..10_000u64 {
            let s = sample_hyperparams(seed);
            if s.ft_learning_rate < 1e-4 {
                low += 1;
            } else {
                high += 1;
            }
        }
        let frac = low as f64 / (low + high) as f64;
        assert!(
            (frac - 0.5).abs() < 0.05,
            "log-uniform split at the geometric midpoint was {frac}"
        );
    }

    #[test]
    fn apply_to_overlays_only_search_space_fields() {
        let mut cfg = FitTaskConfig {
            r: 777,
            context_cap: 123,
            seed: 9,
            ..FitTaskConfig::default()
        };
        let s = HpSample {
            preprocessing: PsiVariant::C,
            batch_size: 1024,
            n_ens: 4,
            feature_bagging: false,
            do_finetune: false,
            gbdt_split: GbdtSplit::Entire,
            gbdt_rounds: 300,
            gbdt_learning_rate: Some(0.3),
            do_retrieval: false,
            tau: 1.5,
            alpha: 0.25,
            ..HpSample::default()
        };
        s.apply_to(&mut cfg);
        assert_eq!(cfg.variant, PsiVariant::C);
        assert_eq!(cfg.batch_size, 1024);
        assert_eq!(cfg.n_ens, 4);
        assert!(!cfg.feature_bagging);
        assert!(cfg.fine_tune.is_none());
        assert!(cfg.gbdt_split_entire);
        assert_eq!(cfg.gbdt_rounds, 300);
        assert_eq!(cfg.gbdt_learning_rate, Some(0.3));
        assert!(!cfg.retrieval);
        assert_eq!(cfg.tau, 1.5);
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.r, 777);
        assert_eq!(cfg.context_cap, 123);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn finetune_overlay_builds_matching_config() {
        let mut cfg = FitTaskConfig::default();
        let s = HpSample {
            ft_dropout: 0.15,
            ft_max_steps: 4,
            ft_learning_rate: 3e-3,
            ft_data: FtData::Bootstrap,
            ..HpSample::default()
        };
        s.apply_to(&mut cfg);
        let ft = cfg.fine_tune.expect("finetune enabled by default");
        assert_eq!(ft.dropout, 0.15);
        assert_eq!(ft.max_steps, 4);
        assert_eq!(ft.learning_rate, 3e-3);
        assert!(ft.bootstrap);
    }

    #[test]
    fn key_values_round_trip_names() {
        let kv = HpSample::default().to_key_values();
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .unwrap()
        };
        assert_eq!(get("preprocessing"), "RX");
        assert_eq!(get("gbdt_learning_rate"), "default");
        assert_eq!(get("ft_data"), "entire");
        assert_eq!(get("gbdt_split"), "dynamic");
        assert_eq!(get("tau"), "2");
        assert_eq!(get("alpha"), "0.5");
    }

    #[test]
    fn parse_rejects_unknown_modes() {
        assert!(FtData::parse("entire").is_ok());
        assert!(FtData::parse("all").is_err());
        assert!(GbdtSplit::parse("dynamic").is_ok());
        assert!(GbdtSplit::parse("half").is_err());
    }
}
