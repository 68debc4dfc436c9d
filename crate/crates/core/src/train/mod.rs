//! Optimization loop and the experiment harnesses built on it.

mod harness;
mod optim;
mod trainer;

pub use harness::{ablation_selections, run_ablation, run_comparison, COMPARISON_KINDS};
pub use optim::{Adam, Plateau};
pub use trainer::{
    train, EpochRecord, Event, StepRecord, TrainOptions, TrainOutcome, TrainState, BEST_CHECKPOINT,
    EVENTS_FILE, LAST_CHECKPOINT, LOG_FILE,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_case, normalize_case, read_manifest, read_split, AugmentSpec, CaseBundle, InputSelection,
    Split,
};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{self, Checkpoint, EncoderKind, ModelConfig, Params};
use crate::warp::{predict_anatomy, Dvf, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum decrease of the validation loss that counts as progress.
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// Sum per-case gradients in batch order instead of completion order.
    pub deterministic: bool,
    pub weights: LossWeights,
    pub augment: AugmentSpec,
    pub input: InputSelection,
    /// Overrides the model config's encoder when set.
    pub encoder_kind: Option<EncoderKind>,
    /// Depth of the prepared-case queue between loader and optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            lr0: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_threshold: 1e-6,
            min_lr: 1e-6,
            seed: 0,
            deterministic: true,
            weights: LossWeights::default(),
            augment: AugmentSpec::default(),
            input: InputSelection::default(),
            encoder_kind: None,
            prefetch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            ));
        }
        if !(self.lr0 > 0.0) || !(self.min_lr >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rates and adam_eps must be positive".into());
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.prefetch == 0 {
            return bad("prefetch must be at least 1".into());
        }
        self.weights.validate()?;
        self.augment.validate()
    }

    /// The model config this run trains.
    pub fn model_for(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if let Some(k) = self.encoder_kind {
            m.encoder_kind = k;
        }
        m
    }
}

/// Cases with their split, intensities normalized, held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: Option<PathBuf>,
    pub cases: Vec<CaseBundle>,
    pub split: Split,
}

impl Corpus {
    /// Loads a corpus directory (manifest plus split file). Cases whose
    /// manifest row is not marked normalized are normalized on load.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = read_manifest(dir)?;
        let split = read_split(dir)?;
        let mut cases = Vec::with_capacity(entries.len());
        for e in &entries {
            let c = load_case(dir, e)?;
            cases.push(if e.normalized { c } else { normalize_case(&c)? });
        }
        Corpus::from_cases(cases, split).map(|mut c| {
            c.dir = Some(dir.to_path_buf());
            c
        })
    }

    pub fn from_cases(cases: Vec<CaseBundle>, split: Split) -> Result<Self> {
        let corpus = Corpus {
            dir: None,
            cases,
            split,
        };
        for id in corpus
            .split
            .train
            .iter()
            .chain(&corpus.split.val)
            .chain(&corpus.split.test)
        {
            corpus.get(id)?;
        }
        Ok(corpus)
    }

    pub fn get(&self, id: &str) -> Result<&CaseBundle> {
        self.cases.iter().find(|c| c.case_id == id).ok_or_else(|| {
            Error::Missing(format!("case {id} is in the split but not in the corpus"))
        })
    }

    pub fn subset(&self, ids: &[String]) -> Result<Vec<&CaseBundle>> {
        ids.iter().map(|id| self.get(id)).collect()
    }
}

/// SplitMix64 finalizer: derives independent stream seeds from a run seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Input selection a checkpoint was trained with (defaults when absent).
pub fn checkpoint_input(ck: &Checkpoint) -> Result<InputSelection> {
    let v = ck
        .meta
        .get("input")
        .or_else(|| ck.meta.get("config").and_then(|c| c.get("input")));
    match v {
        Some(v) => Ok(serde_json::from_value(v.clone())?),
        None => Ok(InputSelection::default()),
    }
}

/// Runs the network on one case and deforms its baseline anatomy.
pub fn predict(
    c: &CaseBundle,
    params: &Params<f32>,
    model: &ModelConfig,
    sel: &InputSelection,
) -> Result<(Prediction, Dvf)> {
    let stack = crate::dataset::stack_input(c, sel)?;
    let dvf = model::forward(&stack, params, model, c.ct.spacing_mm)?;
    Ok((predict_anatomy(c, &dvf, sel)?, dvf))
}
