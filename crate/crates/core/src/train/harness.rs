//! Encoder comparison and input ablation: several training runs on one
//! split, evaluated on the held-out cases.

use std::path::Path;

use super::{predict, train, Corpus, TrainConfig, TrainOptions};
use crate::dataset::{Baseline, InputSelection};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, evaluate_prediction, evaluate_reference, CaseRows, MetricsReport, SUBJECT_CBCT01,
    SUBJECT_CT,
};
use crate::model::{EncoderKind, ModelConfig, Params};

/// Encoders of the comparison, in report order.
pub const COMPARISON_KINDS: [EncoderKind; 3] = [
    EncoderKind::SwinHierarchical,
    EncoderKind::ConvPyramid,
    EncoderKind::PlainViT,
];

/// The five ablation inputs: CT, dose and masks removed in turn, then the
/// full input with either image as baseline.
pub fn ablation_selections() -> [InputSelection; 5] {
    let all = InputSelection::default();
    [
        InputSelection {
            use_ct: false,
            ..all
        },
        InputSelection {
            use_dose: false,
            ..all
        },
        InputSelection {
            use_gtv_masks: false,
            ..all
        },
        InputSelection {
            baseline: Baseline::Ct,
            ..all
        },
        all,
    ]
}

fn test_cases(corpus: &Corpus) -> Result<Vec<&crate::dataset::CaseBundle>> {
    let cases = corpus.subset(&corpus.split.test)?;
    if cases.is_empty() {
        return Err(Error::Invalid("the test split is empty".into()));
    }
    Ok(cases)
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Trains one model per entry of `runs` and appends its test-case rows.
fn evaluate_runs(
    corpus: &Corpus,
    runs: &[(String, TrainConfig)],
    model: &ModelConfig,
    out_dir: &Path,
    rows: &mut [CaseRows],
) -> Result<()> {
    let tests = test_cases(corpus)?;
    for (label, cfg) in runs {
        log::info!("training {label}");
        let outcome = train(
            corpus,
            cfg,
            model,
            &out_dir.join(slug(label)),
            &TrainOptions::default(),
        )?;
        let params: &Params<f32> = &outcome.best_params;
        for (c, r) in tests.iter().zip(rows.iter_mut()) {
            let (p, _) = predict(c, params, &outcome.model, &cfg.input)?;
            r.rows.push(evaluate_prediction(c, &p, label)?);
        }
    }
    Ok(())
}

/// Encoder comparison: planning CT and CBCT01 references plus one row per
/// encoder, all trained with the same seed and split.
pub fn run_comparison(
    corpus: &Corpus,
    base: &TrainConfig,
    model: &ModelConfig,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let tests = test_cases(corpus)?;
    let mut rows = tests
        .iter()
        .map(|c| {
            Ok(CaseRows {
                case_id: c.case_id.clone(),
                rows: vec![
                    evaluate_reference(c, SUBJECT_CT)?,
                    evaluate_reference(c, SUBJECT_CBCT01)?,
                ],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<(String, TrainConfig)> = COMPARISON_KINDS
        .iter()
        .map(|&k| {
            (
                k.label().to_string(),
                TrainConfig {
                    encoder_kind: Some(k),
                    ..base.clone()
                },
            )
        })
        .collect();
    evaluate_runs(corpus, &runs, model, out_dir, &mut rows)?;
    aggregate("Encoder comparison", rows)
}

/// Input ablation: one row per input configuration.
pub fn run_ablation(
    corpus: &Corpus,
    base: &TrainConfig,
    model: &ModelConfig,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let tests = test_cases(corpus)?;
    let mut rows: Vec<CaseRows> = tests
        .iter()
        .map(|c| CaseRows {
            case_id: c.case_id.clone(),
            rows: Vec::new(),
        })
        .collect();
    let runs: Vec<(String, TrainConfig)> = ablation_selections()
        .into_iter()
        .map(|sel| {
            (
                sel.label(),
                TrainConfig {
                    input: sel,
                    ..base.clone()
                },
            )
        })
        .collect();
    evaluate_runs(corpus, &runs, model, out_dir, &mut rows)?;
    aggregate("Input ablation", rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_labels_are_distinct() {
        let labels: Vec<String> = ablation_selections().iter().map(|s| s.label()).collect();
        let mut d = labels.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 5, "{labels:?}");
        assert_eq!(
            slug("CT+CBCT01+GTV+Dose (Baseline: CT)"),
            "ct_cbct01_gtv_dose_baseline_ct"
        );
    }
}
