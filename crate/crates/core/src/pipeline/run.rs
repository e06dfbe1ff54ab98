use std::path::Path;
use std::time::Instant;

use crate::volume::MultiModalCase;

use super::config::PipelineConfig;
use super::data::split_cases;
use super::evaluate::{evaluate_cases, EvaluationReport};
use super::predict::{CasePrediction, Segmenter};
use super::train::{train_binary, train_multiclass, EpochRecord, TrainOutcome};
use super::PipelineError;

/// Result of [`run_experiment`].
pub struct ExperimentOutcome {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// `None` when the configuration skips the ROI stage.
    pub binary: Option<TrainOutcome>,
    pub multiclass: TrainOutcome,
    pub predictions: Vec<CasePrediction>,
    /// Validation cases scored on their own grids through the full
    /// inference path.
    pub report: EvaluationReport,
    pub seconds: f64,
}

/// Split `cases`, train the binary stage (when `use_roi`) and the
/// multiclass stage, then run full inference on the validation cases and
/// score them.
pub fn run_experiment(
    cfg: &PipelineConfig,
    cases: &[MultiModalCase],
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<ExperimentOutcome, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let (train_idx, val_idx) = split_cases(cases.len(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(PipelineError::Config(format!(
            "{} cases cannot be split into non-empty training and validation sets",
            cases.len()
        )));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&train_idx), pick(&val_idx));

    let binary = if cfg.use_roi {
        Some(train_binary(cfg, &train, &val, out_dir, on_epoch)?)
    } else {
        None
    };
    let multiclass = train_multiclass(cfg, &train, &val, out_dir, on_epoch)?;

    let segmenter = Segmenter::new(
        cfg.clone(),
        binary.as_ref().map(|b| b.model.clone()),
        multiclass.model.clone(),
    )?;
    let predictions = val
        .iter()
        .map(|c| segmenter.predict(c, cfg.tta))
        .collect::<Result<Vec<_>, _>>()?;
    let truths: Vec<_> = val
        .iter()
        .map(|c| {
            c.label
                .clone()
                .ok_or_else(|| PipelineError::Data(format!("{} has no label", c.case_id)))
        })
        .collect::<Result<_, _>>()?;
    let report = evaluate_cases(
        predictions
            .iter()
            .zip(&truths)
            .map(|(p, t)| (p.case_id.as_str(), &p.mask, t)),
    )?;
    Ok(ExperimentOutcome {
        train_ids: train.iter().map(|c| c.case_id.clone()).collect(),
        val_ids: val.iter().map(|c| c.case_id.clone()).collect(),
        binary,
        multiclass,
        predictions,
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}
