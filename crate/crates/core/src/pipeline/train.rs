use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::augment_case;
use crate::autodiff::{NdArray, Tape};
use crate::metrics::{case_report, dice_metric, AggregateScores};
use crate::models::{sliding_window_predict, Checkpoint, UNet};
use crate::optim::OptimizerState;
use crate::volume::{argmax_mask, MultiModalCase};

use super::config::{PipelineConfig, StageConfig};
use super::data::{
    binary_input, binary_target, multiclass_training_crop, random_patch, stack_batch,
};
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Binary,
    Multiclass,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Binary => "binary",
            Stage::Multiclass => "multiclass",
        }
    }
}

/// One line of the training log. Epoch 0 is the untrained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    /// Mean region dice (multiclass) or tumor dice (binary).
    pub val_dice: f64,
    pub val_whole: Option<f64>,
    pub val_core: Option<f64>,
    pub val_enh: Option<f64>,
    pub seconds: f64,
    pub best: bool,
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub model: UNet,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
}

struct ValScores {
    dice: f64,
    regions: Option<AggregateScores>,
}

fn epoch_seed(seed: u64, stage: Stage, epoch: usize) -> u64 {
    let tag = match stage {
        Stage::Binary => 0x0B,
        Stage::Multiclass => 0x0C,
    };
    seed ^ (tag << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn open(out_dir: Option<&Path>, stage: Stage) -> Result<Self, PipelineError> {
        match out_dir {
            None => Ok(Self(None)),
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let f = File::create(dir.join(format!("{}_log.jsonl", stage.name())))?;
                Ok(Self(Some(BufWriter::new(f))))
            }
        }
    }

    fn write(&mut self, rec: &EpochRecord) -> Result<(), PipelineError> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, rec).map_err(PipelineError::data)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Generic loop shared by both stages.
#[allow(clippy::too_many_arguments)]
fn fit(
    stage: Stage,
    cfg: &StageConfig,
    seed: u64,
    out_dir: Option<&Path>,
    sample: &dyn Fn(usize) -> Result<Vec<(NdArray<f32>, NdArray<f32>)>, PipelineError>,
    validate: &dyn Fn(&UNet) -> Result<ValScores, PipelineError>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, PipelineError> {
    let mut model = UNet::new(cfg.model.clone(), seed)?;
    let mut flat = model.params.flatten();
    let mut opt = cfg.optimizer.build(flat.len(), cfg.adam, cfg.lookahead)?;
    let mut log = LogSink::open(out_dir, stage)?;
    let mut history = Vec::new();

    let started = Instant::now();
    let initial = validate(&model)?;
    let mut best = (0, initial.dice, model.clone(), opt.state());
    let mut record = |epoch,
                      loss,
                      v: &ValScores,
                      best: bool,
                      history: &mut Vec<EpochRecord>|
     -> Result<(), PipelineError> {
        let rec = EpochRecord {
            stage,
            epoch,
            train_loss: loss,
            val_dice: v.dice,
            val_whole: v.regions.as_ref().map(|r| r.whole),
            val_core: v.regions.as_ref().map(|r| r.core),
            val_enh: v.regions.as_ref().map(|r| r.enh),
            seconds: started.elapsed().as_secs_f64(),
            best,
        };
        log.write(&rec)?;
        on_epoch(&rec);
        history.push(rec);
        Ok(())
    };
    record(0, None, &initial, true, &mut history)?;

    for epoch in 1..=cfg.epochs {
        let samples = sample(epoch)?;
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in samples.chunks(cfg.batch_size) {
            let xs: Vec<NdArray<f32>> = chunk.iter().map(|(x, _)| x.clone()).collect();
            let ys: Vec<NdArray<f32>> = chunk.iter().map(|(_, y)| y.clone()).collect();
            let tape = Tape::new();
            let bound = tape.bind(&model.params);
            let (_, probs) = cfg
                .model
                .forward(&bound, &tape.constant(stack_batch(&xs)?))?;
            let loss = cfg
                .loss
                .evaluate(&probs, &tape.constant(stack_batch(&ys)?))?;
            let value = loss.item().map(f64::from).unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(PipelineError::Numeric(format!(
                    "{} stage: non-finite loss at epoch {epoch}",
                    stage.name()
                )));
            }
            let grads = tape.backward(loss)?.flatten_like(&model.params)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(PipelineError::Numeric(format!(
                    "{} stage: non-finite gradient at epoch {epoch}",
                    stage.name()
                )));
            }
            opt.step(&mut flat, &grads)?;
            model.params.unflatten(&flat)?;
            total += value;
            batches += 1;
        }
        let v = validate(&model)?;
        let improved = v.dice > best.1;
        if improved {
            best = (epoch, v.dice, model.clone(), opt.state());
        }
        record(
            epoch,
            Some(total / batches.max(1) as f64),
            &v,
            improved,
            &mut history,
        )?;
        if improved {
            if let Some(dir) = out_dir {
                let mut ckpt = Checkpoint::new(model.clone());
                ckpt.optimizer = Some(best.3.clone());
                ckpt.metadata = serde_json::json!({
                    "stage": stage.name(),
                    "epoch": epoch,
                    "val_dice": v.dice,
                    "seed": seed,
                });
                ckpt.save(&dir.join(format!("{}.ckpt", stage.name())))?;
            }
        }
    }
    if best.0 == 0 {
        if let Some(dir) = out_dir {
            Checkpoint::new(best.2.clone()).save(&dir.join(format!("{}.ckpt", stage.name())))?;
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        best_epoch: best.0,
        best_val_dice: best.1,
        history,
        optimizer: best.3,
    })
}

fn augmented(
    case: &MultiModalCase,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<MultiModalCase, PipelineError> {
    Ok(augment_case(case, &cfg.augment, seed)?)
}

/// Train the whole-brain tumor detector. Validation dice is the
/// thresholded tumor dice on the resized grid.
pub fn train_binary(
    cfg: &PipelineConfig,
    train: &[MultiModalCase],
    val: &[MultiModalCase],
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, PipelineError> {
    let stage = &cfg.binary;
    let dims = stage.model.input_dims;
    let sample = |epoch: usize| -> Result<Vec<(NdArray<f32>, NdArray<f32>)>, PipelineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, Stage::Binary, epoch));
        let mut jobs: Vec<(usize, u64)> = (0..train.len())
            .flat_map(|i| std::iter::repeat_n(i, stage.samples_per_case))
            .map(|i| (i, 0))
            .collect();
        jobs.shuffle(&mut rng);
        jobs.iter_mut().for_each(|j| j.1 = rng.gen());
        jobs.par_iter()
            .map(|&(i, s)| {
                let case = augmented(&train[i], cfg, s)?;
                let (x, brain) = binary_input(&case, dims);
                Ok((x, binary_target(&case, brain, dims)?))
            })
            .collect()
    };
    let prepared: Vec<(NdArray<f32>, NdArray<f32>)> = val
        .par_iter()
        .map(|c| {
            let (x, brain) = binary_input(c, dims);
            Ok((x, binary_target(c, brain, dims)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let threshold = cfg.roi.threshold;
    let validate = |model: &UNet| -> Result<ValScores, PipelineError> {
        if prepared.is_empty() {
            return Ok(ValScores {
                dice: 0.0,
                regions: None,
            });
        }
        let scores: Vec<f64> = prepared
            .par_iter()
            .map(|(x, y)| -> Result<f64, PipelineError> {
                let p = model.forward_array(x)?;
                let pred: Vec<bool> = p.probs.data().iter().map(|&v| v > threshold).collect();
                let truth: Vec<bool> = y.data().iter().map(|&v| v > 0.5).collect();
                Ok(dice_metric(&pred, &truth))
            })
            .collect::<Result<_, _>>()?;
        Ok(ValScores {
            dice: scores.iter().sum::<f64>() / scores.len() as f64,
            regions: None,
        })
    };
    fit(
        Stage::Binary,
        stage,
        cfg.seed,
        out_dir,
        &sample,
        &validate,
        on_epoch,
    )
}

/// Train the multiclass segmenter on ground-truth tumor crops (or on the
/// whole volume when `use_roi` is off). Validation runs sliding-window
/// inference over the same crops and scores the three regions.
pub fn train_multiclass(
    cfg: &PipelineConfig,
    train: &[MultiModalCase],
    val: &[MultiModalCase],
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, PipelineError> {
    let stage = &cfg.multiclass;
    let patch = stage.model.input_dims;
    let view = |c: &MultiModalCase| -> Result<MultiModalCase, PipelineError> {
        if cfg.use_roi {
            multiclass_training_crop(c, cfg)
        } else {
            Ok(c.clone())
        }
    };
    let sample = |epoch: usize| -> Result<Vec<(NdArray<f32>, NdArray<f32>)>, PipelineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, Stage::Multiclass, epoch));
        let mut jobs: Vec<(usize, u64)> = (0..train.len())
            .flat_map(|i| std::iter::repeat_n(i, stage.samples_per_case))
            .map(|i| (i, 0))
            .collect();
        jobs.shuffle(&mut rng);
        jobs.iter_mut().for_each(|j| j.1 = rng.gen());
        jobs.par_iter()
            .map(|&(i, s)| {
                let case = view(&augmented(&train[i], cfg, s)?)?;
                let mut local = ChaCha8Rng::seed_from_u64(s ^ 0x5EED);
                random_patch(&case, patch, &mut local)
            })
            .collect()
    };
    let val_views: Vec<MultiModalCase> = val.iter().map(view).collect::<Result<_, _>>()?;
    let validate = |model: &UNet| -> Result<ValScores, PipelineError> {
        if val_views.is_empty() {
            return Ok(ValScores {
                dice: 0.0,
                regions: None,
            });
        }
        let scores = val_views
            .iter()
            .map(|c| -> Result<_, PipelineError> {
                let p = sliding_window_predict(model, &c.to_tensor(), &cfg.patch)?;
                let truth = c.label.as_ref().expect("validation cases carry labels");
                Ok(case_report(&c.case_id, &argmax_mask(&p.probs), truth)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let agg = crate::metrics::aggregate(&scores);
        Ok(ValScores {
            dice: agg.mean,
            regions: Some(agg),
        })
    };
    fit(
        Stage::Multiclass,
        stage,
        cfg.seed,
        out_dir,
        &sample,
        &validate,
        on_epoch,
    )
}
