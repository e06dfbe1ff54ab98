use crate::autodiff::NdArray;
use crate::models::{sliding_window_predict, Prediction, UNet};
use crate::roi::{crop_case, restore_grid, restore_mask, select_roi, CropRecord, RoiSelection};
use crate::uncertainty::{confidence_map, tta_aggregate, UncertaintyMap};
use crate::volume::{argmax_mask, MultiModalCase, SegmentationMask, Volume};

use super::config::PipelineConfig;
use super::data::{binary_input, binary_probability_volume};
use super::PipelineError;

/// Trained networks plus the settings that drive inference.
pub struct Segmenter {
    pub config: PipelineConfig,
    /// Needed only when `config.use_roi` is set.
    pub binary: Option<UNet>,
    pub multiclass: UNet,
}

/// Everything produced for one case, on the case's own grid.
#[derive(Clone, Debug)]
pub struct CasePrediction {
    pub case_id: String,
    pub mask: SegmentationMask,
    pub confidence: UncertaintyMap,
    pub record: CropRecord,
    pub roi: Option<RoiSelection>,
    pub binary_probability: Option<Volume>,
}

impl Segmenter {
    pub fn new(
        config: PipelineConfig,
        binary: Option<UNet>,
        multiclass: UNet,
    ) -> Result<Self, PipelineError> {
        if config.use_roi && binary.is_none() {
            return Err(PipelineError::Config(
                "ROI inference needs a binary checkpoint".into(),
            ));
        }
        if multiclass.config.classes != crate::volume::NUM_CLASSES {
            return Err(PipelineError::Config(
                "multiclass network must have four outputs".into(),
            ));
        }
        Ok(Self {
            config,
            binary,
            multiclass,
        })
    }

    /// Binary-stage tumor probability on the case grid.
    pub fn binary_probability(&self, case: &MultiModalCase) -> Result<Volume, PipelineError> {
        let net = self
            .binary
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no binary network loaded".into()))?;
        let (input, brain) = binary_input(case, net.config.input_dims);
        let pred = net.forward_array(&input)?;
        Ok(binary_probability_volume(&pred, case, brain))
    }

    /// Multiclass scores on a (possibly cropped) case.
    pub fn multiclass_scores(
        &self,
        case: &MultiModalCase,
        tta: bool,
    ) -> Result<Prediction, PipelineError> {
        let input: NdArray<f32> = case.to_tensor();
        Ok(if tta {
            tta_aggregate(&self.multiclass, &input, &self.config.patch)?
        } else {
            sliding_window_predict(&self.multiclass, &input, &self.config.patch)?
        })
    }

    /// Binary stage → ROI → multiclass (optionally with test-time
    /// augmentation) → mask and confidence restored to the case grid.
    pub fn predict(
        &self,
        case: &MultiModalCase,
        tta: bool,
    ) -> Result<CasePrediction, PipelineError> {
        let (work, record, roi, binary_probability) = if self.config.use_roi {
            let prob = self.binary_probability(case)?;
            let sel = select_roi(
                &prob,
                case,
                self.config.roi.threshold,
                self.config.roi.tolerance,
            );
            let (crop, record) = crop_case(case, sel.bbox, self.config.roi.min_dims)?;
            (crop, record, Some(sel), Some(prob))
        } else {
            (case.clone(), CropRecord::identity(case.dims()), None, None)
        };
        let scores = self.multiclass_scores(&work, tta)?;
        let mask = restore_mask(&argmax_mask(&scores.probs), &record)?;
        let local = confidence_map(&scores.logits)?;
        // outside the crop the pipeline is certain of background
        let fill = local
            .values()
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max);
        let restored = restore_grid(local.values(), &record, fill)?;
        let spacing = case.modality(crate::volume::Modality::T1).spacing();
        let confidence = UncertaintyMap {
            volume: Volume::new(case.dims(), spacing, restored)
                .map_err(|e| PipelineError::Numeric(e.to_string()))?
                .with_name("confidence"),
        };
        let mut mask = mask;
        mask.spacing = spacing;
        Ok(CasePrediction {
            case_id: case.case_id.clone(),
            mask,
            confidence,
            record,
            roi,
            binary_probability,
        })
    }
}
