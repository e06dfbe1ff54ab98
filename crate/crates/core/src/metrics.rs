//! Hard-mask dice scores and the composite tumor regions.

use serde::{Deserialize, Serialize};

use crate::volume::SegmentationMask;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("grid mismatch: prediction {pred:?} vs truth {truth:?}")]
pub struct GridMismatch {
    pub pred: [usize; 3],
    pub truth: [usize; 3],
}

/// Composite evaluation regions over internal labels
/// (1 necrosis, 2 edema, 3 enhancing).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Whole,
    Core,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Whole, Region::Core, Region::Enhancing];

    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Whole => &[1, 2, 3],
            Region::Core => &[1, 3],
            Region::Enhancing => &[3],
        }
    }

    pub fn contains(self, label: u8) -> bool {
        self.labels().contains(&label)
    }
}

/// `2|P∩T| / (|P| + |T|)`, with two empty masks scoring 1.
pub fn dice_metric(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "masks must have equal length");
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        p += a as usize;
        t += b as usize;
        inter += (a && b) as usize;
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

pub fn region_dice(
    pred: &SegmentationMask,
    truth: &SegmentationMask,
    region: Region,
) -> Result<f64, GridMismatch> {
    if pred.dims() != truth.dims() {
        return Err(GridMismatch {
            pred: pred.dims(),
            truth: truth.dims(),
        });
    }
    let bin = |m: &SegmentationMask| {
        m.labels()
            .iter()
            .map(|&l| region.contains(l))
            .collect::<Vec<_>>()
    };
    Ok(dice_metric(&bin(pred), &bin(truth)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    pub whole: f64,
    pub core: f64,
    pub enh: f64,
    pub mean: f64,
}

pub fn case_report(
    case_id: &str,
    pred: &SegmentationMask,
    truth: &SegmentationMask,
) -> Result<CaseScores, GridMismatch> {
    let whole = region_dice(pred, truth, Region::Whole)?;
    let core = region_dice(pred, truth, Region::Core)?;
    let enh = region_dice(pred, truth, Region::Enhancing)?;
    Ok(CaseScores {
        case_id: case_id.to_string(),
        whole,
        core,
        enh,
        mean: (whole + core + enh) / 3.0,
    })
}

/// Per-region means over a set of cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub whole: f64,
    pub core: f64,
    pub enh: f64,
    pub mean: f64,
    pub cases: usize,
}

pub fn aggregate(scores: &[CaseScores]) -> AggregateScores {
    let n = scores.len().max(1) as f64;
    let avg = |f: fn(&CaseScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    AggregateScores {
        whole: avg(|s| s.whole),
        core: avg(|s| s.core),
        enh: avg(|s| s.enh),
        mean: avg(|s| s.mean),
        cases: scores.len(),
    }
}
