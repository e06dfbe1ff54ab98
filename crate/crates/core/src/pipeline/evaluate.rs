use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate, case_report, AggregateScores, CaseScores};
use crate::uncertainty::UncertaintyMap;
use crate::volume::{
    load_case, read_raw, write_raw, DatasetManifest, Modality, NormRegion, SegmentationMask, Volume,
};

use super::predict::CasePrediction;
use super::PipelineError;

/// Percentiles shown in the qualitative report.
pub const PERCENTILES: [u32; 5] = [0, 25, 50, 75, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: Vec<CaseScores>,
    pub aggregate: AggregateScores,
}

impl EvaluationReport {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).map_err(PipelineError::data)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
    }
}

/// Score `(case_id, prediction, truth)` triples.
pub fn evaluate_cases<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a SegmentationMask, &'a SegmentationMask)>,
) -> Result<EvaluationReport, PipelineError> {
    let cases = items
        .into_iter()
        .map(|(id, p, t)| case_report(id, p, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvaluationReport {
        aggregate: aggregate(&cases),
        cases,
    })
}

fn case_dir(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(case_id)
}

/// Write `mask.raw` (internal class ids), `confidence.raw` and `roi.json`
/// under `dir/<case_id>/`.
pub fn write_prediction(dir: &Path, pred: &CasePrediction) -> Result<(), PipelineError> {
    let d = case_dir(dir, &pred.case_id);
    fs::create_dir_all(&d)?;
    write_confidence_png(&pred.confidence, &d.join("confidence.png"), 4)?;
    write_raw(&d.join("mask.raw"), &pred.mask.to_volume())?;
    write_raw(&d.join("confidence.raw"), &pred.confidence.volume)?;
    let roi = serde_json::json!({
        "record": pred.record,
        "bbox": pred.roi.as_ref().map(|r| r.bbox),
        "fell_back": pred.roi.as_ref().map(|r| r.fell_back),
    });
    fs::write(
        d.join("roi.json"),
        serde_json::to_string_pretty(&roi).map_err(PipelineError::data)?,
    )?;
    Ok(())
}

/// Axial mid-slice of a confidence map, min/max scaled to `[0, 1]` per
/// volume, as a grayscale PNG at `scale`× size.
pub fn write_confidence_png(
    map: &UncertaintyMap,
    path: &Path,
    scale: u32,
) -> Result<(), PipelineError> {
    let dims = map.dims();
    let panel = gray_panel(&map.normalized(), dims, mid_slice(dims), 0.0, 1.0);
    let (w, h) = (dims[0] as u32, dims[1] as u32);
    let mut img = RgbImage::new(w * scale, h * scale);
    for (i, c) in panel.iter().enumerate() {
        let (x, y) = ((i % dims[0]) as u32, (i / dims[0]) as u32);
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(x * scale + dx, y * scale + dy, Rgb(*c));
            }
        }
    }
    img.save(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// Read a stored mask and, when present, its confidence map.
pub fn read_prediction(
    dir: &Path,
    case_id: &str,
) -> Result<(SegmentationMask, Option<Volume>), PipelineError> {
    let d = case_dir(dir, case_id);
    let mask_path = d.join("mask.raw");
    if !mask_path.exists() {
        return Err(PipelineError::Data(format!(
            "missing prediction for {case_id}"
        )));
    }
    let v = read_raw(&mask_path)?;
    let labels = v
        .data()
        .iter()
        .map(|&x| {
            if x.fract() == 0.0 && (0.0..4.0).contains(&x) {
                Ok(x as u8)
            } else {
                Err(PipelineError::Data(format!(
                    "{case_id}: mask value {x} is not a class id"
                )))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut mask = SegmentationMask::new(v.dims(), labels)?;
    mask.spacing = v.spacing();
    let conf_path = d.join("confidence.raw");
    let conf = if conf_path.exists() {
        Some(read_raw(&conf_path)?)
    } else {
        None
    };
    Ok((mask, conf))
}

/// Score every labelled case of the manifest against stored predictions.
pub fn evaluate(
    manifest: &DatasetManifest,
    predictions: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let labelled: Vec<&str> = manifest
        .cases
        .iter()
        .filter(|c| c.label.is_some())
        .map(|c| c.case_id.as_str())
        .collect();
    let pairs = labelled
        .par_iter()
        .map(
            |id| -> Result<(String, SegmentationMask, SegmentationMask), PipelineError> {
                let (pred, _) = read_prediction(predictions, id)?;
                let truth = load_case(manifest, id, NormRegion::NonzeroOnly)?
                    .label
                    .expect("filtered on label");
                Ok((id.to_string(), pred, truth))
            },
        )
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_cases(pairs.iter().map(|(id, p, t)| (id.as_str(), p, t)))
}

/// Nearest-rank positions of [`PERCENTILES`] in a list of `n` sorted
/// items.
pub fn percentile_indices(n: usize) -> Vec<usize> {
    PERCENTILES
        .iter()
        .map(|&p| {
            let rank = (f64::from(p) / 100.0 * n as f64).ceil() as usize;
            rank.clamp(1, n.max(1)) - 1
        })
        .collect()
}

const LABEL_COLOURS: [[u8; 3]; 4] = [[0, 0, 0], [220, 50, 50], [60, 180, 75], [255, 225, 25]];

fn mid_slice(dims: [usize; 3]) -> usize {
    dims[2] / 2
}

fn gray_panel(v: &[f32], dims: [usize; 3], z: usize, lo: f32, hi: f32) -> Vec<[u8; 3]> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(dims[0] * dims[1]);
    for y in 0..dims[1] {
        for x in 0..dims[0] {
            let t = ((v[crate::volume::grid_index(dims, x, y, z)] - lo) / span).clamp(0.0, 1.0);
            let g = (t * 255.0).round() as u8;
            out.push([g, g, g]);
        }
    }
    out
}

fn label_panel(m: &SegmentationMask, z: usize) -> Vec<[u8; 3]> {
    let dims = m.dims();
    let mut out = Vec::with_capacity(dims[0] * dims[1]);
    for y in 0..dims[1] {
        for x in 0..dims[0] {
            out.push(LABEL_COLOURS[m.get(x, y, z) as usize]);
        }
    }
    out
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        })
}

/// Render the five panels of one case side by side.
fn case_row(
    flair: &Volume,
    t1gd: &Volume,
    pred: &SegmentationMask,
    truth: &SegmentationMask,
    confidence: Option<&Volume>,
) -> (Vec<Vec<[u8; 3]>>, [usize; 2]) {
    let dims = flair.dims();
    let z = mid_slice(dims);
    let image = |v: &Volume| {
        let (lo, hi) = min_max(v.data());
        gray_panel(v.data(), dims, z, lo, hi)
    };
    let blank = vec![[0u8; 3]; dims[0] * dims[1]];
    let panels = vec![
        image(flair),
        image(t1gd),
        label_panel(pred, z),
        label_panel(truth, z),
        confidence.map(image).unwrap_or(blank),
    ];
    (panels, [dims[0], dims[1]])
}

fn draw_rows(rows: &[(Vec<Vec<[u8; 3]>>, [usize; 2])], scale: u32) -> RgbImage {
    let gap = 2u32;
    let cell_w = rows.iter().map(|r| r.1[0]).max().unwrap_or(1) as u32 * scale;
    let cell_h = rows.iter().map(|r| r.1[1]).max().unwrap_or(1) as u32 * scale;
    let width = 5 * cell_w + 4 * gap;
    let height = rows.len() as u32 * cell_h + rows.len().saturating_sub(1) as u32 * gap;
    let mut img = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([40, 40, 40]));
    for (r, (panels, [w, _])) in rows.iter().enumerate() {
        for (p, pix) in panels.iter().enumerate() {
            let x0 = p as u32 * (cell_w + gap);
            let y0 = r as u32 * (cell_h + gap);
            for (i, c) in pix.iter().enumerate() {
                let (x, y) = ((i % w) as u32, (i / w) as u32);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(x0 + x * scale + dx, y0 + y * scale + dy, Rgb(*c));
                    }
                }
            }
        }
    }
    img
}

/// Rank cases by mean dice and draw the axial mid-slice of the cases at
/// the 0/25/50/75/100th percentiles: FLAIR, T1-Gd, prediction, truth and
/// confidence. Writes one PNG per percentile plus `percentiles.png` with
/// all rows, and returns the written paths.
pub fn percentile_report(
    report: &EvaluationReport,
    manifest: &DatasetManifest,
    predictions: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    if report.cases.is_empty() {
        return Err(PipelineError::Data("report has no cases".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut ranked: Vec<&CaseScores> = report.cases.iter().collect();
    ranked.sort_by(|a, b| {
        a.mean
            .total_cmp(&b.mean)
            .then_with(|| a.case_id.cmp(&b.case_id))
    });
    let mut rows = Vec::new();
    let mut written = Vec::new();
    for (p, idx) in PERCENTILES.iter().zip(percentile_indices(ranked.len())) {
        let id = &ranked[idx].case_id;
        let case = load_case(manifest, id, NormRegion::NonzeroOnly)?;
        let truth = case
            .label
            .as_ref()
            .ok_or_else(|| PipelineError::Data(format!("{id} has no label")))?;
        let (pred, conf) = read_prediction(predictions, id)?;
        if pred.dims() != truth.dims() {
            return Err(PipelineError::Data(format!(
                "{id}: prediction and truth grids differ"
            )));
        }
        let row = case_row(
            case.modality(Modality::Flair),
            case.modality(Modality::T1Gd),
            &pred,
            truth,
            conf.as_ref(),
        );
        let path = out_dir.join(format!("p{p:03}_{id}.png"));
        draw_rows(std::slice::from_ref(&row), 4)
            .save(&path)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        written.push(path);
        rows.push(row);
    }
    let all = out_dir.join("percentiles.png");
    draw_rows(&rows, 4)
        .save(&all)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", all.display())))?;
    written.push(all);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_indices() {
        assert_eq!(percentile_indices(5), vec![0, 1, 2, 3, 4]);
        assert_eq!(percentile_indices(1), vec![0; 5]);
        assert_eq!(percentile_indices(10), vec![0, 2, 4, 7, 9]);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = SegmentationMask::new([3, 1, 1], vec![0, 1, 3]).unwrap();
        let e = SegmentationMask::new([3, 1, 1], vec![0, 0, 2]).unwrap();
        let r = evaluate_cases([("a", &m, &m), ("b", &e, &e)]).unwrap();
        assert!(r.cases.iter().all(|c| c.mean == 1.0));
        assert_eq!(r.aggregate.mean, 1.0);
        let bad = SegmentationMask::new([2, 1, 1], vec![0, 1]).unwrap();
        assert!(matches!(
            evaluate_cases([("c", &bad, &m)]),
            Err(PipelineError::Data(_))
        ));
    }
}
