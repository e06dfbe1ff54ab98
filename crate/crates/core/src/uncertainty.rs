//! Energy-based voxel confidence and test-time-augmentation aggregation.
//!
//! The energy of a logit vector `f` is `E(f) = −log Σ_k e^{f_k}`. Its
//! negation is used as a confidence score: higher means more certain.

use rayon::prelude::*;

use crate::augment::{tta_apply, tta_invert, AugmentError, TtaVariant};
use crate::autodiff::{NdArray, TensorError};
use crate::models::{sliding_window_predict, ModelError, PatchSpec, Prediction, SegmentationModel};
use crate::real::Real;
use crate::volume::{grid_index, Volume};

#[derive(Debug, thiserror::Error)]
pub enum UncertaintyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("need at least one test-time variant")]
    NoVariants,
}

/// `E(f) = −(max f + log Σ e^{f − max f})`.
pub fn energy<T: Real>(logits: &[T]) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = logits.iter().map(|&v| (v - m).exp()).sum();
    -(m + s.ln())
}

/// Energy of every voxel of a `…×K` logit array, in storage order.
pub fn energy_field<T: Real>(logits: &NdArray<T>) -> Vec<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits.data().chunks(k).map(energy).collect()
}

/// Largest per-voxel gap between `log max softmax(f)` and `E(f) + max f`.
///
/// The left side is evaluated from an explicit softmax, the right side
/// from the energy, so the two routes share no intermediate values.
pub fn softmax_energy_identity_check<T: Real>(logits: &NdArray<T>) -> T {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut worst = T::zero();
    for f in logits.data().chunks(k) {
        let denom: T = f.iter().map(|v| v.exp()).sum();
        let pmax = f.iter().map(|v| v.exp() / denom).fold(T::zero(), T::max);
        let m = f.iter().copied().fold(T::neg_infinity(), T::max);
        let dev = (pmax.ln() - (energy(f) + m)).abs();
        if dev > worst {
            worst = dev;
        }
    }
    worst
}

/// Per-voxel confidence `−E(x; f)` on an x-fastest grid.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub volume: Volume,
}

impl UncertaintyMap {
    pub fn dims(&self) -> [usize; 3] {
        self.volume.dims()
    }

    pub fn values(&self) -> &[f32] {
        self.volume.data()
    }

    /// Min/max rescaling to `[0, 1]` for display. A constant map becomes
    /// all zeros.
    pub fn normalized(&self) -> Vec<f32> {
        let v = self.values();
        let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        v.iter()
            .map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 })
            .collect()
    }
}

/// Confidence map from a `1×X×Y×Z×K` logit field.
pub fn confidence_map(mean_logits: &NdArray<f32>) -> Result<UncertaintyMap, UncertaintyError> {
    let [_, nx, ny, nz, k] = mean_logits.dims5()?;
    let dims = [nx, ny, nz];
    let mut out = vec![0.0f32; nx * ny * nz];
    let data = mean_logits.data();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let base = ((x * ny + y) * nz + z) * k;
                out[grid_index(dims, x, y, z)] = -energy(&data[base..base + k]);
            }
        }
    }
    let volume =
        Volume::new(dims, [1.0; 3], out).map_err(|e| TensorError::ShapeMismatch(e.to_string()))?;
    Ok(UncertaintyMap { volume })
}

/// Predict every variant in `variants`, map each back to the canonical
/// orientation and average probabilities and logits. Predictions run in
/// parallel; the reduction follows the order given.
pub fn tta_aggregate_variants(
    model: &dyn SegmentationModel,
    input: &NdArray<f32>,
    spec: &PatchSpec,
    variants: &[TtaVariant],
) -> Result<Prediction, UncertaintyError> {
    if variants.is_empty() {
        return Err(UncertaintyError::NoVariants);
    }
    let preds: Vec<Prediction> = variants
        .par_iter()
        .map(|&v| -> Result<Prediction, UncertaintyError> {
            let p = sliding_window_predict(model, &tta_apply(input, v)?, spec)?;
            Ok(Prediction {
                probs: tta_invert(&p.probs, v)?,
                logits: tta_invert(&p.logits, v)?,
            })
        })
        .collect::<Result<_, _>>()?;

    let n = preds.len() as f64;
    let mean = |pick: fn(&Prediction) -> &NdArray<f32>| -> NdArray<f32> {
        let first = pick(&preds[0]);
        let mut acc = vec![0.0f64; first.len()];
        for p in &preds {
            for (a, &b) in acc.iter_mut().zip(pick(p).data()) {
                *a += f64::from(b);
            }
        }
        NdArray::new(
            first.shape().to_vec(),
            acc.into_iter().map(|a| (a / n) as f32).collect(),
        )
        .expect("shape preserved")
    };
    Ok(Prediction {
        probs: mean(|p| &p.probs),
        logits: mean(|p| &p.logits),
    })
}

/// Aggregate over all eight reflection variants.
pub fn tta_aggregate(
    model: &dyn SegmentationModel,
    input: &NdArray<f32>,
    spec: &PatchSpec,
) -> Result<Prediction, UncertaintyError> {
    let all: Vec<TtaVariant> = TtaVariant::all().collect();
    tta_aggregate_variants(model, input, spec, &all)
}
