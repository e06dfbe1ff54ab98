//! Differentiable segmentation losses over `T×X×Y×Z×K` probability maps.
//!
//! Targets are one-hot arrays of the same shape. With `K = 1` the single
//! channel is the foreground probability; with `K > 1` channel 0 is
//! background and the dice terms average over channels `1..K`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NdArray, Tensor, TensorError};
use crate::real::{lit, Real};

pub const DICE_EPS: f64 = 1e-6;

const SPATIAL_AND_BATCH: [usize; 4] = [0, 1, 2, 3];

/// Loss names accepted in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "DL")]
    Dice,
    #[serde(rename = "CE")]
    CrossEntropy,
    #[serde(rename = "DL+CE")]
    DiceCe,
    #[serde(rename = "LC")]
    LogCoshDice,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Dice,
        LossKind::CrossEntropy,
        LossKind::DiceCe,
        LossKind::LogCoshDice,
    ];

    pub fn code(self) -> &'static str {
        match self {
            LossKind::Dice => "DL",
            LossKind::CrossEntropy => "CE",
            LossKind::DiceCe => "DL+CE",
            LossKind::LogCoshDice => "LC",
        }
    }

    pub fn evaluate<'t, T: Real>(
        self,
        probs: &Tensor<'t, T>,
        target: &Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>, TensorError> {
        match self {
            LossKind::Dice => dice_loss(probs, target, DICE_EPS),
            LossKind::CrossEntropy => cross_entropy(probs, target),
            LossKind::DiceCe => dice_ce(probs, target),
            LossKind::LogCoshDice => log_cosh_dice(probs, target),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown loss {s:?} (expected DL, CE, DL+CE or LC)"))
    }
}

fn check_pair<T: Real>(
    probs: &Tensor<'_, T>,
    target: &Tensor<'_, T>,
) -> Result<usize, TensorError> {
    let (ps, ts) = (probs.shape(), target.shape());
    if ps != ts || ps.len() != 5 || ps[4] == 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "prediction {ps:?} and target {ts:?} must be equal rank-5 shapes"
        )));
    }
    Ok(ps[4])
}

/// Per-class soft dice `(2Σŷy + ε) / (Σŷ + Σy + ε)`, shape `1×1×1×1×K`.
pub fn soft_dice_per_class<'t, T: Real>(
    probs: &Tensor<'t, T>,
    target: &Tensor<'t, T>,
    eps: f64,
) -> Result<Tensor<'t, T>, TensorError> {
    check_pair(probs, target)?;
    let inter = probs.mul(target)?.sum_axes(&SPATIAL_AND_BATCH)?;
    let p = probs.sum_axes(&SPATIAL_AND_BATCH)?;
    let y = target.sum_axes(&SPATIAL_AND_BATCH)?;
    inter
        .scale(lit(2.0))
        .add_scalar(lit(eps))
        .div(&p.add(&y)?.add_scalar(lit(eps)))
}

/// Soft dice averaged over the foreground classes.
pub fn soft_dice_score<'t, T: Real>(
    probs: &Tensor<'t, T>,
    target: &Tensor<'t, T>,
    eps: f64,
) -> Result<Tensor<'t, T>, TensorError> {
    let k = check_pair(probs, target)?;
    let per_class = soft_dice_per_class(probs, target, eps)?;
    let weights = if k == 1 {
        NdArray::full(&[1, 1, 1, 1, 1], T::one())
    } else {
        let w = lit::<T>(1.0 / (k - 1) as f64);
        NdArray::from_fn(&[1, 1, 1, 1, k], |c| if c == 0 { T::zero() } else { w })
    };
    let weights = probs.tape().constant(weights);
    Ok(per_class.mul(&weights)?.sum())
}

/// `1 − soft_dice_score`.
pub fn dice_loss<'t, T: Real>(
    probs: &Tensor<'t, T>,
    target: &Tensor<'t, T>,
    eps: f64,
) -> Result<Tensor<'t, T>, TensorError> {
    Ok(soft_dice_score(probs, target, eps)?
        .neg()
        .add_scalar(T::one()))
}

/// Mean over voxels of `−Σ_c y_c log p_c`; for `K = 1` the binary form
/// `−[y log p + (1 − y) log(1 − p)]`. Probabilities are clamped at 1e-12.
pub fn cross_entropy<'t, T: Real>(
    probs: &Tensor<'t, T>,
    target: &Tensor<'t, T>,
) -> Result<Tensor<'t, T>, TensorError> {
    let k = check_pair(probs, target)?;
    let shape = probs.shape();
    let voxels: usize = shape[..4].iter().product();
    let per_voxel_sum = if k == 1 {
        let pos = target.mul(&probs.log()?)?;
        let neg_p = probs.neg().add_scalar(T::one());
        let neg_y = target.neg().add_scalar(T::one());
        pos.add(&neg_y.mul(&neg_p.log()?)?)?.sum()
    } else {
        target.mul(&probs.log()?)?.sum()
    };
    Ok(per_voxel_sum.scale(lit(-1.0 / voxels as f64)))
}

/// `log cosh(dice_loss)`.
pub fn log_cosh_dice<'t, T: Real>(
    probs: &Tensor<'t, T>,
    target: &Tensor<'t, T>,
) -> Result<Tensor<'t, T>, TensorError> {
    Ok(dice_loss(probs, target, DICE_EPS)?.log_cosh())
}

/// `dice_loss + cross_entropy`.
pub fn dice_ce<'t, T: Real>(
    probs: &Tensor<'t, T>,
    target: &Tensor<'t, T>,
) -> Result<Tensor<'t, T>, TensorError> {
    dice_loss(probs, target, DICE_EPS)?.add(&cross_entropy(probs, target)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, ParamSet, Tape};
    use proptest::prelude::*;

    fn arr(shape: &[usize], v: &[f64]) -> NdArray<f64> {
        NdArray::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn soft_dice_single_voxel_factor_two() {
        let tape = Tape::new();
        let p = tape.constant(arr(&[1, 1, 1, 1, 1], &[0.5]));
        let y = tape.constant(arr(&[1, 1, 1, 1, 1], &[1.0]));
        let l = dice_loss(&p, &y, 0.0).unwrap().item().unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let tape = Tape::new();
        let y = tape.constant(arr(&[1, 2, 1, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let flipped = tape.constant(arr(&[1, 2, 1, 1, 2], &[0.0, 1.0, 1.0, 0.0]));
        assert!(dice_loss(&y, &y, DICE_EPS).unwrap().item().unwrap() <= 1e-5);
        assert!(dice_loss(&flipped, &y, DICE_EPS).unwrap().item().unwrap() >= 1.0 - 1e-5);
        assert!(dice_ce(&y, &y).unwrap().item().unwrap().abs() <= 1e-5);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let p = tape.constant(arr(&[1, 1, 1, 1, 2], &[0.5, 0.5]));
        let y = tape.constant(arr(&[1, 1, 1, 1, 2], &[0.0, 1.0]));
        let ce = cross_entropy(&p, &y).unwrap().item().unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);

        let p = tape.constant(NdArray::full(&[1, 2, 2, 1, 4], 0.25));
        let y = tape.constant(NdArray::from_fn(&[1, 2, 2, 1, 4], |i| {
            if i % 5 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let ce = cross_entropy(&p, &y).unwrap().item().unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_cross_entropy_uses_both_terms() {
        let tape = Tape::new();
        let p = tape.constant(arr(&[1, 2, 1, 1, 1], &[0.8, 0.25]));
        let y = tape.constant(arr(&[1, 2, 1, 1, 1], &[1.0, 0.0]));
        let ce = cross_entropy(&p, &y).unwrap().item().unwrap();
        let want = -(0.8f64.ln() + 0.75f64.ln()) / 2.0;
        assert!((ce - want).abs() < 1e-12);
    }

    #[test]
    fn names_route_to_losses() {
        let tape = Tape::new();
        let p = tape.constant(arr(&[1, 2, 1, 1, 2], &[0.3, 0.7, 0.6, 0.4]));
        let y = tape.constant(arr(&[1, 2, 1, 1, 2], &[0.0, 1.0, 1.0, 0.0]));
        let dl = dice_loss(&p, &y, DICE_EPS).unwrap().item().unwrap();
        let ce = cross_entropy(&p, &y).unwrap().item().unwrap();
        let get = |s: &str| {
            s.parse::<LossKind>()
                .unwrap()
                .evaluate(&p, &y)
                .unwrap()
                .item()
                .unwrap()
        };
        assert_eq!(get("DL"), dl);
        assert_eq!(get("CE"), ce);
        assert_eq!(get("DL+CE"), dl + ce);
        assert!((get("LC") - dl.cosh().ln()).abs() < 1e-15);
        assert!("XX".parse::<LossKind>().is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(NdArray::zeros(&[1, 2, 1, 1, 2]));
        let y = tape.constant(NdArray::zeros(&[1, 1, 2, 1, 2]));
        assert!(matches!(
            dice_loss(&p, &y, DICE_EPS),
            Err(TensorError::ShapeMismatch(_))
        ));
        assert!(cross_entropy(&p, &y).is_err());
    }

    #[test]
    fn losses_pass_gradient_check() {
        // logits → softmax keeps the probabilities on the simplex
        let mut params = ParamSet::new();
        params
            .insert(
                "z",
                NdArray::from_fn(&[2, 2, 2, 1, 4], |i| ((i as f64) * 1.37).sin()),
            )
            .unwrap();
        let target = NdArray::from_fn(&[2, 2, 2, 1, 4], |i| {
            if (i / 4 + i) % 4 == 0 {
                1.0
            } else {
                0.0
            }
        });
        for kind in LossKind::ALL {
            let t = target.clone();
            let r = finite_diff_check(
                move |tape, p| {
                    let probs = tape.bind(p).get("z")?.softmax_channels();
                    kind.evaluate(&probs, &tape.constant(t.clone()))
                },
                &params,
                1e-3,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-4, "{kind}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn dice_complement_and_log_cosh_bound(
            vals in prop::collection::vec(0.0f64..1.0, 16),
            hot in prop::collection::vec(0usize..2, 8),
        ) {
            let tape = Tape::new();
            let p = tape.constant(arr(&[1, 2, 2, 2, 2], &vals));
            let y: Vec<f64> = hot.iter().flat_map(|&h| if h == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
            let y = tape.constant(arr(&[1, 2, 2, 2, 2], &y));
            let dl = dice_loss(&p, &y, DICE_EPS).unwrap().item().unwrap();
            let score = soft_dice_score(&p, &y, DICE_EPS).unwrap().item().unwrap();
            prop_assert!((dl + score - 1.0).abs() <= 1e-6);
            let lc = log_cosh_dice(&p, &y).unwrap().item().unwrap();
            prop_assert!(lc <= dl + 1e-15);
            prop_assert!((0.0..1.0).contains(&dl));
        }
    }
}
