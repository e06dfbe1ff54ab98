//! Finite-difference checks of every differentiable operation and block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    finite_diff_check, Bound, NdArray, Padding, ParamSet, Tape, Tensor, TensorError,
};
use crate::layers::{
    channel_attention, conv, AttentionGateParams, ConvBlock1Params, ConvBlock2Params,
};
use crate::losses::LossKind;

/// Finite-difference step.
pub const STEP: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub passed: bool,
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> NdArray<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdArray::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Contract an output with fixed random weights so that every output
/// coordinate carries a distinct gradient.
fn project<'t>(y: &Tensor<'t, f64>, seed: u64) -> Result<Tensor<'t, f64>, TensorError> {
    let w = y.tape().constant(random(&y.shape(), seed, -1.0, 1.0));
    Ok(y.mul(&w)?.sum())
}

fn one_hot(shape: &[usize], seed: u64) -> NdArray<f64> {
    let k = *shape.last().expect("rank ≥ 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NdArray::zeros(shape);
    for v in out.data_mut().chunks_mut(k) {
        if k == 1 {
            v[0] = f64::from(rng.gen_bool(0.4) as u8);
        } else {
            v[rng.gen_range(0..k)] = 1.0;
        }
    }
    out
}

/// Smallest distance of any activation argument from its kink that the
/// block checks accept. A central difference that straddles a ReLU/ELU
/// kink measures the kink rather than the gradient.
pub const KINK_MARGIN: f64 = 5.0 * STEP;

/// First parameter set from `init(seed)`, seed = 0, 1, …, whose
/// activation arguments (computed by `preacts`) all clear
/// [`KINK_MARGIN`].
fn with_kink_margin(
    init: impl Fn(u64) -> ParamSet<f64>,
    preacts: impl for<'t> Fn(
        &'t Tape<f64>,
        &Bound<'t, f64>,
    ) -> Result<Vec<Tensor<'t, f64>>, TensorError>,
) -> Result<ParamSet<f64>, TensorError> {
    for seed in (0..10_000u64).map(|s| 1000 + 7 * s) {
        let p = init(seed);
        let tape = Tape::new();
        let bound = tape.bind(&p);
        let margin = preacts(&tape, &bound)?
            .iter()
            .flat_map(|t| t.value().data().to_vec())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin >= KINK_MARGIN {
            return Ok(p);
        }
    }
    Err(TensorError::ShapeMismatch(
        "no parameter draw clears the kink margin".into(),
    ))
}

type Check = Box<dyn Fn() -> Result<crate::autodiff::GradCheckReport, TensorError>>;

fn params(entries: &[(&str, NdArray<f64>)]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, v) in entries {
        p.insert(*n, v.clone()).expect("unique names");
    }
    p
}

fn checks() -> Vec<(String, Check)> {
    let mut out: Vec<(String, Check)> = Vec::new();

    out.push((
        "conv3d".into(),
        Box::new(|| {
            let p = params(&[
                ("x", random(&[1, 4, 4, 4, 2], 1, -1.0, 1.0)),
                ("w", random(&[3, 3, 3, 2, 3], 2, -0.5, 0.5)),
            ]);
            finite_diff_check(
                |t, p| {
                    let b = t.bind(p);
                    project(&b.get("x")?.conv3d(&b.get("w")?, 1, Padding::Same)?, 3)
                },
                &p,
                STEP,
            )
        }),
    ));
    out.push((
        "conv3d_stride2".into(),
        Box::new(|| {
            let p = params(&[
                ("x", random(&[2, 4, 4, 4, 2], 4, -1.0, 1.0)),
                ("w", random(&[3, 3, 3, 2, 2], 5, -0.5, 0.5)),
            ]);
            finite_diff_check(
                |t, p| {
                    let b = t.bind(p);
                    project(&b.get("x")?.conv3d(&b.get("w")?, 2, Padding::Same)?, 6)
                },
                &p,
                STEP,
            )
        }),
    ));
    out.push((
        "conv_transpose3d".into(),
        Box::new(|| {
            let p = params(&[
                ("x", random(&[1, 2, 2, 2, 4], 7, -1.0, 1.0)),
                ("w", random(&[2, 2, 2, 4, 2], 8, -0.5, 0.5)),
            ]);
            finite_diff_check(
                |t, p| {
                    let b = t.bind(p);
                    project(&b.get("x")?.conv_transpose3d(&b.get("w")?)?, 9)
                },
                &p,
                STEP,
            )
        }),
    ));
    out.push((
        "instance_norm".into(),
        Box::new(|| {
            let p = params(&[("x", random(&[2, 4, 4, 4, 2], 10, -2.0, 2.0))]);
            finite_diff_check(
                |t, p| project(&t.bind(p).get("x")?.instance_norm(1e-5)?, 11),
                &p,
                STEP,
            )
        }),
    ));
    // activations: inputs kept at least 0.05 away from the ReLU kink
    let away_from_zero = |seed| {
        let mag = random(&[1, 4, 4, 4, 2], seed, 0.05, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        NdArray::from_fn(mag.shape(), |i| {
            if rng.gen_bool(0.5) {
                mag.data()[i]
            } else {
                -mag.data()[i]
            }
        })
    };
    for (name, seed) in [
        ("elu", 12u64),
        ("relu", 13),
        ("sigmoid", 14),
        ("softmax", 15),
    ] {
        let x = away_from_zero(seed);
        out.push((
            name.into(),
            Box::new(move || {
                let p = params(&[("x", x.clone())]);
                finite_diff_check(
                    |t, p| {
                        let x = t.bind(p).get("x")?;
                        let y = match name {
                            "elu" => x.elu(1.0),
                            "relu" => x.relu(),
                            "sigmoid" => x.sigmoid(),
                            _ => x.softmax_channels(),
                        };
                        project(&y, seed + 50)
                    },
                    &p,
                    STEP,
                )
            }),
        ));
    }
    out.push((
        "channel_attention".into(),
        Box::new(|| {
            let p = params(&[
                ("x", random(&[2, 3, 3, 3, 4], 16, -1.0, 1.0)),
                ("wc", random(&[4], 17, -1.0, 1.0)),
            ]);
            finite_diff_check(
                |t, p| {
                    let b = t.bind(p);
                    project(&channel_attention(&b.get("x")?, &b.get("wc")?)?, 18)
                },
                &p,
                STEP,
            )
        }),
    ));
    out.push((
        "attention_gate".into(),
        Box::new(|| {
            let gate = AttentionGateParams::new("ag", 2, 4);
            let p = with_kink_margin(
                |s| {
                    let mut p = ParamSet::new();
                    gate.init(&mut p, &mut ChaCha8Rng::seed_from_u64(s))
                        .expect("fresh set");
                    p.insert("x", random(&[1, 4, 4, 4, 2], s + 1, -1.0, 1.0))
                        .expect("fresh name");
                    p.insert("g", random(&[1, 2, 2, 2, 4], s + 2, -1.0, 1.0))
                        .expect("fresh name");
                    p
                },
                |_, b| {
                    let theta = b.get("x")?.conv3d(&b.get("ag.wx.w")?, 2, Padding::Same)?;
                    let phi = b.get("g")?.conv3d(&b.get("ag.wg.w")?, 1, Padding::Same)?;
                    Ok(vec![theta.add(&phi)?])
                },
            )?;
            finite_diff_check(
                move |t, p| {
                    let b = t.bind(p);
                    project(&gate.forward(&b, &b.get("x")?, &b.get("g")?)?.0, 22)
                },
                &p,
                STEP,
            )
        }),
    ));
    for (name, two) in [("conv_block1", false), ("conv_block2", true)] {
        out.push((
            name.into(),
            Box::new(move || {
                let init = |s: u64| {
                    let mut p = ParamSet::new();
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    if two {
                        ConvBlock2Params::new("b", 2, 2).init(&mut p, &mut rng)
                    } else {
                        ConvBlock1Params::new("b", 2, 2).init(&mut p, &mut rng)
                    }
                    .expect("fresh set");
                    p.insert("x", random(&[1, 4, 4, 4, 2], s + 1, -1.0, 1.0))
                        .expect("fresh name");
                    p
                };
                let p = with_kink_margin(init, |_, b| {
                    let c1 = conv(&b.get("x")?, b, "b.conv1", 1)?;
                    let h = if two { c1.relu() } else { c1.elu(1.0) }.instance_norm(1e-5)?;
                    Ok(vec![c1, conv(&h, b, "b.conv2", 1)?])
                })?;
                finite_diff_check(
                    move |t, p| {
                        let b = t.bind(p);
                        let x = b.get("x")?;
                        let y = if two {
                            ConvBlock2Params::new("b", 2, 2).forward(&b, &x)?
                        } else {
                            ConvBlock1Params::new("b", 2, 2).forward(&b, &x)?
                        };
                        project(&y, 28)
                    },
                    &p,
                    STEP,
                )
            }),
        ));
    }
    for (i, loss) in LossKind::ALL.into_iter().enumerate() {
        for k in [1usize, 4] {
            let seed = 30 + 2 * i as u64 + k as u64;
            out.push((
                format!("loss_{}_k{k}", loss.code()),
                Box::new(move || {
                    let shape = [2, 4, 4, 4, k];
                    let target = one_hot(&shape, seed);
                    let p = params(&[("z", random(&shape, seed + 1, -2.0, 2.0))]);
                    finite_diff_check(
                        |t, p| {
                            let z = t.bind(p).get("z")?;
                            let probs = if k == 1 {
                                z.sigmoid()
                            } else {
                                z.softmax_channels()
                            };
                            loss.evaluate(&probs, &t.constant(target.clone()))
                        },
                        &p,
                        STEP,
                    )
                }),
            ));
        }
    }
    out
}

/// Run every check and report one entry per operation.
pub fn run_suite() -> Result<Vec<GradCheckEntry>, TensorError> {
    checks()
        .into_iter()
        .map(|(name, check)| {
            let r = check()?;
            Ok(GradCheckEntry {
                passed: r.max_rel_error <= TOLERANCE,
                name,
                max_rel_error: r.max_rel_error,
                worst: r.worst,
                coordinates: r.coordinates,
            })
        })
        .collect()
}

/// True when the suite is non-empty and every entry passed.
pub fn all_passed(entries: &[GradCheckEntry]) -> bool {
    !entries.is_empty() && entries.iter().all(|e| e.passed)
}
