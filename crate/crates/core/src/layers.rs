//! Normalization, activation and attention blocks used by both networks.
//!
//! Layer structs only carry parameter names and shapes; the arrays
//! themselves live in a [`ParamSet`] and are bound to a tape per forward
//! pass.

use rand::Rng;

use crate::autodiff::{Bound, NdArray, Padding, ParamSet, Tensor, TensorError};
use crate::real::{lit, Real};

pub const DEFAULT_INSTANCE_NORM_EPS: f64 = 1e-5;

const SPATIAL: [usize; 3] = [1, 2, 3];

/// Instance normalization over the spatial axes of each (instance, channel).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceNormLayer {
    pub epsilon: f64,
}

impl Default for InstanceNormLayer {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_INSTANCE_NORM_EPS,
        }
    }
}

impl InstanceNormLayer {
    pub fn new(epsilon: f64) -> Result<Self, TensorError> {
        if epsilon > 0.0 {
            Ok(Self { epsilon })
        } else {
            Err(TensorError::ShapeMismatch(format!(
                "instance norm epsilon must be positive, got {epsilon}"
            )))
        }
    }

    pub fn forward<'t, T: Real>(&self, x: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
        x.instance_norm(lit(self.epsilon))
    }
}

pub fn instance_norm<'t, T: Real>(x: &Tensor<'t, T>) -> Result<Tensor<'t, T>, TensorError> {
    InstanceNormLayer::default().forward(x)
}

pub fn elu<'t, T: Real>(x: &Tensor<'t, T>) -> Tensor<'t, T> {
    x.elu(T::one())
}

pub fn relu<'t, T: Real>(x: &Tensor<'t, T>) -> Tensor<'t, T> {
    x.relu()
}

pub fn sigmoid<'t, T: Real>(x: &Tensor<'t, T>) -> Tensor<'t, T> {
    x.sigmoid()
}

pub fn softmax_channels<'t, T: Real>(x: &Tensor<'t, T>) -> Tensor<'t, T> {
    x.softmax_channels()
}

/// He-uniform kernel (`U(±√(6/fan_in))`) and zero bias for a conv layer.
pub fn init_conv<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    kernel: usize,
    cin: usize,
    cout: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<(), TensorError> {
    let fan_in = (kernel.pow(3) * cin) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let w = NdArray::from_fn(&[kernel, kernel, kernel, cin, cout], |_| {
        lit(rng.gen_range(-bound..bound))
    });
    params.insert(format!("{prefix}.w"), w)?;
    if bias {
        params.insert(format!("{prefix}.b"), NdArray::zeros(&[cout]))?;
    }
    Ok(())
}

fn add_bias<'t, T: Real>(
    y: Tensor<'t, T>,
    bound: &Bound<'t, T>,
    prefix: &str,
) -> Result<Tensor<'t, T>, TensorError> {
    let b = bound.get(&format!("{prefix}.b"))?;
    let c = b.shape().iter().product();
    y.add(&b.reshape(vec![1, 1, 1, 1, c])?)
}

/// Same-padded convolution plus bias.
pub fn conv<'t, T: Real>(
    x: &Tensor<'t, T>,
    bound: &Bound<'t, T>,
    prefix: &str,
    stride: usize,
) -> Result<Tensor<'t, T>, TensorError> {
    let w = bound.get(&format!("{prefix}.w"))?;
    add_bias(x.conv3d(&w, stride, Padding::Same)?, bound, prefix)
}

/// Stride-2 `2×2×2` transposed convolution plus bias.
pub fn conv_transpose<'t, T: Real>(
    x: &Tensor<'t, T>,
    bound: &Bound<'t, T>,
    prefix: &str,
) -> Result<Tensor<'t, T>, TensorError> {
    let w = bound.get(&format!("{prefix}.w"))?;
    add_bias(x.conv_transpose3d(&w)?, bound, prefix)
}

/// Per-channel coefficients `sigmoid(GAP(x) · W_c)`, shape `T×1×1×1×C`.
pub fn channel_attention_coefficients<'t, T: Real>(
    x: &Tensor<'t, T>,
    wc: &Tensor<'t, T>,
) -> Result<Tensor<'t, T>, TensorError> {
    let shape = x.shape();
    let c = *shape.last().unwrap_or(&0);
    if shape.len() != 5 || wc.value().len() != c {
        return Err(TensorError::ShapeMismatch(format!(
            "channel attention weight of length {} for input {shape:?}",
            wc.value().len()
        )));
    }
    let gap = x.mean_axes(&SPATIAL)?;
    Ok(gap.mul(&wc.reshape(vec![1, 1, 1, 1, c])?)?.sigmoid())
}

/// Scale each channel of `x` by `sigmoid(GAP_c(x) · W_c)`.
pub fn channel_attention<'t, T: Real>(
    x: &Tensor<'t, T>,
    wc: &Tensor<'t, T>,
) -> Result<Tensor<'t, T>, TensorError> {
    let alpha = channel_attention_coefficients(x, wc)?;
    x.mul(&alpha)
}

/// Weight names and channel counts of one attention gate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGateParams {
    pub prefix: String,
    pub skip_channels: usize,
    pub gate_channels: usize,
    pub inter_channels: usize,
}

impl AttentionGateParams {
    /// Gate with `F = F_x / 2` (at least 1).
    pub fn new(prefix: impl Into<String>, skip_channels: usize, gate_channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            skip_channels,
            gate_channels,
            inter_channels: (skip_channels / 2).max(1),
        }
    }

    pub fn init<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        let p = &self.prefix;
        init_conv(
            params,
            &format!("{p}.wx"),
            1,
            self.skip_channels,
            self.inter_channels,
            false,
            rng,
        )?;
        init_conv(
            params,
            &format!("{p}.wg"),
            1,
            self.gate_channels,
            self.inter_channels,
            false,
            rng,
        )?;
        init_conv(
            params,
            &format!("{p}.wpsi"),
            1,
            self.inter_channels,
            1,
            false,
            rng,
        )
    }

    /// Returns `(α ⊙ x, α)` where `α = upsample(σ(W_ψ · ReLU(W_x x + W_g g)))`.
    ///
    /// `g` lives on the coarse grid; `W_x` is applied with stride 2 so both
    /// branches meet there.
    pub fn forward<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        x: &Tensor<'t, T>,
        g: &Tensor<'t, T>,
    ) -> Result<(Tensor<'t, T>, Tensor<'t, T>), TensorError> {
        let p = &self.prefix;
        let wx = bound.get(&format!("{p}.wx.w"))?;
        let wg = bound.get(&format!("{p}.wg.w"))?;
        let wpsi = bound.get(&format!("{p}.wpsi.w"))?;
        let theta = x.conv3d(&wx, 2, Padding::Same)?;
        let phi = g.conv3d(&wg, 1, Padding::Same)?;
        if theta.shape()[..4] != phi.shape()[..4] {
            return Err(TensorError::ShapeMismatch(format!(
                "gating signal {:?} does not sit on the half-resolution grid of {:?}",
                g.shape(),
                x.shape()
            )));
        }
        let coarse = theta
            .add(&phi)?
            .relu()
            .conv3d(&wpsi, 1, Padding::Same)?
            .sigmoid();
        let xs = x.shape();
        let alpha = coarse.resize([xs[1], xs[2], xs[3]])?;
        Ok((x.mul(&alpha)?, alpha))
    }
}

/// Two 3³ convolutions, each followed by ELU and instance norm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlock1Params {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
}

impl ConvBlock1Params {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            prefix: prefix.into(),
            cin,
            cout,
        }
    }

    pub fn init<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        init_conv(
            params,
            &format!("{}.conv1", self.prefix),
            3,
            self.cin,
            self.cout,
            true,
            rng,
        )?;
        init_conv(
            params,
            &format!("{}.conv2", self.prefix),
            3,
            self.cout,
            self.cout,
            true,
            rng,
        )
    }

    pub fn forward<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        x: &Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>, TensorError> {
        check_channels(x, self.cin)?;
        let h = conv(x, bound, &format!("{}.conv1", self.prefix), 1)?;
        let h = instance_norm(&elu(&h))?;
        let h = conv(&h, bound, &format!("{}.conv2", self.prefix), 1)?;
        instance_norm(&elu(&h))
    }
}

/// Two 3³ convolutions with ReLU and instance norm, then channel attention.
///
/// The attention coefficients come from the normalized second activation;
/// the product is taken with the raw second convolution output and
/// normalized once more.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvBlock2Params {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
}

impl ConvBlock2Params {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            prefix: prefix.into(),
            cin,
            cout,
        }
    }

    pub fn attention_name(&self) -> String {
        format!("{}.wc", self.prefix)
    }

    pub fn init<T: Real>(
        &self,
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        init_conv(
            params,
            &format!("{}.conv1", self.prefix),
            3,
            self.cin,
            self.cout,
            true,
            rng,
        )?;
        init_conv(
            params,
            &format!("{}.conv2", self.prefix),
            3,
            self.cout,
            self.cout,
            true,
            rng,
        )?;
        params.insert(self.attention_name(), NdArray::full(&[self.cout], T::one()))
    }

    pub fn forward<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        x: &Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>, TensorError> {
        check_channels(x, self.cin)?;
        let h = conv(x, bound, &format!("{}.conv1", self.prefix), 1)?;
        let h = instance_norm(&relu(&h))?;
        let c2 = conv(&h, bound, &format!("{}.conv2", self.prefix), 1)?;
        let h2 = instance_norm(&relu(&c2))?;
        let alpha = channel_attention_coefficients(&h2, &bound.get(&self.attention_name())?)?;
        instance_norm(&c2.mul(&alpha)?)
    }
}

fn check_channels<T: Real>(x: &Tensor<'_, T>, cin: usize) -> Result<(), TensorError> {
    let shape = x.shape();
    if shape.len() != 5 || shape[4] != cin {
        return Err(TensorError::ShapeMismatch(format!(
            "block expects {cin} input channels, got shape {shape:?}"
        )));
    }
    Ok(())
}
