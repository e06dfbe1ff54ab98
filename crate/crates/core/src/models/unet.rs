use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, NdArray, ParamSet, Tape, Tensor, TensorError};
use crate::layers::{
    conv, conv_transpose, elu, init_conv, instance_norm, relu, AttentionGateParams,
    ConvBlock1Params, ConvBlock2Params,
};
use crate::real::{lit, Real};

use super::{ModelError, Prediction, SegmentationModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// ELU, plain convolution blocks, one sigmoid output.
    Binary,
    /// ReLU, channel-attention blocks, attention-gated skips, softmax
    /// over the classes.
    Multiclass,
}

/// Architecture description shared by both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub variant: Variant,
    pub in_channels: usize,
    /// Encoder widths, one per resolution level.
    pub widths: Vec<usize>,
    pub bridge: usize,
    pub classes: usize,
    /// Nominal input grid (binary) or training patch (multiclass).
    pub input_dims: [usize; 3],
}

impl UNetConfig {
    pub fn binary_paper() -> Self {
        Self {
            variant: Variant::Binary,
            in_channels: 4,
            widths: vec![40, 40, 80, 160],
            bridge: 200,
            classes: 1,
            input_dims: [128, 128, 128],
        }
    }

    pub fn binary_toy() -> Self {
        Self {
            widths: vec![8, 8, 16, 32],
            bridge: 40,
            input_dims: [32, 32, 32],
            ..Self::binary_paper()
        }
    }

    pub fn multiclass_paper() -> Self {
        Self {
            variant: Variant::Multiclass,
            in_channels: 4,
            widths: vec![64, 128, 256],
            bridge: 320,
            classes: 4,
            input_dims: [48, 48, 128],
        }
    }

    pub fn multiclass_toy() -> Self {
        Self {
            widths: vec![8, 16, 32],
            bridge: 40,
            input_dims: [24, 24, 32],
            ..Self::multiclass_paper()
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.widths.is_empty() || self.widths.contains(&0) || self.bridge == 0 {
            return bad("widths and bridge must be non-empty and positive");
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        match (self.variant, self.classes) {
            (Variant::Binary, 1) => {}
            (Variant::Binary, _) => return bad("binary network has exactly one output channel"),
            (Variant::Multiclass, k) if k < 2 => {
                return bad("multiclass network needs at least two classes")
            }
            _ => {}
        }
        self.check_dims(self.input_dims)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<(), ModelError> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(ModelError::IndivisibleDims { dims, divisor: d });
        }
        Ok(())
    }

    fn block_in(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.widths[level - 1]
        }
    }

    fn coarse_width(&self, level: usize) -> usize {
        if level + 1 == self.depth() {
            self.bridge
        } else {
            self.widths[level + 1]
        }
    }

    /// Head bias that makes an untrained network predict foreground with
    /// probability [`FOREGROUND_PRIOR`] (split evenly over the foreground
    /// classes). Dice losses that ignore background give almost no
    /// false-positive gradient while a class overlaps its target poorly,
    /// so starting from a uniform output lets background drift into a
    /// foreground class.
    fn prior_bias<T: Real>(&self) -> Vec<T> {
        let pi = FOREGROUND_PRIOR;
        if self.classes == 1 {
            return vec![lit((pi / (1.0 - pi)).ln())];
        }
        let k = (self.classes - 1) as f64;
        let mut b = vec![T::zero(); self.classes];
        b[0] = lit(((1.0 - pi) * k / pi).ln());
        b
    }

    /// Fresh parameters (He-uniform kernels, unit channel attention
    /// weights, zero biases except the head's prior) from a seed.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamSet<T>, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (i, &w) in self.widths.iter().enumerate() {
            self.init_block(&mut p, &format!("enc{i}"), self.block_in(i), w, &mut rng)?;
            init_conv(&mut p, &format!("enc{i}.down"), 3, w, w, true, &mut rng)?;
        }
        self.init_block(
            &mut p,
            "bridge",
            *self.widths.last().expect("validated"),
            self.bridge,
            &mut rng,
        )?;
        for i in (0..self.depth()).rev() {
            let w = self.widths[i];
            let coarse = self.coarse_width(i);
            init_conv(&mut p, &format!("dec{i}.up"), 2, coarse, w, true, &mut rng)?;
            if self.variant == Variant::Multiclass {
                AttentionGateParams::new(format!("dec{i}.gate"), w, coarse)
                    .init(&mut p, &mut rng)?;
            }
            self.init_block(&mut p, &format!("dec{i}.block"), 2 * w, w, &mut rng)?;
        }
        init_conv(
            &mut p,
            "head",
            1,
            self.widths[0],
            self.classes,
            true,
            &mut rng,
        )?;
        let b = p.get_mut("head.b").expect("head has a bias");
        b.data_mut().copy_from_slice(&self.prior_bias());
        Ok(p)
    }

    fn init_block<T: Real>(
        &self,
        p: &mut ParamSet<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), TensorError> {
        match self.variant {
            Variant::Binary => ConvBlock1Params::new(prefix, cin, cout).init(p, rng),
            Variant::Multiclass => ConvBlock2Params::new(prefix, cin, cout).init(p, rng),
        }
    }

    fn block<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        x: &Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>, TensorError> {
        match self.variant {
            Variant::Binary => ConvBlock1Params::new(prefix, cin, cout).forward(bound, x),
            Variant::Multiclass => ConvBlock2Params::new(prefix, cin, cout).forward(bound, x),
        }
    }

    fn act<'t, T: Real>(&self, x: &Tensor<'t, T>) -> Tensor<'t, T> {
        match self.variant {
            Variant::Binary => elu(x),
            Variant::Multiclass => relu(x),
        }
    }

    /// Forward pass on a `T×X×Y×Z×C_in` tensor. Returns `(logits, probs)`.
    pub fn forward<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        x: &Tensor<'t, T>,
    ) -> Result<(Tensor<'t, T>, Tensor<'t, T>), ModelError> {
        let shape = x.shape();
        if shape.len() != 5 || shape[4] != self.in_channels {
            return Err(TensorError::ShapeMismatch(format!(
                "network expects T×X×Y×Z×{} input, got {shape:?}",
                self.in_channels
            ))
            .into());
        }
        self.check_dims([shape[1], shape[2], shape[3]])?;

        let mut h = *x;
        let mut skips = Vec::with_capacity(self.depth());
        for (i, &w) in self.widths.iter().enumerate() {
            h = self.block(bound, &format!("enc{i}"), self.block_in(i), w, &h)?;
            skips.push(h);
            let down = conv(&h, bound, &format!("enc{i}.down"), 2)?;
            h = instance_norm(&self.act(&down))?;
        }
        h = self.block(
            bound,
            "bridge",
            *self.widths.last().expect("validated"),
            self.bridge,
            &h,
        )?;
        for i in (0..self.depth()).rev() {
            let w = self.widths[i];
            let up = conv_transpose(&h, bound, &format!("dec{i}.up"))?;
            let skip = match self.variant {
                Variant::Binary => skips[i],
                Variant::Multiclass => {
                    let gate =
                        AttentionGateParams::new(format!("dec{i}.gate"), w, self.coarse_width(i));
                    gate.forward(bound, &skips[i], &h)?.0
                }
            };
            let cat = up.concat_channels(&skip)?;
            h = self.block(bound, &format!("dec{i}.block"), 2 * w, w, &cat)?;
        }
        let logits = conv(&h, bound, "head", 1)?;
        let probs = match self.variant {
            Variant::Binary => logits.sigmoid(),
            Variant::Multiclass => logits.softmax_channels(),
        };
        Ok((logits, probs))
    }
}

/// Foreground probability of an untrained network.
pub const FOREGROUND_PRIOR: f64 = 0.05;

/// A network architecture together with its trained parameters.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamSet<f32>,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, ModelError> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Inference on a `T×X×Y×Z×C_in` array.
    pub fn forward_array(&self, input: &NdArray<f32>) -> Result<Prediction, ModelError> {
        let tape = Tape::new();
        let bound = tape.bind_frozen(&self.params);
        let x = tape.constant(input.clone());
        let (logits, probs) = self.config.forward(&bound, &x)?;
        Ok(Prediction {
            probs: (*probs.value()).clone(),
            logits: (*logits.value()).clone(),
        })
    }
}

impl SegmentationModel for UNet {
    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn divisor(&self) -> usize {
        self.config.divisor()
    }

    fn predict(&self, input: &NdArray<f32>) -> Result<Prediction, ModelError> {
        self.forward_array(input)
    }
}
