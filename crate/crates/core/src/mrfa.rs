//! Multi-receptive-field attention.
//!
//! Four parallel branches look at the input with receptive fields of 1, 3,
//! 5 and 7 pixels. The 5x5 field is built from two stacked 3x3 convolutions
//! and the 7x7 field from a 1x7 followed by a 7x1. Each branch first reduces
//! the input to `C/4` channels with a 1x1 convolution. When the mask must
//! match a feature map of half the input resolution, a 2x2 average pool
//! follows every reduction. The four branch outputs are concatenated back to
//! `C` channels, lifted to `out_channels` with a 1x1 convolution and squashed
//! with `tanh(x) + 1` into a multiplicative mask with values in `(0, 2)`.

use crate::autodiff::{LrGroup, ParamStore, PoolMode, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBn, Ctx, FeatureExtractor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MrfaConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_stride: usize,
}

impl MrfaConfig {
    /// The standard shape: mask has twice the input channels.
    pub fn doubling(in_channels: usize, spatial_stride: usize) -> Self {
        MrfaConfig { in_channels, out_channels: 2 * in_channels, spatial_stride }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "attention input channels must be a positive multiple of 4, got {}",
                self.in_channels
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("attention output channels must be positive".into()));
        }
        if !matches!(self.spatial_stride, 1 | 2) {
            return Err(Error::Config(format!("attention stride must be 1 or 2, got {}", self.spatial_stride)));
        }
        Ok(())
    }
}

/// Outputs of one attention module on the tape.
#[derive(Clone, Copy, Debug)]
pub struct MrfaOutput {
    /// `N x out_channels x H' x W'`, every element in `(0, 2)`.
    pub mask: Var,
    /// The `C`-channel branch concatenation, before the lift.
    pub pre_mask: Var,
}

#[derive(Clone, Debug)]
pub struct Mrfa {
    pub config: MrfaConfig,
    prefix: String,
    branch1: ConvBn,
    branch3: [ConvBn; 2],
    branch5: [ConvBn; 3],
    branch7: [ConvBn; 3],
    lift: Conv,
}

impl Mrfa {
    pub fn new(store: &mut ParamStore, seed: u64, prefix: &str, config: MrfaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.in_channels;
        let q = c / 4;
        let g = LrGroup::Head;
        let mut cb = |name: &str, cin, k: (usize, usize), pad: (usize, usize)| {
            ConvBn::new(store, seed, &format!("{prefix}.{name}"), cin, q, k, (1, 1), pad, g)
        };
        let branch1 = cb("b1.reduce", c, (1, 1), (0, 0))?;
        let branch3 = [cb("b3.reduce", c, (1, 1), (0, 0))?, cb("b3.conv3x3", q, (3, 3), (1, 1))?];
        let branch5 = [
            cb("b5.reduce", c, (1, 1), (0, 0))?,
            cb("b5.conv3x3a", q, (3, 3), (1, 1))?,
            cb("b5.conv3x3b", q, (3, 3), (1, 1))?,
        ];
        let branch7 = [
            cb("b7.reduce", c, (1, 1), (0, 0))?,
            cb("b7.conv1x7", q, (1, 7), (0, 3))?,
            cb("b7.conv7x1", q, (7, 1), (3, 0))?,
        ];
        let lift = Conv::new(
            store,
            seed,
            &format!("{prefix}.lift"),
            c,
            config.out_channels,
            (1, 1),
            (1, 1),
            (0, 0),
            true,
            g,
        )?;
        Ok(Mrfa { config, prefix: prefix.to_string(), branch1, branch3, branch5, branch7, lift })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn branch(&self, ctx: &mut Ctx, x: Var, layers: &[ConvBn]) -> Result<Var> {
        let mut y = layers[0].forward(ctx, x, true)?;
        if self.config.spatial_stride == 2 {
            y = ctx.tape.pool2d(y, PoolMode::Avg, (2, 2), (2, 2))?;
        }
        for layer in &layers[1..] {
            y = layer.forward(ctx, y, true)?;
        }
        Ok(y)
    }

    pub fn forward(&self, ctx: &mut Ctx, input: Var) -> Result<MrfaOutput> {
        let (_, c, h, w) = ctx.tape.value(input).dims4("mrfa")?;
        if c != self.config.in_channels {
            return Err(Error::dim(
                "mrfa",
                format!("input channel axis (1) has {c}, module expects {}", self.config.in_channels),
            ));
        }
        let s = self.config.spatial_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::dim("mrfa", format!("input {h}x{w} not divisible by stride {s}")));
        }
        let b1 = self.branch(ctx, input, std::slice::from_ref(&self.branch1))?;
        let b3 = self.branch(ctx, input, &self.branch3)?;
        let b5 = self.branch(ctx, input, &self.branch5)?;
        let b7 = self.branch(ctx, input, &self.branch7)?;
        let pre_mask = ctx.tape.concat(&[b1, b3, b5, b7], 1)?;
        let lifted = self.lift.forward(ctx, pre_mask)?;
        let mask = ctx.tape.tanh_plus_one(lifted);
        Ok(MrfaOutput { mask, pre_mask })
    }

    /// Sets every trainable parameter of this module to zero, which turns the
    /// mask into the constant 1.
    pub fn zero_parameters(&self, store: &mut ParamStore) {
        let dotted = format!("{}.", self.prefix);
        for p in store.iter_mut().filter(|p| p.trainable && p.name.starts_with(&dotted)) {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Multiplies a backbone feature map by an attention mask.
pub fn apply_mask(tape: &mut Tape, feature: Var, mask: Var) -> Result<Var> {
    let (fs, ms) = (tape.value(feature).shape(), tape.value(mask).shape());
    if fs != ms {
        return Err(Error::dim("apply_mask", format!("feature {fs:?} vs mask {ms:?}")));
    }
    tape.mul(feature, mask)
}

/// 512-d (at full scale) view feature tapped from the branch concatenation.
pub fn attention_camera_feature(ctx: &mut Ctx, extractor: &FeatureExtractor, pre_mask: Var) -> Result<Var> {
    extractor.forward(ctx, pre_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn run(cfg: MrfaConfig, input: Tensor, zero: bool) -> (Tensor, Tensor) {
        let mut store = ParamStore::new();
        let m = Mrfa::new(&mut store, 1, "att", cfg).unwrap();
        if zero {
            m.zero_parameters(&mut store);
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx { tape: &mut tape, store: &mut store, mode: Mode::Train };
        let x = ctx.tape.constant(input);
        let out = m.forward(&mut ctx, x).unwrap();
        (tape.value(out.mask).clone(), tape.value(out.pre_mask).clone())
    }

    #[test]
    fn stride_two_halves_resolution_and_doubles_channels() {
        let (mask, pre) = run(MrfaConfig::doubling(16, 2), random(&[2, 16, 8, 4], 0, 1.0), false);
        assert_eq!(mask.shape(), &[2, 32, 4, 2]);
        assert_eq!(pre.shape(), &[2, 16, 4, 2]);
        let (mask, _) = run(MrfaConfig::doubling(16, 1), random(&[2, 16, 8, 4], 0, 1.0), false);
        assert_eq!(mask.shape(), &[2, 32, 8, 4]);
    }

    #[test]
    fn zero_parameters_give_unit_mask() {
        let (mask, _) = run(MrfaConfig::doubling(8, 2), random(&[2, 8, 4, 4], 5, 3.0), true);
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channels_must_divide_by_four() {
        let mut store = ParamStore::new();
        assert!(matches!(
            Mrfa::new(&mut store, 0, "a", MrfaConfig::doubling(6, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn apply_mask_examples() {
        let mut tape = Tape::new();
        let f = random(&[1, 4, 2, 2], 9, 2.0);
        let fv = tape.constant(f.clone());
        let ones = tape.constant(Tensor::full(&[1, 4, 2, 2], 1.0));
        let y = apply_mask(&mut tape, fv, ones).unwrap();
        assert_eq!(tape.value(y), &f);

        let near_two = tape.constant(Tensor::full(&[1, 4, 2, 2], 2.0 - 1e-7));
        let y = apply_mask(&mut tape, fv, near_two).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(f.data()) {
            assert!((a - 2.0 * b).abs() < 1e-5);
        }

        let m = random(&[1, 4, 2, 2], 10, 1.0).map(|v| v + 1.0);
        let mv = tape.constant(m.clone());
        let y = apply_mask(&mut tape, fv, mv).unwrap();
        for i in 0..f.numel() {
            assert_eq!(tape.value(y).data()[i], f.data()[i] * m.data()[i]);
        }

        let wrong = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(apply_mask(&mut tape, fv, wrong).is_err());
    }

    #[test]
    fn camera_feature_of_constant_channels() {
        let mut store = ParamStore::new();
        let ex = FeatureExtractor::new(&mut store, 0, "cam", 8, 16, LrGroup::Head).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx { tape: &mut tape, store: &mut store, mode: Mode::Train };
        let mut data = Vec::new();
        for n in 0..4 {
            for c in 0..8 {
                data.extend(std::iter::repeat_n((n * 8 + c) as f32, 6));
            }
        }
        let x = ctx.tape.constant(Tensor::new(vec![4, 8, 3, 2], data).unwrap());
        let pooled = crate::layers::global_pool_flat(ctx.tape, x).unwrap();
        assert_eq!(ctx.tape.value(pooled).row(1), &(8..16).map(|v| v as f32).collect::<Vec<_>>()[..]);
        let feat = attention_camera_feature(&mut ctx, &ex, x).unwrap();
        assert_eq!(tape.value(feat).shape(), &[4, 16]);
    }
}
