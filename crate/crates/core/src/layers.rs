//! Parameterized building blocks: convolution, batch norm, affine.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{LrGroup, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng::param_stream;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const RUNNING_MEAN_SUFFIX: &str = ".running_mean";
pub const RUNNING_VAR_SUFFIX: &str = ".running_var";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during a forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl Ctx<'_> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

fn normal_tensor(seed: u64, name: &str, shape: &[usize], std: f32) -> Tensor {
    let mut rng = param_stream(seed, name);
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv {
    /// He-normal (fan-out) initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        group: LrGroup,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let std = (2.0 / (out_ch * kernel.0 * kernel.1) as f32).sqrt();
        let w = normal_tensor(seed, &wname, &[out_ch, in_ch, kernel.0, kernel.1], std);
        let weight = store.add(wname, w, group, true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), group, true)?)
        } else {
            None
        };
        Ok(Conv { weight, bias, stride, pad })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: LrGroup) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), group, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group, true)?,
            running_mean: store.add(
                format!("{name}{RUNNING_MEAN_SUFFIX}"),
                Tensor::zeros(&[channels]),
                group,
                false,
            )?,
            running_var: store.add(
                format!("{name}{RUNNING_VAR_SUFFIX}"),
                Tensor::full(&[channels], 1.0),
                group,
                false,
            )?,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
                let m = BN_MOMENTUM;
                for (r, s) in ctx.store.get_mut(self.running_mean).value.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * s;
                }
                for (r, s) in ctx.store.get_mut(self.running_var).value.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * s;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).value.data().to_vec();
                let var = ctx.store.get(self.running_var).value.data().to_vec();
                ctx.tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }
}

/// Convolution followed by batch norm and, optionally, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        group: LrGroup,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv::new(store, seed, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, false, group)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_ch, group)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if relu { ctx.tape.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from N(0, std^2); `std = None` selects He fan-out.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: Option<f32>,
        group: LrGroup,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let std = std.unwrap_or_else(|| (2.0 / out_dim as f32).sqrt());
        let w = normal_tensor(seed, &wname, &[out_dim, in_dim], std);
        Ok(Linear {
            weight: store.add(wname, w, group, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.affine(x, w, Some(b))
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.shape()[0]
    }
}

/// Global average pool, affine projection, batch norm, ReLU: `N x C x H x W -> N x dim`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub fc: Linear,
    pub bn: BatchNorm,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_dim: usize, dim: usize, group: LrGroup) -> Result<Self> {
        Ok(FeatureExtractor {
            fc: Linear::new(store, seed, &format!("{name}.fc"), in_dim, dim, None, group)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), dim, group)?,
        })
    }

    /// Applies the projection to an already pooled `N x C` input.
    pub fn project(&self, ctx: &mut Ctx, pooled: Var) -> Result<Var> {
        let y = self.fc.forward(ctx, pooled)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }

    pub fn forward(&self, ctx: &mut Ctx, map: Var) -> Result<Var> {
        let pooled = global_pool_flat(ctx.tape, map)?;
        self.project(ctx, pooled)
    }
}

/// Global average pool flattened to `N x C`.
pub fn global_pool_flat(tape: &mut Tape, map: Var) -> Result<Var> {
    let (n, c, _, _) = tape.value(map).dims4("global_pool")?;
    let p = tape.pool2d(map, crate::autodiff::PoolMode::GlobalAvg, (0, 0), (0, 0))?;
    tape.reshape(p, &[n, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_updates_running_stats_in_train_mode_only() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, LrGroup::Head).unwrap();
        let x_val = Tensor::from_slice(&[2, 1], &[1.0, 3.0]).unwrap();
        {
            let mut tape = Tape::new();
            let mut ctx = Ctx { tape: &mut tape, store: &mut store, mode: Mode::Train };
            let x = ctx.tape.constant(x_val.clone());
            bn.forward(&mut ctx, x).unwrap();
        }
        // mean 2, unbiased var 2
        assert!((store.get(bn.running_mean).value.data()[0] - 0.2).abs() < 1e-6);
        assert!((store.get(bn.running_var).value.data()[0] - (0.9 + 0.2)).abs() < 1e-6);
        let before = store.get(bn.running_mean).value.clone();
        let mut tape = Tape::new();
        let mut ctx = Ctx { tape: &mut tape, store: &mut store, mode: Mode::Eval };
        let x = ctx.tape.constant(Tensor::from_slice(&[1, 1], &[5.0]).unwrap());
        bn.forward(&mut ctx, x).unwrap();
        assert_eq!(store.get(bn.running_mean).value, before);
    }

    #[test]
    fn init_is_seeded_by_name() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Conv::new(&mut a, 3, "x", 2, 4, (3, 3), (1, 1), (1, 1), false, LrGroup::Head).unwrap();
        // an unrelated parameter created first must not shift the stream
        Linear::new(&mut b, 3, "other", 2, 2, None, LrGroup::Head).unwrap();
        Conv::new(&mut b, 3, "x", 2, 4, (3, 3), (1, 1), (1, 1), false, LrGroup::Head).unwrap();
        assert_eq!(a.by_name("x.weight").unwrap().value, b.by_name("x.weight").unwrap().value);
    }
}
