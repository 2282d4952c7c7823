//! SGD with momentum and coupled weight decay, and the step-halving
//! learning-rate schedule.

use crate::autodiff::{LrGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_backbone: f32,
    pub lr_head: f32,
    /// Apply weight decay to batch-norm scales and shifts.
    pub decay_batch_norm: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { momentum: 0.9, weight_decay: 5e-4, lr_backbone: 0.01, lr_head: 0.1, decay_batch_norm: true }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("opt.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("opt.weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn base_lr(&self, group: LrGroup) -> f32 {
        match group {
            LrGroup::Backbone => self.lr_backbone,
            LrGroup::Head => self.lr_head,
        }
    }
}

/// Batch-norm affine parameters are recognized by name.
pub fn is_batch_norm_param(name: &str) -> bool {
    name.ends_with(".bn.gamma") || name.ends_with(".bn.beta")
}

/// Momentum buffers, one per trainable parameter, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    buffers: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: OptimizerConfig) -> Self {
        let buffers = store.iter().map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape()))).collect();
        OptimizerState { config, buffers }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor> {
        self.buffers.get(id.index()).and_then(Option::as_ref)
    }

    /// Replaces a buffer, checking its shape.
    pub fn set_buffer(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        match self.buffers.get_mut(id.index()) {
            Some(Some(b)) if b.shape() == value.shape() => {
                *b = value;
                Ok(())
            }
            Some(Some(b)) => Err(Error::dim("optimizer", format!("buffer shape {:?}, got {:?}", b.shape(), value.shape()))),
            _ => Err(Error::Contract(format!("parameter {} has no momentum buffer", id.index()))),
        }
    }

    /// One update using the gradients stored in `store`.
    ///
    /// `received[i]` tells whether parameter `i` got a gradient this step;
    /// trainable parameters listed in `frozen` are skipped, every other
    /// trainable parameter without a gradient is a contract error.
    /// Update: `g' = g + wd * p; buf = mu * buf + g'; p -= lr * buf`.
    pub fn step(&mut self, store: &mut ParamStore, received: &[bool], frozen: &[ParamId], lr_scale: f32) -> Result<()> {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            let p = store.get(id);
            if p.trainable && !frozen.contains(&id) && !received.get(id.index()).copied().unwrap_or(false) {
                return Err(Error::Contract(format!("parameter `{}` received no gradient", p.name)));
            }
        }
        let cfg = self.config;
        for id in ids {
            if frozen.contains(&id) {
                continue;
            }
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let buf = self.buffers[id.index()]
                .as_mut()
                .ok_or_else(|| Error::Contract(format!("parameter `{}` has no momentum buffer", p.name)))?;
            let wd = if cfg.decay_batch_norm || !is_batch_norm_param(&p.name) { cfg.weight_decay } else { 0.0 };
            let lr = cfg.base_lr(p.group) * lr_scale;
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for ((v, b), &g) in value.iter_mut().zip(buf.data_mut()).zip(grad) {
                *b = cfg.momentum * *b + (g + wd * *v);
                *v -= lr * *b;
            }
        }
        Ok(())
    }
}

pub const FULL_MILESTONES: [usize; 8] = [150, 180, 210, 240, 270, 300, 330, 360];
pub const FULL_EPOCHS: usize = 450;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub milestones: Vec<usize>,
    pub factor: f32,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { milestones: FULL_MILESTONES.to_vec(), factor: 0.5, total_epochs: FULL_EPOCHS }
    }
}

impl Schedule {
    /// The default milestones rescaled to a shorter run, rounding to the
    /// nearest epoch.
    pub fn compressed(total_epochs: usize) -> Self {
        let milestones = FULL_MILESTONES
            .iter()
            .map(|&m| ((m * total_epochs) as f64 / FULL_EPOCHS as f64).round() as usize)
            .collect();
        Schedule { milestones, factor: 0.5, total_epochs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("sched.epochs must be positive".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("sched.factor must be in (0, 1), got {}", self.factor)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("sched.milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        Ok(())
    }

    /// Multiplier applied to the base learning rates at `epoch` (0-based).
    pub fn factor_at(&self, epoch: usize) -> Result<f32> {
        if epoch >= self.total_epochs {
            return Err(Error::Contract(format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs)));
        }
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        Ok(self.factor.powi(drops as i32))
    }
}

pub fn lr_at(epoch: usize, schedule: &Schedule, base_lr: f32) -> Result<f32> {
    Ok(base_lr * schedule.factor_at(epoch)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value), LrGroup::Head, true).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    fn plain(momentum: f32, wd: f32) -> OptimizerConfig {
        OptimizerConfig { momentum, weight_decay: wd, lr_backbone: 0.1, lr_head: 0.1, decay_batch_norm: true }
    }

    #[test]
    fn plain_gradient_step() {
        let mut s = single(1.0, 0.1);
        let mut st = OptimizerState::new(&s, plain(0.0, 0.0));
        st.step(&mut s, &[true], &[], 1.0).unwrap();
        assert!((s.get(ParamId(0)).value.item() - 0.99).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence() {
        let g = 0.5f32;
        let mut s = single(0.0, g);
        let mut st = OptimizerState::new(&s, plain(0.9, 0.0));
        st.step(&mut s, &[true], &[], 1.0).unwrap();
        assert_eq!(st.buffer(ParamId(0)).unwrap().item(), g);
        st.step(&mut s, &[true], &[], 1.0).unwrap();
        assert!((st.buffer(ParamId(0)).unwrap().item() - 1.9 * g).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = single(0.123_456_7, 0.0);
        let before = s.get(ParamId(0)).value.clone();
        let mut st = OptimizerState::new(&s, plain(0.9, 0.0));
        for _ in 0..3 {
            st.step(&mut s, &[true], &[], 1.0).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).value.data()[0].to_bits(), before.data()[0].to_bits());
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = single(1.0, 0.0);
        let mut st = OptimizerState::new(&s, plain(0.9, 0.0));
        match st.step(&mut s, &[false], &[], 1.0) {
            Err(Error::Contract(m)) => assert!(m.contains("`w`")),
            other => panic!("unexpected {other:?}"),
        }
        st.step(&mut s, &[false], &[ParamId(0)], 1.0).unwrap();
    }

    #[test]
    fn batch_norm_decay_flag() {
        let mut s = ParamStore::new();
        let id = s.add("x.bn.gamma", Tensor::scalar(1.0), LrGroup::Head, true).unwrap();
        let mut cfg = plain(0.0, 0.5);
        cfg.decay_batch_norm = false;
        let mut st = OptimizerState::new(&s, cfg);
        st.step(&mut s, &[true], &[], 1.0).unwrap();
        assert_eq!(s.get(id).value.item(), 1.0);
        st.config.decay_batch_norm = true;
        st.step(&mut s, &[true], &[], 1.0).unwrap();
        assert!((s.get(id).value.item() - 0.95).abs() < 1e-7);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::default();
        assert_eq!(lr_at(0, &s, 0.1).unwrap(), 0.1);
        assert_eq!(lr_at(149, &s, 0.1).unwrap(), 0.1);
        assert_eq!(lr_at(150, &s, 0.1).unwrap(), 0.05);
        assert!((lr_at(360, &s, 0.01).unwrap() - 3.90625e-5).abs() < 1e-12);
        assert!(matches!(lr_at(450, &s, 0.1), Err(Error::Contract(_))));
        assert_eq!(Schedule::compressed(30).milestones, vec![10, 12, 14, 16, 18, 20, 22, 24]);
    }
}
