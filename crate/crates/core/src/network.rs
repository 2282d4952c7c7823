//! The full re-identification network.
//!
//! Backbone: a bottleneck ResNet whose last stage keeps its input
//! resolution. Attention module 1 reads the stage-2 output and masks the
//! stage-3 output at half its resolution; module 2 reads the masked stage-3
//! output and masks the stage-4 output. The final map feeds one global and
//! `strips` local extractors, each with its own identity classifier, and the
//! L2-normalized concatenation of the seven features is the descriptor.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{LrGroup, ParamId, ParamStore, PoolMode, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{global_pool_flat, ConvBn, Ctx, FeatureExtractor, Linear, Mode};
use crate::mrfa::{apply_mask, attention_camera_feature, Mrfa, MrfaConfig};
use crate::tensor::Tensor;

/// Standard deviation of classifier weights at initialization.
pub const CLASSIFIER_INIT_STD: f32 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalePreset {
    Paper,
    Toy,
}

impl FromStr for ScalePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ScalePreset::Paper),
            "toy" => Ok(ScalePreset::Toy),
            _ => Err(Error::Config(format!("unknown scale preset `{s}` (paper|toy)"))),
        }
    }
}

impl fmt::Display for ScalePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalePreset::Paper => "paper",
            ScalePreset::Toy => "toy",
        })
    }
}

/// Where the camera classifiers read their input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraLossSite {
    /// The branch concatenation inside each attention module.
    Attention,
    /// Stage-3/stage-4 backbone outputs before mask multiplication.
    BackbonePreMask,
    /// The same maps after mask multiplication.
    BackbonePostMask,
    None,
}

impl FromStr for CameraLossSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(CameraLossSite::Attention),
            "backbone_pre_mask" => Ok(CameraLossSite::BackbonePreMask),
            "backbone_post_mask" => Ok(CameraLossSite::BackbonePostMask),
            "none" => Ok(CameraLossSite::None),
            _ => Err(Error::Config(format!(
                "unknown camera loss site `{s}` (attention|backbone_pre_mask|backbone_post_mask|none)"
            ))),
        }
    }
}

impl fmt::Display for CameraLossSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CameraLossSite::Attention => "attention",
            CameraLossSite::BackbonePreMask => "backbone_pre_mask",
            CameraLossSite::BackbonePostMask => "backbone_post_mask",
            CameraLossSite::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub scale_preset: ScalePreset,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub strips: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    pub num_identities: usize,
    pub num_cameras: usize,
    pub camera_loss_site: CameraLossSite,
    pub attention_enabled: bool,
}

/// Overall down-sampling of the backbone: stem conv, stem pool, stages 2 and 3.
const BACKBONE_STRIDE: usize = 16;
const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 1];

impl NetworkConfig {
    pub fn paper(num_identities: usize, num_cameras: usize) -> Self {
        NetworkConfig {
            scale_preset: ScalePreset::Paper,
            input_height: 384,
            input_width: 128,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
            strips: 6,
            global_dim: 512,
            local_dim: 256,
            num_identities,
            num_cameras,
            camera_loss_site: CameraLossSite::Attention,
            attention_enabled: true,
        }
    }

    /// Channels and feature widths divided by 8, one bottleneck per stage,
    /// 96x32 input.
    pub fn toy(num_identities: usize, num_cameras: usize) -> Self {
        NetworkConfig {
            scale_preset: ScalePreset::Toy,
            input_height: 96,
            input_width: 32,
            stem_channels: 8,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: [1, 1, 1, 1],
            strips: 6,
            global_dim: 64,
            local_dim: 32,
            num_identities,
            num_cameras,
            camera_loss_site: CameraLossSite::Attention,
            attention_enabled: true,
        }
    }

    pub fn preset(preset: ScalePreset, num_identities: usize, num_cameras: usize) -> Self {
        match preset {
            ScalePreset::Paper => Self::paper(num_identities, num_cameras),
            ScalePreset::Toy => Self::toy(num_identities, num_cameras),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.global_dim + self.strips * self.local_dim
    }

    /// `(C, H, W)` of the final feature map.
    pub fn final_map_dims(&self) -> (usize, usize, usize) {
        (
            self.stage_channels[3],
            self.input_height / BACKBONE_STRIDE,
            self.input_width / BACKBONE_STRIDE,
        )
    }

    /// `(C, H / strips, W)` of one horizontal strip.
    pub fn strip_dims(&self) -> (usize, usize, usize) {
        let (c, h, w) = self.final_map_dims();
        (c, h / self.strips, w)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input_height % BACKBONE_STRIDE != 0 || self.input_width % BACKBONE_STRIDE != 0 {
            return cfg(format!(
                "input {}x{} must be divisible by {BACKBONE_STRIDE}",
                self.input_height, self.input_width
            ));
        }
        let (_, h, _) = self.final_map_dims();
        if self.strips == 0 || h % self.strips != 0 {
            return cfg(format!("final map height {h} is not divisible into {} strips", self.strips));
        }
        if self.stem_channels == 0 || self.stage_channels.iter().any(|&c| c == 0 || c % 4 != 0) {
            return cfg(format!("stage channels {:?} must be positive multiples of 4", self.stage_channels));
        }
        if self.blocks_per_stage.contains(&0) {
            return cfg("every stage needs at least one block".into());
        }
        if self.global_dim == 0 || self.local_dim == 0 {
            return cfg("feature dimensions must be positive".into());
        }
        if self.num_identities < 2 {
            return cfg(format!("need at least 2 identities, got {}", self.num_identities));
        }
        if self.num_cameras == 0 {
            return cfg("need at least one camera".into());
        }
        if self.camera_loss_site == CameraLossSite::Attention && !self.attention_enabled {
            return cfg("camera loss site `attention` requires attention to be enabled".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBn,
    conv: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, seed: u64, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let width = out_ch / 4;
        let g = LrGroup::Backbone;
        let s = (stride, stride);
        Ok(Bottleneck {
            reduce: ConvBn::new(store, seed, &format!("{name}.reduce"), in_ch, width, (1, 1), (1, 1), (0, 0), g)?,
            conv: ConvBn::new(store, seed, &format!("{name}.conv3x3"), width, width, (3, 3), s, (1, 1), g)?,
            expand: ConvBn::new(store, seed, &format!("{name}.expand"), width, out_ch, (1, 1), (1, 1), (0, 0), g)?,
            shortcut: if stride != 1 || in_ch != out_ch {
                Some(ConvBn::new(store, seed, &format!("{name}.shortcut"), in_ch, out_ch, (1, 1), s, (0, 0), g)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x, true)?;
        let y = self.conv.forward(ctx, y, true)?;
        let y = self.expand.forward(ctx, y, false)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x, false)?,
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        Ok(ctx.tape.relu(sum))
    }
}

/// Intermediate maps exposed for inspection and for the camera-loss taps.
#[derive(Clone, Copy, Debug)]
pub struct BackboneTaps {
    /// Outputs of the four residual stages before any masking.
    pub stages: [Var; 4],
    pub stage3_masked: Var,
    pub stage4_masked: Var,
    pub masks: Option<[Var; 2]>,
    pub pre_masks: Option<[Var; 2]>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `strips` local heads followed by the global head.
    pub id_logits: Vec<Var>,
    pub descriptor: Var,
    pub camera_features: Option<[Var; 2]>,
    pub camera_logits: Option<[Var; 2]>,
    pub aux_triplet_feature: Var,
    pub global_feature: Var,
    pub local_features: Vec<Var>,
    /// The final feature map cut into `strips` horizontal bands, top first.
    pub strips: Vec<Var>,
    pub taps: BackboneTaps,
}

#[derive(Clone, Debug)]
struct CameraHead {
    extractor: FeatureExtractor,
    classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    stem: ConvBn,
    stages: Vec<Vec<Bottleneck>>,
    attention: [Mrfa; 2],
    global: FeatureExtractor,
    locals: Vec<FeatureExtractor>,
    id_global: Linear,
    id_locals: Vec<Linear>,
    aux: Linear,
    camera: Option<[CameraHead; 2]>,
}

impl Network {
    /// Builds a network whose parameters are a pure function of `seed` and
    /// each parameter's name.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let bb = LrGroup::Backbone;
        let head = LrGroup::Head;
        let stem = ConvBn::new(&mut store, seed, "stem", 3, config.stem_channels, (7, 7), (2, 2), (3, 3), bb)?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.stem_channels;
        for (si, &out_ch) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage[si] {
                let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
                let name = format!("stage{}.block{bi}", si + 1);
                blocks.push(Bottleneck::new(&mut store, seed, &name, in_ch, out_ch, stride)?);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let [_, c2, c3, c4] = config.stage_channels;
        let attention = [
            Mrfa::new(&mut store, seed, "attention1", MrfaConfig { in_channels: c2, out_channels: c3, spatial_stride: 2 })?,
            Mrfa::new(&mut store, seed, "attention2", MrfaConfig { in_channels: c3, out_channels: c4, spatial_stride: 1 })?,
        ];
        let global = FeatureExtractor::new(&mut store, seed, "global", c4, config.global_dim, head)?;
        let locals = (0..config.strips)
            .map(|i| FeatureExtractor::new(&mut store, seed, &format!("local{i}"), c4, config.local_dim, head))
            .collect::<Result<Vec<_>>>()?;
        let nid = config.num_identities;
        let id_global = Linear::new(&mut store, seed, "id.global", config.global_dim, nid, Some(CLASSIFIER_INIT_STD), head)?;
        let id_locals = (0..config.strips)
            .map(|i| {
                Linear::new(&mut store, seed, &format!("id.local{i}"), config.local_dim, nid, Some(CLASSIFIER_INIT_STD), head)
            })
            .collect::<Result<Vec<_>>>()?;
        let aux = Linear::new(&mut store, seed, "aux.fc", c3, config.global_dim, None, head)?;
        let tap_channels = match config.camera_loss_site {
            CameraLossSite::Attention => Some([c2, c3]),
            CameraLossSite::BackbonePreMask | CameraLossSite::BackbonePostMask => Some([c3, c4]),
            CameraLossSite::None => None,
        };
        let camera = match tap_channels {
            Some(chs) => {
                let mut heads = Vec::with_capacity(2);
                for (k, ch) in chs.into_iter().enumerate() {
                    heads.push(CameraHead {
                        extractor: FeatureExtractor::new(&mut store, seed, &format!("camera{}.extractor", k + 1), ch, config.global_dim, head)?,
                        classifier: Linear::new(
                            &mut store,
                            seed,
                            &format!("camera{}.classifier", k + 1),
                            config.global_dim,
                            config.num_cameras,
                            Some(CLASSIFIER_INIT_STD),
                            head,
                        )?,
                    });
                }
                let [a, b]: [CameraHead; 2] = heads.try_into().expect("two heads");
                Some([a, b])
            }
            None => None,
        };
        Ok(Network {
            config,
            params: store,
            stem,
            stages,
            attention,
            global,
            locals,
            id_global,
            id_locals,
            aux,
            camera,
        })
    }

    pub fn attention_modules(&self) -> &[Mrfa; 2] {
        &self.attention
    }

    /// Trainable parameters the forward pass never reads under this
    /// configuration (the attention modules when attention is disabled).
    pub fn unused_params(&self) -> Vec<ParamId> {
        if self.config.attention_enabled {
            return Vec::new();
        }
        let prefixes: Vec<String> = self.attention.iter().map(|m| format!("{}.", m.prefix())).collect();
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Zeroes both attention modules so their masks become exactly 1.
    pub fn zero_attention(&mut self) {
        for m in &self.attention {
            m.zero_parameters(&mut self.params);
        }
    }

    fn backbone(&self, ctx: &mut Ctx, x: Var) -> Result<BackboneTaps> {
        let mut y = self.stem.forward(ctx, x, true)?;
        y = ctx.tape.pool2d(y, PoolMode::Max, (2, 2), (2, 2))?;
        let mut outs = Vec::with_capacity(4);
        let mut masks = None;
        let mut pre_masks = None;
        let mut masked = [y; 2];
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                y = b.forward(ctx, y)?;
            }
            outs.push(y);
            match si {
                2 => {
                    if self.config.attention_enabled {
                        let a1 = self.attention[0].forward(ctx, outs[1])?;
                        y = apply_mask(ctx.tape, y, a1.mask)?;
                        masks = Some([a1.mask, a1.mask]);
                        pre_masks = Some([a1.pre_mask, a1.pre_mask]);
                    }
                    masked[0] = y;
                }
                3 => {
                    if self.config.attention_enabled {
                        let a2 = self.attention[1].forward(ctx, masked[0])?;
                        y = apply_mask(ctx.tape, y, a2.mask)?;
                        if let (Some(m), Some(p)) = (masks.as_mut(), pre_masks.as_mut()) {
                            m[1] = a2.mask;
                            p[1] = a2.pre_mask;
                        }
                    }
                    masked[1] = y;
                }
                _ => {}
            }
        }
        Ok(BackboneTaps {
            stages: [outs[0], outs[1], outs[2], outs[3]],
            stage3_masked: masked[0],
            stage4_masked: masked[1],
            masks,
            pre_masks,
        })
    }

    /// Camera features for `site`; each is `N x global_dim`.
    pub fn camera_loss_tap(&self, ctx: &mut Ctx, site: CameraLossSite, taps: &BackboneTaps) -> Result<[Var; 2]> {
        let heads = self
            .camera
            .as_ref()
            .filter(|_| site == self.config.camera_loss_site)
            .ok_or_else(|| Error::Contract(format!("no camera heads were built for site `{site}`")))?;
        let sources = match site {
            CameraLossSite::None => return Err(Error::Contract("camera loss tap requested with site `none`".into())),
            CameraLossSite::Attention => {
                let pre = taps.pre_masks.ok_or_else(|| Error::Contract("attention is disabled".into()))?;
                return Ok([
                    attention_camera_feature(ctx, &heads[0].extractor, pre[0])?,
                    attention_camera_feature(ctx, &heads[1].extractor, pre[1])?,
                ]);
            }
            CameraLossSite::BackbonePreMask => [taps.stages[2], taps.stages[3]],
            CameraLossSite::BackbonePostMask => [taps.stage3_masked, taps.stage4_masked],
        };
        Ok([heads[0].extractor.forward(ctx, sources[0])?, heads[1].extractor.forward(ctx, sources[1])?])
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward(&mut self, tape: &mut Tape, images: &Tensor, mode: Mode) -> Result<ForwardOutputs> {
        let (_, c, h, w) = images.dims4("network")?;
        if c != 3 || h != self.config.input_height || w != self.config.input_width {
            return Err(Error::dim(
                "network",
                format!(
                    "expected Nx3x{}x{} input, got {:?}",
                    self.config.input_height,
                    self.config.input_width,
                    images.shape()
                ),
            ));
        }
        let mut params = std::mem::take(&mut self.params);
        let result = self.forward_inner(tape, &mut params, images, mode);
        self.params = params;
        result
    }

    fn forward_inner(&self, tape: &mut Tape, store: &mut ParamStore, images: &Tensor, mode: Mode) -> Result<ForwardOutputs> {
        let mut ctx = Ctx { tape, store, mode };
        let x = ctx.tape.constant(images.clone());
        let taps = self.backbone(&mut ctx, x)?;
        let fmap = taps.stage4_masked;
        let (n, c, h, w) = ctx.tape.value(fmap).dims4("network")?;
        let strip_h = h / self.config.strips;

        let global_feature = self.global.forward(&mut ctx, fmap)?;
        let mut strips = Vec::with_capacity(self.config.strips);
        let mut local_features = Vec::with_capacity(self.config.strips);
        let mut id_logits = Vec::with_capacity(self.config.strips + 1);
        for (i, (ex, cls)) in self.locals.iter().zip(&self.id_locals).enumerate() {
            let strip = ctx.tape.narrow(fmap, 2, i * strip_h, strip_h)?;
            strips.push(strip);
            let pooled = ctx.tape.pool2d(strip, PoolMode::Avg, (strip_h, w), (strip_h, w))?;
            let flat = ctx.tape.reshape(pooled, &[n, c])?;
            let f = ex.project(&mut ctx, flat)?;
            id_logits.push(cls.forward(&mut ctx, f)?);
            local_features.push(f);
        }
        id_logits.push(self.id_global.forward(&mut ctx, global_feature)?);

        let mut parts = vec![global_feature];
        parts.extend(&local_features);
        let cat = ctx.tape.concat(&parts, 1)?;
        let descriptor = ctx.tape.l2_normalize(cat);

        let aux_pooled = global_pool_flat(ctx.tape, taps.stage3_masked)?;
        let aux = self.aux.forward(&mut ctx, aux_pooled)?;
        let aux_triplet_feature = ctx.tape.l2_normalize(aux);

        let (camera_features, camera_logits) = match self.config.camera_loss_site {
            CameraLossSite::None => (None, None),
            site => {
                let feats = self.camera_loss_tap(&mut ctx, site, &taps)?;
                let heads = self.camera.as_ref().expect("heads exist for a site");
                let logits = [heads[0].classifier.forward(&mut ctx, feats[0])?, heads[1].classifier.forward(&mut ctx, feats[1])?];
                (Some(feats), Some(logits))
            }
        };

        Ok(ForwardOutputs {
            id_logits,
            descriptor,
            camera_features,
            camera_logits,
            aux_triplet_feature,
            global_feature,
            local_features,
            strips,
            taps,
        })
    }

    /// Train-mode forward on a fresh tape.
    pub fn forward_train(&mut self, images: &Tensor) -> Result<(Tape, ForwardOutputs)> {
        if images.shape().first().copied().unwrap_or(0) < 2 {
            return Err(Error::DegenerateBatch { op: "forward_train", count: images.shape()[0] });
        }
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, Mode::Train)?;
        Ok((tape, out))
    }

    /// Eval-mode forward; returns the tape for inspection.
    pub fn forward_eval(&mut self, images: &Tensor) -> Result<(Tape, ForwardOutputs)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, Mode::Eval)?;
        Ok((tape, out))
    }

    /// Unit-norm inference descriptors, `N x descriptor_dim`.
    pub fn embed(&mut self, images: &Tensor) -> Result<Tensor> {
        let (tape, out) = self.forward_eval(images)?;
        Ok(tape.value(out.descriptor).clone())
    }

    /// Embeds `images` in chunks of at most `batch` rows.
    pub fn embed_batched(&mut self, images: &[Tensor], batch: usize) -> Result<Tensor> {
        let dim = self.config.descriptor_dim();
        let mut data = Vec::with_capacity(images.len() * dim);
        for chunk in images.chunks(batch.max(1)) {
            let stacked = Tensor::stack(chunk)?;
            data.extend_from_slice(self.embed(&stacked)?.data());
        }
        Tensor::new(vec![images.len(), dim], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_images(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn paper_dimensions() {
        let cfg = NetworkConfig::paper(751, 6);
        assert_eq!(cfg.descriptor_dim(), 2048);
        assert_eq!(cfg.final_map_dims(), (2048, 24, 8));
        assert_eq!(cfg.strip_dims(), (2048, 4, 8));
    }

    #[test]
    fn strip_count_must_divide_height() {
        let mut cfg = NetworkConfig::toy(4, 2);
        cfg.strips = 4;
        assert!(matches!(Network::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::build(NetworkConfig::toy(4, 2), 11).unwrap();
        let b = Network::build(NetworkConfig::toy(4, 2), 11).unwrap();
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn toy_forward_shapes_and_unit_descriptors() {
        let mut net = Network::build(NetworkConfig::toy(5, 3), 1).unwrap();
        let (tape, out) = net.forward_train(&random_images(8, 96, 32, 2)).unwrap();
        assert_eq!(out.id_logits.len(), 7);
        for &l in &out.id_logits {
            assert_eq!(tape.value(l).shape(), &[8, 5]);
        }
        assert_eq!(tape.value(out.descriptor).shape(), &[8, 256]);
        assert_eq!(tape.value(out.taps.stage4_masked).shape(), &[8, 256, 6, 2]);
        for row in tape.value(out.descriptor).data().chunks(256) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let cams = out.camera_features.unwrap();
        assert_eq!(tape.value(cams[0]).shape(), &[8, 64]);
        assert_eq!(tape.value(out.aux_triplet_feature).shape(), &[8, 64]);
    }

    #[test]
    fn wrong_resolution_is_a_dimension_error() {
        let mut net = Network::build(NetworkConfig::toy(5, 3), 1).unwrap();
        assert!(matches!(
            net.forward_train(&random_images(2, 64, 32, 0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn attention_site_needs_attention() {
        let mut cfg = NetworkConfig::toy(4, 2);
        cfg.attention_enabled = false;
        assert!(Network::build(cfg.clone(), 0).is_err());
        cfg.camera_loss_site = CameraLossSite::None;
        assert!(Network::build(cfg, 0).is_ok());
    }

    #[test]
    fn strips_reassemble_final_map() {
        let mut net = Network::build(NetworkConfig::toy(4, 2), 3).unwrap();
        let (mut tape, out) = net.forward_train(&random_images(2, 96, 32, 4)).unwrap();
        let fmap = out.taps.stage4_masked;
        let strips: Vec<Var> = (0..6).map(|i| tape.narrow(fmap, 2, i, 1).unwrap()).collect();
        let back = tape.concat(&strips, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(fmap));
    }

    #[test]
    fn embedding_is_batch_independent() {
        let mut net = Network::build(NetworkConfig::toy(4, 2), 3).unwrap();
        // move running statistics away from their initial values
        net.forward_train(&random_images(4, 96, 32, 9)).unwrap();
        let imgs = random_images(6, 96, 32, 5);
        let all = net.embed(&imgs).unwrap();
        let one = net.embed(&imgs.select_rows(&[3])).unwrap();
        assert!(all.select_rows(&[3]).max_abs_diff(&one) < 1e-6);
        let dup = net.embed(&imgs.select_rows(&[1, 1])).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
    }
}
