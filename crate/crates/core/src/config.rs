//! Run configuration: `key = value` files with namespaced keys, plus
//! command-line overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::data::augment::{AugmentConfig, ErasingConfig, HdaConfig};
use crate::error::{Error, Result};
use crate::losses::{CameraLossConfig, LossWeights, TripletConfig};
use crate::network::{CameraLossSite, NetworkConfig, ScalePreset};
use crate::trainer::optim::{OptimizerConfig, Schedule, FULL_EPOCHS, FULL_MILESTONES};

/// Every accepted key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed for initialization, sampling and augmentation"),
    ("net.scale", "paper", "network size: paper (384x128 input) or toy (96x32 input)"),
    ("net.attention", "true", "enable the two attention modules"),
    ("net.camera_loss_site", "attention", "camera loss tap: attention, backbone_pre_mask, backbone_post_mask or none"),
    ("net.num_cameras", "auto", "number of cameras; auto infers it from the manifest"),
    ("loss.lambda1", "5", "weight of the triplet loss on the descriptor"),
    ("loss.lambda2", "5", "weight of the triplet loss on the auxiliary feature"),
    ("loss.lambda3", "1", "weight of the camera loss"),
    ("loss.margin", "0.3", "triplet margin"),
    ("loss.epsilon", "0.1", "label smoothing of the camera targets"),
    ("loss.p", "24", "identities per batch"),
    ("loss.k", "4", "images per identity in a batch"),
    ("hda.sigma", "0.05", "standard deviation of the crop/pad fraction"),
    ("hda.clip", "0.15", "maximum crop/pad fraction"),
    ("hda.apply_prob", "0.4", "probability of applying crop/pad (0 disables it)"),
    ("aug.flip_prob", "0.5", "horizontal flip probability"),
    ("aug.erase_prob", "0.5", "random erasing probability"),
    ("opt.momentum", "0.9", "SGD momentum"),
    ("opt.weight_decay", "0.0005", "coupled weight decay"),
    ("opt.lr_backbone", "0.01", "base learning rate of stem and residual stages"),
    ("opt.lr_head", "0.1", "base learning rate of attention, extractors and classifiers"),
    ("opt.decay_bn", "true", "apply weight decay to batch-norm parameters"),
    ("sched.epochs", "450", "total training epochs"),
    ("sched.milestones", "auto", "comma-separated halving epochs; auto scales 150,180,..,360 by epochs/450"),
    ("sched.factor", "0.5", "learning-rate multiplier at each milestone"),
    ("data.manifest", "", "training manifest CSV (path,person_id,camera_id)"),
    ("data.train_fraction", "0.8", "fraction of identities used for training; the rest are held out"),
    ("train.out", "run", "output directory for checkpoint and log"),
    ("train.steps_per_epoch", "auto", "steps per epoch; auto is floor(train images / (P*K))"),
    ("train.checkpoint_every", "1", "epochs between checkpoints"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: ScalePreset,
    pub attention: bool,
    pub camera_loss_site: CameraLossSite,
    pub num_cameras: Option<usize>,
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub epsilon: f32,
    pub hda: HdaConfig,
    pub flip_prob: f32,
    pub erase_prob: f32,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub milestones: Option<Vec<usize>>,
    pub factor: f32,
    pub manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            scale: ScalePreset::Paper,
            attention: true,
            camera_loss_site: CameraLossSite::Attention,
            num_cameras: None,
            weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            epsilon: 0.1,
            hda: HdaConfig::default(),
            flip_prob: 0.5,
            erase_prob: 0.5,
            optimizer: OptimizerConfig::default(),
            epochs: FULL_EPOCHS,
            milestones: None,
            factor: 0.5,
            manifest: None,
            train_fraction: 0.8,
            out_dir: PathBuf::from("run"),
            steps_per_epoch: None,
            checkpoint_every: 1,
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("defaults parse");
        }
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_auto<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

pub fn valid_keys() -> String {
    KEYS.iter().map(|(k, _, _)| *k).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "net.scale" => self.scale = v.parse().map_err(|e: Error| Error::Usage(e.to_string()))?,
            "net.attention" => self.attention = parse_bool(key, v)?,
            "net.camera_loss_site" => self.camera_loss_site = v.parse().map_err(|e: Error| Error::Usage(e.to_string()))?,
            "net.num_cameras" => self.num_cameras = parse_auto(key, v)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "loss.lambda3" => self.weights.lambda3 = parse(key, v)?,
            "loss.margin" => self.triplet.margin = parse(key, v)?,
            "loss.epsilon" => self.epsilon = parse(key, v)?,
            "loss.p" => self.triplet.p = parse(key, v)?,
            "loss.k" => self.triplet.k = parse(key, v)?,
            "hda.sigma" => self.hda.sigma = parse(key, v)?,
            "hda.clip" => self.hda.clip = parse(key, v)?,
            "hda.apply_prob" => self.hda.apply_prob = parse(key, v)?,
            "aug.flip_prob" => self.flip_prob = parse(key, v)?,
            "aug.erase_prob" => self.erase_prob = parse(key, v)?,
            "opt.momentum" => self.optimizer.momentum = parse(key, v)?,
            "opt.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "opt.lr_backbone" => self.optimizer.lr_backbone = parse(key, v)?,
            "opt.lr_head" => self.optimizer.lr_head = parse(key, v)?,
            "opt.decay_bn" => self.optimizer.decay_batch_norm = parse_bool(key, v)?,
            "sched.epochs" => self.epochs = parse(key, v)?,
            "sched.milestones" => {
                self.milestones = if v == "auto" {
                    None
                } else if v.is_empty() {
                    Some(Vec::new())
                } else {
                    Some(v.split(',').map(|m| parse(key, m.trim())).collect::<Result<_>>()?)
                }
            }
            "sched.factor" => self.factor = parse(key, v)?,
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.train_fraction" => self.train_fraction = parse(key, v)?,
            "train.out" => self.out_dir = PathBuf::from(v),
            "train.steps_per_epoch" => self.steps_per_epoch = parse_auto(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(Error::Usage(format!("unknown key `{other}`; valid keys: {}", valid_keys()))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k, v)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_str(text)?;
        Ok(c)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Usage(m) => Error::Usage(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Reads a config file; relative `data.manifest` and `train.out` paths
    /// resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &c.manifest {
            if m.is_relative() {
                c.manifest = Some(base.join(m));
            }
        }
        if c.out_dir.is_relative() && text.lines().any(|l| l.trim_start().starts_with("train.out")) {
            c.out_dir = base.join(&c.out_dir);
        }
        Ok(c)
    }

    /// Renders every key in file syntax; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let auto = |v: Option<usize>| v.map_or("auto".to_string(), |n| n.to_string());
        let lines = [
            ("seed", self.seed.to_string()),
            ("net.scale", self.scale.to_string()),
            ("net.attention", self.attention.to_string()),
            ("net.camera_loss_site", self.camera_loss_site.to_string()),
            ("net.num_cameras", auto(self.num_cameras)),
            ("loss.lambda1", self.weights.lambda1.to_string()),
            ("loss.lambda2", self.weights.lambda2.to_string()),
            ("loss.lambda3", self.weights.lambda3.to_string()),
            ("loss.margin", self.triplet.margin.to_string()),
            ("loss.epsilon", self.epsilon.to_string()),
            ("loss.p", self.triplet.p.to_string()),
            ("loss.k", self.triplet.k.to_string()),
            ("hda.sigma", self.hda.sigma.to_string()),
            ("hda.clip", self.hda.clip.to_string()),
            ("hda.apply_prob", self.hda.apply_prob.to_string()),
            ("aug.flip_prob", self.flip_prob.to_string()),
            ("aug.erase_prob", self.erase_prob.to_string()),
            ("opt.momentum", self.optimizer.momentum.to_string()),
            ("opt.weight_decay", self.optimizer.weight_decay.to_string()),
            ("opt.lr_backbone", self.optimizer.lr_backbone.to_string()),
            ("opt.lr_head", self.optimizer.lr_head.to_string()),
            ("opt.decay_bn", self.optimizer.decay_batch_norm.to_string()),
            ("sched.epochs", self.epochs.to_string()),
            ("sched.milestones", self.milestones.as_deref().map_or("auto".to_string(), list)),
            ("sched.factor", self.factor.to_string()),
            ("data.manifest", self.manifest.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("data.train_fraction", self.train_fraction.to_string()),
            ("train.out", self.out_dir.display().to_string()),
            ("train.steps_per_epoch", auto(self.steps_per_epoch)),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn schedule(&self) -> Schedule {
        let mut s = Schedule::compressed(self.epochs);
        if self.epochs == FULL_EPOCHS {
            s.milestones = FULL_MILESTONES.to_vec();
        }
        if let Some(m) = &self.milestones {
            s.milestones = m.clone();
        }
        s.factor = self.factor;
        s
    }

    pub fn network(&self, num_identities: usize, num_cameras: usize) -> NetworkConfig {
        let mut n = NetworkConfig::preset(self.scale, num_identities, num_cameras);
        n.attention_enabled = self.attention;
        n.camera_loss_site = self.camera_loss_site;
        n
    }

    pub fn camera_loss(&self, num_cameras: usize) -> CameraLossConfig {
        CameraLossConfig { epsilon: self.epsilon, num_cameras }
    }

    pub fn augment(&self, height: usize, width: usize) -> AugmentConfig {
        AugmentConfig {
            height,
            width,
            hda: self.hda,
            flip_prob: self.flip_prob,
            erasing: ErasingConfig { prob: self.erase_prob, ..ErasingConfig::default() },
        }
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.triplet.validate()?;
        self.hda.validate()?;
        self.optimizer.validate()?;
        self.schedule().validate()?;
        for (name, p) in [("aug.flip_prob", self.flip_prob), ("aug.erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("loss.epsilon must be in [0, 1), got {}", self.epsilon)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("data.train_fraction must be in (0, 1), got {}", self.train_fraction)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        if self.camera_loss_site == CameraLossSite::Attention && !self.attention {
            return Err(Error::Config("net.camera_loss_site = attention requires net.attention = true".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_key_table() {
        let c = RunConfig::default();
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.triplet, TripletConfig::default());
        assert_eq!(c.optimizer, OptimizerConfig::default());
        assert_eq!(c.schedule(), Schedule::default());
        assert_eq!(c.hda, HdaConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = RunConfig::parse_str("# toy\nnet.scale = toy\nsched.epochs = 30 # short\nloss.p=4\n").unwrap();
        assert_eq!(c.scale, ScalePreset::Toy);
        assert_eq!(c.schedule().milestones, vec![10, 12, 14, 16, 18, 20, 22, 24]);
        c.set_assignment("sched.milestones=5,9").unwrap();
        c.set_assignment("net.camera_loss_site=none").unwrap();
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        match RunConfig::parse_str("net.scael = toy") {
            Err(Error::Usage(m)) => assert!(m.contains("line 1") && m.contains("net.scale")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(RunConfig::default().set_assignment("loss.p"), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::default().set("loss.p", "many"), Err(Error::Usage(_))));
    }

    #[test]
    fn attention_site_needs_attention() {
        let mut c = RunConfig::default();
        c.set("net.attention", "false").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.set("net.camera_loss_site", "backbone_pre_mask").unwrap();
        c.validate().unwrap();
    }
}
