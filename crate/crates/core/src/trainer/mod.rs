//! Training loop: P x K sampling, augmentation, the combined objective,
//! SGD with grouped learning rates, logging and checkpointing.

pub mod checkpoint;
pub mod optim;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::ParamId;
use crate::config::RunConfig;
use crate::data::augment::{augment_chain, AugmentConfig};
use crate::data::manifest::Dataset;
use crate::data::sampler::{pk_indices, BatchSpec};
use crate::error::{Error, Result};
use crate::losses::{loss_values, training_objective, CameraLossConfig, LossValues};
use crate::network::Network;
use crate::rng::stream;
use crate::tensor::Tensor;

pub use checkpoint::{save_checkpoint, Checkpoint, TrainPosition};
pub use optim::{lr_at, OptimizerConfig, OptimizerState, Schedule};

const TAG_AUGMENT: u64 = 0xa0;

pub const LOG_HEADER: &str = "epoch,step,L_ID,L1_triplet,L2_triplet,L_camera,combined";
pub const CHECKPOINT_FILE: &str = "checkpoint.vmrf";
pub const LOG_FILE: &str = "train_log.csv";

/// One training-log row. `epoch` is 1-based, `step` counts within the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossValues,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, l.id, l.triplet_descriptor, l.triplet_aux, l.camera, l.combined
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format { offset: 0, detail: format!("malformed log row `{line}`") };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| bad());
        Ok(LogRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            losses: LossValues {
                id: num(f[2])?,
                triplet_descriptor: num(f[3])?,
                triplet_aux: num(f[4])?,
                camera: num(f[5])?,
                combined: num(f[6])?,
            },
        })
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 && line == LOG_HEADER {
            continue;
        }
        rows.push(LogRow::parse(&line)?);
    }
    Ok(rows)
}

/// Mean combined loss per epoch, in epoch order.
pub fn epoch_means(rows: &[LogRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.losses.combined as f64;
                *n += 1;
            }
            _ => out.push((r.epoch, r.losses.combined as f64, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: Network,
    pub opt: OptimizerState,
    pub schedule: Schedule,
    pub position: TrainPosition,
    data: Dataset,
    identities: Vec<Vec<usize>>,
    batch: BatchSpec,
    augment: AugmentConfig,
    camera: CameraLossConfig,
    steps_per_epoch: usize,
    frozen: Vec<ParamId>,
}

impl Trainer {
    /// Fresh run: parameters initialized from `config.seed`.
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let num_cameras = config.num_cameras.unwrap_or(data.num_cameras());
        let net_cfg = config.network(data.num_identities(), num_cameras);
        let net = Network::build(net_cfg, config.seed)?;
        Self::with_network(config, data, net)
    }

    /// Continues the run stored in `checkpoint`.
    pub fn resume(config: RunConfig, data: Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let mut t = Self::new(config, data)?;
        if checkpoint.network != t.net.config {
            return Err(Error::Config("checkpoint network does not match the configuration".into()));
        }
        let mut params = t.net.params.clone();
        let mut opt = t.opt.clone();
        checkpoint.restore_params(&mut params)?;
        checkpoint.restore_optimizer(&params, &mut opt)?;
        t.net.params = params;
        t.opt = opt;
        t.position = checkpoint.position;
        Ok(t)
    }

    fn with_network(config: RunConfig, data: Dataset, net: Network) -> Result<Self> {
        let schedule = config.schedule();
        let batch = BatchSpec { p: config.triplet.p, k: config.triplet.k, seed: config.seed };
        let steps_per_epoch = match config.steps_per_epoch {
            Some(0) => return Err(Error::Config("train.steps_per_epoch must be positive".into())),
            Some(n) => n,
            None => (data.len() / batch.batch_size()).max(1),
        };
        if data.num_identities() < batch.p {
            return Err(Error::Sampling(format!(
                "batch needs {} identities but the training set has {}",
                batch.p,
                data.num_identities()
            )));
        }
        let augment = config.augment(net.config.input_height, net.config.input_width);
        let camera = config.camera_loss(net.config.num_cameras);
        let opt = OptimizerState::new(&net.params, config.optimizer);
        let frozen = net.unused_params();
        Ok(Trainer {
            identities: data.identity_index(),
            config,
            opt,
            schedule,
            position: TrainPosition::default(),
            data,
            batch,
            augment,
            camera,
            steps_per_epoch,
            frozen,
            net,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.schedule.total_epochs
    }

    pub fn finished(&self) -> bool {
        self.position.epoch >= self.schedule.total_epochs
    }

    /// Augmented images and labels for the batch at `(epoch, step)`. Sample
    /// `i` of the batch uses a stream keyed by its position in the epoch.
    pub fn batch(&self, epoch: usize, step: usize) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
        let idx = pk_indices(&self.identities, &self.batch, epoch, step)?;
        let b = self.batch.batch_size();
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        let mut cameras = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let sample = (step * b + slot) as u64;
            let mut rng = stream(&[self.config.seed, TAG_AUGMENT, epoch as u64, sample]);
            let (t, _) = augment_chain(self.data.pixels(i)?, &self.augment, &mut rng, true)?;
            images.push(t);
            let r = &self.data.records()[i];
            labels.push(r.label);
            cameras.push(r.camera_id);
        }
        Ok((Tensor::stack(&images)?, labels, cameras))
    }

    /// Runs the step at the current position and advances it. A non-finite
    /// loss or updated parameter is a divergence error; the position is then
    /// left unchanged and the in-memory parameters must not be saved.
    pub fn step(&mut self) -> Result<LogRow> {
        if self.finished() {
            return Err(Error::Contract("training schedule already complete".into()));
        }
        let TrainPosition { epoch, step } = self.position;
        let lr_scale = self.schedule.factor_at(epoch)?;
        let (images, labels, cameras) = self.batch(epoch, step)?;
        let (mut tape, out) = self.net.forward_train(&images)?;
        let (parts, total) = training_objective(
            &mut tape,
            &out,
            &labels,
            &cameras,
            &self.config.triplet,
            &self.camera,
            &self.config.weights,
        )?;
        let losses = loss_values(&tape, &parts, total);
        if !losses.combined.is_finite() {
            return Err(Error::Divergence { part: "combined".into(), value: losses.combined });
        }
        let grads = tape.backward(total)?;
        let mut received = vec![false; self.net.params.len()];
        for (id, _) in grads.param_grads() {
            received[id.index()] = true;
        }
        self.net.params.zero_grad();
        grads.apply_to(&mut self.net.params);
        self.opt.step(&mut self.net.params, &received, &self.frozen, lr_scale)?;
        if let Some((_, p)) = self.net.params.iter().find(|(_, p)| !p.value.all_finite()) {
            let value = p.value.data().iter().copied().find(|v| !v.is_finite()).unwrap_or(f32::NAN);
            return Err(Error::Divergence { part: format!("parameter {}", p.name), value });
        }
        self.position.step += 1;
        if self.position.step == self.steps_per_epoch {
            self.position = TrainPosition { epoch: epoch + 1, step: 0 };
        }
        Ok(LogRow { epoch: epoch + 1, step, losses })
    }

    /// Runs until the schedule completes or `max_steps` more steps have run.
    /// Log rows go to `sink`; a checkpoint is written to `checkpoint` every
    /// `train.checkpoint_every` epochs and when the run stops. On divergence
    /// the error is returned and the last written checkpoint is left as is.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&LogRow) -> Result<()>,
        checkpoint: Option<&Path>,
        max_steps: Option<usize>,
    ) -> Result<()> {
        let mut done = 0;
        while !self.finished() && max_steps.is_none_or(|m| done < m) {
            let row = self.step()?;
            sink(&row)?;
            done += 1;
            let epoch_end = self.position.step == 0;
            if let Some(path) = checkpoint {
                if epoch_end && self.position.epoch % self.config.checkpoint_every == 0 {
                    save_checkpoint(path, &self.net, Some(&self.opt), self.position)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            save_checkpoint(path, &self.net, Some(&self.opt), self.position)?;
        }
        Ok(())
    }
}

/// Appending CSV log writer.
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    /// Creates a new log, or appends to an existing one when `append` is set.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let exists = path.exists();
        let f = if append {
            OpenOptions::new().create(true).append(true).open(&path)
        } else {
            File::create(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut w = LogWriter { out: BufWriter::new(f), path };
        if !(append && exists) {
            w.line(LOG_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.line(&row.to_csv())
    }
}
