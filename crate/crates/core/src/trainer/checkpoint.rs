//! Checkpoint files.
//!
//! ```text
//! "VMRF" | version u32 | entry count u32 | per entry: name length u32, UTF-8 name, VTNS tensor
//! ```
//!
//! Entries are the network parameters (running batch-norm statistics
//! included) plus reserved entries whose names start with `__`: momentum
//! buffers, the training position and the network shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::network::{CameraLossSite, Network, NetworkConfig, ScalePreset};
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor, CountingReader};
use crate::trainer::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VMRF";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "__momentum.";
pub const POSITION_ENTRY: &str = "__train.position";
pub const NETWORK_ENTRY: &str = "__net.shape";

pub fn write_entries<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Parses a whole checkpoint; nothing is returned unless every entry is valid
/// and no trailing bytes remain.
pub fn read_entries<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = CountingReader::new(r);
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, detail: format!("bad checkpoint magic {magic:?}") });
    }
    let at = r.offset();
    let version = r.read_u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: at, detail: format!("unsupported checkpoint version {version}") });
    }
    let count = r.read_u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let len = r.read_u32("name length")? as usize;
        if len == 0 || len > 4096 {
            return Err(Error::Format { offset: at, detail: format!("implausible name length {len}") });
        }
        let mut name = vec![0u8; len];
        let at = r.offset();
        r.read_exact_at(&mut name, "entry name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format { offset: at, detail: "entry name is not UTF-8".into() })?;
        entries.push((name, read_tensor(&mut r)?));
    }
    let end = r.offset();
    if !r.at_eof() {
        return Err(Error::Format { offset: end, detail: "trailing bytes after last entry".into() });
    }
    Ok(entries)
}

/// Writes via a temporary file and a rename, so an existing checkpoint is
/// only replaced by a complete one.
pub fn save_entries(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        write_entries(&mut w, entries).and_then(|_| w.flush()).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_entries(BufReader::new(f))
}

/// Position in the training run: the next step to execute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainPosition {
    pub epoch: usize,
    pub step: usize,
}

fn site_code(site: CameraLossSite) -> f32 {
    match site {
        CameraLossSite::None => 0.0,
        CameraLossSite::Attention => 1.0,
        CameraLossSite::BackbonePreMask => 2.0,
        CameraLossSite::BackbonePostMask => 3.0,
    }
}

fn network_shape(cfg: &NetworkConfig) -> Tensor {
    let preset = match cfg.scale_preset {
        ScalePreset::Paper => 0.0,
        ScalePreset::Toy => 1.0,
    };
    let v = [
        preset,
        cfg.num_identities as f32,
        cfg.num_cameras as f32,
        site_code(cfg.camera_loss_site),
        cfg.attention_enabled as u8 as f32,
    ];
    Tensor::from_slice(&[v.len()], &v).expect("shape entry")
}

fn config_from_shape(t: &Tensor) -> Result<NetworkConfig> {
    let bad = || Error::Format { offset: 0, detail: format!("malformed `{NETWORK_ENTRY}` entry") };
    let v = t.data();
    if v.len() != 5 {
        return Err(bad());
    }
    let preset = match v[0] as u32 {
        0 => ScalePreset::Paper,
        1 => ScalePreset::Toy,
        _ => return Err(bad()),
    };
    let mut cfg = NetworkConfig::preset(preset, v[1] as usize, v[2] as usize);
    cfg.camera_loss_site = match v[3] as u32 {
        0 => CameraLossSite::None,
        1 => CameraLossSite::Attention,
        2 => CameraLossSite::BackbonePreMask,
        3 => CameraLossSite::BackbonePostMask,
        _ => return Err(bad()),
    };
    cfg.attention_enabled = v[4] != 0.0;
    Ok(cfg)
}

/// Every entry of a training checkpoint.
pub fn training_entries(net: &Network, opt: Option<&OptimizerState>, position: TrainPosition) -> Vec<(String, Tensor)> {
    let mut entries: Vec<(String, Tensor)> = net.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    if let Some(opt) = opt {
        for (id, p) in net.params.iter() {
            if let Some(b) = opt.buffer(id) {
                entries.push((format!("{MOMENTUM_PREFIX}{}", p.name), b.clone()));
            }
        }
    }
    entries.push((POSITION_ENTRY.into(), Tensor::from_slice(&[2], &[position.epoch as f32, position.step as f32]).expect("pos")));
    entries.push((NETWORK_ENTRY.into(), network_shape(&net.config)));
    entries
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &Network, opt: Option<&OptimizerState>, position: TrainPosition) -> Result<()> {
    save_entries(path, &training_entries(net, opt, position))
}

/// Parsed checkpoint, validated as a whole before anything is applied.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub position: TrainPosition,
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(load_entries(path)?)
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let shape = find(NETWORK_ENTRY).ok_or_else(|| Error::Format { offset: 0, detail: format!("missing `{NETWORK_ENTRY}`") })?;
        let network = config_from_shape(shape)?;
        let position = match find(POSITION_ENTRY).map(|t| t.data().to_vec()) {
            Some(v) if v.len() == 2 => TrainPosition { epoch: v[0] as usize, step: v[1] as usize },
            _ => return Err(Error::Format { offset: 0, detail: format!("missing or malformed `{POSITION_ENTRY}`") }),
        };
        Ok(Checkpoint { network, position, entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Checks that every parameter of `store` is present with the right shape,
    /// then copies all of them in.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            match self.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(Error::dim("checkpoint", format!("`{}` has shape {:?}, file has {:?}", p.name, p.value.shape(), t.shape())))
                }
                None => return Err(Error::Format { offset: 0, detail: format!("checkpoint lacks parameter `{}`", p.name) }),
            }
        }
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            store.set_value(&name, self.get(&name).expect("checked").clone())?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore, opt: &mut OptimizerState) -> Result<()> {
        let mut staged = Vec::new();
        for (id, p) in store.iter() {
            if opt.buffer(id).is_none() {
                continue;
            }
            let name = format!("{MOMENTUM_PREFIX}{}", p.name);
            let t = self.get(&name).ok_or_else(|| Error::Format { offset: 0, detail: format!("checkpoint lacks `{name}`") })?;
            if Some(t.shape()) != opt.buffer(id).map(Tensor::shape) {
                return Err(Error::dim("checkpoint", format!("`{name}` has shape {:?}", t.shape())));
            }
            staged.push((id, t.clone()));
        }
        for (id, t) in staged {
            opt.set_buffer(id, t)?;
        }
        Ok(())
    }

    /// Rebuilds the network the checkpoint was written from.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::build(self.network.clone(), 0)?;
        self.restore_params(&mut net.params)?;
        Ok(net)
    }
}
