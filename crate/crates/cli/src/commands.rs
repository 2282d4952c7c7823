use std::fs;
use std::path::{Path, PathBuf};

use reid_core::config::RunConfig;
use reid_core::data::augment::{augment_chain, unstandardize};
use reid_core::data::manifest::{load_manifest, write_manifest, Dataset};
use reid_core::data::ppm::{encode_pgm, to_byte, write_ppm, RgbImage};
use reid_core::data::synth::synth_generate;
use reid_core::evaluator::{embed_dataset, evaluate, GalleryIndex};
use reid_core::gradcheck::{check_network, check_ops};
use reid_core::network::Network;
use reid_core::rng::stream;
use reid_core::tensor_io::save_tensor;
use reid_core::trainer::{read_log, Checkpoint, LogRow, LogWriter, Trainer, CHECKPOINT_FILE, LOG_FILE};
use reid_core::{Error, Result, Tensor};

use crate::{resolve_config, Cli, Command};

const TAG_PREVIEW: u64 = 0x9e;
pub const CONFIG_FILE: &str = "config.txt";
pub const HELDOUT_FILE: &str = "heldout.csv";

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    All,
    Query,
    Gallery,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(usage(format!("--{name} must be positive")));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth { out, ids, cameras, per_id, height, width } => {
            for (name, v) in [("ids", *ids), ("cameras", *cameras), ("per-id", *per_id), ("height", *height), ("width", *width)] {
                positive(name, v)?;
            }
            let manifest = synth_generate(*ids, *cameras, *per_id, *height, *width, cfg.seed, out)?;
            println!("wrote {} images and {}", ids * per_id, manifest.display());
            Ok(())
        }
        Command::Train { manifest, out, resume, max_steps } => train(cfg, manifest.as_deref(), out.as_deref(), *resume, *max_steps),
        Command::Embed { checkpoint, manifest, out, part, per_camera, batch } => {
            positive("per-camera", *per_camera)?;
            positive("batch", *batch)?;
            let mut net = Checkpoint::load(checkpoint)?.network()?;
            let data = load_manifest(manifest, None)?;
            let data = match part {
                Part::All => data,
                Part::Query => data.query_gallery_split(*per_camera)?.0,
                Part::Gallery => data.query_gallery_split(*per_camera)?.1,
            };
            let index = embed_dataset(&mut net, &data, *batch)?;
            let (t, c) = index.save(out)?;
            println!("wrote {} embeddings to {} and {}", index.len(), t.display(), c.display());
            Ok(())
        }
        Command::Eval { query, gallery, max_rank, cmc } => {
            positive("max-rank", *max_rank)?;
            let report = evaluate(&GalleryIndex::load(query)?, &GalleryIndex::load(gallery)?, *max_rank)?;
            print!("{}", report.render());
            if let Some(path) = cmc {
                write_file(path, report.cmc_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::AugmentPreview { manifest, n, out, checkpoint } => {
            positive("n", *n)?;
            preview(&cfg, manifest, *n, out, checkpoint.as_deref())
        }
        Command::Gradcheck { instances, ops_only } => {
            positive("instances", *instances)?;
            gradcheck(cfg.seed, *instances, *ops_only)
        }
    }
}

fn train(mut cfg: RunConfig, manifest: Option<&Path>, out: Option<&Path>, resume: bool, max_steps: Option<usize>) -> Result<()> {
    if let Some(m) = manifest {
        cfg.manifest = Some(m.to_path_buf());
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    let manifest = cfg.manifest.clone().ok_or_else(|| usage("no training manifest: pass --manifest or set data.manifest"))?;
    let out = cfg.out_dir.clone();
    let (ckpt, log) = (out.join(CHECKPOINT_FILE), out.join(LOG_FILE));
    if resume && !ckpt.exists() {
        return Err(usage(format!("--resume needs an existing checkpoint at {}", ckpt.display())));
    }

    let data = load_manifest(&manifest, cfg.num_cameras)?;
    let (train_set, heldout) = data.split_by_identity(cfg.train_fraction)?;
    let mut trainer = if resume {
        Trainer::resume(cfg.clone(), train_set, &Checkpoint::load(&ckpt)?)?
    } else {
        Trainer::new(cfg.clone(), train_set)?
    };

    create_dir(&out)?;
    let mut saved = cfg.clone();
    saved.manifest = Some(absolute(&manifest)?);
    saved.out_dir = absolute(&out)?;
    write_file(&out.join(CONFIG_FILE), saved.to_text().as_bytes())?;
    write_heldout(&heldout, &out.join(HELDOUT_FILE))?;
    let mut writer = if resume {
        let done = trainer.position.epoch * trainer.steps_per_epoch() + trainer.position.step;
        let kept: Vec<LogRow> = if log.exists() { read_log(&log)?.into_iter().take(done).collect() } else { Vec::new() };
        let mut w = LogWriter::open(&log, false)?;
        for r in &kept {
            w.write(r)?;
        }
        w
    } else {
        LogWriter::open(&log, false)?
    };

    let spe = trainer.steps_per_epoch();
    let mut epoch_sum = 0.0f64;
    let mut epoch_rows = 0usize;
    let result = trainer.run(
        |r| {
            writer.write(r)?;
            epoch_sum += r.losses.combined as f64;
            epoch_rows += 1;
            if r.step + 1 == spe {
                println!("epoch {} mean combined loss {:.4}", r.epoch, epoch_sum / epoch_rows as f64);
                epoch_sum = 0.0;
                epoch_rows = 0;
            }
            Ok(())
        },
        Some(&ckpt),
        max_steps,
    );
    result?;
    println!(
        "stopped at epoch {} step {} of {} epochs; checkpoint {}, log {}",
        trainer.position.epoch,
        trainer.position.step,
        trainer.schedule.total_epochs,
        ckpt.display(),
        log.display()
    );
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn write_heldout(heldout: &Dataset, path: &Path) -> Result<()> {
    let rows = heldout
        .records()
        .iter()
        .map(|r| Ok((absolute(&r.path)?.display().to_string(), r.person_id, r.camera_id)))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(path, &rows)
}

/// Channel mean of one `C x H x W` mask, min-max scaled to bytes.
fn mask_pgm(mask: &Tensor) -> Vec<u8> {
    let (c, h, w) = (mask.shape()[1], mask.shape()[2], mask.shape()[3]);
    let plane = h * w;
    let mut mean = vec![0.0f64; plane];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&mask.data()[ch * plane..(ch + 1) * plane]) {
            *m += v as f64 / c as f64;
        }
    }
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<u8> = mean.iter().map(|&m| to_byte(((m - lo) / span) as f32)).collect();
    encode_pgm(w, h, &gray)
}

fn preview(cfg: &RunConfig, manifest: &Path, n: usize, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let data = load_manifest(manifest, cfg.num_cameras)?;
    let mut net = match checkpoint {
        Some(c) => Checkpoint::load(c)?.network()?,
        None => Network::build(cfg.network(data.num_identities(), data.num_cameras()), cfg.seed)?,
    };
    let aug = cfg.augment(net.config.input_height, net.config.input_width);
    create_dir(out)?;
    let count = n.min(data.len());
    for i in 0..count {
        let idx = i * data.len() / count;
        let pixels = data.pixels(idx)?;
        let mut rng = stream(&[cfg.seed, TAG_PREVIEW, idx as u64]);
        let (augmented, trace) = augment_chain(pixels, &aug, &mut rng, true)?;
        write_ppm(out.join(format!("{i:03}_before.ppm")), &RgbImage::from_tensor(pixels)?)?;
        write_ppm(out.join(format!("{i:03}_after.ppm")), &RgbImage::from_tensor(&unstandardize(&augmented))?)?;
        let batch = Tensor::stack(std::slice::from_ref(&augmented))?;
        let (tape, outputs) = net.forward_eval(&batch)?;
        for (k, &m) in outputs.taps.masks.iter().flatten().enumerate() {
            let mask = tape.value(m);
            save_tensor(out.join(format!("{i:03}_mask{}.vtns", k + 1)), mask)?;
            write_file(&out.join(format!("{i:03}_mask{}.pgm", k + 1)), &mask_pgm(mask))?;
        }
        let erased = trace.erased.map_or("none".to_string(), |r| format!("{}x{} at ({}, {})", r.h, r.w, r.y, r.x));
        println!(
            "{i:03} {}: hda applied={} fraction={:.4} {} {}, flipped={}, erased={}",
            data.records()[idx].path.display(),
            trace.hda.applied,
            trace.hda.fraction,
            if trace.hda.g < 0.0 { "crop" } else { "pad" },
            if trace.hda.top { "top" } else { "bottom" },
            trace.flipped,
            erased
        );
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize, ops_only: bool) -> Result<()> {
    let mut failed = 0;
    for r in check_ops(seed, instances)? {
        println!("{}", r.render());
        failed += usize::from(!r.passed());
    }
    if !ops_only {
        let net = check_network(seed)?;
        for p in &net.params {
            let mark = if net.failures().iter().any(|f| f.name == p.name) { "FAIL" } else { "ok" };
            println!("  {mark} {} rel_error={:.3e} unfrozen={:.3e}", p.name, p.rel_error, p.rel_error_free);
        }
        println!(
            "{} network max_rel_error={:.3e} tolerance={:.0e} unfrozen_max_rel_error={:.3e}",
            if net.passed() { "PASS" } else { "FAIL" },
            net.max_rel_error(),
            net.tolerance,
            net.max_rel_error_free()
        );
        failed += usize::from(!net.passed());
    }
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}
