mod common;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use reid_core::autodiff::{ParamStore, Tape};
use reid_core::config::RunConfig;
use reid_core::data::augment::{hda_draw, HdaConfig};
use reid_core::data::manifest::{load_manifest, Dataset};
use reid_core::data::synth::synth_generate;
use reid_core::evaluator::{camera_accuracy, embed_dataset, evaluate, EvalReport, GalleryIndex};
use reid_core::gradcheck::{check_network, check_ops, DEFAULT_INSTANCES};
use reid_core::layers::{Ctx, Mode};
use reid_core::losses::{
    batch_hard_triplet, camera_loss, id_loss, smoothed_camera_distribution, CameraLossConfig, TripletConfig,
};
use reid_core::mrfa::{Mrfa, MrfaConfig};
use reid_core::network::{Network, NetworkConfig};
use reid_core::rng::stream;
use reid_core::trainer::{epoch_means, lr_at, Checkpoint, LogWriter, Schedule, Trainer};
use reid_core::{Result, Tensor};

use common::{brute_force_eval, cross_entropy_oracle, exhaustive_triplet, one_hot, randn, random_index};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let ops = check_ops(0, DEFAULT_INSTANCES)?;
    let failing: Vec<&str> = ops.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = ops.iter().max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance))).unwrap();
    let net = check_network(0)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = failing.is_empty() && net.passed() && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} checks, worst {} {:.2e} (tol {:.0e}), failing {:?}; network {:.2e} (tol {:.0e}, unfrozen {:.2e}); {secs:.1}s",
            ops.len(),
            worst.name,
            worst.max_rel_error,
            worst.tolerance,
            failing,
            net.max_rel_error(),
            net.tolerance,
            net.max_rel_error_free(),
        ),
    )
}

fn mask_properties() -> Result<Outcome> {
    let mut rng = stream(&[2]);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    let mut outside = 0usize;
    for pass in 0..1000 {
        let c = 4 * rng.random_range(1..=4);
        let stride = rng.random_range(1..=2);
        let mut store = ParamStore::new();
        let m = Mrfa::new(&mut store, rng.random(), "m", MrfaConfig::doubling(c, stride))?;
        let h = stride * rng.random_range(2..=6);
        let w = stride * rng.random_range(2..=4);
        let std = rng.random_range(0.5..4.0);
        let x = randn(&[rng.random_range(2..=3), c, h, w], &mut rng, std);
        let mut tape = Tape::new();
        let mode = if pass % 2 == 0 { Mode::Train } else { Mode::Eval };
        let xv = tape.constant(x);
        let out = m.forward(&mut Ctx { tape: &mut tape, store: &mut store, mode }, xv)?;
        for &v in tape.value(out.mask).data() {
            lo = lo.min(v);
            hi = hi.max(v);
            outside += usize::from(!(v > 0.0 && v < 2.0));
        }
    }

    let mut rng = stream(&[2, 1]);
    let images = randn(&[4, 3, 96, 32], &mut rng, 1.0);
    let mut zeroed = Network::build(NetworkConfig::toy(5, 3), 3)?;
    zeroed.zero_attention();
    let mut plain_cfg = NetworkConfig::toy(5, 3);
    plain_cfg.attention_enabled = false;
    plain_cfg.camera_loss_site = reid_core::network::CameraLossSite::None;
    let mut plain = Network::build(plain_cfg, 3)?;
    let (ta, a) = zeroed.forward_eval(&images)?;
    let (tb, b) = plain.forward_eval(&images)?;
    let masks = a.taps.masks.expect("attention enabled");
    let unit = masks.iter().all(|&m| ta.value(m).data().iter().all(|&v| v == 1.0));
    let bits = |t: &Tape, v| t.value(v).data().iter().map(|x: &f32| x.to_bits()).collect::<Vec<_>>();
    let same_backbone = bits(&ta, a.taps.stage3_masked) == bits(&tb, b.taps.stage3_masked)
        && bits(&ta, a.taps.stage4_masked) == bits(&tb, b.taps.stage4_masked)
        && bits(&ta, a.descriptor) == bits(&tb, b.descriptor);
    outcome(
        outside == 0 && unit && same_backbone,
        format!(
            "1000 passes, mask range [{lo:e}, {hi}], {outside} values outside (0,2); zeroed masks all 1.0: {unit}; backbone bitwise equal: {same_backbone}"
        ),
    )
}

fn dimension_trace() -> Result<Outcome> {
    let mut net = Network::build(NetworkConfig::paper(751, 6), 0)?;
    let images = randn(&[1, 3, 384, 128], &mut stream(&[3]), 1.0);
    let (tape, out) = net.forward_eval(&images)?;
    let masks = out.taps.masks.expect("attention enabled");
    let shape = |v| tape.value(v).shape()[1..].to_vec();
    let m1 = shape(masks[0]);
    let m2 = shape(masks[1]);
    let strips: Vec<Vec<usize>> = out.strips.iter().map(|&s| shape(s)).collect();
    let desc = shape(out.descriptor);
    let pass = m1 == [1024, 24, 8]
        && m2 == [2048, 24, 8]
        && strips.len() == 6
        && strips.iter().all(|s| s == &[2048, 4, 8])
        && desc == [2048];
    outcome(pass, format!("mask-1 {m1:?}, mask-2 {m2:?}, {} strips of {:?}, descriptor {desc:?}", strips.len(), strips[0]))
}

fn loss_oracles() -> Result<Outcome> {
    let mut rng = stream(&[4]);
    let mut triplet_err = 0.0f64;
    for _ in 0..200 {
        let p = rng.random_range(2..=4);
        let k = rng.random_range(2..=4);
        let dim = rng.random_range(2..=8);
        let mut ids: Vec<usize> = (0..20).collect();
        ids.shuffle(&mut rng);
        let mut labels: Vec<usize> = ids[..p].iter().flat_map(|&id| std::iter::repeat_n(id, k)).collect();
        labels.shuffle(&mut rng);
        let margin = rng.random_range(0.0..1.0f32);
        let std = rng.random_range(0.2..1.5);
        let x = randn(&[p * k, dim], &mut rng, std);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let loss = batch_hard_triplet(&mut tape, xv, &labels, &TripletConfig { margin, p, k })?;
        let oracle = exhaustive_triplet(&x, &labels, margin as f64);
        triplet_err = triplet_err.max((tape.value(loss).item() as f64 - oracle).abs());
    }

    let (mut id_err, mut cam_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(2..=16);
        let classes = rng.random_range(2..=12);
        let heads: Vec<Tensor> = (0..7).map(|_| randn(&[n, classes], &mut rng, 2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = heads.iter().map(|h| tape.constant(h.clone())).collect();
        let loss = id_loss(&mut tape, &vars, &labels)?;
        let oracle = cross_entropy_oracle(&heads, &one_hot(&labels, classes));
        id_err = id_err.max((tape.value(loss).item() as f64 - oracle).abs());

        let cfg = CameraLossConfig { epsilon: rng.random_range(0.0..0.3), num_cameras: rng.random_range(2..=8) };
        let heads: Vec<Tensor> = (0..2).map(|_| randn(&[n, cfg.num_cameras], &mut rng, 2.0)).collect();
        let cams: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_cameras)).collect();
        let eps = cfg.epsilon as f64;
        let targets: Vec<Vec<f64>> = cams
            .iter()
            .map(|&v| {
                (0..cfg.num_cameras)
                    .map(|j| eps / cfg.num_cameras as f64 + if j == v { 1.0 - eps } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = heads.iter().map(|h| tape.constant(h.clone())).collect();
        let loss = camera_loss(&mut tape, &vars, &cams, &cfg)?;
        cam_err = cam_err.max((tape.value(loss).item() as f64 - cross_entropy_oracle(&heads, &targets)).abs());
    }

    let q = smoothed_camera_distribution(2, &CameraLossConfig { epsilon: 0.1, num_cameras: 6 })?;
    let mass = q[2] as f64;
    let pass = triplet_err <= 1e-6 && id_err <= 1e-5 && cam_err <= 1e-5 && (mass - 0.916667).abs() <= 1e-6;
    outcome(
        pass,
        format!(
            "triplet vs enumeration {triplet_err:.1e} over 200 batches; id {id_err:.1e}, camera {cam_err:.1e} over 200 cases; true-class mass {mass:.7}"
        ),
    )
}

fn hda_statistics() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = HdaConfig { sigma: 0.05, clip: 0.15, apply_prob: 0.4 };
    let mut rng = stream(&[5]);
    let draws = 100_000;
    let (mut applied, mut sum, mut max) = (0usize, 0.0f64, 0.0f32);
    for _ in 0..draws {
        let d = hda_draw(&cfg, &mut rng);
        if d.applied {
            applied += 1;
            sum += d.fraction as f64;
            max = max.max(d.fraction);
        }
    }
    let rate = applied as f64 / draws as f64;
    let mean = sum / applied as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = (rate - 0.40).abs() <= 0.01 && max <= 0.15 && (mean - 0.0397).abs() <= 0.0010 && secs < 30.0;
    outcome(pass, format!("rate {rate:.4}, max fraction {max}, mean applied fraction {mean:.5}; {secs:.2}s"))
}

fn evaluator_oracle() -> Result<Outcome> {
    let mut rng = stream(&[6]);
    let (mut cmc_mismatch, mut map_err, mut scored) = (0usize, 0.0f64, 0usize);
    for _ in 0..1000 {
        if scored == 100 {
            break;
        }
        let q = rng.random_range(1..=50);
        let g = rng.random_range(1..=200);
        let (queries, gallery) = random_index(q, g, &mut rng);
        let oracle = brute_force_eval(&queries, &gallery, 20);
        let report = evaluate(&queries, &gallery, 20);
        match (oracle, report) {
            (None, Err(reid_core::Error::Protocol(_))) => continue,
            (Some(o), Ok(r)) => {
                cmc_mismatch += usize::from(o.cmc != r.cmc || o.valid != r.num_valid_queries);
                map_err = map_err.max((o.map - r.map).abs());
                scored += 1;
            }
            _ => cmc_mismatch += 1,
        }
    }

    let unit = |a: f32| vec![a.cos(), a.sin()];
    let index = |angles: &[f32], pids: Vec<usize>, cams: Vec<usize>| {
        GalleryIndex::new(Tensor::new(vec![angles.len(), 2], angles.iter().flat_map(|&a| unit(a)).collect()).unwrap(), pids, cams)
    };
    let query = index(&[0.0], vec![1], vec![0])?;
    let gallery = index(&[0.05, 0.1, 0.2, 0.3], vec![1, 2, 1, 3], vec![1, 1, 2, 1])?;
    let hand: EvalReport = evaluate(&query, &gallery, 4)?;
    let hand_ok = (hand.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9;
    outcome(
        cmc_mismatch == 0 && map_err <= 1e-6 && scored == 100 && hand_ok,
        format!(
            "{scored} instances, {cmc_mismatch} CMC mismatches, max mAP error {map_err:.1e}; hand case AP {:.5}",
            hand.map
        ),
    )
}

fn schedule() -> Result<Outcome> {
    let s = Schedule::default();
    let base = 0.1f32;
    let at = |e| lr_at(e, &s, base);
    let (l0, l150, l360) = (at(0)?, at(150)?, at(360)?);
    let pass = s.milestones == [150, 180, 210, 240, 270, 300, 330, 360]
        && l0 == base
        && l150 == base / 2.0
        && l360 == base / 256.0
        && lr_at(360, &s, 0.01)? == 0.01 * 0.5f32.powi(8);
    outcome(pass, format!("milestones {:?}; lr_at(0)={l0}, lr_at(150)={l150}, lr_at(360)={l360} for base {base}", s.milestones))
}

fn toy_dataset(dir: &Path, ids: usize, cams: usize, per: usize) -> Result<Dataset> {
    let manifest = synth_generate(ids, cams, per, 128, 48, 0, dir)?;
    load_manifest(manifest, Some(cams))
}

struct ToyRun {
    loss_ratio: f64,
    report: EvalReport,
    camera_accuracy: Option<f64>,
    secs: f64,
}

fn toy_run(train: &Dataset, test: &Dataset, overrides: &str) -> Result<ToyRun> {
    let start = Instant::now();
    let mut cfg = RunConfig::parse_str("net.scale = toy\nsched.epochs = 30\nloss.p = 4\nloss.k = 4\n")?;
    cfg.apply_str(overrides)?;
    let data = Dataset::from_records(train.records().to_vec(), train.num_cameras())?;
    let mut trainer = Trainer::new(cfg, data)?;
    let mut rows = Vec::new();
    trainer.run(
        |r| {
            rows.push(*r);
            Ok(())
        },
        None,
        None,
    )?;
    let means = epoch_means(&rows);
    let loss_ratio = means.last().unwrap().1 / means[0].1;
    let (q, g) = test.query_gallery_split(2)?;
    let report = evaluate(&embed_dataset(&mut trainer.net, &q, 32)?, &embed_dataset(&mut trainer.net, &g, 32)?, 10)?;
    let camera_accuracy = match trainer.net.config.camera_loss_site {
        reid_core::network::CameraLossSite::None => None,
        _ => Some(camera_accuracy(&mut trainer.net, test, 32)?),
    };
    Ok(ToyRun { loss_ratio, report, camera_accuracy, secs: start.elapsed().as_secs_f64() })
}

fn end_to_end() -> Result<Outcome> {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = toy_dataset(dir.path(), 20, 4, 25)?;
    let (train, test) = data.split_by_identity(0.8)?;
    let full = toy_run(&train, &test, "")?;
    let base = toy_run(&train, &test, "net.attention = false\nnet.camera_loss_site = none\nloss.lambda3 = 0\n")?;
    let cam = full.camera_accuracy.unwrap_or(0.0);
    let (r1, map) = (full.report.rank(1), full.report.map);
    let pass = full.loss_ratio < 0.5 && r1 >= 0.9 && map >= 0.75 && cam >= 0.8 && r1 >= base.report.rank(1);
    outcome(
        pass,
        format!(
            "loss ratio {:.3}, rank-1 {:.3}, mAP {:.3}, camera accuracy {cam:.3}, baseline rank-1 {:.3} mAP {:.3}; {:.0}s + {:.0}s",
            full.loss_ratio,
            r1,
            map,
            base.report.rank(1),
            base.report.map,
            full.secs,
            base.secs
        ),
    )
}

fn logged_run(data: &Dataset, dir: &Path, split_at: Option<usize>) -> Result<(Vec<u8>, Vec<u8>)> {
    let cfg = RunConfig::parse_str("net.scale = toy\nsched.epochs = 4\nsched.milestones = 1,3\nloss.p = 4\nloss.k = 4\nseed = 9\n")?;
    let fresh = || Dataset::from_records(data.records().to_vec(), data.num_cameras());
    let log = dir.join("train_log.csv");
    let ck = dir.join("checkpoint.vmrf");
    let mut trainer = Trainer::new(cfg.clone(), fresh()?)?;
    let mut w = LogWriter::open(&log, false)?;
    trainer.run(|r| w.write(r), Some(&ck), split_at)?;
    if split_at.is_some() {
        drop(trainer);
        let checkpoint = Checkpoint::load(&ck)?;
        let mut resumed = Trainer::resume(cfg, fresh()?, &checkpoint)?;
        let mut w = LogWriter::open(&log, true)?;
        resumed.run(|r| w.write(r), Some(&ck), None)?;
    }
    let read = |p: &Path| std::fs::read(p).map_err(|e| reid_core::Error::io(p, e));
    Ok((read(&log)?, read(&ck)?))
}

fn determinism_and_resume() -> Result<Outcome> {
    let root = tempfile::tempdir().expect("temp dir");
    let data = toy_dataset(&root.path().join("data"), 6, 2, 12)?;
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| root.path().join(d)).collect();
    for d in &dirs {
        std::fs::create_dir_all(d).map_err(|e| reid_core::Error::io(d, e))?;
    }
    let (log_a, ck_a) = logged_run(&data, &dirs[0], None)?;
    let (log_b, ck_b) = logged_run(&data, &dirs[1], None)?;
    let (log_c, ck_c) = logged_run(&data, &dirs[2], Some(7))?;
    let rows = log_a.iter().filter(|&&b| b == b'\n').count() - 1;
    let repeat = log_a == log_b && ck_a == ck_b;
    let resume = log_a == log_c && ck_a == ck_c;
    outcome(
        repeat && resume && rows > 7,
        format!("{rows} logged steps; repeated run bitwise equal: {repeat}; resume at step 7 bitwise equal: {resume}"),
    )
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("mask properties", mask_properties),
        ("dimension trace", dimension_trace),
        ("loss oracles", loss_oracles),
        ("augmentation statistics", hda_statistics),
        ("evaluator oracle", evaluator_oracle),
        ("schedule", schedule),
        ("end-to-end synthetic run", end_to_end),
        ("determinism and resume", determinism_and_resume),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string() || name.contains(f.as_str())) {
            continue;
        }
        let o = run().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        failed += usize::from(!o.pass);
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
