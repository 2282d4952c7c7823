//! Finite-difference gradient checks for the tape ops, the composite modules
//! and the full network objective.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{LrGroup, ParamStore, Pattern, PoolMode, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Ctx, FeatureExtractor, Mode, BN_EPS};
use crate::losses::{
    batch_hard_triplet, camera_loss, hardest_pairs, id_loss, smoothed_camera_distribution, training_objective,
    CameraLossConfig, LossWeights, TripletConfig,
};
use crate::mrfa::{Mrfa, MrfaConfig};
use crate::network::{ForwardOutputs, Network, NetworkConfig};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f32 = 1e-2;
/// Tolerance for single ops and shallow compositions.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance for compositions deeper than ten ops.
pub const DEEP_TOLERANCE: f64 = 1e-2;
pub const DEFAULT_INSTANCES: usize = 20;

const TAG_OPS: u64 = 0x6c;
const TAG_NETWORK: u64 = 0x6e;

/// Worst relative error of one checked function over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn render(&self) -> String {
        format!(
            "{} {:<20} instances={:<3} max_rel_error={:.3e} tolerance={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_rel_error,
            self.tolerance
        )
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)` over whole gradient vectors; zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Body<'a> = dyn Fn(&mut Tape, &mut ParamStore, &[Var]) -> Result<Var> + 'a;

fn run(body: &Body, inputs: &[Tensor], store: &mut ParamStore, pattern: Option<&Pattern>) -> Result<Tensor> {
    let mut tape = pattern.map_or_else(Tape::new, |p| Tape::replaying(p.clone()));
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = body(&mut tape, store, &vars)?;
    tape.take_pattern()?;
    Ok(tape.value(y).clone())
}

fn contract(y: &Tensor, w: &[f32]) -> f64 {
    y.data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Compares the analytic gradient of `sum(w * body(inputs))`, for random
/// weights `w`, with central differences over every coordinate of every
/// input and every trainable parameter in `store`. With `freeze` the
/// perturbed passes reuse the branch pattern of the unperturbed one.
pub fn check_function(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    store: &mut ParamStore,
    freeze: bool,
    body: &Body,
) -> Result<f64> {
    let probe = run(body, inputs, store, None)?;
    let weights: Vec<f32> = (0..probe.numel())
        .map(|_| rng.random_range(0.5f32..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let mut tape = if freeze { Tape::recording() } else { Tape::new() };
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = body(&mut tape, store, &vars)?;
    let pattern = tape.take_pattern()?;
    let pattern = pattern.as_ref();
    let w = tape.constant(Tensor::new(tape.value(y).shape().to_vec(), weights.clone())?);
    let prod = tape.mul(y, w)?;
    let root = tape.sum(prod);
    let grads = tape.backward(root)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let central = |plus: f64, minus: f64, step: f64| (plus - minus) / step;

    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        for j in 0..x.numel() {
            let mut shifted = inputs.to_vec();
            let base = x.data()[j];
            let (hi, lo) = (base + STEP, base - STEP);
            shifted[i].data_mut()[j] = hi;
            let plus = contract(&run(body, &shifted, store, pattern)?, &weights);
            shifted[i].data_mut()[j] = lo;
            let minus = contract(&run(body, &shifted, store, pattern)?, &weights);
            analytic.push(g[j] as f64);
            numeric.push(central(plus, minus, hi as f64 - lo as f64));
        }
    }

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let g = grads
            .param_grads()
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
        for (j, &gj) in g.iter().enumerate() {
            let base = store.get(id).value.data()[j];
            let (hi, lo) = (base + STEP, base - STEP);
            store.get_mut(id).value.data_mut()[j] = hi;
            let plus = contract(&run(body, inputs, store, pattern)?, &weights);
            store.get_mut(id).value.data_mut()[j] = lo;
            let minus = contract(&run(body, inputs, store, pattern)?, &weights);
            store.get_mut(id).value.data_mut()[j] = base;
            analytic.push(gj as f64);
            numeric.push(central(plus, minus, hi as f64 - lo as f64));
        }
    }
    Ok(rel_error(&analytic, &numeric))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng, std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).map(|v: f32| v * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values at least `gap` away from zero.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f32) -> Tensor {
    randn(shape, rng, 1.0).map(|v| v + gap.copysign(v))
}

/// Distinct values spaced `spacing` apart in random order.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng, spacing: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * spacing).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape")
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn plain(inputs: &[Tensor], rng: &mut ChaCha8Rng, body: impl Fn(&mut Tape, &[Var]) -> Result<Var>, ) -> Result<f64> {
    check_function(rng, inputs, &mut ParamStore::new(), false, &|t, _, v| body(t, v))
}

fn same_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn pool_instance(rng: &mut ChaCha8Rng, mode: PoolMode) -> Result<f64> {
    let window = pick(rng, &[(2, 2), (3, 3), (2, 1), (1, 3)]);
    let stride = if rng.random::<bool>() { window } else { (1, 1) };
    let h = window.0 + stride.0 * rng.random_range(0..3);
    let w = window.1 + stride.1 * rng.random_range(0..3);
    let shape = [rng.random_range(1..=2), rng.random_range(1..=2), h, w];
    let x = match mode {
        PoolMode::Max => distinct(&shape, rng, 0.05),
        _ => randn(&shape, rng, 1.0),
    };
    plain(&[x], rng, |t, v| t.pool2d(v[0], mode, window, stride))
}

fn conv_instance(rng: &mut ChaCha8Rng, first: bool) -> Result<f64> {
    let (x, w, stride, pad) = if first {
        (randn(&[2, 3, 5, 5], rng, 1.0), randn(&[4, 3, 3, 3], rng, 0.5), (1, 1), (1, 1))
    } else {
        let k = pick(rng, &[(1, 1), (3, 3), (1, 3), (3, 1), (2, 2)]);
        let c = rng.random_range(1..=3);
        let x = randn(&[rng.random_range(1..=2), c, k.0 + rng.random_range(0..4), k.1 + rng.random_range(0..4)], rng, 1.0);
        let w = randn(&[rng.random_range(1..=3), c, k.0, k.1], rng, 0.5);
        (x, w, (rng.random_range(1..=2), rng.random_range(1..=2)), (rng.random_range(0..=1), rng.random_range(0..=1)))
    };
    let o = w.shape()[0];
    if first || rng.random::<bool>() {
        let b = randn(&[o], rng, 0.5);
        plain(&[x, w, b], rng, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    } else {
        plain(&[x, w], rng, |t, v| t.conv2d(v[0], v[1], None, stride, pad))
    }
}

fn affine_instance(rng: &mut ChaCha8Rng, first: bool) -> Result<f64> {
    let (n, d, o) = if first {
        (3, 5, 4)
    } else {
        (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5))
    };
    let x = randn(&[n, d], rng, 1.0);
    let w = randn(&[o, d], rng, 0.5);
    if first || rng.random::<bool>() {
        let b = randn(&[o], rng, 0.5);
        plain(&[x, w, b], rng, |t, v| t.affine(v[0], v[1], Some(v[2])))
    } else {
        plain(&[x, w], rng, |t, v| t.affine(v[0], v[1], None))
    }
}

fn bn_input(rng: &mut ChaCha8Rng) -> (Tensor, usize) {
    let c = rng.random_range(1..=3);
    let shape = if rng.random::<bool>() {
        vec![rng.random_range(4..=6), c]
    } else {
        vec![rng.random_range(2..=3), c, 2, rng.random_range(2..=3)]
    };
    let x = randn(&shape, rng, 1.0).map(|v| v + 0.5);
    (x, c)
}

fn batch_norm_train_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (x, c) = bn_input(rng);
    let (g, b) = (randn(&[c], rng, 1.0), randn(&[c], rng, 1.0));
    plain(&[x, g, b], rng, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0))
}

fn batch_norm_eval_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (x, c) = bn_input(rng);
    let (g, b) = (randn(&[c], rng, 1.0), randn(&[c], rng, 1.0));
    let mean: Vec<f32> = randn(&[c], rng, 1.0).into_data();
    let var: Vec<f32> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    plain(&[x, g, b], rng, move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS))
}

fn concat_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut shape = same_shape(rng);
    let axis = rng.random_range(0..shape.len());
    let parts: Vec<Tensor> = (0..rng.random_range(2..=3))
        .map(|_| {
            shape[axis] = rng.random_range(1..=3);
            randn(&shape, rng, 1.0)
        })
        .collect();
    plain(&parts, rng, |t, v| t.concat(v, axis))
}

fn narrow_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = same_shape(rng);
    let axis = rng.random_range(0..shape.len());
    let len = rng.random_range(1..=shape[axis]);
    let start = rng.random_range(0..=shape[axis] - len);
    let x = randn(&shape, rng, 1.0);
    plain(&[x], rng, |t, v| t.narrow(v[0], axis, start, len))
}

fn reshape_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = same_shape(rng);
    let n: usize = shape.iter().product();
    let target = if rng.random::<bool>() { vec![n] } else { vec![1, n, 1] };
    let x = randn(&shape, rng, 1.0);
    plain(&[x], rng, |t, v| t.reshape(v[0], &target))
}

fn pairwise_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, d) = (rng.random_range(2..=5), rng.random_range(1..=4));
    let x = randn(&[n, d], rng, 1.0);
    plain(&[x], rng, |t, v| t.pairwise_distance(v[0]))
}

fn gather_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = same_shape(rng);
    let n: usize = shape.iter().product();
    let idx: Vec<usize> = (0..rng.random_range(1..=2 * n)).map(|_| rng.random_range(0..n)).collect();
    let x = randn(&shape, rng, 1.0);
    plain(&[x], rng, |t, v| t.gather(v[0], &idx))
}

fn id_loss_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=4);
    let heads: Vec<Tensor> =
        (0..rng.random_range(1..=3)).map(|_| randn(&[n, rng.random_range(2..=5)], rng, 1.0)).collect();
    let classes = heads.iter().map(|h| h.shape()[1]).min().expect("heads");
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    plain(&heads, rng, |t, v| id_loss(t, v, &labels))
}

fn camera_loss_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, cams) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let cfg = CameraLossConfig { epsilon: 0.1, num_cameras: cams };
    let heads = [randn(&[n, cams], rng, 1.0), randn(&[n, cams], rng, 1.0)];
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..cams)).collect();
    plain(&heads, rng, |t, v| camera_loss(t, v, &labels, &cfg))
}

/// True when no hardest-pair choice or hinge is within `gap` of switching.
fn triplet_stable(x: &Tensor, labels: &[usize], margin: f32, gap: f32) -> bool {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let Ok(d) = tape.pairwise_distance(v) else { return false };
    let dist = tape.value(d).data();
    let n = labels.len();
    let pairs = hardest_pairs(dist, labels);
    pairs.iter().enumerate().all(|(a, &(p, q))| {
        let row = &dist[a * n..(a + 1) * n];
        let pos_ok = (0..n).all(|j| j == p || j == a || labels[j] != labels[a] || row[p] - row[j] > gap);
        let neg_ok = (0..n).all(|j| j == q || labels[j] == labels[a] || row[j] - row[q] > gap);
        let spread = (0..n).all(|j| j == a || row[j] > 0.5);
        spread && pos_ok && neg_ok && (row[p] - row[q] + margin).abs() > gap
    })
}

fn triplet_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = TripletConfig { margin: 0.3, p: rng.random_range(2..=3), k: rng.random_range(2..=3) };
    let d = rng.random_range(2..=4);
    let labels: Vec<usize> = (0..cfg.p).flat_map(|i| std::iter::repeat_n(i, cfg.k)).collect();
    let x = loop {
        let x = randn(&[labels.len(), d], rng, 1.0);
        if triplet_stable(&x, &labels, cfg.margin, 0.1) {
            break x;
        }
    };
    plain(&[x], rng, |t, v| batch_hard_triplet(t, v[0], &labels, &cfg))
}

fn extractor_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let (c, dim) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let fx = FeatureExtractor::new(&mut store, rng.random(), "fx", c, dim, LrGroup::Head)?;
    for p in store.iter_mut() {
        if p.name.ends_with(".bn.beta") {
            p.value = randn(p.value.shape(), rng, 1.0);
        } else if p.name.ends_with(".fc.weight") {
            p.value = away_from_zero(p.value.shape(), rng, 0.3);
        }
    }
    let x = randn(&[rng.random_range(8..=12), c, 2, 2], rng, 1.0);
    check_function(rng, &[x], &mut store, true, &|tape, store, v| {
        let mut ctx = Ctx { tape, store, mode: Mode::Train };
        fx.forward(&mut ctx, v[0])
    })
}

fn mrfa_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let stride = pick(rng, &[1, 2]);
    let module = Mrfa::new(&mut store, rng.random(), "att", MrfaConfig::doubling(4, stride))?;
    let x = randn(&[2, 4, 8 * stride, 8 * stride], rng, 1.0);
    check_function(rng, &[x], &mut store, true, &|tape, store, v| {
        let mut ctx = Ctx { tape, store, mode: Mode::Train };
        Ok(module.forward(&mut ctx, v[0])?.mask)
    })
}

type Instance = fn(&mut ChaCha8Rng, usize) -> Result<f64>;

/// Every checked function with its tolerance.
pub fn catalog() -> Vec<(&'static str, f64, Instance)> {
    let op = OP_TOLERANCE;
    vec![
        ("conv2d", op, |r, i| conv_instance(r, i == 0)),
        ("max_pool", op, |r, _| pool_instance(r, PoolMode::Max)),
        ("avg_pool", op, |r, _| pool_instance(r, PoolMode::Avg)),
        ("global_avg_pool", op, |r, _| {
            let x = randn(&[r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), 2], r, 1.0);
            plain(&[x], r, |t, v| t.pool2d(v[0], PoolMode::GlobalAvg, (0, 0), (0, 0)))
        }),
        ("affine", op, |r, i| affine_instance(r, i == 0)),
        ("batch_norm_train", op, |r, _| batch_norm_train_instance(r)),
        ("batch_norm_eval", op, |r, _| batch_norm_eval_instance(r)),
        ("relu", op, |r, _| {
            let x = away_from_zero(&same_shape(r), r, 0.05);
            plain(&[x], r, |t, v| Ok(t.relu(v[0])))
        }),
        ("tanh", op, |r, _| {
            let x = randn(&same_shape(r), r, 1.0);
            plain(&[x], r, |t, v| Ok(t.tanh(v[0])))
        }),
        ("tanh_plus_one", op, |r, _| {
            let x = randn(&same_shape(r), r, 2.0);
            plain(&[x], r, |t, v| Ok(t.tanh_plus_one(v[0])))
        }),
        ("add_scalar", op, |r, _| {
            let (x, c) = (randn(&same_shape(r), r, 1.0), r.random_range(-2.0..2.0));
            plain(&[x], r, |t, v| Ok(t.add_scalar(v[0], c)))
        }),
        ("scale", op, |r, _| {
            let (x, c) = (randn(&same_shape(r), r, 1.0), r.random_range(-2.0..2.0));
            plain(&[x], r, |t, v| Ok(t.scale(v[0], c)))
        }),
        ("mul", op, |r, _| {
            let s = same_shape(r);
            plain(&[randn(&s, r, 1.0), randn(&s, r, 1.0)], r, |t, v| t.mul(v[0], v[1]))
        }),
        ("add", op, |r, _| {
            let s = same_shape(r);
            plain(&[randn(&s, r, 1.0), randn(&s, r, 1.0)], r, |t, v| t.add(v[0], v[1]))
        }),
        ("sub", op, |r, _| {
            let s = same_shape(r);
            plain(&[randn(&s, r, 1.0), randn(&s, r, 1.0)], r, |t, v| t.sub(v[0], v[1]))
        }),
        ("concat", op, |r, _| concat_instance(r)),
        ("narrow", op, |r, _| narrow_instance(r)),
        ("reshape", op, |r, _| reshape_instance(r)),
        ("l2_normalize", op, |r, _| {
            let x = away_from_zero(&[r.random_range(1..=4), r.random_range(2..=5)], r, 0.3);
            plain(&[x], r, |t, v| Ok(t.l2_normalize(v[0])))
        }),
        ("log_softmax", op, |r, _| {
            let x = randn(&[r.random_range(1..=4), r.random_range(2..=5)], r, 1.0);
            plain(&[x], r, |t, v| Ok(t.log_softmax(v[0])))
        }),
        ("sum", op, |r, _| {
            let x = randn(&same_shape(r), r, 1.0);
            plain(&[x], r, |t, v| Ok(t.sum(v[0])))
        }),
        ("mean", op, |r, _| {
            let x = randn(&same_shape(r), r, 1.0);
            plain(&[x], r, |t, v| Ok(t.mean(v[0])))
        }),
        ("pairwise_distance", op, |r, _| pairwise_instance(r)),
        ("gather", op, |r, _| gather_instance(r)),
        ("id_loss", op, |r, _| id_loss_instance(r)),
        ("camera_loss", op, |r, _| camera_loss_instance(r)),
        ("batch_hard_triplet", op, |r, _| triplet_instance(r)),
        ("feature_extractor", op, |r, _| extractor_instance(r)),
        ("mrfa", DEEP_TOLERANCE, |r, _| mrfa_instance(r)),
    ]
}

/// Runs every catalog entry on `instances` random instances.
pub fn check_ops(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    catalog()
        .into_iter()
        .enumerate()
        .map(|(k, (name, tolerance, instance))| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = stream(&[seed, TAG_OPS, k as u64, i as u64]);
                let e = instance(&mut rng, i)?;
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            }
            Ok(CheckReport { name: name.to_string(), instances, max_rel_error: worst, tolerance })
        })
        .collect()
}

/// Finite-difference check of sampled coordinates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    /// Central differences with the branch pattern of the unperturbed pass.
    pub numeric: Vec<f64>,
    /// Central differences letting ReLU, max-pool and hardest-pair choices move.
    pub numeric_free: Vec<f64>,
    pub rel_error: f64,
    pub rel_error_free: f64,
}

/// Gradient check of the combined objective of a toy network on a batch of
/// two identities.
#[derive(Clone, Debug)]
pub struct NetworkCheck {
    pub params: Vec<ParamCheck>,
    /// Objective at the unperturbed parameters.
    pub loss: f64,
    /// Gradients smaller than this are indistinguishable from zero when the
    /// network runs in 32-bit floats.
    pub resolution: f64,
    pub tolerance: f64,
}

impl NetworkCheck {
    fn agrees(&self, a: &[f64], n: &[f64], rel: f64) -> bool {
        (norm(a) <= self.resolution && norm(n) <= self.resolution) || rel < self.tolerance
    }

    /// Tensors whose frozen-pattern differences disagree with the gradient.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !self.agrees(&p.analytic, &p.numeric, p.rel_error)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Largest relative error among tensors with a resolvable gradient.
    pub fn max_rel_error(&self) -> f64 {
        self.resolvable(|p| (&p.numeric, p.rel_error))
    }

    /// Same as [`NetworkCheck::max_rel_error`] for the free differences.
    pub fn max_rel_error_free(&self) -> f64 {
        self.resolvable(|p| (&p.numeric_free, p.rel_error_free))
    }

    fn resolvable(&self, pick: impl Fn(&ParamCheck) -> (&Vec<f64>, f64)) -> f64 {
        self.params
            .iter()
            .filter(|p| norm(&p.analytic).max(norm(pick(p).0)) > self.resolution)
            .map(|p| pick(p).1)
            .fold(0.0, f64::max)
    }
}

/// Branch decisions of the final reductions: hardest pairs and hinge activity
/// for the descriptor and auxiliary triplet terms.
#[derive(Clone, Debug)]
struct HeadPattern {
    triplets: [(Vec<(usize, usize)>, Vec<bool>); 2],
}

fn log_softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - m - lse).collect()
}

fn distances_f64(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let r = |i: usize| &x.data()[i * d..(i + 1) * d];
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i * n + j] = r(i).iter().zip(r(j)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
            }
        }
    }
    out
}

struct ToyBatch {
    images: Tensor,
    labels: Vec<usize>,
    cameras: Vec<usize>,
    triplet: TripletConfig,
    camera: CameraLossConfig,
    weights: LossWeights,
}

impl ToyBatch {
    fn forward(&self, net: &mut Network, mut tape: Tape) -> Result<(Tape, ForwardOutputs)> {
        let out = net.forward(&mut tape, &self.images, Mode::Train)?;
        Ok((tape, out))
    }

    /// The combined objective evaluated in double precision from the
    /// network outputs. With `frozen` the triplet terms keep its pairs and
    /// hinge states; the returned pattern holds the decisions actually used.
    fn objective(&self, tape: &Tape, out: &ForwardOutputs, frozen: Option<&HeadPattern>) -> Result<(f64, HeadPattern)> {
        let n = self.labels.len();
        let mut id = 0.0;
        for &head in &out.id_logits {
            let z = tape.value(head);
            id -= (0..n).map(|i| log_softmax_f64(z.row(i))[self.labels[i]]).sum::<f64>() / n as f64;
        }
        let mut cam = 0.0;
        for &head in out.camera_logits.iter().flatten() {
            let z = tape.value(head);
            for i in 0..n {
                let q = smoothed_camera_distribution(self.cameras[i], &self.camera)?;
                cam -= log_softmax_f64(z.row(i)).iter().zip(&q).map(|(l, &q)| l * q as f64).sum::<f64>() / n as f64;
            }
        }
        let mut terms = [0.0; 2];
        let mut used = Vec::with_capacity(2);
        for (k, feature) in [out.descriptor, out.aux_triplet_feature].into_iter().enumerate() {
            let d = distances_f64(tape.value(feature));
            let (pairs, active) = match frozen {
                Some(f) => f.triplets[k].clone(),
                None => {
                    let d32: Vec<f32> = d.iter().map(|&v| v as f32).collect();
                    let pairs = hardest_pairs(&d32, &self.labels);
                    let active = pairs.iter().enumerate().map(|(a, &(p, q))| d[a * n + p] - d[a * n + q] + (self.triplet.margin as f64) > 0.0).collect();
                    (pairs, active)
                }
            };
            terms[k] = pairs
                .iter()
                .zip(&active)
                .enumerate()
                .filter(|(_, (_, &on))| on)
                .map(|(a, (&(p, q), _))| d[a * n + p] - d[a * n + q] + self.triplet.margin as f64)
                .sum::<f64>()
                / n as f64;
            used.push((pairs, active));
        }
        let w = &self.weights;
        let total = id + w.lambda1 as f64 * terms[0] + w.lambda2 as f64 * terms[1] + w.lambda3 as f64 * cam;
        let triplets: [(Vec<(usize, usize)>, Vec<bool>); 2] = used.try_into().expect("two triplet terms");
        Ok((total, HeadPattern { triplets }))
    }

    fn value(&self, net: &mut Network, frozen: Option<(&Pattern, &HeadPattern)>) -> Result<f64> {
        let tape = frozen.map_or_else(Tape::new, |(p, _)| Tape::replaying(p.clone()));
        let (mut tape, out) = self.forward(net, tape)?;
        let (v, _) = self.objective(&tape, &out, frozen.map(|(_, h)| h))?;
        tape.take_pattern()?;
        Ok(v)
    }
}

fn toy_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    let offsets = randn(&[n * 3], rng, 1.0);
    let noise = randn(&[n, 3, h, w], rng, 0.5);
    Tensor::new(
        vec![n, 3, h, w],
        noise.data().iter().enumerate().map(|(i, v)| v + offsets.data()[i / plane]).collect(),
    )
}

/// Checks the combined objective of a seed-initialized toy network on a
/// batch of two identities with four images each. For every parameter
/// tensor that receives a gradient, its largest-magnitude coordinate and one
/// random coordinate are compared with central differences.
pub fn check_network(seed: u64) -> Result<NetworkCheck> {
    check_network_with_step(seed, STEP)
}

/// [`check_network`] with an explicit central-difference step.
pub fn check_network_with_step(seed: u64, step: f32) -> Result<NetworkCheck> {
    let mut rng = stream(&[seed, TAG_NETWORK]);
    let mut net = Network::build(NetworkConfig::toy(4, 3), seed)?;
    let (h, w) = (net.config.input_height, net.config.input_width);
    let k = 4;
    let batch = ToyBatch {
        images: toy_images(&mut rng, 2 * k, h, w)?,
        labels: (0..2 * k).map(|i| i / k).collect(),
        cameras: vec![0, 1, 0, 2, 1, 2, 0, 0],
        triplet: TripletConfig { margin: 0.3, p: 2, k },
        camera: CameraLossConfig { epsilon: 0.1, num_cameras: 3 },
        weights: LossWeights::default(),
    };
    let (mut tape, out) = batch.forward(&mut net, Tape::recording())?;
    let (loss, heads) = batch.objective(&tape, &out, None)?;
    let pattern = tape.take_pattern()?.expect("recording tape");
    let (_, total) =
        training_objective(&mut tape, &out, &batch.labels, &batch.cameras, &batch.triplet, &batch.camera, &batch.weights)?;
    let grads = tape.backward(total)?;

    let mut params = Vec::new();
    for (id, g) in grads.param_grads() {
        let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        let mut coords = vec![top];
        if g.len() > 1 {
            let other = (top + rng.random_range(1..g.len())) % g.len();
            coords.push(other);
        }
        let mut numeric = Vec::new();
        let mut numeric_free = Vec::new();
        for &c in &coords {
            let base = net.params.get(*id).value.data()[c];
            let (hi, lo) = (base + step, base - step);
            for (frozen, sink) in [(Some((&pattern, &heads)), &mut numeric), (None, &mut numeric_free)] {
                net.params.get_mut(*id).value.data_mut()[c] = hi;
                let plus = batch.value(&mut net, frozen)?;
                net.params.get_mut(*id).value.data_mut()[c] = lo;
                let minus = batch.value(&mut net, frozen)?;
                net.params.get_mut(*id).value.data_mut()[c] = base;
                sink.push((plus - minus) / (hi as f64 - lo as f64));
            }
        }
        let analytic: Vec<f64> = coords.iter().map(|&c| g[c] as f64).collect();
        params.push(ParamCheck {
            name: net.params.get(*id).name.clone(),
            rel_error: rel_error(&analytic, &numeric),
            rel_error_free: rel_error(&analytic, &numeric_free),
            coords,
            analytic,
            numeric,
            numeric_free,
        });
    }
    if params.is_empty() {
        return Err(Error::Contract("network objective produced no parameter gradients".into()));
    }
    let resolution = f32::EPSILON as f64 * loss.abs().max(1.0) / step as f64;
    Ok(NetworkCheck { params, loss, resolution, tolerance: DEEP_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        let reports = check_ops(0, DEFAULT_INSTANCES).unwrap();
        assert!(reports.len() >= 25);
        for r in &reports {
            assert!(r.passed(), "{}", r.render());
        }
    }

    #[test]
    fn rel_error_conventions() {
        assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(rel_error(&[1.0], &[0.0]), 1.0);
        assert!((rel_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-12);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = stream(&[3]);
        let x = randn(&[2, 3], &mut rng, 1.0);
        let e = check_function(&mut rng, &[x], &mut ParamStore::new(), false, &|t, _, v| {
            let y = t.tanh(v[0]);
            let c = t.constant(t.value(y).clone());
            Ok(t.mul(v[0], c)?)
        })
        .unwrap();
        assert!(e > 0.1, "relative error {e}");
    }
}
