//! Training objectives.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::ForwardOutputs;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 5.0, lambda2: 5.0, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f32,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.3, p: 24, k: 4 }
    }
}

impl TripletConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!("triplet batches need P >= 2 and K >= 2, got P={} K={}", self.p, self.k)));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("triplet margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraLossConfig {
    pub epsilon: f32,
    pub num_cameras: usize,
}

impl CameraLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("label smoothing epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        if self.num_cameras == 0 {
            return Err(Error::Config("number of cameras must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy summed over every identity head, averaged over the batch.
pub fn id_loss(tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Contract("id_loss needs at least one head".into()));
    }
    let mut total: Option<Var> = None;
    for &head in logits {
        let (n, classes) = tape.value(head).dims2("id_loss")?;
        if n != labels.len() {
            return Err(Error::dim("id_loss", format!("{n} logit rows for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Label { what: "identity", label: bad, classes });
        }
        let logp = tape.log_softmax(head);
        let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * classes + y).collect();
        let picked = tape.gather(logp, &idx)?;
        let s = tape.sum(picked);
        let term = tape.scale(s, -1.0 / n as f32);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `q'(j) = (1 - eps) * [j == v] + eps / N_v`.
pub fn smoothed_camera_distribution(camera: usize, cfg: &CameraLossConfig) -> Result<Vec<f32>> {
    if camera >= cfg.num_cameras {
        return Err(Error::Label { what: "camera", label: camera, classes: cfg.num_cameras });
    }
    let floor = cfg.epsilon / cfg.num_cameras as f32;
    let mut q = vec![floor; cfg.num_cameras];
    q[camera] += 1.0 - cfg.epsilon;
    Ok(q)
}

/// Label-smoothed camera cross-entropy summed over the camera heads and
/// averaged over the batch. With `epsilon = 0` this is plain softmax loss.
pub fn camera_loss(tape: &mut Tape, camera_logits: &[Var], cameras: &[usize], cfg: &CameraLossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut targets = Vec::with_capacity(cameras.len() * cfg.num_cameras);
    for &v in cameras {
        targets.extend(smoothed_camera_distribution(v, cfg)?);
    }
    let target = Tensor::new(vec![cameras.len(), cfg.num_cameras], targets)?;
    let mut total: Option<Var> = None;
    for &head in camera_logits {
        let (n, width) = tape.value(head).dims2("camera_loss")?;
        if width != cfg.num_cameras {
            return Err(Error::Config(format!(
                "camera classifier has {width} outputs but {} cameras are configured",
                cfg.num_cameras
            )));
        }
        if n != cameras.len() {
            return Err(Error::dim("camera_loss", format!("{n} logit rows for {} labels", cameras.len())));
        }
        let logp = tape.log_softmax(head);
        let q = tape.constant(target.clone());
        let weighted = tape.mul(logp, q)?;
        let s = tape.sum(weighted);
        let term = tape.scale(s, -1.0 / n as f32);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("camera_loss needs at least one head".into()))
}

/// Checks that `labels` holds exactly `P` identities with exactly `K` samples each.
pub fn check_pk_composition(labels: &[usize], cfg: &TripletConfig) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((id, c)) = counts.iter().find(|(_, &c)| c != cfg.k) {
        return Err(Error::BatchComposition(format!("identity {id} has {c} samples, expected K={}", cfg.k)));
    }
    if counts.len() != cfg.p {
        return Err(Error::BatchComposition(format!("batch has {} identities, expected P={}", counts.len(), cfg.p)));
    }
    Ok(())
}

/// Per-anchor hardest positive and hardest negative indices from a distance
/// matrix. Ties resolve to the lowest index.
pub fn hardest_pairs(dist: &[f32], labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let row = &dist[a * n..(a + 1) * n];
            let mut pos = a;
            let mut neg = usize::MAX;
            for j in 0..n {
                if labels[j] == labels[a] {
                    if row[j] > row[pos] {
                        pos = j;
                    }
                } else if neg == usize::MAX || row[j] < row[neg] {
                    neg = j;
                }
            }
            (pos, neg)
        })
        .collect()
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn batch_hard_triplet(tape: &mut Tape, features: Var, labels: &[usize], cfg: &TripletConfig) -> Result<Var> {
    cfg.validate()?;
    let (n, _) = tape.value(features).dims2("batch_hard_triplet")?;
    if n != labels.len() {
        return Err(Error::dim("batch_hard_triplet", format!("{n} feature rows for {} labels", labels.len())));
    }
    check_pk_composition(labels, cfg)?;
    let dist = tape.pairwise_distance(features)?;
    let flat = tape.choose(|t| {
        let pairs = hardest_pairs(t.value(dist).data(), labels);
        let pos = pairs.iter().enumerate().map(|(a, &(p, _))| a * n + p);
        let neg = pairs.iter().enumerate().map(|(a, &(_, q))| a * n + q);
        pos.chain(neg).collect()
    });
    let (pos_idx, neg_idx) = flat.split_at(n);
    let pos = tape.gather(dist, pos_idx)?;
    let neg = tape.gather(dist, neg_idx)?;
    let gap = tape.sub(pos, neg)?;
    let shifted = tape.add_scalar(gap, cfg.margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// The four loss parts of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub id: Var,
    pub triplet_descriptor: Var,
    pub triplet_aux: Var,
    /// Absent when camera supervision is disabled.
    pub camera: Option<Var>,
}

/// Scalar values of a step's loss parts, as written to the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub id: f32,
    pub triplet_descriptor: f32,
    pub triplet_aux: f32,
    pub camera: f32,
    pub combined: f32,
}

/// `L_id + l1 * L_triplet(descriptor) + l2 * L_triplet(aux) + l3 * L_camera`.
pub fn combined_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    let mut named = vec![
        ("L_ID", parts.id),
        ("L1_triplet", parts.triplet_descriptor),
        ("L2_triplet", parts.triplet_aux),
    ];
    named.extend(parts.camera.map(|c| ("L_camera", c)));
    for (name, v) in &named {
        let value = tape.value(*v).item();
        if !value.is_finite() {
            return Err(Error::Divergence { part: name.to_string(), value });
        }
    }
    let mut total = parts.id;
    let weighted = [
        (parts.triplet_descriptor, weights.lambda1),
        (parts.triplet_aux, weights.lambda2),
    ];
    for (v, w) in weighted.into_iter().chain(parts.camera.map(|c| (c, weights.lambda3))) {
        let s = tape.scale(v, w);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Loss parts and combined objective for one forward pass.
pub fn training_objective(
    tape: &mut Tape,
    out: &ForwardOutputs,
    labels: &[usize],
    cameras: &[usize],
    triplet: &TripletConfig,
    camera: &CameraLossConfig,
    weights: &LossWeights,
) -> Result<(LossParts, Var)> {
    let parts = LossParts {
        id: id_loss(tape, &out.id_logits, labels)?,
        triplet_descriptor: batch_hard_triplet(tape, out.descriptor, labels, triplet)?,
        triplet_aux: batch_hard_triplet(tape, out.aux_triplet_feature, labels, triplet)?,
        camera: match out.camera_logits {
            Some(logits) => Some(camera_loss(tape, &logits, cameras, camera)?),
            None => None,
        },
    };
    let total = combined_loss(tape, &parts, weights)?;
    Ok((parts, total))
}

pub fn loss_values(tape: &Tape, parts: &LossParts, combined: Var) -> LossValues {
    LossValues {
        id: tape.value(parts.id).item(),
        triplet_descriptor: tape.value(parts.triplet_descriptor).item(),
        triplet_aux: tape.value(parts.triplet_aux).item(),
        camera: parts.camera.map(|c| tape.value(c).item()).unwrap_or(0.0),
        combined: tape.value(combined).item(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn uniform_id_logits_give_seven_ln_ten() {
        let mut tape = Tape::new();
        let heads: Vec<Var> = (0..7).map(|_| tape.constant(Tensor::zeros(&[3, 10]))).collect();
        let l = id_loss(&mut tape, &heads, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).item() - 7.0 * 10f32.ln()).abs() < 1e-4);
        assert!((tape.value(l).item() - 16.118).abs() < 1e-3);
    }

    #[test]
    fn saturated_head_drops_out() {
        let mut tape = Tape::new();
        let mut heads: Vec<Var> = (0..6).map(|_| tape.constant(Tensor::zeros(&[1, 10]))).collect();
        let mut sharp = vec![0.0; 10];
        sharp[2] = 1e4;
        heads.push(tape.constant(matrix(1, 10, sharp)));
        let l = id_loss(&mut tape, &heads, &[2]).unwrap();
        assert!((tape.value(l).item() - 6.0 * 10f32.ln()).abs() < 1e-4);
    }

    #[test]
    fn id_label_out_of_range() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(id_loss(&mut tape, &[h], &[3]), Err(Error::Label { label: 3, classes: 3, .. })));
    }

    #[test]
    fn smoothed_distribution_examples() {
        let cfg = CameraLossConfig { epsilon: 0.1, num_cameras: 6 };
        let q = smoothed_camera_distribution(2, &cfg).unwrap();
        assert!((q[2] - 0.916_666_7).abs() < 1e-6);
        assert!((q[0] - 1.0 / 60.0).abs() < 1e-7);
        assert!((q.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let hard = smoothed_camera_distribution(1, &CameraLossConfig { epsilon: 0.0, num_cameras: 3 }).unwrap();
        assert_eq!(hard, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_camera_logits_give_two_ln_nv() {
        for eps in [0.0, 0.1, 0.5] {
            let mut tape = Tape::new();
            let heads = [tape.constant(Tensor::zeros(&[4, 6])), tape.constant(Tensor::zeros(&[4, 6]))];
            let cfg = CameraLossConfig { epsilon: eps, num_cameras: 6 };
            let l = camera_loss(&mut tape, &heads, &[0, 1, 5, 2], &cfg).unwrap();
            assert!((tape.value(l).item() - 2.0 * 6f32.ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn perfect_camera_prediction_without_smoothing() {
        let mut tape = Tape::new();
        let logits = matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]);
        let heads = [tape.constant(logits.clone()), tape.constant(logits)];
        let cfg = CameraLossConfig { epsilon: 0.0, num_cameras: 3 };
        let l = camera_loss(&mut tape, &heads, &[0, 2], &cfg).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn camera_width_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[2, 4]));
        let cfg = CameraLossConfig { epsilon: 0.1, num_cameras: 6 };
        assert!(matches!(camera_loss(&mut tape, &[h, h], &[0, 1], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn identical_features_cost_the_margin() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[4, 3], 0.5));
        let cfg = TripletConfig { margin: 0.3, p: 2, k: 2 };
        let l = batch_hard_triplet(&mut tape, f, &[0, 0, 1, 1], &cfg).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-7);
    }

    #[test]
    fn separated_clusters_cost_nothing() {
        let mut tape = Tape::new();
        let f = tape.constant(matrix(4, 1, vec![0.0, 0.1, 1.0, 1.1]));
        let cfg = TripletConfig { margin: 0.3, p: 2, k: 2 };
        let l = batch_hard_triplet(&mut tape, f, &[0, 0, 1, 1], &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn triplet_requires_exact_pk_batches() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[4, 2]));
        let cfg = TripletConfig { margin: 0.3, p: 2, k: 2 };
        assert!(matches!(
            batch_hard_triplet(&mut tape, f, &[0, 0, 0, 1], &cfg),
            Err(Error::BatchComposition(_))
        ));
        let cfg3 = TripletConfig { margin: 0.3, p: 3, k: 2 };
        assert!(matches!(
            batch_hard_triplet(&mut tape, f, &[0, 0, 1, 1], &cfg3),
            Err(Error::BatchComposition(_))
        ));
    }

    #[test]
    fn combined_examples() {
        let mut tape = Tape::new();
        let parts = LossParts {
            id: tape.constant(Tensor::scalar(1.0)),
            triplet_descriptor: tape.constant(Tensor::scalar(0.2)),
            triplet_aux: tape.constant(Tensor::scalar(0.1)),
            camera: Some(tape.constant(Tensor::scalar(0.5))),
        };
        let c = combined_loss(&mut tape, &parts, &LossWeights::default()).unwrap();
        assert!((tape.value(c).item() - 3.0).abs() < 1e-6);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let c = combined_loss(&mut tape, &parts, &zero).unwrap();
        assert_eq!(tape.value(c).item(), 1.0);

        let nan = LossParts { triplet_aux: tape.constant(Tensor::scalar(f32::NAN)), ..parts };
        match combined_loss(&mut tape, &nan, &LossWeights::default()) {
            Err(Error::Divergence { part, .. }) => assert_eq!(part, "L2_triplet"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
