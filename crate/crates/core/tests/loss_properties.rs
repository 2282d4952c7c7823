mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use reid_core::autodiff::Tape;
use reid_core::losses::{
    batch_hard_triplet, camera_loss, hardest_pairs, id_loss, smoothed_camera_distribution, CameraLossConfig,
    TripletConfig,
};
use reid_core::rng::stream;
use reid_core::Tensor;

use common::{cross_entropy_oracle, one_hot, randn};

fn triplet(x: &Tensor, labels: &[usize], cfg: &TripletConfig) -> f32 {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let l = batch_hard_triplet(&mut tape, v, labels, cfg).unwrap();
    tape.value(l).item()
}

fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i / k).collect()
}

/// Householder reflection `I - 2 v v^T` applied to every row.
fn reflect(x: &Tensor, v: &[f32]) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let norm2: f32 = v.iter().map(|a| a * a).sum();
    let mut out = x.data().to_vec();
    for r in 0..n {
        let row = &mut out[r * d..(r + 1) * d];
        let dot: f32 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        for (a, b) in row.iter_mut().zip(v) {
            *a -= 2.0 * dot / norm2 * b;
        }
    }
    Tensor::new(vec![n, d], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_ignores_rotations_and_label_names(p in 2usize..5, k in 2usize..5, d in 2usize..8, seed in any::<u64>()) {
        let mut rng = stream(&[seed]);
        let cfg = TripletConfig { margin: 0.3, p, k };
        let x = randn(&[p * k, d], &mut rng, 1.0);
        let labels = pk_labels(p, k);
        let base = triplet(&x, &labels, &cfg);
        let v = randn(&[d], &mut rng, 1.0);
        let rotated = reflect(&reflect(&x, v.data()), randn(&[d], &mut rng, 1.0).data());
        prop_assert!((triplet(&rotated, &labels, &cfg) - base).abs() < 1e-5);
        let mut names: Vec<usize> = (100..100 + p).collect();
        names.shuffle(&mut rng);
        let renamed: Vec<usize> = labels.iter().map(|&l| names[l]).collect();
        prop_assert_eq!(triplet(&x, &renamed, &cfg), base);
    }

    #[test]
    fn triplet_is_zero_exactly_when_every_anchor_is_satisfied(
        p in 2usize..5, k in 2usize..5, d in 1usize..4, spread in 0.0f32..3.0, seed in any::<u64>(),
    ) {
        let mut rng = stream(&[seed]);
        let margin = 0.3;
        let labels = pk_labels(p, k);
        let centers = randn(&[p, d], &mut rng, spread);
        let noise = randn(&[p * k, d], &mut rng, 0.2);
        let data = (0..p * k * d).map(|i| centers.data()[(i / (k * d)) * d + i % d] + noise.data()[i]).collect();
        let x = Tensor::new(vec![p * k, d], data).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let dist = tape.pairwise_distance(xv).unwrap();
        let dm = tape.value(dist).data().to_vec();
        let n = p * k;
        let satisfied = hardest_pairs(&dm, &labels)
            .iter()
            .enumerate()
            .all(|(a, &(pos, neg))| dm[a * n + neg] >= dm[a * n + pos] + margin);
        let loss = triplet(&x, &labels, &TripletConfig { margin, p, k });
        prop_assert_eq!(loss == 0.0, satisfied);
    }

    #[test]
    fn unsmoothed_camera_loss_is_plain_cross_entropy(n in 1usize..10, nv in 2usize..8, seed in any::<u64>()) {
        let mut rng = stream(&[seed]);
        let heads: Vec<Tensor> = (0..2).map(|_| randn(&[n, nv], &mut rng, 3.0)).collect();
        let cams: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % nv).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = heads.iter().map(|h| tape.constant(h.clone())).collect();
        let l = camera_loss(&mut tape, &vars, &cams, &CameraLossConfig { epsilon: 0.0, num_cameras: nv }).unwrap();
        let oracle = cross_entropy_oracle(&heads, &one_hot(&cams, nv));
        prop_assert!((tape.value(l).item() as f64 - oracle).abs() < 1e-6 * (1.0 + oracle));
    }

    #[test]
    fn raising_a_true_logit_lowers_id_loss(
        n in 1usize..6, classes in 2usize..8, head in 0usize..7, row in 0usize..6,
        bump in 0.05f32..2.0, seed in any::<u64>(),
    ) {
        let row = row % n;
        let mut rng = stream(&[seed]);
        let mut heads: Vec<Tensor> = (0..7).map(|_| randn(&[n, classes], &mut rng, 1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % classes).collect();
        let eval = |hs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<_> = hs.iter().map(|h| tape.constant(h.clone())).collect();
            let l = id_loss(&mut tape, &vars, &labels).unwrap();
            tape.value(l).item()
        };
        let before = eval(&heads);
        heads[head].data_mut()[row * classes + labels[row]] += bump;
        prop_assert!(eval(&heads) < before);
    }

    #[test]
    fn smoothed_targets_are_distributions(eps in 0.0f32..1.0, nv in 1usize..12, v in 0usize..12) {
        let v = v % nv;
        let q = smoothed_camera_distribution(v, &CameraLossConfig { epsilon: eps, num_cameras: nv }).unwrap();
        prop_assert!(q.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((q.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        prop_assert!(q.iter().all(|&x| x <= q[v]));
    }
}
