#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use reid_core::evaluator::{distance_matrix, GalleryIndex};
use reid_core::Tensor;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng, std: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * Distribution::<f32>::sample(&StandardNormal, rng)).collect::<Vec<f32>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Sum over heads of the batch-mean cross-entropy against soft targets.
pub fn cross_entropy_oracle(heads: &[Tensor], targets: &[Vec<f64>]) -> f64 {
    heads
        .iter()
        .map(|h| {
            let (n, c) = (h.shape()[0], h.shape()[1]);
            let mut total = 0.0;
            for (i, q) in targets.iter().enumerate().take(n) {
                let lp = log_softmax_row(&h.data()[i * c..(i + 1) * c]);
                total -= q.iter().zip(&lp).map(|(q, l)| q * l).sum::<f64>();
            }
            total / n as f64
        })
        .sum()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&y| (0..classes).map(|j| if j == y { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Mean over anchors of the largest hinge over every (positive, negative)
/// pair, with distances recomputed in f64.
pub fn exhaustive_triplet(features: &Tensor, labels: &[usize], margin: f64) -> f64 {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let x = features.data();
    let dist = |i: usize, j: usize| {
        (0..d).map(|k| (x[i * d + k] as f64 - x[j * d + k] as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = 0.0f64;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max(dist(a, p) - dist(a, q) + margin);
            }
        }
        total += worst;
    }
    total / n as f64
}

/// Unit rows drawn from a small pool of directions so exact distance ties occur.
pub fn unit_rows(rows: usize, dim: usize, pool: &[Vec<f32>], rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend_from_slice(&pool[rng.random_range(0..pool.len())]);
    }
    Tensor::new(vec![rows, dim], data).unwrap()
}

pub fn direction_pool(size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..size)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| (a / n) as f32).collect()
        })
        .collect()
}

pub fn random_index(q: usize, g: usize, rng: &mut ChaCha8Rng) -> (GalleryIndex, GalleryIndex) {
    let dim = 6;
    let ids = rng.random_range(2..=12);
    let cams = rng.random_range(1..=4);
    let pool = direction_pool(rng.random_range(g / 2 + 1..=g + 1), dim, rng);
    let mut make = |n: usize| {
        let emb = unit_rows(n, dim, &pool, rng);
        let pids = (0..n).map(|_| rng.random_range(0..ids)).collect();
        let cids = (0..n).map(|_| rng.random_range(0..cams)).collect();
        GalleryIndex::new(emb, pids, cids).unwrap()
    };
    let queries = make(q);
    let gallery = make(g);
    (queries, gallery)
}

pub struct BruteForce {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid: usize,
}

/// CMC and mAP from literal definitions: full sort of the surviving gallery,
/// first-hit rank, precision at every correct position.
pub fn brute_force_eval(queries: &GalleryIndex, gallery: &GalleryIndex, max_rank: usize) -> Option<BruteForce> {
    let dist = distance_matrix(&queries.embeddings, &gallery.embeddings).unwrap();
    let g = gallery.len();
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    for qi in 0..queries.len() {
        let (pid, cam) = (queries.person_ids[qi], queries.camera_ids[qi]);
        let mut kept: Vec<(f32, usize)> = (0..g)
            .filter(|&j| !(gallery.person_ids[j] == pid && gallery.camera_ids[j] == cam))
            .map(|j| (dist.data()[qi * g + j], j))
            .collect();
        kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let matches: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(_, &(_, j))| gallery.person_ids[j] == pid)
            .map(|(r, _)| r + 1)
            .collect();
        if matches.is_empty() {
            continue;
        }
        first_hits.push(matches[0]);
        let precisions: Vec<f64> = matches
            .iter()
            .map(|&r| kept[..r].iter().filter(|&&(_, j)| gallery.person_ids[j] == pid).count() as f64 / r as f64)
            .collect();
        aps.push(precisions.iter().sum::<f64>() / precisions.len() as f64);
    }
    if aps.is_empty() {
        return None;
    }
    let valid = aps.len();
    let cmc = (1..=max_rank)
        .map(|k| first_hits.iter().filter(|&&r| r <= k).count() as f64 / valid as f64)
        .collect();
    Some(BruteForce { cmc, map: aps.iter().sum::<f64>() / valid as f64, valid })
}
