//! Single-query retrieval evaluation: CMC and mAP.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::kernels::gemm;
use crate::data::augment::{augment_chain, AugmentConfig, HdaConfig};
use crate::data::manifest::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tensor_io::{load_tensor, save_tensor};

/// Embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    pub embeddings: Tensor,
    pub person_ids: Vec<usize>,
    pub camera_ids: Vec<usize>,
}

impl GalleryIndex {
    pub fn new(embeddings: Tensor, person_ids: Vec<usize>, camera_ids: Vec<usize>) -> Result<Self> {
        let (g, _) = embeddings.dims2("gallery")?;
        if person_ids.len() != g || camera_ids.len() != g {
            return Err(Error::dim(
                "gallery",
                format!("{g} embeddings, {} person ids, {} camera ids", person_ids.len(), camera_ids.len()),
            ));
        }
        for i in 0..g {
            let n = embeddings.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("embedding {i} has norm {n}, expected 1")));
            }
        }
        Ok(GalleryIndex { embeddings, person_ids, camera_ids })
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    /// Writes `<stem>.vtns` and the sidecar `<stem>.csv` (`person_id,camera_id`).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let (tpath, cpath) = embedding_paths(stem.as_ref());
        save_tensor(&tpath, &self.embeddings)?;
        let mut text = String::from("person_id,camera_id\n");
        for (p, c) in self.person_ids.iter().zip(&self.camera_ids) {
            let _ = writeln!(text, "{p},{c}");
        }
        let mut f = std::fs::File::create(&cpath).map_err(|e| Error::io(&cpath, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&cpath, e))?;
        Ok((tpath, cpath))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (tpath, cpath) = embedding_paths(stem.as_ref());
        let embeddings = load_tensor(&tpath)?;
        let mut reader = csv::Reader::from_path(&cpath).map_err(|e| Error::io(&cpath, std::io::Error::other(e)))?;
        let (mut pids, mut cids) = (Vec::new(), Vec::new());
        for (i, row) in reader.records().enumerate() {
            let bad = |d: String| Error::Ingestion { row: i + 1, detail: format!("{}: {d}", cpath.display()) };
            let row = row.map_err(|e| bad(e.to_string()))?;
            if row.len() != 2 {
                return Err(bad(format!("expected 2 fields, got {}", row.len())));
            }
            pids.push(row[0].trim().parse().map_err(|_| bad(format!("bad person_id `{}`", &row[0])))?);
            cids.push(row[1].trim().parse().map_err(|_| bad(format!("bad camera_id `{}`", &row[1])))?);
        }
        Self::new(embeddings, pids, cids)
    }
}

/// Tensor and sidecar paths for an embedding stem.
pub fn embedding_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_owned();
    let mut t = s.clone();
    t.push(".vtns");
    let mut c = s;
    c.push(".csv");
    (PathBuf::from(t), PathBuf::from(c))
}

/// Euclidean distances between unit-norm rows, via `d^2 = 2 - 2 q.g`
/// clamped at zero.
pub fn distance_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (q, d) = queries.dims2("distance_matrix")?;
    let (g, d2) = gallery.dims2("distance_matrix")?;
    if d != d2 {
        return Err(Error::dim("distance_matrix", format!("query dimension {d} vs gallery dimension {d2}")));
    }
    let mut dots = vec![0.0f32; q * g];
    gemm(q, d, g, queries.data(), false, gallery.data(), true, &mut dots, 0.0);
    for v in &mut dots {
        *v = (2.0 - 2.0 * *v).max(0.0).sqrt();
    }
    Tensor::new(vec![q, g], dots)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `cmc[k-1]` is the fraction of valid queries matched within rank `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries with at least one valid match; only these are scored.
    pub num_valid_queries: usize,
    pub num_queries: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    /// Fixed-format report: rank-1/5/10 and mAP as percentages.
    pub fn render(&self) -> String {
        format!(
            "queries: {} (valid {})\nrank-1: {:.1}\nrank-5: {:.1}\nrank-10: {:.1}\nmAP: {:.1}\n",
            self.num_queries,
            self.num_valid_queries,
            100.0 * self.rank(1),
            100.0 * self.rank(5),
            100.0 * self.rank(10),
            100.0 * self.map
        )
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "{},{v}", i + 1);
        }
        s
    }
}

/// One entry of a query's ranked gallery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankEntry {
    pub gallery_index: usize,
    pub distance: f32,
    pub is_match: bool,
}

fn ranked(dist: &[f32], q_pid: usize, q_cam: usize, gallery: &GalleryIndex) -> Vec<RankEntry> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery.person_ids[j] == q_pid && gallery.camera_ids[j] == q_cam))
        .collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|j| RankEntry { gallery_index: j, distance: dist[j], is_match: gallery.person_ids[j] == q_pid })
        .collect()
}

/// Top `k` gallery entries for query `query_index`, after the same-camera
/// exclusion; shorter when fewer remain.
pub fn rank_list(queries: &GalleryIndex, gallery: &GalleryIndex, query_index: usize, k: usize) -> Result<Vec<RankEntry>> {
    if query_index >= queries.len() {
        return Err(Error::Contract(format!("query {query_index} out of {}", queries.len())));
    }
    let row = Tensor::new(vec![1, queries.embeddings.shape()[1]], queries.embeddings.row(query_index).to_vec())?;
    let dist = distance_matrix(&row, &gallery.embeddings)?;
    let mut list = ranked(dist.data(), queries.person_ids[query_index], queries.camera_ids[query_index], gallery);
    list.truncate(k);
    Ok(list)
}

/// Scores every query against the gallery under the single-query protocol:
/// gallery items sharing both identity and camera with the query are ignored,
/// ties in distance go to the lower gallery index.
pub fn evaluate(queries: &GalleryIndex, gallery: &GalleryIndex, max_rank: usize) -> Result<EvalReport> {
    if max_rank == 0 {
        return Err(Error::Contract("max_rank must be positive".into()));
    }
    let dist = distance_matrix(&queries.embeddings, &gallery.embeddings)?;
    let g = gallery.len();
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0f64;
    let mut valid = 0usize;
    for qi in 0..queries.len() {
        let list = ranked(&dist.data()[qi * g..(qi + 1) * g], queries.person_ids[qi], queries.camera_ids[qi], gallery);
        let total = list.iter().filter(|e| e.is_match).count();
        if total == 0 {
            continue;
        }
        valid += 1;
        let first = list.iter().position(|e| e.is_match).expect("has a match");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        let mut found = 0usize;
        let mut ap = 0.0f64;
        for (r, e) in list.iter().enumerate() {
            if e.is_match {
                found += 1;
                ap += found as f64 / (r + 1) as f64;
            }
        }
        ap_sum += ap / total as f64;
    }
    if valid == 0 {
        return Err(Error::Protocol("no query has a valid match in the gallery".into()));
    }
    Ok(EvalReport {
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        map: ap_sum / valid as f64,
        num_valid_queries: valid,
        num_queries: queries.len(),
    })
}

/// Eval-mode descriptors of every image in `dataset`, labelled with the
/// manifest person ids so that separately indexed splits stay comparable.
pub fn embed_dataset(net: &mut Network, dataset: &Dataset, batch: usize) -> Result<GalleryIndex> {
    let cfg = AugmentConfig::new(net.config.input_height, net.config.input_width, HdaConfig::default());
    let mut rng = stream(&[0]);
    let mut images = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        images.push(augment_chain(dataset.pixels(i)?, &cfg, &mut rng, false)?.0);
    }
    let emb = net.embed_batched(&images, batch)?;
    let r = dataset.records();
    GalleryIndex::new(emb, r.iter().map(|r| r.person_id as usize).collect(), r.iter().map(|r| r.camera_id).collect())
}

/// Fraction of images whose camera is predicted correctly by the camera
/// classifiers in eval mode; the two heads vote by summed log-probabilities.
pub fn camera_accuracy(net: &mut Network, dataset: &Dataset, batch: usize) -> Result<f64> {
    let cfg = AugmentConfig::new(net.config.input_height, net.config.input_width, HdaConfig::default());
    let mut rng = stream(&[0]);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        for &i in chunk {
            images.push(augment_chain(dataset.pixels(i)?, &cfg, &mut rng, false)?.0);
        }
        let (mut tape, out) = net.forward_eval(&Tensor::stack(&images)?)?;
        let logits = out.camera_logits.ok_or_else(|| Error::Contract("network has no camera classifiers".into()))?;
        let lp = [tape.log_softmax(logits[0]), tape.log_softmax(logits[1])];
        let (a, b) = (tape.value(lp[0]), tape.value(lp[1]));
        for (row, &i) in chunk.iter().enumerate() {
            let votes: Vec<f32> = a.row(row).iter().zip(b.row(row)).map(|(x, y)| x + y).collect();
            let pred = (0..votes.len()).fold(0, |best, j| if votes[j] > votes[best] { j } else { best });
            correct += (pred == dataset.records()[i].camera_id) as usize;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
