//! Manifest ingestion: a CSV of `path,person_id,camera_id` rows pointing at
//! 8-bit P6 images. Relative paths resolve against the manifest's directory.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::data::ppm::{decode_ppm, read_ppm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 3] = ["path", "person_id", "camera_id"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// Identity as written in the manifest.
    pub person_id: u64,
    /// Contiguous identity index in `[0, num_identities)`.
    pub label: usize,
    pub camera_id: usize,
    /// 1-based data row in the manifest.
    pub row: usize,
}

/// A decoded image with its labels.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// `3 x H x W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub person_id: usize,
    pub camera_id: usize,
    pub path: String,
}

/// Manifest records with lazily decoded pixels.
#[derive(Debug)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    num_identities: usize,
    num_cameras: usize,
    cache: Vec<OnceCell<Tensor>>,
}

impl Dataset {
    /// Builds a dataset from records, re-indexing identities contiguously in
    /// ascending order of their original ids.
    pub fn from_records(mut records: Vec<ImageRecord>, num_cameras: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let ids: BTreeMap<u64, usize> = {
            let mut m = BTreeMap::new();
            for r in &records {
                m.entry(r.person_id).or_insert(0);
            }
            m.into_keys().enumerate().map(|(i, id)| (id, i)).collect()
        };
        for r in &mut records {
            r.label = ids[&r.person_id];
        }
        let cache = records.iter().map(|_| OnceCell::new()).collect();
        Ok(Dataset { num_identities: ids.len(), num_cameras, records, cache })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    /// Decodes (once) and returns the pixels of record `i`.
    pub fn pixels(&self, i: usize) -> Result<&Tensor> {
        if let Some(t) = self.cache[i].get() {
            return Ok(t);
        }
        let r = &self.records[i];
        let img = read_ppm(&r.path).map_err(|e| Error::Ingestion { row: r.row, detail: e.to_string() })?;
        let _ = self.cache[i].set(img.to_tensor());
        Ok(self.cache[i].get().expect("just set"))
    }

    pub fn image(&self, i: usize) -> Result<LabeledImage> {
        let r = &self.records[i];
        Ok(LabeledImage {
            pixels: self.pixels(i)?.clone(),
            person_id: r.label,
            camera_id: r.camera_id,
            path: r.path.display().to_string(),
        })
    }

    /// Splits by identity: the first `round(train_fraction * identities)`
    /// labels go to the first dataset, the rest to the second.
    pub fn split_by_identity(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        let cut = ((self.num_identities as f64) * train_fraction).round() as usize;
        if cut == 0 || cut >= self.num_identities {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} leaves an empty side of {} identities",
                self.num_identities
            )));
        }
        let (a, b): (Vec<_>, Vec<_>) = self.records.iter().cloned().partition(|r| r.label < cut);
        Ok((Dataset::from_records(a, self.num_cameras)?, Dataset::from_records(b, self.num_cameras)?))
    }

    /// For every (identity, camera) pair the first `per_camera` records become
    /// queries and the rest gallery.
    pub fn query_gallery_split(&self, per_camera: usize) -> Result<(Dataset, Dataset)> {
        let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let (mut q, mut g) = (Vec::new(), Vec::new());
        for r in &self.records {
            let n = seen.entry((r.label, r.camera_id)).or_insert(0);
            if *n < per_camera {
                q.push(r.clone());
            } else {
                g.push(r.clone());
            }
            *n += 1;
        }
        Ok((Dataset::from_records(q, self.num_cameras)?, Dataset::from_records(g, self.num_cameras)?))
    }

    /// Indices of records per identity label.
    pub fn identity_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_identities];
        for (i, r) in self.records.iter().enumerate() {
            idx[r.label].push(i);
        }
        idx
    }
}

fn check_p6(path: &Path) -> std::result::Result<(), String> {
    let mut f = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let mut magic = [0u8; 2];
    f.read_exact(&mut magic).map_err(|_| format!("{} is too short to be an image", path.display()))?;
    if &magic != b"P6" {
        return Err(format!("{} is not a binary P6 image", path.display()));
    }
    Ok(())
}

/// Reads and validates a manifest. When `num_cameras` is `None` it is
/// inferred as one more than the largest camera id.
pub fn load_manifest(path: impl AsRef<Path>, num_cameras: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Ingestion { row: 0, detail: format!("cannot read {}: {e}", path.display()) })?;
    let header = reader.headers().map_err(|e| Error::Ingestion { row: 0, detail: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Ingestion {
            row: 0,
            detail: format!("header must be `{}`, got `{}`", MANIFEST_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut records = Vec::new();
    let mut raw_cameras = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let bad = |detail: String| Error::Ingestion { row: row_no, detail };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", row.len())));
        }
        let rel = PathBuf::from(&row[0]);
        let img_path = if rel.is_absolute() { rel } else { base.join(rel) };
        let person_id: u64 = row[1].parse().map_err(|_| bad(format!("person_id `{}` is not a non-negative integer", &row[1])))?;
        let camera: i64 = row[2].parse().map_err(|_| bad(format!("camera_id `{}` is not an integer", &row[2])))?;
        check_p6(&img_path).map_err(bad)?;
        raw_cameras.push((row_no, camera));
        records.push(ImageRecord { path: img_path, person_id, label: 0, camera_id: 0, row: row_no });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inferred = raw_cameras.iter().map(|&(_, c)| c.max(0) as usize + 1).max().unwrap_or(1);
    let nv = num_cameras.unwrap_or(inferred);
    for (rec, &(row, cam)) in records.iter_mut().zip(&raw_cameras) {
        if cam < 0 || cam as usize >= nv {
            return Err(Error::CameraRange { row, camera: cam, num_cameras: nv });
        }
        rec.camera_id = cam as usize;
    }
    Dataset::from_records(records, nv)
}

/// Writes a manifest for `(relative path, person id, camera id)` rows.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[(String, u64, usize)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(MANIFEST_HEADER).map_err(io_err)?;
    for (p, id, cam) in rows {
        w.write_record([p.as_str(), &id.to_string(), &cam.to_string()]).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Decodes an in-memory P6 buffer, mapping failures to an ingestion error.
pub fn decode_row(bytes: &[u8], row: usize) -> Result<Tensor> {
    decode_ppm(bytes).map(|img| img.to_tensor()).map_err(|detail| Error::Ingestion { row, detail })
}
