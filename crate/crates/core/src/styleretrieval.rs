//! Per-cluster pose style matrices and nearest-neighbour style lookup.
//!
//! A style matrix has one row per speech cluster: the mean of the pose
//! latents whose frames carry that cluster label. Rows of clusters never
//! seen stay zero. Retrieval is an exhaustive L1 scan.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Real, Tensor};
use crate::vqpose::VqVae;

pub const N_CLUSTERS: usize = 512;
pub const MAGIC: &[u8; 4] = b"ASDB";
/// Reference clips shorter than this (10 s at 25 fps) trigger a warning.
pub const MIN_REFERENCE_FRAMES: usize = 250;

/// Majority label of each window of `w` labels, ties to the smallest label.
/// The tail is padded by repeating the last label.
pub fn downsample_labels(labels: &[usize], w: usize) -> Vec<usize> {
    if labels.is_empty() || w == 0 {
        return Vec::new();
    }
    let n = labels.len().div_ceil(w);
    let last = *labels.last().unwrap();
    (0..n)
        .map(|i| {
            let mut win: Vec<usize> = (i * w..(i + 1) * w).map(|j| labels.get(j).copied().unwrap_or(last)).collect();
            win.sort_unstable();
            let (mut best, mut best_n) = (win[0], 0);
            let mut j = 0;
            while j < win.len() {
                let k = win[j..].iter().take_while(|&&v| v == win[j]).count();
                if k > best_n {
                    best = win[j];
                    best_n = k;
                }
                j += k;
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleMatrix {
    pub latent_dim: usize,
    /// `512 × d_z`, row-major.
    pub values: Vec<f32>,
    pub occupied: Vec<bool>,
}

impl StyleMatrix {
    pub fn zeros(latent_dim: usize) -> Self {
        Self { latent_dim, values: vec![0.0; N_CLUSTERS * latent_dim], occupied: vec![false; N_CLUSTERS] }
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.values[j * self.latent_dim..(j + 1) * self.latent_dim]
    }

    /// Elementwise L1 distance over the full matrix, unoccupied rows included.
    pub fn l1(&self, other: &StyleMatrix) -> Result<f64> {
        if self.latent_dim != other.latent_dim {
            return Err(Error::State(format!("latent width {} vs {}", self.latent_dim, other.latent_dim)));
        }
        Ok(self.values.iter().zip(&other.values).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum())
    }
}

/// Mean latent frame per cluster label. `z` is `T'×d_z`, one label per row.
pub fn compute_style_matrix<F: Real>(z: &Tensor<F>, labels: &[usize]) -> Result<StyleMatrix> {
    let d = z.cols();
    let rows = if z.is_empty() { 0 } else { z.rows() };
    if rows != labels.len() {
        return Err(Error::Input(format!("{} labels for {rows} latent frames", labels.len())));
    }
    let mut sums = vec![0.0f64; N_CLUSTERS * d];
    let mut counts = vec![0usize; N_CLUSTERS];
    for (t, &j) in labels.iter().enumerate() {
        if j >= N_CLUSTERS {
            return Err(Error::Input(format!("label {j} out of range for {N_CLUSTERS} clusters")));
        }
        counts[j] += 1;
        for (s, &v) in sums[j * d..(j + 1) * d].iter_mut().zip(z.row(t)) {
            *s += v.as_f64();
        }
    }
    let mut m = StyleMatrix::zeros(d);
    for j in 0..N_CLUSTERS {
        if counts[j] > 0 {
            m.occupied[j] = true;
            for c in 0..d {
                m.values[j * d + c] = (sums[j * d + c] / counts[j] as f64) as f32;
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEntry {
    pub style_id: u32,
    pub matrix: StyleMatrix,
}

/// Sidecar metadata kept next to the binary database.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DbMeta {
    pub corpus: String,
    pub latent_dim: usize,
    pub seed: u64,
    /// VQ-VAE checkpoint whose encoder produced the matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vq_checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleDb {
    pub latent_dim: usize,
    pub entries: Vec<StyleEntry>,
    pub meta: DbMeta,
}

/// Result of a lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Retrieval {
    pub style_id: u32,
    pub entry: usize,
    pub distance: f64,
}

impl StyleDb {
    pub fn new(latent_dim: usize, meta: DbMeta) -> Self {
        Self { latent_dim, entries: Vec::new(), meta }
    }

    pub fn push(&mut self, style_id: u32, matrix: StyleMatrix) -> Result<()> {
        if matrix.latent_dim != self.latent_dim {
            return Err(Error::State(format!(
                "style matrix width {} does not match database width {}",
                matrix.latent_dim, self.latent_dim
            )));
        }
        self.entries.push(StyleEntry { style_id, matrix });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest entry by L1 distance; ties go to the lowest entry index.
    pub fn retrieve(&self, query: &StyleMatrix) -> Result<Retrieval> {
        if self.entries.is_empty() {
            return Err(Error::State("style database is empty".into()));
        }
        let mut best: Option<Retrieval> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = e.matrix.l1(query)?;
            if best.is_none_or(|b| d < b.distance) {
                best = Some(Retrieval { style_id: e.style_id, entry: i, distance: d });
            }
        }
        Ok(best.expect("non-empty"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.style_id.to_le_bytes());
            let mut bits = [0u8; N_CLUSTERS / 8];
            for (j, &o) in e.matrix.occupied.iter().enumerate() {
                if o {
                    bits[j / 8] |= 1 << (j % 8);
                }
            }
            out.extend_from_slice(&bits);
            for v in &e.matrix.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], meta: DbMeta) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::Format("truncated style database".into()));
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("bad style database magic".into()));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut db = StyleDb::new(d, meta);
        for _ in 0..count {
            let id = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let bits = take(N_CLUSTERS / 8)?.to_vec();
            let raw = take(4 * N_CLUSTERS * d)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let occupied = (0..N_CLUSTERS).map(|j| bits[j / 8] >> (j % 8) & 1 == 1).collect();
            db.push(id, StyleMatrix { latent_dim: d, values, occupied })?;
        }
        if pos != buf.len() {
            return Err(Error::Format("trailing bytes in style database".into()));
        }
        if db.meta.latent_dim != 0 && db.meta.latent_dim != d {
            return Err(Error::State(format!("sidecar latent width {} vs database {d}", db.meta.latent_dim)));
        }
        db.meta.latent_dim = d;
        Ok(db)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Write the database and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        let mut f = std::fs::File::create(Self::sidecar_path(path))?;
        serde_json::to_writer_pretty(&mut f, &self.meta)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Load a database; the sidecar is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let side = Self::sidecar_path(path);
        let meta = if side.exists() {
            serde_json::from_slice(&std::fs::read(side)?)?
        } else {
            DbMeta::default()
        };
        Self::from_bytes(&bytes, meta)
    }
}

/// Style matrix of a pose track with its per-frame speech labels.
pub fn style_matrix_for<F: Real>(vq: &VqVae<F>, pose: &Tensor<F>, labels: &[usize]) -> Result<StyleMatrix> {
    if labels.len() != pose.rows() {
        return Err(Error::Input(format!("{} labels for {} pose frames", labels.len(), pose.rows())));
    }
    let z = vq.encode(pose)?;
    let down = downsample_labels(labels, vq.cfg.window);
    compute_style_matrix(&z, &down)
}

/// One database entry per `(pose, labels, style id)` sample.
pub fn build_db<F: Real>(vq: &VqVae<F>, samples: &[(&Tensor<F>, &[usize], u32)], meta: DbMeta) -> Result<StyleDb> {
    let mut db = StyleDb::new(vq.cfg.latent_dim, DbMeta { latent_dim: vq.cfg.latent_dim, ..meta });
    for (pose, labels, id) in samples {
        db.push(*id, style_matrix_for(vq, pose, labels)?)?;
    }
    Ok(db)
}

/// Pick a style for a reference clip. Nothing is trained.
pub fn adapt<F: Real>(vq: &VqVae<F>, db: &StyleDb, pose: &Tensor<F>, labels: &[usize]) -> Result<Retrieval> {
    if db.is_empty() {
        return Err(Error::State("style database is empty".into()));
    }
    if pose.rows() < MIN_REFERENCE_FRAMES {
        warn!(
            "reference clip has {} frames; about {MIN_REFERENCE_FRAMES} (10 s) are recommended",
            pose.rows()
        );
    }
    db.retrieve(&style_matrix_for(vq, pose, labels)?)
}
