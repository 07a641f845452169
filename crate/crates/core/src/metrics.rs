//! Evaluation metrics: lip and emotion vertex errors, diversity, landmark
//! spread, and Fréchet distances between Gaussian feature statistics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{rng, Real, Tensor};
use crate::synthcorpus::{emotion_dims, lip_dims, EXPR_DIM};

pub const VERTEX_SEED: u64 = 0x7E47_0001;
pub const LANDMARK_SEED: u64 = 0x7E47_0002;
pub const N_LANDMARKS: usize = 8;
/// Added to covariance diagonals estimated from samples.
pub const COV_LOADING: f64 = 1e-6;

/// Fixed linear map from expression frames to `L×3` pseudo-vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoVertexMap {
    /// `(3L) × dims`; rows `3v..3v+3` give vertex `v`.
    pub matrix: DMatrix<f64>,
    pub lips: Vec<usize>,
    pub emotion: Vec<usize>,
}

impl PseudoVertexMap {
    pub fn new(matrix: DMatrix<f64>, lips: Vec<usize>, emotion: Vec<usize>) -> Result<Self> {
        if !matrix.nrows().is_multiple_of(3) {
            return Err(Error::Dimension(format!("vertex map has {} rows, not a multiple of 3", matrix.nrows())));
        }
        let l = matrix.nrows() / 3;
        if lips.iter().chain(&emotion).any(|&v| v >= l) {
            return Err(Error::Dimension(format!("vertex subset out of range for {l} vertices")));
        }
        Ok(Self { matrix, lips, emotion })
    }

    /// The seed-pinned map used for every evaluation: 16 lip vertices read
    /// only the lip dims, 24 emotion vertices read only the emotion dims,
    /// and 8 further vertices read the remaining dims.
    pub fn standard() -> Self {
        let mut r = rng(VERTEX_SEED);
        let n = Normal::new(0.0, 1.0).unwrap();
        let groups: [(usize, Vec<usize>); 3] = [
            (16, lip_dims()),
            (24, emotion_dims()),
            (8, (0..EXPR_DIM).filter(|d| !lip_dims().contains(d) && !emotion_dims().contains(d)).collect()),
        ];
        let total: usize = groups.iter().map(|g| g.0).sum();
        let mut m = DMatrix::zeros(3 * total, EXPR_DIM);
        let mut v0 = 0;
        for (count, dims) in &groups {
            let s = 1.0 / (dims.len() as f64).sqrt();
            for v in v0..v0 + count {
                for c in 0..3 {
                    for &d in dims {
                        m[(3 * v + c, d)] = s * n.sample(&mut r);
                    }
                }
            }
            v0 += count;
        }
        Self { matrix: m, lips: (0..16).collect(), emotion: (16..40).collect() }
    }

    pub fn n_vertices(&self) -> usize {
        self.matrix.nrows() / 3
    }

    fn frame_errors<F: Real>(&self, pred: &Tensor<F>, gt: &Tensor<F>) -> Result<Vec<DMatrix<f64>>> {
        if pred.shape() != gt.shape() {
            return Err(Error::Input(format!("length mismatch {:?} vs {:?}", pred.shape(), gt.shape())));
        }
        if pred.cols() != self.matrix.ncols() {
            return Err(Error::Dimension(format!("frames have {} dims, map expects {}", pred.cols(), self.matrix.ncols())));
        }
        Ok((0..pred.rows())
            .map(|t| {
                let diff = DMatrix::from_iterator(
                    pred.cols(),
                    1,
                    pred.row(t).iter().zip(gt.row(t)).map(|(&a, &b)| a.as_f64() - b.as_f64()),
                );
                &self.matrix * diff
            })
            .collect())
    }
}

fn vertex_norm(v: &DMatrix<f64>, i: usize) -> f64 {
    (v[3 * i].powi(2) + v[3 * i + 1].powi(2) + v[3 * i + 2].powi(2)).sqrt()
}

/// Mean over frames of the largest lip-vertex error.
pub fn lve<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>, map: &PseudoVertexMap) -> Result<f64> {
    let errs = map.frame_errors(pred, gt)?;
    if errs.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = errs.iter().map(|e| map.lips.iter().map(|&v| vertex_norm(e, v)).fold(0.0, f64::max)).sum();
    Ok(s / errs.len() as f64)
}

/// Mean over frames and emotion vertices of the vertex error.
pub fn eve<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>, map: &PseudoVertexMap) -> Result<f64> {
    let errs = map.frame_errors(pred, gt)?;
    if errs.is_empty() || map.emotion.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = errs
        .iter()
        .map(|e| map.emotion.iter().map(|&v| vertex_norm(e, v)).sum::<f64>() / map.emotion.len() as f64)
        .sum();
    Ok(s / errs.len() as f64)
}

/// Mean pairwise L2 distance between per-sequence temporal means.
pub fn diversity<F: Real>(seqs: &[Tensor<F>]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Input(format!("diversity needs at least 2 sequences, got {}", seqs.len())));
    }
    let means: Vec<Vec<f64>> = seqs.iter().map(|s| s.mean_rows().to_f64_vec()).collect();
    let c = means[0].len();
    if means.iter().any(|m| m.len() != c) {
        return Err(Error::Dimension("sequences differ in width".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `Rx(pitch)·Ry(yaw)·Rz(roll)`.
pub fn rotation(pitch: f64, yaw: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sz, cz) = roll.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(mul(rx, ry), rz)
}

/// The seed-pinned head landmarks, on the unit sphere.
pub fn canonical_landmarks() -> Vec<[f64; 3]> {
    let mut r = rng(LANDMARK_SEED);
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..N_LANDMARKS)
        .map(|_| {
            let p: [f64; 3] = std::array::from_fn(|_| n.sample(&mut r));
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / norm, p[1] / norm, p[2] / norm]
        })
        .collect()
}

/// Landmark spread with explicit landmarks: each frame rotates the
/// landmarks, drops z, and each landmark's spread is
/// `sqrt(var(x) + var(y))` over time. Averaged over landmarks and tracks.
pub fn lsd_with<F: Real>(poses: &[Tensor<F>], landmarks: &[[f64; 3]]) -> Result<f64> {
    if poses.is_empty() || landmarks.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in poses {
        if p.cols() != 3 {
            return Err(Error::Input(format!("pose must be T×3, got {:?}", p.shape())));
        }
        let t = p.rows();
        if t == 0 {
            continue;
        }
        let rots: Vec<_> = (0..t)
            .map(|i| {
                let r = p.row(i);
                rotation(r[0].as_f64(), r[1].as_f64(), r[2].as_f64())
            })
            .collect();
        let mut seq = 0.0;
        for q in landmarks {
            let (mut xs, mut ys) = (Vec::with_capacity(t), Vec::with_capacity(t));
            for r in &rots {
                xs.push(r[0][0] * q[0] + r[0][1] * q[1] + r[0][2] * q[2]);
                ys.push(r[1][0] * q[0] + r[1][1] * q[1] + r[1][2] * q[2]);
            }
            seq += (pop_var(&xs) + pop_var(&ys)).sqrt();
        }
        total += seq / landmarks.len() as f64;
    }
    Ok(total / poses.len() as f64)
}

pub fn lsd<F: Real>(poses: &[Tensor<F>]) -> Result<f64> {
    lsd_with(poses, &canonical_landmarks())
}

/// Population variance, computed on values shifted by the first sample so a
/// constant track gives exactly zero.
fn pop_var(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let d: Vec<f64> = x.iter().map(|v| v - x[0]).collect();
    let m = d.iter().sum::<f64>() / n;
    (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!("mean of {} vs covariance {}×{}", mean.len(), cov.nrows(), cov.ncols())));
        }
        Ok(Self { mean, cov })
    }

    /// Mean and unbiased covariance of feature rows, with a small diagonal
    /// loading so the covariance stays positive definite.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 feature rows, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("feature rows differ in width".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            cov[(i, i)] += COV_LOADING;
        }
        Ok(Self { mean, cov })
    }

    pub fn from_tensors<F: Real>(seqs: &[Tensor<F>]) -> Result<Self> {
        let rows: Vec<Vec<f64>> =
            seqs.iter().flat_map(|s| (0..s.rows()).map(move |t| s.row(t).iter().map(|v| v.as_f64()).collect())).collect();
        Self::from_rows(&rows)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. The matrix square root comes
/// from symmetric eigendecompositions with negative eigenvalues clamped.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Input(format!("feature dims differ: {} vs {}", a.mean.len(), b.mean.len())));
    }
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = sym_sqrt(&a.cov);
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Mean of per-cluster Fréchet distances over clusters with at least two
/// frames on both sides. `gen` and `reference` are feature rows with a
/// label per row.
pub fn fsd(gen: &[Vec<f64>], gen_labels: &[usize], reference: &[Vec<f64>], ref_labels: &[usize]) -> Result<f64> {
    if gen.len() != gen_labels.len() || reference.len() != ref_labels.len() {
        return Err(Error::Input("every feature row needs a label".into()));
    }
    let group = |rows: &[Vec<f64>], labels: &[usize]| {
        let mut m: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (r, &l) in rows.iter().zip(labels) {
            m.entry(l).or_default().push(r.clone());
        }
        m
    };
    let (g, r) = (group(gen, gen_labels), group(reference, ref_labels));
    let mut scores = Vec::new();
    for (label, gr) in &g {
        let Some(rr) = r.get(label) else { continue };
        if gr.len() < 2 || rr.len() < 2 {
            continue;
        }
        scores.push(fid(&GaussianStats::from_rows(gr)?, &GaussianStats::from_rows(rr)?)?);
    }
    if scores.is_empty() {
        return Err(Error::Metric("no cluster has at least 2 frames in both sets".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Rows of a set of tracks, flattened in order.
pub fn frame_rows<F: Real>(seqs: &[Tensor<F>]) -> Vec<Vec<f64>> {
    seqs.iter().flat_map(|s| (0..s.rows()).map(move |t| s.row(t).iter().map(|v| v.as_f64()).collect())).collect()
}

/// The evaluation report written by the command-line tool. Scores that
/// need predictions which were not supplied are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lve: Option<f64>,
    pub eve: Option<f64>,
    pub div_expr: Option<f64>,
    pub div_pose: Option<f64>,
    pub lsd: Option<f64>,
    pub fid: Option<f64>,
    pub fsd: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}
