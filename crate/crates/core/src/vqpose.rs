//! Sequence VQ-VAE over head-pose tracks.
//!
//! A pose track is `T×3` Euler angles. The encoder downsamples by the
//! window `w` to `T/w` latent frames, each latent frame snaps to its nearest
//! codebook row, and the decoder upsamples back by frame repetition.

use log::debug;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::layers::{self, WeightSource};
use crate::numkit::{rng, Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};

pub const POSE_DIMS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Codebook size `M`.
    pub codebook_size: usize,
    /// Latent width `d_z`.
    pub latent_dim: usize,
    /// Temporal downsampling factor `w`.
    pub window: usize,
    pub hidden: usize,
    pub decoder_kernel: usize,
    pub gamma: f64,
    pub alpha_vel: f64,
    pub alpha_acc: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            latent_dim: 16,
            window: 4,
            hidden: 32,
            decoder_kernel: 5,
            gamma: 0.25,
            alpha_vel: 1.0,
            alpha_acc: 1.0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("vq.codebook_size must be at least 2".into()));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("vq.latent_dim and vq.hidden must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("vq.window must be positive".into()));
        }
        if self.decoder_kernel.is_multiple_of(2) {
            return Err(Error::Config("vq.decoder_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Strides of the downsampling convolutions; their product is `w`.
    fn strides(&self) -> Vec<usize> {
        let mut rest = self.window;
        let mut out = Vec::new();
        while rest.is_multiple_of(2) {
            out.push(2);
            rest /= 2;
        }
        if rest > 1 {
            out.push(rest);
        }
        out
    }
}

/// Pad `x` to a multiple of `w` rows by repeating its last row.
pub fn pad_edge<F: Real>(x: &Tensor<F>, w: usize) -> Result<Tensor<F>> {
    let t = x.rows();
    if t < w || t == 0 {
        return Err(Error::Input(format!("sequence of {t} frames is shorter than window {w}")));
    }
    let padded = t.div_ceil(w) * w;
    let c = x.cols();
    let mut data = x.data().to_vec();
    for _ in t..padded {
        data.extend_from_slice(x.row(t - 1));
    }
    Tensor::new(vec![padded, c], data)
}

/// Nearest codebook row for each latent frame by squared L2 distance.
/// Ties go to the lowest index.
pub fn quantize<F: Real>(z: &Tensor<F>, codebook: &Tensor<F>) -> Result<(Vec<usize>, Tensor<F>)> {
    if codebook.is_empty() || codebook.rows() == 0 {
        return Err(Error::State("empty codebook".into()));
    }
    if z.cols() != codebook.cols() {
        return Err(Error::Dimension(format!("latent width {} vs codebook width {}", z.cols(), codebook.cols())));
    }
    let mut idx = Vec::with_capacity(z.rows());
    let mut out = Vec::with_capacity(z.len());
    for t in 0..z.rows() {
        let zt = z.row(t);
        let mut best = (0, F::infinity());
        for k in 0..codebook.rows() {
            let d = zt.iter().zip(codebook.row(k)).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>();
            if d < best.1 {
                best = (k, d);
            }
        }
        idx.push(best.0);
        out.extend_from_slice(codebook.row(best.0));
    }
    Ok((idx, Tensor::new(vec![z.rows(), z.cols()], out)?))
}

/// `(codebook term, commitment term)`: both the mean over frames of the
/// squared L2 distance between latent and quantized frames. They only
/// differ in which side receives gradient.
pub fn vq_terms<F: Real>(z: &Tensor<F>, zq: &Tensor<F>) -> f64 {
    let rows = z.rows().max(1) as f64;
    z.data().iter().zip(zq.data()).map(|(&a, &b)| ((a - b) * (a - b)).as_f64()).sum::<f64>() / rows
}

fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn diff(x: &[f64], c: usize) -> Vec<f64> {
    if x.len() <= c {
        return Vec::new();
    }
    (c..x.len()).map(|i| x[i] - x[i - c]).collect()
}

/// Position, velocity and acceleration L1 between two sequences.
pub fn recon_loss<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>, alpha_vel: f64, alpha_acc: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Input(format!("length mismatch {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let c = pred.cols();
    let (p, q) = (pred.to_f64_vec(), gt.to_f64_vec());
    let (dp, dq) = (diff(&p, c), diff(&q, c));
    let (ddp, ddq) = (diff(&dp, c), diff(&dq, c));
    Ok(l1_mean(&p, &q) + alpha_vel * l1_mean(&dp, &dq) + alpha_acc * l1_mean(&ddp, &ddq))
}

/// Tape version of [`recon_loss`].
pub fn recon_loss_graph<F: Real>(g: &mut Graph<F>, pred: Var, gt: Var, alpha_vel: f64, alpha_acc: f64) -> Result<Var> {
    if g.value(pred).shape() != g.value(gt).shape() {
        return Err(Error::Input(format!(
            "length mismatch {:?} vs {:?}",
            g.value(pred).shape(),
            g.value(gt).shape()
        )));
    }
    let mut loss = g.l1(pred, gt)?;
    let (mut p, mut q) = (pred, gt);
    for alpha in [alpha_vel, alpha_acc] {
        if g.value(p).rows() < 2 {
            break;
        }
        p = g.diff_rows(p)?;
        q = g.diff_rows(q)?;
        if alpha != 0.0 {
            let t = g.l1(p, q)?;
            let t = g.scale(t, F::from_f64c(alpha));
            loss = g.add(loss, t)?;
        }
    }
    Ok(loss)
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqTrainReport {
    pub loss: Vec<f64>,
    pub recon_l1: Vec<f64>,
    pub usage: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training crop length in frames; 0 uses whole sequences.
    pub crop: usize,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 2e-3, batch: 4, crop: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqVae<F> {
    pub cfg: VqConfig,
    pub params: ParamStore<F>,
    /// Assignment counts per codebook row, from the last usage pass.
    pub usage: Vec<u64>,
}

const CODEBOOK: &str = "vq.codebook";

impl<F: Real> VqVae<F> {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let mut p = ParamStore::new();
        let h = cfg.hidden;
        layers::init_conv(&mut p, "vq.enc.in", h, POSE_DIMS, 3, None, &mut r)?;
        for (i, s) in cfg.strides().into_iter().enumerate() {
            layers::init_conv(&mut p, &format!("vq.enc.down{i}"), h, h, 2 * s - 1, None, &mut r)?;
        }
        layers::init_conv(&mut p, "vq.enc.out", cfg.latent_dim, h, 1, None, &mut r)?;
        p.insert(CODEBOOK, Tensor::randn(&[cfg.codebook_size, cfg.latent_dim], 1.0, &mut r))?;
        let k = cfg.decoder_kernel;
        layers::init_conv(&mut p, "vq.dec.in", h, cfg.latent_dim, 3, None, &mut r)?;
        layers::init_conv(&mut p, "vq.dec.mid", h, h, k, None, &mut r)?;
        layers::init_conv(&mut p, "vq.dec.out", POSE_DIMS, h, k, Some(0.1 / ((h * k) as f64).sqrt()), &mut r)?;
        let usage = vec![0; cfg.codebook_size];
        Ok(Self { cfg, params: p, usage })
    }

    pub fn from_params(cfg: VqConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let cb = params.get(CODEBOOK)?;
        if cb.shape() != [cfg.codebook_size, cfg.latent_dim] {
            return Err(Error::State(format!("codebook shape {:?} does not match config", cb.shape())));
        }
        let usage = vec![0; cfg.codebook_size];
        Ok(Self { cfg, params, usage })
    }

    pub fn codebook(&self) -> &Tensor<F> {
        self.params.get(CODEBOOK).expect("codebook present")
    }

    /// Encoder on a padded `T×3` input already on the tape.
    pub fn encode_graph(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let mut h = layers::conv1d(ws, g, "vq.enc.in", x, 1, 1)?;
        h = g.silu(h);
        for (i, s) in self.cfg.strides().into_iter().enumerate() {
            h = layers::conv1d(ws, g, &format!("vq.enc.down{i}"), h, s, 1)?;
            h = g.silu(h);
        }
        layers::conv1d(ws, g, "vq.enc.out", h, 1, 1)
    }

    /// Quantize latent frames on the tape with a straight-through gradient:
    /// the forward value is the codebook row, the backward pass copies the
    /// incoming gradient to `z` unchanged. Returns `(st, zq, codes)` where
    /// `zq` is the gathered codebook rows (gradient flows to the codebook).
    pub fn quantize_st(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, z: Var) -> Result<(Var, Var, Vec<usize>)> {
        let cb = ws.param(g, CODEBOOK)?;
        let (codes, _) = quantize(g.value(z), g.value(cb))?;
        let zq = g.gather_rows(cb, &codes)?;
        let delta = g.sub(zq, z)?;
        let delta = g.stop_grad(delta);
        let st = g.add(z, delta)?;
        Ok((st, zq, codes))
    }

    pub fn decode_graph(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, q: Var) -> Result<Var> {
        let mut h = layers::conv1d(ws, g, "vq.dec.in", q, 1, 1)?;
        h = g.silu(h);
        h = g.repeat_rows(h, self.cfg.window)?;
        h = layers::conv1d(ws, g, "vq.dec.mid", h, 1, 1)?;
        h = g.silu(h);
        layers::conv1d(ws, g, "vq.dec.out", h, 1, 1)
    }

    /// Latent frames `T'×d_z` for a pose track, padding it first.
    pub fn encode(&self, pose: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_pose(pose)?;
        let mut g = Graph::new();
        let x = g.constant(pad_edge(pose, self.cfg.window)?);
        let z = self.encode_graph(&self.params, &mut g, x)?;
        Ok(g.value(z).clone())
    }

    pub fn codes(&self, pose: &Tensor<F>) -> Result<Vec<usize>> {
        Ok(quantize(&self.encode(pose)?, self.codebook())?.0)
    }

    /// Decode quantized latents `T'×d_z` into `w·T'` pose frames.
    pub fn decode(&self, q: &Tensor<F>) -> Result<Tensor<F>> {
        if q.cols() != self.cfg.latent_dim {
            return Err(Error::Dimension(format!("latent width {} vs {}", q.cols(), self.cfg.latent_dim)));
        }
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let y = self.decode_graph(&self.params, &mut g, qv)?;
        Ok(g.value(y).clone())
    }

    pub fn decode_codes(&self, codes: &[usize]) -> Result<Tensor<F>> {
        let cb = self.codebook();
        let mut data = Vec::with_capacity(codes.len() * cb.cols());
        for &c in codes {
            if c >= cb.rows() {
                return Err(Error::Input(format!("code {c} out of range for {} entries", cb.rows())));
            }
            data.extend_from_slice(cb.row(c));
        }
        self.decode(&Tensor::new(vec![codes.len(), cb.cols()], data)?)
    }

    /// Encode, quantize and decode, cropped back to the input length.
    pub fn reconstruct(&self, pose: &Tensor<F>) -> Result<Tensor<F>> {
        let z = self.encode(pose)?;
        let (_, zq) = quantize(&z, self.codebook())?;
        self.decode(&zq)?.slice_rows(0, pose.rows())
    }

    fn check_pose(&self, pose: &Tensor<F>) -> Result<()> {
        if pose.shape().len() != 2 || pose.cols() != POSE_DIMS {
            return Err(Error::Input(format!("pose must be T×3, got {:?}", pose.shape())));
        }
        Ok(())
    }

    /// Full training objective for one track on the tape; returns
    /// `(loss, recon, codes)`.
    pub fn loss_graph(&self, g: &mut Graph<F>, pose: &Tensor<F>) -> Result<(Var, Var, Vec<usize>)> {
        self.check_pose(pose)?;
        let ws: &dyn WeightSource<F> = &self.params;
        let x = g.constant(pad_edge(pose, self.cfg.window)?);
        let z = self.encode_graph(ws, g, x)?;
        let (st, zq, codes) = self.quantize_st(ws, g, z)?;
        let y = self.decode_graph(ws, g, st)?;
        let y = g.slice_rows(y, 0, pose.rows())?;
        let gt = g.constant(pose.clone());
        let recon = recon_loss_graph(g, y, gt, self.cfg.alpha_vel, self.cfg.alpha_acc)?;
        let z_sg = g.stop_grad(z);
        let zq_sg = g.stop_grad(zq);
        let cb_term = g.sq_dist_rows_mean(z_sg, zq)?;
        let commit = g.sq_dist_rows_mean(z, zq_sg)?;
        let commit = g.scale(commit, F::from_f64c(self.cfg.gamma));
        let loss = g.add(recon, cb_term)?;
        let loss = g.add(loss, commit)?;
        Ok((loss, recon, codes))
    }

    /// Mean position L1 between each track and its reconstruction.
    pub fn recon_l1(&self, corpus: &[Tensor<F>]) -> Result<f64> {
        let mut total = 0.0;
        for p in corpus {
            let r = self.reconstruct(p)?;
            total += l1_mean(&r.to_f64_vec(), &p.to_f64_vec());
        }
        Ok(total / corpus.len().max(1) as f64)
    }

    /// Recount codebook usage over a corpus.
    pub fn update_usage(&mut self, corpus: &[Tensor<F>]) -> Result<()> {
        let mut usage = vec![0u64; self.cfg.codebook_size];
        for p in corpus {
            for c in self.codes(p)? {
                usage[c] += 1;
            }
        }
        self.usage = usage;
        Ok(())
    }

    /// Seed the codebook with encoder outputs drawn from the corpus plus a
    /// little jitter, so every entry starts near the data.
    fn init_codebook_from_data<R: Rng>(&mut self, corpus: &[Tensor<F>], r: &mut R) -> Result<()> {
        let mut frames = Vec::new();
        for p in corpus {
            let z = self.encode(p)?;
            for t in 0..z.rows() {
                frames.push(z.row(t).to_vec());
            }
        }
        let m = self.cfg.codebook_size;
        let picks: Vec<usize> = if frames.len() >= m {
            sample(r, frames.len(), m).into_vec()
        } else {
            (0..m).map(|i| i % frames.len()).collect()
        };
        let jitter = Tensor::<F>::randn(&[m, self.cfg.latent_dim], 0.01, r);
        let cb = self.params.get_mut(CODEBOOK)?;
        for (k, &i) in picks.iter().enumerate() {
            for (j, v) in cb.row_mut(k).iter_mut().enumerate() {
                *v = frames[i][j] + jitter.at(k, j);
            }
        }
        Ok(())
    }

    /// Train on pose tracks. With `steps == 0` the model is left untouched.
    pub fn train(&mut self, corpus: &[Tensor<F>], tc: &VqTrainConfig, seed: u64) -> Result<VqTrainReport> {
        if corpus.is_empty() {
            return Err(Error::Input("empty pose corpus".into()));
        }
        let mut report = VqTrainReport::default();
        if tc.steps > 0 {
            let mut r = rng(seed);
            self.init_codebook_from_data(corpus, &mut r)?;
            let mut adam = Adam::new(AdamConfig { clip: Some(5.0), ..AdamConfig::with_lr(tc.lr) });
            let batch = tc.batch.max(1);
            for step in 0..tc.steps {
                let mut g = Graph::new();
                let mut total: Option<Var> = None;
                let mut recon_sum = 0.0;
                for _ in 0..batch {
                    let p = &corpus[r.random_range(0..corpus.len())];
                    let crop = if tc.crop == 0 || tc.crop >= p.rows() {
                        p.clone()
                    } else {
                        let start = r.random_range(0..=p.rows() - tc.crop);
                        p.slice_rows(start, tc.crop)?
                    };
                    let (l, recon, _) = self.loss_graph(&mut g, &crop)?;
                    recon_sum += g.value(recon).data()[0].as_f64();
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
                let loss = g.scale(total.expect("batch ≥ 1"), F::from_f64c(1.0 / batch as f64));
                let lv = g.value(loss).data()[0].as_f64();
                if !lv.is_finite() {
                    return Err(Error::Training { step, msg: "non-finite VQ-VAE loss".into() });
                }
                report.loss.push(lv);
                report.recon_l1.push(recon_sum / batch as f64);
                let grads = g.backward(loss)?.into_params();
                adam.step(&mut self.params, &grads).map_err(|e| match e {
                    Error::Training { msg, .. } => Error::Training { step, msg },
                    e => e,
                })?;
                if step % 500 == 0 {
                    debug!("vq step {step}: loss {lv:.5}");
                }
            }
        }
        self.update_usage(corpus)?;
        report.usage = self.usage.clone();
        Ok(report)
    }
}

/// The toy corpus of sinusoidal pose tracks used by smoke tests.
pub fn sinusoid_corpus<F: Real>(n: usize, t: usize, seed: u64) -> Vec<Tensor<F>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let amp: [f64; 3] = std::array::from_fn(|_| r.random_range(0.1..0.5));
            let freq: [f64; 3] = std::array::from_fn(|_| r.random_range(0.2..1.5));
            let phase: [f64; 3] = std::array::from_fn(|_| r.random_range(0.0..std::f64::consts::TAU));
            let data: Vec<f64> = (0..t)
                .flat_map(|i| {
                    let time = i as f64 / 25.0;
                    (0..3).map(move |a| amp[a] * (std::f64::consts::TAU * freq[a] * time + phase[a]).sin())
                })
                .collect();
            Tensor::from_f64(&[t, 3], &data).expect("shape")
        })
        .collect()
}
