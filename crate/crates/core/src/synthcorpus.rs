//! Synthetic speech, pose and expression tracks with known styles.
//!
//! Speech is a stream of cluster labels held for 4 to 12 frames. Every
//! cluster has a fixed semantic embedding; some clusters carry an energy
//! pulse. Poses are per-axis sinusoids plus yaw excursions on trigger
//! clusters. Expressions drive the lip dims from a per-cluster viseme
//! table and the emotion dims from an offset plus an energy-modulated
//! pattern.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{derive_seed, mtns, rng, SeededRng, Tensor};
use crate::styleretrieval::N_CLUSTERS;

pub const FPS: f64 = 25.0;
pub const SEM_DIM: usize = 16;
pub const PROS_DIM: usize = 2;
pub const SPEECH_DIM: usize = SEM_DIM + PROS_DIM;
pub const EXPR_DIM: usize = 53;
pub const ID_DIM: usize = 100;
pub const DWELL_MIN: usize = 4;
pub const DWELL_MAX: usize = 12;

/// Expression dims driven by the viseme table: the first 8 expression
/// coefficients and the 3 jaw dims.
pub fn lip_dims() -> Vec<usize> {
    (0..8).chain(50..53).collect()
}

/// Expression dims that carry emotion.
pub fn emotion_dims() -> Vec<usize> {
    (20..50).collect()
}

const TABLE_SEED: u64 = 0x5EED_0001;

/// Fixed lookup tables shared by every corpus.
struct Tables {
    sem: Vec<Vec<f64>>,
    pitch: Vec<f64>,
    viseme_proj: Vec<Vec<f64>>,
    emotion_pattern: Vec<f64>,
    vocab_order: Vec<usize>,
}

fn tables() -> &'static Tables {
    static T: std::sync::OnceLock<Tables> = std::sync::OnceLock::new();
    T.get_or_init(|| {
        let mut r = rng(TABLE_SEED);
        let n = Normal::new(0.0, 1.0).unwrap();
        let sem = (0..N_CLUSTERS).map(|_| (0..SEM_DIM).map(|_| n.sample(&mut r)).collect()).collect();
        let pitch = (0..N_CLUSTERS).map(|_| 0.5 * n.sample(&mut r)).collect();
        let scale = 1.0 / (SEM_DIM as f64).sqrt();
        let viseme_proj = (0..lip_dims().len())
            .map(|_| (0..SEM_DIM).map(|_| scale * n.sample(&mut r)).collect())
            .collect();
        let emotion_pattern = (0..emotion_dims().len()).map(|_| 0.5 * n.sample(&mut r)).collect();
        let mut vocab_order: Vec<usize> = (0..N_CLUSTERS).collect();
        vocab_order.shuffle(&mut r);
        Tables { sem, pitch, viseme_proj, emotion_pattern, vocab_order }
    })
}

/// Semantic embedding of a cluster.
pub fn cluster_embedding(label: usize) -> &'static [f64] {
    &tables().sem[label]
}

/// Noise-free lip values for a cluster at unit viseme gain, in
/// [`lip_dims`] order.
pub fn viseme(label: usize) -> Vec<f64> {
    let e = cluster_embedding(label);
    tables()
        .viseme_proj
        .iter()
        .map(|row| row.iter().zip(e).map(|(a, b)| a * b).sum::<f64>().tanh())
        .collect()
}

/// Fixed emotion-region pattern, in [`emotion_dims`] order.
pub fn emotion_pattern() -> &'static [f64] {
    &tables().emotion_pattern
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechConfig {
    /// Number of distinct clusters a corpus draws from.
    pub vocab: usize,
    /// Every `pulse_every`-th vocabulary entry carries an energy pulse.
    pub pulse_every: usize,
    pub noise: f64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self { vocab: 16, pulse_every: 4, noise: 0.05 }
    }
}

impl SpeechConfig {
    pub fn vocabulary(&self) -> &'static [usize] {
        &tables().vocab_order[..self.vocab.clamp(2, N_CLUSTERS)]
    }

    pub fn pulse_labels(&self) -> Vec<usize> {
        self.vocabulary().iter().step_by(self.pulse_every.max(1)).copied().collect()
    }
}

/// Frame-aligned speech features and cluster labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFrames {
    /// `T × 18`: semantic channel then (energy, pitch).
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl SpeechFrames {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn energy(&self, t: usize) -> f64 {
        self.features.at(t, SEM_DIM) as f64
    }

    /// Read externally produced features and labels.
    pub fn import(features: &Path, labels: &Path) -> Result<Self> {
        let f: Tensor<f32> = mtns::read_file(features)?;
        let l: Tensor<f32> = mtns::read_file(labels)?;
        Self::from_tensors(f, &l)
    }

    pub fn from_tensors(features: Tensor<f32>, labels: &Tensor<f32>) -> Result<Self> {
        let labels = labels_from_tensor(labels)?;
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "speech features {:?} do not align with {} labels",
                features.shape(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }
}

pub fn labels_to_tensor(labels: &[usize]) -> Tensor<f32> {
    Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f32).collect()).expect("shape")
}

pub fn labels_from_tensor(t: &Tensor<f32>) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= N_CLUSTERS {
                Err(Error::Input(format!("invalid cluster label {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// Piecewise-constant labels with dwell times in `[4, 12]` and features
/// built from them.
pub fn gen_speech(t: usize, cfg: &SpeechConfig, seed: u64) -> SpeechFrames {
    let mut r = rng(seed);
    let vocab = cfg.vocabulary();
    let pulses = cfg.pulse_labels();
    let mut labels = Vec::with_capacity(t);
    let mut prev = usize::MAX;
    while labels.len() < t {
        let mut l = vocab[r.random_range(0..vocab.len())];
        while l == prev {
            l = vocab[r.random_range(0..vocab.len())];
        }
        let dwell = r.random_range(DWELL_MIN..=DWELL_MAX);
        labels.extend(std::iter::repeat_n(l, dwell));
        prev = l;
    }
    labels.truncate(t);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap();
    let mut data = Vec::with_capacity(t * SPEECH_DIM);
    for &l in &labels {
        for &v in cluster_embedding(l) {
            data.push((v + noise.sample(&mut r)) as f32);
        }
        let energy = 0.3 + if pulses.contains(&l) { 1.0 } else { 0.0 };
        data.push((energy + noise.sample(&mut r)) as f32);
        data.push((tables().pitch[l] + noise.sample(&mut r)) as f32);
    }
    SpeechFrames { features: Tensor::new(vec![t, SPEECH_DIM], data).expect("shape"), labels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseStyle {
    /// Per-axis amplitude in radians (pitch, yaw, roll).
    pub amplitude: [f64; 3],
    /// Per-axis frequency in Hz.
    pub frequency: [f64; 3],
    pub pulse_gain: f64,
    /// Scale of the style's own per-label head gesture: every cluster label
    /// pulls the head toward a fixed random 3-axis target drawn from a
    /// table seeded by the style id.
    #[serde(default)]
    pub gesture_gain: f64,
    /// Clusters that trigger a yaw excursion; `None` uses the pulse clusters.
    #[serde(default)]
    pub triggers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExprStyle {
    pub viseme_gain: f64,
    /// Offset added to each of the 53 dims; empty means zero.
    #[serde(default)]
    pub emotion_offset: Vec<f64>,
    pub region_gain: f64,
    /// Per-sample spread inside the style: the region gain is scaled by a
    /// uniform factor in `[1 − v, 1 + v]` and every emotion dim gets a
    /// constant offset drawn from N(0, v/2).
    #[serde(default)]
    pub variation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub style_id: u32,
    pub name: String,
    pub pose: PoseStyle,
    pub expr: ExprStyle,
}

impl StyleSpec {
    pub fn calm() -> Self {
        Self {
            style_id: 0,
            name: "calm".into(),
            pose: PoseStyle {
                amplitude: [0.05, 0.08, 0.04],
                frequency: [0.3, 0.4, 0.25],
                pulse_gain: 0.05,
                gesture_gain: 0.02,
                triggers: None,
            },
            expr: ExprStyle { viseme_gain: 1.0, emotion_offset: Vec::new(), region_gain: 0.3, variation: 0.5 },
        }
    }

    pub fn excited() -> Self {
        let mut offset = vec![0.0; EXPR_DIM];
        for (k, &d) in emotion_dims().iter().enumerate() {
            offset[d] = if k % 2 == 0 { 0.6 } else { -0.4 };
        }
        Self {
            style_id: 1,
            name: "excited".into(),
            pose: PoseStyle {
                amplitude: [0.1, 0.175, 0.075],
                frequency: [0.9, 1.2, 0.7],
                pulse_gain: 0.3,
                gesture_gain: 0.25,
                triggers: None,
            },
            expr: ExprStyle { viseme_gain: 1.0, emotion_offset: offset, region_gain: 1.2, variation: 0.0 },
        }
    }

    pub fn canonical(name: &str) -> Option<Self> {
        match name {
            "calm" => Some(Self::calm()),
            "excited" => Some(Self::excited()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pose;
        for a in 0..3 {
            // gesture targets are unit normals; 3σ covers nearly all of them
            let reach = p.amplitude[a].abs() + 3.0 * p.gesture_gain.abs() + if a == 1 { p.pulse_gain.abs() } else { 0.0 };
            if reach > std::f64::consts::FRAC_PI_2 {
                return Err(Error::Config(format!("style {}: axis {a} can reach {reach:.3} rad, beyond π/2", self.name)));
            }
            if !(0.0..FPS / 2.0).contains(&p.frequency[a]) {
                return Err(Error::Config(format!("style {}: frequency {} Hz outside [0, 12.5)", self.name, p.frequency[a])));
            }
        }
        if !(0.0..=1.0).contains(&self.expr.variation) {
            return Err(Error::Config(format!("style {}: variation must lie in [0, 1]", self.name)));
        }
        if !self.expr.emotion_offset.is_empty() && self.expr.emotion_offset.len() != EXPR_DIM {
            return Err(Error::Config(format!("style {}: emotion_offset needs {EXPR_DIM} values", self.name)));
        }
        Ok(())
    }
}

/// Per-label 3-axis gesture targets of a style, `N_CLUSTERS × 3` unit normals.
pub fn gesture_table(style_id: u32) -> Vec<f64> {
    let mut r = rng(derive_seed(TABLE_SEED, 2000 + style_id as u64));
    let n = Normal::new(0.0, 1.0).unwrap();
    (0..N_CLUSTERS * 3).map(|_| n.sample(&mut r)).collect()
}

/// Pose track for a speech stream. `noise` scales the 0.01 rad jitter.
pub fn gen_pose(speech: &SpeechFrames, spec: &StyleSpec, speech_cfg: &SpeechConfig, noise: f64, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut r = rng(seed);
    let p = &spec.pose;
    let triggers = p.triggers.clone().unwrap_or_else(|| speech_cfg.pulse_labels());
    let phase: [f64; 3] = std::array::from_fn(|_| r.random_range(0.0..std::f64::consts::TAU));
    let n = Normal::new(0.0, 0.01 * noise.max(0.0)).unwrap();
    let gestures = gesture_table(spec.style_id);
    let mut pulse = 0.0;
    let mut gesture = [0.0f64; 3];
    let mut data = Vec::with_capacity(speech.len() * 3);
    for (t, l) in speech.labels.iter().enumerate() {
        let time = t as f64 / FPS;
        pulse = 0.7 * pulse + 0.3 * if triggers.contains(l) { 1.0 } else { 0.0 };
        for a in 0..3 {
            gesture[a] = 0.7 * gesture[a] + 0.3 * gestures[*l * 3 + a];
            let mut v = p.amplitude[a] * (std::f64::consts::TAU * p.frequency[a] * time + phase[a]).sin();
            v += p.gesture_gain * gesture[a];
            if a == 1 {
                v += p.pulse_gain * pulse;
            }
            v += n.sample(&mut r);
            data.push(v.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2) as f32);
        }
    }
    Tensor::new(vec![speech.len(), 3], data)
}

/// Expression track and identity vector. `noise` scales all jitter.
pub fn gen_expr(speech: &SpeechFrames, spec: &StyleSpec, noise: f64, seed: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    spec.validate()?;
    let mut r = rng(seed);
    let e = &spec.expr;
    let n = Normal::new(0.0, 0.01 * noise.max(0.0)).unwrap();
    let (lips, emo) = (lip_dims(), emotion_dims());
    let pattern = emotion_pattern();
    let mut base = if e.emotion_offset.is_empty() { vec![0.0f64; EXPR_DIM] } else { e.emotion_offset.clone() };
    let mut gain = e.region_gain;
    if e.variation > 0.0 {
        let mut vr = rng(derive_seed(seed, 7));
        gain *= vr.random_range(1.0 - e.variation..=1.0 + e.variation);
        let spread = Normal::new(0.0, e.variation / 2.0).unwrap();
        for &d in &emo {
            base[d] += spread.sample(&mut vr);
        }
    }
    let mut data = Vec::with_capacity(speech.len() * EXPR_DIM);
    for t in 0..speech.len() {
        let mut frame = base.clone();
        for (k, v) in viseme(speech.labels[t]).into_iter().enumerate() {
            frame[lips[k]] += e.viseme_gain * v;
        }
        let energy = speech.energy(t);
        for (k, &d) in emo.iter().enumerate() {
            frame[d] += gain * energy * pattern[k];
        }
        data.extend(frame.into_iter().map(|v| (v + n.sample(&mut r)) as f32));
    }
    let mut id_rng = rng(derive_seed(TABLE_SEED, 1000 + spec.style_id as u64));
    let id_noise = Normal::new(0.0, 0.05 * noise.max(0.0)).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let identity: Vec<f32> = (0..ID_DIM).map(|_| (unit.sample(&mut id_rng) + id_noise.sample(&mut r)) as f32).collect();
    Ok((Tensor::new(vec![speech.len(), EXPR_DIM], data)?, Tensor::new(vec![ID_DIM], identity)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub style_id: u32,
    pub style_name: String,
    pub seed: u64,
    pub speech: SpeechFrames,
    pub pose: Tensor<f32>,
    pub expr: Tensor<f32>,
    pub identity: Tensor<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub style_id: u32,
    pub style_name: String,
    pub frames: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub styles: Vec<StyleSpec>,
    pub per_style: usize,
    pub frames: usize,
    pub holdout_fraction: f64,
    /// Multiplies every noise level; 0 gives noise-free tracks.
    pub noise: f64,
    pub speech: SpeechConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            styles: vec![StyleSpec::calm(), StyleSpec::excited()],
            per_style: 10,
            frames: 250,
            holdout_fraction: 0.2,
            noise: 1.0,
            speech: SpeechConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sample>,
    pub holdout: Vec<Sample>,
}

impl Corpus {
    pub fn train_of_style(&self, style: u32) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(move |s| s.style_id == style)
    }

    pub fn holdout_of_style(&self, style: u32) -> impl Iterator<Item = &Sample> {
        self.holdout.iter().filter(move |s| s.style_id == style)
    }
}

pub fn gen_sample(spec: &StyleSpec, cfg: &CorpusConfig, id: String, seed: u64) -> Result<Sample> {
    let speech = gen_speech(cfg.frames, &SpeechConfig { noise: cfg.speech.noise * cfg.noise, ..cfg.speech.clone() }, derive_seed(seed, 1));
    let pose = gen_pose(&speech, spec, &cfg.speech, cfg.noise, derive_seed(seed, 2))?;
    let (expr, identity) = gen_expr(&speech, spec, cfg.noise, derive_seed(seed, 3))?;
    Ok(Sample { id, style_id: spec.style_id, style_name: spec.name.clone(), seed, speech, pose, expr, identity })
}

/// Generate `per_style` samples of every style and split each style's
/// samples into train and holdout with a seeded shuffle.
pub fn make_corpus(cfg: &CorpusConfig, seed: u64, threads: usize) -> Result<Corpus> {
    if cfg.styles.is_empty() {
        return Err(Error::Config("corpus needs at least one style".into()));
    }
    if cfg.frames == 0 {
        return Err(Error::Config("corpus frames must be positive".into()));
    }
    for s in &cfg.styles {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.styles.len()).flat_map(|s| (0..cfg.per_style).map(move |i| (s, i))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let samples: Vec<Sample> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(k, &(s, i))| {
                let spec = &cfg.styles[s];
                gen_sample(spec, cfg, format!("{}_{:03}", spec.name, i), derive_seed(seed, k as u64))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut split_rng: SeededRng = rng(derive_seed(seed, u64::MAX));
    let mut corpus = Corpus::default();
    let mut iter = samples.into_iter();
    for _ in &cfg.styles {
        let group: Vec<Sample> = iter.by_ref().take(cfg.per_style).collect();
        let n_hold = if group.len() > 1 { ((group.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, group.len() - 1) } else { 0 };
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(&mut split_rng);
        let hold: Vec<bool> = {
            let mut h = vec![false; group.len()];
            for &i in &order[..n_hold] {
                h[i] = true;
            }
            h
        };
        for (i, s) in group.into_iter().enumerate() {
            if hold[i] {
                corpus.holdout.push(s);
            } else {
                corpus.train.push(s);
            }
        }
    }
    Ok(corpus)
}

pub const SPLITS: [&str; 2] = ["train", "holdout"];

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    mtns::write_file(dir.join("speech.mtns"), &s.speech.features)?;
    mtns::write_file(dir.join("labels.mtns"), &labels_to_tensor(&s.speech.labels))?;
    mtns::write_file(dir.join("pose.mtns"), &s.pose)?;
    mtns::write_file(dir.join("expr.mtns"), &s.expr)?;
    mtns::write_file(dir.join("identity.mtns"), &s.identity)?;
    let meta = SampleMeta {
        id: s.id.clone(),
        style_id: s.style_id,
        style_name: s.style_name.clone(),
        frames: s.speech.len(),
        seed: s.seed,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

/// Write `<root>/<split>/<sample-id>/…` for every sample.
pub fn write_corpus(root: &Path, c: &Corpus) -> Result<()> {
    for (split, samples) in SPLITS.iter().zip([&c.train, &c.holdout]) {
        for s in samples {
            write_sample(&root.join(split).join(&s.id), s)?;
        }
    }
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let ctx = |e: Error| match e {
        Error::Io(io) => Error::Input(format!("{}: {io}", dir.display())),
        e => e,
    };
    let meta: SampleMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json")).map_err(Error::from).map_err(ctx)?)?;
    let speech = SpeechFrames::import(&dir.join("speech.mtns"), &dir.join("labels.mtns")).map_err(ctx)?;
    let pose: Tensor<f32> = mtns::read_file(dir.join("pose.mtns")).map_err(ctx)?;
    let expr: Tensor<f32> = mtns::read_file(dir.join("expr.mtns")).map_err(ctx)?;
    let identity: Tensor<f32> = mtns::read_file(dir.join("identity.mtns")).map_err(ctx)?;
    let t = speech.len();
    if pose.shape() != [t, 3] || expr.shape() != [t, EXPR_DIM] || identity.len() != ID_DIM {
        return Err(Error::Input(format!("{}: track shapes do not agree", dir.display())));
    }
    Ok(Sample { id: meta.id, style_id: meta.style_id, style_name: meta.style_name, seed: meta.seed, speech, pose, expr, identity })
}

fn sample_dirs(split_dir: &Path) -> Result<Vec<PathBuf>> {
    if !split_dir.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(split_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Read a corpus directory. Samples are ordered by directory name.
pub fn read_corpus(root: &Path) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::Input(format!("corpus directory {} not found", root.display())));
    }
    let mut c = Corpus::default();
    for (split, out) in SPLITS.iter().zip([&mut c.train, &mut c.holdout]) {
        for d in sample_dirs(&root.join(split))? {
            out.push(read_sample(&d)?);
        }
    }
    if c.train.is_empty() && c.holdout.is_empty() {
        return Err(Error::Input(format!("corpus directory {} holds no samples", root.display())));
    }
    Ok(c)
}
