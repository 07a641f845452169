//! Autoregressive code predictor for pose tracks.
//!
//! Speech features are mean-pooled to the VQ frame rate, projected, joined
//! with a per-style embedding and added to the token embeddings. A stack of
//! causal transformer blocks then predicts the next code at every position.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::layers::{self, BlockConfig, WeightSource};
use crate::numkit::{rng, Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::vqpose::pad_edge;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGptConfig {
    pub codebook_size: usize,
    pub window: usize,
    pub speech_dim: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub style_dim: usize,
    pub n_styles: usize,
    /// Longest code sequence the positional table covers.
    pub max_len: usize,
}

impl Default for PoseGptConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            window: 4,
            speech_dim: 18,
            d: 64,
            heads: 4,
            layers: 2,
            style_dim: 16,
            n_styles: 1,
            max_len: 256,
        }
    }
}

impl PoseGptConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig::causal_transformer(self.d, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.codebook_size < 2 || self.window == 0 || self.n_styles == 0 || self.max_len == 0 {
            return Err(Error::Config("posegpt: codebook_size ≥ 2, window, n_styles and max_len > 0 required".into()));
        }
        Ok(())
    }

    /// Index of the start-of-sequence token.
    pub fn sos(&self) -> usize {
        self.codebook_size
    }
}

/// Mean of each window of `w` rows; the tail is edge-padded first.
pub fn pool_windows<F: Real>(x: &Tensor<F>, w: usize) -> Result<Tensor<F>> {
    let x = pad_edge(x, w)?;
    let (t, c) = (x.rows() / w, x.cols());
    let inv = F::from_f64c(1.0 / w as f64);
    let mut out = vec![F::zero(); t * c];
    for i in 0..t {
        for j in 0..w {
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(x.row(i * w + j)) {
                *o = *o + v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(vec![t, c], out)
}

/// How the style enters the conditioning.
#[derive(Clone, Debug)]
pub enum Style<'a, F> {
    /// Row of the learned style table.
    Id(usize),
    /// An explicit embedding vector.
    Embedding(&'a Tensor<F>),
}

/// One training sequence: speech features, target codes, style id.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSample<F> {
    pub speech: Tensor<F>,
    pub codes: Vec<usize>,
    pub style: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GptTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of steps trained with pure teacher forcing.
    pub tf_fraction: f64,
    /// Replacement probability reached on the final step.
    pub max_sample_prob: f64,
}

impl Default for GptTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 1e-3, batch: 4, tf_fraction: 0.5, max_sample_prob: 0.5 }
    }
}

impl GptTrainConfig {
    /// Probability that an input token is replaced by the model's own
    /// prediction at `step`.
    pub fn sample_prob(&self, step: usize) -> f64 {
        let tf_steps = (self.tf_fraction.clamp(0.0, 1.0) * self.steps as f64).round() as usize;
        if step < tf_steps || self.steps <= tf_steps {
            return 0.0;
        }
        let frac = (step - tf_steps + 1) as f64 / (self.steps - tf_steps) as f64;
        self.max_sample_prob * frac.min(1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GptTrainReport {
    pub loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGpt<F> {
    pub cfg: PoseGptConfig,
    pub params: ParamStore<F>,
}

const TOK: &str = "gpt.tok_emb";
const POS: &str = "gpt.pos_emb";
const STYLE: &str = "gpt.style_emb";

impl<F: Real> PoseGpt<F> {
    pub fn new(cfg: PoseGptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let mut p = ParamStore::new();
        let d = cfg.d;
        p.insert(TOK, Tensor::randn(&[cfg.codebook_size + 1, d], 0.5, &mut r))?;
        p.insert(POS, Tensor::randn(&[cfg.max_len, d], 0.1, &mut r))?;
        p.insert(STYLE, Tensor::randn(&[cfg.n_styles, cfg.style_dim], 0.5, &mut r))?;
        layers::init_linear(&mut p, "gpt.speech_proj", d, cfg.speech_dim, None, &mut r)?;
        layers::init_linear(&mut p, "gpt.cond_proj", d, d + cfg.style_dim, None, &mut r)?;
        let bc = cfg.block();
        for i in 0..cfg.layers {
            layers::init_block(&mut p, &format!("gpt.block{i}"), &bc, false, &mut r)?;
        }
        layers::init_layer_norm(&mut p, "gpt.ln_out", d)?;
        layers::init_linear(&mut p, "gpt.head", cfg.codebook_size, d, None, &mut r)?;
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: PoseGptConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let tok = params.get(TOK)?;
        if tok.shape() != [cfg.codebook_size + 1, cfg.d] {
            return Err(Error::State(format!("token table {:?} does not match config", tok.shape())));
        }
        Ok(Self { cfg, params })
    }

    pub fn style_embedding(&self, id: usize) -> Result<Tensor<F>> {
        let table = self.params.get(STYLE)?;
        if id >= table.rows() {
            return Err(Error::Input(format!("style id {id} out of range for {} styles", table.rows())));
        }
        Tensor::new(vec![1, table.cols()], table.row(id).to_vec())
    }

    fn pooled(&self, speech: &Tensor<F>) -> Result<Tensor<F>> {
        if speech.cols() != self.cfg.speech_dim {
            return Err(Error::Input(format!("speech width {} vs {}", speech.cols(), self.cfg.speech_dim)));
        }
        pool_windows(speech, self.cfg.window)
    }

    /// Pooled speech projection joined with the broadcast style embedding,
    /// before the final conditioning projection.
    pub fn condition_input_graph(&self, g: &mut Graph<F>, speech: &Tensor<F>, style: &Style<F>) -> Result<Var> {
        let ws: &dyn WeightSource<F> = &self.params;
        let pooled = g.constant(self.pooled(speech)?);
        let sp = layers::linear(ws, g, "gpt.speech_proj", pooled)?;
        let t = g.value(sp).rows();
        let emb = match style {
            Style::Id(id) => {
                if *id >= self.cfg.n_styles {
                    return Err(Error::Input(format!("style id {id} out of range for {} styles", self.cfg.n_styles)));
                }
                let table = ws.param(g, STYLE)?;
                g.gather_rows(table, &[*id])?
            }
            Style::Embedding(e) => {
                if e.len() != self.cfg.style_dim {
                    return Err(Error::Input(format!("style embedding of {} values, expected {}", e.len(), self.cfg.style_dim)));
                }
                g.constant((*e).clone().reshape(&[1, self.cfg.style_dim])?)
            }
        };
        let se = g.broadcast_rows(emb, t)?;
        g.concat_cols(&[sp, se])
    }

    pub fn condition_graph(&self, g: &mut Graph<F>, speech: &Tensor<F>, style: &Style<F>) -> Result<Var> {
        let x = self.condition_input_graph(g, speech, style)?;
        layers::linear(&self.params, g, "gpt.cond_proj", x)
    }

    /// Conditioning `T'×d` for a speech track and a style.
    pub fn condition(&self, speech: &Tensor<F>, style: &Style<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let c = self.condition_graph(&mut g, speech, style)?;
        Ok(g.value(c).clone())
    }

    /// Logits `(L+1)×M` for the token stream `[SOS, prefix…]`; row `t`
    /// scores code `t`.
    pub fn logits_graph(&self, g: &mut Graph<F>, prefix: &[usize], cond: Var) -> Result<Var> {
        let n = prefix.len() + 1;
        let t_cond = g.value(cond).rows();
        if n > t_cond {
            return Err(Error::Input(format!("prefix of {} codes is longer than conditioning of {t_cond} frames", prefix.len())));
        }
        if n > self.cfg.max_len {
            return Err(Error::Input(format!("sequence of {n} codes exceeds max_len {}", self.cfg.max_len)));
        }
        if let Some(&c) = prefix.iter().find(|&&c| c >= self.cfg.codebook_size) {
            return Err(Error::Input(format!("code {c} out of range for {} entries", self.cfg.codebook_size)));
        }
        let ws: &dyn WeightSource<F> = &self.params;
        let mut tokens = Vec::with_capacity(n);
        tokens.push(self.cfg.sos());
        tokens.extend_from_slice(prefix);
        let tok = ws.param(g, TOK)?;
        let mut h = g.gather_rows(tok, &tokens)?;
        let pos = ws.param(g, POS)?;
        let pos = g.slice_rows(pos, 0, n)?;
        h = g.add(h, pos)?;
        let c = if t_cond == n { cond } else { g.slice_rows(cond, 0, n)? };
        h = g.add(h, c)?;
        let bc = self.cfg.block();
        for i in 0..self.cfg.layers {
            h = layers::conformer_block(ws, g, &format!("gpt.block{i}"), h, &bc)?;
        }
        h = layers::layer_norm(ws, g, "gpt.ln_out", h, None)?;
        layers::linear(ws, g, "gpt.head", h)
    }

    pub fn forward_logits(&self, prefix: &[usize], cond: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let l = self.logits_graph(&mut g, prefix, c)?;
        Ok(g.value(l).clone())
    }

    /// Mean next-code cross-entropy with ground-truth inputs.
    pub fn tf_loss(&self, codes: &[usize], cond: &Tensor<F>) -> Result<f64> {
        if codes.is_empty() {
            return Err(Error::Input("empty code sequence".into()));
        }
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let l = self.logits_graph(&mut g, &codes[..codes.len() - 1], c)?;
        let loss = g.cross_entropy(l, codes)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// Argmax decoding; ties go to the lowest code.
    pub fn greedy_decode(&self, cond: &Tensor<F>, length: usize) -> Result<Vec<usize>> {
        let mut codes: Vec<usize> = Vec::with_capacity(length);
        for _ in 0..length {
            let logits = self.forward_logits(&codes, cond)?;
            codes.push(argmax(logits.row(logits.rows() - 1)));
        }
        Ok(codes)
    }

    /// Code track for a speech track under a given style.
    pub fn generate(&self, speech: &Tensor<F>, style: &Style<F>) -> Result<Vec<usize>> {
        let cond = self.condition(speech, style)?;
        self.greedy_decode(&cond, cond.rows())
    }

    fn sample_loss(&self, g: &mut Graph<F>, s: &CodeSample<F>, inputs: &[usize]) -> Result<Var> {
        let cond = self.condition_graph(g, &s.speech, &Style::Id(s.style))?;
        if g.value(cond).rows() != s.codes.len() {
            return Err(Error::Input(format!(
                "speech pools to {} frames but target has {} codes",
                g.value(cond).rows(),
                s.codes.len()
            )));
        }
        let logits = self.logits_graph(g, inputs, cond)?;
        g.cross_entropy(logits, &s.codes)
    }

    /// One-pass greedy predictions for every position under teacher forcing.
    fn parallel_predictions(&self, s: &CodeSample<F>) -> Result<Vec<usize>> {
        let cond = self.condition(&s.speech, &Style::Id(s.style))?;
        let logits = self.forward_logits(&s.codes[..s.codes.len() - 1], &cond)?;
        Ok((0..logits.rows()).map(|t| argmax(logits.row(t))).collect())
    }

    /// Teacher forcing for the first `tf_fraction` of steps, then inputs are
    /// replaced by the model's own one-step predictions with a probability
    /// that grows linearly over the remaining steps.
    pub fn train(&mut self, corpus: &[CodeSample<F>], tc: &GptTrainConfig, seed: u64) -> Result<GptTrainReport> {
        if corpus.is_empty() {
            return Err(Error::Input("empty code corpus".into()));
        }
        for s in corpus {
            if s.codes.is_empty() {
                return Err(Error::Input("empty code sequence".into()));
            }
            if s.style >= self.cfg.n_styles {
                return Err(Error::Input(format!("style id {} out of range", s.style)));
            }
        }
        let mut r = rng(seed);
        let mut adam = Adam::new(AdamConfig { clip: Some(1.0), ..AdamConfig::with_lr(tc.lr) });
        let mut report = GptTrainReport::default();
        let batch = tc.batch.max(1);
        for step in 0..tc.steps {
            let p = tc.sample_prob(step);
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            for _ in 0..batch {
                let s = &corpus[r.random_range(0..corpus.len())];
                let mut inputs = s.codes[..s.codes.len() - 1].to_vec();
                if p > 0.0 {
                    let pred = self.parallel_predictions(s)?;
                    for (i, v) in inputs.iter_mut().enumerate() {
                        if r.random::<f64>() < p {
                            *v = pred[i];
                        }
                    }
                }
                let l = self.sample_loss(&mut g, s, &inputs)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.expect("batch ≥ 1"), F::from_f64c(1.0 / batch as f64));
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Training { step, msg: "non-finite PoseGPT loss".into() });
            }
            report.loss.push(lv);
            let grads = g.backward(loss)?.into_params();
            adam.step(&mut self.params, &grads).map_err(|e| match e {
                Error::Training { msg, .. } => Error::Training { step, msg },
                e => e,
            })?;
            if step % 500 == 0 {
                debug!("posegpt step {step}: loss {lv:.5} (sample prob {p:.3})");
            }
        }
        Ok(report)
    }
}

pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PoseGptConfig {
        PoseGptConfig { codebook_size: 8, speech_dim: 3, d: 16, heads: 2, layers: 1, style_dim: 4, n_styles: 2, max_len: 32, ..Default::default() }
    }

    #[test]
    fn window_mean() {
        let x = Tensor::<f64>::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_windows(&x, 4).unwrap().data(), &[2.5]);
    }

    #[test]
    fn zero_inputs_give_zero_condition() {
        let mut m = PoseGpt::<f64>::new(small_cfg(), 0).unwrap();
        for (name, p) in m.params.iter_mut() {
            if name.starts_with("gpt.speech_proj") || name.starts_with("gpt.cond_proj") || name == STYLE {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let c = m.condition(&Tensor::zeros(&[8, 3]), &Style::Id(0)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_changes_only_style_block() {
        let m = PoseGpt::<f64>::new(small_cfg(), 1).unwrap();
        let speech = Tensor::randn(&[8, 3], 1.0, &mut rng(2));
        let run = |id| {
            let mut g = Graph::new();
            let v = m.condition_input_graph(&mut g, &speech, &Style::Id(id)).unwrap();
            g.value(v).clone()
        };
        let (a, b) = (run(0), run(1));
        for t in 0..a.rows() {
            assert_eq!(a.row(t)[..16], b.row(t)[..16]);
            assert_ne!(a.row(t)[16..], b.row(t)[16..]);
        }
    }

    #[test]
    fn causal_logits_and_normalized_softmax() {
        let m = PoseGpt::<f64>::new(small_cfg(), 3).unwrap();
        let cond = m.condition(&Tensor::randn(&[24, 3], 1.0, &mut rng(4)), &Style::Id(1)).unwrap();
        let a = m.forward_logits(&[1, 2, 3, 4, 5], &cond).unwrap();
        let b = m.forward_logits(&[1, 2, 3, 7, 0], &cond).unwrap();
        for t in 0..=3 {
            assert_eq!(a.row(t), b.row(t), "position {t}");
        }
        assert_ne!(a.row(4), b.row(4));
        let mut g = Graph::new();
        let l = g.constant(a);
        let p = g.softmax(l, false);
        for t in 0..6 {
            let s: f64 = g.value(p).row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn prefix_longer_than_cond_rejected() {
        let m = PoseGpt::<f64>::new(small_cfg(), 5).unwrap();
        let cond = m.condition(&Tensor::zeros(&[8, 3]), &Style::Id(0)).unwrap();
        assert!(matches!(m.forward_logits(&[0, 0], &cond), Err(Error::Input(_))));
        assert!(matches!(m.tf_loss(&[0, 9], &cond), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_logits_give_log_m() {
        let mut m = PoseGpt::<f64>::new(PoseGptConfig { codebook_size: 64, ..small_cfg() }, 6).unwrap();
        for (name, p) in m.params.iter_mut() {
            if name.starts_with("gpt.head") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let cond = m.condition(&Tensor::randn(&[16, 3], 1.0, &mut rng(7)), &Style::Id(0)).unwrap();
        let l = m.tf_loss(&[3, 1, 4, 1], &cond).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn schedule_shape() {
        let tc = GptTrainConfig { steps: 10, tf_fraction: 0.5, max_sample_prob: 1.0, ..Default::default() };
        assert_eq!(tc.sample_prob(4), 0.0);
        assert!(tc.sample_prob(5) > 0.0);
        assert_eq!(tc.sample_prob(9), 1.0);
        let full = GptTrainConfig { tf_fraction: 1.0, ..tc };
        assert!((0..10).all(|s| full.sample_prob(s) == 0.0));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
