//! Speech-to-expression predictor with style adaptation through MoLoRA.
//!
//! Three encoders feed a residual decoder:
//! * audio: input projection and conformer blocks over the speech frames;
//! * identity: the 100-dim shape vector passed through convolutions with
//!   conditional layer norm driven by the same vector;
//! * style: conformer blocks over an expression clip, mean-pooled into a
//!   single vector.
//!
//! Their outputs are joined per frame and decoded by a chain of blocks; each
//! block has its own output head and the heads' outputs are summed.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molora::{self, Adapted, MoLoRAConfig, MoLoRASet};
use crate::numkit::layers::{self, BlockConfig, WeightSource};
use crate::numkit::{derive_seed, rng, Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::synthcorpus::{Sample, EXPR_DIM, ID_DIM, SPEECH_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExprConfig {
    pub d: usize,
    pub heads: usize,
    pub kernel: usize,
    pub audio_blocks: usize,
    pub style_blocks: usize,
    pub id_layers: usize,
    pub decoder_blocks: usize,
    pub style_dim: usize,
    pub speech_dim: usize,
    pub expr_dim: usize,
    pub id_dim: usize,
}

impl Default for ExprConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            kernel: 5,
            audio_blocks: 2,
            style_blocks: 2,
            id_layers: 3,
            decoder_blocks: 3,
            style_dim: 16,
            speech_dim: SPEECH_DIM,
            expr_dim: EXPR_DIM,
            id_dim: ID_DIM,
        }
    }
}

impl ExprConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig::conformer(self.d, self.heads, self.kernel)
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.decoder_blocks == 0 || self.style_dim == 0 {
            return Err(Error::Config("expr: decoder_blocks and style_dim must be positive".into()));
        }
        Ok(())
    }

    /// Default adapters: ranks 4, 8 and 16 on everything but the audio
    /// encoder and the narrow output projections, whose widths (53 and 16)
    /// the larger ranks do not divide.
    pub fn default_molora(&self) -> MoLoRAConfig {
        MoLoRAConfig {
            ranks: vec![4, 8, 16],
            exclude: vec!["audio_enc.".into(), "decoder.head".into(), "style_enc.out".into()],
            ..MoLoRAConfig::default()
        }
    }
}

/// A clip the model reads: speech frames, identity vector, expressions.
#[derive(Clone, Debug, PartialEq)]
pub struct ExprClip<F> {
    pub speech: Tensor<F>,
    pub identity: Tensor<F>,
    pub expr: Tensor<F>,
}

impl<F: Real> ExprClip<F> {
    pub fn from_sample(s: &Sample) -> Self {
        Self { speech: s.speech.features.cast(), identity: s.identity.cast(), expr: s.expr.cast() }
    }

    pub fn frames(&self) -> usize {
        self.speech.rows()
    }

    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { speech: self.speech.slice_rows(start, len)?, identity: self.identity.clone(), expr: self.expr.slice_rows(start, len)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub crop_min: usize,
    pub crop_max: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 1e-3, batch: 4, crop_min: 40, crop_max: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { steps: 30, lr: 4e-4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExprModel<F> {
    pub cfg: ExprConfig,
    pub params: ParamStore<F>,
}

/// Forward-pass pieces, kept for inspection.
pub struct ExprForward {
    pub output: Var,
    pub contributions: Vec<Var>,
}

impl<F: Real> ExprModel<F> {
    pub fn new(cfg: ExprConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let mut p = ParamStore::new();
        let d = cfg.d;
        let bc = cfg.block();
        layers::init_linear(&mut p, "audio_enc.in", d, cfg.speech_dim, None, &mut r)?;
        for i in 0..cfg.audio_blocks {
            layers::init_block(&mut p, &format!("audio_enc.block{i}"), &bc, false, &mut r)?;
        }
        layers::init_linear(&mut p, "id_enc.in", d, cfg.id_dim, None, &mut r)?;
        for i in 0..cfg.id_layers {
            layers::init_conv(&mut p, &format!("id_enc.conv{i}"), d, d, 3, None, &mut r)?;
            layers::init_cond_layer_norm(&mut p, &format!("id_enc.norm{i}"), d, cfg.id_dim)?;
        }
        layers::init_linear(&mut p, "style_enc.in", d, cfg.expr_dim, None, &mut r)?;
        for i in 0..cfg.style_blocks {
            layers::init_block(&mut p, &format!("style_enc.block{i}"), &bc, false, &mut r)?;
        }
        layers::init_linear(&mut p, "style_enc.out", cfg.style_dim, d, None, &mut r)?;
        layers::init_linear(&mut p, "decoder.in", d, 2 * d + cfg.style_dim, None, &mut r)?;
        for i in 0..cfg.decoder_blocks {
            layers::init_block(&mut p, &format!("decoder.block{i}"), &bc, false, &mut r)?;
            layers::init_linear(&mut p, &format!("decoder.head{i}"), cfg.expr_dim, d, Some(0.1 / (d as f64).sqrt()), &mut r)?;
        }
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: ExprConfig, params: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let w = params.get("decoder.in.weight")?;
        if w.shape() != [cfg.d, 2 * cfg.d + cfg.style_dim] {
            return Err(Error::State(format!("decoder input {:?} does not match config", w.shape())));
        }
        Ok(Self { cfg, params })
    }

    fn check_width(&self, what: &str, t: &Tensor<F>, width: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != width || t.rows() == 0 {
            return Err(Error::Input(format!("{what} must be T×{width} with T ≥ 1, got {:?}", t.shape())));
        }
        Ok(())
    }

    pub fn encode_audio(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, speech: &Tensor<F>) -> Result<Var> {
        self.check_width("speech", speech, self.cfg.speech_dim)?;
        let x = g.constant(speech.clone());
        let mut h = layers::linear(ws, g, "audio_enc.in", x)?;
        let bc = self.cfg.block();
        for i in 0..self.cfg.audio_blocks {
            h = layers::conformer_block(ws, g, &format!("audio_enc.block{i}"), h, &bc)?;
        }
        Ok(h)
    }

    /// Identity embedding `1×d`; the identity vector is a one-frame sequence
    /// for the convolutions and the condition of every norm.
    pub fn encode_identity(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, identity: &Tensor<F>) -> Result<Var> {
        if identity.len() != self.cfg.id_dim {
            return Err(Error::Input(format!("identity must have {} values, got {}", self.cfg.id_dim, identity.len())));
        }
        let beta = g.constant(identity.clone().reshape(&[1, self.cfg.id_dim])?);
        let mut h = layers::linear(ws, g, "id_enc.in", beta)?;
        for i in 0..self.cfg.id_layers {
            h = layers::conv1d(ws, g, &format!("id_enc.conv{i}"), h, 1, 1)?;
            h = layers::layer_norm(ws, g, &format!("id_enc.norm{i}"), h, Some(beta))?;
            h = g.silu(h);
        }
        Ok(h)
    }

    /// Style vector `1×style_dim` from an expression clip. No positional
    /// signal enters, so the pooled result ignores where frames sit.
    pub fn encode_style(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, expr: &Tensor<F>) -> Result<Var> {
        self.check_width("style clip", expr, self.cfg.expr_dim)?;
        let x = g.constant(expr.clone());
        let mut h = layers::linear(ws, g, "style_enc.in", x)?;
        let bc = BlockConfig { conv: false, ..self.cfg.block() };
        for i in 0..self.cfg.style_blocks {
            h = layers::conformer_block(ws, g, &format!("style_enc.block{i}"), h, &bc)?;
        }
        let pooled = g.mean_rows(h);
        layers::linear(ws, g, "style_enc.out", pooled)
    }

    pub fn decode(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, audio: Var, id: Var, style: Var) -> Result<ExprForward> {
        let t = g.value(audio).rows();
        let id = g.broadcast_rows(id, t)?;
        let st = g.broadcast_rows(style, t)?;
        let x = g.concat_cols(&[audio, id, st])?;
        let mut h = layers::linear(ws, g, "decoder.in", x)?;
        let bc = self.cfg.block();
        let mut contributions = Vec::with_capacity(self.cfg.decoder_blocks);
        let mut out: Option<Var> = None;
        for i in 0..self.cfg.decoder_blocks {
            h = layers::conformer_block(ws, g, &format!("decoder.block{i}"), h, &bc)?;
            let c = layers::linear(ws, g, &format!("decoder.head{i}"), h)?;
            contributions.push(c);
            out = Some(match out {
                Some(o) => g.add(o, c)?,
                None => c,
            });
        }
        Ok(ExprForward { output: out.expect("at least one block"), contributions })
    }

    pub fn forward_graph(
        &self,
        ws: &dyn WeightSource<F>,
        g: &mut Graph<F>,
        speech: &Tensor<F>,
        identity: &Tensor<F>,
        style_src: &Tensor<F>,
    ) -> Result<ExprForward> {
        let a = self.encode_audio(ws, g, speech)?;
        let i = self.encode_identity(ws, g, identity)?;
        let s = self.encode_style(ws, g, style_src)?;
        self.decode(ws, g, a, i, s)
    }

    /// Expressions for `speech`, in the style of `style_src`.
    pub fn infer_with(&self, ws: &dyn WeightSource<F>, speech: &Tensor<F>, identity: &Tensor<F>, style_src: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let f = self.forward_graph(ws, &mut g, speech, identity, style_src)?;
        Ok(g.value(f.output).clone())
    }

    pub fn infer(&self, speech: &Tensor<F>, identity: &Tensor<F>, style_src: &Tensor<F>) -> Result<Tensor<F>> {
        self.infer_with(&self.params, speech, identity, style_src)
    }

    /// MSE of a clip against its own expressions, with the clip itself as
    /// the style source.
    pub fn clip_loss(&self, ws: &dyn WeightSource<F>, g: &mut Graph<F>, clip: &ExprClip<F>) -> Result<Var> {
        self.check_width("expressions", &clip.expr, self.cfg.expr_dim)?;
        if clip.expr.rows() != clip.speech.rows() {
            return Err(Error::Input(format!("{} speech frames vs {} expression frames", clip.speech.rows(), clip.expr.rows())));
        }
        let f = self.forward_graph(ws, g, &clip.speech, &clip.identity, &clip.expr)?;
        let gt = g.constant(clip.expr.clone());
        g.mse(f.output, gt)
    }

    /// Train every parameter on random crops of the given clips.
    pub fn pretrain(&mut self, clips: &[ExprClip<F>], pc: &PretrainConfig, seed: u64) -> Result<TrainReport> {
        if clips.is_empty() {
            return Err(Error::Input("no training clips".into()));
        }
        let mut r = rng(seed);
        let mut adam = Adam::new(AdamConfig { clip: Some(1.0), ..AdamConfig::with_lr(pc.lr) });
        let mut report = TrainReport::default();
        let batch = pc.batch.max(1);
        for step in 0..pc.steps {
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            for _ in 0..batch {
                let c = &clips[r.random_range(0..clips.len())];
                let hi = pc.crop_max.min(c.frames());
                let lo = pc.crop_min.min(hi).max(1);
                let len = r.random_range(lo..=hi);
                let start = r.random_range(0..=c.frames() - len);
                let l = self.clip_loss(&self.params, &mut g, &c.crop(start, len)?)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.expect("batch ≥ 1"), F::from_f64c(1.0 / batch as f64));
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Training { step, msg: "non-finite expression loss".into() });
            }
            report.loss.push(lv);
            let grads = g.backward(loss)?.into_params();
            adam.step(&mut self.params, &grads).map_err(|e| match e {
                Error::Training { msg, .. } => Error::Training { step, msg },
                e => e,
            })?;
            if step % 250 == 0 {
                debug!("expr pretrain step {step}: mse {lv:.5}");
            }
        }
        Ok(report)
    }

    /// Attach adapters and train only them on a reference clip. The base
    /// parameters are copied and never modified.
    pub fn adapt(&self, reference: &ExprClip<F>, mcfg: &MoLoRAConfig, ac: &AdaptConfig, seed: u64) -> Result<AdaptedExpr<F>> {
        if reference.frames() == 0 || reference.expr.rows() == 0 {
            return Err(Error::Input("empty reference clip".into()));
        }
        let mut base = self.params.clone();
        let mut set = molora::attach(&mut base, mcfg, &mut rng(derive_seed(seed, 0xADA)))?;
        let mut adam = Adam::new(AdamConfig::with_lr(ac.lr));
        let mut report = TrainReport::default();
        if set.count_trainable() > 0 {
            for step in 0..ac.steps {
                let mut g = Graph::new();
                let ws = Adapted { base: &base, set: &set };
                let loss = self.clip_loss(&ws, &mut g, reference)?;
                let lv = g.value(loss).data()[0].as_f64();
                if !lv.is_finite() {
                    return Err(Error::Training { step, msg: "non-finite adaptation loss".into() });
                }
                report.loss.push(lv);
                let grads = g.backward(loss)?.into_params();
                adam.step(&mut set.factors, &grads).map_err(|e| match e {
                    Error::Training { msg, .. } => Error::Training { step, msg },
                    e => e,
                })?;
                debug!("expr adapt step {step}: mse {lv:.5}");
            }
        }
        Ok(AdaptedExpr { model: ExprModel { cfg: self.cfg.clone(), params: base }, set, report })
    }
}

/// A frozen base model with trained adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedExpr<F> {
    pub model: ExprModel<F>,
    pub set: MoLoRASet<F>,
    pub report: TrainReport,
}

impl<F: Real> AdaptedExpr<F> {
    pub fn infer(&self, speech: &Tensor<F>, identity: &Tensor<F>, style_src: &Tensor<F>) -> Result<Tensor<F>> {
        let ws = Adapted { base: &self.model.params, set: &self.set };
        self.model.infer_with(&ws, speech, identity, style_src)
    }

    /// Bake the adapters into a plain model.
    pub fn merged(&self) -> Result<ExprModel<F>> {
        let mut params = self.model.params.clone();
        let mut set = self.set.clone();
        molora::merge(&mut params, &mut set)?;
        Ok(ExprModel { cfg: self.model.cfg.clone(), params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExprConfig {
        ExprConfig {
            d: 8,
            heads: 2,
            kernel: 3,
            audio_blocks: 1,
            style_blocks: 1,
            id_layers: 2,
            decoder_blocks: 3,
            style_dim: 4,
            speech_dim: 5,
            expr_dim: 6,
            id_dim: 7,
        }
    }

    fn clip(seed: u64, t: usize) -> ExprClip<f64> {
        let mut r = rng(seed);
        let c = tiny();
        ExprClip {
            speech: Tensor::randn(&[t, c.speech_dim], 1.0, &mut r),
            identity: Tensor::randn(&[c.id_dim], 1.0, &mut r),
            expr: Tensor::randn(&[t, c.expr_dim], 1.0, &mut r),
        }
    }

    #[test]
    fn output_length_and_block_sum() {
        let m = ExprModel::<f64>::new(tiny(), 0).unwrap();
        let c = clip(1, 9);
        let mut g = Graph::new();
        let f = m.forward_graph(&m.params, &mut g, &c.speech, &c.identity, &c.expr).unwrap();
        let out = g.value(f.output).clone();
        assert_eq!(out.shape(), &[9, 6]);
        let mut sum = Tensor::zeros(&[9, 6]);
        for &v in &f.contributions {
            sum.add_assign(g.value(v)).unwrap();
        }
        assert!(sum.max_abs_diff(&out) < 1e-6);
    }

    #[test]
    fn zero_heads_give_zero_output() {
        let mut m = ExprModel::<f64>::new(tiny(), 2).unwrap();
        for (n, p) in m.params.iter_mut() {
            if n.starts_with("decoder.head") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let c = clip(3, 4);
        assert!(m.infer(&c.speech, &c.identity, &c.expr).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_vector_ignores_duplication() {
        let m = ExprModel::<f64>::new(tiny(), 4).unwrap();
        let c = clip(5, 6);
        let doubled = Tensor::new(vec![12, 6], [c.expr.data(), c.expr.data()].concat()).unwrap();
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let s = m.encode_style(&m.params, &mut g, x).unwrap();
            g.value(s).clone()
        };
        assert!(run(&c.expr).max_abs_diff(&run(&doubled)) < 1e-12);
        let one = c.expr.slice_rows(0, 1).unwrap();
        assert_eq!(run(&one).shape(), &[1, 4]);
    }

    #[test]
    fn zero_identity_with_zero_projections_is_plain_norm_path() {
        let m = ExprModel::<f64>::new(tiny(), 6).unwrap();
        let zero = Tensor::zeros(&[7]);
        let mut g = Graph::new();
        let a = m.encode_identity(&m.params, &mut g, &zero).unwrap();
        let a = g.value(a).clone();
        // the same computation without any condition
        let mut g = Graph::new();
        let beta = g.constant(Tensor::zeros(&[1, 7]));
        let mut h = layers::linear(&m.params, &mut g, "id_enc.in", beta).unwrap();
        for i in 0..2 {
            h = layers::conv1d(&m.params, &mut g, &format!("id_enc.conv{i}"), h, 1, 1).unwrap();
            h = layers::layer_norm(&m.params, &mut g, &format!("id_enc.norm{i}"), h, None).unwrap();
            h = g.silu(h);
        }
        assert_eq!(&a, g.value(h));
    }

    #[test]
    fn adaptation_leaves_base_and_empty_ranks_change_nothing() {
        let m = ExprModel::<f64>::new(tiny(), 7).unwrap();
        let c = clip(8, 10);
        let mcfg = MoLoRAConfig { ranks: vec![2, 4], ..tiny().default_molora() };
        let a = m.adapt(&c, &mcfg, &AdaptConfig { steps: 3, lr: 1e-2 }, 1).unwrap();
        for (n, p) in m.params.iter() {
            assert_eq!(a.model.params.get(n).unwrap(), &p.value);
        }
        assert_eq!(a.report.loss.len(), 3);
        assert!(a.set.factors.names().all(|n| !n.starts_with("audio_enc.")));
        let none = m.adapt(&c, &MoLoRAConfig::with_ranks(&[]), &AdaptConfig::default(), 1).unwrap();
        assert_eq!(none.merged().unwrap().params.iter().count(), m.params.len());
        for (n, p) in none.merged().unwrap().params.iter() {
            assert_eq!(m.params.get(n).unwrap(), &p.value);
        }
    }

    #[test]
    fn merged_matches_adapted() {
        let m = ExprModel::<f64>::new(tiny(), 9).unwrap();
        let c = clip(10, 8);
        let mcfg = MoLoRAConfig { ranks: vec![2, 4], ..tiny().default_molora() };
        let a = m.adapt(&c, &mcfg, &AdaptConfig { steps: 5, lr: 1e-2 }, 2).unwrap();
        let merged = a.merged().unwrap();
        let x = a.infer(&c.speech, &c.identity, &c.expr).unwrap();
        let y = merged.infer(&c.speech, &c.identity, &c.expr).unwrap();
        let scale = x.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(x.max_abs_diff(&y) / scale < 1e-5);
    }

    // Whole-network checks accumulate rounding through many layers, so the
    // bound here is looser than the per-layer suite.
    const COMPOSITE_TOL: f64 = 1e-2;

    #[test]
    fn full_model_gradients_match_finite_differences() {
        use crate::numkit::gradcheck;
        let m = ExprModel::<f64>::new(tiny(), 12).unwrap();
        let c = clip(13, 5);
        let rep = gradcheck::grad_check(|g: &mut Graph<f64>, p: &ParamStore<f64>| m.clip_loss(p, g, &c), &m.params, COMPOSITE_TOL).unwrap();
        assert!(rep.passed(), "{:?}", rep.worst());
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        use crate::numkit::gradcheck;
        let m = ExprModel::<f64>::new(tiny(), 14).unwrap();
        let c = clip(15, 5);
        let mut base = m.params.clone();
        let mcfg = MoLoRAConfig { ranks: vec![2, 4], ..tiny().default_molora() };
        let mut set: MoLoRASet<f64> = molora::attach(&mut base, &mcfg, &mut rng(3)).unwrap();
        // move B off zero so A receives gradient
        let mut r = rng(4);
        for (_, p) in set.factors.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.05, &mut r);
        }
        let rep = gradcheck::grad_check(
            |g: &mut Graph<f64>, f: &ParamStore<f64>| {
                let mut s = set.clone();
                s.factors = f.clone();
                m.clip_loss(&Adapted { base: &base, set: &s }, g, &c)
            },
            &set.factors,
            COMPOSITE_TOL,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.worst());
    }

    #[test]
    fn empty_reference_rejected() {
        let m = ExprModel::<f64>::new(tiny(), 11).unwrap();
        let c = ExprClip { speech: Tensor::zeros(&[0, 5]), identity: Tensor::zeros(&[7]), expr: Tensor::zeros(&[0, 6]) };
        assert!(matches!(m.adapt(&c, &MoLoRAConfig::with_ranks(&[2]), &AdaptConfig::default(), 0), Err(Error::Input(_))));
    }
}
