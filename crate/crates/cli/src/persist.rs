//! Model checkpoints as written and read by the subcommands.
//!
//! Kinds: `expr` (a pretrained expression model), `expr_adapted` (the frozen
//! base, its adapter factors and the reference expression clip), `vq` and
//! `posegpt`.

use std::path::Path;

use facestyle_core::checkpoint::Checkpoint;
use facestyle_core::expradapter::{AdaptedExpr, ExprConfig, ExprModel, TrainReport};
use facestyle_core::molora::{MoLoRAConfig, MoLoRASet};
use facestyle_core::numkit::Tensor;
use facestyle_core::posegpt::{PoseGpt, PoseGptConfig};
use facestyle_core::vqpose::{VqConfig, VqVae};
use facestyle_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const KIND_EXPR: &str = "expr";
pub const KIND_EXPR_ADAPTED: &str = "expr_adapted";
pub const KIND_VQ: &str = "vq";
pub const KIND_GPT: &str = "posegpt";
pub const REFERENCE_EXPR: &str = "reference.expr";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptedMeta {
    expr: ExprConfig,
    molora: MoLoRAConfig,
}

fn is_factor(name: &str) -> bool {
    name.contains(".molora.")
}

pub fn save_expr(path: &Path, m: &ExprModel<f32>) -> Result<()> {
    let mut c = Checkpoint::new(KIND_EXPR, &m.cfg)?;
    c.add_store(&m.params)?;
    c.save(path)
}

pub fn save_adapted(path: &Path, a: &AdaptedExpr<f32>, molora: &MoLoRAConfig, reference: &Tensor<f32>) -> Result<()> {
    let mut c = Checkpoint::new(KIND_EXPR_ADAPTED, &AdaptedMeta { expr: a.model.cfg.clone(), molora: molora.clone() })?;
    c.add_store(&a.model.params)?;
    c.add_store(&a.set.factors)?;
    c.insert(REFERENCE_EXPR, reference.clone())?;
    c.save(path)
}

/// An expression model ready for inference, with the reference clip an
/// adapted checkpoint carries.
pub struct LoadedExpr {
    pub model: ExprModel<f32>,
    pub reference: Option<Tensor<f32>>,
    pub adapted: bool,
}

/// Load either kind of expression checkpoint. Adapter factors are merged
/// into the base weights.
pub fn load_expr(path: &Path) -> Result<LoadedExpr> {
    let c = Checkpoint::load(path)?;
    match c.kind.as_str() {
        KIND_EXPR => {
            let cfg: ExprConfig = c.config_as()?;
            let model = ExprModel::from_params(cfg, c.store_where(|_| true)?)?;
            Ok(LoadedExpr { model, reference: None, adapted: false })
        }
        KIND_EXPR_ADAPTED => {
            let meta: AdaptedMeta = c.config_as()?;
            let base = c.store_where(|n| !is_factor(n) && n != REFERENCE_EXPR)?;
            let factors = c.store_where(is_factor)?;
            let set = MoLoRASet::from_factors(&base, &meta.molora, factors)?;
            let model = ExprModel::from_params(meta.expr, base)?;
            let adapted = AdaptedExpr { model, set, report: TrainReport::default() };
            Ok(LoadedExpr { model: adapted.merged()?, reference: Some(c.get(REFERENCE_EXPR)?.to()), adapted: true })
        }
        other => Err(Error::Input(format!("{}: expected an expression checkpoint, found {other}", path.display()))),
    }
}

/// Load a pretrained (unadapted) expression model.
pub fn load_base_expr(path: &Path) -> Result<ExprModel<f32>> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(KIND_EXPR)?;
    ExprModel::from_params(c.config_as()?, c.store_where(|_| true)?)
}

pub fn save_vq(path: &Path, m: &VqVae<f32>) -> Result<()> {
    let mut c = Checkpoint::new(KIND_VQ, &m.cfg)?;
    c.add_store(&m.params)?;
    c.save(path)
}

pub fn load_vq(path: &Path) -> Result<VqVae<f32>> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(KIND_VQ)?;
    let cfg: VqConfig = c.config_as()?;
    VqVae::from_params(cfg, c.store_where(|_| true)?)
}

pub fn save_gpt(path: &Path, m: &PoseGpt<f32>) -> Result<()> {
    let mut c = Checkpoint::new(KIND_GPT, &m.cfg)?;
    c.add_store(&m.params)?;
    c.save(path)
}

pub fn load_gpt(path: &Path) -> Result<PoseGpt<f32>> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(KIND_GPT)?;
    let cfg: PoseGptConfig = c.config_as()?;
    PoseGpt::from_params(cfg, c.store_where(|_| true)?)
}

#[cfg(test)]
mod tests {
    use facestyle_core::expradapter::{AdaptConfig, ExprClip};
    use facestyle_core::synthcorpus::{make_corpus, CorpusConfig};

    use super::*;

    fn tiny() -> ExprConfig {
        ExprConfig { d: 8, heads: 2, kernel: 3, audio_blocks: 1, style_blocks: 1, id_layers: 1, decoder_blocks: 1, ..ExprConfig::default() }
    }

    #[test]
    fn adapted_checkpoint_infers_like_the_merged_model() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_corpus(&CorpusConfig { per_style: 2, frames: 40, ..CorpusConfig::default() }, 1, 1).unwrap();
        let model = ExprModel::<f32>::new(tiny(), 2).unwrap();
        let clip = ExprClip::<f32>::from_sample(&corpus.train[0]);
        let mcfg = MoLoRAConfig { ranks: vec![2, 4], exclude: vec!["decoder.head".into()], ..MoLoRAConfig::default() };
        let adapted = model.adapt(&clip, &mcfg, &AdaptConfig { steps: 3, lr: 1e-2 }, 3).unwrap();
        let path = dir.path().join("a.admk");
        save_adapted(&path, &adapted, &mcfg, &clip.expr).unwrap();

        let loaded = load_expr(&path).unwrap();
        assert!(loaded.adapted);
        assert_eq!(loaded.reference.as_ref(), Some(&clip.expr));
        let want = adapted.merged().unwrap().infer(&clip.speech, &clip.identity, &clip.expr).unwrap();
        let got = loaded.model.infer(&clip.speech, &clip.identity, &clip.expr).unwrap();
        assert_eq!(want, got);
        assert!(load_base_expr(&path).is_err());
    }
}
