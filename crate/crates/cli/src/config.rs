//! Run configuration: one JSON file shared by every subcommand.
//!
//! Unknown and duplicate keys are rejected, and every parse error names the
//! offending key path. Paths in the file are relative to the file's own
//! directory; paths given as flags are relative to the working directory
//! and take precedence.

use std::path::{Path, PathBuf};

use facestyle_core::expradapter::{AdaptConfig, ExprConfig, ExprModel, PretrainConfig};
use facestyle_core::molora::{adaptable_layers, MoLoRAConfig};
use facestyle_core::posegpt::{GptTrainConfig, PoseGptConfig};
use facestyle_core::synthcorpus::{CorpusConfig, SPEECH_DIM};
use facestyle_core::vqpose::{VqConfig, VqTrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, Outcome};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub expr: Option<PathBuf>,
    pub adapted: Option<PathBuf>,
    pub vq: Option<PathBuf>,
    pub gpt: Option<PathBuf>,
    pub style_db: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub expr: ExprConfig,
    pub pretrain: PretrainConfig,
    /// Style ids the expression model is pretrained on; all when absent.
    pub pretrain_styles: Option<Vec<u32>>,
    pub adapt: AdaptConfig,
    /// Adapter layout; the expression model's default when absent.
    pub molora: Option<MoLoRAConfig>,
    pub vq: VqConfig,
    pub vq_train: VqTrainConfig,
    pub gpt: PoseGptConfig,
    pub gpt_train: GptTrainConfig,
    pub paths: Paths,
}

/// A validated configuration with its seed fixed and its path base known.
#[derive(Clone, Debug)]
pub struct Run {
    pub seed: u64,
    pub cfg: RunConfig,
    base: PathBuf,
}

/// Parse JSON text, reporting the key path of the first error.
pub fn parse_str(text: &str) -> Outcome<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Failure::config(format!("config: {inner}"))
        } else {
            Failure::config(format!("config key {path}: {inner}"))
        }
    })
}

pub fn parse_file(path: &Path) -> Outcome<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_str(&text)
}

impl RunConfig {
    pub fn molora(&self) -> MoLoRAConfig {
        self.molora.clone().unwrap_or_else(|| self.expr.default_molora())
    }

    pub fn validate(&self) -> Outcome {
        let cfg_err = |key: &str, e: facestyle_core::Error| Failure::config(format!("{key}: {}", strip_class(&e)));
        let c = &self.corpus;
        if c.styles.is_empty() {
            return Err(Failure::config("corpus.styles: at least one style is required"));
        }
        for (i, s) in c.styles.iter().enumerate() {
            s.validate().map_err(|e| cfg_err(&format!("corpus.styles[{i}]"), e))?;
            if c.styles[..i].iter().any(|o| o.style_id == s.style_id) {
                return Err(Failure::config(format!("corpus.styles[{i}].style_id: id {} used twice", s.style_id)));
            }
        }
        if c.per_style == 0 || c.frames == 0 {
            return Err(Failure::config("corpus: per_style and frames must be positive"));
        }
        if !(0.0..1.0).contains(&c.holdout_fraction) {
            return Err(Failure::config("corpus.holdout_fraction: must lie in [0, 1)"));
        }
        self.expr.validate().map_err(|e| cfg_err("expr", e))?;
        if self.expr.speech_dim != SPEECH_DIM {
            return Err(Failure::config(format!("expr.speech_dim: corpus speech frames have {SPEECH_DIM} dims")));
        }
        self.vq.validate().map_err(|e| cfg_err("vq", e))?;
        self.gpt.validate().map_err(|e| cfg_err("gpt", e))?;
        if self.gpt.speech_dim != SPEECH_DIM {
            return Err(Failure::config(format!("gpt.speech_dim: corpus speech frames have {SPEECH_DIM} dims")));
        }
        if self.gpt.codebook_size != self.vq.codebook_size {
            return Err(Failure::config(format!(
                "gpt.codebook_size: {} differs from vq.codebook_size {}",
                self.gpt.codebook_size, self.vq.codebook_size
            )));
        }
        if self.gpt.window != self.vq.window {
            return Err(Failure::config(format!("gpt.window: {} differs from vq.window {}", self.gpt.window, self.vq.window)));
        }
        self.validate_molora()?;
        if let Some(ids) = &self.pretrain_styles {
            if ids.is_empty() {
                return Err(Failure::config("pretrain_styles: list is empty"));
            }
            if let Some(bad) = ids.iter().find(|id| !c.styles.iter().any(|s| s.style_id == **id)) {
                return Err(Failure::config(format!("pretrain_styles: no corpus style has id {bad}")));
            }
        }
        Ok(())
    }

    /// Every rank must divide the output width of every adapted layer.
    fn validate_molora(&self) -> Outcome {
        let m = self.molora();
        m.validate().map_err(|e| Failure::config(format!("molora.{}", strip_class(&e))))?;
        let model = ExprModel::<f32>::new(self.expr.clone(), 0).map_err(|e| Failure::config(format!("expr: {}", strip_class(&e))))?;
        for l in adaptable_layers(&model.params, &m) {
            if let Some(r) = m.ranks.iter().find(|&&r| l.m % r != 0) {
                return Err(Failure::config(format!(
                    "molora.ranks: rank {r} does not divide output size {} of layer {}",
                    l.m, l.layer
                )));
            }
        }
        Ok(())
    }
}

fn strip_class(e: &facestyle_core::Error) -> String {
    let s = e.to_string();
    s.strip_prefix("config error: ").map(str::to_string).unwrap_or(s)
}

impl Run {
    /// Load `config` (or defaults), apply the seed flag and validate.
    pub fn load(config: Option<&Path>, seed: Option<u64>) -> Outcome<Self> {
        let (mut cfg, base) = match config {
            Some(p) => {
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (parse_file(p)?, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        if seed.is_some() {
            cfg.seed = seed;
        }
        let seed = cfg.seed.ok_or_else(|| Failure::config("seed: missing; set it in the config or pass --seed"))?;
        cfg.validate()?;
        Ok(Self { seed, cfg, base })
    }

    /// The flag value if given, else the configured path under `paths`.
    pub fn path(&self, flag: Option<&Path>, key: &str) -> Outcome<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        let p = &self.cfg.paths;
        let configured = match key {
            "corpus" => &p.corpus,
            "expr" => &p.expr,
            "adapted" => &p.adapted,
            "vq" => &p.vq,
            "gpt" => &p.gpt,
            "style_db" => &p.style_db,
            "pred" => &p.pred,
            "report" => &p.report,
            _ => unreachable!("unknown path key {key}"),
        };
        configured
            .as_ref()
            .map(|c| self.base.join(c))
            .ok_or_else(|| Failure::config(format!("paths.{key}: not configured and no flag given")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str) -> Outcome<Run> {
        let mut cfg = parse_str(text)?;
        let seed = cfg.seed.take().ok_or_else(|| Failure::config("seed: missing"))?;
        cfg.validate()?;
        Ok(Run { seed, cfg, base: PathBuf::new() })
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let r = run(r#"{"seed": 5}"#).unwrap();
        assert_eq!(r.seed, 5);
        assert_eq!((r.cfg.vq.codebook_size, r.cfg.vq.latent_dim, r.cfg.vq.window), (64, 16, 4));
        assert_eq!(r.cfg.molora().ranks, vec![4, 8, 16]);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let e = run("{}").unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("seed"));
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let e = run(r#"{"seed": 1, "vq": {"codebook_size": 8, "colour": 2}}"#).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("vq.colour") || e.message.contains("vq"), "{}", e.message);
        assert!(e.message.contains("colour"));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let e = run(r#"{"seed": 1, "seed": 2}"#).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("duplicate"), "{}", e.message);
    }

    #[test]
    fn rank_must_divide_adapted_widths() {
        let e = run(r#"{"seed": 1, "molora": {"ranks": [3]}}"#).unwrap_err();
        assert!(e.message.starts_with("molora.ranks"), "{}", e.message);
        // Rank 2 divides every width once the 53-wide output heads are skipped.
        let ok = r#"{"seed": 1, "molora": {"ranks": [2], "exclude": ["decoder.head"]}}"#;
        run(ok).unwrap();
        let e = run(r#"{"seed": 1, "expr": {"d": 63, "heads": 3}, "molora": {"ranks": [3], "exclude": ["decoder.head", "style_enc.out"]}}"#);
        assert!(e.is_ok(), "{:?}", e.err());
    }

    #[test]
    fn cross_section_checks() {
        assert!(run(r#"{"seed": 1, "gpt": {"window": 2}}"#).unwrap_err().message.starts_with("gpt.window"));
        assert!(run(r#"{"seed": 1, "pretrain_styles": [7]}"#).unwrap_err().message.starts_with("pretrain_styles"));
        assert!(run(r#"{"seed": 1, "corpus": {"holdout_fraction": 1.5}}"#).is_err());
    }

    #[test]
    fn flag_paths_win_over_config_paths() {
        let mut r = run(r#"{"seed": 1, "paths": {"corpus": "data"}}"#).unwrap();
        r.base = PathBuf::from("/cfg");
        assert_eq!(r.path(None, "corpus").unwrap(), PathBuf::from("/cfg/data"));
        assert_eq!(r.path(Some(Path::new("x")), "corpus").unwrap(), PathBuf::from("x"));
        assert_eq!(r.path(None, "vq").unwrap_err().code, 2);
    }
}
