//! Mixtures of low-rank factor pairs of different ranks, spliced in front of
//! the linear and 1-D convolution weights of a frozen model.
//!
//! For a weight of shape `m×n×k` (linear layers are `k = 1`) and rank `r`,
//! the pair is `B: (m/r·k)×(r·k)` and `A: (r·k)×(n·r)`; their product is
//! rearranged into an `m×n×k` delta. The effective weight is
//! `W0 + Σ_i s_i · reshape(B_i·A_i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::layers::WeightSource;
use crate::numkit::{lora_permute, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoLoRAConfig {
    pub ranks: Vec<usize>,
    /// Per-rank scale; empty means 1.0 for every rank.
    #[serde(default)]
    pub scales: Vec<f64>,
    /// Layers whose name starts with any of these prefixes are skipped.
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for MoLoRAConfig {
    fn default() -> Self {
        Self { ranks: vec![4, 8, 16, 32], scales: Vec::new(), exclude: Vec::new(), init_std: default_init_std() }
    }
}

impl MoLoRAConfig {
    pub fn with_ranks(ranks: &[usize]) -> Self {
        Self { ranks: ranks.to_vec(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &r) in self.ranks.iter().enumerate() {
            if r == 0 {
                return Err(Error::Config("ranks: rank sizes must be positive".into()));
            }
            if self.ranks[..i].contains(&r) {
                return Err(Error::Config(format!("ranks: rank {r} listed twice")));
            }
        }
        if !self.scales.is_empty() && self.scales.len() != self.ranks.len() {
            return Err(Error::Config(format!(
                "scales: {} values for {} ranks",
                self.scales.len(),
                self.ranks.len()
            )));
        }
        Ok(())
    }

    pub fn scale(&self, i: usize) -> f64 {
        self.scales.get(i).copied().unwrap_or(1.0)
    }

    pub fn targets(&self, layer: &str) -> bool {
        !self.exclude.iter().any(|p| layer.starts_with(p.as_str()))
    }
}

/// Geometry of one adapted layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptedLayer {
    pub layer: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Whether the base weight is 2-D (linear) rather than `m×n×k`.
    pub linear: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoLoRASet<F> {
    pub ranks: Vec<usize>,
    pub scales: Vec<f64>,
    pub layers: Vec<AdaptedLayer>,
    /// Factor tensors named `<layer>.molora.<i>.A` / `.B`.
    pub factors: ParamStore<F>,
    merged: bool,
}

pub fn factor_name(layer: &str, i: usize, which: char) -> String {
    format!("{layer}.molora.{i}.{which}")
}

/// Layers of `store` a config can adapt: every `X.weight` with 2 or 3 dims.
pub fn adaptable_layers<F: Real>(store: &ParamStore<F>, cfg: &MoLoRAConfig) -> Vec<AdaptedLayer> {
    store
        .iter()
        .filter_map(|(name, p)| {
            let layer = name.strip_suffix(".weight")?;
            if !cfg.targets(layer) {
                return None;
            }
            match *p.value.shape() {
                [m, n] => Some(AdaptedLayer { layer: layer.to_string(), m, n, k: 1, linear: true }),
                [m, n, k] => Some(AdaptedLayer { layer: layer.to_string(), m, n, k, linear: false }),
                _ => None,
            }
        })
        .collect()
}

/// Freeze every base parameter and create zero-delta factors for each
/// targeted layer.
pub fn attach<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    cfg: &MoLoRAConfig,
    rng: &mut R,
) -> Result<MoLoRASet<F>> {
    cfg.validate()?;
    let layers = adaptable_layers(store, cfg);
    for l in &layers {
        for &r in &cfg.ranks {
            if l.m % r != 0 {
                return Err(Error::Config(format!(
                    "rank {r} does not divide output size {} of layer {}",
                    l.m, l.layer
                )));
            }
        }
    }
    let mut factors = ParamStore::new();
    for l in &layers {
        for (i, &r) in cfg.ranks.iter().enumerate() {
            let b = Tensor::zeros(&[l.m / r * l.k, r * l.k]);
            let a = Tensor::randn(&[r * l.k, l.n * r], cfg.init_std, rng);
            factors.insert(factor_name(&l.layer, i, 'A'), a)?;
            factors.insert(factor_name(&l.layer, i, 'B'), b)?;
        }
    }
    store.set_trainable(false);
    Ok(MoLoRASet {
        ranks: cfg.ranks.clone(),
        scales: (0..cfg.ranks.len()).map(|i| cfg.scale(i)).collect(),
        layers,
        factors,
        merged: false,
    })
}

impl<F: Real> MoLoRASet<F> {
    /// Rebuild a set from stored factors, e.g. after loading a checkpoint.
    pub fn from_factors(base: &ParamStore<F>, cfg: &MoLoRAConfig, factors: ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        let layers: Vec<_> = adaptable_layers(base, cfg)
            .into_iter()
            .filter(|l| factors.contains(&factor_name(&l.layer, 0, 'A')))
            .collect();
        for l in &layers {
            for (i, &r) in cfg.ranks.iter().enumerate() {
                let a = factors.get(&factor_name(&l.layer, i, 'A'))?;
                let b = factors.get(&factor_name(&l.layer, i, 'B'))?;
                if a.shape() != [r * l.k, l.n * r] || b.shape() != [l.m / r * l.k, r * l.k] {
                    return Err(Error::State(format!("factor shapes for {} do not match rank {r}", l.layer)));
                }
            }
        }
        Ok(Self {
            ranks: cfg.ranks.clone(),
            scales: (0..cfg.ranks.len()).map(|i| cfg.scale(i)).collect(),
            layers,
            factors,
            merged: false,
        })
    }

    /// The same set at another precision.
    pub fn cast<G: Real>(&self) -> MoLoRASet<G> {
        MoLoRASet {
            ranks: self.ranks.clone(),
            scales: self.scales.clone(),
            layers: self.layers.clone(),
            factors: self.factors.cast(),
            merged: self.merged,
        }
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn layer(&self, name: &str) -> Option<&AdaptedLayer> {
        self.layers.iter().find(|l| l.layer == name)
    }

    /// Number of factor elements across all layers and ranks.
    pub fn count_trainable(&self) -> usize {
        self.factors.num_elements()
    }

    /// `Σ_i s_i · reshape(B_i·A_i)` for one layer, in the base weight's shape.
    pub fn delta_weight(&self, layer: &str) -> Result<Tensor<F>> {
        let l = self.layer(layer).ok_or_else(|| Error::State(format!("layer {layer} is not adapted")))?;
        let shape: Vec<usize> = if l.linear { vec![l.m, l.n] } else { vec![l.m, l.n, l.k] };
        let mut delta = Tensor::zeros(&shape);
        for (i, &r) in self.ranks.iter().enumerate() {
            let b = self.factors.get(&factor_name(layer, i, 'B'))?;
            let a = self.factors.get(&factor_name(layer, i, 'A'))?;
            let p = b.matmul(a)?;
            let mut d = Tensor::new(shape.clone(), lora_permute(p.data(), l.m, l.n, l.k, r))?;
            d.scale_inplace(F::from_f64c(self.scales[i]));
            delta.add_assign(&d)?;
        }
        Ok(delta)
    }
}

/// Bake the deltas into `base`. The factors are kept so the merge can be
/// undone.
pub fn merge<F: Real>(base: &mut ParamStore<F>, set: &mut MoLoRASet<F>) -> Result<()> {
    if set.merged {
        return Err(Error::State("adapters are already merged".into()));
    }
    for l in &set.layers {
        let d = set.delta_weight(&l.layer)?;
        base.get_mut(&format!("{}.weight", l.layer))?.add_assign(&d)?;
    }
    set.merged = true;
    base.set_trainable(true);
    Ok(())
}

/// Subtract the same deltas again and re-freeze the base.
pub fn unmerge<F: Real>(base: &mut ParamStore<F>, set: &mut MoLoRASet<F>) -> Result<()> {
    if !set.merged {
        return Err(Error::State("adapters are not merged".into()));
    }
    for l in &set.layers {
        let d = set.delta_weight(&l.layer)?;
        base.get_mut(&format!("{}.weight", l.layer))?.sub_assign(&d)?;
    }
    set.merged = false;
    base.set_trainable(false);
    Ok(())
}

/// A frozen base model seen through its adapters.
pub struct Adapted<'a, F> {
    pub base: &'a ParamStore<F>,
    pub set: &'a MoLoRASet<F>,
}

impl<'a, F: Real> WeightSource<F> for Adapted<'a, F> {
    fn store(&self) -> &ParamStore<F> {
        self.base
    }

    fn weight(&self, g: &mut Graph<F>, layer: &str) -> Result<Var> {
        let w0 = g.param(self.base, &format!("{layer}.weight"))?;
        if self.set.merged {
            return Ok(w0);
        }
        let Some(l) = self.set.layer(layer) else { return Ok(w0) };
        let mut w = w0;
        for (i, &r) in self.set.ranks.iter().enumerate() {
            let b = g.param(&self.set.factors, &factor_name(layer, i, 'B'))?;
            let a = g.param(&self.set.factors, &factor_name(layer, i, 'A'))?;
            let p = g.matmul(b, a, false)?;
            let mut d = g.lora_reshape(p, l.m, l.n, l.k, r)?;
            if self.set.scales[i] != 1.0 {
                d = g.scale(d, F::from_f64c(self.set.scales[i]));
            }
            w = g.add(w, d)?;
        }
        Ok(w)
    }
}
