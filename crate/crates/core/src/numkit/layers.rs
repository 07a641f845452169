//! Named layers built from tape ops, plus their parameter initializers.
//!
//! A layer called `foo` owns `foo.weight` and (optionally) `foo.bias`.
//! Weights are fetched through a [`WeightSource`] so an adapter can splice
//! a low-rank delta in front of any layer without the model knowing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Where a model's forward pass gets its parameters from.
pub trait WeightSource<F: Real> {
    fn store(&self) -> &ParamStore<F>;

    /// Effective weight of layer `layer`.
    fn weight(&self, g: &mut Graph<F>, layer: &str) -> Result<Var> {
        g.param(self.store(), &format!("{layer}.weight"))
    }

    fn bias(&self, g: &mut Graph<F>, layer: &str) -> Result<Option<Var>> {
        let name = format!("{layer}.bias");
        if self.store().contains(&name) {
            Ok(Some(g.param(self.store(), &name)?))
        } else {
            Ok(None)
        }
    }

    fn param(&self, g: &mut Graph<F>, name: &str) -> Result<Var> {
        g.param(self.store(), name)
    }
}

impl<F: Real> WeightSource<F> for ParamStore<F> {
    fn store(&self) -> &ParamStore<F> {
        self
    }
}

pub fn linear<F: Real>(ws: &dyn WeightSource<F>, g: &mut Graph<F>, layer: &str, x: Var) -> Result<Var> {
    let w = ws.weight(g, layer)?;
    let b = ws.bias(g, layer)?;
    g.linear(x, w, b)
}

pub fn conv1d<F: Real>(
    ws: &dyn WeightSource<F>,
    g: &mut Graph<F>,
    layer: &str,
    x: Var,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let w = ws.weight(g, layer)?;
    let b = ws.bias(g, layer)?;
    g.conv1d(x, w, b, stride, groups)
}

/// Layer norm with learned `prefix.gain` / `prefix.shift`.
///
/// With `cond`, gain and shift become affine functions of the condition
/// vector through the projections `prefix.cond_gain` and `prefix.cond_shift`
/// (conditional layer norm). Zero projections reduce it to the plain form.
pub fn layer_norm<F: Real>(
    ws: &dyn WeightSource<F>,
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    cond: Option<Var>,
) -> Result<Var> {
    let xh = g.layer_norm(x, F::from_f64c(LN_EPS))?;
    let mut gain = ws.param(g, &format!("{prefix}.gain"))?;
    let mut shift = ws.param(g, &format!("{prefix}.shift"))?;
    if let Some(c) = cond {
        let dg = linear(ws, g, &format!("{prefix}.cond_gain"), c)?;
        let ds = linear(ws, g, &format!("{prefix}.cond_shift"), c)?;
        gain = g.add(dg, gain)?;
        shift = g.add(ds, shift)?;
    }
    let y = g.mul(xh, gain)?;
    g.add(y, shift)
}

/// Sizes of one conformer-style block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ff_mult: usize,
    /// Mask attention to past and present positions only.
    pub causal: bool,
    /// Include the depthwise convolution sublayer.
    pub conv: bool,
}

impl BlockConfig {
    pub fn conformer(d: usize, heads: usize, kernel: usize) -> Self {
        Self { d, heads, kernel, ff_mult: 2, causal: false, conv: true }
    }

    pub fn causal_transformer(d: usize, heads: usize) -> Self {
        Self { d, heads, kernel: 1, ff_mult: 2, causal: true, conv: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.conv && self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

/// Multi-head self-attention on an already normalized input.
pub fn self_attention<F: Real>(
    ws: &dyn WeightSource<F>,
    g: &mut Graph<F>,
    prefix: &str,
    h: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    let q = linear(ws, g, &format!("{prefix}.attn_q"), h)?;
    let k = linear(ws, g, &format!("{prefix}.attn_k"), h)?;
    let v = linear(ws, g, &format!("{prefix}.attn_v"), h)?;
    let dh = cfg.d / cfg.heads;
    let scale = F::from_f64c(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qi = g.slice_cols(q, i * dh, dh)?;
        let ki = g.slice_cols(k, i * dh, dh)?;
        let vi = g.slice_cols(v, i * dh, dh)?;
        let s = g.matmul(qi, ki, true)?;
        let s = g.scale(s, scale);
        let p = g.softmax(s, cfg.causal);
        heads.push(g.matmul(p, vi, false)?);
    }
    let o = g.concat_cols(&heads)?;
    linear(ws, g, &format!("{prefix}.attn_o"), o)
}

/// Pre-norm residual block: attention, depthwise convolution, feed-forward.
pub fn conformer_block<F: Real>(
    ws: &dyn WeightSource<F>,
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    cfg: &BlockConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.value(x).cols() != cfg.d {
        return Err(Error::Dimension(format!("{prefix}: input width {} vs {}", g.value(x).cols(), cfg.d)));
    }
    let h = layer_norm(ws, g, &format!("{prefix}.ln_attn"), x, None)?;
    let a = self_attention(ws, g, prefix, h, cfg)?;
    let mut x = g.add(x, a)?;

    if cfg.conv {
        let h = layer_norm(ws, g, &format!("{prefix}.ln_conv"), x, None)?;
        let h = linear(ws, g, &format!("{prefix}.conv_in"), h)?;
        let h = g.glu(h)?;
        let h = conv1d(ws, g, &format!("{prefix}.conv"), h, 1, cfg.d)?;
        let h = g.silu(h);
        let h = linear(ws, g, &format!("{prefix}.conv_out"), h)?;
        x = g.add(x, h)?;
    }

    let h = layer_norm(ws, g, &format!("{prefix}.ln_ffn"), x, None)?;
    let h = linear(ws, g, &format!("{prefix}.ffn_in"), h)?;
    let h = g.silu(h);
    let h = linear(ws, g, &format!("{prefix}.ffn_out"), h)?;
    g.add(x, h)
}

// ------------------------------------------------------------------- init

pub fn init_linear<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    layer: &str,
    out_dim: usize,
    in_dim: usize,
    std: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    let std = std.unwrap_or(1.0 / (in_dim.max(1) as f64).sqrt());
    let w = if std == 0.0 { Tensor::zeros(&[out_dim, in_dim]) } else { Tensor::randn(&[out_dim, in_dim], std, rng) };
    store.insert(format!("{layer}.weight"), w)?;
    store.insert(format!("{layer}.bias"), Tensor::zeros(&[out_dim]))
}

#[allow(clippy::too_many_arguments)]
pub fn init_conv<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    layer: &str,
    out_ch: usize,
    in_per_group: usize,
    kernel: usize,
    std: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    let std = std.unwrap_or(1.0 / ((in_per_group * kernel).max(1) as f64).sqrt());
    let shape = [out_ch, in_per_group, kernel];
    let w = if std == 0.0 { Tensor::zeros(&shape) } else { Tensor::randn(&shape, std, rng) };
    store.insert(format!("{layer}.weight"), w)?;
    store.insert(format!("{layer}.bias"), Tensor::zeros(&[out_ch]))
}

pub fn init_layer_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, n: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[n], F::one()))?;
    store.insert(format!("{prefix}.shift"), Tensor::zeros(&[n]))
}

/// Conditional layer norm: plain gain/shift plus zero-initialized projections.
pub fn init_cond_layer_norm<F: Real>(store: &mut ParamStore<F>, prefix: &str, n: usize, cond: usize) -> Result<()> {
    init_layer_norm(store, prefix, n)?;
    for proj in ["cond_gain", "cond_shift"] {
        store.insert(format!("{prefix}.{proj}.weight"), Tensor::zeros(&[n, cond]))?;
        store.insert(format!("{prefix}.{proj}.bias"), Tensor::zeros(&[n]))?;
    }
    Ok(())
}

/// Attention projections for [`self_attention`]. The key projection has no
/// bias: a shared offset on every key leaves the softmax unchanged, so such
/// a bias would never receive a gradient.
pub fn init_attention<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    out_std: Option<f64>,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.attn_q"), d, d, None, rng)?;
    let std = 1.0 / (d.max(1) as f64).sqrt();
    store.insert(format!("{prefix}.attn_k.weight"), Tensor::randn(&[d, d], std, rng))?;
    init_linear(store, &format!("{prefix}.attn_v"), d, d, None, rng)?;
    init_linear(store, &format!("{prefix}.attn_o"), d, d, out_std, rng)
}

/// Initialize a block. With `zero_out`, every residual output projection
/// starts at zero so the block is exactly the identity map.
pub fn init_block<F: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &BlockConfig,
    zero_out: bool,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    let out_std = if zero_out { Some(0.0) } else { Some(0.5 / (d as f64).sqrt()) };
    init_layer_norm(store, &format!("{prefix}.ln_attn"), d)?;
    init_attention(store, prefix, d, out_std, rng)?;
    if cfg.conv {
        init_layer_norm(store, &format!("{prefix}.ln_conv"), d)?;
        init_linear(store, &format!("{prefix}.conv_in"), 2 * d, d, None, rng)?;
        init_conv(store, &format!("{prefix}.conv"), d, 1, cfg.kernel, None, rng)?;
        init_linear(store, &format!("{prefix}.conv_out"), d, d, out_std, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln_ffn"), d)?;
    let ff = d * cfg.ff_mult;
    init_linear(store, &format!("{prefix}.ffn_in"), ff, d, None, rng)?;
    let ffn_out_std = if zero_out { Some(0.0) } else { Some(0.5 / (ff as f64).sqrt()) };
    init_linear(store, &format!("{prefix}.ffn_out"), d, ff, ffn_out_std, rng)
}
