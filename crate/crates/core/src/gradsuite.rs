//! The standard gradient-check suite: every tape op, every layer and the
//! MoLoRA factors, each checked against central differences over a run of
//! seeds. Shared by the test suite and the `grad-check` command.
//!
//! Models are written once, generic over the element type, so the checker
//! can re-run them in double-double precision when a 64-bit difference
//! quotient is too noisy to judge an entry.

use std::marker::PhantomData;

use serde::Serialize;

use crate::error::Result;
use crate::molora::{attach, Adapted, MoLoRAConfig, MoLoRASet};
use crate::numkit::dd::Dd;
use crate::numkit::gradcheck::{self, CheckModel};
use crate::numkit::layers::{self, BlockConfig, WeightSource};
use crate::numkit::{derive_seed, rng, Graph, ParamStore, Real, SeededRng, Tensor, Var};

/// Relative-error bound every case must stay under.
pub const SUITE_TOL: f64 = 1e-6;
/// Seeds per case in the standard run.
pub const SUITE_SEEDS: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Op,
    Layer,
    Factor,
}

/// Parameters plus a scalar model of them.
struct Setup {
    params: ParamStore<f64>,
    model: Box<dyn CheckModel>,
}

type SetupFn = Box<dyn Fn(&mut SeededRng) -> Result<Setup>>;

pub struct Case {
    pub name: &'static str,
    pub kind: CaseKind,
    setup: SetupFn,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    /// Entries settled by the double-double reference, over all seeds.
    pub refined: usize,
    pub failed_seeds: Vec<u64>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failed_seeds.is_empty()
    }
}

/// A model output before it is reduced to a scalar.
trait Body: 'static {
    fn eval<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>) -> Result<Var>;
}

/// Contracts the output with a fixed random tensor so every output element
/// contributes to the scalar being checked.
struct Projected<B> {
    body: B,
    proj: Tensor<f64>,
}

impl<B: Body> Projected<B> {
    fn setup(body: B, params: ParamStore<f64>, r: &mut SeededRng) -> Result<Setup> {
        let shape = {
            let mut g = Graph::new();
            let y = body.eval(&mut g, &params)?;
            g.value(y).shape().to_vec()
        };
        let proj = Tensor::randn(&shape, 1.0, r);
        Ok(Setup { params, model: Box::new(Projected { body, proj }) })
    }

    fn run<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>) -> Result<Var> {
        let y = self.body.eval(g, p)?;
        let pv = g.constant(self.proj.cast());
        let y = g.mul(y, pv)?;
        Ok(g.sum(y))
    }
}

impl<B: Body> CheckModel for Projected<B> {
    fn loss(&self, g: &mut Graph<f64>, p: &ParamStore<f64>) -> Result<Var> {
        self.run(g, p)
    }

    fn loss_dd(&self, g: &mut Graph<Dd>, p: &ParamStore<Dd>) -> Result<Var> {
        self.run(g, p)
    }
}

trait OpFn: 'static {
    fn apply<F: Real>(g: &mut Graph<F>, v: &[Var]) -> Result<Var>;
}

/// Inputs `in0..` are the parameters.
struct OpBody<O> {
    n: usize,
    op: PhantomData<O>,
}

impl<O: OpFn> Body for OpBody<O> {
    fn eval<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>) -> Result<Var> {
        let vs = (0..self.n).map(|i| g.param(p, &format!("in{i}"))).collect::<Result<Vec<_>>>()?;
        O::apply(g, &vs)
    }
}

fn op_case<O: OpFn>(name: &'static str, shapes: &'static [&'static [usize]]) -> Case {
    Case {
        name,
        kind: CaseKind::Op,
        setup: Box::new(move |r| {
            let mut params = ParamStore::new();
            for (i, s) in shapes.iter().enumerate() {
                params.insert(format!("in{i}"), Tensor::randn(s, 1.0, r))?;
            }
            Projected::setup(OpBody::<O> { n: shapes.len(), op: PhantomData }, params, r)
        }),
    }
}

macro_rules! op {
    ($name:literal, $shapes:expr, |$g:ident, $v:ident| $body:expr) => {{
        struct O;
        impl OpFn for O {
            fn apply<F: Real>($g: &mut Graph<F>, $v: &[Var]) -> Result<Var> {
                $body
            }
        }
        op_case::<O>($name, $shapes)
    }};
}

trait LayerFn: 'static {
    fn init(s: &mut ParamStore<f64>, r: &mut SeededRng) -> Result<()>;
    fn forward<F: Real>(ws: &dyn WeightSource<F>, g: &mut Graph<F>, x: Var) -> Result<Var>;
}

/// Move every bias, shift and gain off its initial value so no term is
/// trivially zero.
fn perturb(store: &mut ParamStore<f64>, r: &mut SeededRng) {
    for (name, p) in store.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".shift") || name.ends_with(".gain") {
            p.value.add_assign(&Tensor::randn(p.value.shape(), 0.3, r)).expect("same shape");
        }
    }
}

struct LayerBody<L> {
    x: Tensor<f64>,
    layer: PhantomData<L>,
}

impl<L: LayerFn> Body for LayerBody<L> {
    fn eval<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>) -> Result<Var> {
        let xv = g.constant(self.x.cast());
        L::forward(p, g, xv)
    }
}

/// Only the factors are checked; the frozen base enters as a constant.
struct FactorBody<L> {
    base: ParamStore<f64>,
    set: MoLoRASet<f64>,
    x: Tensor<f64>,
    layer: PhantomData<L>,
}

impl<L: LayerFn> Body for FactorBody<L> {
    fn eval<F: Real>(&self, g: &mut Graph<F>, p: &ParamStore<F>) -> Result<Var> {
        let base = self.base.cast::<F>();
        let mut set = self.set.cast::<F>();
        set.factors = p.clone();
        let xv = g.constant(self.x.cast());
        L::forward(&Adapted { base: &base, set: &set }, g, xv)
    }
}

fn layer_case<L: LayerFn>(name: &'static str, input: &'static [usize], ranks: Option<&'static [usize]>) -> Case {
    Case {
        name,
        kind: if ranks.is_some() { CaseKind::Factor } else { CaseKind::Layer },
        setup: Box::new(move |r| {
            let mut params = ParamStore::new();
            L::init(&mut params, r)?;
            perturb(&mut params, r);
            let Some(ranks) = ranks else {
                let x = Tensor::randn(input, 1.0, r);
                return Projected::setup(LayerBody::<L> { x, layer: PhantomData }, params, r);
            };
            let mut base = params;
            let set = attach(&mut base, &MoLoRAConfig::with_ranks(ranks), r)?;
            let mut factors = set.factors.clone();
            for (_, p) in factors.iter_mut() {
                p.value = Tensor::randn(p.value.shape(), 0.3, r);
            }
            let x = Tensor::randn(input, 1.0, r);
            Projected::setup(FactorBody::<L> { base, set, x, layer: PhantomData }, factors, r)
        }),
    }
}

macro_rules! layer {
    ($name:literal, $input:expr, $ranks:expr, init |$s:ident, $r:ident| $init:expr, forward |$ws:ident, $g:ident, $x:ident| $fwd:expr) => {{
        struct L;
        impl LayerFn for L {
            fn init($s: &mut ParamStore<f64>, $r: &mut SeededRng) -> Result<()> {
                $init
            }
            fn forward<F: Real>($ws: &dyn WeightSource<F>, $g: &mut Graph<F>, $x: Var) -> Result<Var> {
                $fwd
            }
        }
        layer_case::<L>($name, $input, $ranks)
    }};
}

const ATTN: BlockConfig = BlockConfig { d: 8, heads: 2, kernel: 1, ff_mult: 2, causal: false, conv: false };
const CONFORMER: BlockConfig = BlockConfig { d: 8, heads: 2, kernel: 3, ff_mult: 2, causal: false, conv: true };
const CAUSAL: BlockConfig = BlockConfig { d: 8, heads: 2, kernel: 1, ff_mult: 2, causal: true, conv: false };

/// Every case of the standard suite, in a fixed order.
pub fn cases() -> Vec<Case> {
    vec![
        // dense
        op!("linear", &[&[5, 3], &[4, 3], &[4]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        op!("matmul", &[&[5, 3], &[3, 4]], |g, v| g.matmul(v[0], v[1], false)),
        op!("matmul_t", &[&[5, 3], &[4, 3]], |g, v| g.matmul(v[0], v[1], true)),
        op!("conv", &[&[7, 3], &[4, 3, 3], &[4]], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 1)),
        op!("conv_stride", &[&[7, 3], &[4, 3, 5], &[4]], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1)),
        op!("conv_depthwise", &[&[6, 4], &[4, 1, 3], &[4]], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 1, 4)),
        op!("conv_grouped", &[&[6, 4], &[6, 2, 3]], |g, v| g.conv1d(v[0], v[1], None, 2, 2)),
        op!("lora_reshape", &[&[9, 6], &[6, 4]], |g, v| {
            let p = g.matmul(v[0], v[1], false)?;
            g.lora_reshape(p, 6, 2, 3, 2)
        }),
        // elementwise
        op!("add_bcast", &[&[4, 3], &[3]], |g, v| g.add(v[0], v[1])),
        op!("sub", &[&[4, 3], &[4, 3]], |g, v| g.sub(v[0], v[1])),
        op!("mul_bcast", &[&[4, 3], &[3]], |g, v| g.mul(v[0], v[1])),
        op!("scale", &[&[4, 3]], |g, v| Ok(g.scale(v[0], F::from_f64c(0.7)))),
        op!("layer_norm_op", &[&[4, 5]], |g, v| g.layer_norm(v[0], F::from_f64c(layers::LN_EPS))),
        op!("silu", &[&[4, 3]], |g, v| Ok(g.silu(v[0]))),
        op!("tanh", &[&[4, 3]], |g, v| Ok(g.tanh(v[0]))),
        op!("relu", &[&[4, 3]], |g, v| Ok(g.relu(v[0]))),
        op!("glu", &[&[4, 6]], |g, v| g.glu(v[0])),
        op!("softmax", &[&[4, 5]], |g, v| Ok(g.softmax(v[0], false))),
        op!("softmax_causal", &[&[4, 4]], |g, v| Ok(g.softmax(v[0], true))),
        // shape
        op!("slice_cols", &[&[4, 5]], |g, v| g.slice_cols(v[0], 1, 3)),
        op!("concat_cols", &[&[4, 2], &[4, 3]], |g, v| g.concat_cols(&[v[0], v[1]])),
        op!("slice_rows", &[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 3)),
        op!("concat_rows", &[&[2, 3], &[3, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        op!("mean_rows", &[&[5, 3]], |g, v| Ok(g.mean_rows(v[0]))),
        op!("broadcast_rows", &[&[1, 3]], |g, v| g.broadcast_rows(v[0], 4)),
        op!("repeat_rows", &[&[3, 2]], |g, v| g.repeat_rows(v[0], 3)),
        op!("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        op!("diff_rows", &[&[5, 3]], |g, v| g.diff_rows(v[0])),
        op!("reshape", &[&[4, 3]], |g, v| g.reshape(v[0], &[2, 6])),
        // losses
        op!("mse", &[&[4, 3], &[4, 3]], |g, v| g.mse(v[0], v[1])),
        op!("l1", &[&[4, 3], &[4, 3]], |g, v| g.l1(v[0], v[1])),
        op!("sq_dist", &[&[4, 3], &[4, 3]], |g, v| g.sq_dist_rows_mean(v[0], v[1])),
        op!("cross_entropy", &[&[4, 5]], |g, v| g.cross_entropy(v[0], &[1, 4, 0, 1])),
        op!("sum", &[&[4, 3]], |g, v| Ok(g.sum(v[0]))),
        // layers
        layer!("layer.linear", &[5, 3], None,
            init |s, r| layers::init_linear(s, "l", 4, 3, None, r),
            forward |ws, g, x| layers::linear(ws, g, "l", x)),
        layer!("layer.conv1d", &[7, 3], None,
            init |s, r| layers::init_conv(s, "c", 4, 3, 3, None, r),
            forward |ws, g, x| layers::conv1d(ws, g, "c", x, 1, 1)),
        layer!("layer.conv1d_strided_grouped", &[9, 4], None,
            init |s, r| layers::init_conv(s, "c", 4, 2, 5, None, r),
            forward |ws, g, x| layers::conv1d(ws, g, "c", x, 2, 2)),
        layer!("layer.layer_norm", &[4, 5], None,
            init |s, _r| layers::init_layer_norm(s, "n", 5),
            forward |ws, g, x| layers::layer_norm(ws, g, "n", x, None)),
        layer!("layer.cond_layer_norm", &[1, 8], None,
            init |s, r| {
                layers::init_cond_layer_norm(s, "n", 5, 3)?;
                for proj in ["cond_gain", "cond_shift"] {
                    *s.get_mut(&format!("n.{proj}.weight"))? = Tensor::randn(&[5, 3], 0.5, r);
                }
                Ok(())
            },
            // one frame of features followed by its condition vector
            forward |ws, g, x| {
                let h = g.slice_cols(x, 0, 5)?;
                let c = g.slice_cols(x, 5, 3)?;
                layers::layer_norm(ws, g, "n", h, Some(c))
            }),
        layer!("layer.self_attention", &[5, 8], None,
            init |s, r| layers::init_attention(s, "a", 8, None, r),
            forward |ws, g, x| layers::self_attention(ws, g, "a", x, &ATTN)),
        layer!("layer.conformer_block", &[6, 8], None,
            init |s, r| layers::init_block(s, "b", &CONFORMER, false, r),
            forward |ws, g, x| layers::conformer_block(ws, g, "b", x, &CONFORMER)),
        layer!("layer.causal_block", &[6, 8], None,
            init |s, r| layers::init_block(s, "b", &CAUSAL, false, r),
            forward |ws, g, x| layers::conformer_block(ws, g, "b", x, &CAUSAL)),
        // adapters
        layer!("molora.linear_conv", &[5, 6], Some(&[2, 4]),
            init |s, r| {
                layers::init_linear(s, "enc", 8, 6, None, r)?;
                layers::init_conv(s, "dec", 8, 4, 3, None, r)
            },
            forward |ws, g, x| {
                let h = layers::linear(ws, g, "enc", x)?;
                let h = g.tanh(h);
                let h = g.slice_cols(h, 0, 4)?;
                layers::conv1d(ws, g, "dec", h, 1, 1)
            }),
        layer!("molora.conformer_block", &[6, 8], Some(&[2, 4]),
            init |s, r| layers::init_block(s, "b", &CONFORMER, false, r),
            forward |ws, g, x| layers::conformer_block(ws, g, "b", x, &CONFORMER)),
    ]
}

/// Check one case on seeds `0..seeds`.
pub fn run_case(case: &Case, seeds: u64, tol: f64) -> Result<CaseResult> {
    let mut res = CaseResult {
        name: case.name.to_string(),
        kind: case.kind,
        seeds,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        refined: 0,
        failed_seeds: Vec::new(),
    };
    for seed in 0..seeds {
        let mut r = rng(derive_seed(1000 + seed, 0x6C5));
        let setup = (case.setup)(&mut r)?;
        let rep = gradcheck::grad_check_refined(setup.model.as_ref(), &setup.params, tol)?;
        res.refined += rep.tensors.iter().map(|t| t.refined).sum::<usize>();
        if let Some(w) = rep.worst() {
            if w.max_rel_err > res.max_rel_err || res.worst_tensor.is_empty() {
                res.max_rel_err = w.max_rel_err;
                res.worst_tensor = w.name.clone();
            }
        }
        if !rep.passed() {
            res.failed_seeds.push(seed);
        }
    }
    Ok(res)
}

/// Run every case of the suite.
pub fn run_suite(seeds: u64, tol: f64) -> Result<Vec<CaseResult>> {
    cases().iter().map(|c| run_case(c, seeds, tol)).collect()
}
