//! Reverse-mode tape over the small set of layer primitives the models need.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Values are computed eagerly; [`Graph::backward`] walks the tape once in
//! reverse. Parameters enter the tape by name through [`Graph::param`] and
//! their gradients come back keyed by that name.

use super::{Grads, ParamStore, Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, groups: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: F },
    LayerNorm { x: Var, rstd: Vec<F> },
    Silu { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Glu { x: Var },
    Softmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    MeanRows { x: Var },
    BroadcastRows { x: Var },
    RepeatRows { x: Var, factor: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    DiffRows { x: Var },
    LoraReshape { x: Var, m: usize, n: usize, k: usize, r: usize },
    Reshape { x: Var },
    Mse { a: Var, b: Var },
    L1 { a: Var, b: Var },
    SqDistRowsMean { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<String>,
}

/// Result of a backward pass.
pub struct Gradients<F> {
    per_node: Vec<Option<Tensor<F>>>,
    params: Grads<F>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to an arbitrary tape node, if it was tracked.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &Grads<F> {
        &self.params
    }

    pub fn into_params(self) -> Grads<F> {
        self.params
    }
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn rc<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Constant leaf: no gradient flows into it. Also serves as stop-gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked and readable through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let p = store
            .param(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad: p.trainable,
            param: p.trainable.then(|| name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Copy of `x` cut off from the gradient.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    // ---------------------------------------------------------------- ops

    /// `y[t] = W·x[t] + b` with `x: T×n`, `W: m×n`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, n) = rc(xv);
        if wv.shape().len() != 2 || wv.shape()[1] != n {
            return Err(dim_err!("linear: x {:?} vs W {:?}", xv.shape(), wv.shape()));
        }
        let m = wv.shape()[0];
        let mut out = vec![F::zero(); t * m];
        F::gemm(t, n, m, xv.data(), n as isize, 1, wv.data(), 1, n as isize, F::zero(), &mut out, m as isize, 1);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(dim_err!("linear: bias {:?} for {} outputs", bv.shape(), m));
            }
            for row in out.chunks_mut(m) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o = *o + bb;
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(Tensor::new(vec![t, m], out)?, Op::Linear { x, w, b }, &ins))
    }

    /// Matrix product `a·b` (or `a·bᵀ` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = rc(av);
        let (br, bc) = rc(bv);
        let (q2, r) = if trans_b { (bc, br) } else { (br, bc) };
        if q != q2 {
            return Err(dim_err!("matmul: {:?} vs {:?} (trans_b={})", av.shape(), bv.shape(), trans_b));
        }
        let mut out = vec![F::zero(); p * r];
        let (rsb, csb) = if trans_b { (1, q as isize) } else { (r as isize, 1) };
        F::gemm(p, q, r, av.data(), q as isize, 1, bv.data(), rsb, csb, F::zero(), &mut out, r as isize, 1);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Same-padded 1-D cross-correlation over time.
    ///
    /// `x: T×n`, `w: m × (n/groups) × k` with odd `k`. Output has
    /// `ceil(T/stride)` frames. Zero padding of `(k-1)/2` frames on the left.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, n) = rc(xv);
        if wv.shape().len() != 3 {
            return Err(dim_err!("conv1d: weight must be 3-D, got {:?}", wv.shape()));
        }
        let (m, npg, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d: kernel size {k} must be odd")));
        }
        if stride == 0 || groups == 0 || n % groups != 0 || m % groups != 0 || npg * groups != n {
            return Err(dim_err!(
                "conv1d: x {:?}, weight {:?}, stride {}, groups {}",
                xv.shape(),
                wv.shape(),
                stride,
                groups
            ));
        }
        let t_out = t.div_ceil(stride);
        let mut out = vec![F::zero(); t_out * m];
        if groups == 1 {
            let cols = im2col(xv.data(), t, n, k, stride, t_out);
            let nk = n * k;
            F::gemm(t_out, nk, m, &cols, nk as isize, 1, wv.data(), 1, nk as isize, F::zero(), &mut out, m as isize, 1);
        } else {
            let pad = (k - 1) / 2;
            let mpg = m / groups;
            let (xd, wd) = (xv.data(), wv.data());
            for to in 0..t_out {
                for o in 0..m {
                    let g = o / mpg;
                    let mut acc = F::zero();
                    for j in 0..k {
                        let ti = (to * stride + j) as isize - pad as isize;
                        if ti < 0 || ti as usize >= t {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..npg {
                            acc = acc + wd[(o * npg + ci) * k + j] * xd[ti * n + g * npg + ci];
                        }
                    }
                    out[to * m + o] = acc;
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(dim_err!("conv1d: bias {:?} for {} outputs", bv.shape(), m));
            }
            for row in out.chunks_mut(m) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o = *o + bb;
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(Tensor::new(vec![t_out, m], out)?, Op::Conv1d { x, w, b, stride, groups }, &ins))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() == bv.len() || bv.len() == av.cols() {
            Ok(())
        } else {
            Err(dim_err!("{what}: {:?} vs {:?}", av.shape(), bv.shape()))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    /// Elementwise `a + b`; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let v = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "sub")?;
        let v = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let v = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale { x, s }, &[x])
    }

    /// Per-row zero-mean, unit-variance normalization (population variance).
    pub fn layer_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let (t, n) = rc(xv);
        if n == 0 {
            return Err(Error::Config("layer_norm over zero features".into()));
        }
        let nf = F::from_usize(n).unwrap();
        let mut out = vec![F::zero(); t * n];
        let mut rstd = Vec::with_capacity(t);
        for i in 0..t {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, rstd }, &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push(v, Op::Silu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(F::zero()));
        self.push(v, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.push(v, Op::Tanh { x }, &[x])
    }

    /// Gated linear unit over the column halves: `a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, c2) = rc(xv);
        if c2 % 2 != 0 {
            return Err(dim_err!("glu needs an even width, got {}", c2));
        }
        let c = c2 / 2;
        let mut out = vec![F::zero(); t * c];
        for i in 0..t {
            let row = xv.row(i);
            for j in 0..c {
                out[i * c + j] = row[j] * sigmoid(row[c + j]);
            }
        }
        Ok(self.push(Tensor::new(vec![t, c], out)?, Op::Glu { x }, &[x]))
    }

    /// Row softmax. With `causal`, column `j > i` of row `i` gets weight 0.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (t, n) = rc(xv);
        let mut out = vec![F::zero(); t * n];
        for i in 0..t {
            let row = xv.row(i);
            let lim = if causal { (i + 1).min(n) } else { n };
            let mx = row[..lim].iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for j in 0..lim {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                s = s + e;
            }
            for j in 0..lim {
                out[i * n + j] = out[i * n + j] / s;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("shape"), Op::Softmax { x }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (t, n) = rc(xv);
        if start + len > n {
            return Err(dim_err!("slice_cols {}..{} of {}", start, start + len, n));
        }
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![t, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let t = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != t {
                return Err(dim_err!("concat_cols: {} rows vs {}", pv.rows(), t));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(t * total);
        for i in 0..t {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![t, total], out)?, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        let c = v.cols();
        let v = v.reshape(&[len, c])?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(dim_err!("concat_rows: {} cols vs {}", pv.cols(), c));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Temporal mean: `T×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_rows();
        self.push(v, Op::MeanRows { x }, &[x])
    }

    /// Tile a single row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(dim_err!("broadcast_rows needs one row, got {:?}", xv.shape()));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(xv.data());
        }
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::BroadcastRows { x }, &[x]))
    }

    /// Nearest-frame upsampling: every row repeated `factor` times.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = rc(xv);
        let mut out = Vec::with_capacity(t * factor * c);
        for i in 0..t {
            for _ in 0..factor {
                out.extend_from_slice(xv.row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![t * factor, c], out)?, Op::RepeatRows { x, factor }, &[x]))
    }

    /// Embedding lookup: rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, c) = rc(tv);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= v {
                return Err(Error::Input(format!("index {i} out of range for {v} rows")));
            }
            out.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { table, idx: idx.to_vec() },
            &[table],
        ))
    }

    /// Forward difference along time: `y[t] = x[t+1] - x[t]`, one row shorter.
    pub fn diff_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, c) = rc(xv);
        if t < 2 {
            return Err(dim_err!("diff_rows needs at least 2 frames, got {}", t));
        }
        let mut out = Vec::with_capacity((t - 1) * c);
        for i in 0..t - 1 {
            for j in 0..c {
                out.push(xv.at(i + 1, j) - xv.at(i, j));
            }
        }
        Ok(self.push(Tensor::new(vec![t - 1, c], out)?, Op::DiffRows { x }, &[x]))
    }

    /// Reinterpret a low-rank product `(m/r·k) × (n·r)` as a weight `m×n×k`.
    ///
    /// Rows index `(a, j)` with `a < m/r`, `j < k`; columns index `(c, q)`
    /// with `c < n`, `q < r`. Element lands at `[a·r + q, c, j]`. With
    /// `k == 1` the result is a 2-D `m×n` matrix.
    pub fn lora_reshape(&mut self, x: Var, m: usize, n: usize, k: usize, r: usize) -> Result<Var> {
        let xv = self.value(x);
        if r == 0 || !m.is_multiple_of(r) || xv.rows() != (m / r) * k || xv.cols() != n * r {
            return Err(dim_err!("lora_reshape: {:?} into {}×{}×{} at rank {}", xv.shape(), m, n, k, r));
        }
        let out = lora_permute(xv.data(), m, n, k, r);
        let shape = if k == 1 { vec![m, n] } else { vec![m, n, k] };
        Ok(self.push(Tensor::new(shape, out)?, Op::LoraReshape { x, m, n, k, r }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { x }, &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(dim_err!("{what}: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        Ok(())
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = F::from_usize(av.len().max(1)).unwrap();
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, &[a, b]))
    }

    /// Mean absolute error over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = F::from_usize(av.len().max(1)).unwrap();
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y).abs()).sum::<F>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L1 { a, b }, &[a, b]))
    }

    /// Mean over rows of the squared L2 distance between matching rows.
    pub fn sq_dist_rows_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sq_dist_rows_mean")?;
        let (av, bv) = (self.value(a), self.value(b));
        let r = F::from_usize(av.rows().max(1)).unwrap();
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>() / r;
        Ok(self.push(Tensor::scalar(s), Op::SqDistRowsMean { a, b }, &[a, b]))
    }

    /// Mean next-token cross-entropy of `logits: T×V` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = rc(lv);
        if targets.len() != t {
            return Err(dim_err!("cross_entropy: {} targets for {} rows", targets.len(), t));
        }
        let mut probs = vec![F::zero(); t * v];
        let mut loss = F::zero();
        for (i, &tg) in targets.iter().enumerate() {
            if tg >= v {
                return Err(Error::Input(format!("target {tg} out of range for {v} classes")));
            }
            let row = lv.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + s.ln();
            loss = loss + lse - row[tg];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = loss / F::from_usize(t.max(1)).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        let mut params = Grads::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                match params.get_mut(name) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients { per_node: grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, g.into_data()).expect("grad shape"));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reduce a full-shape gradient onto a possibly row-broadcast operand.
    fn reduce_to(&self, v: Var, full: Vec<F>) -> Tensor<F> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        let bl = self.nodes[v.0].value.len();
        if bl == full.len() {
            return Tensor::new(shape, full).expect("shape");
        }
        let mut out = vec![F::zero(); bl];
        for (i, g) in full.into_iter().enumerate() {
            out[i % bl] = out[i % bl] + g;
        }
        Tensor::new(shape, out).expect("shape")
    }

    fn backward_node(&self, node: &Node<F>, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let y = &node.value;
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, n) = rc(xv);
                let m = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); t * n];
                    F::gemm(t, m, n, dyd, m as isize, 1, wv.data(), n as isize, 1, F::zero(), &mut dx, n as isize, 1);
                    self.acc(grads, *x, Tensor::new(vec![t, n], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); m * n];
                    F::gemm(m, t, n, dyd, 1, m as isize, xv.data(), n as isize, 1, F::zero(), &mut dw, n as isize, 1);
                    self.acc(grads, *w, Tensor::new(vec![m, n], dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = col_sum(dyd, t, m);
                        self.acc(grads, *b, Tensor::new(vec![m], db)?);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = rc(av);
                let r = y.cols();
                if self.needs(*a) {
                    // da = dy · op(b)ᵀ
                    let (rsb, csb) = if *trans_b { (q as isize, 1) } else { (1, r as isize) };
                    let mut da = vec![F::zero(); p * q];
                    F::gemm(p, r, q, dyd, r as isize, 1, bv.data(), rsb, csb, F::zero(), &mut da, q as isize, 1);
                    self.acc(grads, *a, Tensor::new(vec![p, q], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); q * r];
                    if *trans_b {
                        // db[r×q] = dyᵀ · a
                        F::gemm(r, p, q, dyd, 1, r as isize, av.data(), q as isize, 1, F::zero(), &mut db, q as isize, 1);
                    } else {
                        // db[q×r] = aᵀ · dy
                        F::gemm(q, p, r, av.data(), 1, q as isize, dyd, r as isize, 1, F::zero(), &mut db, r as isize, 1);
                    }
                    let shape = bv.shape().to_vec();
                    self.acc(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Conv1d { x, w, b, stride, groups } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, n) = rc(xv);
                let (m, npg, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let t_out = y.rows();
                if *groups == 1 {
                    let nk = n * k;
                    if self.needs(*w) {
                        let cols = im2col(xv.data(), t, n, k, *stride, t_out);
                        let mut dw = vec![F::zero(); m * nk];
                        F::gemm(m, t_out, nk, dyd, 1, m as isize, &cols, nk as isize, 1, F::zero(), &mut dw, nk as isize, 1);
                        self.acc(grads, *w, Tensor::new(vec![m, n, k], dw)?);
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![F::zero(); t_out * nk];
                        F::gemm(t_out, m, nk, dyd, m as isize, 1, wv.data(), nk as isize, 1, F::zero(), &mut dcols, nk as isize, 1);
                        let dx = col2im(&dcols, t, n, k, *stride, t_out);
                        self.acc(grads, *x, Tensor::new(vec![t, n], dx)?);
                    }
                } else {
                    let pad = (k - 1) / 2;
                    let mpg = m / groups;
                    let (xd, wd) = (xv.data(), wv.data());
                    let mut dx = vec![F::zero(); t * n];
                    let mut dw = vec![F::zero(); m * npg * k];
                    for to in 0..t_out {
                        for o in 0..m {
                            let g = dyd[to * m + o];
                            let grp = o / mpg;
                            for j in 0..k {
                                let ti = (to * stride + j) as isize - pad as isize;
                                if ti < 0 || ti as usize >= t {
                                    continue;
                                }
                                let ti = ti as usize;
                                for ci in 0..npg {
                                    let xi = ti * n + grp * npg + ci;
                                    let wi = (o * npg + ci) * k + j;
                                    dw[wi] = dw[wi] + g * xd[xi];
                                    dx[xi] = dx[xi] + g * wd[wi];
                                }
                            }
                        }
                    }
                    if self.needs(*w) {
                        self.acc(grads, *w, Tensor::new(vec![m, npg, k], dw)?);
                    }
                    if self.needs(*x) {
                        self.acc(grads, *x, Tensor::new(vec![t, n], dx)?);
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(grads, *b, Tensor::new(vec![m], col_sum(dyd, t_out, m))?);
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, dy.clone());
                if self.needs(*b) {
                    let g = self.reduce_to(*b, dyd.to_vec());
                    self.acc(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, dy.clone());
                if self.needs(*b) {
                    let g = self.reduce_to(*b, dyd.iter().map(|&v| -v).collect());
                    self.acc(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.len();
                if self.needs(*a) {
                    let da = dyd.iter().enumerate().map(|(i, &g)| g * bv.data()[i % bl]).collect();
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.needs(*b) {
                    let full = dyd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    let g = self.reduce_to(*b, full);
                    self.acc(grads, *b, g);
                }
            }
            Op::Scale { x, s } => {
                self.acc(grads, *x, dy.map(|g| g * *s));
            }
            Op::LayerNorm { x, rstd } => {
                let (t, n) = rc(y);
                let nf = F::from_usize(n).unwrap();
                let mut dx = vec![F::zero(); t * n];
                for i in 0..t {
                    let xh = y.row(i);
                    let g = &dyd[i * n..(i + 1) * n];
                    let mg = g.iter().copied().sum::<F>() / nf;
                    let mgx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    for j in 0..n {
                        dx[i * n + j] = rstd[i] * (g[j] - mg - xh[j] * mgx);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dyd)
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * s * (F::one() + v * (F::one() - s))
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dyd)
                    .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Tanh { x } => {
                let dx = y.data().iter().zip(dyd).map(|(&v, &g)| g * (F::one() - v * v)).collect();
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Glu { x } => {
                let xv = self.value(*x);
                let (t, c2) = rc(xv);
                let c = c2 / 2;
                let mut dx = vec![F::zero(); t * c2];
                for i in 0..t {
                    let row = xv.row(i);
                    for j in 0..c {
                        let s = sigmoid(row[c + j]);
                        let g = dyd[i * c + j];
                        dx[i * c2 + j] = g * s;
                        dx[i * c2 + c + j] = g * row[j] * s * (F::one() - s);
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Softmax { x } => {
                let (t, n) = rc(y);
                let mut dx = vec![F::zero(); t * n];
                for i in 0..t {
                    let yr = y.row(i);
                    let g = &dyd[i * n..(i + 1) * n];
                    let dot = yr.iter().zip(g).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (g[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (t, n) = rc(xv);
                let len = y.cols();
                let mut dx = vec![F::zero(); t * n];
                for i in 0..t {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&dyd[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ConcatCols { parts } => {
                let (t, total) = rc(y);
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(t * pc);
                        for i in 0..t {
                            dp.extend_from_slice(&dyd[i * total + off..i * total + off + pc]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.acc(grads, p, Tensor::new(shape, dp)?);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                dx[start * c..start * c + dyd.len()].copy_from_slice(dyd);
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let l = pv.len();
                    if self.needs(p) {
                        self.acc(grads, p, Tensor::new(pv.shape().to_vec(), dyd[off..off + l].to_vec())?);
                    }
                    off += l;
                }
            }
            Op::MeanRows { x } => {
                let xv = self.value(*x);
                let (t, c) = rc(xv);
                let inv = F::one() / F::from_usize(t.max(1)).unwrap();
                let mut dx = Vec::with_capacity(t * c);
                for _ in 0..t {
                    dx.extend(dyd.iter().map(|&g| g * inv));
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::BroadcastRows { x } => {
                let xv = self.value(*x);
                let (t, c) = rc(y);
                let g = col_sum(dyd, t, c);
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), g)?);
            }
            Op::RepeatRows { x, factor } => {
                let xv = self.value(*x);
                let (t, c) = rc(xv);
                let mut dx = vec![F::zero(); t * c];
                for i in 0..t {
                    for f in 0..*factor {
                        let src = (i * factor + f) * c;
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + dyd[src + j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::GatherRows { table, idx } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut dt = vec![F::zero(); tv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] = dt[i * c + j] + dyd[r * c + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::DiffRows { x } => {
                let xv = self.value(*x);
                let (t, c) = rc(xv);
                let mut dx = vec![F::zero(); t * c];
                for i in 0..t - 1 {
                    for j in 0..c {
                        let g = dyd[i * c + j];
                        dx[(i + 1) * c + j] = dx[(i + 1) * c + j] + g;
                        dx[i * c + j] = dx[i * c + j] - g;
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::LoraReshape { x, m, n, k, r } => {
                let xv = self.value(*x);
                let dx = lora_unpermute(dyd, *m, *n, *k, *r);
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::new(shape, dyd.to_vec())?);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = dyd[0] * F::from_f64c(2.0) / F::from_usize(av.len().max(1)).unwrap();
                let d: Vec<F> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * s).collect();
                self.loss_pair_grads(*a, *b, d, grads)?;
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = dyd[0] / F::from_usize(av.len().max(1)).unwrap();
                let d: Vec<F> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| {
                        let e = x - y;
                        if e > F::zero() {
                            s
                        } else if e < F::zero() {
                            -s
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.loss_pair_grads(*a, *b, d, grads)?;
            }
            Op::SqDistRowsMean { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = dyd[0] * F::from_f64c(2.0) / F::from_usize(av.rows().max(1)).unwrap();
                let d: Vec<F> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * s).collect();
                self.loss_pair_grads(*a, *b, d, grads)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (t, v) = rc(lv);
                let s = dyd[0] / F::from_usize(t.max(1)).unwrap();
                let mut d: Vec<F> = probs.iter().map(|&p| p * s).collect();
                for (i, &tg) in targets.iter().enumerate() {
                    d[i * v + tg] = d[i * v + tg] - s;
                }
                self.acc(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.shape(), dyd[0]));
            }
        }
        Ok(())
    }

    fn loss_pair_grads(&self, a: Var, b: Var, d: Vec<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        if self.needs(b) {
            let shape = self.value(b).shape().to_vec();
            self.acc(grads, b, Tensor::new(shape, d.iter().map(|&v| -v).collect())?);
        }
        if self.needs(a) {
            let shape = self.value(a).shape().to_vec();
            self.acc(grads, a, Tensor::new(shape, d)?);
        }
        Ok(())
    }
}

fn col_sum<F: Real>(d: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] = out[j] + d[i * cols + j];
        }
    }
    out
}

/// Unfold `x: T×n` into `T_out × (n·k)` patches, column index `c·k + j`.
fn im2col<F: Real>(x: &[F], t: usize, n: usize, k: usize, stride: usize, t_out: usize) -> Vec<F> {
    let pad = (k - 1) / 2;
    let nk = n * k;
    let mut cols = vec![F::zero(); t_out * nk];
    for to in 0..t_out {
        for j in 0..k {
            let ti = (to * stride + j) as isize - pad as isize;
            if ti < 0 || ti as usize >= t {
                continue;
            }
            let xr = &x[ti as usize * n..(ti as usize + 1) * n];
            for c in 0..n {
                cols[to * nk + c * k + j] = xr[c];
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], t: usize, n: usize, k: usize, stride: usize, t_out: usize) -> Vec<F> {
    let pad = (k - 1) / 2;
    let nk = n * k;
    let mut x = vec![F::zero(); t * n];
    for to in 0..t_out {
        for j in 0..k {
            let ti = (to * stride + j) as isize - pad as isize;
            if ti < 0 || ti as usize >= t {
                continue;
            }
            let ti = ti as usize;
            for c in 0..n {
                x[ti * n + c] = x[ti * n + c] + cols[to * nk + c * k + j];
            }
        }
    }
    x
}

/// Low-rank product layout → weight layout (see [`Graph::lora_reshape`]).
pub(crate) fn lora_permute<F: Real>(src: &[F], m: usize, n: usize, k: usize, r: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n * k];
    let cols = n * r;
    for a in 0..m / r {
        for j in 0..k {
            let row = a * k + j;
            for c in 0..n {
                for q in 0..r {
                    out[((a * r + q) * n + c) * k + j] = src[row * cols + c * r + q];
                }
            }
        }
    }
    out
}

fn lora_unpermute<F: Real>(src: &[F], m: usize, n: usize, k: usize, r: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n * k];
    let cols = n * r;
    for a in 0..m / r {
        for j in 0..k {
            let row = a * k + j;
            for c in 0..n {
                for q in 0..r {
                    out[row * cols + c * r + q] = src[((a * r + q) * n + c) * k + j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_dot() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 2.0]]));
        let w = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let w = g.constant(t(&[&[3.0, 4.0]]));
        let b = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[12.0]);
    }

    #[test]
    fn linear_zero_weights_give_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.5, -2.0, 3.0], &[0.1, 0.2, 0.3]]));
        let w = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(y).shape(), &[2, 4]);
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 2.0]]));
        let w = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.linear(x, w, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_sliding_window_with_zero_pad() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 1, 3], &[1.0, 1.0, 1.0]).unwrap());
        let y = g.conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_identity_kernel_and_zero_input() {
        let mut g = Graph::<f64>::new();
        let xt = t(&[&[1.0, -2.0], &[3.0, 4.0], &[0.5, 0.25]]);
        let x = g.constant(xt.clone());
        let mut wt = Tensor::zeros(&[2, 2, 1]);
        wt.data_mut()[0] = 1.0; // [0,0,0]
        wt.data_mut()[3] = 1.0; // [1,1,0]
        let w = g.constant(wt);
        let y = g.conv1d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &xt);

        let z = g.constant(Tensor::zeros(&[4, 2]));
        let w = g.constant(Tensor::from_f64(&[3, 2, 3], &[0.3; 18]).unwrap());
        let b = g.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let y = g.conv1d(z, w, Some(b), 1, 1).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn conv1d_even_kernel_is_config_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 1]));
        let w = g.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(g.conv1d(x, w, None, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn strided_conv_halves_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[10, 2]));
        let w = g.constant(Tensor::zeros(&[3, 2, 3]));
        let y = g.conv1d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 3]);
    }

    #[test]
    fn depthwise_matches_dense_with_block_diagonal_weight() {
        let mut g = Graph::<f64>::new();
        let xt = t(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0], &[2.0, 1.0]]);
        let x = g.constant(xt);
        let dw = Tensor::from_f64(&[2, 1, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let mut dense = Tensor::zeros(&[2, 2, 3]);
        for j in 0..3 {
            dense.data_mut()[j] = dw.data()[j];
            dense.data_mut()[(2 + 1) * 3 + j] = dw.data()[3 + j];
        }
        let wd = g.constant(dw);
        let wf = g.constant(dense);
        let a = g.conv1d(x, wd, None, 1, 2).unwrap();
        let b = g.conv1d(x, wf, None, 1, 1).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 3.0]]));
        let y = g.layer_norm(x, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
        let e = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.layer_norm(e, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 5.0, 2.0], &[0.0, 1.0, 9.0], &[3.0, 2.0, 1.0]]));
        let y = g.softmax(x, true);
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.at(1, 2), 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_hand_softmax() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(&[&[1.0, 0.0]]));
        let ce = g.cross_entropy(l, &[0]).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(ce).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn lora_permute_roundtrip() {
        let (m, n, k, r) = (4, 3, 3, 2);
        let src: Vec<f64> = (0..m * n * k).map(|v| v as f64).collect();
        let w = lora_permute(&src, m, n, k, r);
        assert_eq!(lora_unpermute(&w, m, n, k, r), src);
    }

    #[test]
    fn backward_scalar_required() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[&[1.0, 2.0]]));
        assert!(g.backward(x).is_err());
        let s = g.sum(x);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }
}
