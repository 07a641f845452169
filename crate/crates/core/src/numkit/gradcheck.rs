//! Central finite-difference gradient checking in 64-bit mode.
//!
//! Round-off in a 64-bit forward pass limits a difference quotient to an
//! absolute accuracy of roughly `1e-16·|loss| / step`. A gradient entry that
//! happens to land near zero can therefore miss a 1e-6 relative bound even
//! when the analytic value is right. [`grad_check_refined`] re-measures such
//! entries with the forward pass run in double-double precision, where that
//! floor sits about sixteen digits lower.

use super::dd::Dd;
use super::{Grads, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Step for the double-double reference differences.
pub const DD_STEP: f64 = 1e-8;

/// Per-tensor outcome of a check.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    /// Entries whose verdict came from the double-double reference.
    pub refined: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradients of a scalar model output with respect to every trainable parameter.
pub fn analytic_grads<M>(model_fn: &M, params: &ParamStore<f64>) -> Result<Grads<f64>>
where
    M: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = model_fn(&mut g, params)?;
    Ok(g.backward(loss)?.into_params())
}

fn eval<M>(model_fn: &M, params: &ParamStore<f64>) -> Result<f64>
where
    M: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = model_fn(&mut g, params)?;
    Ok(g.value(loss).data()[0])
}

/// Compare `analytic` gradients to central differences of `model_fn`.
///
/// Trainable parameters missing from `analytic` are treated as having a
/// zero gradient.
pub fn check_against<M>(model_fn: &M, params: &ParamStore<f64>, analytic: &Grads<f64>, tol: f64) -> Result<GradCheckReport>
where
    M: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = params.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let n = work.get(&name)?.len();
        let zero = Tensor::zeros(work.get(&name)?.shape());
        let a = analytic.get(&name).unwrap_or(&zero).clone();
        let mut worst = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..n {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let fp = eval(model_fn, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let fm = eval(model_fn, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * FD_STEP);
            let an = a.data()[i];
            worst = worst.max(rel_err(an, num));
            max_abs = max_abs.max(an.abs());
        }
        tensors.push(TensorCheck { name, elements: n, max_rel_err: worst, max_abs_grad: max_abs, refined: 0 });
    }
    Ok(GradCheckReport { tol, tensors })
}

/// Full check: analytic backward pass versus central differences.
pub fn grad_check<M>(model_fn: M, params: &ParamStore<f64>, tol: f64) -> Result<GradCheckReport>
where
    M: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = analytic_grads(&model_fn, params)?;
    check_against(&model_fn, params, &analytic, tol)
}

/// A scalar model that can run both in 64-bit and in double-double precision.
pub trait CheckModel {
    fn loss(&self, g: &mut Graph<f64>, p: &ParamStore<f64>) -> Result<Var>;
    fn loss_dd(&self, g: &mut Graph<Dd>, p: &ParamStore<Dd>) -> Result<Var>;
}

/// Like [`grad_check`], but an entry whose 64-bit difference misses `tol`
/// is re-measured with central differences of the double-double forward
/// pass, and that measurement decides. Analytic gradients stay 64-bit.
pub fn grad_check_refined<M: CheckModel + ?Sized>(model: &M, params: &ParamStore<f64>, tol: f64) -> Result<GradCheckReport> {
    let f64_fn = |g: &mut Graph<f64>, p: &ParamStore<f64>| model.loss(g, p);
    let analytic = analytic_grads(&f64_fn, params)?;
    let mut work = params.clone();
    let mut work_dd: Option<ParamStore<Dd>> = None;
    let mut tensors = Vec::new();
    let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let n = work.get(&name)?.len();
        let zero = Tensor::zeros(work.get(&name)?.shape());
        let a = analytic.get(&name).unwrap_or(&zero).clone();
        let mut check = TensorCheck { name: name.clone(), elements: n, max_rel_err: 0.0, max_abs_grad: 0.0, refined: 0 };
        for i in 0..n {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let fp = eval(&f64_fn, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let fm = eval(&f64_fn, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let an = a.data()[i];
            let mut err = rel_err(an, (fp - fm) / (2.0 * FD_STEP));
            if err >= tol {
                let wd = work_dd.get_or_insert_with(|| params.cast());
                let x = Dd::from(orig);
                let mut at = |step: f64| -> Result<Dd> {
                    wd.get_mut(&name)?.data_mut()[i] = x + Dd::from(step);
                    let mut g = Graph::new();
                    let loss = model.loss_dd(&mut g, wd)?;
                    Ok(g.value(loss).data()[0])
                };
                let (p, m) = (at(DD_STEP)?, at(-DD_STEP)?);
                wd.get_mut(&name)?.data_mut()[i] = x;
                let num = (p - m).hi() / (2.0 * DD_STEP);
                err = rel_err(an, num);
                check.refined += 1;
            }
            check.max_rel_err = check.max_rel_err.max(err);
            check.max_abs_grad = check.max_abs_grad.max(an.abs());
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tol, tensors })
}
