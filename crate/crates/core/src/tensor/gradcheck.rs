//! Central finite-difference verification of reverse-mode gradients.

use super::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`
    pub max_rel_error: f64,
    pub checked: usize,
    /// coordinates whose ±h perturbation changed the kink sign pattern
    pub skipped: usize,
    /// nearest distance of any kink argument to its kink at the base point
    pub min_kink_distance: f64,
}

fn eval_scalar<T: Element, F>(f: &F, x: &Tensor<T>) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.value(out).item()?.as_f64();
    Ok((v, g.kink_trace().map(|k| k.signature)))
}

/// Max relative error between autodiff and central differences of `f` at `x`.
pub fn grad_check<T: Element, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, h)?.max_rel_error)
}

/// Like [`grad_check`] but also reports how many coordinates were skipped
/// because the finite-difference stencil straddled a relu or `|·|` kink.
pub fn grad_check_report<T: Element, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut g = Graph::with_kink_tracking();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    let min_kink_distance = g.kink_trace().map_or(f64::INFINITY, |k| k.min_distance);
    let mut grads = g.backward(out)?;
    let analytic = grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        min_kink_distance,
    };
    let base = x.data();
    for i in 0..base.len() {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] = T::of_f64(base[i].as_f64() + h);
        minus[i] = T::of_f64(base[i].as_f64() - h);
        let step = plus[i].as_f64() - minus[i].as_f64();
        let (fp, kp) = eval_scalar(&f, &Tensor::new(x.shape().to_vec(), plus)?)?;
        let (fm, km) = eval_scalar(&f, &Tensor::new(x.shape().to_vec(), minus)?)?;
        if kp != km {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / step;
        let ad = analytic.data()[i].as_f64();
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
