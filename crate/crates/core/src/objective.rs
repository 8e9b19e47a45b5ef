//! The coverage-linearity regularizer, the combined objective and its β
//! schedule.

use crate::error::{dim_err, Error, Result};
use crate::schedule;
use crate::tensor::{ops, Element, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CiivNorm {
    #[default]
    L1,
    /// non-squared Euclidean norm per sample row
    L2,
}

/// Features of `views` retinotopic views of one batch, stacked view-major
/// as `[V·B × D]`, with the coverage of every (view, sample) mask.
///
/// A view whose masks are shared across the batch simply repeats its α.
#[derive(Debug, Clone)]
pub struct ViewFeatures {
    pub features: Var,
    pub alphas: Vec<Vec<f64>>,
}

impl ViewFeatures {
    pub fn new(features: Var, alphas: Vec<Vec<f64>>) -> Self {
        Self { features, alphas }
    }

    pub fn views(&self) -> usize {
        self.alphas.len()
    }
}

/// `Σ_{i<j} ‖α_j·f_i − α_i·f_j‖ / (pairs · B · D)`.
pub fn ciiv_loss<T: Element>(g: &mut Graph<T>, vf: &ViewFeatures, norm: CiivNorm) -> Result<Var> {
    let v = vf.views();
    if v < 2 {
        return Err(Error::Contract(format!("ciiv loss needs at least 2 views, got {v}")));
    }
    let (rows, d) = match g.shape(vf.features) {
        [r, d] => (*r, *d),
        s => return Err(dim_err("ciiv_loss", format!("features must be 2-D, got {s:?}"))),
    };
    let b = rows / v;
    if b * v != rows || vf.alphas.iter().any(|a| a.len() != b) {
        return Err(dim_err("ciiv_loss", format!("{rows} rows for {v} views of per-sample alphas")));
    }
    if vf.alphas.iter().flatten().any(|&a| !(a > 0.0 && a <= 1.0)) {
        return Err(Error::Contract("coverage must lie in (0, 1]".into()));
    }
    let fv = g.value(vf.features).clone();
    let f = |view: usize, s: usize| &fv.data()[(view * b + s) * d..(view * b + s + 1) * d];
    let pairs = v * (v - 1) / 2;
    let scale = 1.0 / (pairs * b * d) as f64;
    let alphas = vf.alphas.clone();
    let mut total = 0.0;
    let mut kinks = Vec::new();
    for i in 0..v {
        for j in i + 1..v {
            for s in 0..b {
                let (ai, aj) = (alphas[i][s], alphas[j][s]);
                let diff = f(i, s).iter().zip(f(j, s)).map(|(&x, &y)| aj * x.as_f64() - ai * y.as_f64());
                match norm {
                    CiivNorm::L1 => {
                        for e in diff {
                            total += e.abs();
                            kinks.push(T::of_f64(e));
                        }
                    }
                    CiivNorm::L2 => {
                        let n = diff.map(|e| e * e).sum::<f64>().sqrt();
                        total += n;
                        kinks.push(T::of_f64(n));
                    }
                }
            }
        }
    }
    g.note_kinks(kinks);
    g.push(
        "ciiv_loss",
        &[vf.features],
        Tensor::scalar(T::of_f64(total * scale)),
        Box::new(move |grad, _| {
            let up = grad.data()[0].as_f64() * scale;
            let mut df = vec![0f64; rows * d];
            for i in 0..v {
                for j in i + 1..v {
                    for s in 0..b {
                        let (ai, aj) = (alphas[i][s], alphas[j][s]);
                        let (ri, rj) = ((i * b + s) * d, (j * b + s) * d);
                        let diff: Vec<f64> = (0..d)
                            .map(|k| aj * fv.data()[ri + k].as_f64() - ai * fv.data()[rj + k].as_f64())
                            .collect();
                        let dir: Vec<f64> = match norm {
                            CiivNorm::L1 => diff.iter().map(|&e| if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }).collect(),
                            CiivNorm::L2 => {
                                let n = diff.iter().map(|e| e * e).sum::<f64>().sqrt();
                                if n > 0.0 { diff.iter().map(|e| e / n).collect() } else { vec![0.0; d] }
                            }
                        };
                        for k in 0..d {
                            df[ri + k] += up * aj * dir[k];
                            df[rj + k] -= up * ai * dir[k];
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![rows, d], df.into_iter().map(T::of_f64).collect())?)])
        }),
    )
}

/// Mean cross-entropy over all views plus `β·L_CiiV`. `logits` is stacked
/// view-major like the features; `labels` has one entry per sample.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    vf: &ViewFeatures,
    beta: f64,
    norm: CiivNorm,
) -> Result<Var> {
    let v = vf.views();
    let rows = g.shape(logits).first().copied().unwrap_or(0);
    if rows != v * labels.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows for {v} views of {} samples",
            labels.len()
        )));
    }
    let all_labels: Vec<usize> = (0..v).flat_map(|_| labels.iter().copied()).collect();
    let ce = ops::softmax_cross_entropy(g, logits, &all_labels)?;
    if beta == 0.0 || v < 2 {
        return Ok(ce);
    }
    let reg = ciiv_loss(g, vf, norm)?;
    let reg = ops::scale(g, reg, T::of_f64(beta))?;
    ops::add(g, ce, reg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaSchedule {
    pub initial: f64,
    pub multiplier: f64,
    pub milestone_fractions: Vec<f64>,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            multiplier: 10.0,
            milestone_fractions: schedule::of_110([25.0, 50.0, 75.0]),
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.multiplier >= 1.0) {
            return Err(Error::Config("beta schedule must start non-negative and not decrease".into()));
        }
        Ok(())
    }

    pub fn beta_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let k = schedule::passed(&self.milestone_fractions, epoch, total_epochs);
        self.initial * self.multiplier.powi(k as i32)
    }
}
