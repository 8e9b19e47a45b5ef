//! Classifiers wrapped with optional retinotopic view sampling, exposed to
//! attacks through [`AttackModel`].

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvNet};
use crate::retinotopic::{augment, center_grid, ExposureParams, MaskField, MaskParams, RetinotopicMask};
use crate::rng::Rng;
use crate::tensor::{ops, Element, Graph, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Per-sample attack objective `sign_b · CE(logits_b, label_b)`: `+1` with
/// the true label for untargeted attacks, `−1` with the target otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub labels: Vec<usize>,
    pub signs: Vec<f64>,
}

impl Objective {
    pub fn untargeted(labels: &[usize]) -> Self {
        Self { labels: labels.to_vec(), signs: vec![1.0; labels.len()] }
    }

    pub fn targeted(targets: &[usize]) -> Self {
        Self { labels: targets.to_vec(), signs: vec![-1.0; targets.len()] }
    }

    /// Per-sample values from logits.
    pub fn values(&self, logits: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(ops::cross_entropy_rows(logits, &self.labels)?
            .into_iter()
            .zip(&self.signs)
            .map(|(l, s)| l * s)
            .collect())
    }
}

/// What an attacker may query: logits and gradients of an [`Objective`].
pub trait AttackModel: Sync {
    fn num_classes(&self) -> usize;

    /// Whether repeated queries on one input can differ.
    fn is_stochastic(&self) -> bool;

    fn logits(&self, x: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>>;

    /// Per-sample objective values and the gradient of their sum w.r.t. `x`.
    fn objective_grad(&self, x: &Tensor<f32>, obj: &Objective, rng: &mut Rng) -> Result<(Vec<f64>, Tensor<f32>)>;

    /// Gradient of the objective with row `b` divided by `exp(log_scale[b])`.
    /// Models whose exact gradient can underflow override this; the default
    /// uses [`objective_grad`](Self::objective_grad) unscaled.
    fn objective_direction(&self, x: &Tensor<f32>, obj: &Objective, rng: &mut Rng) -> Result<(Tensor<f32>, Vec<f64>)> {
        let (_, g) = self.objective_grad(x, obj, rng)?;
        Ok((g, vec![0.0; obj.labels.len()]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanLogits,
    /// logits of one view drawn at random per call
    SingleRandomView,
    /// one-hot vote counts over views; gradients use the mean logits
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub views: usize,
    /// exposure offsets fixed to zero
    pub pin_exposure: bool,
    /// masks drawn once from `freeze_seed` and reused for every call
    pub freeze_masks: bool,
    pub freeze_seed: u64,
    pub aggregation: Aggregation,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            views: 9,
            pin_exposure: false,
            freeze_masks: false,
            freeze_seed: 0,
            aggregation: Aggregation::MeanLogits,
        }
    }
}

/// Mask fields for the fixed centers of one image size.
#[derive(Debug, Clone)]
pub struct Retina {
    pub mask: MaskParams,
    pub exposure: ExposureParams,
    width: usize,
    height: usize,
    fields: Vec<MaskField>,
}

impl Retina {
    pub fn new(mask: MaskParams, exposure: ExposureParams, width: usize, height: usize) -> Result<Self> {
        exposure.validate()?;
        let fields = center_grid(width, height)?
            .into_iter()
            .map(|c| MaskField::new(mask, c, width, height))
            .collect::<Result<_>>()?;
        Ok(Self { mask, exposure, width, height, fields })
    }

    pub fn fixed_fields(&self) -> &[MaskField] {
        &self.fields
    }

    /// Field for a center drawn uniformly over the image.
    pub fn random_field(&self, rng: &mut Rng) -> Result<MaskField> {
        let c = (rng.random_range(0..self.width), rng.random_range(0..self.height));
        MaskField::new(self.mask, c, self.width, self.height)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Masks and exposures for `fields.len()` views of a batch of `b`.
pub struct ViewDraw {
    pub masks: Vec<Vec<RetinotopicMask>>,
    pub exposures: Vec<Vec<Vec<f64>>>,
}

impl ViewDraw {
    pub fn sample(fields: &[&MaskField], exposure: &ExposureParams, b: usize, pin: bool, rng: &mut Rng) -> Self {
        let mut masks = Vec::with_capacity(fields.len());
        let mut exposures = Vec::with_capacity(fields.len());
        for f in fields {
            masks.push((0..b).map(|_| f.sample(rng)).collect());
            exposures.push(
                (0..b)
                    .map(|_| if pin { vec![0.0] } else { exposure.draw(rng) })
                    .collect(),
            );
        }
        Self { masks, exposures }
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.masks.iter().map(|v| v.iter().map(|m| m.coverage()).collect()).collect()
    }

    /// All views of `x` stacked view-major: `[V·B×C×H×W]`.
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let views = self
            .masks
            .iter()
            .zip(&self.exposures)
            .map(|(m, e)| augment(g, x, m, e))
            .collect::<Result<Vec<_>>>()?;
        if views.len() == 1 {
            return Ok(views[0]);
        }
        ops::concat_rows(g, &views)
    }
}

/// A trained [`ConvNet`], optionally behind retinotopic view averaging.
#[derive(Debug, Clone)]
pub struct DefendedModel {
    pub net: ConvNet,
    pub retina: Option<Retina>,
    pub inference: InferenceConfig,
    frozen: Option<Vec<RetinotopicMask>>,
}

impl DefendedModel {
    pub fn plain(net: ConvNet) -> Self {
        Self { net, retina: None, inference: InferenceConfig { views: 1, ..Default::default() }, frozen: None }
    }

    pub fn retinotopic(net: ConvNet, retina: Retina, inference: InferenceConfig) -> Result<Self> {
        if inference.views == 0 || inference.views > retina.fields.len() {
            return Err(Error::Config(format!(
                "inference views must be in 1..={}",
                retina.fields.len()
            )));
        }
        let frozen = inference.freeze_masks.then(|| {
            let mut rng = crate::rng::stream(inference.freeze_seed, &[0x5eed]);
            retina.fields[..inference.views].iter().map(|f| f.sample(&mut rng)).collect()
        });
        Ok(Self { net, retina: Some(retina), inference, frozen })
    }

    fn draw(&self, b: usize, rng: &mut Rng) -> Option<ViewDraw> {
        let retina = self.retina.as_ref()?;
        let fields: Vec<&MaskField> = retina.fields[..self.inference.views].iter().collect();
        let mut d = ViewDraw::sample(&fields, &retina.exposure, b, self.inference.pin_exposure, rng);
        if let Some(frozen) = &self.frozen {
            d.masks = frozen.iter().map(|m| vec![m.clone(); b]).collect();
        }
        Some(d)
    }

    /// Mean logits over views, `[B×K]`, recorded on `g`.
    fn mean_logits<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var, rng: &mut Rng) -> Result<(Var, usize)> {
        let b = g.shape(x)[0];
        match self.draw(b, rng) {
            None => Ok((self.net.logits(g, p, x)?, 1)),
            Some(d) => {
                let v = d.masks.len();
                let stacked = d.apply(g, x)?;
                let l = self.net.logits(g, p, stacked)?;
                Ok((ops::mean_groups(g, l, v)?, v))
            }
        }
    }

    fn per_view_logits(&self, x: &Tensor<f32>, rng: &mut Rng) -> Result<(Tensor<f32>, usize)> {
        let mut g = Graph::<f32>::new();
        let p = self.net.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let b = x.shape()[0];
        match self.draw(b, rng) {
            None => {
                let l = self.net.logits(&mut g, &p, xv)?;
                Ok((g.value(l).clone(), 1))
            }
            Some(d) => {
                let v = d.masks.len();
                let stacked = d.apply(&mut g, xv)?;
                let l = self.net.logits(&mut g, &p, stacked)?;
                Ok((g.value(l).clone(), v))
            }
        }
    }
}

impl AttackModel for DefendedModel {
    fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    fn is_stochastic(&self) -> bool {
        self.retina.is_some() && !(self.frozen.is_some() && self.inference.pin_exposure)
    }

    fn logits(&self, x: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
        let (l, v) = self.per_view_logits(x, rng)?;
        let b = x.shape()[0];
        let k = self.num_classes();
        if v == 1 {
            return Ok(l);
        }
        let rows = |view: usize, s: usize| &l.data()[(view * b + s) * k..(view * b + s + 1) * k];
        let mut out = vec![0f32; b * k];
        match self.inference.aggregation {
            Aggregation::MeanLogits => {
                for s in 0..b {
                    for j in 0..k {
                        let m: f64 = (0..v).map(|view| rows(view, s)[j] as f64).sum::<f64>() / v as f64;
                        out[s * k + j] = m as f32;
                    }
                }
            }
            Aggregation::SingleRandomView => {
                for s in 0..b {
                    let view = rng.random_range(0..v);
                    out[s * k..(s + 1) * k].copy_from_slice(rows(view, s));
                }
            }
            Aggregation::MajorityVote => {
                for s in 0..b {
                    for view in 0..v {
                        out[s * k + argmax(rows(view, s))] += 1.0;
                    }
                }
            }
        }
        Tensor::new(vec![b, k], out)
    }

    fn objective_grad(&self, x: &Tensor<f32>, obj: &Objective, rng: &mut Rng) -> Result<(Vec<f64>, Tensor<f32>)> {
        let mut g = Graph::<f32>::new();
        let p = self.net.bind(&mut g, false);
        let xv = g.variable(x.clone());
        let (l, _) = self.mean_logits(&mut g, &p, xv, rng)?;
        let values = obj.values(g.value(l))?;
        let loss = ops::weighted_cross_entropy(&mut g, l, &obj.labels, &obj.signs)?;
        let mut grads = g.backward(loss)?;
        let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((values, grad))
    }

    fn objective_direction(&self, x: &Tensor<f32>, obj: &Objective, rng: &mut Rng) -> Result<(Tensor<f32>, Vec<f64>)> {
        let mut g = Graph::<f32>::new();
        let p = self.net.bind(&mut g, false);
        let xv = g.variable(x.clone());
        let (l, _) = self.mean_logits(&mut g, &p, xv, rng)?;
        let (loss, log_scale) = ops::cross_entropy_direction(&mut g, l, &obj.labels, &obj.signs)?;
        let mut grads = g.backward(loss)?;
        let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((grad, log_scale))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}
