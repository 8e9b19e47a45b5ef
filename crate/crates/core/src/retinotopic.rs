//! Retinotopic sampling masks and the exposure-averaged masked augmentation.
//!
//! A mask keeps pixel `(x, y)` when `g(d) + ε > τ` with `ε ~ U[0, 1)` drawn
//! per pixel and `d` the Euclidean distance to the mask center. Masks never
//! look at image content.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GVariant {
    #[default]
    Default,
    /// `1 − z/100`
    Candidate1,
    /// `2.5 / (0.5·√z)`, with the singular center pinned to 1
    Candidate2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub g_variant: GVariant,
    pub alpha_shape: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            g_variant: GVariant::Default,
            alpha_shape: 10.0,
            gamma: 0.3,
            tau: 0.9,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1)", self.tau)));
        }
        if !(self.alpha_shape > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("alpha_shape and gamma must be positive".into()));
        }
        Ok(())
    }

    /// Probability that a pixel with mapped value `g` is kept.
    pub fn keep_probability(&self, g: f64) -> f64 {
        (g - self.tau + 1.0).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExposureParams {
    pub omega: f64,
    pub n_exposures: usize,
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self {
            omega: 0.9,
            n_exposures: 3,
        }
    }
}

impl ExposureParams {
    /// Setting used for darker 64×64 natural images.
    pub fn dark() -> Self {
        Self {
            omega: 0.8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || self.n_exposures == 0 {
            return Err(Error::Config("exposure needs omega >= 0 and n_exposures >= 1".into()));
        }
        Ok(())
    }

    /// One scalar intensity offset per exposure, `U(−ω, ω)`.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.n_exposures)
            .map(|_| {
                if self.omega > 0.0 {
                    rng.random_range(-self.omega..self.omega)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// The nine fixed centers, x-major: `(w/6, h/6), (w/6, h/2), ...`.
pub fn center_grid(width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
    if width < 6 || height < 6 {
        return Err(Error::Config(format!(
            "center grid needs at least 6x6, got {width}x{height}"
        )));
    }
    let axis = |n: usize| [n / 6, n / 2, 5 * n / 6];
    Ok(axis(width)
        .into_iter()
        .flat_map(|x| axis(height).into_iter().map(move |y| (x, y)))
        .collect())
}

/// Row-major Euclidean distances from `center` to every pixel.
pub fn distance_grid(center: (usize, usize), width: usize, height: usize) -> Vec<f64> {
    let (cx, cy) = (center.0 as f64, center.1 as f64);
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64 - cx).hypot(y as f64 - cy)))
        .collect()
}

/// Map distances to sampling values in [0, 1].
pub fn g_eval(params: &MaskParams, distances: &[f64]) -> Result<Vec<f64>> {
    if distances.iter().any(|&z| !(z >= 0.0)) {
        return Err(Error::Contract("distances must be non-negative".into()));
    }
    Ok(match params.g_variant {
        GVariant::Default => {
            let zmax = distances.iter().copied().fold(0.0, f64::max);
            let raw: Vec<f64> = distances
                .iter()
                .map(|&z| (zmax - z + params.alpha_shape).powf(params.gamma))
                .collect();
            let m = raw.iter().copied().fold(0.0, f64::max);
            raw.into_iter().map(|v| v / m).collect()
        }
        GVariant::Candidate1 => distances.iter().map(|&z| (1.0 - z / 100.0).clamp(0.0, 1.0)).collect(),
        GVariant::Candidate2 => distances
            .iter()
            .map(|&z| {
                if z == 0.0 {
                    1.0
                } else {
                    (2.5 / (0.5 * z.sqrt())).clamp(0.0, 1.0)
                }
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetinotopicMask {
    center: (usize, usize),
    width: usize,
    height: usize,
    grid: Vec<bool>,
    coverage: f64,
}

impl RetinotopicMask {
    pub fn from_grid(center: (usize, usize), width: usize, height: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != width * height {
            return Err(dim_err("mask", format!("{} cells for {width}x{height}", grid.len())));
        }
        let kept = grid.iter().filter(|&&k| k).count();
        let coverage = kept as f64 / grid.len().max(1) as f64;
        Ok(Self { center, width, height, grid, coverage })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::from_grid((width / 2, height / 2), width, height, vec![true; width * height])
            .expect("consistent size")
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn kept(&self, x: usize, y: usize) -> bool {
        self.grid[y * self.width + x]
    }

    /// α_r, the fraction of kept pixels.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let gray: Vec<f32> = self.grid.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        crate::image::encode_pgm(self.width, self.height, &gray).expect("consistent size")
    }
}

/// Cached keep probabilities for one center; sampling is then one uniform
/// draw per pixel.
#[derive(Debug, Clone)]
pub struct MaskField {
    params: MaskParams,
    center: (usize, usize),
    width: usize,
    height: usize,
    g: Vec<f64>,
}

impl MaskField {
    pub fn new(params: MaskParams, center: (usize, usize), width: usize, height: usize) -> Result<Self> {
        params.validate()?;
        if center.0 >= width || center.1 >= height {
            return Err(Error::Config(format!(
                "center {center:?} outside {width}x{height}"
            )));
        }
        let g = g_eval(&params, &distance_grid(center, width, height))?;
        Ok(Self { params, center, width, height, g })
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn keep_probabilities(&self) -> Vec<f64> {
        self.g.iter().map(|&g| self.params.keep_probability(g)).collect()
    }

    /// Fraction of pixels kept with certainty.
    pub fn deterministic_core(&self) -> f64 {
        self.g.iter().filter(|&&g| g >= self.params.tau).count() as f64 / self.g.len() as f64
    }

    pub fn sample(&self, rng: &mut impl Rng) -> RetinotopicMask {
        let tau = self.params.tau;
        let grid = self.g.iter().map(|&g| g + rng.random::<f64>() > tau).collect();
        RetinotopicMask::from_grid(self.center, self.width, self.height, grid).expect("sized")
    }
}

pub fn sample_mask(
    params: &MaskParams,
    center: (usize, usize),
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<RetinotopicMask> {
    Ok(MaskField::new(*params, center, width, height)?.sample(rng))
}

/// `x_r = (1/N)·Σ_i r ⊙ ReLU(x + ε_i)` on a batch `x[B×C×H×W]`.
///
/// `masks` and `exposures` hold either one entry per image or a single entry
/// shared by the batch. Masks and exposures are constants; gradients reach
/// `x` only.
pub fn augment<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    masks: &[RetinotopicMask],
    exposures: &[Vec<f64>],
) -> Result<Var> {
    let (b, c, h, w) = match g.shape(x) {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(dim_err("augment", format!("expected B×C×H×W, got {s:?}"))),
    };
    let pick = |len: usize, what: &str| -> Result<()> {
        if len == b || len == 1 {
            Ok(())
        } else {
            Err(dim_err("augment", format!("{len} {what} for batch of {b}")))
        }
    };
    pick(masks.len(), "masks")?;
    pick(exposures.len(), "exposure lists")?;
    if let Some(m) = masks.iter().find(|m| (m.width, m.height) != (w, h)) {
        return Err(dim_err(
            "augment",
            format!("mask {}x{} for image {w}x{h}", m.width, m.height),
        ));
    }
    if exposures.iter().any(|e| e.is_empty()) {
        return Err(Error::Contract("augment needs at least one exposure".into()));
    }
    let plane = h * w;
    let img = c * plane;
    let xv = g.value(x).clone();
    let mut out = vec![T::zero(); b * img];
    let mut kinks = Vec::new();
    let tracking = g.kink_trace().is_some();
    for i in 0..b {
        let mask = &masks[if masks.len() == 1 { 0 } else { i }];
        let eps = &exposures[if exposures.len() == 1 { 0 } else { i }];
        let inv = 1.0 / eps.len() as f64;
        for ch in 0..c {
            let base = i * img + ch * plane;
            for (p, &keep) in mask.grid.iter().enumerate() {
                if !keep {
                    continue;
                }
                let v = xv.data()[base + p].as_f64();
                let mut acc = 0.0;
                for &e in eps {
                    acc += (v + e).max(0.0);
                    if tracking {
                        kinks.push(T::of_f64(v + e));
                    }
                }
                out[base + p] = T::of_f64(acc * inv);
            }
        }
    }
    g.note_kinks(kinks);
    let masks = masks.to_vec();
    let exposures = exposures.to_vec();
    g.push(
        "augment",
        &[x],
        Tensor::new(vec![b, c, h, w], out)?,
        Box::new(move |grad, _| {
            let mut dx = vec![T::zero(); b * img];
            for i in 0..b {
                let mask = &masks[if masks.len() == 1 { 0 } else { i }];
                let eps = &exposures[if exposures.len() == 1 { 0 } else { i }];
                let inv = 1.0 / eps.len() as f64;
                for ch in 0..c {
                    let base = i * img + ch * plane;
                    for (p, &keep) in mask.grid.iter().enumerate() {
                        if !keep {
                            continue;
                        }
                        let v = xv.data()[base + p].as_f64();
                        let active = eps.iter().filter(|&&e| v + e > 0.0).count();
                        dx[base + p] = T::of_f64(grad.data()[base + p].as_f64() * active as f64 * inv);
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![b, c, h, w], dx)?)])
        }),
    )
}
