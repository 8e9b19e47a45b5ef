//! Linear structural causal models with a confounder `c` and an optional
//! instrument `r`, plus the three slope estimators compared on them.

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// First-stage F below this marks the instrument as weak.
pub const WEAK_F: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Instrument {
    None,
    /// `r` takes `values.0` or `values.1` with equal probability
    Binary { values: (f64, f64) },
    /// `r ~ N(0, 1)`
    Continuous,
}

impl Instrument {
    fn variance(&self) -> f64 {
        match *self {
            Instrument::None => 0.0,
            Instrument::Binary { values: (a, b) } => (a - b).powi(2) / 4.0,
            Instrument::Continuous => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearScm {
    pub w_cx: f64,
    pub w_cy: f64,
    pub w_xy: f64,
    pub w_rx: f64,
    pub sigma_b: f64,
    pub instrument: Instrument,
    /// std of an additive outcome noise; zero keeps the outcome exact
    pub sigma_y: f64,
}

impl Default for LinearScm {
    fn default() -> Self {
        Self {
            w_cx: 1.0,
            w_cy: 1.0,
            w_xy: 2.0,
            w_rx: 1.0,
            sigma_b: 1.0,
            instrument: Instrument::Binary { values: (0.0, 1.0) },
            sigma_y: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScmSample {
    pub r: Option<f64>,
    pub c: f64,
    pub x: f64,
    pub y: f64,
}

impl LinearScm {
    pub fn without_instrument(self) -> Self {
        Self { instrument: Instrument::None, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_cx, self.w_cy, self.w_xy, self.w_rx, self.sigma_b, self.sigma_y];
        if ws.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("scm weights must be finite".into()));
        }
        if self.sigma_b < 0.0 || self.sigma_y < 0.0 {
            return Err(Error::Config("scm noise scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Population OLS slope of y on x.
    pub fn ols_limit(&self) -> f64 {
        let rx = if self.instrument == Instrument::None { 0.0 } else { self.w_rx.powi(2) * self.instrument.variance() };
        let var_x = self.w_cx.powi(2) + self.sigma_b.powi(2) + rx;
        self.w_xy + self.w_cy * self.w_cx / var_x
    }
}

pub fn simulate(scm: &LinearScm, n: usize, rng: &mut Rng) -> Result<Vec<ScmSample>> {
    scm.validate()?;
    if n == 0 {
        return Err(Error::Config("simulate needs n >= 1".into()));
    }
    let noise_y = (scm.sigma_y > 0.0).then(|| Normal::new(0.0, scm.sigma_y).expect("checked"));
    Ok((0..n)
        .map(|_| {
            let c: f64 = StandardNormal.sample(rng);
            let b: f64 = scm.sigma_b * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            let r = match scm.instrument {
                Instrument::None => None,
                Instrument::Binary { values: (a, bv) } => Some(if rng.random::<bool>() { bv } else { a }),
                Instrument::Continuous => Some(StandardNormal.sample(rng)),
            };
            let x = scm.w_cx * c + r.map_or(0.0, |r| scm.w_rx * r) + b;
            let e = noise_y.as_ref().map_or(0.0, |d| d.sample(rng));
            ScmSample { r, c, x, y: scm.w_xy * x + scm.w_cy * c + e }
        })
        .collect())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Sample covariance (population normalization).
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a.iter().copied());
    let mb = mean(b.iter().copied());
    mean(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)))
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    covariance(a, b) / (covariance(a, a) * covariance(b, b)).sqrt()
}

fn column(s: &[ScmSample], f: impl Fn(&ScmSample) -> f64) -> Vec<f64> {
    s.iter().map(f).collect()
}

fn degenerate(var: f64, scale: f64) -> bool {
    !(var > 1e-12 * scale.max(1.0))
}

pub fn ols_slope(samples: &[ScmSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Estimation("ols needs at least two samples".into()));
    }
    let x = column(samples, |s| s.x);
    let y = column(samples, |s| s.y);
    let vx = covariance(&x, &x);
    if degenerate(vx, mean(x.iter().map(|v| v * v))) {
        return Err(Error::Estimation("x has zero variance".into()));
    }
    Ok(covariance(&x, &y) / vx)
}

/// Least squares of y on (1, x, c); returns the (x, c) coefficients.
pub fn backdoor_estimate(samples: &[ScmSample]) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(Error::Estimation("backdoor regression needs at least three samples".into()));
    }
    let x = column(samples, |s| s.x);
    let c = column(samples, |s| s.c);
    let y = column(samples, |s| s.y);
    // centering absorbs the intercept
    let (sxx, scc, sxc) = (covariance(&x, &x), covariance(&c, &c), covariance(&x, &c));
    let (sxy, scy) = (covariance(&x, &y), covariance(&c, &y));
    let det = sxx * scc - sxc * sxc;
    if degenerate(det.abs(), sxx * scc) {
        return Err(Error::Estimation("design (x, c) is rank deficient".into()));
    }
    Ok(((scc * sxy - sxc * scy) / det, (sxx * scy - sxc * sxy) / det))
}

/// F statistic of the first-stage regression of x on r (one regressor).
pub fn first_stage_f(r: &[f64], x: &[f64]) -> f64 {
    let n = r.len() as f64;
    let rho2 = correlation(r, x).powi(2);
    if !rho2.is_finite() {
        return 0.0;
    }
    if rho2 >= 1.0 {
        return f64::INFINITY;
    }
    rho2 / (1.0 - rho2) * (n - 2.0)
}

/// Wald ratio for a two-valued instrument, covariance ratio otherwise.
pub fn iv_estimate(samples: &[ScmSample]) -> Result<f64> {
    let r: Vec<f64> = samples
        .iter()
        .map(|s| s.r.ok_or_else(|| Error::Estimation("iv needs an observed instrument".into())))
        .collect::<Result<_>>()?;
    if samples.len() < 2 {
        return Err(Error::Estimation("iv needs at least two samples".into()));
    }
    let x = column(samples, |s| s.x);
    let y = column(samples, |s| s.y);
    let mut levels: Vec<f64> = Vec::new();
    for &v in &r {
        if !levels.contains(&v) {
            levels.push(v);
            if levels.len() > 2 {
                break;
            }
        }
    }
    if levels.len() < 2 {
        return Err(Error::WeakInstrument { f_stat: 0.0, threshold: WEAK_F });
    }
    // the F-rule needs residual degrees of freedom; below that only exact data can be used
    if samples.len() > 2 {
        let f = first_stage_f(&r, &x);
        if f < WEAK_F {
            return Err(Error::WeakInstrument { f_stat: f, threshold: WEAK_F });
        }
    }
    if levels.len() == 2 {
        let group = |lv: f64, v: &[f64]| mean(r.iter().zip(v).filter(|(a, _)| **a == lv).map(|(_, b)| *b));
        let dx = group(levels[0], &x) - group(levels[1], &x);
        if dx == 0.0 {
            return Err(Error::WeakInstrument { f_stat: 0.0, threshold: WEAK_F });
        }
        return Ok((group(levels[0], &y) - group(levels[1], &y)) / dx);
    }
    let crx = covariance(&r, &x);
    if crx == 0.0 {
        return Err(Error::WeakInstrument { f_stat: 0.0, threshold: WEAK_F });
    }
    Ok(covariance(&r, &y) / crx)
}
