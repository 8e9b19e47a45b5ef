//! Norm-bounded adversaries: FGSM, PGD, noise, brute-force noise search and
//! SPSA, all against an [`AttackModel`].

use crate::defense::{argmax, AttackModel, Objective};
use crate::error::{dim_err, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{ops, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub norm: Norm,
    pub epsilon: f64,
}

impl Budget {
    pub fn linf(epsilon: f64) -> Self {
        Self { norm: Norm::Linf, epsilon }
    }

    pub fn l2(epsilon: f64) -> Self {
        Self { norm: Norm::L2, epsilon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackGoal {
    #[default]
    Untargeted,
    TargetMostLikely,
    TargetRandom,
    TargetLeastLikely,
    TargetFixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// no perturbation; the clean-accuracy column
    Clean,
    Fgsm,
    Pgd,
    GaussianNoise,
    UniformNoise,
    BruteForceSearch,
    Spsa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpsaParams {
    /// finite-difference radius
    pub delta: f64,
    pub batch: usize,
    pub lr: f64,
}

impl Default for SpsaParams {
    fn default() -> Self {
        Self { delta: 0.1, batch: 16, lr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub name: String,
    pub kind: AttackKind,
    pub budget: Budget,
    pub step_size: f64,
    pub iterations: usize,
    pub goal: AttackGoal,
    pub eot_samples: usize,
    pub random_start: bool,
    pub trials: usize,
    pub spsa: SpsaParams,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            name: "PGD-10".into(),
            kind: AttackKind::Pgd,
            budget: Budget::linf(8.0 / 255.0),
            step_size: 2.0 / 255.0,
            iterations: 10,
            goal: AttackGoal::Untargeted,
            eot_samples: 4,
            random_start: true,
            trials: 100,
            spsa: SpsaParams::default(),
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn clean() -> Self {
        Self { name: "Clean".into(), kind: AttackKind::Clean, ..Default::default() }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self { name: "FGSM".into(), kind: AttackKind::Fgsm, budget: Budget::linf(epsilon), iterations: 1, ..Default::default() }
    }

    pub fn pgd(epsilon: f64, step: f64, iterations: usize) -> Self {
        Self {
            name: format!("PGD-{iterations}"),
            budget: Budget::linf(epsilon),
            step_size: step,
            iterations,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.budget;
        if !(b.epsilon >= 0.0) {
            return Err(Error::Config(format!("{}: epsilon must be non-negative", self.name)));
        }
        let iterative = matches!(self.kind, AttackKind::Pgd | AttackKind::Spsa);
        if iterative && (self.iterations == 0 || !(self.step_size > 0.0 || self.kind == AttackKind::Spsa)) {
            return Err(Error::Config(format!("{}: iterative attacks need steps and step size", self.name)));
        }
        if self.eot_samples == 0 {
            return Err(Error::Config(format!("{}: eot_samples must be at least 1", self.name)));
        }
        let linf_only = matches!(
            self.kind,
            AttackKind::Fgsm | AttackKind::GaussianNoise | AttackKind::UniformNoise | AttackKind::BruteForceSearch | AttackKind::Spsa
        );
        if linf_only && b.norm != Norm::Linf {
            return Err(Error::Config(format!("{}: only defined under Linf", self.name)));
        }
        if self.kind == AttackKind::BruteForceSearch && self.trials == 0 {
            return Err(Error::Config("brute-force search needs at least one trial".into()));
        }
        if self.kind == AttackKind::Spsa && (!(self.spsa.delta > 0.0) || self.spsa.batch == 0) {
            return Err(Error::Config("spsa needs delta > 0 and batch >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one attack on a batch.
#[derive(Debug, Clone)]
pub struct AttackOutput {
    pub x_adv: Tensor<f32>,
    /// samples whose first gradient was identically zero
    pub zero_gradient: Vec<bool>,
    pub targets: Option<Vec<usize>>,
}

fn batch_dims(x: &Tensor<f32>) -> Result<(usize, usize)> {
    let b = *x.shape().first().ok_or_else(|| dim_err("attack", "rank-0 input"))?;
    Ok((b, x.len() / b.max(1)))
}

/// Pull `x_adv` back into the budget around `x_clean`, then into [0, 1].
pub fn project(x_adv: &Tensor<f32>, x_clean: &Tensor<f32>, budget: &Budget) -> Result<Tensor<f32>> {
    if x_adv.shape() != x_clean.shape() {
        return Err(dim_err("project", format!("{:?} vs {:?}", x_adv.shape(), x_clean.shape())));
    }
    let (b, per) = batch_dims(x_clean)?;
    let eps = budget.epsilon;
    let mut out = Vec::with_capacity(x_adv.len());
    for s in 0..b.max(1) {
        let a = &x_adv.data()[s * per..(s + 1) * per];
        let c = &x_clean.data()[s * per..(s + 1) * per];
        let factor = match budget.norm {
            Norm::Linf => 1.0,
            Norm::L2 => {
                let n = a.iter().zip(c).map(|(&u, &v)| ((u - v) as f64).powi(2)).sum::<f64>().sqrt();
                if n > eps { eps / n } else { 1.0 }
            }
        };
        for (&u, &v) in a.iter().zip(c) {
            let mut d = (u - v) as f64 * factor;
            if budget.norm == Norm::Linf {
                d = d.clamp(-eps, eps);
            }
            out.push((v as f64 + d).clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(x_adv.shape().to_vec(), out)
}

/// Target class for one sample; ties go to the lowest index.
pub fn select_target(logits: &[f32], y: usize, goal: AttackGoal, rng: &mut Rng) -> Result<Option<usize>> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::Contract("targeting needs at least two classes".into()));
    }
    if y >= k {
        return Err(Error::Index { op: "select_target", index: y, bound: k });
    }
    let others = (0..k).filter(|&c| c != y);
    Ok(match goal {
        AttackGoal::Untargeted => None,
        AttackGoal::TargetMostLikely => others.fold(None, |best: Option<usize>, c| match best {
            Some(b) if logits[b] >= logits[c] => Some(b),
            _ => Some(c),
        }),
        AttackGoal::TargetLeastLikely => others.fold(None, |best: Option<usize>, c| match best {
            Some(b) if logits[b] <= logits[c] => Some(b),
            _ => Some(c),
        }),
        AttackGoal::TargetRandom => {
            let r = rng.random_range(0..k - 1);
            Some(if r >= y { r + 1 } else { r })
        }
        AttackGoal::TargetFixed(t) => {
            if t == y || t >= k {
                return Err(Error::Contract(format!("fixed target {t} invalid for label {y}")));
            }
            Some(t)
        }
    })
}

fn objective_for(model: &dyn AttackModel, x: &Tensor<f32>, y: &[usize], goal: AttackGoal, rng: &mut Rng) -> Result<(Objective, Option<Vec<usize>>)> {
    if goal == AttackGoal::Untargeted {
        return Ok((Objective::untargeted(y), None));
    }
    let logits = model.logits(x, rng)?;
    let k = model.num_classes();
    let targets = logits
        .data()
        .chunks(k)
        .zip(y)
        .map(|(row, &label)| select_target(row, label, goal, rng).map(|t| t.expect("targeted goal")))
        .collect::<Result<Vec<_>>>()?;
    Ok((Objective::targeted(&targets), Some(targets)))
}

/// Gradient averaged over `k` independent queries (one when the model is
/// deterministic, since further queries would repeat it). Each sample's row
/// comes back multiplied by a positive factor so that confident rows do not
/// underflow to zero; the direction is exact, the magnitude is not.
pub fn eot_grad(model: &dyn AttackModel, x: &Tensor<f32>, obj: &Objective, k: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let k = if model.is_stochastic() { k.max(1) } else { 1 };
    let draws = (0..k).map(|_| model.objective_direction(x, obj, rng)).collect::<Result<Vec<_>>>()?;
    let (b, per) = batch_dims(x)?;
    let mut acc = vec![0f64; x.len()];
    for s in 0..b {
        let top = draws.iter().map(|(_, ls)| ls[s]).fold(f64::NEG_INFINITY, f64::max);
        for (g, ls) in &draws {
            let w = if top.is_finite() { (ls[s] - top).exp() } else { 1.0 };
            let row = &g.data()[s * per..(s + 1) * per];
            acc[s * per..(s + 1) * per].iter_mut().zip(row).for_each(|(a, &v)| *a += w * v as f64);
        }
    }
    let inv = 1.0 / k as f64;
    Tensor::new(x.shape().to_vec(), acc.into_iter().map(|v| (v * inv) as f32).collect())
}

fn zero_rows(g: &Tensor<f32>) -> Vec<bool> {
    let (b, per) = batch_dims(g).unwrap_or((0, 0));
    (0..b).map(|s| g.data()[s * per..(s + 1) * per].iter().all(|&v| v == 0.0)).collect()
}

/// One steepest-ascent step of length `step` in the budget's geometry.
fn ascend(x: &Tensor<f32>, g: &Tensor<f32>, norm: Norm, step: f64) -> Result<Tensor<f32>> {
    let (b, per) = batch_dims(x)?;
    let mut out = x.data().to_vec();
    for s in 0..b {
        let gs = &g.data()[s * per..(s + 1) * per];
        let xs = &mut out[s * per..(s + 1) * per];
        match norm {
            Norm::Linf => xs.iter_mut().zip(gs).for_each(|(v, &d)| {
                let sg = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                *v = (*v as f64 + step * sg) as f32;
            }),
            Norm::L2 => {
                let n = gs.iter().map(|&d| (d as f64).powi(2)).sum::<f64>().sqrt();
                if n > 0.0 {
                    xs.iter_mut().zip(gs).for_each(|(v, &d)| *v = (*v as f64 + step * d as f64 / n) as f32);
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `x + ε·sign(∇L)`, averaged over `eot_samples` gradient draws.
pub fn fgsm(model: &dyn AttackModel, x: &Tensor<f32>, y: &[usize], spec: &AttackSpec, rng: &mut Rng) -> Result<AttackOutput> {
    if spec.budget.norm != Norm::Linf {
        return Err(Error::Config("fgsm is defined under Linf".into()));
    }
    let (obj, targets) = objective_for(model, x, y, spec.goal, rng)?;
    let g = eot_grad(model, x, &obj, spec.eot_samples, rng)?;
    let stepped = ascend(x, &g, Norm::Linf, spec.budget.epsilon)?;
    Ok(AttackOutput { x_adv: project(&stepped, x, &spec.budget)?, zero_gradient: zero_rows(&g), targets })
}

fn random_start(x: &Tensor<f32>, budget: &Budget, rng: &mut Rng) -> Result<Tensor<f32>> {
    let eps = budget.epsilon;
    let (b, per) = batch_dims(x)?;
    let mut out = x.data().to_vec();
    match budget.norm {
        Norm::Linf => {
            if eps > 0.0 {
                out.iter_mut().for_each(|v| *v = (*v as f64 + rng.random_range(-eps..eps)) as f32);
            }
        }
        Norm::L2 => {
            for s in 0..b {
                let dir: Vec<f64> = (0..per).map(|_| StandardNormal.sample(rng)).collect();
                let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
                let r = eps * rng.random::<f64>().powf(1.0 / per as f64);
                for (v, d) in out[s * per..(s + 1) * per].iter_mut().zip(&dir) {
                    *v = (*v as f64 + r * d / n) as f32;
                }
            }
        }
    }
    project(&Tensor::new(x.shape().to_vec(), out)?, x, budget)
}

/// PGD returning the iterates after each count in `checkpoints` (ascending).
/// The attack runs `max(checkpoints)` iterations once.
pub fn pgd_trajectory(
    model: &dyn AttackModel,
    x: &Tensor<f32>,
    y: &[usize],
    spec: &AttackSpec,
    checkpoints: &[usize],
    rng: &mut Rng,
) -> Result<Vec<AttackOutput>> {
    spec.validate()?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("pgd checkpoints must be strictly increasing".into()));
    }
    let (obj, targets) = objective_for(model, x, y, spec.goal, rng)?;
    let mut cur = if spec.random_start { random_start(x, &spec.budget, rng)? } else { x.clone() };
    let mut zero = None;
    let mut out = Vec::with_capacity(checkpoints.len());
    let last = checkpoints.last().copied().unwrap_or(0);
    let mut next = 0;
    for it in 1..=last {
        let g = eot_grad(model, &cur, &obj, spec.eot_samples, rng)?;
        zero.get_or_insert_with(|| zero_rows(&g));
        cur = project(&ascend(&cur, &g, spec.budget.norm, spec.step_size)?, x, &spec.budget)?;
        if checkpoints[next] == it {
            out.push(AttackOutput {
                x_adv: cur.clone(),
                zero_gradient: zero.clone().unwrap_or_default(),
                targets: targets.clone(),
            });
            next += 1;
        }
    }
    Ok(out)
}

pub fn pgd(model: &dyn AttackModel, x: &Tensor<f32>, y: &[usize], spec: &AttackSpec, rng: &mut Rng) -> Result<AttackOutput> {
    Ok(pgd_trajectory(model, x, y, spec, &[spec.iterations], rng)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

/// Raw noise before projection: Gaussian with σ = ε/2, or U(−ε, ε).
pub fn noise(shape: &[usize], kind: NoiseKind, epsilon: f64, rng: &mut Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            if epsilon == 0.0 {
                return 0.0;
            }
            match kind {
                NoiseKind::Gaussian => epsilon / 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
                NoiseKind::Uniform => rng.random_range(-epsilon..epsilon),
            }
        })
        .collect()
}

pub fn noise_attack(x: &Tensor<f32>, kind: NoiseKind, budget: &Budget, rng: &mut Rng) -> Result<Tensor<f32>> {
    if budget.norm != Norm::Linf {
        return Err(Error::Config("noise attacks are defined under Linf".into()));
    }
    let n = noise(x.shape(), kind, budget.epsilon, rng);
    let moved = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&n).map(|(&v, &d)| (v as f64 + d) as f32).collect(),
    )?;
    project(&moved, x, budget)
}

fn true_class_prob(model: &dyn AttackModel, x: &Tensor<f32>, y: &[usize], rng: &mut Rng) -> Result<Vec<f64>> {
    let p = ops::softmax_rows(&model.logits(x, rng)?)?;
    Ok(p.iter().zip(y).map(|(row, &c)| row[c]).collect())
}

/// Best of `trials` Gaussian draws: the one minimizing the true-class
/// probability, first draw kept on ties.
pub fn brute_force_search(
    model: &dyn AttackModel,
    x: &Tensor<f32>,
    y: &[usize],
    budget: &Budget,
    trials: usize,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    if trials == 0 {
        return Err(Error::Config("brute-force search needs at least one trial".into()));
    }
    let (b, per) = batch_dims(x)?;
    let mut best = x.data().to_vec();
    let mut best_p = vec![f64::INFINITY; b];
    for _ in 0..trials {
        let cand = noise_attack(x, NoiseKind::Gaussian, budget, rng)?;
        let p = true_class_prob(model, &cand, y, rng)?;
        for s in 0..b {
            if p[s] < best_p[s] {
                best_p[s] = p[s];
                best[s * per..(s + 1) * per].copy_from_slice(&cand.data()[s * per..(s + 1) * per]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), best)
}

/// Simultaneous-perturbation gradient estimate of the per-sample objective:
/// mean over `batch` Rademacher `v` of `(L(x+δv) − L(x−δv)) / (2δ) · v`.
pub fn spsa_gradient(
    model: &dyn AttackModel,
    x: &Tensor<f32>,
    obj: &Objective,
    params: &SpsaParams,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let (b, per) = batch_dims(x)?;
    let mut est = vec![0f64; x.len()];
    let d = params.delta;
    for _ in 0..params.batch {
        let v: Vec<f64> = (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let shift = |sign: f64| {
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(&v).map(|(&a, &r)| (a as f64 + sign * d * r) as f32).collect(),
            )
        };
        let up = obj.values(&model.logits(&shift(1.0)?, rng)?)?;
        let down = obj.values(&model.logits(&shift(-1.0)?, rng)?)?;
        for s in 0..b {
            let coef = (up[s] - down[s]) / (2.0 * d);
            for i in s * per..(s + 1) * per {
                est[i] += coef * v[i];
            }
        }
    }
    let inv = 1.0 / params.batch as f64;
    Tensor::new(x.shape().to_vec(), est.into_iter().map(|e| (e * inv) as f32).collect())
}

pub fn spsa(model: &dyn AttackModel, x: &Tensor<f32>, y: &[usize], spec: &AttackSpec, rng: &mut Rng) -> Result<AttackOutput> {
    let (obj, targets) = objective_for(model, x, y, spec.goal, rng)?;
    let mut cur = x.clone();
    let mut zero = None;
    for _ in 0..spec.iterations {
        let g = spsa_gradient(model, &cur, &obj, &spec.spsa, rng)?;
        zero.get_or_insert_with(|| zero_rows(&g));
        cur = project(&ascend(&cur, &g, Norm::Linf, spec.spsa.lr)?, x, &spec.budget)?;
    }
    let b = y.len();
    Ok(AttackOutput { x_adv: cur, zero_gradient: zero.unwrap_or_else(|| vec![false; b]), targets })
}

/// Run `spec` on one batch with the random stream addressed by `stream`.
pub fn run_attack(model: &dyn AttackModel, x: &Tensor<f32>, y: &[usize], spec: &AttackSpec, stream: &[u64]) -> Result<AttackOutput> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, stream);
    let b = y.len();
    let plain = |x_adv| AttackOutput { x_adv, zero_gradient: vec![false; b], targets: None };
    match spec.kind {
        AttackKind::Clean => Ok(plain(x.clone())),
        AttackKind::Fgsm => fgsm(model, x, y, spec, &mut rng),
        AttackKind::Pgd => pgd(model, x, y, spec, &mut rng),
        AttackKind::GaussianNoise => Ok(plain(noise_attack(x, NoiseKind::Gaussian, &spec.budget, &mut rng)?)),
        AttackKind::UniformNoise => Ok(plain(noise_attack(x, NoiseKind::Uniform, &spec.budget, &mut rng)?)),
        AttackKind::BruteForceSearch => Ok(plain(brute_force_search(model, x, y, &spec.budget, spec.trials, &mut rng)?)),
        AttackKind::Spsa => spsa(model, x, y, spec, &mut rng),
    }
}

/// Largest per-sample distance between `a` and `b` in `norm`.
pub fn max_distance(a: &Tensor<f32>, b: &Tensor<f32>, norm: Norm) -> Result<f64> {
    let (n, per) = batch_dims(a)?;
    if a.shape() != b.shape() {
        return Err(dim_err("max_distance", "shape mismatch"));
    }
    Ok((0..n)
        .map(|s| {
            let d = a.data()[s * per..(s + 1) * per].iter().zip(&b.data()[s * per..(s + 1) * per]).map(|(&u, &v)| (u - v) as f64);
            match norm {
                Norm::Linf => d.fold(0.0f64, |m, v| m.max(v.abs())),
                Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
            }
        })
        .fold(0.0, f64::max))
}

/// Predicted classes for a batch of logits.
pub fn predictions(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    logits.data().chunks(k).map(argmax).collect()
}
