use crate::report::{ReportRow, ReportTable};
use crate::train::batch;
use ciiv_core::attacks::{self, AttackKind, AttackSpec};
use ciiv_core::ctoy::{confounder_energy, CToySample};
use ciiv_core::defense::AttackModel;
use ciiv_core::exec::Exec;
use ciiv_core::image::{encode_ppm, write_bytes};
use ciiv_core::rng;
use ciiv_core::tensor::Tensor;
use ciiv_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

const ATTACK: u64 = 11;
const PREDICT: u64 = 12;

fn batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Predicted classes under the model's inference rule.
pub fn predict(model: &dyn AttackModel, x: &Tensor<f32>, seed: u64, stream: u64) -> Result<Vec<usize>> {
    let l = model.logits(x, &mut rng::stream(seed, &[PREDICT, stream]))?;
    Ok(attacks::predictions(&l))
}

fn check_feasible(spec: &AttackSpec, adv: &Tensor<f32>, x: &Tensor<f32>) -> Result<()> {
    let d = attacks::max_distance(adv, x, spec.budget.norm)?;
    if d > spec.budget.epsilon + 1e-5 || adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!("{} produced an infeasible input (distance {d})", spec.name)));
    }
    Ok(())
}

/// Per-batch correctness of `spec` on `samples`.
fn correct_counts(
    model: &dyn AttackModel,
    samples: &[CToySample],
    spec: &AttackSpec,
    batch_size: usize,
    exec: Exec,
) -> Result<usize> {
    let groups = batches(samples.len(), batch_size);
    let per = exec.map(groups.len(), |b| -> Result<usize> {
        let (x, y) = batch(samples, &groups[b])?;
        let out = attacks::run_attack(model, &x, &y, spec, &[ATTACK, b as u64])?;
        check_feasible(spec, &out.x_adv, &x)?;
        let pred = predict(model, &out.x_adv, spec.seed, b as u64)?;
        Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count())
    });
    per.into_iter().sum()
}

pub fn accuracy_under(model: &dyn AttackModel, samples: &[CToySample], spec: &AttackSpec, batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no evaluation samples".into()));
    }
    let c = correct_counts(model, samples, spec, batch_size, Exec::default())?;
    Ok(100.0 * c as f64 / samples.len() as f64)
}

/// One row per attack for `defender`.
pub fn evaluate(
    model: &dyn AttackModel,
    defender: &str,
    attacks: &[AttackSpec],
    samples: &[CToySample],
    batch_size: usize,
    seed: u64,
) -> Result<ReportTable> {
    if attacks.is_empty() {
        return Err(Error::Config("evaluate needs at least one attack".into()));
    }
    let mut t = ReportTable::default();
    for spec in attacks {
        let spec = AttackSpec { seed: spec.seed ^ seed, ..spec.clone() };
        let acc = accuracy_under(model, samples, &spec, batch_size)?;
        log::info!("{defender} / {}: {acc:.2}%", spec.name);
        t.push(ReportRow { defender: defender.into(), attack: spec.name.clone(), accuracy: acc, n_eval: samples.len(), seed });
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub accuracy: f64,
}

/// Accuracy of `base` at each budget in `eps` (must be non-decreasing).
/// With a PGD base the step scales with ε as `step/ε` is kept fixed.
pub fn sweep_epsilon(
    model: &dyn AttackModel,
    base: &AttackSpec,
    eps: &[f64],
    samples: &[CToySample],
    batch_size: usize,
) -> Result<Vec<CurvePoint>> {
    if eps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("epsilon list must be non-decreasing".into()));
    }
    let ratio = if base.budget.epsilon > 0.0 { base.step_size / base.budget.epsilon } else { 0.25 };
    eps.iter()
        .map(|&e| {
            let mut spec = base.clone();
            spec.budget.epsilon = e;
            spec.step_size = if e > 0.0 { ratio * e } else { base.step_size };
            if e == 0.0 {
                spec.kind = AttackKind::Clean;
            }
            Ok(CurvePoint { x: e, accuracy: accuracy_under(model, samples, &spec, batch_size)? })
        })
        .collect()
}

/// PGD accuracy after each iteration count in `iters` (strictly
/// increasing), read off one run of `max(iters)` steps.
pub fn sweep_iterations(
    model: &dyn AttackModel,
    base: &AttackSpec,
    iters: &[usize],
    samples: &[CToySample],
    batch_size: usize,
) -> Result<Vec<CurvePoint>> {
    if base.kind != AttackKind::Pgd {
        return Err(Error::Config("iteration sweeps need a PGD spec".into()));
    }
    if iters.is_empty() || iters[0] == 0 || iters.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("iteration list must be strictly increasing from 1".into()));
    }
    let spec = AttackSpec { iterations: *iters.last().expect("non-empty"), ..base.clone() };
    let groups = batches(samples.len(), batch_size);
    let per = Exec::default().map(groups.len(), |b| -> Result<Vec<usize>> {
        let (x, y) = batch(samples, &groups[b])?;
        let mut r = rng::stream(spec.seed, &[ATTACK, b as u64]);
        let traj = attacks::pgd_trajectory(model, &x, &y, &spec, iters, &mut r)?;
        traj.iter()
            .map(|o| {
                check_feasible(&spec, &o.x_adv, &x)?;
                let p = predict(model, &o.x_adv, spec.seed, b as u64)?;
                Ok(p.iter().zip(&y).filter(|(p, t)| p == t).count())
            })
            .collect()
    });
    let mut totals = vec![0usize; iters.len()];
    for counts in per {
        for (t, c) in totals.iter_mut().zip(counts?) {
            *t += c;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(iters.iter().zip(totals).map(|(&k, c)| CurvePoint { x: k as f64, accuracy: 100.0 * c as f64 / n }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub index: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub success: bool,
    /// `None` when the perturbation is identically zero
    pub energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub rows: Vec<PerturbationRow>,
    /// mean over rows with a perturbation
    pub mean_energy: Option<f64>,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label,clean_pred,adv_pred,success,confounder_energy\n");
        for r in &self.rows {
            let e = r.energy.map_or("no perturbation".to_string(), |e| format!("{e:.6}"));
            let _ = writeln!(s, "{},{},{},{},{},{e}", r.index, r.label, r.clean_pred, r.adv_pred, r.success);
        }
        s
    }
}

/// row, adversarial image, raw perturbation
type Dumped = (PerturbationRow, Vec<f32>, Vec<f32>);

/// `|δ|` scaled so the largest entry maps to 1; zero stays black.
pub fn amplify(delta: &[f32]) -> Vec<f32> {
    let m = delta.iter().fold(0f32, |m, d| m.max(d.abs()));
    if m == 0.0 {
        return vec![0.0; delta.len()];
    }
    delta.iter().map(|d| d.abs() / m).collect()
}

/// Attack `samples` and report confounder energy; with `dir`, also write
/// `x_i.ppm`, `adv_i.ppm`, `delta_i.ppm` for the first `max_images`.
pub fn dump_perturbations(
    model: &dyn AttackModel,
    samples: &[CToySample],
    spec: &AttackSpec,
    batch_size: usize,
    dir: Option<(&Path, usize)>,
) -> Result<EnergyReport> {
    let groups = batches(samples.len(), batch_size);
    let per = Exec::default().map(groups.len(), |b| -> Result<Vec<Dumped>> {
        let (x, y) = batch(samples, &groups[b])?;
        let clean = predict(model, &x, spec.seed, b as u64)?;
        let out = attacks::run_attack(model, &x, &y, spec, &[ATTACK, b as u64])?;
        check_feasible(spec, &out.x_adv, &x)?;
        let adv = predict(model, &out.x_adv, spec.seed, b as u64)?;
        let per = x.len() / y.len();
        groups[b]
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let xs = &x.data()[j * per..(j + 1) * per];
                let xa = out.x_adv.data()[j * per..(j + 1) * per].to_vec();
                let delta: Vec<f32> = xa.iter().zip(xs).map(|(a, c)| a - c).collect();
                let energy = confounder_energy(&delta, &samples[i])?;
                let row = PerturbationRow { index: i, label: y[j], clean_pred: clean[j], adv_pred: adv[j], success: adv[j] != y[j], energy };
                Ok((row, xa, delta))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(samples.len());
    let plane = samples.first().map_or(0, |s| s.geometry_mask.len());
    let side = (plane as f64).sqrt() as usize;
    for part in per {
        for (row, xa, delta) in part? {
            if let Some((d, max)) = dir {
                if row.index < max {
                    let i = row.index;
                    std::fs::create_dir_all(d)?;
                    write_bytes(&d.join(format!("x_{i}.ppm")), &encode_ppm(side, side, &samples[i].image)?)?;
                    write_bytes(&d.join(format!("adv_{i}.ppm")), &encode_ppm(side, side, &xa)?)?;
                    write_bytes(&d.join(format!("delta_{i}.ppm")), &encode_ppm(side, side, &amplify(&delta))?)?;
                }
            }
            rows.push(row);
        }
    }
    let es: Vec<f64> = rows.iter().filter_map(|r| r.energy).collect();
    let mean_energy = (!es.is_empty()).then(|| es.iter().sum::<f64>() / es.len() as f64);
    Ok(EnergyReport { rows, mean_energy })
}

