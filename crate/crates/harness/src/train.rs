use crate::config::{AdvKind, CenterMode, ExperimentConfig, RetinaSection};
use ciiv_core::attacks::{self, AttackSpec, Budget, Norm};
use ciiv_core::ctoy::{self, CToySample, Split};
use ciiv_core::defense::{DefendedModel, InferenceConfig, Retina, ViewDraw};
use ciiv_core::nn::{save_checkpoint, CheckpointMeta, ConvNet, Sgd};
use ciiv_core::objective::{total_loss, ViewFeatures};
use ciiv_core::retinotopic::MaskField;
use ciiv_core::rng::{self, Rng};
use ciiv_core::tensor::{ops, Graph, Tensor};
use ciiv_core::{Error, Result};
use rand::seq::SliceRandom;
use std::io::Write;
use std::path::Path;

const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const STEP: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,lr,beta,train_loss,train_acc";

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.4},{:.6},{:.4}", self.epoch, self.lr, self.beta, self.loss, self.accuracy)
    }
}

pub struct Trained {
    pub net: ConvNet,
    pub log: Vec<EpochLog>,
}

pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<CToySample>> {
    match &cfg.dataset.path {
        Some(dir) => {
            let (on_disk, samples) = ctoy::read_split(dir, split)?;
            if on_disk != cfg.dataset.ctoy {
                return Err(Error::Config(format!("dataset at {} was generated with a different config", dir.display())));
            }
            Ok(samples)
        }
        None => ctoy::generate_split(&cfg.dataset.ctoy, split),
    }
}

/// Stack samples `idx` into `[B×3×H×W]` with their labels.
pub fn batch(samples: &[CToySample], idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples.get(*idx.first().ok_or_else(|| Error::Contract("empty batch".into()))?).ok_or(Error::Index {
        op: "batch",
        index: idx[0],
        bound: samples.len(),
    })?;
    let plane = first.geometry_mask.len();
    let side = (plane as f64).sqrt() as usize;
    let (h, w) = if side * side == plane { (side, side) } else { (plane, 1) };
    let mut data = Vec::with_capacity(idx.len() * 3 * plane);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = samples.get(i).ok_or(Error::Index { op: "batch", index: i, bound: samples.len() })?;
        data.extend_from_slice(&s.image);
        labels.push(s.label);
    }
    Ok((Tensor::new(vec![idx.len(), 3, h, w], data)?, labels))
}

pub fn retina_for(cfg: &ExperimentConfig, r: &RetinaSection) -> Result<Retina> {
    let c = &cfg.dataset.ctoy;
    Retina::new(r.mask, r.exposure, c.width, c.height)
}

/// The model attacks and predictions see for a trained network.
pub fn defended(cfg: &ExperimentConfig, net: ConvNet) -> Result<DefendedModel> {
    match &cfg.retina {
        Some(r) => DefendedModel::retinotopic(net, retina_for(cfg, r)?, cfg.inference.clone()),
        None => Ok(DefendedModel::plain(net)),
    }
}

fn training_fields(retina: &Retina, r: &RetinaSection, rng: &mut Rng) -> Result<Vec<MaskField>> {
    match r.centers {
        CenterMode::Fixed => {
            let fixed = retina.fixed_fields();
            if r.n_views >= fixed.len() {
                return Ok(fixed.to_vec());
            }
            let mut pick = rand::seq::index::sample(rng, fixed.len(), r.n_views).into_vec();
            pick.sort_unstable();
            Ok(pick.into_iter().map(|i| fixed[i].clone()).collect())
        }
        CenterMode::Random => (0..r.n_views).map(|_| retina.random_field(rng)).collect(),
    }
}

fn adversarial_batch(
    cfg: &ExperimentConfig,
    net: &ConvNet,
    kind: AdvKind,
    x: &Tensor<f32>,
    y: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let a = cfg.adversarial.as_ref().expect("validated");
    let model = match &cfg.retina {
        Some(r) => {
            let inf = InferenceConfig { views: r.n_views.min(9), ..Default::default() };
            DefendedModel::retinotopic(net.clone(), retina_for(cfg, r)?, inf)?
        }
        None => DefendedModel::plain(net.clone()),
    };
    let spec = match kind {
        AdvKind::Fgsm => AttackSpec { eot_samples: 1, ..AttackSpec::fgsm(a.epsilon) },
        AdvKind::Pgd => AttackSpec { eot_samples: 1, ..AttackSpec::pgd(a.epsilon, a.step_size, a.iterations) },
    };
    let out = match kind {
        AdvKind::Fgsm => attacks::fgsm(&model, x, y, &spec, rng)?,
        AdvKind::Pgd => attacks::pgd(&model, x, y, &spec, rng)?,
    };
    let budget = Budget::linf(a.epsilon);
    if attacks::max_distance(&out.x_adv, x, Norm::Linf)? > budget.epsilon + 1e-6 {
        return Err(Error::Contract("training adversary left its budget".into()));
    }
    Ok(out.x_adv)
}

/// One optimization step; returns (loss, correct rows, rows).
#[allow(clippy::too_many_arguments)]
fn step(
    cfg: &ExperimentConfig,
    net: &mut ConvNet,
    sgd: &mut Sgd,
    retina: Option<&Retina>,
    x: Tensor<f32>,
    y: &[usize],
    lr: f64,
    beta: f64,
    rng: &mut Rng,
) -> Result<(f64, usize, usize)> {
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g, true);
    let xv = g.constant(x);
    let (loss, logits, labels) = match (retina, &cfg.retina) {
        (Some(retina), Some(r)) => {
            let fields = training_fields(retina, r, rng)?;
            let refs: Vec<&MaskField> = fields.iter().collect();
            let draw = ViewDraw::sample(&refs, &r.exposure, y.len(), false, rng);
            let stacked = draw.apply(&mut g, xv)?;
            let feats = net.forward_features(&mut g, &p, stacked)?;
            let logits = net.classify(&mut g, &p, feats)?;
            let vf = ViewFeatures::new(feats, draw.alphas());
            let norm = cfg.ciiv.as_ref().map(|c| c.norm).unwrap_or_default();
            let loss = total_loss(&mut g, logits, y, &vf, beta, norm)?;
            let all: Vec<usize> = (0..fields.len()).flat_map(|_| y.iter().copied()).collect();
            (loss, logits, all)
        }
        _ => {
            let logits = net.logits(&mut g, &p, xv)?;
            (ops::softmax_cross_entropy(&mut g, logits, y)?, logits, y.to_vec())
        }
    };
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let k = net.config().num_classes;
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(&labels)
        .filter(|(row, &c)| ciiv_core::defense::argmax(row) == c)
        .count();
    let grads = g.backward(loss)?;
    let gr = net.collect_grads(&grads, &p);
    drop(grads);
    sgd.step(net.params_mut(), &gr, &cfg.optimizer, lr)?;
    Ok((value, correct, labels.len()))
}

/// Train per `cfg`; with `out`, writes `train_log.csv` and `model.ckpt`.
pub fn train(cfg: &ExperimentConfig, data: &[CToySample], out: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut net = ConvNet::new(cfg.model.clone(), &mut rng::stream(cfg.seed, &[INIT]))?;
    let retina = cfg.retina.as_ref().map(|r| retina_for(cfg, r)).transpose()?;
    let mut sgd = Sgd::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut csv = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("train_log.csv"))?;
            writeln!(f, "{}", EpochLog::HEADER)?;
            Some(f)
        }
        None => None,
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let beta = cfg.ciiv.as_ref().map_or(0.0, |c| c.beta.beta_at(epoch, cfg.epochs));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut correct, mut rows, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for (s, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = rng::stream(cfg.seed, &[STEP, epoch as u64, s as u64]);
            let (mut x, y) = batch(data, idx)?;
            if let Some(kind) = cfg.mode.adversarial() {
                x = adversarial_batch(cfg, &net, kind, &x, &y, &mut rng)?;
            }
            let (l, c, n) = step(cfg, &mut net, &mut sgd, retina.as_ref(), x, &y, lr, beta, &mut rng)?;
            log::debug!("{} epoch {epoch} step {s}: loss {l:.4} acc {:.3}", cfg.name, c as f64 / n as f64);
            loss_sum += l;
            correct += c;
            rows += n;
            steps += 1;
        }
        let row = EpochLog { epoch, lr, beta, loss: loss_sum / steps as f64, accuracy: correct as f64 / rows as f64 };
        log::info!("{} epoch {epoch}: loss {:.4} acc {:.4}", cfg.name, row.loss, row.accuracy);
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.csv_line())?;
        }
        log.push(row);
        if let Some(dir) = out {
            let meta = CheckpointMeta { config_hash: cfg.training_hash(), epoch: epoch + 1, seed: cfg.seed };
            save_checkpoint(&dir.join("model.ckpt"), &net, &meta)?;
        }
    }
    Ok(Trained { net, log })
}
