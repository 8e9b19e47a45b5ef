//! Plain convolutional classifier, SGD with momentum and checkpoints.

use crate::error::{dim_err, Error, Result};
use crate::schedule;
use crate::tensor::{ops, Element, Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub blocks: Vec<ConvBlock>,
    pub num_classes: usize,
}

impl ConvNetConfig {
    /// Four stride-2 3×3 blocks with the given widths.
    pub fn plain(input: (usize, usize, usize), widths: &[usize], num_classes: usize) -> Self {
        Self {
            input,
            blocks: widths
                .iter()
                .map(|&w| ConvBlock { out_channels: w, kernel: 3, stride: 2 })
                .collect(),
            num_classes,
        }
    }

    /// 16-32-64-64 on 64×64 RGB, three classes.
    pub fn ctoy_default() -> Self {
        Self::plain((3, 64, 64), &[16, 32, 64, 64], 3)
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.input.0, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("need at least one conv block".into()));
        }
        let (_, mut h, mut w) = self.input;
        for b in &self.blocks {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Config(format!("degenerate block {b:?}")));
            }
            let p = b.kernel / 2;
            if b.kernel > h + 2 * p || b.kernel > w + 2 * p {
                return Err(Error::Config(format!("block {b:?} too large for {h}x{w}")));
            }
            h = (h + 2 * p - b.kernel) / b.stride + 1;
            w = (w + 2 * p - b.kernel) / b.stride + 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    config: ConvNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

/// Parameters recorded on a graph, in [`ConvNet::param_names`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl ConvNet {
    /// He-normal conv and linear weights, zero biases.
    pub fn new(config: ConvNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut c = config.input.0;
        for (i, b) in config.blocks.iter().enumerate() {
            let fan_in = c * b.kernel * b.kernel;
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            names.push(format!("block{i}.weight"));
            params.push(Tensor::from_fn(vec![b.out_channels, c, b.kernel, b.kernel], |_| {
                n.sample(rng) as f32
            }));
            names.push(format!("block{i}.bias"));
            params.push(Tensor::zeros(vec![b.out_channels]));
            c = b.out_channels;
        }
        let n = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("positive std");
        names.push("fc.weight".into());
        params.push(Tensor::from_fn(vec![config.num_classes, c], |_| n.sample(rng) as f32));
        names.push("fc.bias".into());
        params.push(Tensor::zeros(vec![config.num_classes]));
        Ok(Self { config, names, params })
    }

    /// Rebuild from named tensors, checking every shape against `config`.
    pub fn from_named(config: ConvNetConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let shapes = Self::shapes(&config)?;
        if named.len() != shapes.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(shapes) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} where {want_name} {want_shape:?} expected",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    fn shapes(config: &ConvNetConfig) -> Result<Vec<(String, Vec<usize>)>> {
        config.validate()?;
        let mut out = Vec::new();
        let mut c = config.input.0;
        for (i, b) in config.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), vec![b.out_channels, c, b.kernel, b.kernel]));
            out.push((format!("block{i}.bias"), vec![b.out_channels]));
            c = b.out_channels;
        }
        out.push(("fc.weight".into(), vec![config.num_classes, c]));
        out.push(("fc.bias".into(), vec![config.num_classes]));
        Ok(out)
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Record parameters on `g`; `trainable` makes them gradient leaves.
    pub fn bind<T: Element>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.cast::<T>();
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Conv stack with relu activations, then global average pooling:
    /// `[B×C×H×W] -> [B×D]`.
    pub fn forward_features<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (c, h, w) = self.config.input;
        match g.shape(x) {
            [_, xc, xh, xw] if (*xc, *xh, *xw) == (c, h, w) => {}
            s => {
                return Err(dim_err(
                    "forward_features",
                    format!("input {s:?} for configured {c}x{h}x{w}"),
                ))
            }
        }
        let mut a = x;
        for (i, b) in self.config.blocks.iter().enumerate() {
            a = ops::conv2d_bias_relu(g, a, p.vars[2 * i], p.vars[2 * i + 1], b.stride, b.kernel / 2)?;
        }
        ops::global_avg_pool(g, a)
    }

    /// Linear classifier on pooled features.
    pub fn classify<T: Element>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let n = p.vars.len();
        ops::linear(g, features, p.vars[n - 2], p.vars[n - 1])
    }

    pub fn logits<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let f = self.forward_features(g, p, x)?;
        self.classify(g, p, f)
    }

    /// No-grad logits, evaluated in chunks of at most `chunk` images.
    pub fn predict_logits(&self, x: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::<f32>::new();
            let p = self.bind(&mut g, false);
            let xv = g.constant(x.slice_rows(start, end)?);
            let out = self.logits(&mut g, &p, xv)?;
            parts.push(g.value(out).clone());
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(vec![0, self.config.num_classes]));
        }
        Tensor::concat_rows(&parts)
    }

    /// Gradients of the bound parameters, zeros where none reached.
    pub fn collect_grads(&self, grads: &Gradients<f32>, p: &Bound) -> Vec<Tensor<f32>> {
        p.vars
            .iter()
            .zip(&self.params)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestone_fractions: Vec<f64>,
    pub lr_factor: f64,
    /// rescale the loss gradient to at most this global L2 norm; without
    /// batch normalization the multi-view nets diverge at lr 0.1 otherwise
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestone_fractions: schedule::of_110([10.0, 100.0, 105.0]),
            lr_factor: 0.1,
            max_grad_norm: Some(5.0),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("sgd needs lr > 0, momentum in [0,1), wd >= 0".into()));
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let k = schedule::passed(&self.lr_milestone_fractions, epoch, total_epochs);
        self.lr * self.lr_factor.powi(k as i32)
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `g' = c·g + wd·θ; v ← m·v + g'; θ ← θ − lr·v`, where `c` shrinks `g`
    /// to `max_grad_norm` when set and is 1 otherwise.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], cfg: &SgdConfig, lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err("sgd_step", format!("{} params, {} grads", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let (m, wd, lr) = (cfg.momentum as f32, cfg.weight_decay as f32, lr as f32);
        let c = match cfg.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                if norm > max { (max / norm) as f32 } else { 1.0 }
            }
            None => 1.0,
        };
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.len() {
                return Err(dim_err("sgd_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let mut theta = p.data().to_vec();
            for ((t, &gr), vi) in theta.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let gp = c * gr + wd * *t;
                *vi = m * *vi + gp;
                *t -= lr * *vi;
            }
            *p = Tensor::new(p.shape().to_vec(), theta)?;
        }
        Ok(())
    }
}

/// Sidecar record written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
}

pub fn encode_tensors(named: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in named {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(mut bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    fn u32_at(b: &mut &[u8]) -> Result<u32> {
        let mut buf = [0u8; 4];
        b.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(u32::from_le_bytes(buf))
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let len = u32_at(&mut bytes)? as usize;
        let name = bytes.get(..len).ok_or_else(|| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Format("name not utf-8".into()))?;
        bytes = &bytes[len..];
        let rank = u32_at(&mut bytes)? as usize;
        let shape = (0..rank).map(|_| u32_at(&mut bytes).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let body = bytes.get(..4 * count).ok_or_else(|| Error::Format(format!("truncated data for {name}")))?;
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        bytes = &bytes[4 * count..];
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Write `path` (tensors) and `path.json` (metadata).
pub fn save_checkpoint(path: &Path, net: &ConvNet, meta: &CheckpointMeta) -> Result<()> {
    let named: Vec<(&str, &Tensor<f32>)> = net.names.iter().map(|s| s.as_str()).zip(&net.params).collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::File::create(path)?.write_all(&encode_tensors(&named))?;
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, config: ConvNetConfig) -> Result<(ConvNet, CheckpointMeta)> {
    let net = ConvNet::from_named(config, decode_tensors(&std::fs::read(path)?)?)?;
    let meta = serde_json::from_slice(&std::fs::read(meta_path(path))?)?;
    Ok((net, meta))
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ConvNetConfig {
        ConvNetConfig::plain((2, 8, 8), &[8, 8], 3)
    }

    /// Independent scalar re-implementation of the forward pass.
    fn straight_line(net: &ConvNet, x: &[f64], n: usize) -> Vec<f64> {
        let cfg = net.config();
        let mut out = Vec::new();
        for i in 0..n {
            let (mut c, mut h, mut w) = cfg.input;
            let mut a: Vec<f64> = x[i * c * h * w..(i + 1) * c * h * w].to_vec();
            for (bi, b) in cfg.blocks.iter().enumerate() {
                let k = &net.params()[2 * bi];
                let bias = &net.params()[2 * bi + 1];
                let p = b.kernel / 2;
                let oh = (h + 2 * p - b.kernel) / b.stride + 1;
                let ow = (w + 2 * p - b.kernel) / b.stride + 1;
                let f = b.out_channels;
                let mut next = vec![0.0; f * oh * ow];
                for fo in 0..f {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bias.data()[fo] as f64;
                            for ci in 0..c {
                                for ky in 0..b.kernel {
                                    for kx in 0..b.kernel {
                                        let iy = (oy * b.stride + ky) as isize - p as isize;
                                        let ix = (ox * b.stride + kx) as isize - p as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let kv = k.data()[((fo * c + ci) * b.kernel + ky) * b.kernel + kx] as f64;
                                        s += kv * a[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            next[(fo * oh + oy) * ow + ox] = s.max(0.0);
                        }
                    }
                }
                a = next;
                c = f;
                h = oh;
                w = ow;
            }
            let feats: Vec<f64> = (0..c).map(|ci| a[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
            let fw = &net.params()[net.params().len() - 2];
            let fb = &net.params()[net.params().len() - 1];
            for k in 0..cfg.num_classes {
                out.push(fb.data()[k] as f64 + (0..c).map(|d| fw.data()[k * c + d] as f64 * feats[d]).sum::<f64>());
            }
        }
        out
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = ConvNet::new(tiny(), &mut rng).unwrap();
        for p in net.params_mut() {
            *p = Tensor::from_fn(p.shape().to_vec(), |_| rng.random_range(-0.5..0.5));
        }
        let x = Tensor::from_fn(vec![3, 2, 8, 8], |_| rng.random_range(0.0..1.0f32));
        let got = net.predict_logits(&x, 2).unwrap();
        let want = straight_line(&net, x.cast::<f64>().data(), 3);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_weights_give_zero_features_and_bias_logits() {
        let mut net = ConvNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n = net.params().len();
        for p in net.params_mut() {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        net.params_mut()[n - 1] = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut g = Graph::<f32>::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::full(vec![2, 2, 8, 8], 0.7));
        let f = net.forward_features(&mut g, &p, x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        let l = net.classify(&mut g, &p, f).unwrap();
        assert_eq!(g.value(l).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn final_bias_shifts_pooled_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = ConvNet::new(tiny(), &mut rng).unwrap();
        // a large bias keeps every final activation positive, so the shift is exact
        net.params_mut()[3] = Tensor::full(vec![8], 5.0);
        let x = Tensor::from_fn(vec![1, 2, 8, 8], |_| rng.random_range(0.0..1.0f32));
        let feats = |net: &ConvNet| {
            let mut g = Graph::<f64>::new();
            let p = net.bind(&mut g, false);
            let xv = g.constant(x.cast());
            let f = net.forward_features(&mut g, &p, xv).unwrap();
            g.value(f).clone()
        };
        let a = feats(&net);
        net.params_mut()[3] = Tensor::full(vec![8], 10.0);
        let b = feats(&net);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((v - u - 5.0).abs() < 1e-5);
        }
    }

    #[test]
    fn shape_errors() {
        let net = ConvNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::<f32>::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        assert!(net.forward_features(&mut g, &p, x).is_err());
        let f = g.constant(Tensor::zeros(vec![1, 5]));
        assert!(net.classify(&mut g, &p, f).is_err());
        assert!(ConvNetConfig::plain((3, 8, 8), &[4], 1).validate().is_err());
    }

    #[test]
    fn end_to_end_gradient_check_on_tiny_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = ConvNet::new(tiny(), &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(vec![2, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let err = grad_check(
            |g, xv| {
                let p = net.bind(g, false);
                let l = net.logits(g, &p, xv)?;
                ops::softmax_cross_entropy(g, l, &[0, 2])
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn sgd_hand_iterations() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0, ..Default::default() };
        let mut theta = vec![Tensor::scalar(0.0f32)];
        let g = vec![Tensor::scalar(1.0f32)];
        let mut opt = Sgd::new();
        opt.step(&mut theta, &g, &cfg, cfg.lr).unwrap();
        assert!((theta[0].data()[0] + 0.1).abs() < 1e-7);
        opt.step(&mut theta, &g, &cfg, cfg.lr).unwrap();
        assert!((theta[0].data()[0] + 0.29).abs() < 1e-6);

        let plain = SgdConfig { momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let mut t = vec![Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap()];
        Sgd::new().step(&mut t, &[Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()], &plain, 0.2).unwrap();
        assert_eq!(t[0].data(), &[0.9, -2.1]);
        let mut t2 = t.clone();
        Sgd::new().step(&mut t2, &[Tensor::zeros(vec![2])], &plain, 0.2).unwrap();
        assert_eq!(t2, t);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0, max_grad_norm: Some(1.0), ..Default::default() };
        let mut t = vec![Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap()];
        Sgd::new().step(&mut t, &[Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()], &cfg, 1.0).unwrap();
        assert!((t[0].data()[0] + 0.6).abs() < 1e-6 && (t[0].data()[1] + 0.8).abs() < 1e-6);
        let mut u = vec![Tensor::scalar(0.0f32)];
        Sgd::new().step(&mut u, &[Tensor::scalar(0.5f32)], &cfg, 1.0).unwrap();
        assert_eq!(u[0].data(), &[-0.5]);
        assert!(SgdConfig { max_grad_norm: Some(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn lr_schedule_values() {
        let c = SgdConfig::default();
        assert!((c.lr_at(5, 110) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(106, 110) - 1e-4).abs() < 1e-12);
        assert!((c.lr_at(2, 22) - 0.01).abs() < 1e-12);
        assert!((c.lr_at(1, 22) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = ConvNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = std::env::temp_dir().join(format!("ciiv-ckpt-{}", std::process::id()));
        let path = dir.join("model.bin");
        let meta = CheckpointMeta { config_hash: "abc".into(), epoch: 4, seed: 9 };
        save_checkpoint(&path, &net, &meta).unwrap();
        let (back, m) = load_checkpoint(&path, tiny()).unwrap();
        assert_eq!(back, net);
        assert_eq!(m, meta);
        assert!(load_checkpoint(&path, ConvNetConfig::plain((2, 8, 8), &[8, 4], 3)).is_err());
        std::fs::remove_dir_all(dir).ok();
        assert!(decode_tensors(&[1, 0, 0]).is_err());
    }

    #[test]
    fn separable_toy_fits() {
        // two bright-corner patterns plus a dark one, 20 samples
        let cfg = ConvNetConfig::plain((1, 8, 8), &[8, 8], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut net = ConvNet::new(cfg, &mut rng).unwrap();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let x = Tensor::from_fn(vec![20, 1, 8, 8], |idx| {
            let (i, p) = (idx / 64, idx % 64);
            let (y, xx) = (p / 8, p % 8);
            let on = match labels[i] {
                0 => y < 4 && xx < 4,
                1 => y >= 4 && xx >= 4,
                _ => false,
            };
            if on { 1.0 } else { 0.1 * ((idx * 7) % 5) as f32 / 5.0 }
        });
        let sgd = SgdConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut opt = Sgd::new();
        let mut acc = 0.0;
        for _ in 0..200 {
            let mut g = Graph::<f32>::new();
            let p = net.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let l = net.logits(&mut g, &p, xv).unwrap();
            let logits = g.value(l).clone();
            acc = logits.data().chunks(3).zip(&labels).filter(|(r, &y)| {
                r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == y
            }).count() as f64 / 20.0;
            if acc == 1.0 {
                break;
            }
            let loss = ops::softmax_cross_entropy(&mut g, l, &labels).unwrap();
            let grads = g.backward(loss).unwrap();
            let gs = net.collect_grads(&grads, &p);
            opt.step(net.params_mut(), &gs, &sgd, sgd.lr).unwrap();
        }
        assert_eq!(acc, 1.0);
    }

    proptest! {
        #[test]
        fn weight_decay_equals_l2_penalty(theta in prop::collection::vec(-3.0..3.0f32, 1..6),
                                          grad_seed in prop::collection::vec(-1.0..1.0f32, 6),
                                          wd in 0.0..0.1f64, lr in 0.001..0.5f64) {
            let n = theta.len();
            let g: Vec<f32> = grad_seed[..n].to_vec();
            let with_wd = SgdConfig { momentum: 0.0, weight_decay: wd, ..Default::default() };
            let no_wd = SgdConfig { momentum: 0.0, weight_decay: 0.0, ..Default::default() };
            let mut a = vec![Tensor::new(vec![n], theta.clone()).unwrap()];
            Sgd::new().step(&mut a, &[Tensor::new(vec![n], g.clone()).unwrap()], &with_wd, lr).unwrap();
            // gradient of (wd/2)·‖θ‖² is wd·θ
            let pen: Vec<f32> = g.iter().zip(&theta).map(|(gi, t)| gi + wd as f32 * t).collect();
            let mut b = vec![Tensor::new(vec![n], theta).unwrap()];
            Sgd::new().step(&mut b, &[Tensor::new(vec![n], pen).unwrap()], &no_wd, lr).unwrap();
            for (x, y) in a[0].data().iter().zip(b[0].data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
