//! End-to-end acceptance checks; one PASS/FAIL line per criterion.
//!
//! Trained CToy models are cached under the cargo target tmpdir, keyed by
//! the training hash, so only the first run pays for training.

use ciiv_core::attacks::{AttackGoal, AttackKind, AttackSpec, Budget, SpsaParams};
use ciiv_core::ctoy::{CToySample, Split};
use ciiv_core::defense::DefendedModel;
use ciiv_core::nn::{load_checkpoint, ConvNet, ConvNetConfig};
use ciiv_core::objective::{ciiv_loss, CiivNorm, ViewFeatures};
use ciiv_core::retinotopic::{augment, center_grid, ExposureParams, MaskField, MaskParams, RetinotopicMask};
use ciiv_core::rng::{self, Rng};
use ciiv_core::scm::{self, Instrument, LinearScm};
use ciiv_core::tensor::gradcheck::grad_check;
use ciiv_core::tensor::{ops, Graph, Tensor, Var};
use ciiv_harness::config::{DefenseMode, ExperimentConfig};
use ciiv_harness::{eval, report, train};
use rand::Rng as _;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

type R<T> = Result<T, String>;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line { pass, detail: detail.into() }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

type Case = Box<dyn Fn(&mut Graph<f64>, Var) -> ciiv_core::Result<Var>>;

fn rand_t(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Contract an op's output with fixed random weights so every output
/// coordinate contributes.
fn contract(g: &mut Graph<f64>, out: Var, r: &mut Rng) -> ciiv_core::Result<Var> {
    let w = rand_t(r, g.shape(out));
    let wv = g.constant(w);
    let p = ops::mul(g, out, wv)?;
    ops::sum(g, p)
}

/// (name, input shape, case) for instance `seed`.
fn op_cases(seed: u64) -> Vec<(&'static str, Vec<usize>, Case)> {
    let mut r = rng::stream(seed, &[1]);
    let other = rand_t(&mut r, &[3, 4]);
    let mat = rand_t(&mut r, &[4, 5]);
    let lin_w = rand_t(&mut r, &[3, 4]);
    let lin_b = rand_t(&mut r, &[3]);
    let kern = rand_t(&mut r, &[3, 2, 3, 3]);
    let cbias = rand_t(&mut r, &[3]);
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    let weights: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let mask_params = MaskParams::default();
    let masks: Vec<RetinotopicMask> = (0..2)
        .map(|_| MaskField::new(mask_params, (r.random_range(0..6), r.random_range(0..6)), 6, 6).unwrap().sample(&mut r))
        .collect();
    let exposures: Vec<Vec<f64>> = (0..2).map(|_| ExposureParams::default().draw(&mut r)).collect();
    let alphas: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| r.random_range(0.1..1.0)).collect()).collect();
    let cs = rng::derive_seed(seed, &[2]);
    let with = move |f: Case| -> Case {
        Box::new(move |g, x| {
            let out = f(g, x)?;
            contract(g, out, &mut rng::stream(cs, &[]))
        })
    };
    let o = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let o4 = other;
    vec![
        ("add", vec![3, 4], with(Box::new(move |g, x| { let b = g.constant(o.clone()); ops::add(g, x, b) }))),
        ("sub", vec![3, 4], with(Box::new(move |g, x| { let b = g.constant(o2.clone()); ops::sub(g, b, x) }))),
        ("mul", vec![3, 4], with(Box::new(move |g, x| { let b = g.constant(o3.clone()); ops::mul(g, x, b) }))),
        ("mul_self", vec![3, 4], with(Box::new(|g, x| ops::mul(g, x, x)))),
        ("scale", vec![3, 4], with(Box::new(|g, x| ops::scale(g, x, -1.7)))),
        ("sum", vec![3, 4], Box::new(ops::sum)),
        ("mean", vec![3, 4], Box::new(ops::mean)),
        ("relu", vec![3, 4], with(Box::new(ops::relu))),
        ("l1_diff", vec![3, 4], Box::new(move |g, x| { let b = g.constant(o4.clone()); ops::l1_diff(g, x, b) })),
        ("reshape", vec![3, 4], with(Box::new(|g, x| ops::reshape(g, x, &[2, 6])))),
        ("concat_rows", vec![3, 4], with(Box::new(|g, x| ops::concat_rows(g, &[x, x])))),
        ("slice_rows", vec![3, 4], with(Box::new(|g, x| ops::slice_rows(g, x, 1, 3)))),
        ("mean_groups", vec![6, 2], with(Box::new(|g, x| ops::mean_groups(g, x, 3)))),
        ("matmul_left", vec![3, 4], with(Box::new({ let m = mat.clone(); move |g, x| { let b = g.constant(m.clone()); ops::matmul(g, x, b) } }))),
        ("matmul_right", vec![4, 5], with(Box::new({ let m = lin_w.clone(); move |g, x| { let a = g.constant(m.clone()); ops::matmul(g, a, x) } }))),
        ("linear", vec![2, 4], with(Box::new({ let (w, b) = (lin_w.clone(), lin_b.clone()); move |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone())); ops::linear(g, x, w, b) } }))),
        ("linear_weight", vec![3, 4], with(Box::new({ let b = lin_b.clone(); let xin = rand_t(&mut rng::stream(seed, &[3]), &[2, 4]); move |g, w| {
            let (xv, bv) = (g.constant(xin.clone()), g.constant(b.clone())); ops::linear(g, xv, w, bv) } }))),
        ("conv2d_s1", vec![2, 2, 5, 5], with(Box::new({ let k = kern.clone(); move |g, x| { let k = g.constant(k.clone()); ops::conv2d(g, x, k, 1, 1) } }))),
        ("conv2d_s2", vec![2, 2, 6, 6], with(Box::new({ let k = kern.clone(); move |g, x| { let k = g.constant(k.clone()); ops::conv2d(g, x, k, 2, 1) } }))),
        ("conv2d_kernel", vec![3, 2, 3, 3], with(Box::new({ let xin = rand_t(&mut rng::stream(seed, &[4]), &[2, 2, 5, 5]); move |g, k| {
            let xv = g.constant(xin.clone()); ops::conv2d(g, xv, k, 1, 1) } }))),
        ("conv2d_bias_relu", vec![2, 2, 6, 6], with(Box::new({ let (k, b) = (kern.clone(), cbias.clone()); move |g, x| {
            let (k, b) = (g.constant(k.clone()), g.constant(b.clone())); ops::conv2d_bias_relu(g, x, k, b, 2, 1) } }))),
        ("add_channel_bias", vec![2, 3, 2, 2], with(Box::new(move |g, x| { let b = g.constant(cbias.clone()); ops::add_channel_bias(g, x, b) }))),
        ("global_avg_pool", vec![2, 3, 3, 3], with(Box::new(ops::global_avg_pool))),
        ("softmax_cross_entropy", vec![3, 4], Box::new({ let l = labels.clone(); move |g, x| ops::softmax_cross_entropy(g, x, &l) })),
        ("weighted_cross_entropy", vec![3, 4], Box::new(move |g, x| ops::weighted_cross_entropy(g, x, &labels, &weights))),
        ("augment", vec![2, 3, 6, 6], with(Box::new(move |g, x| augment(g, x, &masks, &exposures)))),
        ("ciiv_loss_l1", vec![6, 4], Box::new({ let a = alphas.clone(); move |g, x| ciiv_loss(g, &ViewFeatures::new(x, a.clone()), CiivNorm::L1) })),
        ("ciiv_loss_l2", vec![6, 4], Box::new(move |g, x| ciiv_loss(g, &ViewFeatures::new(x, alphas.clone()), CiivNorm::L2))),
    ]
}

fn tiny_net(seed: u64) -> ConvNet {
    let cfg = ConvNetConfig::plain((3, 8, 8), &[4, 6], 3);
    ConvNet::new(cfg, &mut rng::stream(seed, &[5])).unwrap()
}

fn crit_autodiff() -> R<Line> {
    let mut worst = 0f64;
    let mut worst_op = "";
    let mut count = 0;
    for seed in 0..50u64 {
        for (name, shape, case) in op_cases(seed) {
            let x = rand_t(&mut rng::stream(seed, &[9, count as u64]), &shape);
            let err = grad_check(case, &x, 1e-3).map_err(|er| format!("{name}: {er}"))?;
            count += 1;
            if err > worst {
                worst = err;
                worst_op = name;
            }
        }
        let net = tiny_net(seed);
        let labels = [0usize, 2];
        let x = Tensor::<f64>::from_fn(vec![2, 3, 8, 8], {
            let mut r = rng::stream(seed, &[6]);
            move |_| r.random_range(0.0..1.0)
        });
        let err = grad_check(
            |g, xv| {
                let p = net.bind(g, false);
                let l = net.logits(g, &p, xv)?;
                ops::softmax_cross_entropy(g, l, &labels)
            },
            &x,
            1e-3,
        )
        .map_err(e)?;
        // and through the first kernel, the rest of the net held fixed
        let k0 = net.params()[0].cast::<f64>();
        let kerr = grad_check(
            |g, kv| {
                let p = net.bind(g, false);
                let xv = g.constant(x.clone());
                let a = ops::conv2d_bias_relu(g, xv, kv, p.vars[1], 2, 1)?;
                let a = ops::conv2d_bias_relu(g, a, p.vars[2], p.vars[3], 2, 1)?;
                let f = ops::global_avg_pool(g, a)?;
                let l = ops::linear(g, f, p.vars[4], p.vars[5])?;
                ops::softmax_cross_entropy(g, l, &labels)
            },
            &k0,
            1e-3,
        )
        .map_err(e)?;
        count += 2;
        for (n, v) in [("tiny_net_input", err), ("tiny_net_kernel", kerr)] {
            if v > worst {
                worst = v;
                worst_op = n;
            }
        }
    }
    Ok(line(worst < 1e-3, format!("{count} checks, max rel error {worst:.2e} ({worst_op}), bound 1e-3")))
}

// ---------------------------------------------------------------- 2

fn crit_mask_law() -> R<Line> {
    let (w, h) = (32, 32);
    let params = MaskParams::default();
    let n = 10_000usize;
    let mut beyond = 0usize;
    let mut interior = 0usize;
    let mut max_z = 0f64;
    let mut exact_violations = 0usize;
    let mut g0 = true;
    for (ci, c) in center_grid(w, h).map_err(e)?.into_iter().enumerate() {
        let field = MaskField::new(params, c, w, h).map_err(e)?;
        g0 &= field.g()[c.1 * w + c.0] == 1.0;
        let p = field.keep_probabilities();
        let mut counts = vec![0usize; w * h];
        let mut r = rng::stream(7, &[ci as u64]);
        for _ in 0..n {
            for (k, kept) in field.sample(&mut r).grid().iter().enumerate() {
                counts[k] += *kept as usize;
            }
        }
        for (k, &cnt) in counts.iter().enumerate() {
            let freq = cnt as f64 / n as f64;
            let se = (p[k] * (1.0 - p[k]) / n as f64).sqrt();
            if se == 0.0 {
                exact_violations += (freq != p[k]) as usize;
                continue;
            }
            interior += 1;
            let z = (freq - p[k]).abs() / se;
            max_z = max_z.max(z);
            beyond += (z > 3.0) as usize;
        }
    }
    // under the law each interior pixel leaves 3 SE with probability 0.27%
    let expect = interior as f64 * 0.0027;
    let allowed = (expect + 3.0 * expect.sqrt()).ceil() as usize;
    // masks are drawn before any image is seen; augmenting two different
    // images with one draw must gate them on exactly the kept pixels
    let independent = {
        let field = MaskField::new(params, (16, 16), w, h).map_err(e)?;
        let mut r = rng::stream(3, &[0]);
        let masks: Vec<RetinotopicMask> = (0..8).map(|_| field.sample(&mut r)).collect();
        let mut ok = true;
        for fill in [0.25f64, 0.75] {
            let x = Tensor::<f64>::from_fn(vec![8, 3, h, w], |i| fill + 0.2 * ((i % 7) as f64 / 7.0));
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let out = augment(&mut g, xv, &masks, &[vec![0.0]]).map_err(e)?;
            let plane = w * h;
            for (k, v) in g.value(out).data().iter().enumerate() {
                let keep = masks[k / (3 * plane)].grid()[k % plane];
                ok &= *v == if keep { x.data()[k] } else { 0.0 };
            }
        }
        ok
    };
    let pass = g0 && exact_violations == 0 && beyond <= allowed && independent;
    Ok(line(
        pass,
        format!(
            "9 centers x {n} masks at 32x32: {beyond}/{interior} pixels beyond 3 SE (allowed {allowed}), max z {max_z:.2}, \
             deterministic pixels off {exact_violations}, g(0)=1 {g0}, image-independent {independent}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn ciiv_value(feats: &[f64], shape: [usize; 2], alphas: Vec<Vec<f64>>, norm: CiivNorm) -> R<f64> {
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::new(shape.to_vec(), feats.to_vec()).map_err(e)?);
    let l = ciiv_loss(&mut g, &ViewFeatures::new(f, alphas), norm).map_err(e)?;
    g.value(l).item().map_err(e)
}

fn crit_ciiv_identities() -> R<Line> {
    // two views, one sample, D=2: |1·[1,0] − 0.5·[1,2]|₁ = 1.5, over pairs·B·D = 2
    let hand = ciiv_value(&[1.0, 0.0, 1.0, 2.0], [2, 2], vec![vec![0.5], vec![1.0]], CiivNorm::L1)?;
    let hand_ok = (hand * 2.0 - 1.5).abs() < 1e-12 && (hand - 0.75).abs() < 1e-12;
    let mut r = rng::stream(11, &[]);
    let mut linear_max = 0f64;
    let mut perm_max = 0f64;
    let mut swap_max = 0f64;
    for _ in 0..100 {
        let (v, b, d) = (r.random_range(2..6), r.random_range(1..4), r.random_range(1..5));
        let alphas: Vec<Vec<f64>> = (0..v).map(|_| (0..b).map(|_| r.random_range(0.05..1.0)).collect()).collect();
        let u: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let lin: Vec<f64> = (0..v).flat_map(|i| (0..b).flat_map({ let (a, u) = (&alphas, &u); move |s| u[s].iter().map(move |x| a[i][s] * x) })).collect();
        let feats: Vec<f64> = (0..v * b * d).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut perm: Vec<usize> = (0..v).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * b * d..(i + 1) * b * d].to_vec()).collect();
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| alphas[i].clone()).collect();
        for norm in [CiivNorm::L1, CiivNorm::L2] {
            linear_max = linear_max.max(ciiv_value(&lin, [v * b, d], alphas.clone(), norm)?.abs());
            let base = ciiv_value(&feats, [v * b, d], alphas.clone(), norm)?;
            perm_max = perm_max.max((ciiv_value(&pf, [v * b, d], pa.clone(), norm)? - base).abs());
            // reversing all views swaps the roles inside every pair
            let rf: Vec<f64> = (0..v).rev().flat_map(|i| feats[i * b * d..(i + 1) * b * d].to_vec()).collect();
            let ra: Vec<Vec<f64>> = alphas.iter().rev().cloned().collect();
            swap_max = swap_max.max((ciiv_value(&rf, [v * b, d], ra, norm)? - base).abs());
        }
    }
    let pass = hand_ok && linear_max < 1e-12 && perm_max < 1e-12 && swap_max < 1e-12;
    Ok(line(
        pass,
        format!(
            "hand example unnormalized {:.4} (normalized {hand:.4}); linear residual {linear_max:.1e}; \
             permutation drift {perm_max:.1e}; pair-swap drift {swap_max:.1e}",
            hand * 2.0
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn crit_scm() -> R<Line> {
    let n = 100_000;
    let runs = 10;
    let base = LinearScm { w_xy: 2.0, w_cx: 1.0, w_cy: 1.0, w_rx: 1.0, sigma_b: 1.0, ..Default::default() };
    let obs = base.without_instrument();
    let inst = LinearScm { instrument: Instrument::Binary { values: (0.0, 1.0) }, ..base };
    let (mut ols, mut iv, mut bd, mut corr) = (0.0, 0.0, 0.0, 0.0f64);
    for run in 0..runs {
        let s = scm::simulate(&obs, n, &mut rng::stream(40, &[run])).map_err(e)?;
        ols += scm::ols_slope(&s).map_err(e)?;
        let s = scm::simulate(&inst, n, &mut rng::stream(41, &[run])).map_err(e)?;
        iv += scm::iv_estimate(&s).map_err(e)?;
        bd += scm::backdoor_estimate(&s).map_err(e)?.0;
        let rr: Vec<f64> = s.iter().map(|v| v.r.unwrap()).collect();
        let cc: Vec<f64> = s.iter().map(|v| v.c).collect();
        corr = corr.max(scm::correlation(&rr, &cc).abs());
    }
    let k = runs as f64;
    let (ols, iv, bd) = (ols / k, iv / k, bd / k);
    let bound = 3.0 / (n as f64).sqrt();
    let pass = (ols - 2.5).abs() < 0.05 && (iv - 2.0).abs() < 0.05 && (bd - 2.0).abs() < 0.05 && corr < bound;
    Ok(line(pass, format!("ols {ols:.4} (target 2.5), iv {iv:.4}, backdoor {bd:.4} (target 2.0), max |corr(r,c)| {corr:.5} < {bound:.5}")))
}

// ---------------------------------------------------------------- 5

fn crit_overall() -> R<Line> {
    let a = report::overall(&[94.42, 30.82, 0.04, 0.0, 0.0]);
    let b = report::overall(&[77.32, 16.60, 0.49, 0.0, 0.0]);
    Ok(line(a == 25.06 && b == 18.88, format!("fixture A {a:.2} (25.06), fixture B {b:.2} (18.88)")))
}

// ---------------------------------------------------------------- shared models

struct Lab {
    baseline: DefendedModel,
    ciiv: DefendedModel,
    test: Vec<CToySample>,
    /// wall time of both training runs, as recorded when they ran
    train_secs: f64,
}

fn cache_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-models")
}

fn trained(cfg: &ExperimentConfig, data: &[CToySample]) -> R<(ConvNet, f64)> {
    let hash = cfg.training_hash();
    let dir = cache_root().join(format!("{}-{}", cfg.name, &hash[..12]));
    let ckpt = dir.join("model.ckpt");
    if ckpt.exists() {
        if let Ok((net, meta)) = load_checkpoint(&ckpt, cfg.model.clone()) {
            if meta.config_hash == hash && meta.epoch == cfg.epochs {
                let secs = std::fs::read_to_string(dir.join("train_secs")).ok().and_then(|v| v.trim().parse().ok());
                let secs = secs.unwrap_or(f64::NAN);
                println!("  using cached {} from {} (trained in {secs:.0}s)", cfg.name, dir.display());
                return Ok((net, secs));
            }
        }
    }
    let t = Instant::now();
    let out = train::train(cfg, data, Some(&dir)).map_err(e)?;
    let last = out.log.last().expect("epochs >= 1");
    let secs = t.elapsed().as_secs_f64();
    std::fs::write(dir.join("train_secs"), format!("{secs:.1}\n")).map_err(e)?;
    println!("  trained {} in {secs:.0}s (final train acc {:.4})", cfg.name, last.accuracy);
    Ok((out.net, secs))
}

fn lab_configs() -> (ExperimentConfig, ExperimentConfig) {
    let base = ExperimentConfig { name: "baseline".into(), ..ExperimentConfig::for_mode(DefenseMode::Baseline) };
    let mut ciiv = ExperimentConfig { name: "ciiv".into(), ..ExperimentConfig::for_mode(DefenseMode::Ciiv) };
    ciiv.retina.as_mut().unwrap().n_views = 9;
    ciiv.ciiv.as_mut().unwrap().norm = CiivNorm::L1;
    (base, ciiv)
}

fn build_lab() -> R<Lab> {
    let (bc, cc) = lab_configs();
    let data = train::load_split(&bc, Split::Train).map_err(e)?;
    let test = train::load_split(&bc, Split::Test).map_err(e)?;
    let (bnet, bs) = trained(&bc, &data)?;
    let (cnet, cs) = trained(&cc, &data)?;
    let baseline = train::defended(&bc, bnet).map_err(e)?;
    let ciiv = train::defended(&cc, cnet).map_err(e)?;
    Ok(Lab { baseline, ciiv, test, train_secs: bs + cs })
}

const EVAL_BATCH: usize = 50;

fn eps(v: f64) -> f64 {
    v / 255.0
}

fn pgd10_16() -> AttackSpec {
    AttackSpec { name: "PGD-10".into(), eot_samples: 4, ..AttackSpec::pgd(eps(16.0), eps(4.0), 10) }
}

fn acc(model: &DefendedModel, samples: &[CToySample], spec: &AttackSpec) -> R<f64> {
    eval::accuracy_under(model, samples, spec, EVAL_BATCH).map_err(e)
}

// ---------------------------------------------------------------- 6

fn crit_checklist(lab: &Lab) -> R<Line> {
    let n = 500.min(lab.test.len());
    let test = &lab.test[..n];
    let mut notes = Vec::new();
    let mut pass = true;
    let iters = [1usize, 5, 10, 20, 50, 100, 200];
    for (name, model) in [("baseline", &lab.baseline), ("ciiv", &lab.ciiv)] {
        let t = Instant::now();
        let base = AttackSpec { eot_samples: 1, ..AttackSpec::pgd(eps(8.0), eps(2.0), 1) };
        let curve = eval::sweep_iterations(model, &base, &iters, test, EVAL_BATCH).map_err(e)?;
        let accs: Vec<f64> = curve.iter().map(|p| p.accuracy).collect();
        let monotone = accs.windows(2).all(|w| w[1] <= w[0] + 1.0);
        let gap = (accs[5] - accs[6]).abs();
        let mut unbounded = Vec::new();
        for big in [96.0, 128.0] {
            let spec = AttackSpec { eot_samples: 1, ..AttackSpec::pgd(eps(big), eps(big) / 4.0, 100) };
            unbounded.push(acc(model, test, &spec)?);
        }
        let secs = t.elapsed().as_secs_f64();
        let ok = monotone && gap < 0.5 && unbounded.iter().all(|&a| a <= 2.0) && secs < 20.0 * 60.0;
        pass &= ok;
        notes.push(format!(
            "{name}: PGD-k {:?} (monotone {monotone}), |100-200| {gap:.2}, eps 96/128 -> {:.2}/{:.2}, {secs:.0}s (< 1200)",
            accs.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>(),
            unbounded[0],
            unbounded[1]
        ));
    }
    // every evaluation above re-checks budget and pixel range; this one
    // exercises the remaining attack kinds on a few samples
    for kind in [AttackKind::Fgsm, AttackKind::GaussianNoise, AttackKind::UniformNoise, AttackKind::BruteForceSearch, AttackKind::Spsa] {
        let spec = AttackSpec {
            kind,
            name: format!("{kind:?}"),
            budget: Budget::linf(eps(8.0)),
            trials: 5,
            spsa: SpsaParams { batch: 2, ..Default::default() },
            iterations: 2,
            ..Default::default()
        };
        acc(&lab.ciiv, &test[..10], &spec)?;
    }
    notes.push("all outputs within budget and [0,1]".into());
    Ok(line(pass, format!("n={n}; {}", notes.join("; "))))
}

// ---------------------------------------------------------------- 7 / 8 / 9

fn crit_robustness(lab: &Lab) -> R<Line> {
    let t = Instant::now();
    let clean = AttackSpec::clean();
    let b_clean = acc(&lab.baseline, &lab.test, &clean)?;
    let c_clean = acc(&lab.ciiv, &lab.test, &clean)?;
    let n = 500.min(lab.test.len());
    let sub = &lab.test[..n];
    let b_pgd = acc(&lab.baseline, sub, &pgd10_16())?;
    let c_pgd = acc(&lab.ciiv, sub, &pgd10_16())?;
    let bfs = AttackSpec { name: "BFS".into(), kind: AttackKind::BruteForceSearch, budget: Budget::linf(eps(16.0)), trials: 100, ..Default::default() };
    let c_bfs = acc(&lab.ciiv, sub, &bfs)?;
    let n_spsa = 100.min(n);
    let spsa = AttackSpec { name: "SPSA".into(), kind: AttackKind::Spsa, budget: Budget::linf(eps(16.0)), iterations: 20, ..Default::default() };
    let c_spsa = acc(&lab.ciiv, &sub[..n_spsa], &spsa)?;
    let c_pgd_spsa_n = acc(&lab.ciiv, &sub[..n_spsa], &pgd10_16())?;
    let checks = [
        b_clean >= 95.0,
        b_pgd <= 5.0,
        c_clean >= 80.0,
        c_pgd >= b_pgd + 30.0,
        c_bfs >= c_pgd,
        c_spsa >= c_pgd_spsa_n,
        lab.train_secs + t.elapsed().as_secs_f64() <= 3600.0,
    ];
    Ok(line(
        checks.iter().all(|&c| c),
        format!(
            "baseline clean {b_clean:.2} (>=95) PGD-10 {b_pgd:.2} (<=5); CiiV clean {c_clean:.2} (>=80) PGD-10 {c_pgd:.2} \
             (>= baseline+30); CiiV BFS {c_bfs:.2} (>= PGD {c_pgd:.2}, n={n}); CiiV SPSA {c_spsa:.2} (>= PGD {c_pgd_spsa_n:.2}, n={n_spsa}); \
             training + evaluation {:.0}s (<= 3600); checks {checks:?}", lab.train_secs + t.elapsed().as_secs_f64()
        ),
    ))
}

fn crit_energy(lab: &Lab) -> R<Line> {
    let sub = &lab.test[..200.min(lab.test.len())];
    let b = eval::dump_perturbations(&lab.baseline, sub, &pgd10_16(), EVAL_BATCH, None).map_err(e)?;
    let c = eval::dump_perturbations(&lab.ciiv, sub, &pgd10_16(), EVAL_BATCH, None).map_err(e)?;
    let (be, ce) = (b.mean_energy.unwrap_or(f64::NAN), c.mean_energy.unwrap_or(f64::NAN));
    let gap = be - ce;
    Ok(line(gap >= 0.05, format!("n={}; baseline {be:.4}, CiiV {ce:.4}, gap {gap:.4} (>= 0.05)", sub.len())))
}

fn crit_targeted(lab: &Lab) -> R<Line> {
    let sub = &lab.test[..500.min(lab.test.len())];
    let with = |goal, name: &str| AttackSpec { goal, name: name.into(), ..pgd10_16() };
    let un = acc(&lab.ciiv, sub, &pgd10_16())?;
    let ml = acc(&lab.ciiv, sub, &with(AttackGoal::TargetMostLikely, "PGD-10 most-likely"))?;
    let ll = acc(&lab.ciiv, sub, &with(AttackGoal::TargetLeastLikely, "PGD-10 least-likely"))?;
    let pass = ll + 2.0 >= ml && ml + 2.0 >= un;
    Ok(line(pass, format!("n={}; least-likely {ll:.2} >= most-likely {ml:.2} >= untargeted {un:.2} (+-2)", sub.len())))
}

// ---------------------------------------------------------------- 10

fn run_cli(args: &[&str]) -> R<()> {
    let st = Command::new(env!("CARGO_BIN_EXE_ciiv")).args(args).env("RUST_LOG", "warn").status().map_err(e)?;
    st.success().then_some(()).ok_or_else(|| format!("ciiv {args:?} exited with {st}"))
}

fn crit_reproducible() -> R<Line> {
    let root = cache_root().join("repro");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).map_err(e)?;
    let mut cfg = ExperimentConfig::for_mode(DefenseMode::Ciiv);
    cfg.dataset.ctoy = ciiv_core::ctoy::CToyConfig { height: 16, width: 16, train: 48, val: 6, test: 12, size_range: (5, 9), ..Default::default() };
    cfg.model = ConvNetConfig::plain((3, 16, 16), &[4, 4], 3);
    cfg.retina.as_mut().unwrap().n_views = 3;
    cfg.inference.views = 3;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.eval.batch_size = 6;
    cfg.eval.attacks = vec![
        AttackSpec::clean(),
        AttackSpec { eot_samples: 2, ..AttackSpec::pgd(eps(8.0), eps(2.0), 3) },
        AttackSpec { name: "BFS".into(), kind: AttackKind::BruteForceSearch, budget: Budget::linf(eps(8.0)), trials: 3, ..Default::default() },
    ];
    let cfg_path = root.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(e)?;
    let c = cfg_path.to_str().unwrap();
    let mut same = Vec::new();
    let dir = |k: &str, i: usize| root.join(format!("{k}{i}"));
    for i in 0..2 {
        let d = dir("train", i);
        run_cli(&["train", "--config", c, "--out", d.to_str().unwrap()])?;
        run_cli(&["eval", "--config", c, "--out", d.to_str().unwrap()])?;
        let s = dir("scm", i);
        run_cli(&["scm-demo", "--out", s.to_str().unwrap(), "--n", "5000", "--runs", "2"])?;
    }
    for k in ["train", "scm"] {
        let a = std::fs::read(dir(k, 0).join("report.csv")).map_err(e)?;
        let b = std::fs::read(dir(k, 1).join("report.csv")).map_err(e)?;
        same.push((k, !a.is_empty() && a == b));
    }
    Ok(line(same.iter().all(|s| s.1), format!("byte-identical report.csv across two runs: {same:?} (train+eval, scm-demo)")))
}

// ----------------------------------------------------------------

fn report(id: u32, name: &str, f: impl FnOnce() -> R<Line>) -> bool {
    let t = Instant::now();
    let out = f().unwrap_or_else(|err| line(false, format!("error: {err}")));
    println!(
        "{} [{id}] {name}: {} ({:.1}s)",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        t.elapsed().as_secs_f64()
    );
    out.pass
}

fn main() {
    // cargo passes harness flags such as --nocapture through; none apply here
    let quick = std::env::var_os("ACCEPTANCE_SKIP_MODELS").is_some();
    let mut ok = true;
    ok &= report(1, "autodiff finite-difference agreement", crit_autodiff);
    ok &= report(2, "retinotopic mask law", crit_mask_law);
    ok &= report(3, "ciiv loss identities", crit_ciiv_identities);
    ok &= report(4, "scm estimators", crit_scm);
    ok &= report(5, "overall column aggregation", crit_overall);
    if quick {
        println!("SKIP [6-9] model criteria (ACCEPTANCE_SKIP_MODELS set)");
    } else {
        match build_lab() {
            Ok(lab) => {
                ok &= report(6, "attack feasibility and checklist", || crit_checklist(&lab));
                ok &= report(7, "end-to-end CToy robustness", || crit_robustness(&lab));
                ok &= report(8, "confounder energy direction", || crit_energy(&lab));
                ok &= report(9, "targeted protocol ordering", || crit_targeted(&lab));
            }
            Err(err) => {
                for (id, name) in [(6, "attack feasibility and checklist"), (7, "end-to-end CToy robustness"), (8, "confounder energy direction"), (9, "targeted protocol ordering")] {
                    println!("FAIL [{id}] {name}: could not train models: {err}");
                }
                ok = false;
            }
        }
    }
    ok &= report(10, "cli reproducibility", crit_reproducible);
    if !ok {
        std::process::exit(1);
    }
}
