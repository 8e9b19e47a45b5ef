use crate::config::ExperimentConfig;
use crate::eval::{self, CurvePoint};
use crate::report::ReportTable;
use crate::train;
use ciiv_core::attacks::AttackSpec;
use ciiv_core::ctoy::{self, Split};
use ciiv_core::nn::{load_checkpoint, ConvNet};
use ciiv_core::rng;
use ciiv_core::scm::{self, Instrument, LinearScm};
use ciiv_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "ciiv", version, about = "Retinotopic defenses, attacks and CToy experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// experiment config (JSON); defaults are used when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    /// checkpoint to evaluate; defaults to `<out>/model.ckpt`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the CToy splits and manifest
    GenCtoy(Common),
    /// Train the configured defense
    Train(Common),
    /// Run the configured attack battery
    Eval(ModelArgs),
    /// Accuracy against a growing budget
    SweepEps {
        #[command(flatten)]
        model: ModelArgs,
        /// budgets in units of 1/255
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 8.0, 16.0, 32.0, 64.0, 96.0, 128.0])]
        eps: Vec<f64>,
        #[arg(long, default_value = "pgd")]
        attack: String,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
    },
    /// PGD accuracy against iteration count
    SweepIters {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10, 20, 50, 100, 200])]
        iters: Vec<usize>,
        /// budget in units of 1/255
        #[arg(long, default_value_t = 8.0)]
        eps: f64,
    },
    /// Save clean, adversarial and amplified-perturbation images
    DumpPerts {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// samples scored for confounder energy
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// budget in units of 1/255
        #[arg(long, default_value_t = 16.0)]
        eps: f64,
    },
    /// Estimator comparison on simulated linear causal models
    ScmDemo {
        /// LinearScm as JSON; the default model when omitted
        #[arg(long)]
        scm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    match &c.config {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), text)?;
    Ok(())
}

fn write_run(out: &Path, command: &str, cfg: Option<&ExperimentConfig>, extra: serde_json::Value) -> Result<()> {
    let run = json!({
        "command": command,
        "config": cfg,
        "seeds": cfg.map(|c| json!({ "experiment": c.seed, "dataset": c.dataset.ctoy.seed })),
        "training_hash": cfg.map(ExperimentConfig::training_hash),
        "args": extra,
        "versions": { "ciiv": env!("CARGO_PKG_VERSION") },
    });
    write(out, "run.json", &serde_json::to_string_pretty(&run)?)
}

fn write_report(out: &Path, t: &ReportTable) -> Result<()> {
    write(out, "report.csv", &t.to_csv())?;
    write(out, "report.json", &t.to_json())
}

fn test_samples(cfg: &ExperimentConfig) -> Result<Vec<ctoy::CToySample>> {
    let mut s = train::load_split(cfg, Split::Test)?;
    if let Some(n) = cfg.eval.n_test {
        s.truncate(n);
    }
    Ok(s)
}

fn load_model(cfg: &ExperimentConfig, m: &ModelArgs) -> Result<ConvNet> {
    let path = m.checkpoint.clone().unwrap_or_else(|| m.common.out.join("model.ckpt"));
    let (net, meta) = load_checkpoint(&path, cfg.model.clone())?;
    if meta.config_hash != cfg.training_hash() {
        return Err(Error::Config(format!("{} was trained with a different config", path.display())));
    }
    Ok(net)
}

fn curve_csv(defender: &str, attack: &str, param: &str, n: usize, pts: &[CurvePoint]) -> String {
    let mut s = format!("defender,attack,{param},accuracy,n_eval\n");
    for p in pts {
        let _ = writeln!(s, "{defender},{attack},{},{:.2},{n}", p.x, p.accuracy);
    }
    s
}

fn scm_demo(base: &LinearScm, n: usize, runs: u64, seed: u64) -> Result<(String, serde_json::Value)> {
    let observational = base.without_instrument();
    let instrumented = if base.instrument == Instrument::None {
        LinearScm { instrument: Instrument::Binary { values: (0.0, 1.0) }, ..*base }
    } else {
        *base
    };
    let (mut ols, mut bd, mut iv, mut corr) = (0.0, 0.0, 0.0, 0.0);
    for run in 0..runs {
        let s = scm::simulate(&observational, n, &mut rng::stream(seed, &[run, 0]))?;
        ols += scm::ols_slope(&s)?;
        let s = scm::simulate(&instrumented, n, &mut rng::stream(seed, &[run, 1]))?;
        bd += scm::backdoor_estimate(&s)?.0;
        iv += scm::iv_estimate(&s)?;
        let r: Vec<f64> = s.iter().map(|v| v.r.unwrap_or(0.0)).collect();
        let c: Vec<f64> = s.iter().map(|v| v.c).collect();
        corr += scm::correlation(&r, &c);
    }
    let k = runs.max(1) as f64;
    let rows = [
        ("ols", ols / k, observational.ols_limit()),
        ("backdoor", bd / k, base.w_xy),
        ("iv", iv / k, base.w_xy),
        ("corr_r_c", corr / k, 0.0),
    ];
    let mut csv = String::from("estimator,estimate,target,abs_error,n,runs\n");
    for (name, est, target) in rows {
        let _ = writeln!(csv, "{name},{est:.6},{target:.6},{:.6},{n},{runs}", (est - target).abs());
    }
    let js = json!(rows.iter().map(|(name, est, target)| json!({"estimator": name, "estimate": est, "target": target})).collect::<Vec<_>>());
    Ok((csv, js))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCtoy(c) => {
            let cfg = load_config(&c)?;
            let manifest = ctoy::write_dataset(&cfg.dataset.ctoy, &c.out)?;
            write_run(&c.out, "gen-ctoy", Some(&cfg), json!({}))?;
            let mut csv = String::from("split,file,count,sha256\n");
            for (split, e) in &manifest.splits {
                let _ = writeln!(csv, "{},{},{},{}", split.name(), e.file, e.count, e.sha256);
            }
            write(&c.out, "report.csv", &csv)?;
            write(&c.out, "report.json", &serde_json::to_string_pretty(&manifest)?)
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let data = train::load_split(&cfg, Split::Train)?;
            let trained = train::train(&cfg, &data, Some(&c.out))?;
            let model = train::defended(&cfg, trained.net)?;
            let test = test_samples(&cfg)?;
            let t = eval::evaluate(&model, cfg.mode.label(), &[AttackSpec::clean()], &test, cfg.eval.batch_size, cfg.seed)?;
            write_run(&c.out, "train", Some(&cfg), json!({}))?;
            write_report(&c.out, &t)
        }
        Command::Eval(m) => {
            let cfg = load_config(&m.common)?;
            let model = train::defended(&cfg, load_model(&cfg, &m)?)?;
            let test = test_samples(&cfg)?;
            let t = eval::evaluate(&model, cfg.mode.label(), &cfg.eval.attacks, &test, cfg.eval.batch_size, cfg.seed)?;
            write_run(&m.common.out, "eval", Some(&cfg), json!({ "checkpoint": m.checkpoint }))?;
            write_report(&m.common.out, &t)
        }
        Command::SweepEps { model: m, eps, attack, iterations } => {
            let cfg = load_config(&m.common)?;
            let model = train::defended(&cfg, load_model(&cfg, &m)?)?;
            let test = test_samples(&cfg)?;
            let base = match attack.as_str() {
                "pgd" => AttackSpec { seed: cfg.seed, ..AttackSpec::pgd(8.0 / 255.0, 2.0 / 255.0, iterations) },
                "fgsm" => AttackSpec { seed: cfg.seed, ..AttackSpec::fgsm(8.0 / 255.0) },
                other => return Err(Error::Config(format!("unknown sweep attack {other:?} (pgd|fgsm)"))),
            };
            let eps: Vec<f64> = eps.iter().map(|e| e / 255.0).collect();
            let pts = eval::sweep_epsilon(&model, &base, &eps, &test, cfg.eval.batch_size)?;
            write_run(&m.common.out, "sweep-eps", Some(&cfg), json!({ "eps": eps, "attack": attack, "iterations": iterations }))?;
            write(&m.common.out, "report.csv", &curve_csv(cfg.mode.label(), &base.name, "epsilon", test.len(), &pts))?;
            write(&m.common.out, "report.json", &serde_json::to_string_pretty(&pts)?)
        }
        Command::SweepIters { model: m, iters, eps } => {
            let cfg = load_config(&m.common)?;
            let model = train::defended(&cfg, load_model(&cfg, &m)?)?;
            let test = test_samples(&cfg)?;
            let e = eps / 255.0;
            let base = AttackSpec { seed: cfg.seed, ..AttackSpec::pgd(e, e / 4.0, 1) };
            let pts = eval::sweep_iterations(&model, &base, &iters, &test, cfg.eval.batch_size)?;
            let gap = pts.iter().find(|p| p.x == 100.0).zip(pts.iter().find(|p| p.x == 200.0)).map(|(a, b)| (a.accuracy - b.accuracy).abs());
            write_run(&m.common.out, "sweep-iters", Some(&cfg), json!({ "iters": iters, "eps": e }))?;
            write(&m.common.out, "report.csv", &curve_csv(cfg.mode.label(), "PGD", "iterations", test.len(), &pts))?;
            write(&m.common.out, "report.json", &serde_json::to_string_pretty(&json!({ "curve": pts, "gap_100_200": gap }))?)
        }
        Command::DumpPerts { model: m, count, n, eps } => {
            let cfg = load_config(&m.common)?;
            let model = train::defended(&cfg, load_model(&cfg, &m)?)?;
            let mut test = test_samples(&cfg)?;
            test.truncate(n.max(count));
            let e = eps / 255.0;
            let spec = AttackSpec { seed: cfg.seed, ..AttackSpec::pgd(e, e / 4.0, 10) };
            let dir = m.common.out.join("images");
            let rep = eval::dump_perturbations(&model, &test, &spec, cfg.eval.batch_size, Some((&dir, count)))?;
            write_run(&m.common.out, "dump-perts", Some(&cfg), json!({ "count": count, "n": n, "eps": e }))?;
            write(&m.common.out, "report.csv", &rep.to_csv())?;
            write(&m.common.out, "report.json", &serde_json::to_string_pretty(&rep)?)
        }
        Command::ScmDemo { scm: path, out, n, runs, seed } => {
            let base: LinearScm = match path {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => LinearScm::default(),
            };
            base.validate()?;
            let (csv, js) = scm_demo(&base, n, runs, seed)?;
            write_run(&out, "scm-demo", None, json!({ "scm": base, "n": n, "runs": runs, "seed": seed }))?;
            write(&out, "report.csv", &csv)?;
            write(&out, "report.json", &serde_json::to_string_pretty(&js)?)
        }
    }
}

