use ciiv_core::attacks::AttackSpec;
use ciiv_core::ctoy::CToyConfig;
use ciiv_core::defense::InferenceConfig;
use ciiv_core::nn::{ConvNetConfig, SgdConfig};
use ciiv_core::objective::{BetaSchedule, CiivNorm};
use ciiv_core::retinotopic::{ExposureParams, MaskParams};
use ciiv_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    Baseline,
    RetiAug,
    Ciiv,
    AtFgsm,
    AtPgd,
    CiivAtFgsm,
    CiivAtPgd,
}

impl DefenseMode {
    pub const ALL: [DefenseMode; 7] = [
        Self::Baseline,
        Self::RetiAug,
        Self::Ciiv,
        Self::AtFgsm,
        Self::AtPgd,
        Self::CiivAtFgsm,
        Self::CiivAtPgd,
    ];

    pub fn uses_retina(self) -> bool {
        matches!(self, Self::RetiAug | Self::Ciiv | Self::CiivAtFgsm | Self::CiivAtPgd)
    }

    pub fn uses_ciiv(self) -> bool {
        matches!(self, Self::Ciiv | Self::CiivAtFgsm | Self::CiivAtPgd)
    }

    pub fn adversarial(self) -> Option<AdvKind> {
        match self {
            Self::AtFgsm | Self::CiivAtFgsm => Some(AdvKind::Fgsm),
            Self::AtPgd | Self::CiivAtPgd => Some(AdvKind::Pgd),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::RetiAug => "RetiAug",
            Self::Ciiv => "CiiV",
            Self::AtFgsm => "AT_FGSM",
            Self::AtPgd => "AT_PGD",
            Self::CiivAtFgsm => "CiiV+AT_FGSM",
            Self::CiivAtPgd => "CiiV+AT_PGD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    #[default]
    Fixed,
    Random,
}

/// Retinotopic augmentation used in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetinaSection {
    pub mask: MaskParams,
    pub exposure: ExposureParams,
    /// views per training step
    pub n_views: usize,
    pub centers: CenterMode,
}

impl Default for RetinaSection {
    fn default() -> Self {
        Self { mask: MaskParams::default(), exposure: ExposureParams::default(), n_views: 9, centers: CenterMode::Fixed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CiivSection {
    pub norm: CiivNorm,
    pub beta: BetaSchedule,
}

/// Training-time adversary for the AT modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvTrainSection {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for AdvTrainSection {
    fn default() -> Self {
        Self { epsilon: 8.0 / 255.0, step_size: 2.0 / 255.0, iterations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct DatasetSection {
    pub ctoy: CToyConfig,
    /// directory written by `gen-ctoy`; generated in memory when absent
    pub path: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub attacks: Vec<AttackSpec>,
    /// first `n_test` test samples; all when absent
    pub n_test: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let eps = 8.0 / 255.0;
        Self {
            attacks: vec![
                AttackSpec::clean(),
                AttackSpec::fgsm(eps),
                AttackSpec::pgd(eps, 2.0 / 255.0, 10),
                AttackSpec::pgd(eps, 2.0 / 255.0, 20),
            ],
            n_test: None,
            batch_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ConvNetConfig,
    pub optimizer: SgdConfig,
    pub mode: DefenseMode,
    pub retina: Option<RetinaSection>,
    pub ciiv: Option<CiivSection>,
    pub adversarial: Option<AdvTrainSection>,
    pub epochs: usize,
    pub batch_size: usize,
    pub inference: InferenceConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            seed: 0,
            dataset: DatasetSection::default(),
            model: ConvNetConfig::ctoy_default(),
            optimizer: SgdConfig::default(),
            mode: DefenseMode::Baseline,
            retina: None,
            ciiv: None,
            adversarial: None,
            epochs: 22,
            batch_size: 128,
            inference: InferenceConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `mode` with every mode-specific section filled in.
    pub fn for_mode(mode: DefenseMode) -> Self {
        Self {
            name: mode.label().to_lowercase(),
            mode,
            retina: mode.uses_retina().then(RetinaSection::default),
            ciiv: mode.uses_ciiv().then(CiivSection::default),
            adversarial: mode.adversarial().map(|_| AdvTrainSection::default()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let mode = self.mode.label();
        match (self.mode.uses_retina(), &self.retina) {
            (true, None) => return bad(format!("mode {mode} needs a retina section")),
            (false, Some(_)) => return bad(format!("mode {mode} takes no retina section")),
            (true, Some(r)) => {
                r.mask.validate()?;
                r.exposure.validate()?;
                if r.n_views < 1 || (r.centers == CenterMode::Fixed && r.n_views > 9) {
                    return bad("retina.n_views must be in 1..=9 for fixed centers".into());
                }
                if self.mode.uses_ciiv() && r.n_views < 2 {
                    return bad("the ciiv objective needs at least two views".into());
                }
            }
            (false, None) => {}
        }
        match (self.mode.uses_ciiv(), &self.ciiv) {
            (true, None) => return bad(format!("mode {mode} needs a ciiv section")),
            (false, Some(_)) => return bad(format!("mode {mode} takes no ciiv section")),
            (true, Some(c)) => c.beta.validate()?,
            (false, None) => {}
        }
        match (self.mode.adversarial(), &self.adversarial) {
            (Some(_), None) => return bad(format!("mode {mode} needs an adversarial section")),
            (None, Some(_)) => return bad(format!("mode {mode} takes no adversarial section")),
            (Some(k), Some(a)) => {
                if !(a.epsilon >= 0.0) || (k == AdvKind::Pgd && (a.iterations == 0 || !(a.step_size > 0.0))) {
                    return bad("adversarial section needs epsilon >= 0 and positive PGD steps".into());
                }
            }
            (None, None) => {}
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval.batch_size == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        self.dataset.ctoy.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        let c = &self.dataset.ctoy;
        if self.model.input != (3, c.height, c.width) || self.model.num_classes != 3 {
            return bad(format!(
                "model input {:?} with {} classes does not match CToy 3x{}x{} with 3 classes",
                self.model.input, self.model.num_classes, c.height, c.width
            ));
        }
        if self.mode.uses_retina() && (self.inference.views == 0 || self.inference.views > 9) {
            return bad("inference.views must be in 1..=9".into());
        }
        for a in &self.eval.attacks {
            a.validate()?;
        }
        Ok(())
    }

    /// Read a JSON config. Sections the mode needs but the file omits get
    /// their defaults; sections the mode forbids are still rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if cfg.mode.uses_retina() && cfg.retina.is_none() {
            cfg.retina = Some(RetinaSection::default());
        }
        if cfg.mode.uses_ciiv() && cfg.ciiv.is_none() {
            cfg.ciiv = Some(CiivSection::default());
        }
        if cfg.mode.adversarial().is_some() && cfg.adversarial.is_none() {
            cfg.adversarial = Some(AdvTrainSection::default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash over the fields that determine the trained weights.
    pub fn training_hash(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "dataset": self.dataset.ctoy,
            "model": self.model,
            "optimizer": self.optimizer,
            "mode": self.mode,
            "retina": self.retina,
            "ciiv": self.ciiv,
            "adversarial": self.adversarial,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
        });
        ciiv_core::ctoy::sha256_hex(key.to_string().as_bytes())
    }
}
