//! Experiment configuration. Every field has a default; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dafa::{AugOp, AugOpKind, MixMode, SubPolicy, DEFAULT_K_MAX};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, TrainOpts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    GenData,
    TrainTeacher,
    Search,
    Distill,
    Eval,
    GradCheck,
    PolicyOracle,
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Task loss plus plain feature imitation on the adapted student feature.
    Baseline,
    /// Policy search, discrete augmentation and distinctive-area distillation.
    Sokd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodePath {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the head-alignment loss (and of the feature loss in baseline mode).
    pub alpha_w: f32,
    /// Weight of the area-masked feature loss.
    pub beta_w: f32,
    /// Divide teacher and aligned student features by the RMS of the
    /// teacher's training features before any comparison.
    pub normalize_features: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_w: 1.0,
            beta_w: 1.0,
            normalize_features: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub search_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub outer_lr: f32,
    pub val_fraction: f32,
    /// Global L2 bound on the inner-step gradient; `None` disables clipping.
    pub grad_clip: Option<f32>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 60,
            search_epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            outer_lr: 0.005,
            val_fraction: 0.2,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub num_subpolicies: usize,
    pub ops_per_subpolicy: usize,
    pub k_max: usize,
    /// Explicit operation kinds per sub-policy; drawn from the seed when absent.
    pub subpolicies: Option<Vec<Vec<AugOpKind>>>,
    /// Explicit `(kind, beta, m)` sub-policies; overrides `subpolicies` and the init values.
    pub explicit: Option<Vec<SubPolicy>>,
    pub init_beta: f32,
    pub init_m: f32,
    pub tau: f32,
    pub tau_decay: f32,
    pub tau_min: f32,
    pub lambda: f32,
    pub mix: MixMode,
    pub learn_alpha: bool,
    pub learn_beta: bool,
    pub learn_magnitude: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            num_subpolicies: 4,
            ops_per_subpolicy: 2,
            k_max: DEFAULT_K_MAX,
            subpolicies: None,
            explicit: None,
            init_beta: 0.5,
            init_m: 0.1,
            tau: 1.0,
            tau_decay: 0.9,
            tau_min: 0.2,
            lambda: 0.5,
            mix: MixMode::Soft,
            learn_alpha: true,
            learn_beta: true,
            learn_magnitude: true,
        }
    }
}

impl PolicyConfig {
    /// `max(τ₀·decay^epoch, τ_min)`.
    pub fn tau_at(&self, epoch: usize) -> f32 {
        (self.tau * self.tau_decay.powi(epoch as i32)).max(self.tau_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamConfig {
    pub hidden: usize,
    pub max_areas: usize,
    pub decode_from: DecodePath,
    /// Test images whose decoded areas are logged every epoch.
    pub probe_images: usize,
}

impl Default for DamConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            max_areas: 4,
            decode_from: DecodePath::Student,
            probe_images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub candidates: Vec<SubPolicy>,
    pub magnitudes: Option<Vec<f32>>,
    /// Training images used for the frozen feature snapshot.
    pub snapshot_size: usize,
    pub grad_graphs: usize,
    pub grad_eps: f32,
    pub grad_tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let single = |kind, m| SubPolicy {
            ops: vec![AugOp { kind, beta: 1.0, m }],
        };
        Self {
            candidates: vec![
                single(AugOpKind::AdditiveGaussianNoise, 0.3),
                single(AugOpKind::UniformScale, 0.3),
                single(AugOpKind::FeatureMask, 0.3),
            ],
            magnitudes: None,
            snapshot_size: 256,
            grad_graphs: 20,
            grad_eps: 1e-3,
            grad_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KsConfig {
    pub m: f32,
    pub sample: usize,
}

impl Default for KsConfig {
    fn default() -> Self {
        Self { m: 0.05, sample: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub data_seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Teacher checkpoint directory; `<data_dir>/teacher` when absent.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Directory holding a trained student checkpoint for `eval`.
    pub student_checkpoint: Option<PathBuf>,
    pub data: SyntheticSpec,
    pub teacher: ArchSpec,
    pub student: ArchSpec,
    pub teacher_train: TrainOpts,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub policy: PolicyConfig,
    pub dam: DamConfig,
    pub mode: Mode,
    pub oracle: OracleConfig,
    pub ks: KsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Distill,
            seed: 0,
            data_seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            teacher_checkpoint: None,
            student_checkpoint: None,
            data: SyntheticSpec::default(),
            teacher: ArchSpec::teacher_default(),
            student: ArchSpec::student_default(),
            teacher_train: TrainOpts::default(),
            loss: LossWeights::default(),
            schedule: Schedule::default(),
            policy: PolicyConfig::default(),
            dam: DamConfig::default(),
            mode: Mode::Sokd,
            oracle: OracleConfig::default(),
            ks: KsConfig::default(),
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when possible
    /// and fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside an object")))?;
                if !obj.contains_key(*part) {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).expect("checked key");
            }
        }
        let cfg: Self = serde_json::from_value(doc).map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.teacher_checkpoint.clone().unwrap_or_else(|| self.data_dir.join("teacher"))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.batch_size == 0 || self.teacher_train.batch_size == 0 {
            return Err(cfg_err("batch sizes must be positive"));
        }
        if s.search_epochs > s.epochs {
            return Err(cfg_err("search_epochs cannot exceed epochs"));
        }
        if !(s.lr >= 0.0) || !(s.outer_lr >= 0.0) || !(self.teacher_train.lr >= 0.0) {
            return Err(cfg_err("learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&s.momentum) || !(0.0..1.0).contains(&self.teacher_train.momentum) {
            return Err(cfg_err("momentum must lie in [0, 1)"));
        }
        if s.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(cfg_err("grad_clip must be positive"));
        }
        if !(0.0..1.0).contains(&s.val_fraction) {
            return Err(cfg_err("val_fraction must lie in [0, 1)"));
        }
        if !(self.loss.alpha_w >= 0.0) || !(self.loss.beta_w >= 0.0) {
            return Err(cfg_err("loss weights must be non-negative"));
        }
        let p = &self.policy;
        if p.num_subpolicies == 0 || p.ops_per_subpolicy == 0 || p.ops_per_subpolicy > p.k_max {
            return Err(cfg_err("policy needs P >= 1 and 1 <= k <= k_max"));
        }
        if !(p.tau > 0.0) || !(p.lambda > 0.0) || !(p.tau_min > 0.0) || !(p.tau_decay > 0.0) {
            return Err(cfg_err("tau, tau_min, tau_decay and lambda must be positive"));
        }
        if !(0.0..=1.0).contains(&p.init_beta) || !(0.0..=1.0).contains(&p.init_m) {
            return Err(cfg_err("init_beta and init_m must lie in [0, 1]"));
        }
        if let Some(kinds) = &p.subpolicies {
            if kinds.is_empty() || kinds.iter().any(|k| k.is_empty() || k.len() > p.k_max) {
                return Err(cfg_err("explicit sub-policies need 1..=k_max operations each"));
            }
        }
        if let Some(ex) = &p.explicit {
            if ex.is_empty() || ex.iter().any(|s| s.ops.is_empty() || s.ops.len() > p.k_max) {
                return Err(cfg_err("explicit sub-policies need 1..=k_max operations each"));
            }
        }
        if self.dam.hidden == 0 || self.dam.max_areas == 0 {
            return Err(cfg_err("dam.hidden and dam.max_areas must be positive"));
        }
        if self.oracle.snapshot_size == 0 {
            return Err(cfg_err("oracle.snapshot_size must be positive"));
        }
        if !(self.ks.m >= 0.0 && self.ks.m <= 1.0) || self.ks.sample == 0 {
            return Err(cfg_err("ks.m must lie in [0, 1] and ks.sample be positive"));
        }
        self.teacher.validate()?;
        self.student.validate()?;
        if self.teacher.input_size != self.data.image_size
            || self.student.input_size != self.data.image_size
            || self.teacher.in_channels != self.data.channels
            || self.student.in_channels != self.data.channels
            || self.teacher.num_classes != self.data.classes
            || self.student.num_classes != self.data.classes
        {
            return Err(Error::InvalidArch("architectures must match the dataset's image shape and classes".into()));
        }
        let (tf, sf) = (self.teacher.feature_dims()?, self.student.feature_dims()?);
        if tf[1..] != sf[1..] {
            return Err(Error::InvalidArch(format!(
                "teacher feature {tf:?} and student feature {sf:?} differ spatially"
            )));
        }
        self.data.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        let s = c.to_json().unwrap();
        let back = RunConfig::from_json(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 3}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"schedule": {"epoch": 3}}"#),
            Err(Error::Config(_))
        ));
        let c = RunConfig::default();
        assert!(c.with_overrides(&["schedule.lr_typo=1".into()]).is_err());
        assert!(c.with_overrides(&["noequals".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(&[
                "schedule.epochs=5".into(),
                "schedule.search_epochs=2".into(),
                "mode=baseline".into(),
                "out_dir=/tmp/x".into(),
                "policy.mix=\"hard\"".into(),
            ])
            .unwrap();
        assert_eq!(c.schedule.epochs, 5);
        assert_eq!(c.mode, Mode::Baseline);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.policy.mix, MixMode::Hard);
    }

    #[test]
    fn invalid_values() {
        let c = RunConfig::default();
        assert!(c.with_overrides(&["schedule.search_epochs=100".into()]).is_err());
        assert!(c.with_overrides(&["policy.tau=0".into()]).is_err());
        assert!(c.with_overrides(&["loss.alpha_w=-1".into()]).is_err());
        assert!(c.with_overrides(&["data.classes=5".into()]).is_err());
    }

    #[test]
    fn tau_schedule() {
        let p = PolicyConfig::default();
        assert_eq!(p.tau_at(0), 1.0);
        assert!((p.tau_at(1) - 0.9).abs() < 1e-6);
        assert_eq!(p.tau_at(100), 0.2);
    }
}
