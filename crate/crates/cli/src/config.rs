//! Run configuration: a TOML file with one table per section
//! (`fed.mu = 0.1`, `model.depth = 3`, ...). Every key has a default, and
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use fedseg::data::{AugmentationConfig, Label, PartitionPlan};
use fedseg::fedcore::FedConfig;
use fedseg::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub fed: FedSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub augment: AugmentSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds weight init, phantom generation, splits and shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Train clients one after another in id order. Turning this off trains
    /// them on separate threads.
    pub sequential: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 2024,
            out_dir: PathBuf::from("runs/default"),
            sequential: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_epochs: Vec<usize>,
    pub mu: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// `fedprox` or `fedavg`.
    pub algorithm: String,
}

impl Default for FedSection {
    fn default() -> Self {
        let d = FedConfig::default();
        FedSection {
            rounds: d.rounds,
            local_epochs: d.local_epochs,
            client_epochs: d.client_epochs,
            mu: d.mu,
            weight_decay: d.weight_decay,
            adam_lr: d.adam_lr,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            batch_size: d.batch_size,
            algorithm: d.algorithm.name().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub attention: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            in_channels: d.in_channels,
            out_channels: d.out_channels,
            depth: d.depth,
            base_channels: d.base_channels,
            attention: d.attention,
        }
    }
}

/// Per-label sample counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelCounts {
    pub normal: usize,
    pub benign: usize,
    pub malignant: usize,
}

impl LabelCounts {
    pub fn to_composition(self) -> Vec<(Label, usize)> {
        [
            (Label::Normal, self.normal),
            (Label::Benign, self.benign),
            (Label::Malignant, self.malignant),
        ]
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .collect()
    }

    fn from_composition(c: &[(Label, usize)]) -> Self {
        let mut out = LabelCounts::default();
        for &(l, n) in c {
            match l {
                Label::Normal => out.normal += n,
                Label::Benign => out.benign += n,
                Label::Malignant => out.malignant += n,
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// BUS-style directory to draw samples from; synthetic phantoms when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub image_size: usize,
    pub scale: f64,
    pub clients: Vec<LabelCounts>,
    pub server_test: LabelCounts,
}

impl Default for DataSection {
    fn default() -> Self {
        let plan = PartitionPlan::reference(1.0, 0);
        DataSection {
            dir: None,
            image_size: 64,
            scale: 1.0,
            clients: plan.clients.iter().map(|c| LabelCounts::from_composition(c)).collect(),
            server_test: LabelCounts::from_composition(&plan.server_test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub enabled: bool,
    pub flip_horizontal_prob: f64,
    pub flip_vertical_prob: f64,
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub brightness_delta: f64,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentationConfig::default();
        AugmentSection {
            enabled: d.enabled,
            flip_horizontal_prob: d.flip_horizontal_prob,
            flip_vertical_prob: d.flip_vertical_prob,
            rotation_deg: d.rotation_deg,
            translate_frac: d.translate_frac,
            scale_min: d.scale_min,
            scale_max: d.scale_max,
            contrast_min: d.contrast_min,
            contrast_max: d.contrast_max,
            brightness_delta: d.brightness_delta,
            seed: d.seed,
        }
    }
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Invalid(format!("invalid configuration: {field}: {reason}"))
}

impl RunConfig {
    /// Reads a TOML config, or the config snapshot inside a `.json` run
    /// manifest.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Invalid(format!("{}: not a run manifest: {e}", path.display())))?;
            Ok(manifest.config)
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                CliError::Invalid(msg) => CliError::Invalid(format!("{}: {msg}", path.display())),
                other => other,
            })
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Invalid(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn fed_config(&self) -> Result<FedConfig, CliError> {
        let f = &self.fed;
        let cfg = FedConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            client_epochs: f.client_epochs.clone(),
            mu: f.mu,
            weight_decay: f.weight_decay,
            adam_lr: f.adam_lr,
            adam_beta1: f.adam_beta1,
            adam_beta2: f.adam_beta2,
            adam_eps: f.adam_eps,
            batch_size: f.batch_size,
            seed: self.run.seed,
            algorithm: f.algorithm.parse()?,
            parallel: !self.run.sequential,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        if m.in_channels != 1 {
            return Err(invalid("model.in_channels", "images are single-channel grayscale, must be 1"));
        }
        if m.out_channels != 1 {
            return Err(invalid("model.out_channels", "masks are binary, must be 1"));
        }
        let cfg = ModelConfig {
            in_channels: m.in_channels,
            out_channels: m.out_channels,
            depth: m.depth,
            base_channels: m.base_channels,
            attention: m.attention,
            init_seed: self.run.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self) -> Result<PartitionPlan, CliError> {
        let plan = PartitionPlan {
            clients: self.data.clients.iter().map(|c| c.to_composition()).collect(),
            server_test: self.data.server_test.to_composition(),
            scale: self.data.scale,
            seed: self.run.seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn augmentation(&self) -> Result<AugmentationConfig, CliError> {
        let a = &self.augment;
        for (field, p) in [
            ("augment.flip_horizontal_prob", a.flip_horizontal_prob),
            ("augment.flip_vertical_prob", a.flip_vertical_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(field, format!("must be a probability, got {p}")));
            }
        }
        for (field, v) in [
            ("augment.rotation_deg", a.rotation_deg),
            ("augment.translate_frac", a.translate_frac),
            ("augment.brightness_delta", a.brightness_delta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        for (field, lo, hi) in [
            ("augment.scale_min", a.scale_min, a.scale_max),
            ("augment.contrast_min", a.contrast_min, a.contrast_max),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(invalid(field, format!("need 0 < min <= max, got {lo}..{hi}")));
            }
        }
        Ok(AugmentationConfig {
            enabled: a.enabled,
            flip_horizontal_prob: a.flip_horizontal_prob,
            flip_vertical_prob: a.flip_vertical_prob,
            rotation_deg: a.rotation_deg,
            translate_frac: a.translate_frac,
            scale_min: a.scale_min,
            scale_max: a.scale_max,
            contrast_min: a.contrast_min,
            contrast_max: a.contrast_max,
            brightness_delta: a.brightness_delta,
            seed: a.seed,
        })
    }

    /// Checks every section, reporting the first offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        self.fed_config()?;
        let model = self.model_config()?;
        self.plan()?;
        self.augmentation()?;
        let size = self.data.image_size;
        if size == 0 || size % model.size_multiple() != 0 {
            return Err(invalid(
                "data.image_size",
                format!(
                    "{size} is not a positive multiple of {} (2^model.depth)",
                    model.size_multiple()
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_the_reference_setup() {
        let cfg = RunConfig::default();
        let fed = cfg.fed_config().unwrap();
        assert_eq!((fed.rounds, fed.local_epochs, fed.batch_size), (6, 10, 16));
        assert_eq!((fed.mu, fed.weight_decay, fed.adam_lr), (0.1, 0.001, 1e-4));
        let plan = cfg.plan().unwrap();
        let sizes: Vec<usize> = plan.clients.iter().map(|c| c.iter().map(|p| p.1).sum()).collect();
        assert_eq!(sizes, [450, 250, 163]);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = RunConfig::from_toml("fed.mu = 0.5\nmodel.depth = 2\nrun.seed = 9\n").unwrap();
        assert_eq!(cfg.fed.mu, 0.5);
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.fed.rounds, 6);
        assert_eq!(cfg.fed_config().unwrap().seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("fed.mew = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("mew"), "{err}");
        assert!(RunConfig::from_toml("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn invalid_values_name_their_field() {
        for (text, field) in [
            ("fed.rounds = 0", "rounds"),
            ("fed.algorithm = \"sgd\"", "fed.algorithm"),
            ("model.depth = 0", "depth"),
            ("data.image_size = 60", "data.image_size"),
            ("augment.flip_vertical_prob = 2.0", "augment.flip_vertical_prob"),
            ("model.in_channels = 3", "model.in_channels"),
        ] {
            let cfg = RunConfig::from_toml(text).unwrap();
            let err = cfg.validate().unwrap_err();
            assert!(matches!(err, CliError::Invalid(_)));
            assert!(err.to_string().contains(field), "{text}: {err}");
        }
    }
}
