//! Run configuration (TOML) and the ablation variants.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ToyBackboneConfig;
use crate::data::{ClassTable, SplitRatios};
use crate::error::{Error, Result};
use crate::scoring::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            other => Err(Error::arg("stage", format!("unknown stage `{other}`"))),
        }
    }
}

/// Parses a comma-separated stage list such as `I,II,III`.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSource {
    Toy(ToyBackboneConfig),
    Pretrained { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square side images are resized to before encoding.
    pub input_size: usize,
    pub beta: f64,
    /// Adapted vision layers `1..=adapter_layers`.
    pub adapter_layers: usize,
    pub taps: Vec<usize>,
    /// Learnable words per prompt `L`.
    pub prompt_length: usize,
    /// Injected tokens per text layer `J`.
    pub deep_prompt_j: usize,
    pub deep_prompt_depth: usize,
    /// Object-level description used as the `[cls]` words.
    pub cls_template: String,
    /// Per-sample description when a sample names its object;
    /// `{object}` is substituted.
    pub object_template: String,
    pub use_cls: bool,
    pub temperature: f64,
    pub artifact_names: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 518,
            beta: 0.1,
            adapter_layers: 6,
            taps: vec![6, 12, 18, 24],
            prompt_length: 12,
            deep_prompt_j: 4,
            deep_prompt_depth: 9,
            cls_template: "a photo of an object".into(),
            object_template: "a photo of a {object}".into(),
            use_cls: true,
            temperature: 1.0,
            artifact_names: vec!["ghosting".into(), "lens_flare".into(), "moire".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    /// Epochs for stages I, II and III.
    pub epochs: [usize; 3],
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub class_balanced: bool,
    /// Drop clean images from the training split.
    pub exclude_clean: bool,
    /// Drop real-captured images from the training split.
    pub exclude_real: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            epochs: [20, 20, 20],
            learning_rate: 1e-3,
            batch_size: 8,
            grad_clip: 1.0,
            class_balanced: true,
            exclude_clean: false,
            exclude_real: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fpr_cap: 0.3 }
    }
}

/// Ablation variants, applied on top of the configured values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Fixed templates instead of learnable words and injected tokens.
    WithoutLte,
    /// No object-level `[cls]` words.
    WithoutCls,
    /// No vision adapters.
    WithoutAd,
    /// A single final-layer tap instead of the multi-layer projector sum.
    WithoutMg,
    /// Stages II and III only.
    WithoutStageI,
    /// Stage I only, predicting with the heads.
    WithoutStageIiIii,
    /// Clean images removed from training.
    WithoutClean,
    /// Real-captured images removed from training.
    WithoutReal,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::WithoutLte,
        Variant::WithoutCls,
        Variant::WithoutAd,
        Variant::WithoutMg,
        Variant::WithoutStageI,
        Variant::WithoutStageIiIii,
        Variant::WithoutClean,
        Variant::WithoutReal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutLte => "w/o LTE",
            Variant::WithoutCls => "w/o CLS",
            Variant::WithoutAd => "w/o AD",
            Variant::WithoutMg => "w/o MG",
            Variant::WithoutStageI => "w/o S-I",
            Variant::WithoutStageIiIii => "w/o S-II-III",
            Variant::WithoutClean => "w/o Clean",
            Variant::WithoutReal => "w/o Real",
        }
    }

    /// Rewrites `cfg` for this variant. `vision_layers` is the backbone
    /// depth (the final tap for `w/o MG`).
    pub fn apply(self, cfg: &mut RunConfig, vision_layers: usize) {
        match self {
            Variant::Full => {}
            Variant::WithoutLte => {
                cfg.model.prompt_length = 0;
                cfg.model.deep_prompt_j = 0;
            }
            Variant::WithoutCls => cfg.model.use_cls = false,
            Variant::WithoutAd => cfg.model.adapter_layers = 0,
            Variant::WithoutMg => cfg.model.taps = vec![vision_layers],
            Variant::WithoutStageI => cfg.train.stages.retain(|&s| s != Stage::I),
            Variant::WithoutStageIiIii => cfg.train.stages.retain(|&s| s == Stage::I),
            Variant::WithoutClean => cfg.train.exclude_clean = true,
            Variant::WithoutReal => cfg.train.exclude_real = true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .replace("w/o", "without")
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let v = match key.as_str() {
            "full" => Variant::Full,
            "withoutlte" => Variant::WithoutLte,
            "withoutcls" => Variant::WithoutCls,
            "withoutad" => Variant::WithoutAd,
            "withoutmg" => Variant::WithoutMg,
            "withoutsi" | "withoutstagei" => Variant::WithoutStageI,
            "withoutsiiiii" | "withoutstageiiiii" => Variant::WithoutStageIiIii,
            "withoutclean" => Variant::WithoutClean,
            "withoutreal" => Variant::WithoutReal,
            _ => return Err(Error::arg("variant", format!("unknown variant `{s}`"))),
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub backbone: BackboneSource,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitRatios,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Full,
            backbone: BackboneSource::Pretrained {
                path: PathBuf::from("checkpoints/vit-l-14"),
            },
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            split: SplitRatios::default(),
        }
    }
}

impl RunConfig {
    /// Small preset on the toy backbone (32×32 inputs, 4×4 patch grid).
    pub fn toy() -> Self {
        Self {
            backbone: BackboneSource::Toy(ToyBackboneConfig {
                token_dim: 32,
                embed_dim: 16,
                ..ToyBackboneConfig::default()
            }),
            model: ModelConfig {
                input_size: 32,
                adapter_layers: 2,
                taps: vec![1, 2, 3, 4],
                prompt_length: 4,
                deep_prompt_j: 2,
                deep_prompt_depth: 3,
                temperature: 0.07,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: [200, 100, 100],
                batch_size: 4,
                learning_rate: 2e-2,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        ClassTable::new(&self.model.artifact_names)
    }

    /// Checks that do not need the backbone.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&m.beta) {
            return bad(format!("beta {} outside [0, 1]", m.beta));
        }
        if m.taps.is_empty() || m.taps.contains(&0) {
            return bad("taps must be non-empty 1-based layer indices".into());
        }
        if !(m.temperature > 0.0 && m.temperature.is_finite()) {
            return bad(format!("temperature {} must be > 0", m.temperature));
        }
        if m.artifact_names.is_empty() {
            return bad("artifact_names must not be empty".into());
        }
        self.loss.check().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", t.learning_rate));
        }
        if t.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(t.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if t.stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad("stages must be distinct and in order I, II, III".into());
        }
        if !(self.eval.fpr_cap > 0.0 && self.eval.fpr_cap <= 1.0) {
            return bad(format!("fpr_cap {} outside (0, 1]", self.eval.fpr_cap));
        }
        self.split.check().map_err(|e| Error::Config(e.to_string()))?;
        self.class_table().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// The configuration with the variant applied.
    pub fn resolved(&self, vision_layers: usize) -> RunConfig {
        let mut cfg = self.clone();
        self.variant.apply(&mut cfg, vision_layers);
        cfg
    }
}
