//! Run configuration file.
//!
//! TOML by default, JSON when the file name ends in `.json`. Every section
//! is optional and every key has a default; unknown keys are errors.
//!
//! ```toml
//! seed = 7
//!
//! [scene]
//! image_size = 64
//! presence = 0.7
//! target_size = [6, 16]
//! distractors = [0, 3]
//! noise = 0.05
//!
//! [data]
//! train_frames = 512
//! test_frames = 128
//!
//! [model]
//! cells = [8, 4, 2]
//! channels = [8, 16, 24, 24, 24]
//!
//! [loss]
//! variant = "bce"   # bce | focal | balanced_focal | lrm | combined
//! alpha = 0.25
//! gamma = 1.5
//! xi = 30.0
//! rank_b = 0.35
//!
//! [train]
//! box_weight = 1.0
//! learning_rate = 0.03
//! epochs = 30
//! batch_size = 16
//!
//! [eval]
//! conf_thr = 0.5
//! iou_thr = 0.5
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{GridSpec, InferenceConfig, ModelSpec, SceneSpec, TrainConfig};
use crate::eval::Thresholds;
use crate::loss::{LossConfig, LossVariant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub image_size: usize,
    pub presence: f64,
    pub target_size: [usize; 2],
    pub distractors: [usize; 2],
    pub noise: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            image_size: s.image_size,
            presence: s.presence,
            target_size: s.target_size,
            distractors: s.distractors,
            noise: s.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_frames: usize,
    pub test_frames: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_frames: 512,
            test_frames: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub cells: [usize; 3],
    pub channels: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelSpec::default();
        Self {
            cells: m.grid.cells,
            channels: m.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub variant: LossVariant,
    pub alpha: f64,
    pub gamma: f64,
    pub xi: f64,
    pub rank_b: f64,
    pub eps: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::<f64>::default();
        Self {
            variant: l.variant,
            alpha: l.alpha,
            gamma: l.gamma,
            xi: l.xi,
            rank_b: l.rank_b,
            eps: l.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub box_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::<f64>::default();
        Self {
            box_weight: t.box_weight,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub conf_thr: f64,
    pub iou_thr: f64,
    /// Cells below this objectness are not decoded at all.
    pub min_confidence: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let t = Thresholds::<f64>::default();
        let i = InferenceConfig::default();
        Self {
            conf_thr: t.confidence,
            iou_thr: t.iou,
            min_confidence: i.min_confidence,
            nms_iou: i.nms_iou,
            max_detections: i.max_detections,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section, so a bad value fails before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        let model = self.model_spec();
        model.validate()?;
        if model.grid.image_size != self.scene.image_size {
            return Err(Error::config("model grid and scene disagree on image size"));
        }
        self.train_config().validate()?;
        if self.data.train_frames == 0 || self.data.test_frames == 0 {
            return Err(Error::config("data.train_frames and data.test_frames must be at least 1"));
        }
        for (key, v) in [("eval.conf_thr", self.eval.conf_thr), ("eval.iou_thr", self.eval.iou_thr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{key} = {v} outside [0, 1]")));
            }
        }
        self.inference().validate()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let s = &self.scene;
        SceneSpec {
            image_size: s.image_size,
            presence: s.presence,
            target_size: s.target_size,
            distractors: s.distractors,
            noise: s.noise,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            grid: GridSpec {
                image_size: self.scene.image_size,
                cells: self.model.cells,
            },
            channels: self.model.channels.clone(),
        }
    }

    pub fn loss_config(&self) -> LossConfig<f64> {
        let l = &self.loss;
        LossConfig {
            variant: l.variant,
            alpha: l.alpha,
            gamma: l.gamma,
            xi: l.xi,
            rank_b: l.rank_b,
            eps: l.eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        let t = &self.train;
        TrainConfig {
            loss: self.loss_config(),
            box_weight: t.box_weight,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
        }
    }

    pub fn thresholds(&self) -> Thresholds<f64> {
        Thresholds {
            confidence: self.eval.conf_thr,
            iou: self.eval.iou_thr,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            min_confidence: self.eval.min_confidence,
            nms_iou: self.eval.nms_iou,
            max_detections: self.eval.max_detections,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let l = cfg.loss_config();
        assert_eq!((l.alpha, l.gamma, l.xi, l.rank_b), (0.25, 1.5, 30.0, 0.35));
        assert_eq!((cfg.eval.conf_thr, cfg.eval.iou_thr), (0.5, 0.5));
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[loss]\nvariant = \"combined\"\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.variant, LossVariant::Combined);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train_config().seed, 3);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = toml::from_str::<RunConfig>("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn load_reads_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        std::fs::write(&toml_path, "seed = 11\n").unwrap();
        assert_eq!(RunConfig::load(&toml_path).unwrap().seed, 11);
        let json_path = dir.path().join("run.json");
        std::fs::write(&json_path, r#"{"seed": 12, "eval": {"conf_thr": 0.25}}"#).unwrap();
        let cfg = RunConfig::load(&json_path).unwrap();
        assert_eq!((cfg.seed, cfg.eval.conf_thr), (12, 0.25));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        for text in [
            "[loss]\nalpha = 1.5\n",
            "[train]\nepochs = 0\n",
            "[scene]\ntarget_size = [6, 99]\n",
            "[model]\nchannels = [8]\n",
            "[eval]\niou_thr = 2.0\n",
            "[data]\ntest_frames = 0\n",
        ] {
            std::fs::write(&path, text).unwrap();
            assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))), "{text}");
        }
    }
}
