//! Scene and training configuration. Both serialize to JSON with every field
//! spelled out; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::decoder::{CsqVariant, DecoderConfig, FirstLayerRule, ProjectionForm, ReferenceMode};
use crate::error::{Error, Result};
use crate::loss::{ClassLoss, LossWeights};
use crate::positional::DEFAULT_TEMPERATURE;

/// Synthetic scene generator settings. Sizes are fractions of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.classes == 0 {
            return bad("at least one class is required".into());
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad(format!(
                "size range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_size, self.max_size
            ));
        }
        Ok(())
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub attention: AttentionVariant,
    pub csq: CsqVariant,
    pub projection: ProjectionForm,
    pub reference: ReferenceMode,
    pub first_layer: FirstLayerRule,
    pub focal_loss: bool,
    pub offset_regression: bool,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub temperature: f64,
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Iteration at which both learning rates drop by 10x.
    pub lr_drop: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub scene: SceneConfig,
}

impl TrainConfig {
    /// Small default: 32x32 images with 8px patches (4x4 key grid).
    pub fn desk() -> Self {
        Self {
            attention: AttentionVariant::Conditional,
            csq: CsqVariant::Csq,
            projection: ProjectionForm::Diagonal,
            reference: ReferenceMode::Predicted,
            first_layer: FirstLayerRule::UnitTransform,
            focal_loss: true,
            offset_regression: true,
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 3,
            queries: 16,
            temperature: DEFAULT_TEMPERATURE,
            lr: 1e-3,
            lr_backbone: 1e-3,
            weight_decay: 1e-4,
            lr_drop: 400,
            iterations: 500,
            batch_size: 2,
            log_every: 10,
            seed: 0,
            loss: LossWeights::default(),
            scene: SceneConfig {
                image_size: 32,
                patch: 8,
                min_objects: 1,
                max_objects: 3,
                classes: 3,
                min_size: 0.25,
                max_size: 0.6,
                seed: 0,
            },
        }
    }

    /// The convergence-comparison setting: 64x64 images, 8x8 key grid.
    pub fn convergence() -> Self {
        let mut c = Self::desk();
        c.scene.image_size = 64;
        c.scene.min_size = 0.15;
        c.scene.max_size = 0.5;
        c
    }

    pub fn classes(&self) -> usize {
        self.scene.classes
    }

    pub fn class_loss(&self) -> ClassLoss {
        if self.focal_loss {
            ClassLoss::Focal
        } else {
            ClassLoss::CrossEntropy
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            width: self.width,
            heads: self.heads,
            layers: self.decoder_layers,
            queries: self.queries,
            classes: self.scene.classes,
            variant: self.attention,
            csq: self.csq,
            projection: self.projection,
            reference: self.reference,
            offset_regression: self.offset_regression,
            first_layer: self.first_layer,
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.decoder().validate().map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: String| Err(Error::Config(m));
        if self.scene.max_objects > self.queries {
            return bad(format!(
                "max_objects {} exceeds the {} object queries",
                self.scene.max_objects, self.queries
            ));
        }
        if self.iterations > 0 && self.lr_drop >= self.iterations {
            return bad(format!(
                "lr_drop {} must precede the last iteration {}",
                self.lr_drop, self.iterations
            ));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_backbone > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::convergence().validate().unwrap();
        assert_eq!(TrainConfig::convergence().scene.grid_side(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::desk().to_json()).unwrap();
        v["csq_varaint"] = serde_json::json!("csq");
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn missing_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::desk().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("offset_regression");
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut c = TrainConfig::desk();
        c.lr_drop = c.iterations;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.scene.max_objects = c.queries + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.iterations = 0;
        c.validate().unwrap();
        let mut c = TrainConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(lr in 1e-9f64..1.0, wd in 0.0f64..1.0, t in 1.0f64..1e6, seed in any::<u64>(), alpha in 0.01f64..0.99) {
            let mut c = TrainConfig::desk();
            c.lr = lr;
            c.weight_decay = wd;
            c.temperature = t;
            c.seed = seed;
            c.loss.focal_alpha = alpha;
            let back = TrainConfig::from_json(&c.to_json()).unwrap();
            prop_assert_eq!(back.lr.to_bits(), lr.to_bits());
            prop_assert_eq!(back.temperature.to_bits(), t.to_bits());
            prop_assert_eq!(back.loss.focal_alpha.to_bits(), alpha.to_bits());
            prop_assert_eq!(back, c);
        }
    }
}
